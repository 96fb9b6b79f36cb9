//! Linear router, softmax gates and noisy top-1 dispatch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MoeError, Result};
use crate::signal::{dot, Dataset, Example};

/// Router matrix `Θ ∈ R^{d×M}`, stored column by column.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterWeights {
    d: usize,
    m: usize,
    /// `theta[m * d + i] = Θ[i, m]`.
    theta: Vec<f64>,
}

impl RouterWeights {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            theta: vec![0.0; d * m],
        }
    }

    /// Build from a `d × M` row-major buffer.
    pub fn from_row_major(d: usize, m: usize, data: &[f64]) -> Result<Self> {
        if data.len() != d * m {
            return Err(shape_err(format!("{d}x{m}"), data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MoeError::NonFinite("router weights"));
        }
        let mut theta = vec![0.0; d * m];
        for i in 0..d {
            for c in 0..m {
                theta[c * d + i] = data[i * m + c];
            }
        }
        Ok(Self { d, m, theta })
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d * self.m];
        for i in 0..self.d {
            for c in 0..self.m {
                out[i * self.m + c] = self.theta[c * self.d + i];
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_experts(&self) -> usize {
        self.m
    }

    pub fn column(&self, m: usize) -> &[f64] {
        &self.theta[m * self.d..(m + 1) * self.d]
    }

    pub fn column_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.theta[m * self.d..(m + 1) * self.d]
    }

    /// Column-major buffer (`M` contiguous columns of length `d`).
    pub fn as_columns(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_columns_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// `Σ_m θ_m`.
    pub fn column_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.d];
        for col in self.theta.chunks_exact(self.d) {
            s.iter_mut().zip(col).for_each(|(a, b)| *a += b);
        }
        s
    }

    /// Logits from a precomputed patch sum.
    #[inline]
    pub fn logits_from_sum(&self, patch_sum: &[f64]) -> Vec<f64> {
        self.theta
            .chunks_exact(self.d)
            .map(|col| dot(col, patch_sum))
            .collect()
    }
}

/// Distribution of the per-expert routing perturbation `r_m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingNoise {
    /// `Unif[0, 1]`, density bound 1.
    Uniform01,
    /// No perturbation (deterministic dispatch).
    None,
    /// `Unif[0, width]`, density bound `1 / width`.
    Uniform { width: f64 },
}

impl RoutingNoise {
    /// Supremum of the noise density, `κ`. Infinite for the degenerate mode.
    pub fn density_bound(&self) -> f64 {
        match *self {
            RoutingNoise::Uniform01 => 1.0,
            RoutingNoise::None => f64::INFINITY,
            RoutingNoise::Uniform { width } => 1.0 / width,
        }
    }

    #[inline]
    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match *self {
            RoutingNoise::Uniform01 => out.iter_mut().for_each(|r| *r = rng.random::<f64>()),
            RoutingNoise::None => out.fill(0.0),
            RoutingNoise::Uniform { width } => {
                out.iter_mut().for_each(|r| *r = width * rng.random::<f64>())
            }
        }
    }
}

/// `h_m = ⟨θ_m, Σ_p x^(p)⟩`.
pub fn gate_logits(router: &RouterWeights, example: &Example) -> Result<Vec<f64>> {
    if example.dim() != router.dim() {
        return Err(shape_err(router.dim(), example.dim()));
    }
    Ok(router.logits_from_sum(&example.patch_sum()))
}

/// Softmax with max subtraction.
pub fn softmax_gates(h: &[f64]) -> Result<Vec<f64>> {
    if h.iter().any(|v| v.is_nan()) {
        return Err(MoeError::NonFinite("gate logits"));
    }
    if h.is_empty() {
        return Err(MoeError::Empty("gate logits".into()));
    }
    Ok(softmax_unchecked(h))
}

#[inline]
pub(crate) fn softmax_unchecked(h: &[f64]) -> Vec<f64> {
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = h.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Index of the largest `h_m + r_m`; ties go to the smallest index.
#[inline]
pub fn route_top1(h: &[f64], r: &[f64]) -> usize {
    debug_assert_eq!(h.len(), r.len());
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (m, (a, b)) in h.iter().zip(r).enumerate() {
        let v = a + b;
        if v > best_val {
            best_val = v;
            best = m;
        }
    }
    best
}

/// Noiseless dispatch.
#[inline]
pub fn argmax(h: &[f64]) -> usize {
    let mut best = 0;
    for (m, v) in h.iter().enumerate() {
        if *v > h[best] {
            best = m;
        }
    }
    best
}

/// Selection frequencies over `samples` fresh noise draws.
pub fn routing_probabilities_mc<R: Rng + ?Sized>(
    h: &[f64],
    samples: usize,
    noise: RoutingNoise,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(MoeError::Parameter("need at least one Monte Carlo sample".into()));
    }
    let mut counts = vec![0u64; h.len()];
    let mut r = vec![0.0; h.len()];
    for _ in 0..samples {
        noise.fill(rng, &mut r);
        counts[route_top1(h, &r)] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / samples as f64)
        .collect())
}

/// Closed form for two experts under `Unif[0,1]` noise: `r_2 − r_1` has the
/// triangular density on `[−1, 1]`.
pub fn routing_probabilities_exact2(h: &[f64]) -> Result<[f64; 2]> {
    if h.len() != 2 {
        return Err(MoeError::Unsupported(format!(
            "exact routing probabilities need M = 2, got M = {}",
            h.len()
        )));
    }
    let delta = (h[0] - h[1]).clamp(-1.0, 1.0);
    let p1 = if delta >= 0.0 {
        1.0 - (1.0 - delta).powi(2) / 2.0
    } else {
        (1.0 + delta).powi(2) / 2.0
    };
    Ok([p1, 1.0 - p1])
}

/// `Load_m = Σ_i P(m_i = m)`, each probability estimated from `samples` draws.
pub fn expert_load<R: Rng + ?Sized>(
    router: &RouterWeights,
    dataset: &Dataset,
    samples: usize,
    noise: RoutingNoise,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut load = vec![0.0; router.num_experts()];
    for ex in dataset.iter() {
        let h = gate_logits(router, ex)?;
        let p = routing_probabilities_mc(&h, samples, noise, rng)?;
        load.iter_mut().zip(&p).for_each(|(l, q)| *l += q);
    }
    Ok(load)
}
