//! Two-layer CNN experts: `f_m(x) = Σ_j Σ_p σ(⟨w_{m,j}, x^(p)⟩)`.
//!
//! The second layer is fixed to all-ones and there are no biases.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MoeError, Result};
use crate::signal::{dot, Example, SignalBasis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Cubic,
    Relu,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Cubic => z * z * z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// ReLU'(0) is taken to be 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Cubic => 3.0 * z * z,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            Activation::Linear => 0,
            Activation::Cubic => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Cubic),
            2 => Ok(Activation::Relu),
            t => Err(MoeError::Format(format!("unknown activation tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Cubic => "cubic",
            Activation::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = MoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "identity" => Ok(Activation::Linear),
            "cubic" => Ok(Activation::Cubic),
            "relu" => Ok(Activation::Relu),
            other => Err(MoeError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// One expert's `J × d` filter matrix, rows are filters.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    filters: usize,
    d: usize,
    w: Vec<f64>,
}

impl ExpertWeights {
    pub fn zeros(filters: usize, d: usize) -> Self {
        Self {
            filters,
            d,
            w: vec![0.0; filters * d],
        }
    }

    pub fn from_vec(filters: usize, d: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != filters * d {
            return Err(shape_err(format!("{filters}x{d}"), w.len()));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(MoeError::NonFinite("expert weights"));
        }
        Ok(Self { filters, d, w })
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn filter(&self, j: usize) -> &[f64] {
        &self.w[j * self.d..(j + 1) * self.d]
    }

    pub fn filter_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.w[j * self.d..(j + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.w, &self.w).sqrt()
    }

    /// Forward on a raw `P × d` patch buffer; no shape checks.
    #[inline]
    pub(crate) fn forward_raw(&self, patches: &[f64], act: Activation) -> f64 {
        let mut out = 0.0;
        for wj in self.w.chunks_exact(self.d) {
            for x in patches.chunks_exact(self.d) {
                out += act.value(dot(wj, x));
            }
        }
        out
    }

    /// Forward that also stores every pre-activation `⟨w_j, x^(p)⟩` in `z`
    /// (laid out `j * P + p`).
    #[inline]
    pub(crate) fn forward_with_preacts(
        &self,
        patches: &[f64],
        act: Activation,
        z: &mut Vec<f64>,
    ) -> f64 {
        z.clear();
        let mut out = 0.0;
        for wj in self.w.chunks_exact(self.d) {
            for x in patches.chunks_exact(self.d) {
                let zz = dot(wj, x);
                z.push(zz);
                out += act.value(zz);
            }
        }
        out
    }

    /// `grad += scale · ∂f/∂W` given pre-activations from
    /// [`forward_with_preacts`](Self::forward_with_preacts).
    #[inline]
    pub(crate) fn accumulate_grad_raw(
        &self,
        patches: &[f64],
        z: &[f64],
        act: Activation,
        scale: f64,
        grad: &mut [f64],
    ) {
        let num_patches = patches.len() / self.d;
        for (j, gj) in grad.chunks_exact_mut(self.d).enumerate() {
            for (p, x) in patches.chunks_exact(self.d).enumerate() {
                let c = scale * act.derivative(z[j * num_patches + p]);
                if c != 0.0 {
                    gj.iter_mut().zip(x).for_each(|(g, xi)| *g += c * xi);
                }
            }
        }
    }

    fn check_example(&self, example: &Example) -> Result<()> {
        if example.dim() != self.d {
            return Err(shape_err(
                format!("patch dimension {}", self.d),
                example.dim(),
            ));
        }
        Ok(())
    }
}

/// `M` experts sharing `J`, `d` and the activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub activation: Activation,
    experts: Vec<ExpertWeights>,
}

impl ExpertBank {
    pub fn new(activation: Activation, experts: Vec<ExpertWeights>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| MoeError::Parameter("an expert bank needs M >= 1".into()))?;
        let (j, d) = (first.filters(), first.dim());
        if let Some(bad) = experts.iter().find(|e| e.filters() != j || e.dim() != d) {
            return Err(shape_err(
                format!("{j}x{d}"),
                format!("{}x{}", bad.filters(), bad.dim()),
            ));
        }
        Ok(Self {
            activation,
            experts,
        })
    }

    pub fn zeros(m: usize, filters: usize, d: usize, activation: Activation) -> Self {
        Self {
            activation,
            experts: (0..m).map(|_| ExpertWeights::zeros(filters, d)).collect(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn filters(&self) -> usize {
        self.experts[0].filters()
    }

    pub fn dim(&self) -> usize {
        self.experts[0].dim()
    }

    pub fn expert(&self, m: usize) -> &ExpertWeights {
        &self.experts[m]
    }

    pub fn expert_mut(&mut self, m: usize) -> &mut ExpertWeights {
        &mut self.experts[m]
    }

    pub fn experts(&self) -> &[ExpertWeights] {
        &self.experts
    }

    pub fn forward(&self, m: usize, example: &Example) -> Result<f64> {
        expert_forward(&self.experts[m], example, self.activation)
    }
}

pub fn init_expert_bank<R: Rng + ?Sized>(
    m: usize,
    filters: usize,
    d: usize,
    sigma0: f64,
    activation: Activation,
    rng: &mut R,
) -> Result<ExpertBank> {
    if m == 0 || filters == 0 || d == 0 {
        return Err(MoeError::Parameter(format!(
            "M, J, d must be positive (got {m}, {filters}, {d})"
        )));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(MoeError::Parameter(format!(
            "sigma0 must be positive, got {sigma0}"
        )));
    }
    let normal = Normal::new(0.0, sigma0).map_err(|e| MoeError::Parameter(e.to_string()))?;
    let experts = (0..m)
        .map(|_| ExpertWeights {
            filters,
            d,
            w: (0..filters * d).map(|_| normal.sample(rng)).collect(),
        })
        .collect();
    Ok(ExpertBank {
        activation,
        experts,
    })
}

pub fn expert_forward(weights: &ExpertWeights, example: &Example, act: Activation) -> Result<f64> {
    weights.check_example(example)?;
    Ok(weights.forward_raw(example.raw(), act))
}

/// `∂f_m/∂W_m`: row `j` is `Σ_p σ'(⟨w_j, x^(p)⟩)·x^(p)`.
pub fn expert_param_grad(
    weights: &ExpertWeights,
    example: &Example,
    act: Activation,
) -> Result<ExpertWeights> {
    weights.check_example(example)?;
    let mut z = Vec::new();
    weights.forward_with_preacts(example.raw(), act, &mut z);
    let mut grad = ExpertWeights::zeros(weights.filters, weights.d);
    weights.accumulate_grad_raw(example.raw(), &z, act, 1.0, &mut grad.w);
    Ok(grad)
}

/// Per expert, the `(k, j)` maximizing `⟨v_k, w_{m,j}⟩`; ties go to the
/// lexicographically smallest pair.
pub fn specialization_map(bank: &ExpertBank, basis: &SignalBasis) -> Result<Vec<(usize, usize)>> {
    if bank.dim() != basis.dim() {
        return Err(shape_err(basis.dim(), bank.dim()));
    }
    Ok(bank
        .experts()
        .iter()
        .map(|e| {
            let mut best = (0, 0);
            let mut best_val = f64::NEG_INFINITY;
            for k in 0..basis.clusters() {
                for j in 0..e.filters() {
                    let v = dot(basis.feature(k), e.filter(j));
                    if v > best_val {
                        best_val = v;
                        best = (k, j);
                    }
                }
            }
            best
        })
        .collect())
}

/// Group experts into the sets `M_k` from a specialization map.
pub fn specialization_sets(map: &[(usize, usize)], clusters: usize) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); clusters];
    for (m, &(k, _)) in map.iter().enumerate() {
        sets[k].push(m);
    }
    sets
}
