//! Numerical checks of the routing bounds, the four-point symmetry identity,
//! router zero-sum, and gradient correctness.

use std::fmt::{self, Write as _};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::experts::{init_expert_bank, Activation};
use crate::gating::{route_top1, routing_probabilities_exact2, RouterWeights, RoutingNoise};
use crate::signal::{
    build_orthonormal_basis, dot, gaussian_noise_block, symmetry_quadruple, BasisMode, Example,
    QuadrupleSeed,
};
use crate::training::{perturbed_loss_and_grads, perturbed_loss_with_routes, MoeModel, NoiseMatrix};

/// Smallest Monte Carlo budget accepted by the routing checks.
pub const MIN_SAMPLES: usize = 10_000;

/// Outcome of one check, possibly aggregated over many trials.
///
/// `max_ratio` is the largest observed/allowed ratio; the check passes when it
/// does not exceed 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub trials: usize,
    pub max_ratio: f64,
    pub tolerance: f64,
    pub applicable: bool,
    pub passed: bool,
    pub detail: String,
}

impl LemmaReport {
    fn new(lemma: &str, trials: usize, max_ratio: f64, tolerance: f64, detail: String) -> Self {
        Self {
            lemma: lemma.to_string(),
            trials,
            max_ratio,
            tolerance,
            applicable: true,
            passed: max_ratio <= 1.0,
            detail,
        }
    }

    fn not_applicable(lemma: &str, detail: String) -> Self {
        Self {
            lemma: lemma.to_string(),
            trials: 0,
            max_ratio: 0.0,
            tolerance: 0.0,
            applicable: false,
            passed: true,
            detail,
        }
    }

    /// Folds `other` into `self`, keeping the worst ratio.
    pub fn merge(&mut self, other: &LemmaReport) {
        if !other.applicable {
            return;
        }
        if !self.applicable {
            *self = other.clone();
            return;
        }
        self.trials += other.trials;
        if other.max_ratio > self.max_ratio {
            self.max_ratio = other.max_ratio;
            self.detail = other.detail.clone();
        }
        self.passed &= other.passed;
    }
}

impl fmt::Display for LemmaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match (self.applicable, self.passed) {
            (false, _) => "N/A",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        write!(
            f,
            "{:<24} {:>4} trials={:<6} max_ratio={:<12.4e} {}",
            self.lemma, status, self.trials, self.max_ratio, self.detail
        )
    }
}

fn ratio(observed: f64, allowed: f64) -> f64 {
    if allowed > 0.0 {
        observed / allowed
    } else if observed == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_SAMPLES {
        return Err(MoeError::Parameter(format!(
            "need at least {MIN_SAMPLES} Monte Carlo samples, got {samples}"
        )));
    }
    Ok(())
}

fn check_logits(h: &[f64]) -> Result<()> {
    if h.len() < 2 {
        return Err(MoeError::Parameter("routing checks need M >= 2".into()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFinite("gate logits"));
    }
    Ok(())
}

/// Closed-form two-expert probabilities for uniform noise of any width.
pub fn exact_two_expert(h: &[f64], noise: RoutingNoise) -> Option<[f64; 2]> {
    let width = match noise {
        RoutingNoise::Uniform01 => 1.0,
        RoutingNoise::Uniform { width } => width,
        RoutingNoise::None => return None,
    };
    if h.len() != 2 {
        return None;
    }
    routing_probabilities_exact2(&[h[0] / width, h[1] / width]).ok()
}

/// Coupled Monte Carlo estimate of `p(h) − p(ĥ)` with per-coordinate
/// standard errors. Both logit vectors see the same noise draw.
pub fn coupled_probability_gap<R: Rng + ?Sized>(
    h: &[f64],
    h_hat: &[f64],
    noise: RoutingNoise,
    samples: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let m = h.len();
    let mut sum = vec![0.0f64; m];
    let mut sq = vec![0.0f64; m];
    let mut r = vec![0.0; m];
    for _ in 0..samples {
        noise.fill(rng, &mut r);
        let a = route_top1(h, &r);
        let b = route_top1(h_hat, &r);
        if a != b {
            sum[a] += 1.0;
            sum[b] -= 1.0;
            sq[a] += 1.0;
            sq[b] += 1.0;
        }
    }
    let s = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / s).collect();
    let se = sq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| ((q / s - mu * mu).max(0.0) / s).sqrt())
        .collect();
    (mean, se)
}

/// Smoothing bound `‖p(h) − p(ĥ)‖∞ ≤ κ M² ‖h − ĥ‖∞`, with `κ` the noise
/// density bound. Two experts under uniform noise use the closed form;
/// otherwise the gap is estimated with common random numbers and the bound is
/// widened by three standard errors.
pub fn check_smoothing<R: Rng + ?Sized>(
    h: &[f64],
    h_hat: &[f64],
    noise: RoutingNoise,
    samples: usize,
    rng: &mut R,
) -> Result<LemmaReport> {
    check_logits(h)?;
    check_logits(h_hat)?;
    if h.len() != h_hat.len() {
        return Err(crate::error::shape_err(h.len(), h_hat.len()));
    }
    check_samples(samples)?;
    let m = h.len() as f64;
    let kappa = noise.density_bound();
    if !kappa.is_finite() {
        return Err(MoeError::Parameter(
            "smoothing needs noise with a bounded density".into(),
        ));
    }
    let bound = kappa * m * m * sup_dist(h, h_hat);
    let (observed, se, how) = match (exact_two_expert(h, noise), exact_two_expert(h_hat, noise)) {
        (Some(p), Some(q)) => (sup_dist(&p, &q), 0.0, "exact"),
        _ => {
            let (gap, se) = coupled_probability_gap(h, h_hat, noise, samples, rng);
            let observed = gap.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let se = se.iter().copied().fold(0.0, f64::max);
            (observed, se, "mc")
        }
    };
    let allowed = bound + 3.0 * se;
    Ok(LemmaReport::new(
        "smoothing",
        1,
        ratio(observed, allowed),
        3.0 * se,
        format!("M={} {how} observed={observed:.3e} bound={bound:.3e}", h.len()),
    ))
}

/// Pairwise bound `|p_m − p_m'| ≤ κ M² |h_m − h_m'|` for every pair.
pub fn check_pairwise_gate<R: Rng + ?Sized>(
    h: &[f64],
    noise: RoutingNoise,
    samples: usize,
    rng: &mut R,
) -> Result<LemmaReport> {
    check_logits(h)?;
    check_samples(samples)?;
    let kappa = noise.density_bound();
    if !kappa.is_finite() {
        return Err(MoeError::Parameter(
            "pairwise check needs noise with a bounded density".into(),
        ));
    }
    let m = h.len();
    let s = samples as f64;
    let (p, exact) = match exact_two_expert(h, noise) {
        Some(p) => (p.to_vec(), true),
        None => {
            let mut counts = vec![0u64; m];
            let mut r = vec![0.0; m];
            for _ in 0..samples {
                noise.fill(rng, &mut r);
                counts[route_top1(h, &r)] += 1;
            }
            (counts.into_iter().map(|c| c as f64 / s).collect(), false)
        }
    };
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for a in 0..m {
        for b in a + 1..m {
            let diff = p[a] - p[b];
            let se = if exact {
                0.0
            } else {
                ((p[a] + p[b] - diff * diff).max(0.0) / s).sqrt()
            };
            let allowed = kappa * (m * m) as f64 * (h[a] - h[b]).abs() + 3.0 * se;
            let r = ratio(diff.abs(), allowed);
            if r > worst || detail.is_empty() {
                worst = worst.max(r);
                detail = format!("M={m} pair=({},{}) |dp|={:.3e}", a + 1, b + 1, diff.abs());
            }
        }
    }
    Ok(LemmaReport::new("pairwise_gate", 1, worst, 0.0, detail))
}

/// An expert whose logit trails the leader by at least 1 is never chosen under
/// `Unif[0,1]` noise. Reports not-applicable when the gap is smaller.
pub fn check_gap_no_route<R: Rng + ?Sized>(
    h: &[f64],
    expert: usize,
    samples: usize,
    rng: &mut R,
) -> Result<LemmaReport> {
    check_logits(h)?;
    check_samples(samples)?;
    if expert >= h.len() {
        return Err(MoeError::Parameter(format!(
            "expert {expert} out of range for M = {}",
            h.len()
        )));
    }
    let leader = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap = leader - h[expert];
    if gap < 1.0 {
        return Ok(LemmaReport::not_applicable(
            "gap_no_route",
            format!("gap {gap:.3} < 1"),
        ));
    }
    let mut r = vec![0.0; h.len()];
    let mut hits = 0usize;
    for _ in 0..samples {
        RoutingNoise::Uniform01.fill(rng, &mut r);
        if route_top1(h, &r) == expert {
            hits += 1;
        }
    }
    Ok(LemmaReport::new(
        "gap_no_route",
        1,
        if hits == 0 { 0.0 } else { f64::INFINITY },
        0.0,
        format!("gap={gap:.3} selections={hits}/{samples}"),
    ))
}

/// `Σ_c y_c F(x_c)` over the four examples of a symmetry quadruple, for a
/// model that applies `per_patch` to every patch and sums.
pub fn symmetry_margin_sum(per_patch: &dyn Fn(&[f64]) -> f64, quad: &[Example; 4]) -> f64 {
    quadruple_margins(per_patch, quad).iter().sum()
}

/// The four margins `y_c F(x_c)` themselves.
pub fn quadruple_margins(per_patch: &dyn Fn(&[f64]) -> f64, quad: &[Example; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (o, ex) in out.iter_mut().zip(quad) {
        let f: f64 = ex.patches().map(per_patch).sum();
        *o = ex.label() * f;
    }
    out
}

/// Random two-layer network `x ↦ Σ_j a_j σ(⟨w_j, x⟩ + b_j)` applied per patch.
#[derive(Clone, Debug)]
pub struct PatchNet {
    pub activation: PatchActivation,
    pub weights: Vec<Vec<f64>>,
    pub outer: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchActivation {
    Expert(Activation),
    Tanh,
}

impl PatchNet {
    pub fn random<R: Rng + ?Sized>(
        d: usize,
        width: usize,
        activation: PatchActivation,
        rng: &mut R,
    ) -> Self {
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        let scale = 1.0 / (d as f64).sqrt();
        let weights = (0..width)
            .map(|_| (0..d).map(|_| normal() * scale).collect())
            .collect();
        let outer = (0..width).map(|_| normal()).collect();
        let bias = (0..width).map(|_| normal() * 0.5).collect();
        Self {
            activation,
            weights,
            outer,
            bias,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(&self.outer)
            .zip(&self.bias)
            .map(|((w, a), b)| {
                let z = dot(w, x) + b;
                let s = match self.activation {
                    PatchActivation::Expert(act) => act.value(z),
                    PatchActivation::Tanh => z.tanh(),
                };
                a * s
            })
            .sum()
    }
}

/// Random symmetry quadruples scored by random patch networks. Passes when
/// every margin sum is within `rel_tol` of zero relative to the margin scale
/// and the smallest margin of each quadruple is non-positive.
pub fn certify_symmetry<R: Rng + ?Sized>(
    trials: usize,
    rel_tol: f64,
    rng: &mut R,
) -> Result<LemmaReport> {
    const D: usize = 24;
    const K: usize = 4;
    const P: usize = 5;
    let acts = [
        PatchActivation::Expert(Activation::Linear),
        PatchActivation::Expert(Activation::Cubic),
        PatchActivation::Expert(Activation::Relu),
        PatchActivation::Tanh,
    ];
    let mut worst = 0.0f64;
    let mut detail = String::from("no trials");
    let mut positive_min = 0usize;
    for trial in 0..trials {
        let mode = if trial % 2 == 0 {
            BasisMode::Canonical
        } else {
            BasisMode::Random
        };
        let basis = build_orthonormal_basis(D, K, rng, mode)?;
        let k = rng.random_range(0..K);
        let k_prime = (k + rng.random_range(1..K)) % K;
        let seed = QuadrupleSeed {
            k,
            k_prime,
            y: if rng.random::<bool>() { 1 } else { -1 },
            alpha: rng.random_range(0.5..2.0),
            beta: rng.random_range(1.0..2.0),
            gamma: rng.random_range(0.5..3.0),
        };
        let noise = gaussian_noise_block(D, P - 3, 1.0, rng);
        let quad = symmetry_quadruple(&basis, seed, &noise)?;
        let net = PatchNet::random(D, 8, acts[trial % acts.len()], rng);
        let margins = quadruple_margins(&|x| net.eval(x), &quad);
        let sum: f64 = margins.iter().sum();
        let scale = margins.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        let r = (sum.abs() / scale) / rel_tol;
        let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            positive_min += 1;
        }
        if r >= worst {
            worst = r;
            detail = format!("worst |sum|/scale={:.3e} min_margin={min:.3e}", sum.abs() / scale);
        }
    }
    let mut report = LemmaReport::new("symmetry", trials, worst, rel_tol, detail);
    if positive_min > 0 {
        report.passed = false;
        report.detail.push_str(&format!(" positive_min_trials={positive_min}"));
    }
    Ok(report)
}

/// Router zero-sum: `‖Σ_m θ_m(t) − Σ_m θ_m(0)‖₂ ≤ tol · (1 + t)` at every
/// snapshot `(t, Σ_m θ_m(t))`.
pub fn check_router_zero_sum(
    snapshots: &[(usize, Vec<f64>)],
    initial_sum: &[f64],
    tol: f64,
) -> Result<LemmaReport> {
    if snapshots.is_empty() {
        return Err(MoeError::Empty("router snapshots".into()));
    }
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for (t, sum) in snapshots {
        if sum.len() != initial_sum.len() {
            return Err(crate::error::shape_err(initial_sum.len(), sum.len()));
        }
        let drift = sum
            .iter()
            .zip(initial_sum)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let r = drift / (tol * (1 + t) as f64);
        if r >= worst {
            worst = r;
            detail = format!("t={t} drift={drift:.3e}");
        }
    }
    Ok(LemmaReport::new("router_zero_sum", snapshots.len(), worst, tol, detail))
}

/// Largest column-sum norm of a router gradient relative to its size.
pub fn router_gradient_zero_sum(grad: &RouterWeights) -> f64 {
    let sum = grad.column_sum();
    dot(&sum, &sum).sqrt()
}

/// Finite-difference comparison of the analytic gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub expert_max_rel: f64,
    pub router_max_rel: f64,
    pub checked: usize,
    /// Router coordinates whose perturbation changed some route.
    pub skipped: usize,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.expert_max_rel.max(self.router_max_rel)
    }
}

/// Central differences with step `step` on every parameter. Relative error
/// per coordinate is `|a − n| / max(|a|, |n|, 1e-3 · ‖a_block‖∞, 1e-8)` where
/// the block is the expert or router gradient. Router coordinates whose
/// perturbation flips a route are skipped because the perturbed loss is
/// discontinuous there.
pub fn grad_check(
    model: &MoeModel,
    batch: &[Example],
    noise: &NoiseMatrix,
    step: f64,
) -> Result<GradCheck> {
    if !(step > 0.0) {
        return Err(MoeError::Parameter("finite-difference step must be positive".into()));
    }
    let grads = perturbed_loss_and_grads(model, batch, noise)?;
    let expert_scale = grads
        .experts
        .iter()
        .flat_map(|g| g.as_slice().iter())
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let router_scale = grads
        .router
        .as_columns()
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let rel = |a: f64, n: f64, scale: f64| {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-8)
    };

    let mut work = model.clone();
    let mut expert_max = 0.0f64;
    let mut checked = 0usize;
    for m in 0..model.num_experts() {
        let len = model.bank.expert(m).as_slice().len();
        for idx in 0..len {
            let orig = work.bank.expert(m).as_slice()[idx];
            work.bank.expert_mut(m).as_mut_slice()[idx] = orig + step;
            let (plus, _) = perturbed_loss_with_routes(&work, batch, noise)?;
            work.bank.expert_mut(m).as_mut_slice()[idx] = orig - step;
            let (minus, _) = perturbed_loss_with_routes(&work, batch, noise)?;
            work.bank.expert_mut(m).as_mut_slice()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.experts[m].as_slice()[idx];
            expert_max = expert_max.max(rel(analytic, numeric, expert_scale));
            checked += 1;
        }
    }

    let mut router_max = 0.0f64;
    let mut skipped = 0usize;
    let len = model.router.as_columns().len();
    for idx in 0..len {
        let orig = work.router.as_columns()[idx];
        work.router.as_columns_mut()[idx] = orig + step;
        let (plus, routes_p) = perturbed_loss_with_routes(&work, batch, noise)?;
        work.router.as_columns_mut()[idx] = orig - step;
        let (minus, routes_m) = perturbed_loss_with_routes(&work, batch, noise)?;
        work.router.as_columns_mut()[idx] = orig;
        if routes_p != grads.routes || routes_m != grads.routes {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.router.as_columns()[idx];
        router_max = router_max.max(rel(analytic, numeric, router_scale));
        checked += 1;
    }
    Ok(GradCheck {
        expert_max_rel: expert_max,
        router_max_rel: router_max,
        checked,
        skipped,
    })
}

/// Random small problems for the gradient check: a Setting-1-like batch, a
/// random cubic or linear bank and a random router.
pub fn random_gradcheck_case<R: Rng + ?Sized>(
    rng: &mut R,
) -> Result<(MoeModel, Vec<Example>, NoiseMatrix)> {
    const D: usize = 50;
    const K: usize = 4;
    const P: usize = 4;
    const M: usize = 8;
    const J: usize = 4;
    const BATCH: usize = 32;
    let basis = build_orthonormal_basis(D, K, rng, BasisMode::Random)?;
    let config = crate::signal::DataConfig {
        d: D,
        patches: P,
        clusters: K,
        n: BATCH,
        alpha: crate::signal::Interval::new(0.5, 2.0)?,
        beta: crate::signal::Interval::new(1.0, 2.0)?,
        gamma: crate::signal::Interval::new(0.5, 3.0)?,
        sigma_p: 1.0,
        shuffle_patches: true,
    };
    let batch = (0..BATCH)
        .map(|_| crate::signal::sample_example(&config, &basis, rng))
        .collect::<Result<Vec<_>>>()?;
    let act = if rng.random::<bool>() {
        Activation::Cubic
    } else {
        Activation::Linear
    };
    let bank = init_expert_bank(M, J, D, 0.3, act, rng)?;
    let theta: Vec<f64> = (0..D * M)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.3 * z
        })
        .collect();
    let router = RouterWeights::from_row_major(D, M, &theta)?;
    let model = MoeModel::new(bank, router)?;
    let noise = NoiseMatrix::sample(BATCH, M, RoutingNoise::Uniform01, rng);
    Ok((model, batch, noise))
}

/// Every single-expert accuracy must stay at or below `0.875 + eps`.
pub fn single_expert_ceiling(accuracies: &[(String, f64)], eps: f64) -> LemmaReport {
    let limit = 0.875 + eps;
    let worst = accuracies.iter().map(|(_, a)| a / limit).fold(0.0, f64::max);
    let mut detail = format!("limit={limit:.4}");
    for (name, acc) in accuracies {
        let _ = write!(detail, " {name}={acc:.4}");
    }
    LemmaReport::new("single_ceiling", accuracies.len(), worst, eps, detail)
}

/// Random logit pairs for the smoothing check: `h ~ U[−1,1]^M`, `ĥ = h + δ`
/// with `δ ~ U[−0.3, 0.3]^M`.
pub fn random_logit_pair<R: Rng + ?Sized>(m: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h_hat = h.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    (h, h_hat)
}

/// Smoothing over `trials` random pairs for each expert count in `ms`.
///
/// Two-expert trials are also estimated by Monte Carlo; the pooled
/// standardized residual against the closed form must lie within 3.
pub fn certify_smoothing<R: Rng + ?Sized>(
    ms: &[usize],
    trials: usize,
    samples: usize,
    noise: RoutingNoise,
    rng: &mut R,
) -> Result<Vec<LemmaReport>> {
    let mut bound = LemmaReport::not_applicable("smoothing", "no trials".into());
    let mut z_sum = 0.0;
    let mut z_count = 0usize;
    let mut z_max = 0.0f64;
    let mut two_expert_trials = 0usize;
    for &m in ms {
        for _ in 0..trials {
            let (h, h_hat) = random_logit_pair(m, rng);
            if m == 2 {
                two_expert_trials += 1;
                let exact = exact_two_expert(&h, noise).expect("uniform noise");
                let exact_hat = exact_two_expert(&h_hat, noise).expect("uniform noise");
                let (gap, se) = coupled_probability_gap(&h, &h_hat, noise, samples, rng);
                let target = exact[0] - exact_hat[0];
                // Two experts: disagreements go one way, binomial with rate |target|.
                let q = target.abs();
                let se_exact = (q * (1.0 - q) / samples as f64).sqrt();
                if se_exact > 0.0 {
                    let z = (gap[0] - target) / se_exact;
                    z_sum += z;
                    z_count += 1;
                    z_max = z_max.max(z.abs());
                } else if gap[0] != target {
                    z_max = f64::INFINITY;
                }
                // The bound itself is checked on the Monte Carlo estimate too.
                let observed = gap.iter().map(|v| v.abs()).fold(0.0, f64::max);
                let se_max = se.iter().copied().fold(0.0, f64::max);
                let allowed = noise.density_bound() * 4.0 * sup_dist(&h, &h_hat) + 3.0 * se_max;
                bound.merge(&LemmaReport::new(
                    "smoothing",
                    0,
                    ratio(observed, allowed),
                    3.0 * se_max,
                    format!("M=2 mc observed={observed:.3e}"),
                ));
            }
            bound.merge(&check_smoothing(&h, &h_hat, noise, samples, rng)?);
        }
    }
    let mut reports = vec![bound];
    if z_count > 0 || z_max.is_infinite() {
        let pooled = if z_count > 0 && z_max.is_finite() {
            z_sum / (z_count as f64).sqrt()
        } else {
            f64::INFINITY
        };
        reports.push(LemmaReport::new(
            "smoothing_exact2",
            two_expert_trials,
            pooled.abs() / 3.0,
            3.0,
            format!("pooled_z={pooled:.3} max_abs_z={z_max:.3}"),
        ));
    }
    Ok(reports)
}

/// Pairwise-gate bound over `trials` random logit vectors per expert count.
pub fn certify_pairwise<R: Rng + ?Sized>(
    ms: &[usize],
    trials: usize,
    samples: usize,
    noise: RoutingNoise,
    rng: &mut R,
) -> Result<LemmaReport> {
    let mut report = LemmaReport::not_applicable("pairwise_gate", "no trials".into());
    for &m in ms {
        for _ in 0..trials {
            let h: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            report.merge(&check_pairwise_gate(&h, noise, samples, rng)?);
        }
    }
    Ok(report)
}

/// Gap check over `vectors` random logit vectors, each with one expert pushed
/// at least 1 below the leader.
pub fn certify_gap<R: Rng + ?Sized>(
    m: usize,
    vectors: usize,
    samples: usize,
    rng: &mut R,
) -> Result<LemmaReport> {
    let mut report = LemmaReport::not_applicable("gap_no_route", "no trials".into());
    for _ in 0..vectors {
        let mut h: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = rng.random_range(0..m);
        let leader = h
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != target)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        h[target] = leader - 1.0 - rng.random_range(0.0..1.0);
        report.merge(&check_gap_no_route(&h, target, samples, rng)?);
    }
    Ok(report)
}

/// Gradient check over `cases` random problems.
pub fn certify_gradients<R: Rng + ?Sized>(
    cases: usize,
    step: f64,
    tol: f64,
    rng: &mut R,
) -> Result<LemmaReport> {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut skipped = 0usize;
    let mut checked = 0usize;
    for case in 0..cases {
        let (model, batch, noise) = random_gradcheck_case(rng)?;
        let gc = grad_check(&model, &batch, &noise, step)?;
        skipped += gc.skipped;
        checked += gc.checked;
        let r = gc.max_rel_error() / tol;
        if r >= worst {
            worst = r;
            detail = format!(
                "case={case} expert_rel={:.2e} router_rel={:.2e}",
                gc.expert_max_rel, gc.router_max_rel
            );
        }
    }
    let _ = write!(detail, " checked={checked} skipped={skipped}");
    Ok(LemmaReport::new("gradcheck", cases, worst, tol, detail))
}

/// Machine-readable report, one CSV row per check.
pub fn reports_to_csv(reports: &[LemmaReport]) -> String {
    let mut out = String::from("lemma,trials,max_ratio,tolerance,applicable,passed,detail\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{},{},\"{}\"",
            r.lemma,
            r.trials,
            r.max_ratio,
            r.tolerance,
            r.applicable,
            r.passed,
            r.detail.replace('"', "'")
        );
    }
    out
}

/// Human-readable summary table.
pub fn reports_to_table(reports: &[LemmaReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "{r}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::LabRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> LabRng {
        LabRng::seed_from_u64(seed)
    }

    #[test]
    fn smoothing_equal_logits_is_zero() {
        let h = [0.1, -0.4, 0.7, 0.0];
        let rep = check_smoothing(&h, &h, RoutingNoise::Uniform01, 20_000, &mut rng(1)).unwrap();
        assert!(rep.passed && rep.max_ratio == 0.0);
    }

    #[test]
    fn smoothing_two_experts_is_exact() {
        let rep = check_smoothing(&[0.0, 0.0], &[0.2, 0.0], RoutingNoise::Uniform01, 20_000, &mut rng(2))
            .unwrap();
        // p1 moves from 0.5 to 1 − 0.8²/2 = 0.68; bound is 4 · 0.2.
        assert!((rep.max_ratio - 0.18 / 0.8).abs() < 1e-12, "{rep}");
    }

    #[test]
    fn smoothing_rejects_small_budgets() {
        assert!(check_smoothing(&[0.0, 1.0], &[0.0, 1.0], RoutingNoise::Uniform01, 100, &mut rng(3)).is_err());
        assert!(check_smoothing(&[0.0, 1.0], &[0.0], RoutingNoise::Uniform01, 20_000, &mut rng(3)).is_err());
    }

    #[test]
    fn pairwise_constant_logits_within_noise() {
        let rep = check_pairwise_gate(&[0.3; 4], RoutingNoise::Uniform01, 50_000, &mut rng(4)).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn gap_lemma() {
        let rep = check_gap_no_route(&[1.0, 0.0, 0.5], 1, 20_000, &mut rng(5)).unwrap();
        assert!(rep.applicable && rep.passed);
        let rep = check_gap_no_route(&[1.0, 0.2, 0.5], 1, 20_000, &mut rng(5)).unwrap();
        assert!(!rep.applicable);
    }

    #[test]
    fn symmetry_identity_holds() {
        let rep = certify_symmetry(40, 1e-9, &mut rng(6)).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn zero_sum_detects_drift() {
        let init = vec![0.0; 3];
        let ok = vec![(0, vec![0.0; 3]), (10, vec![1e-12, 0.0, 0.0])];
        assert!(check_router_zero_sum(&ok, &init, 1e-9).unwrap().passed);
        let bad = vec![(1, vec![1e-6, 0.0, 0.0])];
        assert!(!check_router_zero_sum(&bad, &init, 1e-9).unwrap().passed);
    }

    #[test]
    fn gradient_check_small() {
        let mut r = rng(7);
        let (model, batch, noise) = random_gradcheck_case(&mut r).unwrap();
        let gc = grad_check(&model, &batch, &noise, 1e-5).unwrap();
        assert!(gc.max_rel_error() <= 1e-5, "{gc:?}");
    }

    #[test]
    fn ceiling_flags_accuracy_above_limit() {
        let ok = single_expert_ceiling(&[("cubic".into(), 0.73), ("relu".into(), 0.88)], 0.01);
        assert!(ok.passed);
        let bad = single_expert_ceiling(&[("cubic".into(), 0.95)], 0.01);
        assert!(!bad.passed);
    }

    #[test]
    fn csv_has_one_row_per_report() {
        let reps = vec![single_expert_ceiling(&[("a".into(), 0.5)], 0.01)];
        assert_eq!(reports_to_csv(&reps).lines().count(), 2);
    }
}
