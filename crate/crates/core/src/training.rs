//! Perturbed-loss gradients and the training loop.
//!
//! Experts take normalized steps of Frobenius length `η`; the router takes
//! plain gradient steps of size `η_r`. Routing noise is redrawn every
//! iteration, one `M`-vector per example.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MoeError, Result};
use crate::experts::{init_expert_bank, Activation, ExpertBank, ExpertWeights};
use crate::gating::{argmax, route_top1, softmax_unchecked, RouterWeights, RoutingNoise};
use crate::metrics::{self, DispatchMatrix};
use crate::rng::{SeedStreams, Stream};
use crate::signal::{dot, Dataset, Example};

/// Examples per partial sum; fixes the reduction tree independently of the
/// thread count.
const CHUNK: usize = 128;

/// Gradient norms at or below this are treated as zero by [`step`].
pub const ZERO_GRAD_GUARD: f64 = 1e-12;

/// `ℓ(z) = log(1 + e^{−z})`.
pub fn logistic_loss(z: f64) -> Result<f64> {
    if z.is_nan() {
        return Err(MoeError::NonFinite("logistic loss argument"));
    }
    Ok(loss_raw(z))
}

/// `ℓ'(z) = −1 / (1 + e^{z})`.
pub fn logistic_loss_deriv(z: f64) -> Result<f64> {
    if z.is_nan() {
        return Err(MoeError::NonFinite("logistic loss argument"));
    }
    Ok(loss_deriv_raw(z))
}

#[inline]
fn loss_raw(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn loss_deriv_raw(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub bank: ExpertBank,
    pub router: RouterWeights,
}

impl MoeModel {
    pub fn new(bank: ExpertBank, router: RouterWeights) -> Result<Self> {
        if bank.num_experts() != router.num_experts() || bank.dim() != router.dim() {
            return Err(shape_err(
                format!("router {}x{}", bank.dim(), bank.num_experts()),
                format!("{}x{}", router.dim(), router.num_experts()),
            ));
        }
        Ok(Self { bank, router })
    }

    pub fn num_experts(&self) -> usize {
        self.bank.num_experts()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn activation(&self) -> Activation {
        self.bank.activation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub experts: usize,
    pub filters: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Iteration cap `T`.
    pub iterations: usize,
    pub eta: f64,
    pub eta_r: f64,
    pub sigma0: f64,
    pub noise: RoutingNoise,
    pub load_balance_coef: f64,
    pub eval_every: usize,
    /// Stop once noiseless training accuracy has been 1 for this many
    /// consecutive evaluations. `0` disables early stopping.
    pub plateau_evals: usize,
    /// Monte Carlo draws per example for logged load estimates.
    pub load_samples: usize,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            eta: 0.001,
            eta_r: 0.1,
            sigma0: 0.01,
            noise: RoutingNoise::Uniform01,
            load_balance_coef: 0.0,
            eval_every: 50,
            plateau_evals: 4,
            load_samples: 64,
            deterministic: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(MoeError::Parameter(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.eta, "eta")?;
        pos(self.eta_r, "eta_r")?;
        pos(self.sigma0, "sigma0")?;
        if !(self.load_balance_coef >= 0.0) {
            return Err(MoeError::Parameter(
                "load_balance_coef must be nonnegative".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(MoeError::Parameter("eval_every must be at least 1".into()));
        }
        if let RoutingNoise::Uniform { width } = self.noise {
            pos(width, "noise width")?;
        }
        Ok(())
    }
}

/// One routing-noise vector per example, row-major `n × M`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMatrix {
    m: usize,
    data: Vec<f64>,
}

impl NoiseMatrix {
    pub fn sample<R: Rng + ?Sized>(n: usize, m: usize, noise: RoutingNoise, rng: &mut R) -> Self {
        let mut data = vec![0.0; n * m];
        noise.fill(rng, &mut data);
        Self { m, data }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            m,
            data: vec![0.0; n * m],
        }
    }

    pub fn from_vec(m: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || data.len() % m != 0 {
            return Err(shape_err(format!("multiple of {m}"), data.len()));
        }
        Ok(Self { m, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }
}

/// Output of the top-1 MoE on one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Top1Output {
    pub expert: usize,
    /// Full-softmax gate `π_m` of the selected expert.
    pub gate: f64,
    pub expert_output: f64,
    pub output: f64,
}

pub fn moe_forward_top1(model: &MoeModel, example: &Example, r: &[f64]) -> Result<Top1Output> {
    if example.dim() != model.dim() {
        return Err(shape_err(model.dim(), example.dim()));
    }
    if r.len() != model.num_experts() {
        return Err(shape_err(model.num_experts(), r.len()));
    }
    Ok(forward_top1_raw(model, example, r))
}

#[inline]
pub(crate) fn forward_top1_raw(model: &MoeModel, example: &Example, r: &[f64]) -> Top1Output {
    let h = model.router.logits_from_sum(&example.patch_sum());
    let pi = softmax_unchecked(&h);
    let expert = route_top1(&h, r);
    let f = model
        .bank
        .expert(expert)
        .forward_raw(example.raw(), model.activation());
    Top1Output {
        expert,
        gate: pi[expert],
        expert_output: f,
        output: pi[expert] * f,
    }
}

/// Noiseless dispatch (`r = 0`).
#[inline]
pub(crate) fn forward_noiseless(model: &MoeModel, example: &Example) -> Top1Output {
    let h = model.router.logits_from_sum(&example.patch_sum());
    let pi = softmax_unchecked(&h);
    let expert = argmax(&h);
    let f = model
        .bank
        .expert(expert)
        .forward_raw(example.raw(), model.activation());
    Top1Output {
        expert,
        gate: pi[expert],
        expert_output: f,
        output: pi[expert] * f,
    }
}

/// Perturbed loss with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// Per expert, a `J × d` row-major gradient.
    pub experts: Vec<ExpertWeights>,
    /// Same layout as the router weights.
    pub router: RouterWeights,
    /// Experts chosen under the supplied noise.
    pub routes: Vec<usize>,
    /// Examples with positive perturbed margin.
    pub correct: usize,
}

impl Gradients {
    pub fn expert_norms(&self) -> Vec<f64> {
        self.experts.iter().map(|g| g.frobenius_norm()).collect()
    }
}

struct Partial {
    loss: f64,
    experts: Vec<f64>,
    router: Vec<f64>,
    routes: Vec<usize>,
    correct: usize,
}

impl Partial {
    fn zeros(expert_len: usize, router_len: usize) -> Self {
        Self {
            loss: 0.0,
            experts: vec![0.0; expert_len],
            router: vec![0.0; router_len],
            routes: Vec::new(),
            correct: 0,
        }
    }

    fn absorb(mut self, other: Partial) -> Partial {
        self.loss += other.loss;
        self.experts
            .iter_mut()
            .zip(&other.experts)
            .for_each(|(a, b)| *a += b);
        self.router
            .iter_mut()
            .zip(&other.router)
            .for_each(|(a, b)| *a += b);
        self.routes.extend(other.routes);
        self.correct += other.correct;
        self
    }
}

fn chunk_partial(model: &MoeModel, batch: &[Example], noise: &[f64]) -> Partial {
    let m_count = model.num_experts();
    let d = model.dim();
    let filters = model.bank.filters();
    let per_expert = filters * d;
    let act = model.activation();
    let mut part = Partial::zeros(m_count * per_expert, m_count * d);
    part.routes.reserve(batch.len());
    let mut z = Vec::with_capacity(filters * batch.first().map_or(0, |e| e.num_patches()));
    for (i, ex) in batch.iter().enumerate() {
        let s = ex.patch_sum();
        let h = model.router.logits_from_sum(&s);
        let pi = softmax_unchecked(&h);
        let m = route_top1(&h, &noise[i * m_count..(i + 1) * m_count]);
        let expert = model.bank.expert(m);
        let f = expert.forward_with_preacts(ex.raw(), act, &mut z);
        let y = ex.label();
        let margin = y * pi[m] * f;
        part.loss += loss_raw(margin);
        if margin > 0.0 {
            part.correct += 1;
        }
        part.routes.push(m);
        let g = loss_deriv_raw(margin);

        let expert_scale = g * pi[m] * y;
        expert.accumulate_grad_raw(
            ex.raw(),
            &z,
            act,
            expert_scale,
            &mut part.experts[m * per_expert..(m + 1) * per_expert],
        );

        let c = g * pi[m] * y * f;
        if c != 0.0 {
            for (mm, col) in part.router.chunks_exact_mut(d).enumerate() {
                let coef = c * (if mm == m { 1.0 } else { 0.0 } - pi[mm]);
                col.iter_mut().zip(&s).for_each(|(a, b)| *a += coef * b);
            }
        }
    }
    part
}

/// Loss `(1/n) Σ_i ℓ(y_i π_{m_i} f_{m_i})` with `m_i = argmax(h + r_i)` and
/// its exact gradients with the routing held fixed.
pub fn perturbed_loss_and_grads(
    model: &MoeModel,
    batch: &[Example],
    noise: &NoiseMatrix,
) -> Result<Gradients> {
    perturbed_loss_and_grads_with(model, batch, noise, true)
}

pub fn perturbed_loss_and_grads_with(
    model: &MoeModel,
    batch: &[Example],
    noise: &NoiseMatrix,
    deterministic: bool,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(MoeError::Empty("batch".into()));
    }
    if noise.m != model.num_experts() || noise.rows() != batch.len() {
        return Err(shape_err(
            format!("{}x{}", batch.len(), model.num_experts()),
            format!("{}x{}", noise.rows(), noise.m),
        ));
    }
    if let Some(bad) = batch.iter().find(|e| e.dim() != model.dim()) {
        return Err(shape_err(model.dim(), bad.dim()));
    }
    let m_count = model.num_experts();
    let partials = batch
        .par_chunks(CHUNK)
        .zip(noise.data.par_chunks(CHUNK * m_count))
        .map(|(b, r)| chunk_partial(model, b, r));
    let total = if deterministic {
        let parts: Vec<Partial> = partials.collect();
        let mut it = parts.into_iter();
        let first = it.next().expect("non-empty batch");
        it.fold(first, Partial::absorb)
    } else {
        partials
            .reduce_with(Partial::absorb)
            .expect("non-empty batch")
    };

    let n = batch.len() as f64;
    let d = model.dim();
    let filters = model.bank.filters();
    let experts = total
        .experts
        .chunks_exact(filters * d)
        .map(|g| ExpertWeights::from_vec(filters, d, g.iter().map(|v| v / n).collect()))
        .collect::<Result<Vec<_>>>()?;
    let mut router = RouterWeights::zeros(d, m_count);
    router
        .as_columns_mut()
        .iter_mut()
        .zip(&total.router)
        .for_each(|(a, b)| *a = b / n);
    Ok(Gradients {
        loss: total.loss / n,
        experts,
        router,
        routes: total.routes,
        correct: total.correct,
    })
}

/// Apply one update; returns the expert gradient norms.
pub fn step(model: &mut MoeModel, grads: &Gradients, config: &TrainConfig) -> Result<Vec<f64>> {
    if grads.experts.len() != model.num_experts()
        || grads.router.num_experts() != model.num_experts()
        || grads.router.dim() != model.dim()
    {
        return Err(shape_err(
            format!("{} expert gradients", model.num_experts()),
            grads.experts.len(),
        ));
    }
    let norms = grads.expert_norms();
    for (m, (g, &norm)) in grads.experts.iter().zip(&norms).enumerate() {
        if norm > ZERO_GRAD_GUARD {
            let scale = config.eta / norm;
            model
                .bank
                .expert_mut(m)
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .for_each(|(w, gw)| *w -= scale * gw);
        }
    }
    model
        .router
        .as_columns_mut()
        .iter_mut()
        .zip(grads.router.as_columns())
        .for_each(|(t, g)| *t -= config.eta_r * g);
    Ok(norms)
}

/// Auxiliary balancing loss `coef · M · Σ_m frac_m · P̄_m` and its router
/// gradient. `frac_m` is the noiseless dispatch share of expert `m` (held
/// constant) and `P̄_m` its mean softmax gate.
pub fn load_balancing_loss_and_grad(
    model: &MoeModel,
    batch: &[Example],
    coef: f64,
) -> Result<(f64, RouterWeights)> {
    let d = model.dim();
    let m_count = model.num_experts();
    let mut grad = RouterWeights::zeros(d, m_count);
    if coef == 0.0 {
        return Ok((0.0, grad));
    }
    if batch.is_empty() {
        return Err(MoeError::Empty("batch".into()));
    }
    let n = batch.len() as f64;
    let mut sums = Vec::with_capacity(batch.len());
    let mut gates = Vec::with_capacity(batch.len());
    let mut frac = vec![0.0; m_count];
    for ex in batch {
        let s = ex.patch_sum();
        let h = model.router.logits_from_sum(&s);
        frac[argmax(&h)] += 1.0 / n;
        gates.push(softmax_unchecked(&h));
        sums.push(s);
    }
    let mut mean_gate = vec![0.0; m_count];
    for pi in &gates {
        mean_gate.iter_mut().zip(pi).for_each(|(a, b)| *a += b / n);
    }
    let loss = coef * m_count as f64 * dot(&frac, &mean_gate);
    // ∂/∂θ_j = coef·M/n · Σ_i π_j(x_i)·(frac_j − Σ_m frac_m π_m(x_i)) · s_i
    let scale = coef * m_count as f64 / n;
    for (s, pi) in sums.iter().zip(&gates) {
        let mixed = dot(&frac, pi);
        for j in 0..m_count {
            let c = scale * pi[j] * (frac[j] - mixed);
            grad.column_mut(j)
                .iter_mut()
                .zip(s)
                .for_each(|(a, b)| *a += c * b);
        }
    }
    Ok((loss, grad))
}

pub fn load_balancing_gradient(
    model: &MoeModel,
    batch: &[Example],
    coef: f64,
) -> Result<RouterWeights> {
    load_balancing_loss_and_grad(model, batch, coef).map(|(_, g)| g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub t: usize,
    pub perturbed_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub dispatch_entropy: f64,
    pub loads: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// `‖Σ_m θ_m‖₂` at this iterate.
    pub router_sum_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MoeModel,
    pub initial: MoeModel,
    pub logs: Vec<IterationLog>,
    pub iterations: usize,
    /// Final noiseless dispatch of the test set.
    pub test_dispatch: DispatchMatrix,
}

pub fn init_model(
    arch: &Architecture,
    d: usize,
    sigma0: f64,
    seeds: &SeedStreams,
) -> Result<MoeModel> {
    let bank = init_expert_bank(
        arch.experts,
        arch.filters,
        d,
        sigma0,
        arch.activation,
        &mut seeds.rng(Stream::Init),
    )?;
    MoeModel::new(bank, RouterWeights::zeros(d, arch.experts))
}

pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_observer(train_set, test_set, arch, config, &mut |_, _| {})
}

/// Gradient descent from Gaussian experts and a zero router. `observer` sees
/// every logged iterate.
pub fn train_with_observer(
    train_set: &Dataset,
    test_set: &Dataset,
    arch: &Architecture,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&IterationLog, &MoeModel),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(MoeError::Empty("training and test sets".into()));
    }
    if train_set.d != test_set.d || train_set.clusters != test_set.clusters {
        return Err(MoeError::Dimension(
            "training and test sets disagree on d or K".into(),
        ));
    }
    let seeds = SeedStreams::new(config.seed);
    let mut model = init_model(arch, train_set.d, config.sigma0, &seeds)?;
    let initial = model.clone();
    let mut noise_rng = seeds.rng(Stream::RoutingNoise);
    let mut eval_rng = seeds.rng(Stream::Evaluation);
    let n = train_set.len();
    let m_count = arch.experts;

    let mut logs = Vec::new();
    let mut plateau = 0usize;
    let mut t = 0usize;
    let mut log_at = |t: usize,
                      model: &MoeModel,
                      grads: &Gradients,
                      norms: Vec<f64>,
                      eval_rng: &mut crate::rng::LabRng|
     -> Result<IterationLog> {
        let train_eval = metrics::evaluate(model, train_set);
        let test_eval = metrics::evaluate(model, test_set);
        let loads = metrics::estimate_loads(model, train_set, config.load_samples, config.noise, eval_rng);
        let dispatch = metrics::dispatch_from_routes(test_set, m_count, &test_eval.routes)?;
        let entry = IterationLog {
            t,
            perturbed_loss: grads.loss,
            train_accuracy: train_eval.accuracy(),
            test_accuracy: test_eval.accuracy(),
            dispatch_entropy: metrics::dispatch_entropy(&dispatch)?,
            loads,
            grad_norms: norms,
            router_sum_norm: dot(&model.router.column_sum(), &model.router.column_sum()).sqrt(),
        };
        observer(&entry, model);
        Ok(entry)
    };

    while t < config.iterations {
        let noise = NoiseMatrix::sample(n, m_count, config.noise, &mut noise_rng);
        let mut grads =
            perturbed_loss_and_grads_with(&model, &train_set.examples, &noise, config.deterministic)?;
        if config.load_balance_coef > 0.0 {
            let (aux_loss, aux) =
                load_balancing_loss_and_grad(&model, &train_set.examples, config.load_balance_coef)?;
            grads.loss += aux_loss;
            grads
                .router
                .as_columns_mut()
                .iter_mut()
                .zip(aux.as_columns())
                .for_each(|(a, b)| *a += b);
        }
        if t % config.eval_every == 0 {
            let entry = log_at(t, &model, &grads, grads.expert_norms(), &mut eval_rng)?;
            let solved = entry.train_accuracy >= 1.0;
            logs.push(entry);
            if config.plateau_evals > 0 {
                plateau = if solved { plateau + 1 } else { 0 };
                if plateau >= config.plateau_evals {
                    break;
                }
            }
        }
        step(&mut model, &grads, config)?;
        t += 1;
    }

    if logs.last().map_or(true, |l| l.t != t) {
        let noise = NoiseMatrix::sample(n, m_count, config.noise, &mut noise_rng);
        let grads =
            perturbed_loss_and_grads_with(&model, &train_set.examples, &noise, config.deterministic)?;
        let entry = log_at(t, &model, &grads, grads.expert_norms(), &mut eval_rng)?;
        logs.push(entry);
    }
    let test_eval = metrics::evaluate(&model, test_set);
    let test_dispatch = metrics::dispatch_from_routes(test_set, m_count, &test_eval.routes)?;
    Ok(TrainOutcome {
        model,
        initial,
        logs,
        iterations: t,
        test_dispatch,
    })
}

/// Full-batch training of one expert with no router (`F = f`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleExpertConfig {
    pub iterations: usize,
    pub lr: f64,
    pub sigma0: f64,
    /// Normalize each step to Frobenius length `lr`.
    pub normalized: bool,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for SingleExpertConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.01,
            sigma0: 0.2,
            normalized: false,
            eval_every: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleLog {
    pub t: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn single_loss_and_grad(
    w: &ExpertWeights,
    act: Activation,
    batch: &[Example],
) -> (f64, Vec<f64>, usize) {
    let len = w.as_slice().len();
    let parts: Vec<(f64, Vec<f64>, usize)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; len];
            let mut loss = 0.0;
            let mut correct = 0;
            let mut z = Vec::new();
            for ex in chunk {
                let f = w.forward_with_preacts(ex.raw(), act, &mut z);
                let y = ex.label();
                let margin = y * f;
                loss += loss_raw(margin);
                if margin > 0.0 {
                    correct += 1;
                }
                w.accumulate_grad_raw(ex.raw(), &z, act, loss_deriv_raw(margin) * y, &mut g);
            }
            (loss, g, correct)
        })
        .collect();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; len];
    let mut loss = 0.0;
    let mut correct = 0;
    for (l, g, c) in parts {
        loss += l;
        correct += c;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|v| *v /= n);
    (loss / n, grad, correct)
}

/// Fraction of examples with `y·f(x) > 0` for a single expert.
pub fn single_expert_accuracy(w: &ExpertWeights, act: Activation, dataset: &Dataset) -> f64 {
    let correct: usize = dataset
        .examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .filter(|ex| ex.label() * w.forward_raw(ex.raw(), act) > 0.0)
                .count()
        })
        .sum();
    correct as f64 / dataset.len() as f64
}

pub fn train_single_expert(
    train_set: &Dataset,
    test_set: &Dataset,
    filters: usize,
    activation: Activation,
    config: &SingleExpertConfig,
) -> Result<(ExpertWeights, Vec<SingleLog>)> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(MoeError::Empty("training and test sets".into()));
    }
    if !(config.lr > 0.0) || config.eval_every == 0 {
        return Err(MoeError::Parameter("lr and eval_every must be positive".into()));
    }
    let seeds = SeedStreams::new(config.seed);
    let mut w = if config.sigma0 > 0.0 {
        init_expert_bank(1, filters, train_set.d, config.sigma0, activation, &mut seeds.rng(Stream::Init))?
            .expert(0)
            .clone()
    } else {
        ExpertWeights::zeros(filters, train_set.d)
    };
    let mut logs = Vec::new();
    for t in 0..=config.iterations {
        let (loss, grad, correct) = single_loss_and_grad(&w, activation, &train_set.examples);
        if t % config.eval_every == 0 || t == config.iterations {
            logs.push(SingleLog {
                t,
                loss,
                train_accuracy: correct as f64 / train_set.len() as f64,
                test_accuracy: single_expert_accuracy(&w, activation, test_set),
            });
        }
        if t == config.iterations {
            break;
        }
        let norm = dot(&grad, &grad).sqrt();
        let scale = if config.normalized {
            if norm > ZERO_GRAD_GUARD {
                config.lr / norm
            } else {
                0.0
            }
        } else {
            config.lr
        };
        w.as_mut_slice()
            .iter_mut()
            .zip(&grad)
            .for_each(|(a, g)| *a -= scale * g);
    }
    Ok((w, logs))
}

/// Perturbed loss alone, with the routes it used.
pub fn perturbed_loss_with_routes(
    model: &MoeModel,
    batch: &[Example],
    noise: &NoiseMatrix,
) -> Result<(f64, Vec<usize>)> {
    if batch.is_empty() {
        return Err(MoeError::Empty("batch".into()));
    }
    if noise.m != model.num_experts() || noise.rows() != batch.len() {
        return Err(shape_err(
            format!("{}x{}", batch.len(), model.num_experts()),
            format!("{}x{}", noise.rows(), noise.m),
        ));
    }
    let mut loss = 0.0;
    let mut routes = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let out = forward_top1_raw(model, ex, noise.row(i));
        loss += loss_raw(ex.label() * out.output);
        routes.push(out.expert);
    }
    Ok((loss / batch.len() as f64, routes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::LabRng;
    use crate::signal::{build_orthonormal_basis, generate_dataset, BasisMode, DataConfig, ExampleMeta, Interval, PatchRole};
    use crate::verification::random_gradcheck_case;
    use rand::SeedableRng;

    fn small_data(n: usize, seed: u64) -> Dataset {
        let config = DataConfig {
            d: 12,
            patches: 4,
            clusters: 4,
            n,
            alpha: Interval::new(0.5, 2.0).unwrap(),
            beta: Interval::new(1.0, 2.0).unwrap(),
            gamma: Interval::new(0.5, 3.0).unwrap(),
            sigma_p: 1.0,
            shuffle_patches: true,
        };
        let seeds = SeedStreams::new(seed);
        let basis = build_orthonormal_basis(12, 4, &mut seeds.rng(Stream::Basis), BasisMode::Random).unwrap();
        generate_dataset(&config, &basis, &seeds, Stream::TrainData).unwrap()
    }

    fn random_model(m: usize, j: usize, d: usize, act: Activation, seed: u64) -> MoeModel {
        let mut rng = LabRng::seed_from_u64(seed);
        let bank = init_expert_bank(m, j, d, 0.4, act, &mut rng).unwrap();
        let theta: Vec<f64> = (0..d * m).map(|_| rng.random_range(-0.3..0.3)).collect();
        MoeModel::new(bank, RouterWeights::from_row_major(d, m, &theta).unwrap()).unwrap()
    }

    #[test]
    fn logistic_identities() {
        assert!((logistic_loss(0.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        for z in [-30.0, -2.5, -0.1, 0.3, 4.0, 25.0] {
            let diff = logistic_loss(-z).unwrap() - logistic_loss(z).unwrap();
            assert!((diff - z).abs() < 1e-12 * (1.0 + z.abs()));
            let fd = (loss_raw(z + 1e-6) - loss_raw(z - 1e-6)) / 2e-6;
            assert!((fd - logistic_loss_deriv(z).unwrap()).abs() < 1e-8);
        }
        assert!(logistic_loss(800.0).unwrap() >= 0.0);
        assert_eq!(logistic_loss(-800.0).unwrap(), 800.0);
        assert!((logistic_loss_deriv(0.0).unwrap() + 0.5).abs() < 1e-15);
        assert!(logistic_loss(f64::NAN).is_err());
    }

    fn one_hot_example(d: usize, value: f64) -> Example {
        let mut patches = vec![0.0; 3 * d];
        patches[0] = value;
        let meta = ExampleMeta {
            k: 0,
            k_prime: 1,
            y: 1,
            epsilon: 1,
            alpha: value,
            beta: 1.0,
            gamma: 1.0,
            roles: vec![PatchRole::Feature, PatchRole::Center, PatchRole::FeatureNoise],
        };
        Example::from_parts(d, patches, meta).unwrap()
    }

    #[test]
    fn forward_hand_oracle() {
        let d = 4;
        let mut w = ExpertWeights::zeros(1, d);
        w.as_mut_slice()[0] = 1.0;
        let ex = one_hot_example(d, 2.0);
        let single = MoeModel::new(
            ExpertBank::new(Activation::Cubic, vec![w.clone()]).unwrap(),
            RouterWeights::zeros(d, 1),
        )
        .unwrap();
        let out = moe_forward_top1(&single, &ex, &[0.3]).unwrap();
        assert_eq!((out.expert, out.gate, out.output), (0, 1.0, 8.0));

        let pair = MoeModel::new(
            ExpertBank::new(Activation::Cubic, vec![ExpertWeights::zeros(1, d), w]).unwrap(),
            RouterWeights::zeros(d, 2),
        )
        .unwrap();
        let out = moe_forward_top1(&pair, &ex, &[0.1, 0.6]).unwrap();
        assert_eq!((out.expert, out.gate, out.expert_output, out.output), (1, 0.5, 8.0, 4.0));
        assert!(moe_forward_top1(&pair, &ex, &[0.1]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let data = small_data(40, 1);
        let model = MoeModel::new(
            ExpertBank::zeros(3, 2, 12, Activation::Cubic),
            RouterWeights::zeros(12, 3),
        )
        .unwrap();
        let noise = NoiseMatrix::sample(40, 3, RoutingNoise::Uniform01, &mut LabRng::seed_from_u64(2));
        let g = perturbed_loss_and_grads(&model, &data.examples, &noise).unwrap();
        assert!((g.loss - 2f64.ln()).abs() < 1e-15);
        assert!(g.expert_norms().iter().all(|&n| n == 0.0));
        assert!(g.router.as_columns().iter().all(|&v| v == 0.0));
        assert_eq!(g.correct, 0);
    }

    #[test]
    fn router_gradient_sums_to_zero() {
        let data = small_data(64, 3);
        for act in [Activation::Linear, Activation::Cubic, Activation::Relu] {
            let model = random_model(5, 3, 12, act, 4);
            let noise = NoiseMatrix::sample(64, 5, RoutingNoise::Uniform01, &mut LabRng::seed_from_u64(5));
            let g = perturbed_loss_and_grads(&model, &data.examples, &noise).unwrap();
            let s = g.router.column_sum();
            assert!(dot(&s, &s).sqrt() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = LabRng::seed_from_u64(6);
        for _ in 0..3 {
            let (model, batch, noise) = random_gradcheck_case(&mut rng).unwrap();
            let gc = crate::verification::grad_check(&model, &batch, &noise, 1e-5).unwrap();
            assert!(gc.max_rel_error() <= 1e-5, "{gc:?}");
        }
    }

    #[test]
    fn deterministic_and_parallel_reductions_agree() {
        let data = small_data(300, 7);
        let model = random_model(4, 3, 12, Activation::Cubic, 8);
        let noise = NoiseMatrix::sample(300, 4, RoutingNoise::Uniform01, &mut LabRng::seed_from_u64(9));
        let a = perturbed_loss_and_grads_with(&model, &data.examples, &noise, true).unwrap();
        let b = perturbed_loss_and_grads_with(&model, &data.examples, &noise, true).unwrap();
        let c = perturbed_loss_and_grads_with(&model, &data.examples, &noise, false).unwrap();
        assert_eq!(a, b);
        assert!((a.loss - c.loss).abs() < 1e-12);
        assert_eq!(a.routes, c.routes);
    }

    #[test]
    fn step_is_normalized_and_guarded() {
        let data = small_data(50, 10);
        let mut model = random_model(4, 3, 12, Activation::Cubic, 11);
        let noise = NoiseMatrix::sample(50, 4, RoutingNoise::Uniform01, &mut LabRng::seed_from_u64(12));
        let mut g = perturbed_loss_and_grads(&model, &data.examples, &noise).unwrap();
        // Expert 0 gets no gradient at all.
        g.experts[0] = ExpertWeights::zeros(3, 12);
        let before = model.clone();
        let sum_before = model.router.column_sum();
        let config = TrainConfig::default();
        step(&mut model, &g, &config).unwrap();
        assert_eq!(model.bank.expert(0), before.bank.expert(0));
        for m in 1..4 {
            if g.experts[m].frobenius_norm() == 0.0 {
                continue;
            }
            let moved: f64 = model
                .bank
                .expert(m)
                .as_slice()
                .iter()
                .zip(before.bank.expert(m).as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((moved - config.eta).abs() < 1e-12);
        }
        let sum_after = model.router.column_sum();
        assert!(sum_before.iter().zip(&sum_after).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn load_balancing_gradient() {
        let data = small_data(60, 13);
        let model = random_model(4, 2, 12, Activation::Cubic, 14);
        let (loss, g) = load_balancing_loss_and_grad(&model, &data.examples, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_columns().iter().all(|&v| v == 0.0));

        // Finite differences at fixed dispatch shares.
        let coef = 0.01;
        let (_, g) = load_balancing_loss_and_grad(&model, &data.examples, coef).unwrap();
        let routes = |m: &MoeModel| -> Vec<usize> {
            data.iter().map(|ex| argmax(&m.router.logits_from_sum(&ex.patch_sum()))).collect()
        };
        let base_routes = routes(&model);
        let mut work = model.clone();
        let h = 1e-6;
        for idx in (0..48).step_by(5) {
            let orig = work.router.as_columns()[idx];
            work.router.as_columns_mut()[idx] = orig + h;
            let plus_routes = routes(&work);
            let (plus, _) = load_balancing_loss_and_grad(&work, &data.examples, coef).unwrap();
            work.router.as_columns_mut()[idx] = orig - h;
            let minus_routes = routes(&work);
            let (minus, _) = load_balancing_loss_and_grad(&work, &data.examples, coef).unwrap();
            work.router.as_columns_mut()[idx] = orig;
            if plus_routes != base_routes || minus_routes != base_routes {
                continue;
            }
            let fd = (plus - minus) / (2.0 * h);
            let a = g.as_columns()[idx];
            assert!((fd - a).abs() <= 1e-6 * a.abs().max(1e-6), "{fd} vs {a}");
        }

        // Uniform gates with everything on one expert: the gradient lowers
        // that expert's logit and raises the others equally.
        let zero = MoeModel::new(model.bank.clone(), RouterWeights::zeros(12, 4)).unwrap();
        let (_, g) = load_balancing_loss_and_grad(&zero, &data.examples, 1.0).unwrap();
        let s: Vec<f64> = data.iter().fold(vec![0.0; 12], |mut acc, ex| {
            acc.iter_mut().zip(ex.patch_sum()).for_each(|(a, b)| *a += b);
            acc
        });
        let along = |m: usize| dot(g.column(m), &s);
        assert!(along(0) > 0.0);
        for m in 1..4 {
            assert!(along(m) < 0.0);
            assert!((along(m) - along(1)).abs() < 1e-12 * along(1).abs());
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let train_set = small_data(30, 15);
        let test_set = small_data(20, 16);
        let arch = Architecture {
            experts: 3,
            filters: 2,
            activation: Activation::Cubic,
        };
        let config = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train(&train_set, &test_set, &arch, &config).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.model.router.as_columns().iter().all(|&v| v == 0.0));
        assert_eq!(out.model, out.initial);
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.logs[0].t, 0);
    }

    #[test]
    fn training_is_reproducible() {
        let train_set = small_data(80, 17);
        let test_set = small_data(40, 18);
        let arch = Architecture {
            experts: 3,
            filters: 2,
            activation: Activation::Cubic,
        };
        let config = TrainConfig {
            iterations: 20,
            eval_every: 5,
            sigma0: 0.2,
            ..TrainConfig::default()
        };
        let a = train(&train_set, &test_set, &arch, &config).unwrap();
        let b = train(&train_set, &test_set, &arch, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.logs.iter().map(|l| l.t).collect::<Vec<_>>(), vec![0, 5, 10, 15, 20]);
        assert!(a.logs.iter().all(|l| l.router_sum_norm < 1e-12));
    }

    #[test]
    fn single_expert_from_zero_is_stationary() {
        let train_set = small_data(40, 19);
        let config = SingleExpertConfig {
            iterations: 5,
            sigma0: 0.0,
            ..SingleExpertConfig::default()
        };
        let (w, logs) = train_single_expert(&train_set, &train_set, 4, Activation::Cubic, &config).unwrap();
        assert!(w.as_slice().iter().all(|&v| v == 0.0));
        // Zero margins count as errors.
        assert!(logs.iter().all(|l| l.test_accuracy == 0.0));
        assert!((logs[0].loss - 2f64.ln()).abs() < 1e-15);
    }
}
