//! Evaluation: dispatch matrices, dispatch entropy, accuracies and
//! router correctness against the specialization sets.
//!
//! Reported numbers use noiseless routing (`argmax h`). A zero margin
//! `y·F(x) = 0` counts as an error. Entropy uses the natural logarithm.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, MoeError, Result};
use crate::experts::ExpertBank;
use crate::gating::{route_top1, RoutingNoise};
use crate::rng::LabRng;
use crate::signal::Dataset;
use crate::training::{forward_noiseless, forward_top1_raw, MoeModel};

/// Cluster-by-expert routing counts `n_{k,m}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispatchMatrix {
    clusters: usize,
    experts: usize,
    counts: Vec<u64>,
}

impl DispatchMatrix {
    pub fn zeros(clusters: usize, experts: usize) -> Self {
        Self {
            clusters,
            experts,
            counts: vec![0; clusters * experts],
        }
    }

    /// From rows indexed by cluster.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let experts = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || experts == 0 {
            return Err(MoeError::Empty("dispatch matrix".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != experts) {
            return Err(shape_err(experts, bad.len()));
        }
        Ok(Self {
            clusters: rows.len(),
            experts,
            counts: rows.concat(),
        })
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn get(&self, k: usize, m: usize) -> u64 {
        self.counts[k * self.experts + m]
    }

    pub fn add(&mut self, k: usize, m: usize) {
        self.counts[k * self.experts + m] += 1;
    }

    /// `n_m = Σ_k n_{k,m}`.
    pub fn expert_totals(&self) -> Vec<u64> {
        (0..self.experts)
            .map(|m| (0..self.clusters).map(|k| self.get(k, m)).sum())
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

impl fmt::Display for DispatchMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "Expert number")?;
        for m in 0..self.experts {
            write!(f, "{:>7}", m + 1)?;
        }
        writeln!(f)?;
        write!(f, "{:<16}", "Dispatch")?;
        for n in self.expert_totals() {
            write!(f, "{n:>7}")?;
        }
        writeln!(f)?;
        for k in 0..self.clusters {
            write!(f, "{:<16}", format!("Cluster {}", k + 1))?;
            for m in 0..self.experts {
                write!(f, "{:>7}", self.get(k, m))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// `−Σ_{m: n_m>0} (n_m/n) Σ_k (n_{k,m}/n_m) log(n_{k,m}/n_m)`.
pub fn dispatch_entropy(dispatch: &DispatchMatrix) -> Result<f64> {
    let n = dispatch.total();
    if n == 0 {
        return Err(MoeError::Empty("dispatch matrix has no routed examples".into()));
    }
    let n = n as f64;
    let mut entropy = 0.0;
    for (m, nm) in dispatch.expert_totals().into_iter().enumerate() {
        if nm == 0 {
            continue;
        }
        let nm = nm as f64;
        let mut h = 0.0;
        for k in 0..dispatch.clusters() {
            let c = dispatch.get(k, m);
            if c > 0 {
                let q = c as f64 / nm;
                h -= q * q.ln();
            }
        }
        entropy += nm / n * h;
    }
    Ok(entropy)
}

/// Per-example routing and MoE output.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub routes: Vec<usize>,
    /// `y·F(x)` per example.
    pub margins: Vec<f64>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.margins.iter().filter(|&&m| m > 0.0).count() as f64 / self.margins.len() as f64
    }

    pub fn zero_margin_fraction(&self) -> f64 {
        self.margins.iter().filter(|&&m| m == 0.0).count() as f64 / self.margins.len() as f64
    }
}

/// Noiseless evaluation of every example.
pub fn evaluate(model: &MoeModel, dataset: &Dataset) -> Evaluation {
    let (routes, margins) = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let out = forward_noiseless(model, ex);
            (out.expert, ex.label() * out.output)
        })
        .unzip();
    Evaluation { routes, margins }
}

/// One `Unif`-noise draw per example.
pub fn evaluate_sampled<R: Rng + ?Sized>(
    model: &MoeModel,
    dataset: &Dataset,
    noise: RoutingNoise,
    rng: &mut R,
) -> Evaluation {
    let mut r = vec![0.0; model.num_experts()];
    let mut routes = Vec::with_capacity(dataset.len());
    let mut margins = Vec::with_capacity(dataset.len());
    for ex in dataset.iter() {
        noise.fill(rng, &mut r);
        let out = forward_top1_raw(model, ex, &r);
        routes.push(out.expert);
        margins.push(ex.label() * out.output);
    }
    Evaluation { routes, margins }
}

pub enum DispatchMode<'a> {
    Noiseless,
    Sampled(&'a mut LabRng),
}

pub(crate) fn dispatch_from_routes(
    dataset: &Dataset,
    experts: usize,
    routes: &[usize],
) -> Result<DispatchMatrix> {
    if routes.len() != dataset.len() {
        return Err(shape_err(dataset.len(), routes.len()));
    }
    let mut dm = DispatchMatrix::zeros(dataset.clusters, experts);
    for (ex, &m) in dataset.iter().zip(routes) {
        dm.add(ex.meta.k, m);
    }
    Ok(dm)
}

fn run(model: &MoeModel, dataset: &Dataset, mode: DispatchMode<'_>) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(MoeError::Empty("dataset".into()));
    }
    if dataset.d != model.dim() {
        return Err(shape_err(model.dim(), dataset.d));
    }
    Ok(match mode {
        DispatchMode::Noiseless => evaluate(model, dataset),
        DispatchMode::Sampled(rng) => evaluate_sampled(model, dataset, RoutingNoise::Uniform01, rng),
    })
}

pub fn dispatch_matrix(
    model: &MoeModel,
    dataset: &Dataset,
    mode: DispatchMode<'_>,
) -> Result<DispatchMatrix> {
    let eval = run(model, dataset, mode)?;
    dispatch_from_routes(dataset, model.num_experts(), &eval.routes)
}

/// Fraction with `y·F(x) > 0`.
pub fn accuracy(model: &MoeModel, dataset: &Dataset, mode: DispatchMode<'_>) -> Result<f64> {
    Ok(run(model, dataset, mode)?.accuracy())
}

/// Entry `(k, m)`: fraction of cluster-`k` examples with `y·f_m(x) > 0`;
/// `None` for clusters without examples.
pub fn per_cluster_expert_accuracy(
    bank: &ExpertBank,
    dataset: &Dataset,
) -> Result<Vec<Vec<Option<f64>>>> {
    if dataset.d != bank.dim() {
        return Err(shape_err(bank.dim(), dataset.d));
    }
    let experts = bank.num_experts();
    let act = bank.activation;
    let (correct, totals) = dataset
        .examples
        .par_chunks(256)
        .map(|chunk| {
            let mut correct = vec![0u64; dataset.clusters * experts];
            let mut totals = vec![0u64; dataset.clusters];
            for ex in chunk {
                let k = ex.meta.k;
                totals[k] += 1;
                for m in 0..experts {
                    if ex.label() * bank.expert(m).forward_raw(ex.raw(), act) > 0.0 {
                        correct[k * experts + m] += 1;
                    }
                }
            }
            (correct, totals)
        })
        .reduce(
            || (vec![0; dataset.clusters * experts], vec![0; dataset.clusters]),
            |(mut a, mut b), (c, d)| {
                a.iter_mut().zip(&c).for_each(|(x, y)| *x += y);
                b.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                (a, b)
            },
        );
    Ok((0..dataset.clusters)
        .map(|k| {
            (0..experts)
                .map(|m| {
                    (totals[k] > 0).then(|| correct[k * experts + m] as f64 / totals[k] as f64)
                })
                .collect()
        })
        .collect())
}

/// Fraction of examples whose noiseless dispatch lands in `sets[k]`.
pub fn router_correctness(
    model: &MoeModel,
    dataset: &Dataset,
    sets: &[Vec<usize>],
) -> Result<f64> {
    if sets.len() != dataset.clusters {
        return Err(shape_err(dataset.clusters, sets.len()));
    }
    let eval = run(model, dataset, DispatchMode::Noiseless)?;
    let hits = dataset
        .iter()
        .zip(&eval.routes)
        .filter(|(ex, m)| sets[ex.meta.k].contains(m))
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Monte Carlo estimate of `Load_m = Σ_i P(m_i = m)` with `samples` draws
/// per example.
pub fn estimate_loads(
    model: &MoeModel,
    dataset: &Dataset,
    samples: usize,
    noise: RoutingNoise,
    rng: &mut LabRng,
) -> Vec<f64> {
    let m_count = model.num_experts();
    let mut load = vec![0.0; m_count];
    if samples == 0 {
        return load;
    }
    let mut r = vec![0.0; m_count];
    let w = 1.0 / samples as f64;
    for ex in dataset.iter() {
        let h = model.router.logits_from_sum(&ex.patch_sum());
        for _ in 0..samples {
            noise.fill(rng, &mut r);
            load[route_top1(&h, &r)] += w;
        }
    }
    load
}

/// End-of-run summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub zero_margin_fraction: f64,
    pub dispatch_entropy: f64,
    pub router_correctness: f64,
    pub per_cluster_expert_accuracy: Vec<Vec<Option<f64>>>,
    pub loads: Vec<f64>,
    pub dispatch: DispatchMatrix,
}

impl EvalReport {
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("train_accuracy", self.train_accuracy.to_string());
        kv("test_accuracy", self.test_accuracy.to_string());
        kv("zero_margin_fraction", self.zero_margin_fraction.to_string());
        kv("dispatch_entropy", self.dispatch_entropy.to_string());
        kv("router_correctness", self.router_correctness.to_string());
        for (m, l) in self.loads.iter().enumerate() {
            kv(&format!("load_{}", m + 1), l.to_string());
        }
        for (k, row) in self.per_cluster_expert_accuracy.iter().enumerate() {
            for (m, v) in row.iter().enumerate() {
                let s = v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
                kv(&format!("cluster_{}_expert_{}_accuracy", k + 1, m + 1), s);
            }
        }
        for k in 0..self.dispatch.clusters() {
            for m in 0..self.dispatch.experts() {
                kv(
                    &format!("dispatch_cluster_{}_expert_{}", k + 1, m + 1),
                    self.dispatch.get(k, m).to_string(),
                );
            }
        }
        out
    }

    pub fn csv_header(experts: usize) -> String {
        let mut cols = vec![
            "train_accuracy".to_string(),
            "test_accuracy".into(),
            "zero_margin_fraction".into(),
            "dispatch_entropy".into(),
            "router_correctness".into(),
        ];
        cols.extend((1..=experts).map(|m| format!("load_{m}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.train_accuracy.to_string(),
            self.test_accuracy.to_string(),
            self.zero_margin_fraction.to_string(),
            self.dispatch_entropy.to_string(),
            self.router_correctness.to_string(),
        ];
        cols.extend(self.loads.iter().map(f64::to_string));
        cols.join(",")
    }
}

pub fn eval_report(
    model: &MoeModel,
    train_set: &Dataset,
    test_set: &Dataset,
    sets: &[Vec<usize>],
    load_samples: usize,
    rng: &mut LabRng,
) -> Result<EvalReport> {
    let train_eval = run(model, train_set, DispatchMode::Noiseless)?;
    let test_eval = run(model, test_set, DispatchMode::Noiseless)?;
    let dispatch = dispatch_from_routes(test_set, model.num_experts(), &test_eval.routes)?;
    Ok(EvalReport {
        train_accuracy: train_eval.accuracy(),
        test_accuracy: test_eval.accuracy(),
        zero_margin_fraction: test_eval.zero_margin_fraction(),
        dispatch_entropy: dispatch_entropy(&dispatch)?,
        router_correctness: router_correctness(model, test_set, sets)?,
        per_cluster_expert_accuracy: per_cluster_expert_accuracy(&model.bank, test_set)?,
        loads: estimate_loads(model, train_set, load_samples, RoutingNoise::Uniform01, rng),
        dispatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_dispatch_has_zero_entropy() {
        let dm = DispatchMatrix::from_rows(&[
            vec![0, 0, 0, 0, 0, 3971, 0, 0],
            vec![0, 0, 4009, 0, 0, 0, 0, 0],
            vec![0, 0, 0, 0, 0, 0, 0, 4041],
            vec![0, 3979, 0, 0, 0, 0, 0, 0],
        ])
        .unwrap();
        assert_eq!(dispatch_entropy(&dm).unwrap(), 0.0);
        assert_eq!(dm.expert_totals(), vec![0, 3979, 4009, 0, 0, 3971, 0, 4041]);
        assert_eq!(dm.total(), 16000);
    }

    #[test]
    fn uniform_dispatch_is_log_k() {
        let dm = DispatchMatrix::from_rows(&vec![vec![25u64; 3]; 4]).unwrap();
        assert!((dispatch_entropy(&dm).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let dm = DispatchMatrix::zeros(2, 2);
        assert!(matches!(dispatch_entropy(&dm), Err(MoeError::Empty(_))));
        assert!(DispatchMatrix::from_rows(&[]).is_err());
    }

    #[test]
    fn display_layout() {
        let dm = DispatchMatrix::from_rows(&[vec![1, 0], vec![0, 2]]).unwrap();
        let s = dm.to_string();
        assert!(s.contains("Cluster 2"));
        assert!(s.lines().count() == 4);
    }
}
