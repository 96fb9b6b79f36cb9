//! Experiment configuration, presets, and seeded runs and sweeps.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::experts::{specialization_map, specialization_sets, Activation, ExpertWeights};
use crate::metrics::{self, EvalReport};
use crate::rng::{SeedStreams, Stream};
use crate::signal::{build_orthonormal_basis, generate_dataset, BasisMode, DataConfig, Dataset, Interval, SignalBasis};
use crate::verification::LemmaReport;
use crate::training::{
    train_single_expert, train_with_observer, Architecture, IterationLog, MoeModel, SingleExpertConfig,
    SingleLog, TrainConfig, TrainOutcome,
};

pub const PRESETS: [&str; 8] = [
    "setting1",
    "setting2",
    "setting3",
    "setting4",
    "setting1-fast",
    "setting2-fast",
    "setting3-fast",
    "setting4-fast",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub num_seeds: usize,
    pub out_dir: PathBuf,
    pub preset: Option<String>,
    /// Size of the held-out set; defaults to the training size.
    pub test_n: Option<usize>,
    pub basis: BasisMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_seeds: 10,
            out_dir: PathBuf::from("runs"),
            preset: None,
            test_n: None,
            basis: BasisMode::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub arch: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub run: RunConfig,
}

fn setting(gamma_hi: f64, sigma_p: f64, n: usize) -> DataConfig {
    DataConfig {
        d: 50,
        patches: 4,
        clusters: 4,
        n,
        alpha: Interval { lo: 0.5, hi: 2.0 },
        beta: Interval { lo: 1.0, hi: 2.0 },
        gamma: Interval {
            lo: 0.5,
            hi: gamma_hi,
        },
        sigma_p,
        shuffle_patches: true,
    }
}

impl ExperimentConfig {
    /// Expands a named preset with cubic experts.
    pub fn preset(name: &str) -> Result<Self> {
        let (base, n) = match name.strip_suffix("-fast") {
            Some(base) => (base, 4_000),
            None => (name, 16_000),
        };
        let data = match base {
            "setting1" => setting(3.0, 1.0, n),
            "setting2" => setting(3.0, 2.0, n),
            "setting3" => setting(2.0, 1.0, n),
            "setting4" => setting(2.0, 2.0, n),
            _ => {
                return Err(MoeError::Config(format!(
                    "unknown preset `{name}`; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            data,
            arch: Architecture {
                experts: 8,
                filters: 16,
                activation: Activation::Cubic,
            },
            train: TrainConfig::default(),
            run: RunConfig {
                preset: Some(name.to_string()),
                ..RunConfig::default()
            },
        })
    }

    /// Parses TOML. A `run.preset` supplies defaults for any table the file
    /// leaves out.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| MoeError::Config(e.to_string()))?;
        let preset = value
            .get("run")
            .and_then(|r| r.get("preset"))
            .and_then(|p| p.as_str())
            .map(str::to_string);
        let merged = match preset {
            Some(name) => {
                let base = Self::preset(&name)?;
                let mut base = toml::Table::try_from(&base).map_err(|e| MoeError::Config(e.to_string()))?;
                merge_tables(&mut base, value);
                base
            }
            None => value,
        };
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| MoeError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MoeError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.arch.experts == 0 || self.arch.filters == 0 {
            return Err(MoeError::Config("arch.experts and arch.filters must be positive".into()));
        }
        if self.run.test_n == Some(0) {
            return Err(MoeError::Config("run.test_n must be positive".into()));
        }
        if self.data.d < 2 * self.data.clusters {
            return Err(MoeError::Config(format!(
                "d = {} is too small for {} clusters",
                self.data.d, self.data.clusters
            )));
        }
        Ok(())
    }

    pub fn test_config(&self) -> DataConfig {
        DataConfig {
            n: self.run.test_n.unwrap_or(self.data.n),
            ..self.data.clone()
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Basis and train/test sets for one seed.
pub struct SeedData {
    pub basis: SignalBasis,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn generate_seed_data(config: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    config.validate()?;
    let seeds = SeedStreams::new(seed);
    let basis = build_orthonormal_basis(
        config.data.d,
        config.data.clusters,
        &mut seeds.rng(Stream::Basis),
        config.run.basis,
    )?;
    let train = generate_dataset(&config.data, &basis, &seeds, Stream::TrainData)?;
    let test = generate_dataset(&config.test_config(), &basis, &seeds, Stream::TestData)?;
    Ok(SeedData { basis, train, test })
}

/// Final metrics of one seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub iterations: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub dispatch_entropy: f64,
    pub router_correctness: f64,
    pub active_experts: usize,
}

pub struct RunArtifacts {
    pub record: RunRecord,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    /// Specialization sets from the initial experts.
    pub sets: Vec<Vec<usize>>,
}

/// Trains on already generated data and evaluates the result.
pub fn run_on_data(
    config: &ExperimentConfig,
    data: &SeedData,
    seed: u64,
    observer: &mut dyn FnMut(&IterationLog, &MoeModel),
) -> Result<RunArtifacts> {
    let train_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = train_with_observer(&data.train, &data.test, &config.arch, &train_config, observer)?;
    let map = specialization_map(&outcome.initial.bank, &data.basis)?;
    let sets = specialization_sets(&map, config.data.clusters);
    let mut rng = SeedStreams::new(seed).rng(Stream::Evaluation);
    let report = metrics::eval_report(
        &outcome.model,
        &data.train,
        &data.test,
        &sets,
        config.train.load_samples,
        &mut rng,
    )?;
    let record = RunRecord {
        seed,
        iterations: outcome.iterations,
        train_accuracy: report.train_accuracy,
        test_accuracy: report.test_accuracy,
        dispatch_entropy: report.dispatch_entropy,
        router_correctness: report.router_correctness,
        active_experts: report.dispatch.expert_totals().iter().filter(|&&c| c > 0).count(),
    };
    Ok(RunArtifacts {
        record,
        outcome,
        report,
        sets,
    })
}

pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    let data = generate_seed_data(config, seed)?;
    run_on_data(config, &data, seed, &mut |_, _| {})
}

/// Per-seed records with mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<RunRecord>,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    pub mean_dispatch_entropy: f64,
    pub std_dispatch_entropy: f64,
}

/// Mean and `n − 1` standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(MoeError::Parameter(format!(
            "need at least 2 values for a sample standard deviation, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

impl SweepSummary {
    pub fn from_runs(runs: Vec<RunRecord>) -> Result<Self> {
        let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let ent: Vec<f64> = runs.iter().map(|r| r.dispatch_entropy).collect();
        let (mean_test_accuracy, std_test_accuracy) = mean_std(&acc)?;
        let (mean_dispatch_entropy, std_dispatch_entropy) = mean_std(&ent)?;
        Ok(Self {
            runs,
            mean_test_accuracy,
            std_test_accuracy,
            mean_dispatch_entropy,
            std_dispatch_entropy,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,iterations,train_accuracy,test_accuracy,dispatch_entropy,router_correctness,active_experts\n",
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.seed,
                r.iterations,
                r.train_accuracy,
                r.test_accuracy,
                r.dispatch_entropy,
                r.router_correctness,
                r.active_experts
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        format!(
            "seeds = {}\ntest_accuracy = {:.4} ± {:.4}\ndispatch_entropy = {:.4} ± {:.4}\n",
            self.runs.len(),
            self.mean_test_accuracy,
            self.std_test_accuracy,
            self.mean_dispatch_entropy,
            self.std_dispatch_entropy
        )
    }
}

/// Runs seeds `base, base + 1, …` in order; `on_run` sees each finished run.
pub fn run_sweep(
    config: &ExperimentConfig,
    base_seed: u64,
    num_seeds: usize,
    on_run: &mut dyn FnMut(&RunArtifacts) -> Result<()>,
) -> Result<SweepSummary> {
    if num_seeds < 2 {
        return Err(MoeError::Config(format!("a sweep needs at least 2 seeds, got {num_seeds}")));
    }
    let mut runs = Vec::with_capacity(num_seeds);
    for s in 0..num_seeds as u64 {
        let art = run_experiment(config, base_seed + s)?;
        on_run(&art)?;
        runs.push(art.record);
    }
    SweepSummary::from_runs(runs)
}

/// One trained single-expert baseline.
#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub activation: Activation,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub weights: ExpertWeights,
    pub logs: Vec<SingleLog>,
}

/// Step sizes used for the single-model baselines.
pub fn baseline_config(activation: Activation, seed: u64) -> SingleExpertConfig {
    let lr = match activation {
        Activation::Linear => 0.003,
        Activation::Cubic | Activation::Relu => 0.01,
    };
    SingleExpertConfig {
        lr,
        seed,
        ..SingleExpertConfig::default()
    }
}

/// Trains one single expert of width `filters` per activation on `data`.
pub fn run_baselines(
    data: &SeedData,
    activations: &[Activation],
    filters: usize,
    seed: u64,
) -> Result<Vec<BaselineResult>> {
    activations
        .iter()
        .map(|&act| {
            let cfg = baseline_config(act, seed);
            let (weights, logs) = train_single_expert(&data.train, &data.test, filters, act, &cfg)?;
            let last = logs.last().ok_or_else(|| MoeError::Empty("baseline logs".into()))?;
            Ok(BaselineResult {
                activation: act,
                test_accuracy: last.test_accuracy,
                train_accuracy: last.train_accuracy,
                weights,
                logs,
            })
        })
        .collect()
}

/// Selectable groups of checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifySuite {
    Smoothing,
    Gap,
    GradCheck,
    ZeroSum,
    Symmetry,
    Ceiling,
    All,
}

impl std::str::FromStr for VerifySuite {
    type Err = MoeError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "smoothing" => Self::Smoothing,
            "gap" => Self::Gap,
            "gradcheck" => Self::GradCheck,
            "zerosum" => Self::ZeroSum,
            "symmetry" => Self::Symmetry,
            "theorem4.1" | "ceiling" => Self::Ceiling,
            "all" => Self::All,
            other => {
                return Err(MoeError::Config(format!(
                    "unknown suite `{other}`; expected smoothing, gap, gradcheck, zerosum, symmetry, theorem4.1 or all"
                )))
            }
        })
    }
}

/// Budgets for [`verify_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub samples: usize,
    pub trials: usize,
    pub gap_vectors: usize,
    pub gradcheck_cases: usize,
    pub symmetry_trials: usize,
    /// Data for the zero-sum run.
    pub zerosum_preset: String,
    /// Data for the single-model ceiling.
    pub ceiling_preset: String,
    pub ceiling_filters: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 100_000,
            trials: 500,
            gap_vectors: 100,
            gradcheck_cases: 20,
            symmetry_trials: 1000,
            zerosum_preset: "setting1".into(),
            ceiling_preset: "setting3".into(),
            ceiling_filters: 128,
        }
    }
}

pub const ROUTING_MS: [usize; 3] = [2, 4, 8];
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const ZERO_SUM_TOL: f64 = 1e-9;
pub const SYMMETRY_TOL: f64 = 1e-9;
pub const CEILING_EPS: f64 = 0.01;

/// Runs the selected checks and returns one report per check.
pub fn verify_suite(suite: VerifySuite, opts: &VerifyOptions) -> Result<Vec<LemmaReport>> {
    use crate::gating::RoutingNoise;
    use crate::verification as v;

    let seeds = SeedStreams::new(opts.seed);
    let mut reports = Vec::new();
    let all = suite == VerifySuite::All;
    if all || suite == VerifySuite::Smoothing {
        let mut rng = seeds.indexed(Stream::Verification, 0);
        reports.extend(v::certify_smoothing(&ROUTING_MS, opts.trials, opts.samples, RoutingNoise::Uniform01, &mut rng)?);
        let mut general = v::certify_smoothing(
            &ROUTING_MS,
            opts.trials,
            opts.samples,
            RoutingNoise::Uniform { width: 0.5 },
            &mut rng,
        )?;
        general.iter_mut().for_each(|r| r.lemma = format!("{}_kappa2", r.lemma));
        reports.extend(general);
        reports.push(v::certify_pairwise(&ROUTING_MS, opts.trials, opts.samples, RoutingNoise::Uniform01, &mut rng)?);
    }
    if all || suite == VerifySuite::Gap {
        let mut rng = seeds.indexed(Stream::Verification, 1);
        reports.push(v::certify_gap(8, opts.gap_vectors, opts.samples, &mut rng)?);
    }
    if all || suite == VerifySuite::GradCheck {
        let mut rng = seeds.indexed(Stream::Verification, 2);
        reports.push(v::certify_gradients(opts.gradcheck_cases, GRADCHECK_STEP, GRADCHECK_TOL, &mut rng)?);
    }
    if all || suite == VerifySuite::Symmetry {
        let mut rng = seeds.indexed(Stream::Verification, 3);
        reports.push(v::certify_symmetry(opts.symmetry_trials, SYMMETRY_TOL, &mut rng)?);
    }
    if all || suite == VerifySuite::ZeroSum {
        let config = ExperimentConfig::preset(&opts.zerosum_preset)?;
        let data = generate_seed_data(&config, opts.seed)?;
        let mut snapshots = Vec::new();
        let art = run_on_data(&config, &data, opts.seed, &mut |log, model| {
            snapshots.push((log.t, model.router.column_sum()));
        })?;
        let initial = art.outcome.initial.router.column_sum();
        reports.push(v::check_router_zero_sum(&snapshots, &initial, ZERO_SUM_TOL)?);
    }
    if all || suite == VerifySuite::Ceiling {
        let config = ExperimentConfig::preset(&opts.ceiling_preset)?;
        let data = generate_seed_data(&config, opts.seed)?;
        let results = run_baselines(
            &data,
            &[Activation::Linear, Activation::Cubic, Activation::Relu],
            opts.ceiling_filters,
            opts.seed,
        )?;
        let accs: Vec<(String, f64)> = results
            .iter()
            .map(|r| (r.activation.name().to_string(), r.test_accuracy))
            .collect();
        reports.push(v::single_expert_ceiling(&accs, CEILING_EPS));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_exactly() {
        let expect = [
            ("setting1", 3.0, 1.0),
            ("setting2", 3.0, 2.0),
            ("setting3", 2.0, 1.0),
            ("setting4", 2.0, 2.0),
        ];
        for (name, gamma_hi, sigma_p) in expect {
            for (suffix, n) in [("", 16_000), ("-fast", 4_000)] {
                let c = ExperimentConfig::preset(&format!("{name}{suffix}")).unwrap();
                assert_eq!((c.data.d, c.data.patches, c.data.clusters, c.data.n), (50, 4, 4, n));
                assert_eq!(c.data.alpha, Interval { lo: 0.5, hi: 2.0 });
                assert_eq!(c.data.beta, Interval { lo: 1.0, hi: 2.0 });
                assert_eq!(c.data.gamma, Interval { lo: 0.5, hi: gamma_hi });
                assert_eq!(c.data.sigma_p, sigma_p);
                assert_eq!((c.arch.experts, c.arch.filters), (8, 16));
                assert_eq!(c.arch.activation, Activation::Cubic);
                assert_eq!((c.train.eta, c.train.eta_r), (0.001, 0.1));
                assert_eq!(c.run.num_seeds, 10);
                assert_eq!(c.test_config().n, n);
            }
        }
        assert!(matches!(ExperimentConfig::preset("setting5"), Err(MoeError::Config(_))));
    }

    #[test]
    fn toml_overrides_preset() {
        let c = ExperimentConfig::from_toml(
            "[run]\npreset = \"setting2-fast\"\nnum_seeds = 3\n[arch]\nactivation = \"linear\"\n[train]\niterations = 7\n",
        )
        .unwrap();
        assert_eq!(c.data.sigma_p, 2.0);
        assert_eq!(c.arch.activation, Activation::Linear);
        assert_eq!(c.arch.experts, 8);
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.run.num_seeds, 3);
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::preset("setting3").unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn bad_toml_is_a_config_error() {
        assert!(matches!(ExperimentConfig::from_toml("[data\n"), Err(MoeError::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[run]\npreset = \"setting1\"\n[data]\nsigma_p = -1.0\n"),
            Err(MoeError::Parameter(_))
        ));
    }

    #[test]
    fn sample_std_convention() {
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert!(mean_std(&[1.0]).is_err());
    }

    #[test]
    fn tiny_sweep_is_deterministic() {
        let mut c = ExperimentConfig::preset("setting1-fast").unwrap();
        c.data.n = 64;
        c.run.test_n = Some(32);
        c.arch.experts = 2;
        c.arch.filters = 2;
        c.train.iterations = 5;
        c.train.eval_every = 2;
        let a = run_sweep(&c, 4, 2, &mut |_| Ok(())).unwrap();
        let b = run_sweep(&c, 4, 2, &mut |_| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs.len(), 2);
        assert_eq!(a.runs[1].seed, 5);
    }
}
