//! Orthonormal signal system and the cluster-structured data distribution.
//!
//! Each example is a bag of `P` patches in `R^d`: one feature patch
//! `y·α·v_k` carrying the label, one cluster-center patch `β·c_k`, one
//! feature-noise patch `ε·γ·v_{k'}` borrowed from another cluster and
//! `P − 3` isotropic Gaussian patches with per-coordinate variance `σ_p²/d`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::rng::{SeedStreams, Stream};

/// Feature vectors `v_k` and cluster centers `c_k`, all pairwise orthonormal.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalBasis {
    d: usize,
    features: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    /// `v_k = e_{2k-1}`, `c_k = e_{2k}` (1-based).
    Canonical,
    /// Gram-Schmidt on `2K` Gaussian vectors.
    Random,
}

impl SignalBasis {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn clusters(&self) -> usize {
        self.features.len()
    }

    pub fn feature(&self, k: usize) -> &[f64] {
        &self.features[k]
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k]
    }

    /// All `2K` vectors in the order `v_1, c_1, v_2, c_2, ...`.
    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.features
            .iter()
            .zip(&self.centers)
            .flat_map(|(v, c)| [v.as_slice(), c.as_slice()])
    }
}

pub fn build_orthonormal_basis<R: Rng + ?Sized>(
    d: usize,
    clusters: usize,
    rng: &mut R,
    mode: BasisMode,
) -> Result<SignalBasis> {
    if clusters < 2 {
        return Err(MoeError::Parameter(format!(
            "need at least 2 clusters, got {clusters}"
        )));
    }
    if d < 2 * clusters {
        return Err(MoeError::Dimension(format!(
            "d = {d} cannot hold {} orthogonal signals",
            2 * clusters
        )));
    }
    let vectors: Vec<Vec<f64>> = match mode {
        BasisMode::Canonical => (0..2 * clusters)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                e
            })
            .collect(),
        BasisMode::Random => {
            let mut out: Vec<Vec<f64>> = Vec::with_capacity(2 * clusters);
            while out.len() < 2 * clusters {
                let mut g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                // modified Gram-Schmidt, twice for stability
                for _ in 0..2 {
                    for q in &out {
                        let proj = dot(&g, q);
                        g.iter_mut().zip(q).for_each(|(gi, qi)| *gi -= proj * qi);
                    }
                }
                let norm = dot(&g, &g).sqrt();
                if norm < 1e-8 {
                    continue;
                }
                g.iter_mut().for_each(|x| *x /= norm);
                out.push(g);
            }
            out
        }
    };
    let mut features = Vec::with_capacity(clusters);
    let mut centers = Vec::with_capacity(clusters);
    for pair in vectors.chunks(2) {
        features.push(pair[0].clone());
        centers.push(pair[1].clone());
    }
    Ok(SignalBasis {
        d,
        features,
        centers,
    })
}

/// Closed sampling interval `[lo, hi]` with `0 < lo <= hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let iv = Self { lo, hi };
        iv.validate("interval")?;
        Ok(iv)
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo > 0.0 && self.lo <= self.hi && self.hi.is_finite()) {
            return Err(MoeError::Parameter(format!(
                "{name} must satisfy 0 < lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub d: usize,
    pub patches: usize,
    pub clusters: usize,
    pub n: usize,
    pub alpha: Interval,
    pub beta: Interval,
    pub gamma: Interval,
    pub sigma_p: f64,
    pub shuffle_patches: bool,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches < 3 {
            return Err(MoeError::Parameter(format!(
                "need at least 3 patches, got {}",
                self.patches
            )));
        }
        if self.clusters < 2 {
            return Err(MoeError::Parameter("need at least 2 clusters".into()));
        }
        if self.d < 2 * self.clusters {
            return Err(MoeError::Dimension(format!(
                "d = {} < 2K = {}",
                self.d,
                2 * self.clusters
            )));
        }
        self.alpha.validate("alpha")?;
        self.beta.validate("beta")?;
        self.gamma.validate("gamma")?;
        if !(self.sigma_p > 0.0 && self.sigma_p.is_finite()) {
            return Err(MoeError::Parameter(format!(
                "sigma_p must be positive, got {}",
                self.sigma_p
            )));
        }
        Ok(())
    }
}

/// What occupies a patch slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatchRole {
    Feature,
    Center,
    FeatureNoise,
    Noise(usize),
}

impl PatchRole {
    pub fn code(self) -> u64 {
        match self {
            PatchRole::Feature => 0,
            PatchRole::Center => 1,
            PatchRole::FeatureNoise => 2,
            PatchRole::Noise(i) => 3 + i as u64,
        }
    }

    pub fn from_code(code: u64) -> Self {
        match code {
            0 => PatchRole::Feature,
            1 => PatchRole::Center,
            2 => PatchRole::FeatureNoise,
            c => PatchRole::Noise((c - 3) as usize),
        }
    }
}

/// Ground truth recorded at generation time.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleMeta {
    pub k: usize,
    pub k_prime: usize,
    pub y: i8,
    pub epsilon: i8,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `roles[p]` is the content of patch slot `p`.
    pub roles: Vec<PatchRole>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    d: usize,
    /// Row-major `P × d`.
    patches: Vec<f64>,
    pub meta: ExampleMeta,
}

impl Example {
    pub fn from_parts(d: usize, patches: Vec<f64>, meta: ExampleMeta) -> Result<Self> {
        if d == 0 || patches.len() % d != 0 || patches.len() / d != meta.roles.len() {
            return Err(MoeError::Format(format!(
                "{} floats do not form {} patches of dimension {d}",
                patches.len(),
                meta.roles.len()
            )));
        }
        Ok(Self { d, patches, meta })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len() / self.d
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.patches[p * self.d..(p + 1) * self.d]
    }

    pub fn patches(&self) -> std::slice::ChunksExact<'_, f64> {
        self.patches.chunks_exact(self.d)
    }

    pub fn raw(&self) -> &[f64] {
        &self.patches
    }

    pub fn label(&self) -> f64 {
        f64::from(self.meta.y)
    }

    /// `Σ_p x^(p)`, the input seen by the linear router.
    pub fn patch_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.d];
        for patch in self.patches() {
            s.iter_mut().zip(patch).for_each(|(a, b)| *a += b);
        }
        s
    }

    /// Same example with patch slots reordered: new slot `i` holds old slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Example {
        let mut patches = Vec::with_capacity(self.patches.len());
        let mut roles = Vec::with_capacity(perm.len());
        for &p in perm {
            patches.extend_from_slice(self.patch(p));
            roles.push(self.meta.roles[p]);
        }
        Example {
            d: self.d,
            patches,
            meta: ExampleMeta {
                roles,
                ..self.meta.clone()
            },
        }
    }
}

/// A generated sample together with the header fields of its file format.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub patches: usize,
    pub clusters: usize,
    pub sigma_p: f64,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }
}

fn random_sign<R: Rng + ?Sized>(rng: &mut R) -> i8 {
    if rng.random::<bool>() {
        1
    } else {
        -1
    }
}

pub fn sample_example<R: Rng + ?Sized>(
    config: &DataConfig,
    basis: &SignalBasis,
    rng: &mut R,
) -> Result<Example> {
    if basis.dim() != config.d || basis.clusters() != config.clusters {
        return Err(MoeError::Dimension(format!(
            "basis (d={}, K={}) does not match config (d={}, K={})",
            basis.dim(),
            basis.clusters(),
            config.d,
            config.clusters
        )));
    }
    let clusters = config.clusters;
    let k = rng.random_range(0..clusters);
    let mut k_prime = rng.random_range(0..clusters - 1);
    if k_prime >= k {
        k_prime += 1;
    }
    let y = random_sign(rng);
    let epsilon = random_sign(rng);
    let alpha = config.alpha.sample(rng);
    let beta = config.beta.sample(rng);
    let gamma = config.gamma.sample(rng);

    let d = config.d;
    let num_patches = config.patches;
    let noise = Normal::new(0.0, config.sigma_p / (d as f64).sqrt())
        .map_err(|e| MoeError::Parameter(e.to_string()))?;

    let mut ordered = Vec::with_capacity(num_patches * d);
    ordered.extend(basis.feature(k).iter().map(|v| f64::from(y) * alpha * v));
    ordered.extend(basis.center(k).iter().map(|c| beta * c));
    ordered.extend(
        basis
            .feature(k_prime)
            .iter()
            .map(|v| f64::from(epsilon) * gamma * v),
    );
    for _ in 3..num_patches {
        ordered.extend((0..d).map(|_| noise.sample(rng)));
    }
    let mut roles: Vec<PatchRole> = [PatchRole::Feature, PatchRole::Center, PatchRole::FeatureNoise]
        .into_iter()
        .chain((0..num_patches - 3).map(PatchRole::Noise))
        .collect();

    let example = Example {
        d,
        patches: ordered,
        meta: ExampleMeta {
            k,
            k_prime,
            y,
            epsilon,
            alpha,
            beta,
            gamma,
            roles: std::mem::take(&mut roles),
        },
    };
    if config.shuffle_patches {
        let mut perm: Vec<usize> = (0..num_patches).collect();
        perm.shuffle(rng);
        Ok(example.permuted(&perm))
    } else {
        Ok(example)
    }
}

/// `n` i.i.d. examples; example `i` draws from its own substream of `split`,
/// so the result is independent of evaluation order.
pub fn generate_dataset(
    config: &DataConfig,
    basis: &SignalBasis,
    seeds: &SeedStreams,
    split: Stream,
) -> Result<Dataset> {
    config.validate()?;
    if config.n == 0 {
        return Err(MoeError::Empty("dataset size n must be at least 1".into()));
    }
    let examples = (0..config.n)
        .into_par_iter()
        .map(|i| sample_example(config, basis, &mut seeds.indexed(split, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        d: config.d,
        patches: config.patches,
        clusters: config.clusters,
        sigma_p: config.sigma_p,
        examples,
    })
}

/// Parameters shared by the four points of the label-flip construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadrupleSeed {
    pub k: usize,
    pub k_prime: usize,
    pub y: i8,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// The four points
/// `([αy v_k, β c_k, −γy v_k', ξ], y)`, `([−αy v_k, β c_k, γy v_k', ξ], −y)`,
/// `([γy v_k', β c_k', −αy v_k, ξ], y)`, `([−γy v_k', β c_k', αy v_k, ξ], −y)`,
/// all sharing the noise block `noise` (`P − 3` patches).
pub fn symmetry_quadruple(
    basis: &SignalBasis,
    seed: QuadrupleSeed,
    noise: &[Vec<f64>],
) -> Result<[Example; 4]> {
    let QuadrupleSeed {
        k,
        k_prime,
        y,
        alpha,
        beta,
        gamma,
    } = seed;
    if k == k_prime {
        return Err(MoeError::InvalidPair(k));
    }
    if k >= basis.clusters() || k_prime >= basis.clusters() {
        return Err(MoeError::Parameter("cluster index out of range".into()));
    }
    if !(alpha > 0.0 && gamma > 0.0) {
        return Err(MoeError::Parameter("alpha and gamma must be positive".into()));
    }
    if y != 1 && y != -1 {
        return Err(MoeError::Parameter(format!("label must be ±1, got {y}")));
    }
    let d = basis.dim();
    if let Some(bad) = noise.iter().find(|xi| xi.len() != d) {
        return Err(crate::error::shape_err(d, bad.len()));
    }
    let yf = f64::from(y);

    // (cluster, label, feature scale, noise cluster, feature-noise signed scale)
    let specs = [
        (k, y, alpha, k_prime, -gamma * yf, gamma),
        (k, -y, alpha, k_prime, gamma * yf, gamma),
        (k_prime, y, gamma, k, -alpha * yf, alpha),
        (k_prime, -y, gamma, k, alpha * yf, alpha),
    ];
    let build = |(ck, label, feat, nk, noise_signed, noise_mag): (usize, i8, f64, usize, f64, f64)| {
        let mut patches = Vec::with_capacity((3 + noise.len()) * d);
        patches.extend(basis.feature(ck).iter().map(|v| f64::from(label) * feat * v));
        patches.extend(basis.center(ck).iter().map(|c| beta * c));
        patches.extend(basis.feature(nk).iter().map(|v| noise_signed * v));
        for xi in noise {
            patches.extend_from_slice(xi);
        }
        let roles = [PatchRole::Feature, PatchRole::Center, PatchRole::FeatureNoise]
            .into_iter()
            .chain((0..noise.len()).map(PatchRole::Noise))
            .collect();
        Example {
            d,
            patches,
            meta: ExampleMeta {
                k: ck,
                k_prime: nk,
                y: label,
                epsilon: if noise_signed > 0.0 { 1 } else { -1 },
                alpha: feat,
                beta,
                gamma: noise_mag,
                roles,
            },
        }
    };
    Ok(specs.map(build))
}

/// Fresh Gaussian noise block for [`symmetry_quadruple`].
pub fn gaussian_noise_block<R: Rng + ?Sized>(
    d: usize,
    count: usize,
    sigma_p: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let scale = sigma_p / (d as f64).sqrt();
    (0..count)
        .map(|_| {
            (0..d)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
