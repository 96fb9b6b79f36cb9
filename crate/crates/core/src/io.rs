//! Binary and CSV formats for datasets, checkpoints, and training logs.
//!
//! All binary fields are little-endian 64-bit. Files are written to a
//! temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MoeError, Result};
use crate::experts::{Activation, ExpertBank, ExpertWeights};
use crate::gating::RouterWeights;
use crate::signal::{Dataset, Example, ExampleMeta, PatchRole};
use crate::training::{IterationLog, MoeModel};

pub const DATASET_MAGIC: &[u8; 8] = b"MOEDATA1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOECKPT1";

/// Writes `bytes` to `path` atomically.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| MoeError::Io(e.error))?;
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.0.reserve(vs.len() * 8);
        vs.iter().for_each(|v| self.f64(*v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MoeError::Format(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != expected {
            return Err(MoeError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| MoeError::Format("size overflows usize".into()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| MoeError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(MoeError::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn sign(v: i64, what: &str) -> Result<i8> {
    match v {
        1 => Ok(1),
        -1 => Ok(-1),
        _ => Err(MoeError::Format(format!("{what} must be ±1, got {v}"))),
    }
}

/// Header `magic, d, P, K, n, σ_p`, then per example
/// `y, k, k', ε, α, β, γ, P role codes, P·d floats`.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let row = 7 + ds.patches + ds.patches * ds.d;
    let mut w = Writer(Vec::with_capacity(48 + ds.len() * row * 8));
    w.0.extend_from_slice(DATASET_MAGIC);
    w.u64(ds.d as u64);
    w.u64(ds.patches as u64);
    w.u64(ds.clusters as u64);
    w.u64(ds.len() as u64);
    w.f64(ds.sigma_p);
    for ex in ds.iter() {
        let m = &ex.meta;
        w.i64(i64::from(m.y));
        w.u64(m.k as u64);
        w.u64(m.k_prime as u64);
        w.i64(i64::from(m.epsilon));
        w.f64(m.alpha);
        w.f64(m.beta);
        w.f64(m.gamma);
        m.roles.iter().for_each(|r| w.u64(r.code()));
        w.f64s(ex.raw());
    }
    w.0
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let d = r.usize()?;
    let patches = r.usize()?;
    let clusters = r.usize()?;
    let n = r.usize()?;
    let sigma_p = r.f64()?;
    if d == 0 || patches == 0 {
        return Err(MoeError::Format("dataset header has d = 0 or P = 0".into()));
    }
    let row_bytes = (7 + patches + patches * d) * 8;
    if (bytes.len() - 48) / row_bytes != n || (bytes.len() - 48) % row_bytes != 0 {
        return Err(MoeError::Format(format!(
            "header says {n} examples but payload holds {} bytes",
            bytes.len() - 48
        )));
    }
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let y = sign(r.i64()?, "label")?;
        let k = r.usize()?;
        let k_prime = r.usize()?;
        let epsilon = sign(r.i64()?, "epsilon")?;
        if k >= clusters || k_prime >= clusters {
            return Err(MoeError::Format(format!(
                "cluster index out of range: ({k}, {k_prime}) with K = {clusters}"
            )));
        }
        let alpha = r.f64()?;
        let beta = r.f64()?;
        let gamma = r.f64()?;
        let roles = (0..patches)
            .map(|_| r.u64().map(PatchRole::from_code))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f64s(patches * d)?;
        let meta = ExampleMeta {
            k,
            k_prime,
            y,
            epsilon,
            alpha,
            beta,
            gamma,
            roles,
        };
        examples.push(Example::from_parts(d, data, meta)?);
    }
    r.finish()?;
    Ok(Dataset {
        d,
        patches,
        clusters,
        sigma_p,
        examples,
    })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    atomic_write(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// One row per example: metadata, role codes, then the flattened patches.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::from("y,k,k_prime,epsilon,alpha,beta,gamma");
    for p in 0..ds.patches {
        let _ = write!(out, ",role_{p}");
    }
    for p in 0..ds.patches {
        for i in 0..ds.d {
            let _ = write!(out, ",x_{p}_{i}");
        }
    }
    out.push('\n');
    for ex in ds.iter() {
        let m = &ex.meta;
        let _ = write!(
            out,
            "{},{},{},{},{:?},{:?},{:?}",
            m.y, m.k, m.k_prime, m.epsilon, m.alpha, m.beta, m.gamma
        );
        for r in &m.roles {
            let _ = write!(out, ",{}", r.code());
        }
        for v in ex.raw() {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Header `magic, M, J, d, activation tag, t`, the expert matrices (each
/// `J × d` row-major), then the router as `d × M` row-major.
pub fn encode_checkpoint(model: &MoeModel, t: usize) -> Vec<u8> {
    let bank = &model.bank;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u64(bank.num_experts() as u64);
    w.u64(bank.filters() as u64);
    w.u64(bank.dim() as u64);
    w.u64(bank.activation.tag());
    w.u64(t as u64);
    for e in bank.experts() {
        w.f64s(e.as_slice());
    }
    w.f64s(&model.router.to_row_major());
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MoeModel, usize)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let m = r.usize()?;
    let j = r.usize()?;
    let d = r.usize()?;
    let activation = Activation::from_tag(r.u64()?)?;
    let t = r.usize()?;
    let expected = m
        .checked_mul(j * d + d)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(48));
    if expected != Some(bytes.len()) {
        return Err(MoeError::Format(format!(
            "checkpoint of {} bytes does not match M={m} J={j} d={d}",
            bytes.len()
        )));
    }
    let experts = (0..m)
        .map(|_| ExpertWeights::from_vec(j, d, r.f64s(j * d)?))
        .collect::<Result<Vec<_>>>()?;
    let router = RouterWeights::from_row_major(d, m, &r.f64s(d * m)?)?;
    r.finish()?;
    Ok((MoeModel::new(ExpertBank::new(activation, experts)?, router)?, t))
}

pub fn write_checkpoint(path: &Path, model: &MoeModel, t: usize) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model, t))
}

pub fn read_checkpoint(path: &Path) -> Result<(MoeModel, usize)> {
    decode_checkpoint(&fs::read(path)?)
}

/// `t, loss, train_acc, test_acc, entropy, load_1..M, gnorm_1..M`.
pub fn training_log_csv(logs: &[IterationLog]) -> String {
    let m = logs.first().map_or(0, |l| l.loads.len());
    let mut out = String::from("t,loss,train_acc,test_acc,entropy");
    (1..=m).for_each(|i| {
        let _ = write!(out, ",load_{i}");
    });
    (1..=m).for_each(|i| {
        let _ = write!(out, ",gnorm_{i}");
    });
    out.push('\n');
    for l in logs {
        let _ = write!(
            out,
            "{},{:.9e},{:.6},{:.6},{:.9e}",
            l.t, l.perturbed_loss, l.train_accuracy, l.test_accuracy, l.dispatch_entropy
        );
        for v in l.loads.iter().chain(&l.grad_norms) {
            let _ = write!(out, ",{v:.6e}");
        }
        out.push('\n');
    }
    out
}

/// Long-format entropy curves, `label, t, entropy`, ready for plotting.
pub fn entropy_curves_csv(series: &[(String, Vec<IterationLog>)]) -> String {
    let mut out = String::from("label,t,entropy\n");
    for (label, logs) in series {
        for l in logs {
            let _ = writeln!(out, "{label},{},{:.9e}", l.t, l.dispatch_entropy);
        }
    }
    out
}

/// Parses the `t` and `entropy` columns back out of a training log.
pub fn read_entropy_column(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| MoeError::Format("empty training log".into()))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| MoeError::Format(format!("training log has no `{name}` column")))
    };
    let (ti, ei) = (col("t")?, col("entropy")?);
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            let get = |i: usize| {
                fields
                    .get(i)
                    .ok_or_else(|| MoeError::Format(format!("short row: {line}")))
            };
            let t = get(ti)?
                .parse()
                .map_err(|e| MoeError::Format(format!("bad t: {e}")))?;
            let h = get(ei)?
                .parse()
                .map_err(|e| MoeError::Format(format!("bad entropy: {e}")))?;
            Ok((t, h))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::init_expert_bank;
    use crate::rng::{LabRng, SeedStreams, Stream};
    use crate::signal::{build_orthonormal_basis, generate_dataset, BasisMode, DataConfig, Interval};
    use rand::SeedableRng;

    fn small_dataset() -> Dataset {
        let config = DataConfig {
            d: 10,
            patches: 4,
            clusters: 4,
            n: 7,
            alpha: Interval::new(0.5, 2.0).unwrap(),
            beta: Interval::new(1.0, 2.0).unwrap(),
            gamma: Interval::new(0.5, 3.0).unwrap(),
            sigma_p: 1.0,
            shuffle_patches: true,
        };
        let seeds = SeedStreams::new(3);
        let basis =
            build_orthonormal_basis(10, 4, &mut seeds.rng(Stream::Basis), BasisMode::Random).unwrap();
        generate_dataset(&config, &basis, &seeds, Stream::TrainData).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let ds = small_dataset();
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_rejects_damage() {
        let ds = small_dataset();
        let mut bytes = encode_dataset(&ds);
        assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(MoeError::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = LabRng::seed_from_u64(9);
        let bank = init_expert_bank(3, 5, 7, 0.4, Activation::Cubic, &mut rng).unwrap();
        let theta: Vec<f64> = (0..21).map(|i| (i as f64).sin() * 1e-3).collect();
        let model = MoeModel::new(bank, RouterWeights::from_row_major(7, 3, &theta).unwrap()).unwrap();
        let (back, t) = decode_checkpoint(&encode_checkpoint(&model, 42)).unwrap();
        assert_eq!(t, 42);
        assert_eq!(back.router.to_row_major(), model.router.to_row_major());
        for (a, b) in back.bank.experts().iter().zip(model.bank.experts()) {
            let bits = |e: &ExpertWeights| e.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.activation(), Activation::Cubic);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/file.bin");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
    }

    #[test]
    fn csv_layouts() {
        let ds = small_dataset();
        let csv = dataset_to_csv(&ds);
        assert_eq!(csv.lines().count(), 8);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 7 + 4 + 40);

        let log = IterationLog {
            t: 5,
            perturbed_loss: 0.5,
            train_accuracy: 0.75,
            test_accuracy: 0.7,
            dispatch_entropy: 0.25,
            loads: vec![1.0, 2.0],
            grad_norms: vec![0.1, 0.2],
            router_sum_norm: 0.0,
        };
        let text = training_log_csv(&[log.clone()]);
        assert_eq!(
            text.lines().next().unwrap(),
            "t,loss,train_acc,test_acc,entropy,load_1,load_2,gnorm_1,gnorm_2"
        );
        assert_eq!(read_entropy_column(&text).unwrap(), vec![(5, 0.25)]);
        let long = entropy_curves_csv(&[("a".into(), vec![log])]);
        assert_eq!(long.lines().nth(1).unwrap(), "a,5,2.500000000e-1");
    }
}
