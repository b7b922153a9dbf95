//! Data ingestion, synthetic data, seeded splitting and batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

const PFDS_MAGIC: &[u8; 4] = b"PFDS";

// Guards floor() against representation error, e.g. 0.29 * 100.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub classes: usize,
    pub input_shape: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            classes: self.classes,
            input_shape: self.input_shape.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.classes];
        for ex in &self.examples {
            hist[ex.label] += 1;
        }
        hist
    }

    /// Reinterprets every input with a new shape of the same size.
    pub fn reshape_inputs(mut self, shape: &[usize]) -> Result<Dataset> {
        for ex in &mut self.examples {
            ex.input = ex.input.reshape(shape)?;
        }
        self.input_shape = shape.to_vec();
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Parses one 3073-byte record: a label byte then the R, G and B planes,
/// each 32x32 row-major.
pub fn parse_cifar_record(bytes: &[u8], path: &Path, offset: u64) -> Result<LabeledExample> {
    if bytes.len() != CIFAR_RECORD_LEN {
        return Err(format_err(path, offset, format!("truncated record of {} bytes", bytes.len())));
    }
    let label = bytes[0] as usize;
    if label >= CIFAR_CLASSES {
        return Err(format_err(path, offset, format!("label byte {label} > 9")));
    }
    let data = bytes[1..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(LabeledExample {
        input: Tensor::new(vec![3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        label,
    })
}

/// Encodes pixels as bytes by rounding `v * 255` after clamping to [0, 1].
pub fn pixel_bytes(input: &[f64]) -> Vec<u8> {
    input.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Inverse of [`parse_cifar_record`] for inputs on the 8-bit grid.
pub fn encode_cifar_record(ex: &LabeledExample) -> Result<Vec<u8>> {
    if ex.input.numel() != CIFAR_PIXELS {
        return Err(Error::DimMismatch {
            expected: CIFAR_PIXELS,
            actual: ex.input.numel(),
        });
    }
    if ex.label >= CIFAR_CLASSES {
        return Err(Error::LabelOutOfRange {
            label: ex.label,
            classes: CIFAR_CLASSES,
        });
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD_LEN);
    out.push(ex.label as u8);
    out.extend(pixel_bytes(ex.input.data()));
    Ok(out)
}

pub fn load_cifar_file(path: &Path) -> Result<Vec<LabeledExample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    bytes
        .chunks(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| parse_cifar_record(rec, path, (i * CIFAR_RECORD_LEN) as u64))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
}

impl Cifar10 {
    /// Checks the published split sizes and the uniform class histogram.
    pub fn verify_standard(&self) -> Result<()> {
        let checks = [(&self.train, 50_000usize), (&self.test, 10_000)];
        for (split, n) in checks {
            if split.len() != n {
                return Err(Error::DimMismatch {
                    expected: n,
                    actual: split.len(),
                });
            }
            if split.class_histogram().iter().any(|&c| c != n / CIFAR_CLASSES) {
                return Err(Error::config(format!(
                    "non-uniform class histogram {:?}",
                    split.class_histogram()
                )));
            }
        }
        Ok(())
    }
}

pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let load = |names: &[&str]| -> Result<Dataset> {
        let mut examples = Vec::new();
        for name in names {
            examples.extend(load_cifar_file(&dir.join(name))?);
        }
        Ok(Dataset {
            examples,
            classes: CIFAR_CLASSES,
            input_shape: vec![3, CIFAR_SIDE, CIFAR_SIDE],
        })
    };
    Ok(Cifar10 {
        train: load(&CIFAR_TRAIN_FILES)?,
        test: load(&[CIFAR_TEST_FILE])?,
    })
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs

/// Unit vector for class `c`: the `c`-th basis vector when `classes <= dim`,
/// otherwise a fixed pseudo-random direction.
fn blob_direction(c: usize, classes: usize, dim: usize) -> Vec<f64> {
    let mut u = vec![0.0; dim];
    if classes <= dim {
        u[c] = 1.0;
        return u;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b10b ^ c as u64);
    for v in &mut u {
        *v = StandardNormal.sample(&mut rng);
    }
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= n);
    u
}

/// Class `c` is drawn from `N(separation * u_c, I)`; examples are grouped by class.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::config(format!(
            "synthetic blobs need classes >= 2, dim >= 1, per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    if separation.is_nan() || separation < 0.0 || !separation.is_finite() {
        return Err(Error::config(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = blob_direction(c, classes, dim);
        for _ in 0..per_class {
            let data = center
                .iter()
                .map(|&m| separation * m + { let z: f64 = StandardNormal.sample(&mut rng); z })
                .collect();
            examples.push(LabeledExample {
                input: Tensor::new(vec![dim], data)?,
                label: c,
            });
        }
    }
    Ok(Dataset {
        examples,
        classes,
        input_shape: vec![dim],
    })
}

// ---------------------------------------------------------------------------
// Flat little-endian dump format

pub fn encode_pfds(ds: &Dataset) -> Vec<u8> {
    let dim = ds.input_dim();
    let mut out = Vec::with_capacity(16 + ds.len() * (4 + 8 * dim));
    out.extend_from_slice(PFDS_MAGIC);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    for ex in &ds.examples {
        out.extend_from_slice(&(ex.label as u32).to_le_bytes());
        for v in ex.input.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfds(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| format_err(path, off as u64, "truncated header"))
    };
    if bytes.get(..4) != Some(PFDS_MAGIC) {
        return Err(format_err(path, 0, "bad magic"));
    }
    let (count, dim, classes) = (u32_at(4)? as usize, u32_at(8)? as usize, u32_at(12)? as usize);
    if dim == 0 {
        return Err(format_err(path, 8, "zero input dimension"));
    }
    let rec = 4 + 8 * dim;
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let off = 16 + i * rec;
        let Some(chunk) = bytes.get(off..off + rec) else {
            return Err(format_err(path, off as u64, "truncated record"));
        };
        let label = u32::from_le_bytes(chunk[..4].try_into().unwrap()) as usize;
        if label >= classes {
            return Err(format_err(path, off as u64, format!("label {label} >= {classes} classes")));
        }
        let data = chunk[4..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        examples.push(LabeledExample {
            input: Tensor::new(vec![dim], data)?,
            label,
        });
    }
    if bytes.len() != 16 + count * rec {
        return Err(format_err(path, (16 + count * rec) as u64, "trailing bytes"));
    }
    Ok(Dataset {
        examples,
        classes,
        input_shape: vec![dim],
    })
}

pub fn write_pfds(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pfds(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_pfds(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfds(&bytes, path)
}

// ---------------------------------------------------------------------------
// Splitting and batching

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub aux: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test, self.aux];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config(format!("split fractions must lie in [0, 1]: {fr:?}")));
        }
        if fr.iter().sum::<f64>() > 1.0 + FLOOR_SLACK {
            return Err(Error::config(format!("split fractions sum above 1: {fr:?}")));
        }
        Ok(())
    }

    /// `(train, val, test, aux)` sizes for `n` examples. Each share is
    /// `floor(fraction * n)`; the rounding remainder of the total goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize, usize) {
        let fl = |f: f64| ((f * n as f64) + FLOOR_SLACK).floor() as usize;
        let total = fl(self.train + self.val + self.test + self.aux).min(n);
        let (val, test, aux) = (fl(self.val), fl(self.test), fl(self.aux));
        (total - val - test - aux, val, test, aux)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub aux: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub aux: Dataset,
    pub indices: SplitIndices,
}

pub fn split_indices(n: usize, spec: &SplitSpec, seed: u64) -> Result<SplitIndices> {
    spec.validate()?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, va, te, au) = spec.sizes(n);
    let mut rest = perm.into_iter();
    let mut take = |k: usize| rest.by_ref().take(k).collect::<Vec<_>>();
    Ok(SplitIndices {
        train: take(tr),
        val: take(va),
        test: take(te),
        aux: take(au),
    })
}

pub fn partition(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Partition> {
    let indices = split_indices(ds.len(), spec, seed)?;
    Ok(Partition {
        train: ds.subset(&indices.train),
        val: ds.subset(&indices.val),
        test: ds.subset(&indices.test),
        aux: ds.subset(&indices.aux),
        indices,
    })
}

/// One epoch over `len` items: a seeded permutation cut into chunks of
/// `batch_size`; the last chunk may be short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn cifar_dir_files(dir: &Path) -> Vec<PathBuf> {
    CIFAR_TRAIN_FILES
        .iter()
        .chain(std::iter::once(&CIFAR_TEST_FILE))
        .map(|f| dir.join(f))
        .collect()
}
