use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HBMDSET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Regression,
    /// Labels in {0, 1}.
    Binary,
    /// Labels are class ids `0..classes`.
    Multiclass(u32),
}

impl LabelKind {
    fn code(self) -> (u32, u32) {
        match self {
            LabelKind::Regression => (0, 0),
            LabelKind::Binary => (1, 2),
            LabelKind::Multiclass(c) => (2, c),
        }
    }

    fn from_code(kind: u32, classes: u32) -> Result<Self> {
        match kind {
            0 => Ok(LabelKind::Regression),
            1 => Ok(LabelKind::Binary),
            2 if classes >= 2 => Ok(LabelKind::Multiclass(classes)),
            _ => Err(Error::Parse {
                line: 0,
                reason: format!("unknown label kind {kind}/{classes}"),
            }),
        }
    }
}

/// Dense row-major samples with features in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    n: usize,
    features: Vec<f32>,
    labels: Vec<f32>,
    kind: LabelKind,
}

impl Dataset {
    pub fn new(n: usize, features: Vec<f32>, labels: Vec<f32>, kind: LabelKind) -> Result<Self> {
        let m = labels.len();
        if m == 0 || n == 0 {
            return Err(Error::config("a dataset needs at least one sample and one feature"));
        }
        if features.len() != m * n {
            return Err(Error::DimensionMismatch {
                expected: m * n,
                actual: features.len(),
            });
        }
        if let Some(pos) = features.iter().position(|v| !(v.abs() <= 1.0)) {
            return Err(Error::config(format!(
                "feature {} of sample {} is {}, outside [-1, 1]",
                pos % n,
                pos / n,
                features[pos]
            )));
        }
        for (i, &b) in labels.iter().enumerate() {
            let ok = match kind {
                LabelKind::Regression => b.is_finite(),
                LabelKind::Binary => b == 0.0 || b == 1.0,
                LabelKind::Multiclass(c) => b >= 0.0 && b < c as f32 && b.fract() == 0.0,
            };
            if !ok {
                return Err(Error::config(format!("label {b} of sample {i} invalid for {kind:?}")));
            }
        }
        Ok(Self {
            m,
            n,
            features,
            labels,
            kind,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn size_bytes(&self) -> u64 {
        4 * self.m as u64 * self.n as u64
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.n..(i + 1) * self.n]
    }

    pub fn label(&self, i: usize) -> f32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f32] {
        &self.labels
    }

    /// Binary task separating `class` from all other classes.
    pub fn one_vs_rest(&self, class: u32) -> Result<Dataset> {
        let LabelKind::Multiclass(classes) = self.kind else {
            return Err(Error::config("one-vs-rest needs a multi-class dataset"));
        };
        if class >= classes {
            return Err(Error::config(format!("class {class} outside 0..{classes}")));
        }
        let labels = self
            .labels
            .iter()
            .map(|&b| if b == class as f32 { 1.0 } else { 0.0 })
            .collect();
        Dataset::new(self.n, self.features.clone(), labels, LabelKind::Binary)
    }

    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let (kind, classes) = self.kind.code();
        w.write_all(MAGIC)?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&kind.to_le_bytes())?;
        w.write_all(&classes.to_le_bytes())?;
        for v in self.features.iter().chain(&self.labels) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Dataset> {
        let bad = |reason: &str| Error::Parse {
            line: 0,
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a dataset file"));
        }
        let mut u64buf = [0u8; 8];
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u64buf)?;
        let m = usize::try_from(u64::from_le_bytes(u64buf)).map_err(|_| bad("sample count too large"))?;
        r.read_exact(&mut u64buf)?;
        let n = usize::try_from(u64::from_le_bytes(u64buf)).map_err(|_| bad("feature count too large"))?;
        r.read_exact(&mut u32buf)?;
        let kind = u32::from_le_bytes(u32buf);
        r.read_exact(&mut u32buf)?;
        let kind = LabelKind::from_code(kind, u32::from_le_bytes(u32buf))?;
        let total = m.checked_mul(n).ok_or_else(|| bad("dataset too large"))?;
        let mut read_f32s = |count: usize| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; count.checked_mul(4).ok_or_else(|| bad("dataset too large"))?];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let features = read_f32s(total)?;
        let labels = read_f32s(m)?;
        Dataset::new(n, features, labels, kind)
    }

    /// Reads `label,f1,...,fn` lines; blank lines and `#` comments are skipped.
    pub fn read_delimited(r: impl BufRead, kind: LabelKind) -> Result<Dataset> {
        let mut n = None;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let values: Vec<f32> = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f32>().map_err(|e| Error::Parse {
                        line: lineno,
                        reason: format!("`{}`: {e}", f.trim()),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() < 2 {
                return Err(Error::Parse {
                    line: lineno,
                    reason: "need a label and at least one feature".into(),
                });
            }
            let width = *n.get_or_insert(values.len() - 1);
            if values.len() - 1 != width {
                return Err(Error::Parse {
                    line: lineno,
                    reason: format!("{} features, expected {width}", values.len() - 1),
                });
            }
            labels.push(values[0]);
            features.extend_from_slice(&values[1..]);
        }
        let n = n.ok_or(Error::Parse {
            line: 0,
            reason: "no samples".into(),
        })?;
        Dataset::new(n, features, labels, kind)
    }

    pub fn write_delimited(&self, mut w: impl Write) -> Result<()> {
        for i in 0..self.m {
            write!(w, "{}", self.labels[i])?;
            for v in self.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Shape of a named evaluation dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub m: usize,
    pub n: usize,
    pub kind: LabelKind,
    pub epochs: usize,
}

pub const PRESETS: [DatasetPreset; 4] = [
    DatasetPreset {
        name: "IM",
        m: 41600,
        n: 2048,
        kind: LabelKind::Binary,
        epochs: 10,
    },
    DatasetPreset {
        name: "MNIST",
        m: 50000,
        n: 784,
        kind: LabelKind::Multiclass(10),
        epochs: 10,
    },
    DatasetPreset {
        name: "AEA",
        m: 32768,
        n: 126,
        kind: LabelKind::Binary,
        epochs: 20,
    },
    DatasetPreset {
        name: "SYN",
        m: 262144,
        n: 256,
        kind: LabelKind::Regression,
        epochs: 10,
    },
];

impl DatasetPreset {
    pub fn find(name: &str) -> Option<DatasetPreset> {
        PRESETS.iter().copied().find(|p| p.name.eq_ignore_ascii_case(name))
    }

    pub fn size_bytes(&self) -> u64 {
        4 * self.m as u64 * self.n as u64
    }
}

/// A generated dataset and the model that produced its labels.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// One row of `n` weights per class (a single row unless multi-class).
    pub truth: Vec<Vec<f32>>,
}

/// Noise-free synthetic data; see [`generate_synthetic_noisy`].
pub fn generate_synthetic(m: usize, n: usize, kind: LabelKind, seed: u64) -> Result<Synthetic> {
    generate_synthetic_noisy(m, n, kind, 0.0, seed)
}

/// Samples uniform in [-1, 1]^n labelled by a random ground-truth model:
/// regression labels are the inner product plus Gaussian noise, binary
/// labels its sign, multi-class labels the best-scoring class.
pub fn generate_synthetic_noisy(
    m: usize,
    n: usize,
    kind: LabelKind,
    noise_std: f64,
    seed: u64,
) -> Result<Synthetic> {
    if m == 0 || n == 0 {
        return Err(Error::config("synthetic data needs m, n >= 1"));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::config(format!("noise standard deviation: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = match kind {
        LabelKind::Multiclass(c) => c as usize,
        _ => 1,
    };
    let truth: Vec<Vec<f32>> = (0..rows)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect())
        .collect();
    let mut features = Vec::with_capacity(m * n);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let start = features.len();
        features.extend((0..n).map(|_| rng.random_range(-1.0f32..=1.0)));
        let a = &features[start..];
        let score = |w: &[f32]| -> f64 { w.iter().zip(a).map(|(w, a)| f64::from(*w) * f64::from(*a)).sum() };
        let label = match kind {
            LabelKind::Regression => {
                let e = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (score(&truth[0]) + e) as f32
            }
            LabelKind::Binary => {
                if score(&truth[0]) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LabelKind::Multiclass(_) => {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (c, w) in truth.iter().enumerate() {
                    let s = score(w);
                    if s > best_score {
                        best = c;
                        best_score = s;
                    }
                }
                best as f32
            }
        };
        labels.push(label);
    }
    Ok(Synthetic {
        dataset: Dataset::new(n, features, labels, kind)?,
        truth,
    })
}
