//! Synthetic datasets, the plain-text dataset format, class-disjoint splits
//! and model checkpoints.
//!
//! Dataset files are whitespace separated: a header `N p`, then `N` lines of
//! `class_id f_1 ... f_p`. Features are written in shortest round-trip form,
//! so `load(save(d))` reproduces every value exactly.
//!
//! Checkpoints are little-endian binary:
//!
//! ```text
//! "RSKCKPT1" | version u32 | arch u8 | hidden u32 | input u32 | output u32
//!            | seed u64 | iteration u64 | n_blocks u32 | (len u64, f64 * len)*
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::encoder::{Architecture, EncoderParams};
use crate::numerics::{l2_normalize, Matrix};
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Rows whose label is in `keep`, original order preserved.
    pub fn subset_classes(&self, keep: &BTreeSet<usize>, name: &str) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        Dataset {
            features: self.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            name: name.to_string(),
        }
    }
}

/// `classes × per_class` points: centres uniform on the unit sphere, each
/// example its centre plus isotropic Gaussian noise of standard deviation
/// `noise` per coordinate. Rows are grouped by class.
pub fn generate_synthetic(classes: usize, per_class: usize, dim: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::BadParam(format!("need at least 2 classes, got {classes}")));
    }
    if per_class < 2 {
        return Err(Error::BadParam(format!("need at least 2 examples per class, got {per_class}")));
    }
    if dim == 0 {
        return Err(Error::BadParam("dimension must be >= 1".into()));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::BadParam(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = seeded_rng(seed);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = loop {
            let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(u) = l2_normalize(&g) {
                break u;
            }
        };
        for _ in 0..per_class {
            data.extend(center.iter().map(|&v| {
                let z: f64 = rng.sample(StandardNormal);
                v + noise * z
            }));
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(classes * per_class, dim, data)?;
    Dataset::new(
        features,
        labels,
        format!("synthetic-c{classes}-n{per_class}-d{dim}-s{seed}"),
    )
}

/// Sorted class ids, first half (rounded down) to train and the rest to eval.
pub fn split_by_classes(d: &Dataset) -> Result<(Dataset, Dataset)> {
    let ids: Vec<usize> = d.class_ids().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::TooFewClasses {
            needed: 2,
            available: ids.len(),
        });
    }
    let cut = ids.len() / 2;
    let train: BTreeSet<usize> = ids[..cut].iter().copied().collect();
    let eval: BTreeSet<usize> = ids[cut..].iter().copied().collect();
    Ok((
        d.subset_classes(&train, &format!("{}-train", d.name)),
        d.subset_classes(&eval, &format!("{}-eval", d.name)),
    ))
}

/// Serialises `d` in the dataset text format.
pub fn format_dataset(d: &Dataset) -> String {
    let mut out = format!("{} {}\n", d.len(), d.dim());
    for (i, label) in d.labels.iter().enumerate() {
        out.push_str(&label.to_string());
        for v in d.features.row(i) {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, format_dataset(d))?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parses the dataset text format; `name` becomes the dataset name.
pub fn parse_dataset(text: &str, name: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let hdr: Vec<&str> = header.split_whitespace().collect();
    if hdr.len() != 2 {
        return Err(parse_err(hline + 1, format!("header must be \"N p\", got {header:?}")));
    }
    let n: usize = hdr[0]
        .parse()
        .map_err(|_| parse_err(hline + 1, format!("bad example count {:?}", hdr[0])))?;
    let p: usize = hdr[1]
        .parse()
        .map_err(|_| parse_err(hline + 1, format!("bad feature count {:?}", hdr[1])))?;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * p);
    let mut last_line = hline + 1;
    for (idx, line) in lines {
        let lineno = idx + 1;
        last_line = lineno;
        if labels.len() == n {
            return Err(parse_err(lineno, format!("more rows than the {n} declared in the header")));
        }
        let mut toks = line.split_whitespace();
        let lt = toks.next().expect("non-empty line");
        let label: usize = lt
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad class id {lt:?}")))?;
        let before = data.len();
        for tok in toks {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(lineno, format!("non-numeric feature {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite feature {tok:?}")));
            }
            data.push(v);
        }
        if data.len() - before != p {
            return Err(parse_err(
                lineno,
                format!("expected {p} features, found {}", data.len() - before),
            ));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(parse_err(
            last_line,
            format!("header declares {n} rows, found {}", labels.len()),
        ));
    }
    Dataset::new(Matrix::from_vec(n, p, data)?, labels, name)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_dataset(&text, &name)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSKCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder weights plus the provenance needed to resume or reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub seed: u64,
    pub iteration: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let p = &ck.params;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let (tag, hidden) = match p.arch {
        Architecture::Linear => (0u8, 0u32),
        Architecture::Mlp { hidden } => (1u8, hidden as u32),
    };
    out.push(tag);
    out.extend_from_slice(&hidden.to_le_bytes());
    out.extend_from_slice(&(p.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(p.output_dim as u32).to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&ck.iteration.to_le_bytes());
    let blocks = p.blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let arch = match (r.u8()?, r.u32()?) {
        (0, _) => Architecture::Linear,
        (1, h) if h > 0 => Architecture::Mlp { hidden: h as usize },
        (t, h) => return Err(Error::CorruptCheckpoint(format!("unknown architecture tag {t} (hidden {h})"))),
    };
    let input_dim = r.u32()? as usize;
    let output_dim = r.u32()? as usize;
    let seed = r.u64()?;
    let iteration = r.u64()?;
    let mut params = EncoderParams::zeros(arch, input_dim, output_dim)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let n_blocks = r.u32()? as usize;
    {
        let mut blocks = params.blocks_mut();
        if n_blocks != blocks.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{n_blocks} parameter blocks, architecture needs {}",
                blocks.len()
            )));
        }
        for (bi, block) in blocks.iter_mut().enumerate() {
            let len = r.u64()? as usize;
            if len != block.len() {
                return Err(Error::CorruptCheckpoint(format!(
                    "block {bi} holds {len} values, shape needs {}",
                    block.len()
                )));
            }
            for v in block.iter_mut() {
                *v = r.f64()?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        seed,
        iteration,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
