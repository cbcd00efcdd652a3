//! Datasets: a seeded Gaussian-blob generator and CSV / IDX loaders.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix_seed;

/// Labelled samples stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    labels: Vec<usize>,
    sample_shape: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(x: Array2<f64>, labels: Vec<usize>, sample_shape: Vec<usize>, classes: usize) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::arg(format!("{} samples but {} labels", x.nrows(), labels.len())));
        }
        if sample_shape.iter().product::<usize>() != x.ncols() {
            return Err(Error::arg(format!("sample shape {sample_shape:?} does not hold {} features", x.ncols())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("dataset contains non-finite features"));
        }
        Ok(Self { x, labels, sample_shape, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Batch tensor of shape `[indices.len(), sample_shape...]` and its labels.
    pub fn batch(&self, indices: &[usize]) -> (ArrayD<f64>, Vec<usize>) {
        let rows = self.x.select(Axis(0), indices);
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let x = rows.into_shape_with_order(IxDyn(&shape)).expect("sample shape checked at construction");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            x: self.x.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
        }
    }
}

/// Isotropic Gaussian clusters around seeded random centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// Centres are drawn uniformly from `[-separation, separation]^dim`.
    pub separation: f64,
    /// Standard deviation of every cluster.
    pub spread: f64,
    pub seed: u64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 {
            return Err(Error::arg("blobs need at least 2 classes and 1 dimension"));
        }
        if !(self.separation > 0.0 && self.spread >= 0.0 && self.separation.is_finite() && self.spread.is_finite()) {
            return Err(Error::arg("blob separation must be > 0 and spread >= 0"));
        }
        Ok(())
    }

    fn centres(&self) -> Result<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, 0]));
        let u = Uniform::new_inclusive(-self.separation, self.separation).map_err(|e| Error::arg(e.to_string()))?;
        Ok(Array2::from_shape_fn((self.classes, self.dim), |_| u.sample(&mut rng)))
    }
}

/// `per_class` samples of every class, interleaved by class. Different
/// `split` values give independent samples around the same centres.
pub fn blobs(spec: &BlobSpec, per_class: usize, split: u64) -> Result<Dataset> {
    spec.validate()?;
    if per_class == 0 {
        return Err(Error::arg("blobs need at least one sample per class"));
    }
    let centres = spec.centres()?;
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 1 + split]));
    let n = per_class * spec.classes;
    let mut x = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        for d in 0..spec.dim {
            x[[i, d]] = centres[[c, d]] + noise.sample(&mut rng);
        }
        labels.push(c);
    }
    Dataset::new(x, labels, vec![spec.dim], spec.classes)
}

/// Reads `label,f1,f2,...` rows. A first line whose label is not an integer
/// is treated as a header. Features are multiplied by `scale`.
pub fn load_csv(path: &Path, sample_shape: Option<&[usize]>, scale: f64) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::arg(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(file);
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::arg(format!("{}: {e}", path.display())))?;
        let Some(first) = rec.get(0) else { continue };
        let label: usize = match first.parse() {
            Ok(l) => l,
            Err(_) if line == 0 => continue,
            Err(_) => return Err(Error::arg(format!("{}:{}: bad label {first:?}", path.display(), line + 1))),
        };
        let feats = rec.len() - 1;
        if *width.get_or_insert(feats) != feats || feats == 0 {
            return Err(Error::arg(format!("{}:{}: expected {} features, got {feats}", path.display(), line + 1, width.unwrap_or(0))));
        }
        for f in rec.iter().skip(1) {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::arg(format!("{}:{}: bad value {f:?}", path.display(), line + 1)))?;
            data.push(v * scale);
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::arg(format!("{} holds no samples", path.display())))?;
    let shape = sample_shape.map(<[usize]>::to_vec).unwrap_or_else(|| vec![width]);
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let x = Array2::from_shape_vec((labels.len(), width), data).expect("rows have equal width");
    Dataset::new(x, labels, shape, classes)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_idx(path: &Path) -> Result<(u32, Vec<usize>, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::arg(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::arg(format!("{}: {e}", path.display()));
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let magic = u32::from_be_bytes(word);
    let ndim = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        m => return Err(Error::arg(format!("{}: unsupported IDX magic {m:#010x}", path.display()))),
    };
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut word).map_err(io)?;
        dims.push(u32::from_be_bytes(word) as usize);
    }
    let n: usize = dims.iter().product();
    let mut bytes = Vec::with_capacity(n);
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != n {
        return Err(Error::arg(format!("{}: expected {n} data bytes, found {}", path.display(), bytes.len())));
    }
    Ok((magic, dims, bytes))
}

/// Loads an IDX image file (`0x00000803`) and its label file
/// (`0x00000801`). Pixels are multiplied by `scale`; samples have shape
/// `[1, rows, cols]`.
pub fn load_idx(images: &Path, labels: &Path, scale: f64) -> Result<Dataset> {
    let (m, dims, pixels) = read_idx(images)?;
    if m != IDX_IMAGES {
        return Err(Error::arg(format!("{} is not an IDX image file", images.display())));
    }
    let (m, ldims, lbytes) = read_idx(labels)?;
    if m != IDX_LABELS {
        return Err(Error::arg(format!("{} is not an IDX label file", labels.display())));
    }
    if ldims[0] != dims[0] {
        return Err(Error::arg(format!("{} images but {} labels", dims[0], ldims[0])));
    }
    let feat = dims[1] * dims[2];
    let x = Array2::from_shape_vec((dims[0], feat), pixels.iter().map(|&p| p as f64 * scale).collect())
        .expect("size checked");
    let labels: Vec<usize> = lbytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(x, labels, vec![1, dims[1], dims[2]], classes)
}
