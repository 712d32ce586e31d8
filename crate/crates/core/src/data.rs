//! MNIST in the IDX container, dynamic binarization, and a synthetic toy.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Real, Tensor};
use crate::dists::EmissionKind;
use crate::error::{Error, Result};
use crate::seeds::{self, tag};

pub const IDX_UBYTE: u8 = 0x08;
pub const IDX_FLOAT: u8 = 0x0d;

/// Raw IDX array: element type, big-endian dimensions, raw payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

fn element_size(type_code: u8) -> Option<usize> {
    match type_code {
        0x08 | 0x09 => Some(1),
        0x0b => Some(2),
        0x0c | 0x0d => Some(4),
        0x0e => Some(8),
        _ => None,
    }
}

impl IdxArray {
    pub fn ubyte(dims: Vec<u32>, payload: Vec<u8>) -> Result<Self> {
        let a = Self { type_code: IDX_UBYTE, dims, payload };
        a.check_len()?;
        Ok(a)
    }

    pub fn float(dims: Vec<u32>, values: &[f32]) -> Result<Self> {
        let payload = values.iter().flat_map(|v| v.to_be_bytes()).collect();
        let a = Self { type_code: IDX_FLOAT, dims, payload };
        a.check_len()?;
        Ok(a)
    }

    pub fn count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn header_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    fn check_len(&self) -> Result<()> {
        let size = element_size(self.type_code).ok_or_else(|| Error::format(2, "unknown IDX element type"))?;
        if self.payload.len() != self.count() * size {
            return Err(Error::format(
                (self.header_len() + self.payload.len()) as u64,
                format!("payload holds {} bytes, dimensions need {}", self.payload.len(), self.count() * size),
            ));
        }
        Ok(())
    }

    /// Magic number, e.g. `0x00000803` for a 3-dimensional ubyte array.
    pub fn magic(&self) -> u32 {
        ((self.type_code as u32) << 8) | self.dims.len() as u32
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(bytes.len() as u64, "truncated IDX magic"));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(Error::format(0, "bad IDX magic"));
        }
        let type_code = bytes[2];
        let size = element_size(type_code).ok_or_else(|| Error::format(2, format!("unknown IDX element type {type_code:#04x}")))?;
        let ndims = bytes[3] as usize;
        if ndims == 0 {
            return Err(Error::format(3, "IDX array with zero dimensions"));
        }
        let header = 4 + 4 * ndims;
        if bytes.len() < header {
            return Err(Error::format(bytes.len() as u64, "truncated IDX dimensions"));
        }
        let dims: Vec<u32> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let need = dims
            .iter()
            .try_fold(size, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
        let have = bytes.len() - header;
        if have < need {
            return Err(Error::format(bytes.len() as u64, format!("truncated IDX payload: {have} of {need} bytes")));
        }
        if have > need {
            return Err(Error::format((header + need) as u64, "trailing bytes after IDX payload"));
        }
        Ok(Self { type_code, dims, payload: bytes[header..].to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + self.payload.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Generative parameters of a toy dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTruth {
    /// `clusters x x_dim` cluster means; `x | c ~ N(means[c], I)`.
    pub means: Vec<Vec<f64>>,
}

/// Paired modalities: `x` (image or continuous vector) and `w` (one-hot).
#[derive(Clone, Debug)]
pub struct BimodalDataset {
    pub x: Tensor<f32>,
    pub w: Tensor<f32>,
    pub labels: Vec<usize>,
    pub x_kind: EmissionKind,
    pub w_kind: EmissionKind,
    pub provenance: String,
    pub truth: Option<ToyTruth>,
}

impl BimodalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn w_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.gather_rows(indices)?,
            w: self.w.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            x_kind: self.x_kind,
            w_kind: self.w_kind,
            provenance: self.provenance.clone(),
            truth: self.truth.clone(),
        })
    }

    /// First `n` items (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let mut out = self.select(&idx)?;
        if n < self.len() {
            out.provenance = format!("{} first {n}", self.provenance);
        }
        Ok(out)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Input(format!("label {l} outside {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Reads an image file (magic `0x803`) and label file (magic `0x801`).
pub fn load_mnist(images: &Path, labels: &Path) -> Result<BimodalDataset> {
    let img = IdxArray::read(images)?;
    let lab = IdxArray::read(labels)?;
    mnist_from_idx(&img, &lab, &format!("{} + {}", images.display(), labels.display()))
}

pub fn mnist_from_idx(img: &IdxArray, lab: &IdxArray, provenance: &str) -> Result<BimodalDataset> {
    if img.magic() != 0x0803 {
        return Err(Error::format(0, format!("image magic {:#010x}, expected 0x00000803", img.magic())));
    }
    if lab.magic() != 0x0801 {
        return Err(Error::format(0, format!("label magic {:#010x}, expected 0x00000801", lab.magic())));
    }
    let n = img.dims[0] as usize;
    if lab.dims[0] as usize != n {
        return Err(Error::format(4, format!("{n} images but {} labels", lab.dims[0])));
    }
    if n == 0 || img.dims[1] == 0 || img.dims[2] == 0 {
        return Err(Error::format(4, "empty image array"));
    }
    let pixels = (img.dims[1] * img.dims[2]) as usize;
    let x: Vec<f32> = img.payload.iter().map(|&b| b as f32 / 255.0).collect();
    let mut classes = Vec::with_capacity(n);
    for (i, &l) in lab.payload.iter().enumerate() {
        if l > 9 {
            return Err(Error::format(8 + i as u64, format!("label {l} is not a digit")));
        }
        classes.push(l as usize);
    }
    Ok(BimodalDataset {
        x: Tensor::new(vec![n, pixels], x)?,
        w: one_hot(&classes, 10)?,
        labels: classes,
        x_kind: EmissionKind::Bernoulli,
        w_kind: EmissionKind::Categorical,
        provenance: provenance.to_string(),
        truth: None,
    })
}

/// Which part of MNIST to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistPart {
    /// First 50,000 items of the training file.
    Train,
    /// Last 10,000 items of the training file.
    Held,
    /// The 10,000-item test file.
    Test,
}

pub const MNIST_TRAIN_ITEMS: usize = 50_000;

/// Loads one part from a directory holding the four official files.
pub fn load_mnist_part(dir: &Path, part: MnistPart) -> Result<BimodalDataset> {
    let (img, lab) = match part {
        MnistPart::Train | MnistPart::Held => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        MnistPart::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let full = load_mnist(&dir.join(img), &dir.join(lab))?;
    split_mnist(full, part)
}

/// Applies the 50,000 / 10,000 policy to a loaded training file.
pub fn split_mnist(full: BimodalDataset, part: MnistPart) -> Result<BimodalDataset> {
    let n = full.len();
    let range = match part {
        MnistPart::Test => return Ok(full),
        MnistPart::Train => 0..MNIST_TRAIN_ITEMS.min(n),
        MnistPart::Held => MNIST_TRAIN_ITEMS.min(n)..n,
    };
    let tag = if part == MnistPart::Train { "train" } else { "held" };
    let mut out = full.select(&range.clone().collect::<Vec<_>>())?;
    out.provenance = format!("{} [{tag} {}..{}]", full.provenance, range.start, range.end);
    Ok(out)
}

/// Samples `{0,1}` pixels with probability equal to the gray value.
pub fn binarize<T: Real, R: Rng>(x: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(x.numel());
    for &v in x.data() {
        let p = v.to_f64_lossy();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Range(format!("gray value {p} outside [0, 1]")));
        }
        let u: f64 = rng.random();
        out.push(if u < p { T::one() } else { T::zero() });
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Binarizes row `i` with its own stream `[TEST_BINARIZE, ids[i]]`, so an
/// item gets the same pixels however the data is subset or batched.
pub fn binarize_items<T: Real>(x: &Tensor<T>, seed: u64, ids: &[u64]) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2()?;
    if ids.len() != rows {
        return Err(Error::shape(format!("{} ids for {rows} rows", ids.len())));
    }
    let mut out = Vec::with_capacity(x.numel());
    for (i, &id) in ids.iter().enumerate() {
        let mut rng = seeds::rng(seed, &[tag::TEST_BINARIZE, id]);
        let row = Tensor::new(vec![1, cols], x.row(i).to_vec())?;
        out.extend(binarize(&row, &mut rng)?.into_data());
    }
    Tensor::new(vec![rows, cols], out)
}

/// Synthetic bimodal data: `w` is a cluster one-hot, `x | w` a unit-variance
/// Gaussian around the cluster mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub clusters: usize,
    pub x_dim: usize,
    pub items: usize,
    /// Cluster means are drawn uniformly from `[-spread, spread]`.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { clusters: 2, x_dim: 1, items: 1000, spread: 3.0, seed: 0 }
    }
}

pub fn make_toy(spec: &ToySpec) -> Result<BimodalDataset> {
    make_toy_part(spec, 0)
}

/// Draws items from stream `part` around the same cluster means; part 0 is
/// what [`make_toy`] returns, other parts serve as held-out data.
pub fn make_toy_part(spec: &ToySpec, part: u64) -> Result<BimodalDataset> {
    if spec.clusters < 2 || spec.x_dim == 0 || spec.items == 0 {
        return Err(Error::config("toy needs at least 2 clusters, x_dim >= 1 and items >= 1"));
    }
    let mut mrng = seeds::rng(spec.seed, &[seeds::tag::TOY, 0]);
    let means: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| (0..spec.x_dim).map(|_| mrng.random_range(-spec.spread..=spec.spread)).collect())
        .collect();
    let mut rng = seeds::rng(spec.seed, &[seeds::tag::TOY, 1, part]);
    let mut labels = Vec::with_capacity(spec.items);
    let mut x = Vec::with_capacity(spec.items * spec.x_dim);
    for _ in 0..spec.items {
        let c = rng.random_range(0..spec.clusters);
        labels.push(c);
        for m in &means[c] {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.push((m + e) as f32);
        }
    }
    Ok(BimodalDataset {
        x: Tensor::new(vec![spec.items, spec.x_dim], x)?,
        w: one_hot(&labels, spec.clusters)?,
        labels,
        x_kind: EmissionKind::Gaussian,
        w_kind: EmissionKind::Categorical,
        provenance: format!(
            "toy clusters={} x_dim={} items={} spread={} seed={} part={part}",
            spec.clusters, spec.x_dim, spec.items, spec.spread, spec.seed
        ),
        truth: Some(ToyTruth { means }),
    })
}

/// Exports `x` as a float IDX array and the labels as a ubyte IDX array.
pub fn to_idx(data: &BimodalDataset) -> Result<(IdxArray, IdxArray)> {
    let x = IdxArray::float(vec![data.len() as u32, data.x_dim() as u32], data.x.data())?;
    let labels = data
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Input(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    let w = IdxArray::ubyte(vec![data.len() as u32], labels)?;
    Ok((x, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: u32) -> (IdxArray, IdxArray) {
        let img = IdxArray::ubyte(vec![n, 28, 28], vec![0; n as usize * 784]).unwrap();
        let lab = IdxArray::ubyte(vec![n], (0..n).map(|i| (i % 10) as u8).collect()).unwrap();
        (img, lab)
    }

    #[test]
    fn all_zero_synthetic_file_loads() {
        let (img, lab) = synthetic(10);
        assert_eq!(img.magic(), 0x803);
        assert_eq!(lab.magic(), 0x801);
        let d = mnist_from_idx(&img, &lab, "synthetic").unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.x.shape(), &[10, 784]);
        assert!(d.x.data().iter().all(|&v| v == 0.0));
        for i in 0..10 {
            assert_eq!(d.w.row(i).iter().sum::<f32>(), 1.0);
            assert_eq!(d.w.row(i)[i % 10], 1.0);
        }
    }

    #[test]
    fn truncation_and_bad_magic_report_offsets() {
        let (img, _) = synthetic(3);
        let mut bytes = img.to_bytes();
        bytes.truncate(100);
        match IdxArray::parse(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("{other:?}"),
        }
        match IdxArray::parse(&bytes[..10]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        let mut bad = img.to_bytes();
        bad[0] = 1;
        assert!(matches!(IdxArray::parse(&bad), Err(Error::Format { offset: 0, .. })));
        let (img, lab) = synthetic(3);
        assert!(matches!(mnist_from_idx(&lab, &img, ""), Err(Error::Format { .. })));
        let short = IdxArray::ubyte(vec![2], vec![1, 2]).unwrap();
        assert!(matches!(mnist_from_idx(&img, &short, ""), Err(Error::Format { .. })));
        let big = IdxArray::ubyte(vec![3], vec![1, 12, 2]).unwrap();
        assert!(matches!(mnist_from_idx(&img, &big, ""), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn idx_round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let payload: Vec<u8> = (0..5 * 4 * 3).map(|_| rng.random()).collect();
        let a = IdxArray::ubyte(vec![5, 4, 3], payload).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(IdxArray::parse(&bytes).unwrap().to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.idx");
        a.write(&path).unwrap();
        assert_eq!(IdxArray::read(&path).unwrap(), a);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let img = IdxArray::ubyte(vec![60_010, 1, 1], (0..60_010u32).map(|i| (i % 251) as u8).collect()).unwrap();
        let lab = IdxArray::ubyte(vec![60_010], vec![3; 60_010]).unwrap();
        let full = mnist_from_idx(&img, &lab, "s").unwrap();
        let train = split_mnist(full.clone(), MnistPart::Train).unwrap();
        let held = split_mnist(full.clone(), MnistPart::Held).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(held.len(), 10_010);
        let mut joined = train.x.data().to_vec();
        joined.extend_from_slice(held.x.data());
        assert_eq!(joined, full.x.data());
    }

    #[test]
    fn binarize_endpoints_frequency_and_determinism() {
        let x = Tensor::<f32>::from_f64(1, 3, &[0.0, 1.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ones = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let b = binarize(&x, &mut rng).unwrap();
            assert_eq!(b.data()[0], 0.0);
            assert_eq!(b.data()[1], 1.0);
            ones += b.data()[2] as usize;
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{freq}");
        let a = binarize(&x, &mut seeds::rng(5, &[3])).unwrap();
        let b = binarize(&x, &mut seeds::rng(5, &[3])).unwrap();
        assert_eq!(a, b);
        let bad = Tensor::<f32>::from_f64(1, 1, &[1.5]).unwrap();
        assert!(matches!(binarize(&bad, &mut rng), Err(Error::Range(_))));
    }

    #[test]
    fn toy_is_reproducible_and_balanced() {
        let spec = ToySpec { clusters: 4, x_dim: 2, items: 10_000, spread: 3.0, seed: 9 };
        let a = make_toy(&spec).unwrap();
        let b = make_toy(&spec).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.truth.as_ref().unwrap().means.len(), 4);
        for i in 0..a.len() {
            assert_eq!(a.w.row(i).iter().sum::<f32>(), 1.0);
        }
        let p: f64 = 0.25;
        let se = (p * (1.0 - p) / 10_000.0).sqrt();
        for c in 0..4 {
            let f = a.labels.iter().filter(|&&l| l == c).count() as f64 / 10_000.0;
            assert!((f - p).abs() < 3.0 * se, "class {c}: {f}");
        }
        let (x, w) = to_idx(&a).unwrap();
        assert_eq!(IdxArray::parse(&x.to_bytes()).unwrap(), x);
        assert_eq!(w.magic(), 0x801);
        assert!(make_toy(&ToySpec { clusters: 1, ..spec }).is_err());
    }
}
