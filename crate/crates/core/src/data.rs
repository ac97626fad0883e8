//! Datasets: ingestion from the usual distribution formats, checksum
//! manifest, binarization and batching.
//!
//! Images are stored channel-first (`[C, H, W]` per example) as raw bytes and
//! converted to the model scalar only when a batch is materialized.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::potentials::{potential_u, potential_u_graph, PotentialId};

/// Environment variable naming the data root.
pub const DATA_ROOT_ENV: &str = "BIVA_DATA_ROOT";
/// Examples carved from the end of a training split for validation.
pub const VALIDATION_CARVE: usize = 5000;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    MnistStatic,
    MnistDynamic,
    Omniglot,
    FashionMnist,
    Cifar10,
    Svhn,
    Celeba,
    Density2d,
}

impl DatasetName {
    pub const ALL: [DatasetName; 8] = [
        Self::MnistStatic,
        Self::MnistDynamic,
        Self::Omniglot,
        Self::FashionMnist,
        Self::Cifar10,
        Self::Svhn,
        Self::Celeba,
        Self::Density2d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MnistStatic => "mnist_static",
            Self::MnistDynamic => "mnist_dynamic",
            Self::Omniglot => "omniglot",
            Self::FashionMnist => "fashion_mnist",
            Self::Cifar10 => "cifar10",
            Self::Svhn => "svhn",
            Self::Celeba => "celeba",
            Self::Density2d => "density2d",
        }
    }

    /// Per-example shape, channel-first.
    pub fn example_shape(self) -> Vec<usize> {
        match self {
            Self::MnistStatic | Self::MnistDynamic | Self::Omniglot | Self::FashionMnist => vec![1, 28, 28],
            Self::Cifar10 | Self::Svhn => vec![3, 32, 32],
            Self::Celeba => vec![3, 64, 64],
            Self::Density2d => vec![2],
        }
    }

    pub fn pixel_kind(self) -> PixelKind {
        match self {
            Self::MnistStatic => PixelKind::Binary,
            Self::MnistDynamic | Self::Omniglot | Self::FashionMnist => PixelKind::Intensity,
            Self::Cifar10 | Self::Svhn | Self::Celeba => PixelKind::Discrete,
            Self::Density2d => PixelKind::Real,
        }
    }

    /// Directory below the data root holding the source files.
    fn dir(self) -> &'static str {
        match self {
            Self::MnistDynamic => "mnist",
            other => other.as_str(),
        }
    }

    /// Published split sizes after the validation carve.
    pub fn published_sizes(self) -> Option<[usize; 3]> {
        match self {
            Self::MnistStatic => Some([50_000, 10_000, 10_000]),
            Self::MnistDynamic | Self::FashionMnist => Some([55_000, VALIDATION_CARVE, 10_000]),
            Self::Omniglot => Some([19_345, VALIDATION_CARVE, 8_070]),
            Self::Cifar10 => Some([45_000, VALIDATION_CARVE, 10_000]),
            Self::Svhn => Some([68_257, VALIDATION_CARVE, 26_032]),
            Self::Celeba => Some([162_770, 19_867, 19_962]),
            Self::Density2d => None,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::config("dataset.name", format!("unknown dataset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        }
    }

    fn index(self) -> usize {
        match self {
            Self::Train => 0,
            Self::Valid => 1,
            Self::Test => 2,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" | "validation" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            _ => Err(Error::config("dataset.split", format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Falls back to `$BIVA_DATA_ROOT`, then `./data`.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Automatic download is not available; files must be placed manually.
    #[serde(default)]
    pub download: bool,
}

fn default_split() -> Split {
    Split::Train
}

impl DatasetSpec {
    pub fn new(name: DatasetName, split: Split) -> Self {
        Self { name, split, root: None, download: false }
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self { split, ..self.clone() }
    }

    pub fn resolved_root(&self) -> PathBuf {
        data_root(self.root.as_deref())
    }
}

pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("data"),
    }
}

/// How stored values become model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelKind {
    /// Fixed 0/1 values.
    Binary,
    /// Grey levels in `[0, 1]`, Bernoulli-binarized afresh at every batch.
    Intensity,
    /// Integer levels `0..=255`.
    Discrete,
    /// Real vectors.
    Real,
}

#[derive(Clone, Debug)]
enum Storage {
    Bytes(Vec<u8>),
    Reals(Vec<f64>),
    /// Unbounded stream of standard normal vectors.
    Gaussian,
}

/// An in-memory split.
#[derive(Clone, Debug)]
pub struct Dataset {
    label: String,
    shape: Vec<usize>,
    kind: PixelKind,
    storage: Storage,
    count: usize,
    labels: Option<Vec<usize>>,
}

/// A materialized batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub indices: Vec<usize>,
}

impl Dataset {
    /// Wraps raw bytes, `count · prod(shape)` of them.
    pub fn from_bytes(
        label: impl Into<String>,
        shape: Vec<usize>,
        kind: PixelKind,
        bytes: Vec<u8>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || bytes.len() % per != 0 {
            return Err(Error::Shape(format!("{} bytes do not tile examples of shape {shape:?}", bytes.len())));
        }
        if kind == PixelKind::Binary && bytes.iter().any(|&b| b > 1) {
            return Err(Error::InvalidValue("binary data must hold only 0 and 1".into()));
        }
        if kind == PixelKind::Real {
            return Err(Error::InvalidValue("real-valued data must use from_reals".into()));
        }
        let count = bytes.len() / per;
        check_labels(&labels, count)?;
        Ok(Self { label: label.into(), shape, kind, storage: Storage::Bytes(bytes), count, labels })
    }

    pub fn from_reals(label: impl Into<String>, shape: Vec<usize>, values: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || values.len() % per != 0 {
            return Err(Error::Shape(format!("{} values do not tile examples of shape {shape:?}", values.len())));
        }
        let count = values.len() / per;
        check_labels(&labels, count)?;
        Ok(Self { label: label.into(), shape, kind: PixelKind::Real, storage: Storage::Reals(values), count, labels })
    }

    /// Standard normal inputs of dimension `dim`, drawn afresh per batch.
    /// `nominal_len` sets the epoch length used by batch iteration.
    pub fn gaussian_stream(label: impl Into<String>, dim: usize, nominal_len: usize) -> Self {
        Self {
            label: label.into(),
            shape: vec![dim],
            kind: PixelKind::Real,
            storage: Storage::Gaussian,
            count: nominal_len,
            labels: None,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> PixelKind {
        self.kind
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_stream(&self) -> bool {
        matches!(self.storage, Storage::Gaussian)
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    fn per_example(&self) -> usize {
        self.shape.iter().product()
    }

    /// Raw stored values of one example as `f64`, before binarization.
    pub fn example(&self, i: usize) -> Vec<f64> {
        let per = self.per_example();
        match &self.storage {
            Storage::Bytes(b) => b[i * per..(i + 1) * per].iter().map(|&v| self.byte_value(v)).collect(),
            Storage::Reals(r) => r[i * per..(i + 1) * per].to_vec(),
            Storage::Gaussian => vec![0.0; per],
        }
    }

    fn byte_value(&self, v: u8) -> f64 {
        match self.kind {
            PixelKind::Intensity => v as f64 / 255.0,
            _ => v as f64,
        }
    }

    /// A new dataset made of the listed examples.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.count) {
            return Err(Error::InvalidValue(format!("index {bad} outside dataset of {}", self.count)));
        }
        let per = self.per_example();
        let storage = match &self.storage {
            Storage::Bytes(b) => Storage::Bytes(idx.iter().flat_map(|&i| b[i * per..(i + 1) * per].iter().copied()).collect()),
            Storage::Reals(r) => Storage::Reals(idx.iter().flat_map(|&i| r[i * per..(i + 1) * per].iter().copied()).collect()),
            Storage::Gaussian => Storage::Gaussian,
        };
        Ok(Self {
            label: self.label.clone(),
            shape: self.shape.clone(),
            kind: self.kind,
            storage,
            count: idx.len(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        })
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.count);
        if self.is_stream() {
            return Ok(Self { count: n, ..self.clone() });
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Materializes the given examples. Intensity data is binarized with
    /// fresh draws from `rng`; streams ignore `idx` beyond its length.
    pub fn batch<T: Scalar>(&self, idx: &[usize], rng: &mut RandomSource) -> Result<Batch<T>> {
        let per = self.per_example();
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape);
        let data: Vec<T> = match &self.storage {
            Storage::Gaussian => (0..idx.len() * per).map(|_| T::c(rng.standard_normal())).collect(),
            Storage::Reals(r) => {
                check_indices(idx, self.count)?;
                idx.iter().flat_map(|&i| r[i * per..(i + 1) * per].iter().map(|&v| T::c(v))).collect()
            }
            Storage::Bytes(b) => {
                check_indices(idx, self.count)?;
                let mut out = Vec::with_capacity(idx.len() * per);
                for &i in idx {
                    for &v in &b[i * per..(i + 1) * per] {
                        let value = match self.kind {
                            PixelKind::Intensity => {
                                let p = v as f64 / 255.0;
                                if rng.uniform() < p {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            _ => v as f64,
                        };
                        out.push(T::c(value));
                    }
                }
                out
            }
        };
        let labels = match &self.labels {
            Some(l) if !self.is_stream() => Some(idx.iter().map(|&i| l[i]).collect()),
            _ => None,
        };
        Ok(Batch { x: Tensor::new(shape, data)?, labels, indices: idx.to_vec() })
    }

    /// Index blocks covering one epoch, shuffled when `rng` is given. The
    /// last block may be short.
    pub fn epoch_order(&self, batch_size: usize, rng: Option<&mut RandomSource>) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let order = match rng {
            Some(r) if !self.is_stream() => r.permutation(self.count),
            _ => (0..self.count).collect(),
        };
        Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
    }

    /// Iterates over one epoch of batches.
    pub fn iter_batches<'a, T: Scalar>(
        &'a self,
        batch_size: usize,
        shuffle: bool,
        rng: &'a mut RandomSource,
    ) -> Result<BatchIter<'a, T>> {
        let blocks = self.epoch_order(batch_size, if shuffle { Some(&mut *rng) } else { None })?;
        Ok(BatchIter { data: self, blocks: blocks.into_iter(), rng, _t: std::marker::PhantomData })
    }

    /// `per_class` labeled examples for every class, chosen with `rng`.
    /// Returns indices sorted by class then draw order.
    pub fn balanced_label_subset(&self, per_class: usize, rng: &mut RandomSource) -> Result<Vec<usize>> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::InvalidValue(format!("{} carries no labels", self.label)))?;
        let classes = self.num_classes().unwrap_or(0);
        let order = rng.permutation(self.count);
        let mut picked = vec![Vec::new(); classes];
        for i in order {
            let c = labels[i];
            if picked[c].len() < per_class {
                picked[c].push(i);
            }
        }
        if let Some(c) = picked.iter().position(|p| p.len() < per_class) {
            return Err(Error::InvalidValue(format!("class {c} has fewer than {per_class} examples")));
        }
        Ok(picked.into_iter().flatten().collect())
    }
}

fn check_labels(labels: &Option<Vec<usize>>, count: usize) -> Result<()> {
    match labels {
        Some(l) if l.len() != count => Err(Error::Shape(format!("{} labels for {count} examples", l.len()))),
        _ => Ok(()),
    }
}

fn check_indices(idx: &[usize], count: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= count) {
        Some(bad) => Err(Error::InvalidValue(format!("index {bad} outside dataset of {count}"))),
        None => Ok(()),
    }
}

pub struct BatchIter<'a, T> {
    data: &'a Dataset,
    blocks: std::vec::IntoIter<Vec<usize>>,
    rng: &'a mut RandomSource,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.blocks.next()?;
        Some(self.data.batch(&idx, self.rng))
    }
}

/// Draws each pixel from `Bernoulli(value)`.
pub fn dynamic_binarize<T: Scalar>(x: &Tensor<T>, rng: &mut RandomSource) -> Result<Tensor<T>> {
    if let Some(bad) = x.data().iter().find(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
        return Err(Error::InvalidValue(format!("pixel value {bad} outside [0, 1]")));
    }
    let data = x.data().iter().map(|v| if rng.uniform() < v.f64() { T::one() } else { T::zero() }).collect();
    Tensor::new(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub files: BTreeMap<String, FileRecord>,
    pub splits: BTreeMap<String, usize>,
    /// How the validation split was formed.
    pub validation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub datasets: BTreeMap<String, DatasetRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { version: MANIFEST_VERSION, datasets: BTreeMap::new() }
    }
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let m: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::data(path, format!("manifest version {} is not {MANIFEST_VERSION}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<FileRecord> {
    let mut f = File::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        bytes += n as u64;
    }
    let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(FileRecord { sha256, bytes })
}

/// Exclusive lock on the data root for ingest; removed on drop.
struct IngestLock {
    path: PathBuf,
}

impl IngestLock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join("manifest.lock");
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > Duration::from_secs(60) {
                        return Err(Error::data(&path, "ingest lock held for over 60 s; remove it if stale"));
                    }
                    std::thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(Error::data(&path, e.to_string())),
            }
        }
    }
}

impl Drop for IngestLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Verifies source files against the manifest, recording them (and the
/// split sizes) on first sight.
fn verify_or_record(root: &Path, name: DatasetName, files: &[PathBuf], sizes: [usize; 3]) -> Result<()> {
    let _lock = IngestLock::acquire(root)?;
    let mut manifest = Manifest::load(root)?;
    let key = name.as_str().to_string();
    let existing = manifest.datasets.get(&key).cloned();
    let mut record = existing.clone().unwrap_or_default();
    let mut changed = existing.is_none();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().into_owned();
        let found = sha256_file(f)?;
        match record.files.get(&rel) {
            Some(expected) if expected.sha256 != found.sha256 => {
                return Err(Error::Checksum { path: f.clone(), expected: expected.sha256.clone(), found: found.sha256 });
            }
            Some(_) => {}
            None => {
                record.files.insert(rel, found);
                changed = true;
            }
        }
    }
    for split in [Split::Train, Split::Valid, Split::Test] {
        let n = sizes[split.index()];
        match record.splits.get(split.as_str()) {
            Some(&m) if m != n => {
                return Err(Error::data(root.join(name.dir()), format!("{} split has {n} examples, manifest records {m}", split.as_str())));
            }
            Some(_) => {}
            None => {
                record.splits.insert(split.as_str().into(), n);
                changed = true;
            }
        }
    }
    if let Some(published) = name.published_sizes() {
        if published != sizes {
            return Err(Error::data(
                root.join(name.dir()),
                format!("split sizes {sizes:?} differ from the published {published:?}"),
            ));
        }
    }
    if record.validation.is_empty() {
        record.validation = match name {
            DatasetName::MnistStatic => "canonical validation file".into(),
            DatasetName::Celeba => "canonical partition list".into(),
            _ => format!("last {VALIDATION_CARVE} examples of the source training split"),
        };
        changed = true;
    }
    if changed {
        manifest.datasets.insert(key, record);
        manifest.save(root)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parsers

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::data(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX file; returns dimensions and payload.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::data(path, "not an IDX file"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::data(path, format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::data(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let total: usize = dims.iter().product();
    if bytes.len() - header != total {
        return Err(Error::data(path, format!("IDX payload has {} bytes, header promises {total}", bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Parses whitespace-separated 0/1 rows of `width` values.
pub fn parse_amat(text: &str, width: usize, path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let start = out.len();
        for tok in line.split_whitespace() {
            match tok {
                "0" => out.push(0),
                "1" => out.push(1),
                _ => return Err(Error::data(path, format!("line {}: value `{tok}` is not 0 or 1", ln + 1))),
            }
        }
        if out.len() - start != width {
            return Err(Error::data(path, format!("line {}: {} values, expected {width}", ln + 1, out.len() - start)));
        }
    }
    Ok(out)
}

/// Parses label-prefixed fixed-length records (`1 + record` bytes each).
pub fn parse_labeled_records(bytes: &[u8], record: usize, path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    let row = record + 1;
    if bytes.is_empty() || bytes.len() % row != 0 {
        return Err(Error::data(path, format!("{} bytes is not a multiple of {row}", bytes.len())));
    }
    let n = bytes.len() / row;
    let mut data = Vec::with_capacity(n * record);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(row) {
        labels.push(r[0] as usize);
        data.extend_from_slice(&r[1..]);
    }
    Ok((data, labels))
}

fn find_file(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    for n in names {
        for cand in [dir.join(n), dir.join(format!("{n}.gz"))] {
            if cand.is_file() {
                return Ok(cand);
            }
        }
    }
    Err(Error::data(dir, format!("none of {names:?} found; place the source files there (see README)")))
}

fn load_idx_images(path: &Path) -> Result<(usize, Vec<u8>)> {
    let (dims, data) = parse_idx(&read_maybe_gz(path)?, path)?;
    if dims.len() != 3 || dims[1] != 28 || dims[2] != 28 {
        return Err(Error::data(path, format!("expected N×28×28 images, got {dims:?}")));
    }
    Ok((dims[0], data))
}

fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (dims, data) = parse_idx(&read_maybe_gz(path)?, path)?;
    if dims.len() != 1 {
        return Err(Error::data(path, format!("expected a label vector, got {dims:?}")));
    }
    Ok(data.into_iter().map(usize::from).collect())
}

struct Splits {
    train: (Vec<u8>, Option<Vec<usize>>),
    valid: (Vec<u8>, Option<Vec<usize>>),
    test: (Vec<u8>, Option<Vec<usize>>),
    files: Vec<PathBuf>,
}

/// Splits the tail of a training set off as validation data.
fn carve(data: Vec<u8>, labels: Option<Vec<usize>>, per: usize, path: &Path) -> Result<[(Vec<u8>, Option<Vec<usize>>); 2]> {
    let n = data.len() / per;
    if n <= VALIDATION_CARVE {
        return Err(Error::data(path, format!("{n} training examples cannot spare {VALIDATION_CARVE} for validation")));
    }
    let cut = n - VALIDATION_CARVE;
    let mut data = data;
    let vdata = data.split_off(cut * per);
    let (tl, vl) = match labels {
        Some(mut l) => {
            let v = l.split_off(cut);
            (Some(l), Some(v))
        }
        None => (None, None),
    };
    Ok([(data, tl), (vdata, vl)])
}

fn read_idx_dataset(dir: &Path, prefix: &str, with_labels: bool) -> Result<Splits> {
    let train_img = find_file(dir, &[&format!("{prefix}train-images-idx3-ubyte"), &format!("{prefix}train-images.idx3-ubyte")])?;
    let test_img = find_file(dir, &[&format!("{prefix}t10k-images-idx3-ubyte"), &format!("{prefix}test-images-idx3-ubyte")])?;
    let (_, train) = load_idx_images(&train_img)?;
    let (_, test) = load_idx_images(&test_img)?;
    let mut files = vec![train_img.clone(), test_img];
    let (train_l, test_l) = if with_labels {
        let tl = find_file(dir, &[&format!("{prefix}train-labels-idx1-ubyte")])?;
        let sl = find_file(dir, &[&format!("{prefix}t10k-labels-idx1-ubyte")])?;
        let pair = (Some(load_idx_labels(&tl)?), Some(load_idx_labels(&sl)?));
        files.push(tl);
        files.push(sl);
        pair
    } else {
        (None, None)
    };
    let [tr, va] = carve(train, train_l, 784, &train_img)?;
    Ok(Splits { train: tr, valid: va, test: (test, test_l), files })
}

fn read_static_mnist(dir: &Path) -> Result<Splits> {
    let mut parts = Vec::new();
    let mut files = Vec::new();
    for s in ["train", "valid", "test"] {
        let p = find_file(dir, &[&format!("binarized_mnist_{s}.amat")])?;
        let text = String::from_utf8(read_maybe_gz(&p)?).map_err(|_| Error::data(&p, "not UTF-8 text"))?;
        parts.push((parse_amat(&text, 784, &p)?, None));
        files.push(p);
    }
    let test = parts.pop().unwrap();
    let valid = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(Splits { train, valid, test, files })
}

fn read_record_dataset(dir: &Path, train_names: &[&str], test_names: &[&str]) -> Result<Splits> {
    let mut files = Vec::new();
    let mut read_all = |names: &[&str]| -> Result<(Vec<u8>, Vec<usize>)> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for n in names {
            let p = find_file(dir, &[n]).or_else(|_| find_file(&dir.join("cifar-10-batches-bin"), &[n]))?;
            let (d, l) = parse_labeled_records(&read_maybe_gz(&p)?, 3072, &p)?;
            data.extend(d);
            labels.extend(l);
            files.push(p);
        }
        Ok((data, labels))
    };
    let (train, train_l) = read_all(train_names)?;
    let (test, test_l) = read_all(test_names)?;
    let first = files[0].clone();
    let [tr, va] = carve(train, Some(train_l), 3072, &first)?;
    Ok(Splits { train: tr, valid: va, test: (test, Some(test_l)), files })
}

/// Center-crops a 178×218 aligned face to 148×148 and resizes to 64×64,
/// channel-first.
pub fn celeba_preprocess(img: &image::RgbImage) -> Vec<u8> {
    let (w, h) = img.dimensions();
    let side = 148.min(w).min(h);
    let x0 = (w - side) / 2;
    let y0 = if h >= 40 + side { 40 } else { (h - side) / 2 };
    let crop = image::imageops::crop_imm(img, x0, y0, side, side).to_image();
    let small = image::imageops::resize(&crop, 64, 64, image::imageops::FilterType::Triangle);
    let mut out = vec![0u8; 3 * 64 * 64];
    for (x, y, p) in small.enumerate_pixels() {
        for c in 0..3 {
            out[c * 4096 + (y as usize) * 64 + x as usize] = p[c];
        }
    }
    out
}

fn read_celeba(dir: &Path, split: Split) -> Result<(Vec<u8>, Vec<PathBuf>, [usize; 3])> {
    let img_dir = dir.join("img_align_celeba");
    let part = dir.join("list_eval_partition.txt");
    let text = fs::read_to_string(&part).map_err(|e| Error::data(&part, e.to_string()))?;
    let mut sizes = [0usize; 3];
    let mut chosen = Vec::new();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let (Some(file), Some(p)) = (it.next(), it.next()) else { continue };
        let p: usize = p.parse().map_err(|_| Error::data(&part, format!("bad partition line `{line}`")))?;
        if p > 2 {
            return Err(Error::data(&part, format!("bad partition `{p}`")));
        }
        sizes[p] += 1;
        if p == split.index() {
            chosen.push(img_dir.join(file));
        }
    }
    let mut data = Vec::with_capacity(chosen.len() * 3 * 4096);
    for p in &chosen {
        let img = image::open(p).map_err(|e| Error::data(p, e.to_string()))?.to_rgb8();
        data.extend(celeba_preprocess(&img));
    }
    Ok((data, vec![part], sizes))
}

/// Loads one split, verifying the source files against the manifest.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let name = spec.name;
    let label = format!("{}:{}", name, spec.split.as_str());
    if name == DatasetName::Density2d {
        let len = match spec.split {
            Split::Train => 512 * 1000,
            _ => 10_000,
        };
        return Ok(Dataset::gaussian_stream(label, 2, len));
    }
    let root = spec.resolved_root();
    let dir = root.join(name.dir());
    if !dir.is_dir() {
        let hint = if spec.download { "; automatic download is not available, place the files manually" } else { "" };
        return Err(Error::data(&dir, format!("dataset directory missing{hint}")));
    }
    let shape = name.example_shape();
    let per: usize = shape.iter().product();
    if name == DatasetName::Celeba {
        let (data, files, sizes) = read_celeba(&dir, spec.split)?;
        verify_or_record(&root, name, &files, sizes)?;
        return Dataset::from_bytes(label, shape, name.pixel_kind(), data, None);
    }
    let splits = match name {
        DatasetName::MnistStatic => read_static_mnist(&dir)?,
        DatasetName::MnistDynamic => read_idx_dataset(&dir, "", true)?,
        DatasetName::FashionMnist => read_idx_dataset(&dir, "", true)?,
        DatasetName::Omniglot => read_idx_dataset(&dir, "omniglot-", false)?,
        DatasetName::Cifar10 => read_record_dataset(
            &dir,
            &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
            &["test_batch.bin"],
        )?,
        DatasetName::Svhn => read_record_dataset(&dir, &["svhn_train.bin"], &["svhn_test.bin"])?,
        DatasetName::Celeba | DatasetName::Density2d => unreachable!(),
    };
    let sizes = [splits.train.0.len() / per, splits.valid.0.len() / per, splits.test.0.len() / per];
    verify_or_record(&root, name, &splits.files, sizes)?;
    let (data, labels) = match spec.split {
        Split::Train => splits.train,
        Split::Valid => splits.valid,
        Split::Test => splits.test,
    };
    Dataset::from_bytes(label, shape, name.pixel_kind(), data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn binarize_degenerate_and_half() {
        let mut rng = RandomSource::new(1);
        let x = Tensor::<f64>::from_f64(&[1, 3], &[0.0, 1.0, 0.5]).unwrap();
        let mut ones = 0usize;
        let n = 100_000;
        for _ in 0..n {
            let b = dynamic_binarize(&x, &mut rng).unwrap();
            assert_eq!(b.data()[0], 0.0);
            assert_eq!(b.data()[1], 1.0);
            ones += b.data()[2] as usize;
        }
        let mean = ones as f64 / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    #[test]
    fn binarize_rejects_out_of_range() {
        let mut rng = RandomSource::new(1);
        let x = Tensor::<f64>::from_f64(&[1, 2], &[0.2, 1.5]).unwrap();
        assert!(dynamic_binarize(&x, &mut rng).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let p = Path::new("x");
        let b = idx_bytes(&[2, 3], &[1, 2, 3, 4, 5, 6]);
        let (dims, data) = parse_idx(&b, p).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(data, vec![1, 2, 3, 4, 5, 6]);
        assert!(parse_idx(&b[..b.len() - 1], p).is_err());
        assert!(parse_idx(&[1, 2, 3], p).is_err());
    }

    #[test]
    fn amat_parsing() {
        let p = Path::new("x");
        assert_eq!(parse_amat("0 1 1\n1 0 0\n", 3, p).unwrap(), vec![0, 1, 1, 1, 0, 0]);
        assert!(parse_amat("0 1\n", 3, p).is_err());
        assert!(parse_amat("0 2 1\n", 3, p).is_err());
    }

    #[test]
    fn batches_have_canonical_shapes() {
        let mut rng = RandomSource::new(0);
        let bin = Dataset::from_bytes("b", vec![1, 2, 2], PixelKind::Binary, vec![0, 1, 1, 0, 1, 1, 1, 1], Some(vec![3, 1])).unwrap();
        let b = bin.batch::<f32>(&[1, 0], &mut rng).unwrap();
        assert_eq!(b.x.shape(), &[2, 1, 2, 2]);
        assert_eq!(b.labels, Some(vec![1, 3]));
        assert!(b.x.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let disc = Dataset::from_bytes("d", vec![3, 1, 1], PixelKind::Discrete, vec![0, 128, 255], None).unwrap();
        let d = disc.batch::<f64>(&[0], &mut rng).unwrap();
        assert_eq!(d.x.data(), &[0.0, 128.0, 255.0]);
        assert!(Dataset::from_bytes("x", vec![2], PixelKind::Binary, vec![0, 2], None).is_err());
    }

    #[test]
    fn epoch_order_is_seeded() {
        let d = Dataset::from_reals("r", vec![1], (0..10).map(f64::from).collect(), None).unwrap();
        let a = d.epoch_order(4, Some(&mut RandomSource::new(3))).unwrap();
        let b = d.epoch_order(4, Some(&mut RandomSource::new(3))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn balanced_labels() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let d = Dataset::from_reals("r", vec![1], vec![0.0; 30], Some(labels.clone())).unwrap();
        let idx = d.balanced_label_subset(4, &mut RandomSource::new(0)).unwrap();
        assert_eq!(idx.len(), 12);
        for c in 0..3 {
            assert_eq!(idx.iter().filter(|&&i| labels[i] == c).count(), 4);
        }
        assert!(d.balanced_label_subset(11, &mut RandomSource::new(0)).is_err());
    }

    fn write_fake_mnist(dir: &Path, train: usize, test: usize) {
        fs::create_dir_all(dir).unwrap();
        let img = |n: usize| idx_bytes(&[n as u32, 28, 28], &vec![7u8; n * 784]);
        let lab = |n: usize| idx_bytes(&[n as u32], &(0..n).map(|i| (i % 10) as u8).collect::<Vec<_>>());
        fs::write(dir.join("train-images-idx3-ubyte"), img(train)).unwrap();
        fs::write(dir.join("train-labels-idx1-ubyte"), lab(train)).unwrap();
        fs::write(dir.join("t10k-images-idx3-ubyte"), img(test)).unwrap();
        fs::write(dir.join("t10k-labels-idx1-ubyte"), lab(test)).unwrap();
    }

    #[test]
    fn unpublished_sizes_are_rejected() {
        let root = tempfile::tempdir().unwrap();
        write_fake_mnist(&root.path().join("mnist"), 5010, 3);
        let mut spec = DatasetSpec::new(DatasetName::MnistDynamic, Split::Valid);
        spec.root = Some(root.path().to_path_buf());
        let err = load_dataset(&spec).unwrap_err();
        assert!(err.to_string().contains("published"), "{err}");
    }

    #[test]
    fn checksum_mismatch_detected() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("mnist");
        write_fake_mnist(&dir, 10, 3);
        let files: Vec<PathBuf> = ["train-images-idx3-ubyte", "t10k-images-idx3-ubyte"].iter().map(|f| dir.join(f)).collect();
        verify_or_record(root.path(), DatasetName::Omniglot, &files, [1, 2, 3]).unwrap_err();
        // Record with no published sizes to check against, then corrupt.
        verify_or_record(root.path(), DatasetName::Density2d, &files, [1, 2, 3]).unwrap();
        verify_or_record(root.path(), DatasetName::Density2d, &files, [1, 2, 3]).unwrap();
        fs::write(&files[0], b"corrupted").unwrap();
        let err = verify_or_record(root.path(), DatasetName::Density2d, &files, [1, 2, 3]).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
        assert!(!root.path().join("manifest.lock").exists());
    }

    #[test]
    fn density_stream_draws_fresh_normals() {
        let d = load_dataset(&DatasetSpec::new(DatasetName::Density2d, Split::Train)).unwrap();
        let mut rng = RandomSource::new(2);
        let a = d.batch::<f64>(&[0, 1, 2], &mut rng).unwrap();
        let b = d.batch::<f64>(&[0, 1, 2], &mut rng).unwrap();
        assert_eq!(a.x.shape(), &[3, 2]);
        assert_ne!(a.x.data(), b.x.data());
    }

    #[test]
    fn celeba_crop_shape() {
        let img = image::RgbImage::from_fn(178, 218, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let out = celeba_preprocess(&img);
        assert_eq!(out.len(), 3 * 64 * 64);
        assert!(out[2 * 4096..].iter().all(|&v| v == 0));
    }
}
