//! Synthetic generators, IDX/CSV loaders and seeded batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tensor};

const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;

/// Radius of the class-mean simplex used by [`gen_blobs`].
pub const BLOB_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[num_samples, ...feature_shape]`
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        features: Tensor<f64>,
        labels: Vec<usize>,
        class_count: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if features.rank() < 2 || n != labels.len() {
            return Err(Error::Dimension(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::config(
                "labels",
                format!("label {bad} is outside [0, {class_count})"),
            ));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Rows `indices` as a `[k, ...feature_shape]` tensor plus their labels.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let f = self.feature_len();
        let src = self.features.data();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend(src[i * f..(i + 1) * f].iter().map(|&v| T::lit(v)));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.feature_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    /// Same samples with features reshaped to `[n, ...shape]`.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Dataset> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Dataset {
            features: self.features.reshape(full)?,
            ..self.clone()
        })
    }
}

/// Class means at distance [`BLOB_RADIUS`] from the origin.
///
/// With `classes <= dim` these are the vertices of a regular simplex (the
/// centred standard basis); otherwise they are spread evenly on a circle in
/// the first two coordinates. In one dimension they are evenly spaced on
/// [-3, 3].
pub fn blob_means(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let k = classes as f64;
    if classes == 1 {
        return vec![vec![0.0; dim]];
    }
    if classes <= dim {
        let scale = BLOB_RADIUS / (1.0 - 1.0 / k).sqrt();
        return (0..classes)
            .map(|c| {
                (0..dim)
                    .map(|j| {
                        let e = if j == c { 1.0 } else { 0.0 };
                        let centroid = if j < classes { 1.0 / k } else { 0.0 };
                        scale * (e - centroid)
                    })
                    .collect()
            })
            .collect();
    }
    if dim == 1 {
        return (0..classes)
            .map(|c| vec![BLOB_RADIUS * (2.0 * c as f64 / (k - 1.0) - 1.0)])
            .collect();
    }
    (0..classes)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / k;
            let mut m = vec![0.0; dim];
            m[0] = BLOB_RADIUS * a.cos();
            m[1] = BLOB_RADIUS * a.sin();
            m
        })
        .collect()
}

/// Isotropic Gaussian blobs; sample `i` belongs to class `i % classes`.
pub fn gen_blobs(n: usize, classes: usize, dim: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(Error::config("data.classes", "classes and dim must be positive"));
    }
    if n < classes {
        return Err(Error::config(
            "data.n",
            format!("n = {n} is smaller than classes = {classes}"),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::config(
            "data.noise",
            format!("{noise_std} must be finite and >= 0"),
        ));
    }
    let means = blob_means(classes, dim);
    let mut rng = Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &c in &labels {
        for &m in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + noise_std * z);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, dim], data)?,
        labels,
        classes,
        format!("blobs(n={n},classes={classes},dim={dim},noise={noise_std},seed={seed})"),
    )
}

/// Replace each label, with probability `flip_rate`, by a uniformly chosen
/// different class. Single-class datasets are returned unchanged.
pub fn gen_noisy_labels(d: &Dataset, flip_rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&flip_rate) {
        return Err(Error::config("data.flip_rate", format!("{flip_rate} is outside [0,1)")));
    }
    let mut out = d.clone();
    out.provenance = format!("{}+flip(rate={flip_rate},seed={seed})", d.provenance);
    if d.class_count < 2 || flip_rate == 0.0 {
        return Ok(out);
    }
    let mut rng = Rng::seed_from_u64(seed);
    for l in out.labels.iter_mut() {
        if rng.random::<f64>() < flip_rate {
            let r = rng.random_range(0..d.class_count - 1);
            *l = if r >= *l { r + 1 } else { r };
        }
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::format_at(
            format!("{} byte {offset}", path.display()),
            format!("truncated header, file has {} bytes", bytes.len()),
        )),
    }
}

fn check_magic(bytes: &[u8], expect: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expect {
        return Err(Error::format_at(
            format!("{} byte 0", path.display()),
            format!("magic {magic}, expected {expect}"),
        ));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| {
        Error::format_at(
            format!("{} byte {}", path.display(), bytes.len()),
            format!("truncated payload, expected {len} bytes from offset {start}"),
        )
    })
}

/// Images become `[n, 1, rows, cols]` with values `byte / 255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_bytes(ip)?;
    let labels = read_bytes(lp)?;

    check_magic(&images, IDX_IMAGES, ip)?;
    let n = be_u32(&images, 4, ip)? as usize;
    let rows = be_u32(&images, 8, ip)? as usize;
    let cols = be_u32(&images, 12, ip)? as usize;
    let pixels = payload(&images, 16, n * rows * cols, ip)?;

    check_magic(&labels, IDX_LABELS, lp)?;
    let nl = be_u32(&labels, 4, lp)? as usize;
    if nl != n {
        return Err(Error::format_at(
            format!("{} byte 4", lp.display()),
            format!("{nl} labels but {n} images"),
        ));
    }
    let raw_labels = payload(&labels, 8, n, lp)?;

    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels,
        class_count,
        format!("idx({})", ip.display()),
    )
}

/// Inverse of [`load_idx`]; features must be `[n, rows, cols]` or
/// `[n, 1, rows, cols]` with values in [0, 1].
pub fn write_idx(d: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let fs_ = d.feature_shape();
    let (rows, cols) = match fs_ {
        [r, c] | [1, r, c] => (*r, *c),
        _ => return Err(Error::Dimension(format!("cannot write features {fs_:?} as IDX images"))),
    };
    if d.class_count > 256 {
        return Err(Error::Contract("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + d.features.len());
    for v in [IDX_IMAGES, d.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for &x in d.features.data() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Contract(format!("pixel value {x} outside [0,1]")));
        }
        img.push((x * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + d.len());
    for v in [IDX_LABELS, d.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(d.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}

/// CSV with a header row. Every column except `label_column` is a feature.
///
/// With `class_count = None` the class count is `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, class_count: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let loc = |line: u64, col: &str| format!("{} line {line}, column {col}", path.display());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format_at(path.display().to_string(), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format_at(path.display().to_string(), e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(Error::format_at(
            format!("{} line 1", path.display()),
            "empty file, no header row",
        ));
    }
    let label_idx = headers.iter().position(|h| h.trim() == label_column).ok_or_else(|| {
        Error::format_at(
            format!("{} line 1", path.display()),
            format!("missing label column `{label_column}`"),
        )
    })?;

    let width = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format_at(format!("{} line {line}", path.display()), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if j == label_idx {
                let l: usize = cell.parse().map_err(|_| {
                    Error::format_at(loc(line, &headers[j]), format!("label `{cell}` is not a class index"))
                })?;
                labels.push(l);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::format_at(loc(line, &headers[j]), format!("`{cell}` is not numeric")))?;
                if !v.is_finite() {
                    return Err(Error::format_at(
                        loc(line, &headers[j]),
                        format!("non-finite value `{cell}`"),
                    ));
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::format_at(path.display().to_string(), "no data rows"));
    }
    let k = class_count.unwrap_or_else(|| labels.iter().max().unwrap() + 1);
    Dataset::new(
        Tensor::new(vec![labels.len(), width], data)?,
        labels,
        k,
        format!("csv({})", path.display()),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

/// Row indices of every batch of `epoch`, from a permutation keyed by
/// `(shuffle_seed, epoch)`.
pub fn batches(num_samples: usize, plan: &BatchPlan, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return Err(Error::config("optim.batch_size", "must be >= 1"));
    }
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut rng::keyed(plan.shuffle_seed, &[epoch]));
    Ok(order
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
