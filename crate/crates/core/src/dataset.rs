//! MNIST ingestion (IDX) and the rotated dataset variants.
//!
//! Every builder is a pure function of `(base, variant, seed)`: angles are
//! drawn once per sample from a seeded ChaCha stream and frozen into the
//! produced set, and output order follows input order.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

pub const ROT12K_TRAIN: usize = 12_000;
pub const ROT12K_TEST: usize = 50_000;
pub const ROT12K_VALIDATION: usize = 2_000;

/// Where a set came from and how it was transformed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub variant: String,
    pub seed: Option<u64>,
    /// Hex SHA-256 over the source IDX image bytes followed by the label bytes.
    pub source_digest: String,
    pub angle_range: Option<(f64, f64)>,
    /// Rotation applied to each sample, in radians (empty when unrotated).
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    /// `[n, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub provenance: Provenance,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, provenance: Provenance) -> Result<Self> {
        if images.rank() != 3 {
            return Err(Error::shape("LabeledImageSet", "image rank", 3, images.rank()));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(index) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                path: PathBuf::from("<memory>"),
                index,
                label: labels[index],
            });
        }
        Ok(Self {
            images,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let plane = self.height() * self.width();
        &self.images.data()[i * plane..(i + 1) * plane]
    }

    /// Samples `start..end`, keeping provenance (and the matching angles).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::invalid(
                "LabeledImageSet::slice",
                format!("range {start}..{end} outside 0..{}", self.len()),
            ));
        }
        let plane = self.height() * self.width();
        let images = Tensor::new(
            &[end - start, self.height(), self.width()],
            self.images.data()[start * plane..end * plane].to_vec(),
        )?;
        let mut provenance = self.provenance.clone();
        if !provenance.angles.is_empty() {
            provenance.angles = provenance.angles[start..end].to_vec();
        }
        Self::new(images, self.labels[start..end].to_vec(), provenance)
    }

    /// Gathers samples by index.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let plane = self.height() * self.width();
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("LabeledImageSet::select", format!("index {i} outside 0..{}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut provenance = self.provenance.clone();
        if !provenance.angles.is_empty() {
            provenance.angles = indices.iter().map(|&i| self.provenance.angles[i]).collect();
        }
        Self::new(Tensor::new(&[indices.len(), self.height(), self.width()], data)?, labels, provenance)
    }

    /// Appends `other` after `self`; the digest covers both sources.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.height() != other.height() || self.width() != other.width() {
            return Err(Error::invalid("LabeledImageSet::concat", "image extents differ"));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let provenance = Provenance {
            variant: self.provenance.variant.clone(),
            seed: None,
            source_digest: hex(&Sha256::digest(
                format!("{}+{}", self.provenance.source_digest, other.provenance.source_digest).as_bytes(),
            )),
            angle_range: None,
            angles: Vec::new(),
        };
        Self::new(Tensor::new(&[labels.len(), self.height(), self.width()], data)?, labels, provenance)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("four bytes"))
}

/// Checks magic and header, returns the dimension sizes.
fn idx_header(path: &Path, bytes: &[u8], magic: u32, rank: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * rank;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(dims)
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read(images_path)?;
    let label_bytes = read(labels_path)?;
    let dims = idx_header(images_path, &image_bytes, IMAGE_MAGIC, 3)?;
    let label_dims = idx_header(labels_path, &label_bytes, LABEL_MAGIC, 1)?;
    if dims[0] != label_dims[0] {
        return Err(Error::CountMismatch {
            images: dims[0],
            labels: label_dims[0],
        });
    }
    let labels = label_bytes[8..].to_vec();
    if let Some(index) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::LabelOutOfRange {
            path: labels_path.into(),
            index,
            label: labels[index],
        });
    }
    let pixels = image_bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let mut hasher = Sha256::new();
    hasher.update(&image_bytes);
    hasher.update(&label_bytes);
    let provenance = Provenance {
        variant: "original".into(),
        seed: None,
        source_digest: hex(&hasher.finalize()),
        angle_range: None,
        angles: Vec::new(),
    };
    LabeledImageSet::new(Tensor::new(&dims, pixels)?, labels, provenance)
}

/// Loads the standard four-file MNIST layout from `dir`: `(train, test)`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// IDX encodings of a set: `(images, labels)`. Pixels are quantised to bytes.
pub fn encode_idx(set: &LabeledImageSet) -> (Vec<u8>, Vec<u8>) {
    let (n, h, w) = (set.len(), set.height(), set.width());
    let mut images = Vec::with_capacity(16 + n * h * w);
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(set.images.data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend_from_slice(&set.labels);
    (images, labels)
}

pub fn write_idx(set: &LabeledImageSet, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = encode_idx(set);
    fs::write(images_path.as_ref(), images).map_err(|e| Error::io(images_path.as_ref(), e))?;
    fs::write(labels_path.as_ref(), labels).map_err(|e| Error::io(labels_path.as_ref(), e))
}

/// Files produced by [`write_variant`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrittenVariant {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub metadata: PathBuf,
    pub images_sha256: String,
    pub labels_sha256: String,
}

/// Writes `<stem>-images-idx3-ubyte`, `<stem>-labels-idx1-ubyte` and the
/// `<stem>.meta` sidecar (plus `<stem>-angles.txt` for rotated sets).
pub fn write_variant(set: &LabeledImageSet, dir: impl AsRef<Path>, stem: &str) -> Result<WrittenVariant> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images = dir.join(format!("{stem}-images-idx3-ubyte"));
    let labels = dir.join(format!("{stem}-labels-idx1-ubyte"));
    let metadata = dir.join(format!("{stem}.meta"));
    let (image_bytes, label_bytes) = encode_idx(set);
    let images_sha256 = sha256_hex(&image_bytes);
    let labels_sha256 = sha256_hex(&label_bytes);
    fs::write(&images, &image_bytes).map_err(|e| Error::io(&images, e))?;
    fs::write(&labels, &label_bytes).map_err(|e| Error::io(&labels, e))?;
    let p = &set.provenance;
    let mut meta = String::new();
    meta.push_str(&format!("variant = {}\n", p.variant));
    meta.push_str(&format!("seed = {}\n", p.seed.map_or("none".into(), |s| s.to_string())));
    meta.push_str(&format!("samples = {}\n", set.len()));
    meta.push_str(&format!("image_extent = {}x{}\n", set.height(), set.width()));
    meta.push_str(&format!(
        "angle_range = {}\n",
        p.angle_range.map_or("none".into(), |(a, b)| format!("[{a:.17}, {b:.17}]"))
    ));
    meta.push_str(&format!("source_sha256 = {}\n", p.source_digest));
    meta.push_str(&format!("images_sha256 = {images_sha256}\n"));
    meta.push_str(&format!("labels_sha256 = {labels_sha256}\n"));
    fs::write(&metadata, meta).map_err(|e| Error::io(&metadata, e))?;
    if !p.angles.is_empty() {
        let path = dir.join(format!("{stem}-angles.txt"));
        let text: String = p.angles.iter().map(|a| format!("{a:.17}\n")).collect();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(WrittenVariant {
        images,
        labels,
        metadata,
        images_sha256,
        labels_sha256,
    })
}

const SNAP: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// `cos θ`, `sin θ`, exact at multiples of π/2.
fn cos_sin(theta: f64) -> (f64, f64) {
    let quarters = theta / FRAC_PI_2;
    let q = quarters.round();
    if (quarters - q).abs() < 1e-12 {
        return match (q as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
    }
    (theta.cos(), theta.sin())
}

/// Clockwise rotation of one `H×W` plane by `theta` about its exact centre.
///
/// The output point at centred coordinates `(p, q)` (`p` right, `q` up) reads
/// the source at `(p cos θ − q sin θ, p sin θ + q cos θ)` with bilinear
/// interpolation; pixels outside the plane count as zero.
pub fn rotate_plane(src: &[f32], height: usize, width: usize, theta: f64) -> Vec<f32> {
    assert_eq!(src.len(), height * width, "plane length");
    let (c, s) = cos_sin(theta);
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let pixel = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
            0.0
        } else {
            src[y as usize * width + x as usize] as f64
        }
    };
    let mut out = vec![0.0f32; height * width];
    for y in 0..height {
        let q = cy - y as f64;
        for x in 0..width {
            let p = x as f64 - cx;
            let sx = snap(cx + p * c - q * s);
            let sy = snap(cy - (p * s + q * c));
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1))
                + fy * ((1.0 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
            out[y * width + x] = v as f32;
        }
    }
    out
}

/// Rotates an `[H, W]` image clockwise by `theta`.
pub fn rotate_image(img: &Tensor<f32>, theta: f64) -> Result<Tensor<f32>> {
    if img.rank() != 2 {
        return Err(Error::shape("rotate_image", "rank", 2, img.rank()));
    }
    if !theta.is_finite() {
        return Err(Error::invalid("rotate_image", format!("angle {theta} is not finite")));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Tensor::new(&[h, w], rotate_plane(img.data(), h, w, theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetVariant {
    Original,
    /// Uniform angle in `[0, 2π)` per sample.
    Rot,
    /// Each `Rot` sample at eight directions 45° apart.
    RotPlus,
    /// Uniform angle in `[−π/2, π/2]` per sample.
    HalfRot,
    /// 12,000 rotated samples (the last 2,000 serve as validation).
    Rot12kTrain,
    /// 50,000 rotated samples disjoint from `Rot12kTrain`.
    Rot12kTest,
}

impl DatasetVariant {
    pub const ALL: [DatasetVariant; 6] = [
        DatasetVariant::Original,
        DatasetVariant::Rot,
        DatasetVariant::RotPlus,
        DatasetVariant::HalfRot,
        DatasetVariant::Rot12kTrain,
        DatasetVariant::Rot12kTest,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DatasetVariant::Original => "original",
            DatasetVariant::Rot => "rot",
            DatasetVariant::RotPlus => "rot_plus",
            DatasetVariant::HalfRot => "half_rot",
            DatasetVariant::Rot12kTrain => "rot12k_train",
            DatasetVariant::Rot12kTest => "rot12k_test",
        }
    }

    /// Range the per-sample angles are drawn from.
    pub fn angle_range(&self) -> Option<(f64, f64)> {
        match self {
            DatasetVariant::Original => None,
            DatasetVariant::HalfRot => Some((-FRAC_PI_2, FRAC_PI_2)),
            _ => Some((0.0, TAU)),
        }
    }
}

impl fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == key || (key == "rot+" && *v == DatasetVariant::RotPlus))
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown dataset variant '{s}' (expected one of {})", known.join(", ")))
            })
    }
}

/// Per-sample angles, uniform in `[0, 2π)`.
pub fn full_turn_angles(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random::<f64>() * TAU).collect()
}

/// Per-sample angles, uniform in `[−π/2, π/2]`.
pub fn half_turn_angles(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (rng.random::<f64>() - 0.5) * PI).collect()
}

fn rotate_all(base: &LabeledImageSet, angles: &[f64]) -> Result<Tensor<f32>> {
    let (h, w) = (base.height(), base.width());
    let mut data = Vec::with_capacity(angles.len() * h * w);
    for (i, &theta) in angles.iter().enumerate() {
        data.extend(rotate_plane(base.image(i % base.len()), h, w, theta));
    }
    Tensor::new(&[angles.len(), h, w], data)
}

fn rotated(base: &LabeledImageSet, variant: DatasetVariant, seed: u64, angles: Vec<f64>, labels: Vec<u8>) -> Result<LabeledImageSet> {
    let images = rotate_all(base, &angles)?;
    let provenance = Provenance {
        variant: variant.name().into(),
        seed: Some(seed),
        source_digest: base.provenance.source_digest.clone(),
        angle_range: variant.angle_range(),
        angles,
    };
    LabeledImageSet::new(images, labels, provenance)
}

/// Builds `variant` from the unrotated `base`.
///
/// For the 12k splits `base` should be the full pool (training and test
/// sets concatenated); both splits draw from one seeded permutation so they
/// never share a sample.
pub fn build_variant(base: &LabeledImageSet, variant: DatasetVariant, seed: u64) -> Result<LabeledImageSet> {
    let n = base.len();
    match variant {
        DatasetVariant::Original => {
            let mut out = base.clone();
            out.provenance.variant = variant.name().into();
            out.provenance.seed = Some(seed);
            Ok(out)
        }
        DatasetVariant::Rot => rotated(base, variant, seed, full_turn_angles(n, seed), base.labels.clone()),
        DatasetVariant::HalfRot => rotated(base, variant, seed, half_turn_angles(n, seed), base.labels.clone()),
        DatasetVariant::RotPlus => {
            let phi = full_turn_angles(n, seed);
            let mut angles = Vec::with_capacity(8 * n);
            let mut labels = Vec::with_capacity(8 * n);
            for (i, &a) in phi.iter().enumerate() {
                for m in 0..8 {
                    angles.push((a + m as f64 * FRAC_PI_4).rem_euclid(TAU));
                    labels.push(base.labels[i]);
                }
            }
            let h = base.height() * base.width();
            let mut data = Vec::with_capacity(8 * n * h);
            for (j, &theta) in angles.iter().enumerate() {
                data.extend(rotate_plane(base.image(j / 8), base.height(), base.width(), theta));
            }
            let provenance = Provenance {
                variant: variant.name().into(),
                seed: Some(seed),
                source_digest: base.provenance.source_digest.clone(),
                angle_range: variant.angle_range(),
                angles,
            };
            LabeledImageSet::new(Tensor::new(&[8 * n, base.height(), base.width()], data)?, labels, provenance)
        }
        DatasetVariant::Rot12kTrain | DatasetVariant::Rot12kTest => {
            if n < ROT12K_TRAIN + ROT12K_TEST {
                return Err(Error::invalid(
                    "build_variant",
                    format!("{variant} needs a pool of at least {} samples, got {n}", ROT12K_TRAIN + ROT12K_TEST),
                ));
            }
            let angles = full_turn_angles(n, seed);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15));
            let picked = if variant == DatasetVariant::Rot12kTrain {
                &order[..ROT12K_TRAIN]
            } else {
                &order[ROT12K_TRAIN..ROT12K_TRAIN + ROT12K_TEST]
            };
            let subset = base.select(picked)?;
            let sub_angles = picked.iter().map(|&i| angles[i]).collect();
            rotated(&subset, variant, seed, sub_angles, subset.labels.clone())
        }
    }
}
