//! CIFAR-10 binary batches, augmentation, batching and synthetic data.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}', expected train|test"))),
        }
    }
}

/// Raw 8-bit images in CIFAR channel-major layout plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..][..IMAGE_BYTES]
    }

    /// The first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.pixels.truncate(n * IMAGE_BYTES);
    }

    /// Serializes back to the binary record format.
    pub fn to_records(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    /// Per-channel mean and standard deviation of pixel values in [0, 1].
    pub fn channel_stats(&self) -> Result<[(f64, f64); CHANNELS]> {
        if self.is_empty() {
            return Err(Error::domain("statistics of an empty dataset"));
        }
        let plane = SIDE * SIDE;
        let mut out = [(0.0, 0.0); CHANNELS];
        for (c, slot) in out.iter_mut().enumerate() {
            let (mut s, mut ss) = (0.0f64, 0.0f64);
            for i in 0..self.len() {
                for &p in &self.image(i)[c * plane..][..plane] {
                    let v = p as f64 / 255.0;
                    s += v;
                    ss += v * v;
                }
            }
            let n = (self.len() * plane) as f64;
            let mean = s / n;
            *slot = (mean, (ss / n - mean * mean).max(0.0).sqrt());
        }
        Ok(out)
    }
}

/// Parses binary records. A length that is not a whole number of records is
/// reported at the offset of the incomplete record.
pub fn parse_records(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    let whole = bytes.len() / RECORD_BYTES;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Io {
            path: path.to_path_buf(),
            offset: (whole * RECORD_BYTES) as u64,
            source: std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated record {whole}")),
        });
    }
    let mut labels = Vec::with_capacity(whole);
    let mut pixels = Vec::with_capacity(whole * IMAGE_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::format(
                path.display().to_string(),
                format!("record {i} at offset {} has label {}", i * RECORD_BYTES, rec[0]),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(Dataset { pixels, labels, split })
}

pub fn read_batch_file(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    })?;
    parse_records(&bytes, path, split)
}

/// Accepts either the directory holding the `.bin` files or its parent.
fn batches_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let dir = batches_dir(dir);
    match split {
        Split::Test => read_batch_file(&dir.join(TEST_FILE), Split::Test),
        Split::Train => {
            let mut all = Dataset {
                pixels: Vec::new(),
                labels: Vec::new(),
                split: Split::Train,
            };
            for f in TRAIN_FILES {
                let part = read_batch_file(&dir.join(f), Split::Train)?;
                all.pixels.extend_from_slice(&part.pixels);
                all.labels.extend_from_slice(&part.labels);
            }
            Ok(all)
        }
    }
}

pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_split(dir, Split::Train)?, load_split(dir, Split::Test)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PixelNorm {
    /// Per-channel standardization with training-set statistics.
    Standardize,
    /// Divide by 255.
    Scale,
}

impl FromStr for PixelNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standardize" => Ok(PixelNorm::Standardize),
            "scale" => Ok(PixelNorm::Scale),
            _ => Err(Error::Config(format!("unknown pixel_norm '{s}', expected standardize|scale"))),
        }
    }
}

impl fmt::Display for PixelNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PixelNorm::Standardize => "standardize",
            PixelNorm::Scale => "scale",
        })
    }
}

/// Maps raw bytes to network inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalizer {
    pub fn new(mode: PixelNorm, train: &Dataset) -> Result<Self> {
        match mode {
            PixelNorm::Scale => Ok(Normalizer {
                mean: [0.0; CHANNELS],
                std: [1.0; CHANNELS],
            }),
            PixelNorm::Standardize => {
                let s = train.channel_stats()?;
                Ok(Normalizer {
                    mean: s.map(|(m, _)| m),
                    std: s.map(|(_, sd)| if sd > 0.0 { sd } else { 1.0 }),
                })
            }
        }
    }

    pub fn apply(&self, image: &[u8], out: &mut [f32]) {
        let plane = SIDE * SIDE;
        for c in 0..CHANNELS {
            let (m, s) = (self.mean[c], self.std[c]);
            for (o, &p) in out[c * plane..][..plane].iter_mut().zip(&image[c * plane..][..plane]) {
                *o = ((p as f64 / 255.0 - m) / s) as f32;
            }
        }
    }
}

/// Crop offset in the 4-pixel zero-padded image and horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

pub const PAD: usize = 4;

impl CropFlip {
    pub const IDENTITY: CropFlip = CropFlip {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    pub fn sample(rng: &mut Rng) -> Self {
        CropFlip {
            dy: rng.below(2 * PAD + 1),
            dx: rng.below(2 * PAD + 1),
            flip: rng.bernoulli(0.5),
        }
    }
}

/// Zero-pads a `C×32×32` image by 4, crops 32×32 at `(dy, dx)` and
/// optionally mirrors columns.
pub fn augment_with(image: &[f32], t: CropFlip) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    let channels = image.len() / (SIDE * SIDE);
    for c in 0..channels {
        for y in 0..SIDE {
            let sy = y as isize + t.dy as isize - PAD as isize;
            if !(0..SIDE as isize).contains(&sy) {
                continue;
            }
            for x in 0..SIDE {
                let ox = if t.flip { SIDE - 1 - x } else { x };
                let sx = x as isize + t.dx as isize - PAD as isize;
                if (0..SIDE as isize).contains(&sx) {
                    out[(c * SIDE + y) * SIDE + ox] = image[(c * SIDE + sy as usize) * SIDE + sx as usize];
                }
            }
        }
    }
    out
}

pub fn augment(image: &[f32], rng: &mut Rng) -> Vec<f32> {
    augment_with(image, CropFlip::sample(rng))
}

/// Shuffled full batches for one epoch; the last partial batch is dropped.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks_exact(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Assembles a normalized `(N, 3, 32, 32)` batch, augmenting when an rng is
/// supplied.
pub fn make_batch(data: &Dataset, indices: &[usize], norm: &Normalizer, mut rng: Option<&mut Rng>) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut x = vec![0.0f32; indices.len() * IMAGE_BYTES];
    let mut scratch = vec![0.0f32; IMAGE_BYTES];
    for (slot, &i) in x.chunks_exact_mut(IMAGE_BYTES).zip(indices) {
        norm.apply(data.image(i), &mut scratch);
        match rng.as_deref_mut() {
            Some(r) => slot.copy_from_slice(&augment(&scratch, r)),
            None => slot.copy_from_slice(&scratch),
        }
    }
    let labels = indices.iter().map(|&i| data.labels[i] as usize).collect();
    Ok((Tensor::new(&[indices.len(), CHANNELS, SIDE, SIDE], x)?, labels))
}

pub fn synthetic_gaussian<T: Scalar>(shape: &[usize], mean: f64, var: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(var >= 0.0) {
        return Err(Error::domain(format!("variance must be non-negative, got {var}")));
    }
    rng.gaussian_tensor(shape, mean, var.sqrt())
}

const DISTRACTORS: usize = 64;
const CLASS_GAIN: f64 = 0.6;

/// Writes a learnable CIFAR-format dataset: each class is a smooth random
/// colour pattern, each sample a shifted copy of its class pattern at a
/// random gain, mixed with one of a pool of class-independent patterns and
/// pixel noise.
pub fn write_synthetic_cifar(dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        offset: 0,
        source,
    })?;
    let mut rng = Rng::new(seed);
    let patterns: Vec<Vec<f64>> = (0..CLASSES).map(|_| class_pattern(&mut rng)).collect();
    let distractors: Vec<Vec<f64>> = (0..DISTRACTORS).map(|_| class_pattern(&mut rng)).collect();
    let sample = |rng: &mut Rng| {
        let label = rng.below(CLASSES);
        let p = &patterns[label];
        let q = &distractors[rng.below(DISTRACTORS)];
        let (sy, sx) = (rng.below(9) as isize - 4, rng.below(9) as isize - 4);
        let gain = CLASS_GAIN * (0.3 + rng.uniform());
        let qgain = rng.gaussian();
        let mut rec = Vec::with_capacity(RECORD_BYTES);
        rec.push(label as u8);
        for c in 0..CHANNELS {
            for y in 0..SIDE as isize {
                for x in 0..SIDE as isize {
                    let yy = (y + sy).rem_euclid(SIDE as isize) as usize;
                    let xx = (x + sx).rem_euclid(SIDE as isize) as usize;
                    let i = (c * SIDE + yy) * SIDE + xx;
                    let v = 128.0 + 50.0 * (gain * p[i] + qgain * q[(c * SIDE + y as usize) * SIDE + x as usize]) + 45.0 * rng.gaussian();
                    rec.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        rec
    };
    let write = |name: &str, records: Vec<u8>| {
        let path = dir.join(name);
        std::fs::write(&path, records).map_err(|source| Error::Io { path, offset: 0, source })
    };
    let per_file = train / TRAIN_FILES.len();
    for (k, f) in TRAIN_FILES.iter().enumerate() {
        let n = if k + 1 == TRAIN_FILES.len() {
            train - per_file * k
        } else {
            per_file
        };
        let bytes: Vec<u8> = (0..n).flat_map(|_| sample(&mut rng)).collect();
        write(f, bytes)?;
    }
    let bytes: Vec<u8> = (0..test).flat_map(|_| sample(&mut rng)).collect();
    write(TEST_FILE, bytes)
}

/// Sum of a few random low-frequency sinusoids per channel, roughly in [-1, 1].
fn class_pattern(rng: &mut Rng) -> Vec<f64> {
    let mut p = vec![0.0; IMAGE_BYTES];
    for c in 0..CHANNELS {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let fy = (rng.below(3) + 1) as f64;
                let fx = (rng.below(3) + 1) as f64;
                (fy, fx, rng.uniform() * std::f64::consts::TAU, rng.gaussian())
            })
            .collect();
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (yf, xf) = (y as f64 / SIDE as f64, x as f64 / SIDE as f64);
                let v: f64 = waves
                    .iter()
                    .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * yf + fx * xf) + ph).sin())
                    .sum();
                p[(c * SIDE + y) * SIDE + x] = v / 1.7;
            }
        }
    }
    p
}
