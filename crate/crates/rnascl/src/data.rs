//! Dataset provisioning: a synthetic oriented-bar corpus sized for desk
//! runs, a small binary on-disk format, deterministic batching and the
//! usual flip/crop augmentation.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic "RNC1" | u32 n | u32 c | u32 h | u32 w | u32 classes
//! n*c*h*w bytes: pixels, row-major NCHW, value/255
//! n u16 values: labels
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RNC1";

#[derive(Clone, Debug)]
pub struct Dataset<E: Real> {
    pub images: Tensor<E>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<E: Real> Dataset<E> {
    pub fn new(images: Tensor<E>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset::new",
                shape: shape.to_vec(),
                reason: format!("expected ({}, c, h, w) images", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config {
                message: format!("label {bad} outside {classes} classes"),
            });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    fn sample_len(&self) -> usize {
        let s = self.images.shape();
        s[1] * s[2] * s[3]
    }

    /// Copy of the samples at `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<E>, Vec<usize>) {
        let sl = self.sample_len();
        let s = self.images.shape();
        let mut data = Vec::with_capacity(idx.len() * sl);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * sl..][..sl]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(vec![idx.len(), s[1], s[2], s[3]], data)
            .expect("gather preserves sample shape");
        (images, labels)
    }

    /// First `n` samples of each class, preserving order.
    pub fn take_per_class(&self, n: usize) -> Result<Dataset<E>> {
        let mut counts = vec![0usize; self.classes];
        let mut idx = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            if counts[label] < n {
                counts[label] += 1;
                idx.push(i);
            }
        }
        if idx.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (images, labels) = self.gather(&idx);
        Dataset::new(images, labels, self.classes)
    }
}

/// Sample order for one epoch; a pure function of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Class-conditional oriented bars on a noisy background. Class k's image
/// carries a bar at angle pi*k/classes plus a fainter distractor bar at
/// another class's angle, both with random center jitter. The amplitude
/// gap between the two bars is the entire class margin, so a bounded
/// pixel perturbation can promote the distractor on nets that weigh
/// evidence narrowly. Labels interleave (i mod classes), so the set is
/// exactly class-balanced for any multiple of `classes`.
pub fn synth_dataset<E: Real>(
    classes: usize,
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset<E>> {
    if classes < 2 {
        return Err(Error::Config {
            message: format!("synthetic dataset needs >= 2 classes, got {classes}"),
        });
    }
    let n = classes * n_per_class;
    let channels = 3;
    let channel_gain = [0.95, 0.75, 0.55];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * channels * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        let k2 = (k + 1 + rng.random_range(0..classes - 1)) % classes;
        let amp1 = 0.50 + rng.random::<f64>() * 0.10;
        let amp2 = amp1 - 0.10 - rng.random::<f64>() * 0.12;
        let mut plane = vec![0.0f64; size * size];
        for (kk, amp) in [(k, amp1), (k2, amp2)] {
            let theta = std::f64::consts::PI * kk as f64 / classes as f64;
            let (sin_t, cos_t) = theta.sin_cos();
            let cx = rng.random::<f64>() * 0.6 - 0.3;
            let cy = rng.random::<f64>() * 0.6 - 0.3;
            let width = 0.16 + rng.random::<f64>() * 0.06;
            for (p, v) in plane.iter_mut().enumerate() {
                let (py, px) = (p / size, p % size);
                let x = 2.0 * (px as f64 + 0.5) / size as f64 - 1.0;
                let y = 2.0 * (py as f64 + 0.5) / size as f64 - 1.0;
                let d = (-sin_t * (x - cx) + cos_t * (y - cy)).abs();
                *v += amp * (-(d / width) * (d / width)).exp();
            }
        }
        for &gain in channel_gain.iter().take(channels) {
            for &v in &plane {
                let noise = rng.random::<f64>() * 0.15;
                data.push(real::<E>((gain * v + noise).clamp(0.0, 1.0)));
            }
        }
    }
    let images = Tensor::new(vec![n, channels, size, size], data)?;
    Dataset::new(images, labels, classes)
}

/// Horizontal flip with probability 0.5 and zero-pad random crop. Per
/// sample the draw order is fixed: flip bool, then crop offsets. With
/// `flip = false` and `crop_pad = 0` this is the identity.
pub fn augment<E: Real, R: Rng>(
    images: &Tensor<E>,
    flip: bool,
    crop_pad: usize,
    rng: &mut R,
) -> Tensor<E> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = images.data().to_vec();
    for i in 0..n {
        let sample = &mut out[i * c * h * w..][..c * h * w];
        if flip && rng.random::<f64>() < 0.5 {
            for ch in 0..c {
                for y in 0..h {
                    sample[(ch * h + y) * w..][..w].reverse();
                }
            }
        }
        if crop_pad > 0 {
            let oy = rng.random_range(0..=2 * crop_pad);
            let ox = rng.random_range(0..=2 * crop_pad);
            let mut cropped = vec![E::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    // Source row in the padded image, if it lands inside
                    // the original.
                    let sy = (y + oy) as isize - crop_pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = (x + ox) as isize - crop_pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cropped[(ch * h + y) * w + x] =
                            sample[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
            sample.copy_from_slice(&cropped);
        }
    }
    Tensor::new(s.to_vec(), out).expect("augment preserves shape")
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::MalformedFile {
        path: path.display().to_string(),
        offset,
        reason: format!("expected {} more bytes", buf.len()),
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path, offset: u64) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, path, offset)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_dataset<E: Real>(ds: &Dataset<E>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    let s = ds.images.shape();
    for v in [s[0], s[1], s[2], s[3], ds.classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &v in ds.images.data() {
        let byte = (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        w.write_all(&[byte])?;
    }
    for &label in &ds.labels {
        w.write_all(&(label as u16).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset<E: Real>(path: &Path) -> Result<Dataset<E>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, path, 0)?;
    if magic != MAGIC {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let n = read_u32(&mut r, path, 4)? as usize;
    let c = read_u32(&mut r, path, 8)? as usize;
    let h = read_u32(&mut r, path, 12)? as usize;
    let w = read_u32(&mut r, path, 16)? as usize;
    let classes = read_u32(&mut r, path, 20)? as usize;
    if n == 0 || c == 0 || h == 0 || w == 0 || classes == 0 {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            offset: 4,
            reason: format!("zero extent in header ({n}, {c}, {h}, {w}, {classes})"),
        });
    }
    let pixel_bytes = n * c * h * w;
    let mut pixels = vec![0u8; pixel_bytes];
    read_exact_at(&mut r, &mut pixels, path, 24)?;
    let data: Vec<E> = pixels.iter().map(|&b| real(b as f64 / 255.0)).collect();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let offset = 24 + pixel_bytes as u64 + 2 * i as u64;
        let mut b = [0u8; 2];
        read_exact_at(&mut r, &mut b, path, offset)?;
        let label = u16::from_le_bytes(b) as usize;
        if label >= classes {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                offset,
                reason: format!("label {label} outside {classes} classes"),
            });
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, c, h, w], data)?;
    Dataset::new(images, labels, classes)
}

/// First `n_per_class` samples per class from a dataset file.
pub fn load_subset<E: Real>(path: &Path, n_per_class: usize) -> Result<Dataset<E>> {
    load_dataset(path)?.take_per_class(n_per_class)
}

/// Convert CIFAR-10-style binary records (1 label byte + 3x32x32 pixel
/// planes) into the native format, optionally block-averaging down to
/// `target_size` (which must divide 32).
pub fn ingest_cifar<E: Real>(
    input: &Path,
    n_per_class: usize,
    target_size: usize,
) -> Result<Dataset<E>> {
    const SRC: usize = 32;
    const RECORD: usize = 1 + 3 * SRC * SRC;
    if target_size == 0 || !SRC.is_multiple_of(target_size) {
        return Err(Error::Config {
            message: format!("target size {target_size} must divide {SRC}"),
        });
    }
    let factor = SRC / target_size;
    let classes = 10;
    let file = File::open(input)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut counts = vec![0usize; classes];
    let mut data: Vec<E> = Vec::new();
    let mut labels = Vec::new();
    let mut record = vec![0u8; RECORD];
    let mut offset = 0u64;
    loop {
        match r.read_exact(&mut record) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                // A clean EOF lands exactly on a record boundary; a failed
                // read_exact eats the partial tail, so compare lengths
                // instead of probing the reader.
                if offset == file_len {
                    break;
                }
                return Err(Error::MalformedFile {
                    path: input.display().to_string(),
                    offset,
                    reason: "truncated record".into(),
                });
            }
            Err(e) => return Err(e.into()),
        }
        let label = record[0] as usize;
        if label >= classes {
            return Err(Error::MalformedFile {
                path: input.display().to_string(),
                offset,
                reason: format!("label {label} outside {classes} classes"),
            });
        }
        offset += RECORD as u64;
        if counts[label] >= n_per_class {
            continue;
        }
        counts[label] += 1;
        labels.push(label);
        for ch in 0..3 {
            let plane = &record[1 + ch * SRC * SRC..][..SRC * SRC];
            for by in 0..target_size {
                for bx in 0..target_size {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += plane[(by * factor + dy) * SRC + bx * factor + dx] as f64;
                        }
                    }
                    data.push(real(acc / (factor * factor) as f64 / 255.0));
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, target_size, target_size], data)?;
    Dataset::new(images, labels, classes)
}
