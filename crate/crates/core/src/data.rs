//! Synthetic quality datasets: band-limited textures, three degradation
//! families with a severity knob, and MOS derived from the severity.
//!
//! Dataset file (`CTDS1`), little-endian:
//!
//! ```text
//! b"CTDS1", u64 item count
//! per item: f64 mos, u8 kind, f64 severity, u64 seed, u8 split,
//!           u8 rank, rank x u64 extents, f64 pixels
//! u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CTDS1";

/// Highest spatial frequency of a texture component, in cycles per pixel.
/// Keeps every component in the passband where a wider box filter always
/// attenuates more, so blur damage grows with severity.
pub const MAX_FREQUENCY: f64 = 1.0 / 9.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Degradation {
    Noise,
    Blur,
    Contrast,
    /// Images that did not come from the generator (e.g. optimization outputs).
    External,
}

impl Degradation {
    pub const GENERATED: [Degradation; 3] = [Degradation::Noise, Degradation::Blur, Degradation::Contrast];

    fn code(self) -> u8 {
        match self {
            Degradation::Noise => 0,
            Degradation::Blur => 1,
            Degradation::Contrast => 2,
            Degradation::External => 255,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Degradation::Noise),
            1 => Some(Degradation::Blur),
            2 => Some(Degradation::Contrast),
            255 => Some(Degradation::External),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Degradation::Noise => "noise",
            Degradation::Blur => "blur",
            Degradation::Contrast => "contrast",
            Degradation::External => "external",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].get(c as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub mos: f64,
    pub kind: Degradation,
    pub severity: f64,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of Gaussian jitter added to the MOS; 0 keeps
    /// `mos = 100 (1 - s)` exact.
    pub mos_noise: f64,
}

impl GenConfig {
    pub fn new(count: usize, height: usize, width: usize, seed: u64) -> Self {
        GenConfig {
            count,
            height,
            width,
            seed,
            mos_noise: 0.0,
        }
    }
}

/// Sum of 1..=8 random 2-D sinusoids per channel, rescaled per channel to
/// `[0.1, 0.9]`.
pub fn texture(height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * height * width);
    for _ in 0..3 {
        let k = rng.random_range(1..=8);
        let waves: Vec<(f64, f64, f64, f64)> = (0..k)
            .map(|_| {
                let mut axis = || {
                    let f = rng.random_range(0.5..=1.0) * MAX_FREQUENCY;
                    if rng.random::<bool>() { f } else { -f }
                };
                let (fx, fy) = (axis(), axis());
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..=1.0);
                (fx, fy, phase, amp)
            })
            .collect();
        let mut plane: Vec<f64> = (0..height * width)
            .map(|p| {
                let (y, x) = ((p / width) as f64, (p % width) as f64);
                waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
                    .sum()
            })
            .collect();
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            plane.fill(0.5);
        } else {
            for v in plane.iter_mut() {
                *v = 0.1 + 0.8 * (*v - lo) / (hi - lo);
            }
        }
        data.extend(plane);
    }
    Tensor::new(vec![3, height, width], data).expect("texture extents")
}

/// Separable box filter of radius `r` with edge replication.
pub fn box_blur(image: &Tensor, r: usize) -> Tensor {
    if r == 0 {
        return image.clone();
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let norm = 1.0 / (2 * r + 1) as f64;
    let ri = r as isize;
    let mut tmp = vec![0.0; c * h * w];
    let src = image.data();
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for x in 0..w {
                let s: f64 = (-ri..=ri)
                    .map(|d| row[(x as isize + d).clamp(0, w as isize - 1) as usize])
                    .sum();
                tmp[(ch * h + y) * w + x] = s * norm;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (-ri..=ri)
                    .map(|d| plane[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x])
                    .sum();
                out[(ch * h + y) * w + x] = s * norm;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Applies one degradation family at severity `s ∈ [0, 1]`. `seed` drives
/// the noise draw, so a fixed seed gives the same noise pattern at every
/// severity.
pub fn degrade(clean: &Tensor, kind: Degradation, s: f64, seed: u64) -> Tensor {
    let out = match kind {
        Degradation::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let amp = 0.35 * s;
            let mut t = clean.clone();
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += amp * z;
            }
            t
        }
        Degradation::Blur => box_blur(clean, (4.0 * s).round() as usize),
        Degradation::Contrast => clean.map(|x| x - s * (x - 0.5)),
        Degradation::External => clean.clone(),
    };
    out.clamp01()
}

fn check_extents(height: usize, width: usize) -> Result<()> {
    for (name, v) in [("height", height), ("width", width)] {
        if v == 0 || v % 8 != 0 {
            return Err(Error::dim("generate", name, "positive multiple of 8", v));
        }
    }
    Ok(())
}

/// Generates `cfg.count` labelled images. Each item draws its own seed,
/// degradation and severity from a per-index substream of `cfg.seed`, so the
/// result does not depend on the number of worker threads.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    check_extents(cfg.height, cfg.width)?;
    if cfg.count < 10 {
        return Err(Error::config("count", format!("need at least 10 images, got {}", cfg.count)));
    }
    if !(cfg.mos_noise >= 0.0) {
        return Err(Error::config("mos_noise", "must be non-negative"));
    }
    let splits = assign_splits(cfg.count, cfg.seed);
    let items = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let seed: u64 = rng.random();
            let kind = Degradation::GENERATED[rng.random_range(0..3)];
            let severity: f64 = rng.random();
            let clean = texture(cfg.height, cfg.width, seed);
            let image = degrade(&clean, kind, severity, seed);
            let mut mos = 100.0 * (1.0 - severity);
            if cfg.mos_noise > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                mos = (mos + cfg.mos_noise * z).clamp(0.0, 100.0);
            }
            LabeledImage {
                image,
                mos,
                kind,
                severity,
                seed,
                split: splits[i],
            }
        })
        .collect();
    Ok(Dataset { items })
}

/// 80/10/10 train/val/test assignment over a seeded shuffle.
fn assign_splits(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..count).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_train = (count * 8 + 5) / 10;
    let n_val = (count + 5) / 10;
    let mut splits = vec![Split::Test; count];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledImage> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    pub fn concat(mut self, other: Dataset) -> Dataset {
        self.items.extend(other.items);
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        for it in &self.items {
            out.extend_from_slice(&it.mos.to_le_bytes());
            out.push(it.kind.code());
            out.extend_from_slice(&it.severity.to_le_bytes());
            out.extend_from_slice(&it.seed.to_le_bytes());
            out.push(it.split.code());
            out.push(it.image.rank() as u8);
            for &d in it.image.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in it.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Dataset> {
        let err = |m: String| Error::format(path, m);
        if bytes.len() < MAGIC.len() + 8 + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("not a CTDS1 dataset (bad magic or too short)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(err("checksum mismatch (file truncated or corrupt)".into()));
        }
        let mut pos = MAGIC.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body
                .get(pos..pos + n)
                .ok_or_else(|| err("unexpected end of data".into()))?;
            pos += n;
            Ok(s)
        };
        let u64_of = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
        let count = u64_of(take(8)?) as usize;
        let mut items = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let mos = f64::from_bits(u64_of(take(8)?));
            let kind = Degradation::from_code(take(1)?[0]).ok_or_else(|| err(format!("item {i}: unknown kind")))?;
            let severity = f64::from_bits(u64_of(take(8)?));
            let seed = u64_of(take(8)?);
            let split = Split::from_code(take(1)?[0]).ok_or_else(|| err(format!("item {i}: unknown split")))?;
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64_of(take(8)?) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 && n <= body.len())
                .ok_or_else(|| err(format!("item {i}: invalid shape {shape:?}")))?;
            let raw = take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64_of(c))).collect();
            let image = Tensor::new(shape, data).map_err(|e| err(format!("item {i}: {e}")))?;
            items.push(LabeledImage {
                image,
                mos,
                kind,
                severity,
                seed,
                split,
            });
        }
        if pos != body.len() {
            return Err(err(format!("{} trailing bytes after last item", body.len() - pos)));
        }
        Ok(Dataset { items })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::decode(&bytes, path)
    }
}
