//! The quality metric under defense and the U-Net denoiser placed in front of
//! it during smoothing.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A 3x3 convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn he(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        Conv {
            weight: Tensor::randn(&[c_out, c_in, 3, 3], std, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

/// Common parameter plumbing for both networks.
pub trait Module {
    /// Architecture descriptor written into the weight container header.
    fn architecture(&self) -> String;
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape`, in `named_params` order.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    fn save(&self, path: &Path) -> Result<()> {
        container::save(path, &self.architecture(), &self.named_params())
    }
}

/// Copies tensors loaded from a container into a freshly built module,
/// rejecting any name or shape drift.
fn fill_from(module: &mut dyn Module, file: container::WeightFile, path: &Path) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = module
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected.len() != file.tensors.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, container holds {}", expected.len(), file.tensors.len()),
        ));
    }
    for (i, ((name, shape), (got_name, got))) in expected.iter().zip(&file.tensors).enumerate() {
        if name != got_name || shape.as_slice() != got.shape() {
            return Err(Error::format(
                path,
                format!(
                    "manifest entry {i} ({got_name}): expected {name} with shape {shape:?}, found shape {:?}",
                    got.shape()
                ),
            ));
        }
    }
    for (dst, (_, src)) in module.params_mut().into_iter().zip(file.tensors) {
        *dst = src;
    }
    Ok(())
}

fn arch_field<'a>(arch: &'a str, key: &str) -> Option<&'a str> {
    arch.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

fn check_image_batch(op: &'static str, x: &Tensor, multiple: usize) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::dim(op, "rank", 4, x.rank()));
    }
    if x.shape()[1] != 3 {
        return Err(Error::dim(op, "channels", 3, x.shape()[1]));
    }
    for (axis, name) in [(2, "height"), (3, "width")] {
        if x.shape()[axis] % multiple != 0 {
            return Err(Error::dim(op, name, format!("multiple of {multiple}"), x.shape()[axis]));
        }
    }
    Ok(())
}

fn as_batch(op: &'static str, image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::dim(op, "rank", 3, image.rank()));
    }
    Ok(image.unsqueeze0())
}

/// Anything that maps a batch `[n, 3, h, w]` to `n` scalar scores.
pub trait Scorer: Sync {
    fn score_batch(&self, batch: &Tensor) -> Result<Vec<f64>>;

    /// Diameter of the score set, `hi - lo`.
    fn score_range(&self) -> f64;

    fn score(&self, image: &Tensor) -> Result<f64> {
        Ok(self.score_batch(&as_batch("score", image)?)?[0])
    }
}

/// A scorer whose gradient with respect to its input can be taped. Its own
/// parameters are recorded as constants.
pub trait DifferentiableScorer: Scorer {
    /// `x: [n, 3, h, w]` to scores of shape `[n]`.
    fn score_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreRange {
    pub lo: f64,
    pub hi: f64,
}

impl ScoreRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi - lo > 0.0) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config("score_range", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        Ok(ScoreRange { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

impl Default for ScoreRange {
    fn default() -> Self {
        ScoreRange { lo: 0.0, hi: 100.0 }
    }
}

pub const QUALITY_CHANNELS: [usize; 4] = [3, 8, 16, 32];

/// Small NR-IQA network: three conv-relu-pool stages, global average pool,
/// a linear head and a sigmoid squash into the declared score range.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityModel {
    convs: [Conv; 3],
    head_weight: Tensor,
    head_bias: Tensor,
    range: ScoreRange,
}

impl QualityModel {
    pub fn init(seed: u64) -> Self {
        Self::with_range(seed, ScoreRange::default())
    }

    pub fn with_range(seed: u64, range: ScoreRange) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = QUALITY_CHANNELS;
        let convs = [
            Conv::he(c[0], c[1], &mut rng),
            Conv::he(c[1], c[2], &mut rng),
            Conv::he(c[2], c[3], &mut rng),
        ];
        let head_weight = Tensor::randn(&[1, c[3]], (2.0 / c[3] as f64).sqrt(), &mut rng);
        QualityModel {
            convs,
            head_weight,
            head_bias: Tensor::zeros(&[1]),
            range,
        }
    }

    pub fn range(&self) -> ScoreRange {
        self.range
    }

    /// Zeroes the linear head so every image scores the range midpoint.
    pub fn zero_head(&mut self) {
        self.head_weight.data_mut().fill(0.0);
        self.head_bias.data_mut().fill(0.0);
    }

    /// Taped forward pass with explicitly bound parameters, `[n,3,h,w] -> [n]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        check_image_batch("score", tape.value(x), 8)?;
        let n = tape.value(x).shape()[0];
        let mut h = x;
        for stage in 0..3 {
            h = tape.conv2d(h, params[2 * stage], params[2 * stage + 1], 1, 1)?;
            h = tape.relu(h)?;
            h = tape.avg_pool2d(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let z = tape.linear(pooled, params[6], params[7])?;
        let z = tape.reshape(z, &[n])?;
        let s = tape.sigmoid(z)?;
        let s = tape.mul_scalar(s, self.range.width())?;
        tape.add_scalar(s, self.range.lo)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = container::load(path)?;
        if !file.architecture.starts_with("quality-cnn") {
            return Err(Error::format(path, format!("not a quality model: {}", file.architecture)));
        }
        let parse = |key: &str| -> Result<f64> {
            arch_field(&file.architecture, key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("architecture header lacks {key}")))
        };
        let range = ScoreRange::new(parse("lo")?, parse("hi")?).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = QualityModel::with_range(0, range);
        fill_from(&mut model, file, path)?;
        Ok(model)
    }
}

impl Module for QualityModel {
    fn architecture(&self) -> String {
        format!("quality-cnn v1 channels=3,8,16,32 lo={:?} hi={:?}", self.range.lo, self.range.hi)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::with_capacity(8);
        for (i, c) in self.convs.iter().enumerate() {
            v.push((format!("conv{}.weight", i + 1), &c.weight));
            v.push((format!("conv{}.bias", i + 1), &c.bias));
        }
        v.push(("head.weight".into(), &self.head_weight));
        v.push(("head.bias".into(), &self.head_bias));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(8);
        for c in self.convs.iter_mut() {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.head_weight);
        v.push(&mut self.head_bias);
        v
    }
}

impl Scorer for QualityModel {
    fn score_batch(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let s = self.score_on_tape(&mut tape, x)?;
        Ok(tape.value(s).data().to_vec())
    }

    fn score_range(&self) -> f64 {
        self.range.width()
    }
}

impl DifferentiableScorer for QualityModel {
    fn score_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.bind(tape, false);
        self.forward(tape, &params, x)
    }
}

/// Linear score `w . x + b` over the flattened image. Used as an analytic
/// stand-in for a metric in certification and attack checks.
#[derive(Clone, Debug)]
pub struct LinearScorer {
    pub weight: Tensor,
    pub offset: f64,
    pub range: f64,
}

impl LinearScorer {
    pub fn new(weight: Tensor, offset: f64, range: f64) -> Self {
        LinearScorer { weight, offset, range }
    }

    fn check(&self, batch: &Tensor) -> Result<usize> {
        let per = self.weight.len();
        if batch.rank() < 2 || batch.len() / batch.shape()[0] != per {
            return Err(Error::dim("linear_scorer", "image", per, batch.len() / batch.shape()[0].max(1)));
        }
        Ok(per)
    }
}

impl Scorer for LinearScorer {
    fn score_batch(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let per = self.check(batch)?;
        Ok(batch
            .data()
            .chunks_exact(per)
            .map(|img| self.offset + img.iter().zip(self.weight.data()).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    fn score_range(&self) -> f64 {
        self.range
    }
}

impl DifferentiableScorer for LinearScorer {
    fn score_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let per = self.check(tape.value(x))?;
        let n = tape.value(x).shape()[0];
        let flat = tape.reshape(x, &[n, per])?;
        let w = tape.constant(self.weight.reshape(&[1, per])?);
        let b = tape.constant(Tensor::scalar(self.offset));
        let z = tape.linear(flat, w, b)?;
        tape.reshape(z, &[n])
    }
}

/// Names of the seven weighted layers, in forward order.
pub const DENOISER_LAYERS: [&str; 7] = ["enc1", "enc2", "enc3", "dec1", "dec2", "dec3", "out"];

/// Seven-layer U-Net: three encoder convs with 2x downsampling after the
/// first two, two decoder convs each fed by a nearest 2x upsample
/// concatenated with the matching encoder features, one refinement conv and
/// a 3-channel output conv clamped to `[0, 1]`. Channel widths are
/// `base, 2*base, 4*base`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    base: usize,
    layers: [Conv; 7],
}

impl DenoiserModel {
    pub const DEFAULT_BASE: usize = 16;

    pub fn init(seed: u64) -> Self {
        Self::with_base(seed, Self::DEFAULT_BASE)
    }

    pub fn with_base(seed: u64, base: usize) -> Self {
        assert!(base >= 1, "denoiser base width must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = [base, 2 * base, 4 * base];
        let layers = [
            Conv::he(3, c1, &mut rng),
            Conv::he(c1, c2, &mut rng),
            Conv::he(c2, c3, &mut rng),
            Conv::he(c3 + c2, c2, &mut rng),
            Conv::he(c2 + c1, c1, &mut rng),
            Conv::he(c1, c1, &mut rng),
            Conv::he(c1, 3, &mut rng),
        ];
        DenoiserModel { base, layers }
    }

    pub fn base(&self) -> usize {
        self.base
    }

    /// Parameter count implied by the layer plan for a given base width.
    pub fn expected_param_count(base: usize) -> usize {
        let [c1, c2, c3] = [base, 2 * base, 4 * base];
        let conv = |i: usize, o: usize| i * o * 9 + o;
        conv(3, c1) + conv(c1, c2) + conv(c2, c3) + conv(c3 + c2, c2) + conv(c2 + c1, c1) + conv(c1, c1) + conv(c1, 3)
    }

    /// Taped forward pass, `[n,3,h,w] -> [n,3,h,w]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        check_image_batch("denoise", tape.value(x), 4)?;
        let conv_relu = |tape: &mut Tape, l: usize, h: Var| -> Result<Var> {
            let y = tape.conv2d(h, params[2 * l], params[2 * l + 1], 1, 1)?;
            tape.relu(y)
        };
        let e1 = conv_relu(tape, 0, x)?;
        let p1 = tape.avg_pool2d(e1)?;
        let e2 = conv_relu(tape, 1, p1)?;
        let p2 = tape.avg_pool2d(e2)?;
        let e3 = conv_relu(tape, 2, p2)?;
        let u1 = tape.nearest_upsample2d(e3)?;
        let c1 = tape.concat_channels(u1, e2)?;
        let d1 = conv_relu(tape, 3, c1)?;
        let u2 = tape.nearest_upsample2d(d1)?;
        let c2 = tape.concat_channels(u2, e1)?;
        let d2 = conv_relu(tape, 4, c2)?;
        let d3 = conv_relu(tape, 5, d2)?;
        let out = tape.conv2d(d3, params[12], params[13], 1, 1)?;
        tape.clamp01(out)
    }

    pub fn denoise_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }

    /// Denoises a single `[3, h, w]` image.
    pub fn denoise(&self, image: &Tensor) -> Result<Tensor> {
        let out = self.denoise_batch(&as_batch("denoise", image)?)?;
        out.into_reshaped(image.shape())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = container::load(path)?;
        if !file.architecture.starts_with("unet7") {
            return Err(Error::format(path, format!("not a denoiser: {}", file.architecture)));
        }
        let base = arch_field(&file.architecture, "base")
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&b| b >= 1)
            .ok_or_else(|| Error::format(path, "architecture header lacks base"))?;
        let mut model = DenoiserModel::with_base(0, base);
        fill_from(&mut model, file, path)?;
        Ok(model)
    }
}

impl Module for DenoiserModel {
    fn architecture(&self) -> String {
        format!("unet7 v1 base={}", self.base)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::with_capacity(14);
        for (name, c) in DENOISER_LAYERS.iter().zip(&self.layers) {
            v.push((format!("{name}.weight"), &c.weight));
            v.push((format!("{name}.bias"), &c.bias));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(14);
        for c in self.layers.iter_mut() {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn zero_head_scores_midpoint() {
        let mut m = QualityModel::init(3);
        m.zero_head();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            assert_eq!(m.score(&random_image(&mut rng, 16, 24)).unwrap(), 50.0);
        }
    }

    #[test]
    fn score_rejects_extent_not_multiple_of_eight() {
        let m = QualityModel::init(3);
        let err = m.score(&Tensor::zeros(&[3, 12, 16])).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn scores_stay_in_range() {
        let m = QualityModel::init(11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<Tensor> = (0..1000).map(|_| random_image(&mut rng, 8, 8)).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let scores = m.score_batch(&Tensor::stack(&refs).unwrap()).unwrap();
        assert!(scores.iter().all(|s| (0.0..=100.0).contains(s)));
    }

    #[test]
    fn score_is_deterministic() {
        let m = QualityModel::init(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 16, 16);
        assert_eq!(m.score(&img).unwrap().to_bits(), m.score(&img).unwrap().to_bits());
    }

    #[test]
    fn denoiser_shape_and_clamp_contract() {
        let d = DenoiserModel::with_base(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..2.0)).collect();
        let x = Tensor::new(vec![3, 32, 32], data).unwrap();
        let y = d.denoise(&x).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn denoiser_rejects_extent_not_multiple_of_four() {
        let d = DenoiserModel::with_base(1, 2);
        assert!(d.denoise(&Tensor::zeros(&[3, 8, 10])).is_err());
    }

    #[test]
    fn denoiser_param_count_matches_layer_plan() {
        for base in [2, 8, 16] {
            let d = DenoiserModel::with_base(0, base);
            assert_eq!(d.param_count(), DenoiserModel::expected_param_count(base));
            assert_eq!(d.named_params().len(), 14);
        }
        assert_eq!(DenoiserModel::expected_param_count(16), 60_947);
        assert!(DenoiserModel::expected_param_count(16) <= 200_000);
    }

    #[test]
    fn init_is_seed_deterministic() {
        assert_eq!(QualityModel::init(7), QualityModel::init(7));
        assert_ne!(QualityModel::init(7), QualityModel::init(8));
        assert_eq!(DenoiserModel::with_base(7, 4), DenoiserModel::with_base(7, 4));
        assert_ne!(DenoiserModel::with_base(7, 4), DenoiserModel::with_base(8, 4));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = QualityModel::with_range(21, ScoreRange::new(-1.5, 7.25).unwrap());
        let p = dir.path().join("m.ctiq");
        m.save(&p).unwrap();
        let back = QualityModel::load(&p).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let img = random_image(&mut rng, 8, 8);
            assert_eq!(m.score(&img).unwrap().to_bits(), back.score(&img).unwrap().to_bits());
        }
        let d = DenoiserModel::with_base(3, 4);
        let pd = dir.path().join("d.ctiq");
        d.save(&pd).unwrap();
        assert_eq!(DenoiserModel::load(&pd).unwrap(), d);
    }

    #[test]
    fn load_rejects_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ctiq");
        let d = DenoiserModel::with_base(3, 4);
        // Header claims a different width than the stored tensors.
        let named = d.named_params();
        container::save(&p, "unet7 v1 base=5", &named).unwrap();
        let err = DenoiserModel::load(&p).unwrap_err().to_string();
        assert!(err.contains("manifest entry 0 (enc1.weight)"), "{err}");
        assert!(QualityModel::load(&p).is_err());
    }
}
