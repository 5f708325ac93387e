//! Whole-network parameters: backbone + neck, heads, temporal module and the
//! optional fusion module, with seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionParams, BatchNorm, BlockActivation, ConvBlockParams, NonLocalParams};
use crate::dfm::{DfmParams, Orientation, WidthConfig, DEFAULT_SLOPE};
use crate::error::{Error, Result};
use crate::pipeline::TrackConfig;
use crate::siamese::{BackboneArch, BackboneLayer, BackboneParams, HeadBranch, HeadParams};
use crate::tensor::{conv2d, Matrix, Tensor, BATCHNORM_EPS};
use crate::tiam::{TiamArch, TiamFlags, TiamParams};
use crate::weights::{ModelWeights, WeightReader};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DfmArch {
    pub widths: WidthConfig,
    pub orientation: Orientation,
    pub slope: f64,
}

impl Default for DfmArch {
    fn default() -> Self {
        DfmArch {
            widths: WidthConfig::default(),
            orientation: Orientation::TirToRgb,
            slope: DEFAULT_SLOPE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelArch {
    pub backbone: BackboneArch,
    pub tiam: TiamArch,
    pub dfm: DfmArch,
}

impl ModelArch {
    pub fn channels(&self) -> usize {
        self.backbone.neck_channels
    }

    pub fn stride(&self) -> usize {
        self.backbone.total_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.channels.is_empty() || b.channels.len() != b.strides.len() {
            return Err(Error::Config(format!(
                "backbone has {} channel entries and {} strides",
                b.channels.len(),
                b.strides.len()
            )));
        }
        if b.channels.iter().chain(&b.strides).any(|&v| v == 0) || b.neck_channels == 0 || b.input_channels == 0 {
            return Err(Error::Config("backbone widths and strides must be positive".into()));
        }
        if self.tiam.nl_inner_channels == 0 {
            return Err(Error::Config("non-local inner width must be positive".into()));
        }
        crate::blocks::check_reduction(b.neck_channels, self.tiam.attention_reduction)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.dfm.slope) {
            return Err(Error::Config(format!("fusion slope {} outside [0, 1]", self.dfm.slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub tiam: TiamParams,
    /// Absent until the fusion stage has been trained or initialized.
    pub dfm: Option<DfmParams>,
}

impl Model {
    /// Every name in `weights` must be consumed; fusion weights are optional.
    pub fn from_weights(weights: &ModelWeights, arch: &ModelArch, flags: TiamFlags) -> Result<Self> {
        arch.validate()?;
        let c = arch.channels();
        let mut reader = WeightReader::new(weights);
        let backbone = BackboneParams::load(&mut reader, &arch.backbone)?;
        let head = HeadParams::load(&mut reader, c, arch.stride())?;
        let tiam = TiamParams::load(&mut reader, c, &arch.tiam, flags)?;
        let dfm = if weights.names().any(|n| n.starts_with("dfm/")) {
            Some(DfmParams::load(&mut reader, arch.dfm.widths, arch.dfm.orientation, arch.dfm.slope)?)
        } else {
            None
        };
        reader.finish()?;
        Ok(Model {
            backbone,
            head,
            tiam,
            dfm,
        })
    }

    pub fn to_weights(&self) -> Result<ModelWeights> {
        let mut w = ModelWeights::new();
        self.backbone.export(&mut w)?;
        self.head.export(&mut w)?;
        self.tiam.export(&mut w)?;
        if let Some(d) = &self.dfm {
            d.export(&mut w)?;
        }
        Ok(w)
    }
}

fn uniform_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
    let s = (1.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-s..s))
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let s = (1.0 / cols as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Matrix::new(rows, cols, data).expect("sized above")
}

fn random_block(shape: [usize; 4], activation: BlockActivation, rng: &mut impl Rng) -> ConvBlockParams {
    ConvBlockParams {
        kernel: uniform_tensor(shape, rng),
        bias: vec![0.0; shape[0]],
        bn: BatchNorm::identity(shape[0]),
        activation,
    }
}

fn random_head_branch(c: usize, outputs: usize, rng: &mut impl Rng) -> HeadBranch {
    HeadBranch {
        template: random_block([c, c, 3, 3], BlockActivation::Relu, rng),
        search: random_block([c, c, 3, 3], BlockActivation::Relu, rng),
        out_kernel: uniform_tensor([outputs, c, 1, 1], rng),
        out_bias: vec![0.0; outputs],
    }
}

/// Seeded random model: kernels uniform in `±sqrt(1/fan_in)`, zero biases,
/// identity batch-norm. Includes fusion parameters.
pub fn init_model(arch: &ModelArch, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &arch.backbone;
    let mut layers = Vec::with_capacity(b.channels.len());
    let mut cin = b.input_channels;
    for (&cout, &stride) in b.channels.iter().zip(&b.strides) {
        layers.push(BackboneLayer {
            block: random_block([cout, cin, 3, 3], BlockActivation::Relu, &mut rng),
            stride,
        });
        cin = cout;
    }
    let c = b.neck_channels;
    let neck = random_block([c, cin, 1, 1], BlockActivation::None, &mut rng);
    let head = HeadParams {
        cls: random_head_branch(c, 2, &mut rng),
        reg: random_head_branch(c, 4, &mut rng),
        stride: arch.stride(),
    };
    let relu = BlockActivation::Relu;
    let t = &arch.tiam;
    let hidden = c / t.attention_reduction;
    let inner = t.nl_inner_channels;
    let none = BlockActivation::None;
    let tiam = TiamParams::new(
        random_block([c, c, 3, 3], relu, &mut rng),
        random_block([c, c, 3, 3], relu, &mut rng),
        random_block([c, c, 3, 3], relu, &mut rng),
        random_block([c, c, 3, 3], relu, &mut rng),
        random_block([c, 2 * c, 1, 1], relu, &mut rng),
        AttentionParams::new(
            uniform_matrix(hidden, c, &mut rng),
            uniform_matrix(c, hidden, &mut rng),
            t.attention_reduction,
            t.attention_pooling,
        )?,
        AttentionParams::new(
            uniform_matrix(hidden, c, &mut rng),
            uniform_matrix(c, hidden, &mut rng),
            t.attention_reduction,
            t.attention_pooling,
        )?,
        NonLocalParams::new(
            random_block([inner, c, 1, 1], none, &mut rng),
            random_block([inner, c, 1, 1], none, &mut rng),
            random_block([inner, c, 1, 1], none, &mut rng),
            random_block([c, inner, 1, 1], none, &mut rng),
        )?,
        TiamFlags::default(),
    )?;
    let dfm = DfmParams::init(arch.dfm.widths, arch.dfm.orientation, arch.dfm.slope, &mut rng)?;
    Ok(Model {
        backbone: BackboneParams { layers, neck },
        head,
        tiam,
        dfm: Some(dfm),
    })
}

pub fn init_weights(arch: &ModelArch, seed: u64) -> Result<ModelWeights> {
    init_model(arch, seed)?.to_weights()
}

/// Sets each block's batch-norm statistics to the per-channel mean and
/// variance of its convolution output over `images`, layer by layer.
pub fn calibrate_backbone(backbone: &mut BackboneParams, images: &[Tensor]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Init("no calibration images".into()));
    }
    let mut xs: Vec<Tensor> = images.to_vec();
    for layer in &mut backbone.layers {
        xs = calibrate_block(&mut layer.block, &xs, layer.stride, 1)?;
    }
    calibrate_block(&mut backbone.neck, &xs, 1, 0)?;
    Ok(())
}

fn calibrate_block(block: &mut ConvBlockParams, inputs: &[Tensor], stride: usize, padding: usize) -> Result<Vec<Tensor>> {
    let c = block.out_channels();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut count = 0usize;
    let raw = inputs
        .iter()
        .map(|x| conv2d(x, &block.kernel, &block.bias, stride, padding))
        .collect::<Result<Vec<_>>>()?;
    for y in &raw {
        for n in 0..y.batch() {
            for (ch, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in y.plane(n, ch) {
                    *s += v as f64;
                    *q += (v as f64).powi(2);
                }
            }
        }
        count += y.batch() * y.plane_len();
    }
    for ch in 0..c {
        let mean = sum[ch] / count as f64;
        let var = (sq[ch] / count as f64 - mean * mean).max(0.0);
        block.bn.mean[ch] = mean as f32;
        block.bn.var[ch] = (var as f32 - BATCHNORM_EPS).max(0.0) + 1e-6;
        block.bn.gamma[ch] = 1.0;
        block.bn.beta[ch] = 0.0;
    }
    inputs
        .iter()
        .map(|x| crate::blocks::conv_block(x, block, stride, padding))
        .collect()
}

/// Settings of [`matching_preset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresetConfig {
    /// Logit per unit of mean feature correlation.
    pub temperature: f32,
    /// Mean correlation at which the positive probability is one half.
    pub threshold: f32,
}

impl Default for PresetConfig {
    fn default() -> Self {
        PresetConfig {
            temperature: 2.0,
            threshold: 0.8,
        }
    }
}

/// Sign applied to the template and search features of each channel group
/// and the group's weight in the summed correlation. Together the four
/// groups rebuild the signed product `x * y` from rectified parts.
const SIGN_GROUPS: [(f32, f32, f32); 4] = [(1.0, 1.0, 1.0), (-1.0, -1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0)];

/// Picks, for output channel `g * dims + d`, the neck channel carrying
/// the positive (`d`) or negated (`dims + d`) copy of feature `d`.
fn signed_selector(c: usize, dims: usize, side: impl Fn(usize) -> f32) -> ConvBlockParams {
    let kernel = Tensor::from_fn([c, c, 3, 3], |o, i, y, x| {
        let (g, d) = (o / dims, o % dims);
        let src = if side(g) > 0.0 { d } else { dims + d };
        if g < 4 && i == src && y == 1 && x == 1 {
            1.0
        } else {
            0.0
        }
    });
    ConvBlockParams {
        kernel,
        bias: vec![0.0; c],
        bn: BatchNorm::identity(c),
        activation: BlockActivation::Relu,
    }
}

/// Makes neck channel `dims + d` the negation of channel `d`, so both signs
/// of every feature survive any later rectification.
fn mirror_neck(neck: &mut ConvBlockParams, dims: usize) {
    let k = neck.kernel.shape()[1..].iter().product::<usize>();
    let data = neck.kernel.data_mut();
    for d in 0..dims {
        let (src, dst) = (d * k, (dims + d) * k);
        data.copy_within(src..src + k, dst);
    }
    for d in 0..dims {
        neck.bias[dims + d] = neck.bias[d];
        neck.bn.mean[dims + d] = neck.bn.mean[d];
        neck.bn.var[dims + d] = neck.bn.var[d];
        neck.bn.gamma[dims + d] = -neck.bn.gamma[d];
        neck.bn.beta[dims + d] = -neck.bn.beta[d];
    }
}

/// Turns a random model into a usable template matcher without any
/// training. Batch-norm is calibrated on `images` so neck features are
/// roughly standardized; the classification branch then scores the mean
/// signed correlation between the first `C / 4` neck channels of template
/// and search, read from mirrored channel pairs. Regression predicts a
/// fixed box of a quarter of the search crop, and the temporal module's
/// output projection is zeroed so it passes features through until trained.
pub fn matching_preset(arch: &ModelArch, seed: u64, images: &[Tensor], preset: &PresetConfig, track: &TrackConfig) -> Result<Model> {
    let mut model = init_model(arch, seed)?;
    calibrate_backbone(&mut model.backbone, images)?;
    let c = arch.channels();
    let dims = c / 4;
    if dims == 0 {
        return Err(Error::Init(format!("{c} feature channels are too few for the matching preset")));
    }
    mirror_neck(&mut model.backbone.neck, dims);
    let k = (track.template_size / arch.stride()).checked_sub(2).filter(|&k| k > 0).ok_or_else(|| {
        Error::Init(format!("template size {} too small for the 3x3 head transform", track.template_size))
    })?;
    model.head.cls.template = signed_selector(c, dims, |g| SIGN_GROUPS[g].0);
    model.head.cls.search = signed_selector(c, dims, |g| SIGN_GROUPS[g].1);
    model.head.reg.template = ConvBlockParams::identity(c, 3, BlockActivation::Relu);
    model.head.reg.search = ConvBlockParams::identity(c, 3, BlockActivation::Relu);
    let w = preset.temperature / (dims * k * k) as f32;
    model.head.cls.out_kernel = Tensor::from_fn([2, c, 1, 1], |o, i, _, _| {
        let g = i / dims;
        if g >= 4 {
            return 0.0;
        }
        let v = w * SIGN_GROUPS[g].2;
        if o == 0 {
            v
        } else {
            -v
        }
    });
    let b = preset.temperature * preset.threshold;
    model.head.cls.out_bias = vec![-b, b];
    model.head.reg.out_kernel = Tensor::zeros([4, c, 1, 1]);
    let half = track.search_size as f32 / 8.0;
    model.head.reg.out_bias = vec![(half / arch.stride() as f32).ln(); 4];
    model.tiam.nl.project_out.bn.gamma.fill(0.0);
    model.tiam.nl.project_out.bn.beta.fill(0.0);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_deterministic_and_round_trips() {
        let arch = ModelArch::default();
        let a = init_weights(&arch, 9).unwrap();
        assert_eq!(a, init_weights(&arch, 9).unwrap());
        assert_ne!(a, init_weights(&arch, 10).unwrap());
        let m = Model::from_weights(&a, &arch, TiamFlags::default()).unwrap();
        assert_eq!(m.to_weights().unwrap(), a);
    }

    #[test]
    fn fusion_weights_are_optional() {
        let arch = ModelArch::default();
        let mut w = init_weights(&arch, 1).unwrap();
        w.remove_prefix("dfm/");
        assert!(Model::from_weights(&w, &arch, TiamFlags::default()).unwrap().dfm.is_none());
    }

    #[test]
    fn unknown_weight_is_rejected() {
        let arch = ModelArch::default();
        let mut w = init_weights(&arch, 1).unwrap();
        w.insert("stray", crate::weights::WeightArray::vector(vec![1.0])).unwrap();
        assert!(Model::from_weights(&w, &arch, TiamFlags::default()).is_err());
    }

    #[test]
    fn calibration_standardizes_first_layer() {
        let arch = ModelArch::default();
        let mut m = init_model(&arch, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn([1, 3, 32, 32], |_, _, _, _| rng.gen_range(0.0..255.0)))
            .collect();
        calibrate_backbone(&mut m.backbone, &imgs).unwrap();
        let l = &m.backbone.layers[0].block;
        let y = conv2d(&imgs[0], &l.kernel, &l.bias, 2, 1).unwrap();
        let y = crate::tensor::batchnorm_inference(&y, &l.bn.mean, &l.bn.var, &l.bn.gamma, &l.bn.beta, BATCHNORM_EPS).unwrap();
        let mean: f32 = y.plane(0, 0).iter().sum::<f32>() / y.plane_len() as f32;
        assert!(mean.abs() < 0.5, "{mean}");
    }
}
