//! Composite layers: conv + batch-norm + activation blocks, squeeze-and-
//! excitation channel attention, and the embedded-Gaussian non-local block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, batchnorm_inference, conv2d, global_pool, Activation, Matrix, PoolMode, Tensor,
    BATCHNORM_EPS,
};
use crate::weights::{ModelWeights, WeightArray, WeightReader};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlockActivation {
    None,
    Relu,
    LeakyRelu(f32),
}

impl BlockActivation {
    pub fn relu_if(enabled: bool) -> Self {
        if enabled {
            BlockActivation::Relu
        } else {
            BlockActivation::None
        }
    }

    fn as_activation(self) -> Option<Activation> {
        match self {
            BlockActivation::None => None,
            BlockActivation::Relu => Some(Activation::Relu),
            BlockActivation::LeakyRelu(s) => Some(Activation::LeakyRelu(s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl BatchNorm {
    /// Statistics for which inference-mode batch-norm is the identity map.
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            mean: vec![0.0; channels],
            var: vec![1.0 - BATCHNORM_EPS; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams {
    pub kernel: Tensor,
    pub bias: Vec<f32>,
    pub bn: BatchNorm,
    pub activation: BlockActivation,
}

impl ConvBlockParams {
    pub fn new(kernel: Tensor, bias: Vec<f32>, bn: BatchNorm, activation: BlockActivation) -> Result<Self> {
        let cout = kernel.shape()[0];
        let lens = [bias.len(), bn.mean.len(), bn.var.len(), bn.gamma.len(), bn.beta.len()];
        if lens.iter().any(|&l| l != cout) {
            return Err(Error::shape(format!(
                "conv block vectors {lens:?} do not all match kernel output channels {cout}"
            )));
        }
        Ok(ConvBlockParams {
            kernel,
            bias,
            bn,
            activation,
        })
    }

    /// 1-to-1 channel mapping through the centre tap of a `k x k` kernel.
    pub fn identity(channels: usize, k: usize, activation: BlockActivation) -> Self {
        let centre = k / 2;
        let kernel = Tensor::from_fn([channels, channels, k, k], |o, i, y, x| {
            if o == i && y == centre && x == centre {
                1.0
            } else {
                0.0
            }
        });
        ConvBlockParams {
            kernel,
            bias: vec![0.0; channels],
            bn: BatchNorm::identity(channels),
            activation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn load(
        reader: &mut WeightReader<'_>,
        prefix: &str,
        shape: [usize; 4],
        activation: BlockActivation,
    ) -> Result<Self> {
        let c = shape[0];
        let kernel = reader.tensor(&format!("{prefix}/kernel"), shape)?;
        let bias = reader.vector(&format!("{prefix}/bias"), c)?;
        let bn = BatchNorm {
            mean: reader.vector(&format!("{prefix}/bn_mean"), c)?,
            var: reader.vector(&format!("{prefix}/bn_var"), c)?,
            gamma: reader.vector(&format!("{prefix}/bn_gamma"), c)?,
            beta: reader.vector(&format!("{prefix}/bn_beta"), c)?,
        };
        ConvBlockParams::new(kernel, bias, bn, activation)
    }

    pub fn export(&self, weights: &mut ModelWeights, prefix: &str) -> Result<()> {
        weights.insert(format!("{prefix}/kernel"), WeightArray::from_tensor(&self.kernel))?;
        weights.insert(format!("{prefix}/bias"), WeightArray::vector(self.bias.clone()))?;
        weights.insert(format!("{prefix}/bn_mean"), WeightArray::vector(self.bn.mean.clone()))?;
        weights.insert(format!("{prefix}/bn_var"), WeightArray::vector(self.bn.var.clone()))?;
        weights.insert(format!("{prefix}/bn_gamma"), WeightArray::vector(self.bn.gamma.clone()))?;
        weights.insert(format!("{prefix}/bn_beta"), WeightArray::vector(self.bn.beta.clone()))?;
        Ok(())
    }
}

/// `activation(batchnorm(conv(input)))`.
pub fn conv_block(input: &Tensor, params: &ConvBlockParams, stride: usize, padding: usize) -> Result<Tensor> {
    let y = conv2d(input, &params.kernel, &params.bias, stride, padding)?;
    let y = batchnorm_inference(
        &y,
        &params.bn.mean,
        &params.bn.var,
        &params.bn.gamma,
        &params.bn.beta,
        BATCHNORM_EPS,
    )?;
    match params.activation.as_activation() {
        Some(a) => tensor::activation(&y, a),
        None => Ok(y),
    }
}

/// Squeeze-and-excitation weights. With `PoolMode::Max` this is the
/// max-pooled variant used for decoupling temporal clues.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub fc1: Matrix,
    pub fc2: Matrix,
    pub reduction: usize,
    pub pooling: PoolMode,
}

impl AttentionParams {
    pub fn new(fc1: Matrix, fc2: Matrix, reduction: usize, pooling: PoolMode) -> Result<Self> {
        let channels = fc1.cols;
        check_reduction(channels, reduction)?;
        let hidden = channels / reduction;
        if fc1.rows != hidden || fc2.rows != channels || fc2.cols != hidden {
            return Err(Error::shape(format!(
                "attention fc shapes {}x{} / {}x{} inconsistent with {channels} channels at reduction {reduction}",
                fc1.rows, fc1.cols, fc2.rows, fc2.cols
            )));
        }
        Ok(AttentionParams {
            fc1,
            fc2,
            reduction,
            pooling,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.cols
    }

    pub fn load(
        reader: &mut WeightReader<'_>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        pooling: PoolMode,
    ) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let hidden = channels / reduction;
        let fc1 = reader.matrix(&format!("{prefix}/fc1"), hidden, channels)?;
        let fc2 = reader.matrix(&format!("{prefix}/fc2"), channels, hidden)?;
        AttentionParams::new(fc1, fc2, reduction, pooling)
    }

    pub fn export(&self, weights: &mut ModelWeights, prefix: &str) -> Result<()> {
        weights.insert(format!("{prefix}/fc1"), WeightArray::from_matrix(&self.fc1))?;
        weights.insert(format!("{prefix}/fc2"), WeightArray::from_matrix(&self.fc2))?;
        Ok(())
    }
}

pub(crate) fn check_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::param(format!(
            "attention reduction {reduction} does not divide {channels} channels"
        )));
    }
    Ok(())
}

/// `sigmoid(fc2 * relu(fc1 * pool(input)))`, one value per channel.
pub fn channel_attention(input: &Tensor, params: &AttentionParams) -> Result<Vec<f32>> {
    if input.batch() != 1 {
        return Err(Error::shape(format!(
            "channel attention expects a single frame, got {:?}",
            input.shape()
        )));
    }
    check_reduction(input.channels(), params.reduction)?;
    if input.channels() != params.channels() {
        return Err(Error::shape(format!(
            "attention built for {} channels applied to {:?}",
            params.channels(),
            input.shape()
        )));
    }
    let pooled = global_pool(input, params.pooling)?.into_data();
    let hidden: Vec<f32> = params
        .fc1
        .matvec(&pooled)?
        .into_iter()
        .map(|v| Activation::Relu.apply(v))
        .collect();
    Ok(params
        .fc2
        .matvec(&hidden)?
        .into_iter()
        .map(tensor::sigmoid)
        .collect())
}

pub fn apply_attention(input: &Tensor, attn: &[f32]) -> Result<Tensor> {
    if attn.len() != input.channels() {
        return Err(Error::shape(format!(
            "attention vector of length {} for input {:?}",
            attn.len(),
            input.shape()
        )));
    }
    let mut out = input.clone();
    for n in 0..input.batch() {
        for (c, &a) in attn.iter().enumerate() {
            for v in out.plane_mut(n, c) {
                *v *= a;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalParams {
    pub embed_q: ConvBlockParams,
    pub embed_k: ConvBlockParams,
    pub embed_v: ConvBlockParams,
    pub project_out: ConvBlockParams,
}

impl NonLocalParams {
    pub fn new(
        embed_q: ConvBlockParams,
        embed_k: ConvBlockParams,
        embed_v: ConvBlockParams,
        project_out: ConvBlockParams,
    ) -> Result<Self> {
        if embed_q.out_channels() != embed_k.out_channels() {
            return Err(Error::shape(format!(
                "non-local query embeds to {} channels but key to {}",
                embed_q.out_channels(),
                embed_k.out_channels()
            )));
        }
        if project_out.in_channels() != embed_v.out_channels() || project_out.out_channels() != embed_v.in_channels() {
            return Err(Error::shape(format!(
                "non-local projection {:?} does not map value embedding {:?} back",
                project_out.kernel.shape(),
                embed_v.kernel.shape()
            )));
        }
        for block in [&embed_q, &embed_k, &embed_v, &project_out] {
            let [_, _, kh, kw] = block.kernel.shape();
            if (kh, kw) != (1, 1) {
                return Err(Error::shape("non-local embeddings must be 1x1 convolutions"));
            }
        }
        Ok(NonLocalParams {
            embed_q,
            embed_k,
            embed_v,
            project_out,
        })
    }

    pub fn load(reader: &mut WeightReader<'_>, prefix: &str, qk_channels: usize, value_channels: usize, inner: usize) -> Result<Self> {
        let none = BlockActivation::None;
        NonLocalParams::new(
            ConvBlockParams::load(reader, &format!("{prefix}/embed_q"), [inner, qk_channels, 1, 1], none)?,
            ConvBlockParams::load(reader, &format!("{prefix}/embed_k"), [inner, qk_channels, 1, 1], none)?,
            ConvBlockParams::load(reader, &format!("{prefix}/embed_v"), [inner, value_channels, 1, 1], none)?,
            ConvBlockParams::load(reader, &format!("{prefix}/project_out"), [value_channels, inner, 1, 1], none)?,
        )
    }

    pub fn export(&self, weights: &mut ModelWeights, prefix: &str) -> Result<()> {
        self.embed_q.export(weights, &format!("{prefix}/embed_q"))?;
        self.embed_k.export(weights, &format!("{prefix}/embed_k"))?;
        self.embed_v.export(weights, &format!("{prefix}/embed_v"))?;
        self.project_out.export(weights, &format!("{prefix}/project_out"))
    }
}

/// Row-softmaxed similarity between query and key embeddings of `qk`.
pub fn non_local_attention(qk: &Tensor, params: &NonLocalParams) -> Result<Matrix> {
    let q = conv_block(qk, &params.embed_q, 1, 0)?;
    let k = conv_block(qk, &params.embed_k, 1, 0)?;
    let mut s = tensor::flat_similarity(&q, &k)?;
    for row in s.data.chunks_mut(s.cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(s)
}

/// Attention-weighted value embeddings, before the output projection.
pub fn non_local_aggregate(qk: &Tensor, value: &Tensor, params: &NonLocalParams) -> Result<Tensor> {
    let [n, _, h, w] = qk.shape();
    let [vn, _, vh, vw] = value.shape();
    if n != 1 || vn != 1 || (h, w) != (vh, vw) {
        return Err(Error::shape(format!(
            "non-local query/key {:?} and value {:?} must be single frames on the same grid",
            qk.shape(),
            value.shape()
        )));
    }
    let s = non_local_attention(qk, params)?;
    let v = conv_block(value, &params.embed_v, 1, 0)?;
    let c = v.channels();
    let p = h * w;
    let mut agg = vec![0.0f32; c * p];
    // agg[c, i] = sum_j v[c, j] * s[i, j]
    // SAFETY: v holds c*p values, s holds p*p, agg holds c*p.
    unsafe {
        matrixmultiply::sgemm(
            c,
            p,
            p,
            1.0,
            v.data().as_ptr(),
            p as isize,
            1,
            s.data.as_ptr(),
            1,
            p as isize,
            0.0,
            agg.as_mut_ptr(),
            p as isize,
            1,
        );
    }
    Tensor::new([1, c, h, w], agg)
}

/// `project_out(aggregate) + value`.
pub fn non_local(qk: &Tensor, value: &Tensor, params: &NonLocalParams) -> Result<Tensor> {
    let agg = non_local_aggregate(qk, value, params)?;
    let projected = conv_block(&agg, &params.project_out, 1, 0)?;
    tensor::elementwise(&projected, value, tensor::ElementwiseOp::Add)
}
