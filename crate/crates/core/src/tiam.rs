//! Temporal aggregation between the current and the previous search frame.
//!
//! Classification and regression clues are pulled apart with channel
//! attention computed from the current frame, differenced against the
//! previous frame, recombined, and used as query/key of a non-local block
//! whose values are the raw current features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    apply_attention, channel_attention, conv_block, non_local, AttentionParams, BlockActivation,
    ConvBlockParams, NonLocalParams,
};
use crate::error::{Error, Result};
use crate::tensor::{activation, concat_channels, elementwise, Activation, ElementwiseOp, PoolMode, Tensor};
use crate::weights::{ModelWeights, WeightReader};

/// Which of the four highlighted ReLUs are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TiamFlags {
    pub r1: bool,
    pub r2: bool,
    pub r3: bool,
    pub r4: bool,
}

impl Default for TiamFlags {
    fn default() -> Self {
        TiamFlags {
            r1: true,
            r2: true,
            r3: true,
            r4: true,
        }
    }
}

impl TiamFlags {
    /// The eight ablation rows: every combination with `r2` held on.
    pub fn ablation_matrix() -> Vec<TiamFlags> {
        (0..8u8)
            .map(|bits| TiamFlags {
                r1: bits & 1 != 0,
                r2: true,
                r3: bits & 2 != 0,
                r4: bits & 4 != 0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TiamArch {
    pub attention_reduction: usize,
    pub attention_pooling: PoolMode,
    pub nl_inner_channels: usize,
}

impl Default for TiamArch {
    fn default() -> Self {
        TiamArch {
            attention_reduction: 4,
            attention_pooling: PoolMode::Max,
            nl_inner_channels: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiamParams {
    pub conv2: ConvBlockParams,
    pub conv4: ConvBlockParams,
    pub cr1: ConvBlockParams,
    pub cr2: ConvBlockParams,
    pub cr3: ConvBlockParams,
    pub attn_cls: AttentionParams,
    pub attn_reg: AttentionParams,
    pub nl: NonLocalParams,
    flags: TiamFlags,
}

impl TiamParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        conv2: ConvBlockParams,
        conv4: ConvBlockParams,
        cr1: ConvBlockParams,
        cr2: ConvBlockParams,
        cr3: ConvBlockParams,
        attn_cls: AttentionParams,
        attn_reg: AttentionParams,
        nl: NonLocalParams,
        flags: TiamFlags,
    ) -> Result<Self> {
        let c = conv2.out_channels();
        let chained = conv2.in_channels() == c
            && conv4.in_channels() == c
            && conv4.out_channels() == c
            && cr1.in_channels() == c
            && cr2.in_channels() == cr1.out_channels()
            && cr2.out_channels() == c
            && cr3.in_channels() == 2 * c
            && attn_cls.channels() == c
            && attn_reg.channels() == c
            && nl.embed_q.in_channels() == cr3.out_channels()
            && nl.embed_v.in_channels() == c;
        if !chained {
            return Err(Error::shape("temporal module channel counts do not chain"));
        }
        let mut p = TiamParams {
            conv2,
            conv4,
            cr1,
            cr2,
            cr3,
            attn_cls,
            attn_reg,
            nl,
            flags: TiamFlags::default(),
        };
        p.set_flags(flags)?;
        Ok(p)
    }

    pub fn flags(&self) -> TiamFlags {
        self.flags
    }

    /// Switches the R1..R4 activations. `r2` must stay enabled.
    pub fn set_flags(&mut self, flags: TiamFlags) -> Result<()> {
        if !flags.r2 {
            return Err(Error::param("the second difference activation (R2) cannot be disabled"));
        }
        self.cr1.activation = BlockActivation::relu_if(flags.r1);
        self.cr2.activation = BlockActivation::relu_if(flags.r2);
        self.cr3.activation = BlockActivation::relu_if(flags.r3);
        self.flags = flags;
        Ok(())
    }

    pub fn load(reader: &mut WeightReader<'_>, channels: usize, arch: &TiamArch, flags: TiamFlags) -> Result<Self> {
        let c = channels;
        let relu = BlockActivation::Relu;
        TiamParams::new(
            ConvBlockParams::load(reader, "tiam/conv2", [c, c, 3, 3], relu)?,
            ConvBlockParams::load(reader, "tiam/conv4", [c, c, 3, 3], relu)?,
            ConvBlockParams::load(reader, "tiam/cr1", [c, c, 3, 3], relu)?,
            ConvBlockParams::load(reader, "tiam/cr2", [c, c, 3, 3], relu)?,
            ConvBlockParams::load(reader, "tiam/cr3", [c, 2 * c, 1, 1], relu)?,
            AttentionParams::load(reader, "tiam/attn_cls", c, arch.attention_reduction, arch.attention_pooling)?,
            AttentionParams::load(reader, "tiam/attn_reg", c, arch.attention_reduction, arch.attention_pooling)?,
            NonLocalParams::load(reader, "tiam/nl", c, c, arch.nl_inner_channels)?,
            flags,
        )
    }

    pub fn export(&self, weights: &mut ModelWeights) -> Result<()> {
        self.conv2.export(weights, "tiam/conv2")?;
        self.conv4.export(weights, "tiam/conv4")?;
        self.cr1.export(weights, "tiam/cr1")?;
        self.cr2.export(weights, "tiam/cr2")?;
        self.cr3.export(weights, "tiam/cr3")?;
        self.attn_cls.export(weights, "tiam/attn_cls")?;
        self.attn_reg.export(weights, "tiam/attn_reg")?;
        self.nl.export(weights, "tiam/nl")
    }
}

/// Neck output of one search frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub raw: Tensor,
    pub frame_index: usize,
}

/// Splits `feat` into classification and regression clues, using attention
/// vectors computed from `attn_source` (always the current frame).
pub fn decouple(feat: &FrameFeatures, attn_source: &FrameFeatures, params: &TiamParams) -> Result<(Tensor, Tensor)> {
    if feat.raw.shape() != attn_source.raw.shape() {
        return Err(Error::shape(format!(
            "cannot decouple {:?} with attention from {:?}",
            feat.raw.shape(),
            attn_source.raw.shape()
        )));
    }
    let src_cls = conv_block(&attn_source.raw, &params.conv2, 1, 1)?;
    let src_reg = conv_block(&attn_source.raw, &params.conv4, 1, 1)?;
    let a_cls = channel_attention(&src_cls, &params.attn_cls)?;
    let a_reg = channel_attention(&src_reg, &params.attn_reg)?;
    let (cls, reg) = if std::ptr::eq(feat, attn_source) {
        (src_cls, src_reg)
    } else {
        (
            conv_block(&feat.raw, &params.conv2, 1, 1)?,
            conv_block(&feat.raw, &params.conv4, 1, 1)?,
        )
    };
    Ok((apply_attention(&cls, &a_cls)?, apply_attention(&reg, &a_reg)?))
}

/// `CR2(CR1(x_t) - CR1(x_p))`.
pub fn diff(x_t: &Tensor, x_p: &Tensor, params: &TiamParams) -> Result<Tensor> {
    if x_t.shape() != x_p.shape() {
        return Err(Error::shape(format!(
            "difference between {:?} and {:?}",
            x_t.shape(),
            x_p.shape()
        )));
    }
    let a = conv_block(x_t, &params.cr1, 1, 1)?;
    let b = conv_block(x_p, &params.cr1, 1, 1)?;
    conv_block(&elementwise(&a, &b, ElementwiseOp::Sub)?, &params.cr2, 1, 1)
}

/// Every intermediate of one temporal-module pass.
#[derive(Clone, Debug)]
pub struct TiamTrace {
    pub cls_t: Tensor,
    pub reg_t: Tensor,
    pub cls_p: Tensor,
    pub reg_p: Tensor,
    pub d_cls: Tensor,
    pub d_reg: Tensor,
    pub qk: Tensor,
    pub pred: Tensor,
}

pub fn tiam_forward_traced(cur: &FrameFeatures, prev: &FrameFeatures, params: &TiamParams) -> Result<TiamTrace> {
    if cur.frame_index < prev.frame_index {
        return Err(Error::param(format!(
            "previous frame {} comes after current frame {}",
            prev.frame_index, cur.frame_index
        )));
    }
    if cur.raw.shape() != prev.raw.shape() {
        return Err(Error::shape(format!(
            "current {:?} and previous {:?} features differ",
            cur.raw.shape(),
            prev.raw.shape()
        )));
    }
    let (cls_t, reg_t) = decouple(cur, cur, params)?;
    let (cls_p, reg_p) = decouple(prev, cur, params)?;
    let d_cls = diff(&cls_t, &cls_p, params)?;
    let d_reg = diff(&reg_t, &reg_p, params)?;
    // both predictions build on the previous frame's classification clue
    let pred_cls = elementwise(&d_cls, &cls_p, ElementwiseOp::Add)?;
    let pred_reg = elementwise(&d_reg, &cls_p, ElementwiseOp::Add)?;
    let qk = conv_block(&concat_channels(&pred_cls, &pred_reg)?, &params.cr3, 1, 0)?;
    let mut pred = non_local(&qk, &cur.raw, &params.nl)?;
    if params.flags.r4 {
        pred = activation(&pred, Activation::Relu)?;
    }
    Ok(TiamTrace {
        cls_t,
        reg_t,
        cls_p,
        reg_p,
        d_cls,
        d_reg,
        qk,
        pred,
    })
}

/// Enhanced current-frame features; same shape as `cur.raw`.
pub fn tiam_forward(cur: &FrameFeatures, prev: &FrameFeatures, params: &TiamParams) -> Result<Tensor> {
    Ok(tiam_forward_traced(cur, prev, params)?.pred)
}

/// Largest gap between a search frame and its extra previous frame.
pub const MAX_PREVIOUS_GAP: usize = 5;

/// Previous-frame index drawn uniformly from the five frames before `search_idx`.
pub fn sample_previous_index(search_idx: usize, rng: &mut impl Rng) -> Result<usize> {
    if search_idx < MAX_PREVIOUS_GAP {
        return Err(Error::Sampling(format!(
            "search frame {search_idx} has fewer than {MAX_PREVIOUS_GAP} predecessors"
        )));
    }
    Ok(search_idx - rng.gen_range(1..=MAX_PREVIOUS_GAP))
}

/// `(template_idx, search_idx, prev_search_idx)` for one training triple.
pub fn sample_training_pair(sequence_len: usize, rng: &mut impl Rng) -> Result<(usize, usize, usize)> {
    if sequence_len <= MAX_PREVIOUS_GAP {
        return Err(Error::Sampling(format!(
            "sequence of {sequence_len} frames is too short (need at least {})",
            MAX_PREVIOUS_GAP + 1
        )));
    }
    let template = rng.gen_range(0..sequence_len);
    let search = rng.gen_range(MAX_PREVIOUS_GAP..sequence_len);
    let prev = sample_previous_index(search, rng)?;
    Ok((template, search, prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ablation_matrix_keeps_r2() {
        let m = TiamFlags::ablation_matrix();
        assert_eq!(m.len(), 8);
        assert!(m.iter().all(|f| f.r2));
        let unique: std::collections::HashSet<_> = m.iter().collect();
        assert_eq!(unique.len(), 8);
    }

    #[test]
    fn previous_index_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_previous_index(10, &mut rng).unwrap();
            assert!((5..=9).contains(&p));
            let p = sample_previous_index(5, &mut rng).unwrap();
            assert!(p <= 4);
        }
        assert!(matches!(sample_previous_index(4, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn all_offsets_observed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = [0usize; 5];
        for _ in 0..10_000 {
            let p = sample_previous_index(10, &mut rng).unwrap();
            seen[10 - p - 1] += 1;
        }
        assert!(seen.iter().all(|&n| n > 1500), "{seen:?}");
    }

    #[test]
    fn short_sequences_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_training_pair(5, &mut rng).is_err());
        for _ in 0..100 {
            let (t, s, p) = sample_training_pair(6, &mut rng).unwrap();
            assert!(t < 6 && s == 5 && p < 5);
        }
    }
}
