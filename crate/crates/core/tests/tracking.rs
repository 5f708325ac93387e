//! Temporal module and tracking-loop behaviour on small models and rendered
//! sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taat::bench::{preset_model, render_sequence, GenSpec, RenderedSequence, Scheme};
use taat::blocks::{BatchNorm, BlockActivation, ConvBlockParams};
use taat::dfm;
use taat::model::{init_model, Model, ModelArch, PresetConfig};
use taat::oracle;
use taat::pipeline::{crop_resize, track_sequence, FusionMode, Modality, TrackConfig, TrackerState};
use taat::siamese::{extract_features, head_forward, BackboneArch, BoundingBox};
use taat::tensor::{self, ElementwiseOp, Matrix, Tensor};
use taat::tiam::{decouple, diff, tiam_forward, tiam_forward_traced, FrameFeatures, TiamArch, TiamFlags, TiamParams};
use taat::Error;

fn small_arch() -> ModelArch {
    ModelArch {
        backbone: BackboneArch {
            input_channels: 3,
            channels: vec![8, 8],
            strides: vec![2, 1],
            neck_channels: 8,
        },
        tiam: TiamArch {
            nl_inner_channels: 4,
            ..TiamArch::default()
        },
        ..ModelArch::default()
    }
}

fn features(rng: &mut ChaCha8Rng, c: usize, s: usize, index: usize) -> FrameFeatures {
    FrameFeatures {
        raw: Tensor::from_fn([1, c, s, s], |_, _, _, _| rng.gen_range(-1.0..1.0)),
        frame_index: index,
    }
}

fn perturb_block(b: &mut ConvBlockParams, rng: &mut ChaCha8Rng) {
    for v in b.bias.iter_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    let c = b.bias.len();
    b.bn = BatchNorm {
        mean: (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
        gamma: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect(),
    };
}

/// Temporal-module parameters with non-trivial biases and batch-norm.
fn random_tiam(seed: u64) -> TiamParams {
    let mut t = init_model(&small_arch(), seed).unwrap().tiam;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for b in [&mut t.conv2, &mut t.conv4, &mut t.cr1, &mut t.cr2, &mut t.cr3] {
        perturb_block(b, &mut rng);
    }
    for b in [&mut t.nl.embed_q, &mut t.nl.embed_k, &mut t.nl.embed_v, &mut t.nl.project_out] {
        perturb_block(b, &mut rng);
    }
    t
}

fn t32(shape: [usize; 4], v: Vec<f64>) -> Tensor {
    Tensor::new(shape, v.into_iter().map(|x| x as f32).collect()).unwrap()
}

/// The temporal module composed from the naive reference primitives.
fn reference_tiam(cur: &Tensor, prev: &Tensor, p: &TiamParams) -> Vec<f64> {
    let shape = cur.shape();
    let block = |x: &Tensor, b: &ConvBlockParams, pad: usize| t32(x.shape(), oracle::conv_block(x, b, 1, pad));
    let attend = |src: &Tensor, other: &Tensor, b: &ConvBlockParams, a: &taat::blocks::AttentionParams| {
        let s = block(src, b, 1);
        let w: Vec<f32> = oracle::channel_attention(&s, a).into_iter().map(|v| v as f32).collect();
        (t32(shape, oracle::apply_attention(&s, &w)), t32(shape, oracle::apply_attention(&block(other, b, 1), &w)))
    };
    let (cls_t, cls_p) = attend(cur, prev, &p.conv2, &p.attn_cls);
    let (reg_t, reg_p) = attend(cur, prev, &p.conv4, &p.attn_reg);
    let difference = |a: &Tensor, b: &Tensor| {
        let d = t32(shape, oracle::elementwise(&block(a, &p.cr1, 1), &block(b, &p.cr1, 1), ElementwiseOp::Sub));
        block(&d, &p.cr2, 1)
    };
    let pred_cls = t32(shape, oracle::elementwise(&difference(&cls_t, &cls_p), &cls_p, ElementwiseOp::Add));
    let pred_reg = t32(shape, oracle::elementwise(&difference(&reg_t, &reg_p), &cls_p, ElementwiseOp::Add));
    let [_, c, h, w] = shape;
    let cat = t32([1, 2 * c, h, w], oracle::concat_channels(&pred_cls, &pred_reg));
    let qk = t32(shape, oracle::conv_block(&cat, &p.cr3, 1, 0));
    let out = oracle::non_local(&qk, cur, &p.nl);
    if p.flags().r4 {
        out.into_iter().map(|v| v.max(0.0)).collect()
    } else {
        out
    }
}

// ---- temporal module ----

#[test]
fn tiam_matches_composed_reference_for_every_flag_setting() {
    for seed in 0..6 {
        for flags in TiamFlags::ablation_matrix() {
            let mut p = random_tiam(seed);
            p.set_flags(flags).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let prev = features(&mut rng, 8, 7, 3);
            let cur = features(&mut rng, 8, 7, 4);
            let got = tiam_forward(&cur, &prev, &p).unwrap();
            let want = reference_tiam(&cur.raw, &prev.raw, &p);
            let err = oracle::max_relative_error(got.data(), &want);
            assert!(err < 1e-4, "seed {seed} {flags:?}: {err}");
        }
    }
}

#[test]
fn identical_frames_give_exactly_zero_differences() {
    // init_model: zero biases and identity batch-norm throughout
    let p = init_model(&small_arch(), 3).unwrap().tiam;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = features(&mut rng, 8, 9, 0);
    let t = tiam_forward_traced(&f, &f, &p).unwrap();
    assert!(t.d_cls.data().iter().all(|&v| v == 0.0));
    assert!(t.d_reg.data().iter().all(|&v| v == 0.0));
    // the prediction reduces to rectified non-local self-enhancement
    let expected = tensor::activation(&taat::blocks::non_local(&t.qk, &f.raw, &p.nl).unwrap(), tensor::Activation::Relu).unwrap();
    assert_eq!(t.pred, expected);

    let x = features(&mut rng, 8, 9, 0).raw;
    assert!(diff(&x, &x, &p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_second_attention_layer_halves_every_channel() {
    let mut p = random_tiam(2);
    p.attn_cls.fc2 = Matrix::zeros(p.attn_cls.fc2.rows, p.attn_cls.fc2.cols);
    p.attn_reg.fc2 = Matrix::zeros(p.attn_reg.fc2.rows, p.attn_reg.fc2.cols);
    let f = features(&mut ChaCha8Rng::seed_from_u64(4), 8, 6, 0);
    let (cls, reg) = decouple(&f, &f, &p).unwrap();
    let half = |b: &ConvBlockParams| taat::blocks::conv_block(&f.raw, b, 1, 1).unwrap().map(|v| v * 0.5);
    assert_eq!(cls, half(&p.conv2));
    assert_eq!(reg, half(&p.conv4));
}

#[test]
fn zero_features_decouple_to_zero() {
    let p = init_model(&small_arch(), 5).unwrap().tiam;
    let f = FrameFeatures {
        raw: Tensor::zeros([1, 8, 6, 6]),
        frame_index: 0,
    };
    let (cls, reg) = decouple(&f, &f, &p).unwrap();
    assert!(cls.data().iter().chain(reg.data()).all(|&v| v == 0.0));
}

#[test]
fn first_difference_rectifier_matters_when_preactivations_go_negative() {
    let mut on = random_tiam(7);
    let mut off = on.clone();
    on.set_flags(TiamFlags { r1: true, ..TiamFlags::default() }).unwrap();
    off.set_flags(TiamFlags { r1: false, ..TiamFlags::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (features(&mut rng, 8, 6, 0).raw, features(&mut rng, 8, 6, 0).raw);
    let pre = taat::blocks::conv_block(&a, &ConvBlockParams { activation: BlockActivation::None, ..on.cr1.clone() }, 1, 1).unwrap();
    assert!(pre.data().iter().any(|&v| v < 0.0));
    assert_ne!(diff(&a, &b, &on).unwrap(), diff(&a, &b, &off).unwrap());
}

#[test]
fn residual_path_survives_a_silenced_non_local_block() {
    let mut p = random_tiam(9);
    p.set_flags(TiamFlags { r4: false, ..TiamFlags::default() }).unwrap();
    for b in [&mut p.nl.embed_v, &mut p.nl.project_out] {
        b.kernel = Tensor::zeros(b.kernel.shape());
        b.bias.iter_mut().for_each(|v| *v = 0.0);
        b.bn = BatchNorm::identity(b.bias.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let prev = features(&mut rng, 8, 6, 0);
    let cur = features(&mut rng, 8, 6, 1);
    assert_eq!(tiam_forward(&cur, &prev, &p).unwrap(), cur.raw);
}

#[test]
fn tiam_is_deterministic_and_shape_preserving() {
    let p = random_tiam(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let prev = features(&mut rng, 8, 10, 2);
    let cur = features(&mut rng, 8, 10, 5);
    let a = tiam_forward(&cur, &prev, &p).unwrap();
    let b = tiam_forward(&cur, &prev, &p).unwrap();
    assert_eq!(a.shape(), cur.raw.shape());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn second_difference_rectifier_cannot_be_disabled() {
    let mut p = random_tiam(13);
    let off = TiamFlags { r2: false, ..TiamFlags::default() };
    assert!(p.set_flags(off).is_err());
    let c = p.clone();
    assert!(TiamParams::new(c.conv2, c.conv4, c.cr1, c.cr2, c.cr3, c.attn_cls, c.attn_reg, c.nl, off).is_err());
    let cfg = TrackConfig {
        tiam_flags: off,
        ..TrackConfig::default()
    };
    assert!(matches!(cfg.validate(8), Err(Error::Config(_))));
}

// ---- tracking loop ----

fn sequence(frames: usize, seed: u64, max_speed: f64) -> RenderedSequence {
    let spec = GenSpec {
        seed,
        frames,
        max_speed,
        ..GenSpec::default()
    };
    render_sequence(&spec, &Scheme::clean()).unwrap()
}

fn preset() -> Model {
    preset_model(&ModelArch::default(), &PresetConfig::default(), &TrackConfig::default(), 1).unwrap()
}

fn single(modality: Modality) -> TrackConfig {
    TrackConfig {
        modality,
        ..TrackConfig::default()
    }
}

fn replicate(t: Tensor) -> Tensor {
    let [_, c, h, w] = t.shape();
    if c == 3 {
        return t;
    }
    Tensor::from_fn([1, 3, h, w], |_, _, y, x| t.at(0, 0, y, x))
}

#[test]
fn template_is_never_touched_by_tracking() {
    let model = init_model(&ModelArch::default(), 21).unwrap();
    let seq = sequence(101, 3, 2.5);
    let (rgb, tir) = seq.frame(0);
    let mut state = TrackerState::init(&model, &TrackConfig::default(), &rgb, &tir, &seq.gt[0]).unwrap();
    let before = [state.rgb.clone().unwrap().template_feat, state.tir.clone().unwrap().template_feat];
    for i in 1..101 {
        let (rgb, tir) = seq.frame(i);
        state.track(&model, &rgb, &tir).unwrap();
    }
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&state.rgb.unwrap().template_feat), bits(&before[0]));
    assert_eq!(bits(&state.tir.unwrap().template_feat), bits(&before[1]));
}

#[test]
fn cached_features_are_the_previous_step_current_features() {
    let model = init_model(&ModelArch::default(), 22).unwrap();
    let seq = sequence(12, 4, 2.5);
    for modality in [Modality::Rgb, Modality::Tir] {
        let cfg = single(modality);
        let (rgb, tir) = seq.frame(0);
        let mut state = TrackerState::init(&model, &cfg, &rgb, &tir, &seq.gt[0]).unwrap();
        for i in 1..12 {
            let (rgb, tir) = seq.frame(i);
            let ms = if modality == Modality::Rgb { state.rgb.clone() } else { state.tir.clone() }.unwrap();
            let cached = ms.prev_feat.clone();
            assert_eq!(cached.frame_index, i - 1);
            let prev = state.prev_box;
            let frame = if modality == Modality::Rgb { &rgb } else { &tir };
            let crop = replicate(crop_resize(frame, prev.cx, prev.cy, cfg.search_side(&prev), cfg.search_size).unwrap());
            let current = FrameFeatures {
                raw: extract_features(&crop, &model.backbone).unwrap(),
                frame_index: i,
            };
            let expected = head_forward(&ms.template_feat, &tiam_forward(&current, &cached, &model.tiam).unwrap(), &model.head).unwrap();
            let out = state.track(&model, &rgb, &tir).unwrap();
            assert_eq!(out.response, expected, "{modality:?} frame {i}");
            let after = if modality == Modality::Rgb { state.rgb.as_ref() } else { state.tir.as_ref() }.unwrap();
            assert_eq!(after.prev_feat, current);
        }
    }
}

#[test]
fn trajectories_are_bit_identical_across_runs() {
    let model = init_model(&ModelArch::default(), 23).unwrap();
    let seq = sequence(30, 5, 2.5);
    let run = || {
        let frames = seq.frames().into_iter().map(Ok);
        track_sequence(&model, &TrackConfig::default(), frames, &seq.gt[0]).unwrap()
    };
    let bits = |r: &[(BoundingBox, f64)]| {
        r.iter()
            .flat_map(|(b, c)| [b.cx, b.cy, b.w, b.h, *c].map(f64::to_bits))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&run()), bits(&run()));
}

#[test]
fn single_modality_modes_need_no_fusion_weights() {
    let mut model = init_model(&ModelArch::default(), 24).unwrap();
    model.dfm = None;
    let seq = sequence(10, 6, 2.5);
    let (rgb, tir) = seq.frame(0);
    for modality in [Modality::Rgb, Modality::Tir] {
        let mut s = TrackerState::init(&model, &single(modality), &rgb, &tir, &seq.gt[0]).unwrap();
        assert_eq!(s.rgb.is_some(), modality == Modality::Rgb);
        assert_eq!(s.tir.is_some(), modality == Modality::Tir);
        for i in 1..10 {
            let (r, t) = seq.frame(i);
            let out = s.track(&model, &r, &t).unwrap();
            assert!(out.weight_map.is_none());
        }
    }
    let rgbt = TrackerState::init(&model, &TrackConfig::default(), &rgb, &tir, &seq.gt[0]);
    assert!(matches!(rgbt, Err(Error::Init(_))));
    let average = TrackConfig {
        fusion: FusionMode::Average,
        ..TrackConfig::default()
    };
    assert!(TrackerState::init(&model, &average, &rgb, &tir, &seq.gt[0]).is_ok());
}

#[test]
fn degenerate_initial_box_is_rejected() {
    let model = init_model(&ModelArch::default(), 25).unwrap();
    let seq = sequence(10, 7, 2.5);
    let (rgb, tir) = seq.frame(0);
    for b in [BoundingBox::new(50.0, 50.0, 0.0, 10.0), BoundingBox::new(50.0, 50.0, 10.0, -1.0)] {
        assert!(matches!(TrackerState::init(&model, &TrackConfig::default(), &rgb, &tir, &b), Err(Error::Init(_))));
    }
    let a = TrackerState::init(&model, &TrackConfig::default(), &rgb, &tir, &seq.gt[0]).unwrap();
    let b = TrackerState::init(&model, &TrackConfig::default(), &rgb, &tir, &seq.gt[0]).unwrap();
    assert_eq!(a.rgb, b.rgb);
    assert_eq!(a.tir, b.tir);
}

#[test]
fn baseline_configuration_averages_raw_head_responses() {
    let model = init_model(&ModelArch::default(), 26).unwrap();
    let seq = sequence(10, 8, 2.5);
    let baseline = TrackConfig {
        fusion: FusionMode::Average,
        tiam: false,
        ..TrackConfig::default()
    };
    let (rgb, tir) = seq.frame(0);
    let mut state = TrackerState::init(&model, &baseline, &rgb, &tir, &seq.gt[0]).unwrap();
    let mut full = TrackerState::init(&model, &TrackConfig::default(), &rgb, &tir, &seq.gt[0]).unwrap();
    let prev = state.prev_box;
    let (rgb, tir) = seq.frame(1);
    let respond = |frame: &Tensor, template: &Tensor| {
        let crop = replicate(crop_resize(frame, prev.cx, prev.cy, baseline.search_side(&prev), baseline.search_size).unwrap());
        head_forward(template, &extract_features(&crop, &model.backbone).unwrap(), &model.head).unwrap()
    };
    let r = respond(&rgb, &state.rgb.as_ref().unwrap().template_feat);
    let t = respond(&tir, &state.tir.as_ref().unwrap().template_feat);
    let expected = dfm::average_fusion(&r, &t).unwrap().into_response().unwrap();
    let out = state.track(&model, &rgb, &tir).unwrap();
    assert_eq!(out.response, expected);
    assert!(out.weight_map.unwrap().data().iter().all(|&w| w == 0.5));
    let other = full.track(&model, &rgb, &tir).unwrap();
    assert_ne!(other.response, out.response);
}

#[test]
fn every_ablation_row_tracks() {
    let model = init_model(&ModelArch::default(), 27).unwrap();
    let seq = sequence(10, 9, 2.5);
    let mut trajectories = Vec::new();
    for flags in TiamFlags::ablation_matrix() {
        let cfg = TrackConfig {
            tiam_flags: flags,
            ..TrackConfig::default()
        };
        let frames = seq.frames().into_iter().map(Ok);
        let r = track_sequence(&model, &cfg, frames, &seq.gt[0]).unwrap();
        assert_eq!(r.len(), 10);
        trajectories.push(r);
    }
    for i in 0..trajectories.len() {
        for j in i + 1..trajectories.len() {
            assert_ne!(trajectories[i], trajectories[j], "rows {i} and {j}");
        }
    }
}

#[test]
fn preset_localizes_a_stationary_target() {
    let model = preset();
    let cfg = TrackConfig::default();
    let cell = |b: &BoundingBox| cfg.search_side(b) / cfg.search_size as f64 * model.backbone.total_stride() as f64;
    for seed in 0..3 {
        let seq = sequence(11, 40 + seed, 0.0);
        let (rgb, tir) = seq.frame(0);
        let mut state = TrackerState::init(&model, &cfg, &rgb, &tir, &seq.gt[0]).unwrap();
        for i in 1..11 {
            let (rgb, tir) = seq.frame(i);
            let prev = state.prev_box;
            let out = state.track(&model, &rgb, &tir).unwrap();
            let err = out.bbox.center_distance(&seq.gt[i]);
            assert!(err <= cell(&prev), "seed {seed} frame {i}: {err} px");
            assert!(out.confidence > 0.0 && out.confidence < 1.0);
        }
    }
}
