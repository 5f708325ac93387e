//! Synthetic two-modality benchmark: sequence generation, manifests and
//! the one-pass and reset evaluation protocols.

mod generate;
mod manifest;
mod metrics;
mod report;
mod vot;

pub use generate::{generate_sequence, render_sequence, Degradation, GenSpec, RenderedSequence, Scheme};
pub use manifest::{FrameEntry, Sequence, SequenceManifest};
pub use metrics::{auc_thresholds, iou, precision, success, AUC_STEPS, DEFAULT_PRECISION_THRESHOLD, DEFAULT_SUCCESS_THRESHOLD};
pub use report::{EvalReport, Metrics, Protocol, SequenceEval, SequenceReport};
pub use vot::{expected_average_overlap, vot_eval, ReplayTracker, ResetTracker, Segment, VotResult, DEFAULT_SKIP};

use crate::error::{Error, Result};
use crate::model::{matching_preset, Model, ModelArch, PresetConfig};
use crate::pipeline::{calibration_crops, TrackConfig, TrackerState};
use crate::siamese::BoundingBox;

/// Clean sequences rendered for batch-norm calibration.
pub const CALIBRATION_SEQUENCES: u64 = 8;
/// Frames of each calibration sequence that contribute crops.
pub const CALIBRATION_FRAMES: [usize; 3] = [0, 20, 40];

/// The matching preset calibrated on freshly rendered clean sequences, so a
/// usable untrained tracker needs nothing but a seed.
pub fn preset_model(arch: &ModelArch, preset: &PresetConfig, track: &TrackConfig, seed: u64) -> Result<Model> {
    arch.validate()?;
    track.validate(arch.stride())?;
    let mut images = Vec::new();
    for index in 0..CALIBRATION_SEQUENCES {
        let spec = GenSpec {
            seed,
            index,
            frames: CALIBRATION_FRAMES[CALIBRATION_FRAMES.len() - 1] + 1,
            ..GenSpec::default()
        };
        let seq = render_sequence(&spec, &Scheme::clean())?;
        for &i in &CALIBRATION_FRAMES {
            let (rgb, tir) = seq.frame(i);
            images.extend(calibration_crops(track, &rgb, &tir, &seq.gt[i], arch.backbone.input_channels)?);
        }
    }
    matching_preset(arch, seed, &images, preset, track)
}

/// Runs the tracking pipeline over a loaded sequence, restartable on any
/// frame for the reset protocol.
pub struct SequenceTracker<'a> {
    pub model: &'a Model,
    pub config: &'a TrackConfig,
    pub sequence: &'a Sequence,
    state: Option<TrackerState>,
}

impl<'a> SequenceTracker<'a> {
    pub fn new(model: &'a Model, config: &'a TrackConfig, sequence: &'a Sequence) -> Self {
        SequenceTracker {
            model,
            config,
            sequence,
            state: None,
        }
    }
}

impl ResetTracker for SequenceTracker<'_> {
    fn init(&mut self, frame: usize, gt: &BoundingBox) -> Result<()> {
        let (rgb, tir) = self.sequence.frame(frame)?;
        self.state = Some(TrackerState::init(self.model, self.config, &rgb, &tir, gt)?);
        Ok(())
    }

    fn update(&mut self, frame: usize) -> Result<BoundingBox> {
        let state = self.state.as_mut().ok_or_else(|| Error::Init("tracker used before init".into()))?;
        let (rgb, tir) = self.sequence.frame(frame)?;
        Ok(state.track(self.model, &rgb, &tir)?.bbox)
    }
}
