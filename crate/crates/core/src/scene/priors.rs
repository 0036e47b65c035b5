//! Observed frames and oracle priors consumed by training.

use crate::img::Image;
use nalgebra::Vector2;

/// One sparse 2D pixel trajectory with per-frame visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub pos: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
}

impl Track {
    pub fn always_visible(&self) -> bool {
        self.visible.iter().all(|&v| v)
    }
}

/// Dense optical flow between two frames of the same exposure level,
/// with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPair {
    pub from: usize,
    pub to: usize,
    /// H x W x 2 pixel displacement (dx, dy).
    pub flow: Image,
    /// H x W x 1 binary validity.
    pub valid: Image,
}

/// Per-frame observation: the LDR image and its exposure time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub ldr: Image,
    pub exposure: f64,
}

/// All 2D priors for a video: depths, tracks, flows, dynamic masks and the
/// exposure pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBundle {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    /// Metric depth maps, H x W x 1.
    pub depths: Vec<Image>,
    pub tracks: Vec<Track>,
    pub flows: Vec<FlowPair>,
    /// Binary dynamic masks, H x W x 1 (1 = dynamic).
    pub masks: Vec<Image>,
    pub exposures: Vec<f64>,
}

impl PriorBundle {
    pub fn flow_between(&self, from: usize, to: usize) -> Option<&FlowPair> {
        self.flows.iter().find(|f| f.from == from && f.to == to)
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        if self.n_frames <= 1 {
            0.0
        } else {
            i as f64 / (self.n_frames - 1) as f64
        }
    }
}
