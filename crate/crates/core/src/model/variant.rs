use std::fmt;
use std::str::FromStr;

use crate::error::{spec_err, Error, Result};

/// The four network variants of the structural ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// C3 blocks, heads at strides 8/16/32.
    Yolov5s,
    /// BottleneckCSP blocks, heads at strides 8/16/32.
    Yolov5One,
    /// BottleneckCSP blocks plus the stride-4 tiny-target head.
    Yolov5Two,
    /// Yolov5Two with ghost convolutions in backbone and neck.
    Gbh,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Yolov5s,
        Architecture::Yolov5One,
        Architecture::Yolov5Two,
        Architecture::Gbh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Yolov5s => "yolov5s",
            Architecture::Yolov5One => "yolov5-1",
            Architecture::Yolov5Two => "yolov5-2",
            Architecture::Gbh => "gbh",
        }
    }

    /// Stable numeric code stored in checkpoints.
    pub fn code(self) -> u8 {
        match self {
            Architecture::Yolov5s => 0,
            Architecture::Yolov5One => 1,
            Architecture::Yolov5Two => 2,
            Architecture::Gbh => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == code)
    }

    pub fn head_strides(self) -> &'static [usize] {
        match self {
            Architecture::Yolov5s | Architecture::Yolov5One => &[8, 16, 32],
            Architecture::Yolov5Two | Architecture::Gbh => &[4, 8, 16, 32],
        }
    }

    pub fn uses_csp(self) -> bool {
        self != Architecture::Yolov5s
    }

    pub fn uses_ghost(self) -> bool {
        self == Architecture::Gbh
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| spec_err(format!("unknown variant `{s}` (expected yolov5s, yolov5-1, yolov5-2 or gbh)")))
    }
}

/// Anchors per detection head.
pub const ANCHORS_PER_HEAD: usize = 3;

/// Anchor `(w, h)` triple of one head, in input pixels.
pub type HeadAnchors = [[f32; 2]; ANCHORS_PER_HEAD];

/// Fallback anchor shapes in grid-cell units; a head at stride `s` uses
/// these times `s` (at stride 8 this is the lineage's 10x13, 16x30, 33x23).
pub const FALLBACK_ANCHOR_CELLS: HeadAnchors = [[1.25, 1.625], [2.0, 3.75], [4.125, 2.875]];

pub fn fallback_anchors(strides: &[usize]) -> Vec<HeadAnchors> {
    strides
        .iter()
        .map(|&s| FALLBACK_ANCHOR_CELLS.map(|[w, h]| [w * s as f32, h * s as f32]))
        .collect()
}

/// A buildable network description: architecture plus scaling multiples,
/// input size, class count and per-head anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVariant {
    pub arch: Architecture,
    pub depth_multiple: f64,
    pub width_multiple: f64,
    pub input_size: usize,
    pub num_classes: usize,
    /// One anchor triple per head, fine to coarse.
    pub anchors: Vec<HeadAnchors>,
}

impl ModelVariant {
    /// Default scale: depth 1/3, width 1/2, input 960, five classes.
    pub fn new(arch: Architecture) -> Self {
        Self::scaled(arch, 1.0 / 3.0, 0.5, 960)
    }

    /// Desk-scale profile: depth 1/3, width 1/8, input 192.
    pub fn tiny(arch: Architecture) -> Self {
        Self::scaled(arch, 1.0 / 3.0, 0.125, 192)
    }

    pub fn scaled(arch: Architecture, depth: f64, width: f64, input_size: usize) -> Self {
        Self {
            arch,
            depth_multiple: depth,
            width_multiple: width,
            input_size,
            num_classes: 5,
            anchors: fallback_anchors(arch.head_strides()),
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn with_anchors(mut self, anchors: Vec<HeadAnchors>) -> Self {
        self.anchors = anchors;
        self
    }

    pub fn with_num_classes(mut self, nc: usize) -> Self {
        self.num_classes = nc;
        self
    }

    pub fn head_strides(&self) -> &'static [usize] {
        self.arch.head_strides()
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.head_strides().iter().map(|s| self.input_size / s).collect()
    }

    /// Channels per head output: anchors * (box 4 + objectness 1 + classes).
    pub fn head_channels(&self) -> usize {
        ANCHORS_PER_HEAD * (5 + self.num_classes)
    }

    /// `max(round(n * depth), 1)` for `n > 1`, otherwise `n`.
    pub fn repeats(&self, n: usize) -> usize {
        if n > 1 {
            ((n as f64 * self.depth_multiple).round() as usize).max(1)
        } else {
            n
        }
    }

    /// Channel count rounded up to a multiple of 8 after width scaling.
    pub fn channels(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiple / 8.0).ceil() as usize * 8).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.depth_multiple) || !ok(self.width_multiple) {
            return Err(spec_err(format!(
                "multiples must be positive (depth {}, width {})",
                self.depth_multiple, self.width_multiple
            )));
        }
        if (self.width_multiple * 64.0) < 1.0 {
            return Err(spec_err(format!(
                "width multiple {} leaves the stem with zero channels",
                self.width_multiple
            )));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(spec_err(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(spec_err("num_classes must be >= 1"));
        }
        let heads = self.head_strides().len();
        if self.anchors.len() != heads {
            return Err(spec_err(format!(
                "{} expects {heads} anchor sets, got {}",
                self.arch,
                self.anchors.len()
            )));
        }
        if self
            .anchors
            .iter()
            .flatten()
            .any(|&[w, h]| !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0))
        {
            return Err(spec_err("anchor extents must be positive"));
        }
        Ok(())
    }
}
