//! Binary gait silhouettes: frame/sequence types, region-wise morphology for
//! cloth augmentation, a procedural walker generator, and on-disk PGM storage.

mod io;
mod morph;
mod synth;

pub use io::{read_dataset, write_dataset, ManifestEntry};
pub use morph::{cloth_augment, dilate, erode, AugmentConfig, AugmentOp, Kernel, MorphOp, Region};
pub use synth::{generate_dataset, Range, SynthSpec};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const HEIGHT: usize = 64;
pub const WIDTH: usize = 44;

/// A single binary silhouette frame, 64 rows by 44 columns, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Silhouette {
    bits: Vec<u8>,
}

impl Silhouette {
    pub fn empty() -> Self {
        Silhouette { bits: vec![0; HEIGHT * WIDTH] }
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.len() != HEIGHT * WIDTH {
            return Err(Error::Geometry(format!(
                "expected {} cells, got {}",
                HEIGHT * WIDTH,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("pixels", "values must be 0 or 1"));
        }
        Ok(Silhouette { bits })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * WIDTH + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.bits[row * WIDTH + col] = if v != 0 { 1 } else { 0 };
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn on_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Paint a filled axis-aligned box, clipped to the frame.
    pub fn fill_rect(&mut self, r0: f64, r1: f64, c0: f64, c1: f64) {
        let rs = r0.floor().max(0.0) as usize;
        let re = (r1.ceil() as usize).min(HEIGHT);
        let cs = c0.floor().max(0.0) as usize;
        let ce = (c1.ceil() as usize).min(WIDTH);
        for r in rs..re {
            for c in cs..ce {
                self.bits[r * WIDTH + c] = 1;
            }
        }
    }

    /// Paint a filled ellipse centered at (row, col) with the given semi-axes.
    pub fn fill_ellipse(&mut self, row: f64, col: f64, rr: f64, rc: f64) {
        if rr <= 0.0 || rc <= 0.0 {
            return;
        }
        let rs = ((row - rr).floor().max(0.0)) as usize;
        let re = (((row + rr).ceil()) as usize).min(HEIGHT);
        let cs = ((col - rc).floor().max(0.0)) as usize;
        let ce = (((col + rc).ceil()) as usize).min(WIDTH);
        for r in rs..re {
            for c in cs..ce {
                let dr = (r as f64 + 0.5 - row) / rr;
                let dc = (c as f64 + 0.5 - col) / rc;
                if dr * dr + dc * dc <= 1.0 {
                    self.bits[r * WIDTH + c] = 1;
                }
            }
        }
    }
}

/// Walking condition of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "NM")]
    Nm,
    #[serde(rename = "BG")]
    Bg,
    #[serde(rename = "CL")]
    Cl,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Nm => "NM",
            Condition::Bg => "BG",
            Condition::Cl => "CL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "NM" => Ok(Condition::Nm),
            "BG" => Ok(Condition::Bg),
            "CL" => Ok(Condition::Cl),
            other => Err(Error::invalid("condition", format!("unknown condition `{other}`"))),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An ordered silhouette frame stack with identity/condition/view metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitSequence {
    pub seq_id: String,
    pub subject_id: u32,
    pub condition: Condition,
    pub view_deg: u16,
    pub frames: Vec<Silhouette>,
}

impl GaitSequence {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("frames", "sequence has no frames"));
        }
        if self.view_deg > 180 {
            return Err(Error::invalid("view_deg", "must be in [0, 180]"));
        }
        Ok(())
    }
}
