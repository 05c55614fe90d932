//! Binary morphology restricted to row bands, used for cloth augmentation.
//!
//! Pixels outside the frame count as background (zero padding), so erosion
//! eats the frame border and dilation never reads phantom foreground.

use super::{GaitSequence, Silhouette, HEIGHT, WIDTH};
use crate::error::{Error, Result};
use rand::Rng;

/// Square all-ones structuring element. Side 2..=9; the anchor is the
/// (side-1)/2 cell, which centers odd kernels and biases even kernels toward
/// the top-left, matching the usual convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Kernel {
    side: usize,
}

impl Kernel {
    pub fn new(side: usize) -> Result<Self> {
        if !(2..=9).contains(&side) {
            return Err(Error::invalid("kernel", format!("side {side} outside 2..=9")));
        }
        Ok(Kernel { side })
    }

    pub fn side(self) -> usize {
        self.side
    }

    /// Offsets of the element relative to the anchor.
    fn offsets(self) -> impl Iterator<Item = (isize, isize)> {
        let side = self.side as isize;
        let anchor = (side - 1) / 2;
        (0..side).flat_map(move |i| (0..side).map(move |j| (i - anchor, j - anchor)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Dilate,
    Erode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Upper,
    Bottom,
    Whole,
}

/// One sampled augmentation: op, region, kernel, and the concrete row band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentOp {
    pub op: MorphOp,
    pub region: Region,
    pub kernel: Kernel,
    pub row_bounds: (usize, usize),
}

impl AugmentOp {
    pub fn validate(&self) -> Result<()> {
        let (start, end) = self.row_bounds;
        if start >= end || end > HEIGHT {
            return Err(Error::invalid(
                "row_bounds",
                format!("({start},{end}) must satisfy start < end <= {HEIGHT}"),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, frame: &Silhouette) -> Result<Silhouette> {
        self.validate()?;
        match self.op {
            MorphOp::Dilate => dilate(frame, self.kernel, self.row_bounds),
            MorphOp::Erode => erode(frame, self.kernel, self.row_bounds),
        }
    }
}

fn check_bounds(row_bounds: (usize, usize)) -> Result<()> {
    let (start, end) = row_bounds;
    if start >= end || end > HEIGHT {
        return Err(Error::invalid(
            "row_bounds",
            format!("({start},{end}) must satisfy start < end <= {HEIGHT}"),
        ));
    }
    Ok(())
}

/// Binary dilation of the rows in `row_bounds`; rows outside are copied
/// unchanged. Reads come from the full original frame.
pub fn dilate(frame: &Silhouette, kernel: Kernel, row_bounds: (usize, usize)) -> Result<Silhouette> {
    check_bounds(row_bounds)?;
    let mut out = frame.clone();
    for r in row_bounds.0..row_bounds.1 {
        for c in 0..WIDTH {
            let mut v = 0u8;
            for (dr, dc) in kernel.offsets() {
                let rr = r as isize - dr;
                let cc = c as isize - dc;
                if rr >= 0 && rr < HEIGHT as isize && cc >= 0 && cc < WIDTH as isize {
                    if frame.get(rr as usize, cc as usize) != 0 {
                        v = 1;
                        break;
                    }
                }
            }
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Binary erosion of the rows in `row_bounds`; the dual of [`dilate`] under
/// the same zero-padding convention.
pub fn erode(frame: &Silhouette, kernel: Kernel, row_bounds: (usize, usize)) -> Result<Silhouette> {
    check_bounds(row_bounds)?;
    let mut out = frame.clone();
    for r in row_bounds.0..row_bounds.1 {
        for c in 0..WIDTH {
            let mut v = 1u8;
            for (dr, dc) in kernel.offsets() {
                let rr = r as isize + dr;
                let cc = c as isize + dc;
                let on = rr >= 0
                    && rr < HEIGHT as isize
                    && cc >= 0
                    && cc < WIDTH as isize
                    && frame.get(rr as usize, cc as usize) != 0;
                if !on {
                    v = 0;
                    break;
                }
            }
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Sampling ranges and kernels for cloth augmentation. Row-bound ranges follow
/// the dynamic boundaries used on 64-row silhouettes; the boundary value is
/// sampled uniformly (inclusive) per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Probability of leaving the sequence untouched before sampling an op.
    pub identity_prob: f64,
    pub upper_kernel: usize,
    pub bottom_kernel: usize,
    pub whole_kernel: usize,
    /// Upper region is rows [0, b) with b drawn from this inclusive range.
    pub upper_bound_range: (usize, usize),
    /// Bottom region is rows [b, 64) with b drawn from this inclusive range;
    /// the upper end must stay below 64 so the band is nonempty.
    pub bottom_bound_range: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            identity_prob: 0.0,
            upper_kernel: 5,
            bottom_kernel: 2,
            whole_kernel: 5,
            upper_bound_range: (14, 18),
            bottom_bound_range: (60, 63),
        }
    }
}

/// Sample one augmentation op per the config. Returns `None` when the identity
/// branch is taken. Draw order: identity gate, op (dilate with p=0.5),
/// region (uniform over upper/bottom/whole), then the region boundary.
pub fn sample_augment_op<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Result<Option<AugmentOp>> {
    if cfg.identity_prob > 0.0 && rng.gen::<f64>() < cfg.identity_prob {
        return Ok(None);
    }
    let op = if rng.gen::<f64>() < 0.5 { MorphOp::Dilate } else { MorphOp::Erode };
    let region = match rng.gen_range(0..3u8) {
        0 => Region::Upper,
        1 => Region::Bottom,
        _ => Region::Whole,
    };
    let (kernel, row_bounds) = match region {
        Region::Upper => {
            let b = rng.gen_range(cfg.upper_bound_range.0..=cfg.upper_bound_range.1);
            (Kernel::new(cfg.upper_kernel)?, (0, b))
        }
        Region::Bottom => {
            let b = rng.gen_range(cfg.bottom_bound_range.0..=cfg.bottom_bound_range.1);
            (Kernel::new(cfg.bottom_kernel)?, (b, HEIGHT))
        }
        Region::Whole => (Kernel::new(cfg.whole_kernel)?, (0, HEIGHT)),
    };
    Ok(Some(AugmentOp { op, region, kernel, row_bounds }))
}

/// Apply one sampled augmentation to every frame of the sequence. Metadata and
/// frame count are preserved.
pub fn cloth_augment<R: Rng>(
    seq: &GaitSequence,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<GaitSequence> {
    seq.validate()?;
    let mut out = seq.clone();
    if let Some(op) = sample_augment_op(cfg, rng)? {
        for frame in &mut out.frames {
            *frame = op.apply(frame)?;
        }
    }
    Ok(out)
}
