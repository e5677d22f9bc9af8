//! Token layouts: grids, window partitions, temporal unit plans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `N x D` tokens laid out as `frames x height x width`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T: Scalar = f32> {
    tokens: Tensor<T>,
    frames: usize,
    height: usize,
    width: usize,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(tokens: Tensor<T>, frames: usize, height: usize, width: usize) -> Result<Self> {
        if tokens.rank() != 2 || tokens.dim(0) != frames * height * width {
            return Err(Error::shape(
                "TokenGrid",
                format!(
                    "tokens {:?} do not match layout {frames}x{height}x{width}",
                    tokens.shape()
                ),
            ));
        }
        Ok(Self {
            tokens,
            frames,
            height,
            width,
        })
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim(1)
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> GridLayout {
        GridLayout {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }

    pub fn same_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.layout() != other.layout() || self.dim() != other.dim() {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} x {} vs {:?} x {}",
                    self.layout(),
                    self.dim(),
                    other.layout(),
                    other.dim()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl GridLayout {
    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partition of one frame's `height x width` tokens into rectangular windows.
///
/// Windows start at the origin and tile with stride equal to the window
/// extents; the last row/column of windows may be smaller. A window larger
/// than the frame is clamped to the frame. The shifted variant tiles a
/// cyclically rolled frame and maps members back to unrolled positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    grid_h: usize,
    grid_w: usize,
    window_h: usize,
    window_w: usize,
    shift: (usize, usize),
    windows: Vec<Vec<usize>>,
}

impl WindowPartition {
    pub fn new(grid_h: usize, grid_w: usize, window_h: usize, window_w: usize) -> Result<Self> {
        Self::build(grid_h, grid_w, window_h, window_w, (0, 0))
    }

    /// Same tiling, applied after rolling the frame by half a window.
    pub fn shifted(&self) -> Self {
        Self::build(
            self.grid_h,
            self.grid_w,
            self.window_h,
            self.window_w,
            (self.window_h / 2, self.window_w / 2),
        )
        .expect("valid partition")
    }

    fn build(
        grid_h: usize,
        grid_w: usize,
        window_h: usize,
        window_w: usize,
        shift: (usize, usize),
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || window_h == 0 || window_w == 0 {
            return Err(Error::invalid(
                "WindowPartition",
                format!("extents must be >= 1 (grid {grid_h}x{grid_w}, window {window_h}x{window_w})"),
            ));
        }
        let (wh, ww) = (window_h.min(grid_h), window_w.min(grid_w));
        let mut windows = Vec::new();
        for y0 in (0..grid_h).step_by(wh) {
            for x0 in (0..grid_w).step_by(ww) {
                let mut members = Vec::with_capacity(wh * ww);
                for ys in y0..(y0 + wh).min(grid_h) {
                    for xs in x0..(x0 + ww).min(grid_w) {
                        let y = (ys + shift.0) % grid_h;
                        let x = (xs + shift.1) % grid_w;
                        members.push(y * grid_w + x);
                    }
                }
                windows.push(members);
            }
        }
        Ok(Self {
            grid_h,
            grid_w,
            window_h: wh,
            window_w: ww,
            shift,
            windows,
        })
    }

    /// Frame-local token indices of every window.
    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_extents(&self) -> (usize, usize) {
        (self.window_h, self.window_w)
    }

    pub fn grid_extents(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn shift(&self) -> (usize, usize) {
        self.shift
    }

    pub fn is_shifted(&self) -> bool {
        self.shift != (0, 0)
    }
}

/// Slicing of the latent time axis into fixed-length units, with the unit
/// boundaries rolled by `shift` frames on odd layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalUnitPlan {
    pub unit: usize,
    pub shift: usize,
    pub shift_enabled: bool,
}

impl Default for TemporalUnitPlan {
    fn default() -> Self {
        Self::new(5).expect("unit 5")
    }
}

impl TemporalUnitPlan {
    /// Units of `unit` latent frames, rolled by `unit / 2` on odd layers.
    pub fn new(unit: usize) -> Result<Self> {
        if unit == 0 {
            return Err(Error::invalid("TemporalUnitPlan", "unit length must be >= 1"));
        }
        Ok(Self {
            unit,
            shift: unit / 2,
            shift_enabled: true,
        })
    }

    pub fn without_shift(mut self) -> Self {
        self.shift_enabled = false;
        self
    }

    /// Whether `layer` (0-based) uses rolled unit boundaries.
    pub fn is_shifted_layer(&self, layer: usize) -> bool {
        self.shift_enabled && layer % 2 == 1
    }

    /// Frame indices of every unit at `layer`. Units partition `0..frames`.
    pub fn units(&self, frames: usize, layer: usize) -> Result<Vec<Vec<usize>>> {
        if self.unit == 0 {
            return Err(Error::invalid("TemporalUnitPlan", "unit length must be >= 1"));
        }
        if frames <= self.unit {
            return Ok(vec![(0..frames).collect()]);
        }
        let shift = if self.is_shifted_layer(layer) {
            self.shift % frames
        } else {
            0
        };
        let rolled: Vec<usize> = (0..frames).map(|i| (i + shift) % frames).collect();
        Ok(rolled.chunks(self.unit).map(|c| c.to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_partition(windows: &[Vec<usize>], n: usize) {
        let mut seen = vec![0u8; n];
        for w in windows {
            for &i in w {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn windows_partition_with_small_edges() {
        let p = WindowPartition::new(7, 10, 3, 4).unwrap();
        assert_eq!(p.len(), 3 * 3);
        assert_partition(p.windows(), 70);
        assert_eq!(p.windows()[8].len(), 2); // 1 row x 2 cols in the corner
        assert_partition(p.shifted().windows(), 70);
    }

    #[test]
    fn oversized_window_clamps_to_frame() {
        let p = WindowPartition::new(4, 5, 12, 9).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.window_extents(), (4, 5));
    }

    #[test]
    fn twenty_frames_in_units_of_five() {
        let plan = TemporalUnitPlan::new(5).unwrap();
        for layer in 0..4 {
            let units = plan.units(20, layer).unwrap();
            assert_eq!(units.len(), 4);
            let mut all: Vec<usize> = units.concat();
            all.sort_unstable();
            assert_eq!(all, (0..20).collect::<Vec<_>>());
        }
        assert_eq!(plan.units(20, 0).unwrap()[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(plan.units(20, 1).unwrap()[0], vec![2, 3, 4, 5, 6]);
        assert_eq!(plan.units(20, 1).unwrap()[3], vec![17, 18, 19, 0, 1]);
        assert_eq!(plan.units(20, 2).unwrap()[0], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn short_sequences_form_one_unit() {
        let plan = TemporalUnitPlan::new(5).unwrap();
        assert_eq!(plan.units(5, 1).unwrap(), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(plan.units(3, 0).unwrap().len(), 1);
        assert!(TemporalUnitPlan::new(0).is_err());
    }
}
