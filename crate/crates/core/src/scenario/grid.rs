use serde::{Deserialize, Serialize};

use crate::neural::Tensor;

pub const CH_DRIVABLE: usize = 0;
pub const CH_OBSTACLE: usize = 1;
pub const CH_DIVIDER: usize = 2;
pub const CH_CROSSWALK: usize = 3;
pub const CH_STOP_ZONE: usize = 4;
pub const NUM_CHANNELS: usize = 5;

/// Raster dimensions and the ego reference cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub channels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { height: 64, width: 64, resolution: 0.5, channels: NUM_CHANNELS }
    }
}

impl GridSpec {
    /// Row and column of the ego reference cell.
    pub fn ego_cell(&self) -> (usize, usize) {
        (self.height - 8, self.width / 2)
    }

    /// Ego-frame center of cell `(r, c)`; rows grow backwards, columns grow
    /// to the right.
    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        let (er, ec) = self.ego_cell();
        ((er as f64 - r as f64) * self.resolution, (ec as f64 - c as f64) * self.resolution)
    }

    /// Fractional `(row, col)` of an ego-frame point.
    pub fn point_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let (er, ec) = self.ego_cell();
        (er as f64 - x / self.resolution, ec as f64 - y / self.resolution)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// `height x width x channels` occupancy raster, channel-contiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GridWire", try_from = "GridWire")]
pub struct SemanticGrid {
    spec: GridSpec,
    data: Vec<f64>,
}

impl SemanticGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { data: vec![0.0; spec.cells() * spec.channels], spec }
    }

    pub fn from_data(spec: GridSpec, data: Vec<f64>) -> Result<Self, String> {
        if data.len() != spec.cells() * spec.channels {
            return Err(format!("grid needs {} values, got {}", spec.cells() * spec.channels, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("grid value {} outside [0, 1]", v));
        }
        Ok(Self { spec, data })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.spec.width + c) * self.spec.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        let w = self.spec.width;
        let n = self.spec.channels;
        self.data[(r * w + c) * n + ch] = v.clamp(0.0, 1.0);
    }

    /// Number of cells in `ch` whose value exceeds `threshold`.
    pub fn count_above(&self, ch: usize, threshold: f64) -> usize {
        self.data.iter().skip(ch).step_by(self.spec.channels).filter(|v| **v > threshold).count()
    }

    /// Mean ego-frame position of cells above 0.5 in `ch`.
    pub fn centroid(&self, ch: usize) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.spec.height {
            for c in 0..self.spec.width {
                if self.get(r, c, ch) > 0.5 {
                    let (x, y) = self.spec.cell_center(r, c);
                    sx += x;
                    sy += y;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.spec.height, self.spec.width, self.spec.channels], self.data.clone())
            .expect("grid shape is consistent")
    }

    pub fn from_tensor(spec: GridSpec, t: &Tensor) -> Result<Self, String> {
        Self::from_data(spec, t.data().to_vec())
    }

    /// Per-channel run-length encoding in row-major cell order.
    pub fn to_rle(&self) -> Vec<Vec<(f64, u32)>> {
        (0..self.spec.channels)
            .map(|ch| {
                let mut runs: Vec<(f64, u32)> = Vec::new();
                for v in self.data.iter().skip(ch).step_by(self.spec.channels) {
                    match runs.last_mut() {
                        Some((last, n)) if last.to_bits() == v.to_bits() => *n += 1,
                        _ => runs.push((*v, 1)),
                    }
                }
                runs
            })
            .collect()
    }

    pub fn from_rle(spec: GridSpec, rle: &[Vec<(f64, u32)>]) -> Result<Self, String> {
        if rle.len() != spec.channels {
            return Err(format!("expected {} channels, got {}", spec.channels, rle.len()));
        }
        let mut grid = Self::zeros(spec);
        for (ch, runs) in rle.iter().enumerate() {
            let mut cell = 0usize;
            for (v, n) in runs {
                if !(0.0..=1.0).contains(v) {
                    return Err(format!("grid value {} outside [0, 1]", v));
                }
                let end = cell + *n as usize;
                if end > spec.cells() {
                    return Err(format!("channel {} runs overflow the grid", ch));
                }
                for i in cell..end {
                    grid.data[i * spec.channels + ch] = *v;
                }
                cell = end;
            }
            if cell != spec.cells() {
                return Err(format!("channel {} covers {} of {} cells", ch, cell, spec.cells()));
            }
        }
        Ok(grid)
    }
}

#[derive(Serialize, Deserialize)]
struct GridWire {
    height: usize,
    width: usize,
    resolution: f64,
    channels: usize,
    rle: Vec<Vec<(f64, u32)>>,
}

impl From<SemanticGrid> for GridWire {
    fn from(g: SemanticGrid) -> Self {
        GridWire {
            height: g.spec.height,
            width: g.spec.width,
            resolution: g.spec.resolution,
            channels: g.spec.channels,
            rle: g.to_rle(),
        }
    }
}

impl TryFrom<GridWire> for SemanticGrid {
    type Error = String;
    fn try_from(w: GridWire) -> Result<Self, String> {
        let spec = GridSpec { height: w.height, width: w.width, resolution: w.resolution, channels: w.channels };
        SemanticGrid::from_rle(spec, &w.rle)
    }
}
