//! Synthetic glyph-grid task: a `g × g` grid of glyphs, one per encoder
//! patch, and the question "which glyph is at cell (i, j)".

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub grid: usize,
    pub alphabet: usize,
    /// Pixels per glyph side; equals the encoder patch.
    pub patch: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Seed of the glyph templates (shared by every dataset of the task).
    pub glyph_seed: u64,
    /// Cells a question may ask about, drawn uniformly; empty means any cell.
    pub query_cells: Vec<(usize, usize)>,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            grid: 6,
            alphabet: 8,
            patch: 4,
            noise: 0.5,
            glyph_seed: 7,
            query_cells: Vec::new(),
        }
    }
}

/// A generated dataset; row `k` of every field belongs to example `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, g·p, g·p, 1]`.
    pub images: Tensor,
    pub cells: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    /// Glyph id per cell, row-major.
    pub glyphs: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.alphabet < 2 || self.patch == 0 {
            return Err(Error::Config("task needs grid ≥ 1, alphabet ≥ 2, patch ≥ 1".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("task.noise must be nonnegative".into()));
        }
        if self.query_cells.iter().any(|&(i, j)| i >= self.grid || j >= self.grid) {
            return Err(Error::Config("task.query_cells: cell outside the grid".into()));
        }
        Ok(())
    }

    /// Glyph ids, then `QUERY`, `ROW_0..g`, `COL_0..g`.
    pub fn vocab_size(&self) -> usize {
        self.alphabet + 1 + 2 * self.grid
    }

    pub fn query_token(&self) -> usize {
        self.alphabet
    }

    pub fn prompt(&self, cell: (usize, usize)) -> Vec<usize> {
        let a = self.alphabet;
        alloc::vec![a, a + 1 + cell.0, a + 1 + self.grid + cell.1]
    }

    /// `[A, p, p]` ±1 glyph templates.
    pub fn templates(&self) -> Tensor {
        let mut rng = RngState::new(self.glyph_seed).split("glyphs");
        let p = self.patch;
        let data = (0..self.alphabet * p * p)
            .map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 })
            .collect();
        Tensor::new([self.alphabet, p, p], data).expect("sized")
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Invalid("dataset size must be positive".into()));
        }
        let (g, p, a) = (self.grid, self.patch, self.alphabet);
        let side = g * p;
        let templates = self.templates();
        let mut rng = RngState::new(seed).split("dataset");
        let mut labels: Vec<usize> = (0..n).map(|k| k % a).collect();
        rng.shuffle(&mut labels);
        let mut images = Tensor::zeros(&[n, side, side, 1]);
        let mut cells = Vec::with_capacity(n);
        let mut glyphs = Vec::with_capacity(n);
        for (k, &label) in labels.iter().enumerate() {
            let cell = if self.query_cells.is_empty() {
                (rng.below(g), rng.below(g))
            } else {
                self.query_cells[rng.below(self.query_cells.len())]
            };
            let mut grid: Vec<usize> = (0..g * g).map(|_| rng.below(a)).collect();
            grid[cell.0 * g + cell.1] = label;
            let img = &mut images.data_mut()[k * side * side..(k + 1) * side * side];
            for ci in 0..g {
                for cj in 0..g {
                    let t = &templates.data()[grid[ci * g + cj] * p * p..];
                    for di in 0..p {
                        for dj in 0..p {
                            let px = (ci * p + di) * side + cj * p + dj;
                            img[px] = t[di * p + dj] + self.noise * rng.normal();
                        }
                    }
                }
            }
            cells.push(cell);
            glyphs.push(grid);
        }
        Ok(Dataset {
            images,
            cells,
            labels,
            glyphs,
        })
    }
}
