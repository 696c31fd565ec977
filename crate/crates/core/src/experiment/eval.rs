use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::data::{cell_prng, corrupt, CorruptionSpec, ImageDataset};
use crate::error::Result;

/// Accuracy for each (kind, level) cell, per-level means over kinds and the
/// grand mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftMatrix {
    /// Kind-major, 25 entries.
    pub cells: Vec<(CorruptionSpec, f64)>,
    pub level_avg: [f64; 5],
    pub grand_avg: f64,
}

impl ShiftMatrix {
    pub fn from_cells(cells: Vec<(CorruptionSpec, f64)>) -> Self {
        let mut level_avg = [0.0; 5];
        let mut counts = [0usize; 5];
        for (spec, acc) in &cells {
            let l = usize::from(spec.level) - 1;
            level_avg[l] += acc;
            counts[l] += 1;
        }
        for (a, c) in level_avg.iter_mut().zip(counts) {
            *a /= c.max(1) as f64;
        }
        let grand_avg = level_avg.iter().sum::<f64>() / 5.0;
        ShiftMatrix {
            cells,
            level_avg,
            grand_avg,
        }
    }

    pub fn get(&self, spec: CorruptionSpec) -> Option<f64> {
        self.cells.iter().find(|(s, _)| *s == spec).map(|(_, a)| *a)
    }
}

/// Corrupts `clean` once per cell, each with its own seeded stream, and
/// records Eval-mode accuracy.
pub fn domain_shift_eval(model: &Model, clean: &ImageDataset, seed: u64, batch_size: usize) -> Result<ShiftMatrix> {
    let cells = CorruptionSpec::grid()
        .map(|spec| {
            let shifted = corrupt(clean, spec, &mut cell_prng(seed, spec));
            model.evaluate(&shifted, batch_size).map(|acc| (spec, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShiftMatrix::from_cells(cells))
}
