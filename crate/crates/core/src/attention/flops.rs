//! Analytic FLOP accounting for the attention modes.
//!
//! A multiply-add counts as two FLOPs. Scores and the weighted sum of values
//! each cost `2 * n_q * n_k * D`, so a group costs `4 * n_q * n_k * D`.
//! Projections (Q, K, V, output) cost `8 * N * D^2` in every mode and are
//! reported in their own column, outside the mode comparison.

use serde::Serialize;

use super::grid::{GridLayout, WindowPartition};
use super::modes::{AttentionConfig, AttentionMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub mode: AttentionMode,
    /// Score and value matmuls.
    pub attention: u64,
    /// Window relevance scoring (sparse mode with `top_k > 0` only).
    pub relevance: u64,
    /// Q, K, V and output projections, identical across modes.
    pub projections: u64,
    /// `attention + relevance`.
    pub total: u64,
    /// Attention count of full attention over the same temporal units.
    pub full_reference: u64,
    /// `total / full_reference`.
    pub ratio: f64,
}

fn group_cost(n_q: usize, n_k: usize, dim: usize) -> u64 {
    4 * n_q as u64 * n_k as u64 * dim as u64
}

/// Counts FLOPs of one attention layer at `layer` (temporal unit and window
/// shifts follow the layer parity).
///
/// Sparse selection is data dependent; the count charges each query window
/// for the `top_k` largest other windows, an upper bound that is exact when
/// all windows have equal size.
pub fn count_flops(layout: GridLayout, dim: usize, config: &AttentionConfig, layer: usize) -> Result<FlopReport> {
    if layout.is_empty() || dim == 0 {
        return Err(Error::invalid("count_flops", "empty token grid"));
    }
    let per_frame = layout.tokens_per_frame();
    let units = config.temporal.units(layout.frames, layer)?;
    let mut partition = WindowPartition::new(layout.height, layout.width, config.window.0, config.window.1)?;
    if config.mode == AttentionMode::Swin && layer % 2 == 1 {
        partition = partition.shifted();
    }
    let sizes: Vec<usize> = partition.windows().iter().map(Vec::len).collect();
    let (mut attention, mut relevance, mut full_reference) = (0u64, 0u64, 0u64);
    for unit in &units {
        let n = unit.len() * per_frame;
        full_reference += group_cost(n, n, dim);
        match config.mode {
            AttentionMode::Full => attention += group_cost(n, n, dim),
            AttentionMode::Swin => {
                attention += unit.len() as u64 * sizes.iter().map(|&s| group_cost(s, s, dim)).sum::<u64>();
            }
            AttentionMode::SparseLocal => {
                let all: Vec<usize> = (0..unit.len()).flat_map(|_| sizes.iter().copied()).collect();
                let windows = all.len();
                let top_k = config.top_k.min(windows - 1);
                if top_k > 0 {
                    relevance += 2 * (windows as u64).pow(2) * dim as u64;
                }
                let mut sorted = all.clone();
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                for &own in &all {
                    // Largest `top_k` windows other than this one.
                    let mut skipped = false;
                    let mut selected = 0usize;
                    let mut taken = 0usize;
                    for &s in &sorted {
                        if taken == top_k {
                            break;
                        }
                        if !skipped && s == own {
                            skipped = true;
                            continue;
                        }
                        selected += s;
                        taken += 1;
                    }
                    attention += group_cost(own, own + selected, dim);
                }
            }
        }
    }
    let total = attention + relevance;
    Ok(FlopReport {
        mode: config.mode,
        attention,
        relevance,
        projections: 8 * layout.len() as u64 * (dim as u64).pow(2),
        total,
        full_reference,
        ratio: total as f64 / full_reference as f64,
    })
}
