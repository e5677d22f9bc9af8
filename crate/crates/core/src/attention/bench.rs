//! Wall-clock benchmark of the attention modes next to their analytic cost.

use std::time::Instant;

use super::flops::count_flops;
use super::grid::GridLayout;
use super::kernel::attend;
use super::modes::{layer_plan, AttentionConfig, AttentionMode};
use crate::error::{Error, Result};
use crate::media::Report;
use crate::rng::{randn, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: AttentionMode,
    pub layout: GridLayout,
    pub dim: usize,
    pub heads: usize,
    pub window: (usize, usize),
    pub top_k: usize,
    pub analytic_flops: u64,
    pub wall_ms: f64,
}

pub const BENCH_COLUMNS: [&str; 11] = [
    "mode",
    "Tl",
    "Hg",
    "Wg",
    "D",
    "heads",
    "window_h",
    "window_w",
    "top_k",
    "analytic_flops",
    "wall_ms",
];

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub modes: Vec<AttentionMode>,
    pub sizes: Vec<GridLayout>,
    pub dim: usize,
    pub heads: usize,
    pub base: AttentionConfig,
    pub repetitions: usize,
    pub seed: u64,
}

/// Median wall-clock per (mode, size), sizes varying fastest.
pub fn bench_attention(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.repetitions == 0 {
        return Err(Error::invalid("bench_attention", "repetitions must be >= 1"));
    }
    let mut rows = Vec::new();
    for &mode in &spec.modes {
        let config = AttentionConfig {
            mode,
            ..spec.base.clone()
        };
        for (i, &layout) in spec.sizes.iter().enumerate() {
            let mut rng = Rng::new(spec.seed, i as u64);
            let shape = [layout.len(), spec.dim];
            let (q, k, v) = (randn::<f32>(&mut rng, &shape)?, randn::<f32>(&mut rng, &shape)?, randn::<f32>(&mut rng, &shape)?);
            let mut times = Vec::with_capacity(spec.repetitions);
            for _ in 0..spec.repetitions {
                let start = Instant::now();
                let plan = layer_plan(layout, &config, 0, &q, &k, spec.heads)?;
                std::hint::black_box(attend(&q, &k, &v, spec.heads, &plan)?);
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            let flops = count_flops(layout, spec.dim, &config, 0)?;
            rows.push(BenchRow {
                mode,
                layout,
                dim: spec.dim,
                heads: spec.heads,
                window: config.window,
                top_k: config.top_k,
                analytic_flops: flops.total,
                wall_ms: times[times.len() / 2],
            });
        }
    }
    Ok(rows)
}

/// Tabulates rows. Without `wall_clock` the `wall_ms` column is dropped and
/// the table depends only on the spec.
pub fn bench_report(rows: &[BenchRow], wall_clock: bool) -> Result<Report> {
    let columns = if wall_clock {
        &BENCH_COLUMNS[..]
    } else {
        &BENCH_COLUMNS[..BENCH_COLUMNS.len() - 1]
    };
    let mut report = Report::new(columns.iter().copied());
    for r in rows {
        let mut cells = vec![
            r.mode.name().to_string(),
            r.layout.frames.to_string(),
            r.layout.height.to_string(),
            r.layout.width.to_string(),
            r.dim.to_string(),
            r.heads.to_string(),
            r.window.0.to_string(),
            r.window.1.to_string(),
            r.top_k.to_string(),
            r.analytic_flops.to_string(),
        ];
        if wall_clock {
            cells.push(format!("{:.3}", r.wall_ms));
        }
        report.push(cells)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::grid::TemporalUnitPlan;
    use crate::attention::modes::Selection;

    #[test]
    fn one_row_per_mode_and_size() {
        let spec = BenchSpec {
            modes: vec![AttentionMode::Full, AttentionMode::Swin, AttentionMode::SparseLocal],
            sizes: vec![
                GridLayout { frames: 1, height: 4, width: 4 },
                GridLayout { frames: 1, height: 4, width: 8 },
            ],
            dim: 8,
            heads: 2,
            base: AttentionConfig {
                mode: AttentionMode::Full,
                window: (2, 2),
                top_k: 1,
                selection: Selection::WindowMean,
                temporal: TemporalUnitPlan::new(5).unwrap(),
            },
            repetitions: 1,
            seed: 0,
        };
        let rows = bench_attention(&spec).unwrap();
        assert_eq!(rows.len(), 6);
        let report = bench_report(&rows, true).unwrap();
        assert_eq!(report.header().len(), 11);
        assert_eq!(bench_report(&rows, false).unwrap().header().len(), 10);
        for r in &rows {
            let c = AttentionConfig {
                mode: r.mode,
                ..spec.base.clone()
            };
            assert_eq!(r.analytic_flops, count_flops(r.layout, 8, &c, 0).unwrap().total);
        }
    }
}
