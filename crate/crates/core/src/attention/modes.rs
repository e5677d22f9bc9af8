//! Full, shifted-window and sparse local attention, expressed as plans.

use serde::{Deserialize, Serialize};

use super::grid::{GridLayout, TemporalUnitPlan, TokenGrid, WindowPartition};
use super::kernel::{attend, AttentionGroup, AttentionPlan};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Full,
    Swin,
    SparseLocal,
}

impl AttentionMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionMode::Full => "full",
            AttentionMode::Swin => "swin",
            AttentionMode::SparseLocal => "sparse-local",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttentionMode::Full),
            "swin" => Ok(AttentionMode::Swin),
            "sparse-local" | "sparse" => Ok(AttentionMode::SparseLocal),
            other => Err(Error::invalid("attention mode", format!("unknown mode {other:?}"))),
        }
    }
}

/// How sparse local attention ranks candidate windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// One ranking per query window from window-mean queries and keys.
    #[default]
    WindowMean,
    /// One ranking per query token against window-mean keys.
    PerQuery,
}

/// Token indices of every window of every listed frame, in frame order.
fn video_windows(layout: GridLayout, frames: &[usize], partition: &WindowPartition) -> Vec<Vec<usize>> {
    let per_frame = layout.tokens_per_frame();
    frames
        .iter()
        .flat_map(|&f| {
            partition
                .windows()
                .iter()
                .map(move |w| w.iter().map(|&i| f * per_frame + i).collect())
        })
        .collect()
}

fn mean_rows<T: Scalar>(x: &[T], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for &r in rows {
        for (acc, &v) in m.iter_mut().zip(&x[r * d..(r + 1) * d]) {
            *acc += v.as_f64();
        }
    }
    let inv = 1.0 / rows.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Indices of the `top_k` highest scores, excluding `own`; ties go to the
/// lower index. Returned in ascending index order.
fn top_k_excluding(scores: &[f64], own: usize, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&c| c != own).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    order.sort_unstable();
    order
}

/// Relevance of candidate window `c` for query window `w`: the dot product
/// of window-mean query and key vectors per head, averaged over heads.
pub fn window_relevance<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
    windows: &[Vec<usize>],
) -> Vec<Vec<f64>> {
    let d = q.dim(1);
    let mq: Vec<Vec<f64>> = windows.iter().map(|w| mean_rows(q.data(), d, w)).collect();
    let mk: Vec<Vec<f64>> = windows.iter().map(|w| mean_rows(k.data(), d, w)).collect();
    // The per-head dots sum to the full dot product.
    mq.iter()
        .map(|a| mk.iter().map(|b| dot(a, b) / heads as f64).collect())
        .collect()
}

/// Sparse local plan over an explicit window list.
pub fn sparse_plan<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
    windows: &[Vec<usize>],
    top_k: usize,
    selection: Selection,
) -> AttentionPlan {
    let top_k = top_k.min(windows.len().saturating_sub(1));
    let keys_for = |own: usize, chosen: &[usize]| -> Vec<usize> {
        let mut keys = windows[own].clone();
        for &c in chosen {
            keys.extend_from_slice(&windows[c]);
        }
        keys
    };
    match selection {
        Selection::WindowMean => {
            let scores = if top_k == 0 || top_k + 1 == windows.len() {
                Vec::new()
            } else {
                window_relevance(q, k, heads, windows)
            };
            (0..windows.len())
                .map(|w| {
                    let chosen = if top_k == 0 {
                        Vec::new()
                    } else if top_k + 1 == windows.len() {
                        (0..windows.len()).filter(|&c| c != w).collect()
                    } else {
                        top_k_excluding(&scores[w], w, top_k)
                    };
                    AttentionGroup {
                        queries: windows[w].clone(),
                        keys: keys_for(w, &chosen),
                    }
                })
                .collect()
        }
        Selection::PerQuery => {
            let d = q.dim(1);
            let mk: Vec<Vec<f64>> = windows.iter().map(|w| mean_rows(k.data(), d, w)).collect();
            let mut plan = Vec::new();
            for (w, members) in windows.iter().enumerate() {
                for &tok in members {
                    let qv: Vec<f64> = q.data()[tok * d..(tok + 1) * d].iter().map(|x| x.as_f64()).collect();
                    let scores: Vec<f64> = mk.iter().map(|m| dot(&qv, m) / heads as f64).collect();
                    let chosen = top_k_excluding(&scores, w, top_k);
                    plan.push(AttentionGroup {
                        queries: vec![tok],
                        keys: keys_for(w, &chosen),
                    });
                }
            }
            plan
        }
    }
}

/// Attention settings shared by the model and the plan builder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    pub window: (usize, usize),
    pub top_k: usize,
    pub selection: Selection,
    pub temporal: TemporalUnitPlan,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            mode: AttentionMode::Full,
            window: (4, 3),
            top_k: 1,
            selection: Selection::WindowMean,
            temporal: TemporalUnitPlan::default(),
        }
    }
}

/// Builds the plan for one layer: temporal units first, then the mode's
/// grouping inside each unit. Swin windows are shifted on odd layers.
pub fn layer_plan<T: Scalar>(
    layout: GridLayout,
    config: &AttentionConfig,
    layer: usize,
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
) -> Result<AttentionPlan> {
    let per_frame = layout.tokens_per_frame();
    let units = config.temporal.units(layout.frames, layer)?;
    let mut partition = WindowPartition::new(layout.height, layout.width, config.window.0, config.window.1)?;
    let mut plan = Vec::new();
    for frames in &units {
        match config.mode {
            AttentionMode::Full => {
                let tokens: Vec<usize> = frames
                    .iter()
                    .flat_map(|&f| f * per_frame..(f + 1) * per_frame)
                    .collect();
                plan.push(AttentionGroup {
                    queries: tokens.clone(),
                    keys: tokens,
                });
            }
            AttentionMode::Swin => {
                if layer % 2 == 1 && !partition.is_shifted() {
                    partition = partition.shifted();
                }
                for w in video_windows(layout, frames, &partition) {
                    plan.push(AttentionGroup {
                        queries: w.clone(),
                        keys: w,
                    });
                }
            }
            AttentionMode::SparseLocal => {
                let windows = video_windows(layout, frames, &partition);
                plan.extend(sparse_plan(q, k, heads, &windows, config.top_k, config.selection));
            }
        }
    }
    Ok(plan)
}

fn check_triplet<T: Scalar>(q: &TokenGrid<T>, k: &TokenGrid<T>, v: &TokenGrid<T>, op: &'static str) -> Result<()> {
    q.same_layout(k, op)?;
    q.same_layout(v, op)
}

fn wrap<T: Scalar>(q: &TokenGrid<T>, out: Tensor<T>) -> Result<TokenGrid<T>> {
    TokenGrid::new(out, q.frames(), q.height(), q.width())
}

/// softmax(Q K^T / sqrt(d)) V per head over every token of the grid.
pub fn full_attention<T: Scalar>(
    q: &TokenGrid<T>,
    k: &TokenGrid<T>,
    v: &TokenGrid<T>,
    heads: usize,
) -> Result<TokenGrid<T>> {
    check_triplet(q, k, v, "full_attention")?;
    let all: Vec<usize> = (0..q.len()).collect();
    let plan = vec![AttentionGroup {
        queries: all.clone(),
        keys: all,
    }];
    wrap(q, attend(q.tokens(), k.tokens(), v.tokens(), heads, &plan)?)
}

/// Attention restricted to each window of each frame. With `shifted`, the
/// windows tile the frame rolled by half a window; outputs land back at
/// their unrolled positions.
pub fn swin_attention<T: Scalar>(
    q: &TokenGrid<T>,
    k: &TokenGrid<T>,
    v: &TokenGrid<T>,
    heads: usize,
    partition: &WindowPartition,
    shifted: bool,
) -> Result<TokenGrid<T>> {
    check_triplet(q, k, v, "swin_attention")?;
    check_partition(q, partition)?;
    let base = WindowPartition::new(
        partition.grid_extents().0,
        partition.grid_extents().1,
        partition.window_extents().0,
        partition.window_extents().1,
    )?;
    let part = if shifted { base.shifted() } else { base };
    let frames: Vec<usize> = (0..q.frames()).collect();
    let plan: AttentionPlan = video_windows(q.layout(), &frames, &part)
        .into_iter()
        .map(|w| AttentionGroup {
            queries: w.clone(),
            keys: w,
        })
        .collect();
    wrap(q, attend(q.tokens(), k.tokens(), v.tokens(), heads, &plan)?)
}

/// Each window attends to itself plus the `top_k` most relevant windows
/// anywhere in the grid (all frames), softmax taken jointly over the union.
pub fn sparse_local_attention<T: Scalar>(
    q: &TokenGrid<T>,
    k: &TokenGrid<T>,
    v: &TokenGrid<T>,
    heads: usize,
    partition: &WindowPartition,
    top_k: usize,
) -> Result<TokenGrid<T>> {
    sparse_local_attention_with(q, k, v, heads, partition, top_k, Selection::WindowMean)
}

pub fn sparse_local_attention_with<T: Scalar>(
    q: &TokenGrid<T>,
    k: &TokenGrid<T>,
    v: &TokenGrid<T>,
    heads: usize,
    partition: &WindowPartition,
    top_k: usize,
    selection: Selection,
) -> Result<TokenGrid<T>> {
    check_triplet(q, k, v, "sparse_local_attention")?;
    check_partition(q, partition)?;
    if heads == 0 || q.dim() % heads != 0 {
        return Err(Error::invalid(
            "sparse_local_attention",
            format!("model dim {} not divisible by {heads} heads", q.dim()),
        ));
    }
    let frames: Vec<usize> = (0..q.frames()).collect();
    let windows = video_windows(q.layout(), &frames, partition);
    let plan = sparse_plan(q.tokens(), k.tokens(), heads, &windows, top_k, selection);
    wrap(q, attend(q.tokens(), k.tokens(), v.tokens(), heads, &plan)?)
}

fn check_partition<T: Scalar>(q: &TokenGrid<T>, partition: &WindowPartition) -> Result<()> {
    if partition.grid_extents() != (q.height(), q.width()) {
        return Err(Error::shape(
            "attention",
            format!(
                "partition built for {:?}, grid is {}x{}",
                partition.grid_extents(),
                q.height(),
                q.width()
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};

    /// Per-head softmax attention of each query over an explicit key list.
    fn naive(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, keys_of: &dyn Fn(usize) -> Vec<usize>) -> Vec<f64> {
        let (n, d) = (q.dim(0), q.dim(1));
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let keys = keys_of(i);
            for h in 0..heads {
                let s: Vec<f64> = keys
                    .iter()
                    .map(|&j| (0..dh).map(|c| q.data()[i * d + h * dh + c] * k.data()[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&keys) {
                    for c in 0..dh {
                        out[i * d + h * dh + c] += w / z * v.data()[j * d + h * dh + c];
                    }
                }
            }
        }
        out
    }

    fn grids(seed: u64, t: usize, h: usize, w: usize, d: usize) -> [TokenGrid<f64>; 3] {
        let mut rng = Rng::new(seed, 0);
        let mut g = || TokenGrid::new(randn::<f64>(&mut rng, &[t * h * w, d]).unwrap(), t, h, w).unwrap();
        [g(), g(), g()]
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn full_attention_matches_naive() {
        let [q, k, v] = grids(1, 1, 3, 4, 8);
        let out = full_attention(&q, &k, &v, 2).unwrap();
        let all: Vec<usize> = (0..12).collect();
        let reference = naive(q.tokens(), k.tokens(), v.tokens(), 2, &|_| all.clone());
        assert!(max_diff(out.tokens().data(), &reference) < 1e-10);
        assert!(full_attention(&q, &k, &v, 3).is_err());
    }

    #[test]
    fn single_token_returns_v() {
        let [q, k, v] = grids(2, 1, 1, 1, 4);
        assert_eq!(full_attention(&q, &k, &v, 2).unwrap().tokens(), v.tokens());
    }

    #[test]
    fn swin_matches_per_window_naive() {
        let [q, k, v] = grids(3, 2, 4, 4, 4);
        let part = WindowPartition::new(4, 4, 2, 2).unwrap();
        for shifted in [false, true] {
            let out = swin_attention(&q, &k, &v, 2, &part, shifted).unwrap();
            let p = if shifted { part.shifted() } else { part.clone() };
            let window_of = |i: usize| {
                let (f, local) = (i / 16, i % 16);
                let w = p.windows().iter().find(|w| w.contains(&local)).unwrap();
                w.iter().map(|&j| f * 16 + j).collect::<Vec<_>>()
            };
            let reference = naive(q.tokens(), k.tokens(), v.tokens(), 2, &window_of);
            assert!(max_diff(out.tokens().data(), &reference) < 1e-10);
        }
    }

    #[test]
    fn sparse_saturates_to_full_and_degrades_to_windows() {
        let [q, k, v] = grids(4, 2, 4, 6, 8);
        let part = WindowPartition::new(4, 6, 2, 3).unwrap();
        let full = full_attention(&q, &k, &v, 2).unwrap();
        let sat = sparse_local_attention(&q, &k, &v, 2, &part, 7).unwrap();
        assert!(max_diff(sat.tokens().data(), full.tokens().data()) < 1e-10);
        let local = sparse_local_attention(&q, &k, &v, 2, &part, 0).unwrap();
        let swin = swin_attention(&q, &k, &v, 2, &part, false).unwrap();
        assert!(max_diff(local.tokens().data(), swin.tokens().data()) < 1e-12);
    }

    #[test]
    fn relevant_remote_window_is_selected() {
        // 2 frames of 2x4 tokens, 2x2 windows: 4 windows. Window 3 (frame 1)
        // holds keys parallel to window 0's queries; everything else is orthogonal.
        let d = 4;
        let mut qd = vec![0.0f64; 16 * d];
        let mut kd = vec![0.0f64; 16 * d];
        for i in 0..16 {
            qd[i * d + 1] = 1.0;
            kd[i * d + 1] = if i >= 8 { 0.0 } else { -0.5 };
            kd[i * d + 2] = 1.0;
        }
        let part = WindowPartition::new(2, 4, 2, 2).unwrap();
        let remote: Vec<usize> = part.windows()[1].iter().map(|&j| 8 + j).collect();
        for &j in &remote {
            kd[j * d + 1] = 2.0;
        }
        let q = Tensor::new(vec![16, d], qd).unwrap();
        let k = Tensor::new(vec![16, d], kd).unwrap();
        let windows = video_windows(GridLayout { frames: 2, height: 2, width: 4 }, &[0, 1], &part);
        let plan = sparse_plan(&q, &k, 1, &windows, 1, Selection::WindowMean);
        assert_eq!(plan[0].keys, [windows[0].clone(), remote.clone()].concat());
    }

    #[test]
    fn per_query_selection_partitions_queries() {
        let [q, k, _] = grids(5, 1, 4, 4, 4);
        let part = WindowPartition::new(4, 4, 2, 2).unwrap();
        let windows = video_windows(q.layout(), &[0], &part);
        let plan = sparse_plan(q.tokens(), k.tokens(), 2, &windows, 1, Selection::PerQuery);
        assert_eq!(plan.len(), 16);
        crate::attention::validate_plan(&plan, 16).unwrap();
    }
}
