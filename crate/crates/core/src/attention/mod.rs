//! Attention kernels: full, shifted-window and sparse local attention over
//! token grids, interleaved temporal units, FLOP accounting and benchmarks.

pub mod bench;
pub mod flops;
pub mod grid;
pub mod kernel;
pub mod modes;
pub mod temporal;

pub use bench::{bench_attention, bench_report, BenchRow, BenchSpec};
pub use flops::{count_flops, FlopReport};
pub use grid::{GridLayout, TemporalUnitPlan, TokenGrid, WindowPartition};
pub use kernel::{attend, attend_backward, attend_with_weights, validate_plan, AttentionGroup, AttentionPlan, GroupWeights};
pub use modes::{
    full_attention, layer_plan, sparse_local_attention, sparse_local_attention_with, sparse_plan, swin_attention,
    window_relevance, AttentionConfig, AttentionMode, Selection,
};
pub use temporal::{gather_frames, interleaved_temporal_wrap, roll_frames};
