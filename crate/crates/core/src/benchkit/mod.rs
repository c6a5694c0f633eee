//! Cost model, paired timing and report emission for the execution modes.

pub mod alloc;
pub mod cost;
mod measure;
mod report;

#[cfg(test)]
mod tests;

pub use alloc::CountingAlloc;
pub use cost::{analytical_speedup, flops, joint_step, reference_branch, x_step, Flops, Workload};
pub use measure::{measure, timer_tick, BenchConfig, BenchReport, ModeReport, ModelSummary, Throughput, MAX_CV, MIN_TICKS_PER_STEP};
pub use report::{emit_report, load_report, Format};
