//! Conditioning assembly, noise schedule and the guided DDIM loop in the
//! three execution modes.

mod condition;
mod run;
mod schedule;
mod synthetic;

pub use condition::{
    assemble_person_condition, category_region, downsample_mask, encode_references, pose_raster, pseudo_vae,
    PersonCondition,
};
pub use run::{sample, sample_with_cache, ExecMode, SampleOutput, SampleStats, SamplerConfig};
pub use schedule::{cfg_combine, ddim_step, inference_timesteps, NoiseSchedule, BETA_END, BETA_START};
pub use synthetic::{synthetic_request, Request};

#[cfg(test)]
mod tests;
