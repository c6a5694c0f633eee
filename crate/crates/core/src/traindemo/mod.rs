//! Gradient-trained mini denoiser on a synthetic multi-reference
//! inpainting task.

mod data;
mod eval;
mod train;


pub use data::{texture, make_sample, make_sample_with, place_reference, SyntheticSample, TrainConfig};
pub use eval::{class_routing, eval_sampler, reconstruction_mse, RoutingCheck};
pub use train::{
    batch_loss_and_grads, draw_plan, eval_set, example_loss, example_loss_and_grads, optimizer_path,
    prepare_example, training_step, CurvePoint, Example, RmsProp, Trainer,
};
