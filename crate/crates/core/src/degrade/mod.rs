//! Degradation model `y = k * x + n`, its adjoint, and corpus synthesis.

mod blur;
mod kernel;
pub mod store;
mod synth;

pub use blur::{apply_a, apply_at, fidelity_gradient, Degradation};
pub use kernel::{gen_kernel, Kernel, MAX_SIDE, MIN_SIDE, PROTOCOL_SIDES};
pub use synth::{add_noise, degrade, degrade_with, quantize8, synth_dataset, synthetic_scene, SynthConfig, Triplet};
