//! The two-head U-Net: topology, layer kernels, forward tracing, gradients and
//! the model file format.

pub mod backward;
pub mod forward;
pub mod io;
pub mod model;
pub mod ops;

pub use backward::{backward_trace, Gradients};
pub use forward::{apply_layer, forward, logits_layer, rerun_cc_reweighted, ActivationTrace, ForwardOutput, Mode};
pub use io::{load_model, read_setn, save_model, write_setn};
pub use model::{Head, LayerKind, LayerSpec, NetworkModel, Section, WeightInit};
