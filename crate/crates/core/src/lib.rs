//! Masked-diffusion conditional sequence generation over synthetic scenes.
//!
//! The pipeline: [`scenegen`] builds scenes and task instances, [`net`] is the
//! conditioned transformer with exact gradients, [`diffusion`] trains it with
//! the mask-and-predict objective (or the causal baseline), [`decode`] runs
//! scheduled parallel unmasking, and [`eval`] scores outputs and runs the
//! ablation protocols.

pub mod dataset;
pub mod decode;
pub mod diffusion;
pub mod eval;
pub mod net;
pub mod recipe;
pub mod scenegen;
pub mod vocab;
