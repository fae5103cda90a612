//! Recurrent temporal point process models with neural cumulative hazards.
//!
//! The history of inter-event intervals is summarised by a tanh RNN; the
//! time to the next event is modelled through a hazard conditioned on the
//! RNN state. Four hazard families are provided, the most flexible being a
//! monotone feedforward network for the cumulative hazard whose derivative
//! (the hazard itself) is built on the same tape, which makes the
//! log-likelihood exact and differentiable.
//!
//! Modules:
//! * [`events`]: event sequences, file formats, splits and windows
//! * [`autodiff`]: reverse-mode tape with second-order capable primitives
//! * [`rnn`]: history encoder
//! * [`hazards`]: hazard families
//! * [`model`]: encoder + hazard bundled with its parameters
//! * [`simulate`]: exact samplers for synthetic benchmark processes
//! * [`train`]: maximum-likelihood fitting and checkpoints
//! * [`eval`]: likelihood scoring and median prediction

pub mod autodiff;
pub mod eval;
pub mod events;
pub mod hazards;
pub mod model;
pub mod params;
pub mod rng;
pub mod rnn;
pub mod simulate;
pub mod train;
