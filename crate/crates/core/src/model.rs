//! An encoder and a hazard bundled with their parameters.
//!
//! Parameters are stored in one [`ParamSet`]: the encoder's
//! [`rnn::PARAM_COUNT`] tensors first, then the hazard's in the order given
//! by [`hazards::init_params`].

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::events::{InputFeature, TrainingWindow};
use crate::hazards::{self, ConditionedHazard, HazardConfig, HazardError};
use crate::params::{Param, ParamSet};
use crate::rng;
use crate::rnn::{self, RnnError, RnnVars};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Hazard(#[from] HazardError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: HazardConfig,
    /// Truncation depth `d`.
    pub depth: usize,
    pub params: ParamSet,
}

/// One window's loss node and the parameter leaves it depends on, in
/// [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct WindowGraph {
    pub loss: Var,
    pub params: Vec<Var>,
}

impl Model {
    /// Fresh parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn init(config: HazardConfig, depth: usize, seed: u64) -> Self {
        assert!(depth > 0, "truncation depth must be positive");
        let mut r = rng::from_seed(seed);
        let mut params = rnn::init_params(config.rnn_units, &mut r);
        params.extend(hazards::init_params(&config, &mut r));
        Model {
            config,
            depth,
            params: ParamSet::new(params),
        }
    }

    /// Wraps existing parameters after checking their count and shapes
    /// against a freshly initialised model of the same architecture.
    pub fn from_params(config: HazardConfig, depth: usize, params: ParamSet) -> Result<Self> {
        let reference = Model::init(config.clone(), depth, 0);
        if reference.params.len() != params.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(params.iter()) {
            if want.shape != got.shape || want.data.len() != got.data.len() {
                return Err(ModelError::Layout(format!(
                    "{}: expected {:?}, found {:?}",
                    want.name, want.shape, got.shape
                )));
            }
        }
        Ok(Model { config, depth, params })
    }

    pub fn rnn_params(&self) -> &[Param] {
        &self.params.as_slice()[..rnn::PARAM_COUNT]
    }

    pub fn hazard_params(&self) -> &[Param] {
        &self.params.as_slice()[rnn::PARAM_COUNT..]
    }

    /// Adds every parameter to `tape` as a borrowed leaf.
    pub fn attach<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.shape, &p.data)).collect()
    }

    /// Records `Φ(τ|h) - log φ(τ|h)` for one window on `tape`.
    pub fn window_loss<'p>(&'p self, tape: &mut Tape<'p>, window: &TrainingWindow) -> Result<WindowGraph> {
        let params = self.attach(tape);
        let loss = self.window_loss_with(tape, &params, window)?;
        Ok(WindowGraph { loss, params })
    }

    /// As [`Model::window_loss`] but reusing leaves already on the tape.
    pub fn window_loss_with(&self, tape: &mut Tape<'_>, params: &[Var], window: &TrainingWindow) -> Result<Var> {
        let rnn_vars = RnnVars::from_slice(&params[..rnn::PARAM_COUNT]);
        let h = rnn::unroll(tape, rnn_vars, window, self.depth)?;
        let terms = hazards::build(
            tape,
            &self.config,
            &params[rnn::PARAM_COUNT..],
            window.target_interval,
            h,
        )?;
        Ok(hazards::nll_term(tape, terms))
    }

    /// Encoder state after the given inputs, computed without a tape.
    pub fn hidden_state(&self, inputs: &[InputFeature]) -> Vec<f64> {
        rnn::encode(self.rnn_params(), inputs)
    }

    pub fn conditioned(&self, h: &[f64]) -> ConditionedHazard<'_> {
        ConditionedHazard::new(&self.config, self.hazard_params(), h)
    }

    /// Window loss evaluated without a tape.
    pub fn window_nll(&self, window: &TrainingWindow) -> Result<f64> {
        if window.depth() != self.depth {
            return Err(RnnError::WindowLength {
                expected: self.depth,
                got: window.depth(),
            }
            .into());
        }
        if window.target_interval < 0.0 {
            return Err(HazardError::NegativeTau(window.target_interval).into());
        }
        let h = self.hidden_state(&window.inputs);
        Ok(self.conditioned(&h).nll(window.target_interval))
    }
}
