//! Tanh recurrent encoder of the event history.
//!
//! `h_i = tanh(W_h h_{i-1} + W_x x_i + b_h)`, started from the zero state for
//! every window and unrolled over the window's `d` inputs only.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{self, Shape, Tape, Var};
use crate::events::{InputFeature, TrainingWindow};
use crate::params::{Constraint, Param};

pub const W_H: usize = 0;
pub const W_X: usize = 1;
pub const B_H: usize = 2;
/// Number of parameter tensors owned by the encoder.
pub const PARAM_COUNT: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum RnnError {
    #[error("window has {got} inputs, the model expects {expected}")]
    WindowLength { expected: usize, got: usize },
}

/// `W_h`, `W_x` uniform in `±1/√units`, `b_h` zero.
pub fn init_params<R: Rng>(units: usize, rng: &mut R) -> Vec<Param> {
    let bound = 1.0 / (units as f64).sqrt();
    vec![
        Param::uniform("rnn.w_h", Shape::matrix(units, units), Constraint::Free, bound, rng),
        Param::uniform("rnn.w_x", Shape::matrix(units, 1), Constraint::Free, bound, rng),
        Param::zeros("rnn.b_h", Shape::vector(units), Constraint::Free),
    ]
}

/// The encoder's parameter leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct RnnVars {
    pub w_h: Var,
    pub w_x: Var,
    pub b_h: Var,
}

impl RnnVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        RnnVars {
            w_h: vars[W_H],
            w_x: vars[W_X],
            b_h: vars[B_H],
        }
    }
}

/// One recurrent update. `None` stands for the zero state.
pub fn step(tape: &mut Tape<'_>, vars: RnnVars, h_prev: Option<Var>, x: f64) -> Var {
    let xv = tape.scalar(x);
    let wx = tape.matvec(vars.w_x, xv);
    let mut pre = tape.add(wx, vars.b_h);
    if let Some(h) = h_prev {
        let wh = tape.matvec(vars.w_h, h);
        pre = tape.add(wh, pre);
    }
    tape.tanh(pre)
}

/// Runs the encoder over a window from the zero state and returns the final
/// hidden state node.
pub fn unroll(tape: &mut Tape<'_>, vars: RnnVars, window: &TrainingWindow, depth: usize) -> Result<Var, RnnError> {
    if window.depth() != depth {
        return Err(RnnError::WindowLength {
            expected: depth,
            got: window.depth(),
        });
    }
    Ok(unroll_inputs(tape, vars, &window.inputs))
}

pub fn unroll_inputs(tape: &mut Tape<'_>, vars: RnnVars, inputs: &[InputFeature]) -> Var {
    assert!(!inputs.is_empty(), "cannot unroll over zero inputs");
    let mut h = None;
    for f in inputs {
        h = Some(step(tape, vars, h, f.x));
    }
    h.expect("at least one step")
}

/// Final hidden state computed without a tape.
pub fn encode(params: &[Param], inputs: &[InputFeature]) -> Vec<f64> {
    let w_h = &params[W_H];
    let w_x = &params[W_X].data;
    let b_h = &params[B_H].data;
    let units = b_h.len();
    let mut h = vec![0.0; units];
    let mut pre = vec![0.0; units];
    for (step, f) in inputs.iter().enumerate() {
        if step == 0 {
            pre.iter_mut().for_each(|p| *p = 0.0);
        } else {
            autodiff::matvec_into(&w_h.data, w_h.shape, &h, &mut pre);
        }
        for ((p, &wx), &b) in pre.iter_mut().zip(w_x).zip(b_h) {
            *p += wx * f.x + b;
        }
        for (hv, &p) in h.iter_mut().zip(&pre) {
            *hv = p.tanh();
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::InputFeature;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(xs: &[f64]) -> Vec<InputFeature> {
        xs.iter()
            .map(|&x| InputFeature {
                x,
                raw_interval: x.exp(),
            })
            .collect()
    }

    fn window(xs: &[f64]) -> TrainingWindow {
        TrainingWindow {
            inputs: features(xs),
            target_interval: 1.0,
            target_index: xs.len() + 1,
        }
    }

    fn zero_params(units: usize) -> Vec<Param> {
        vec![
            Param::zeros("w_h", Shape::matrix(units, units), Constraint::Free),
            Param::zeros("w_x", Shape::matrix(units, 1), Constraint::Free),
            Param::zeros("b_h", Shape::vector(units), Constraint::Free),
        ]
    }

    fn attach<'p>(tape: &mut Tape<'p>, params: &'p [Param]) -> RnnVars {
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.shape, &p.data)).collect();
        RnnVars::from_slice(&vars)
    }

    #[test]
    fn zero_params_give_zero_state() {
        let params = zero_params(64);
        assert!(encode(&params, &features(&[0.3, -1.0, 2.0])).iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let vars = attach(&mut tape, &params);
        let h = unroll(&mut tape, vars, &window(&[0.5, 0.1]), 2).unwrap();
        tape.forward().unwrap();
        assert!(tape.value(h).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_input() {
        let mut params = zero_params(64);
        params[W_X].data[0] = 1.0;
        let h = encode(&params, &features(&[0.5]));
        assert!((h[0] - 0.46212).abs() < 1e-5);
        assert!(h[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_window_length() {
        let params = zero_params(4);
        let mut tape = Tape::new();
        let vars = attach(&mut tape, &params);
        assert_eq!(
            unroll(&mut tape, vars, &window(&[0.1, 0.2, 0.3]), 5).unwrap_err(),
            RnnError::WindowLength { expected: 5, got: 3 }
        );
    }

    #[test]
    fn tape_matches_plain_and_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = init_params(64, &mut rng);
        params[B_H]
            .data
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-2.0..2.0));
        let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let plain = encode(&params, &features(&xs));
        let mut tape = Tape::new();
        let vars = attach(&mut tape, &params);
        let h = unroll_inputs(&mut tape, vars, &features(&xs));
        tape.forward().unwrap();
        let on_tape = tape.value(h).unwrap();
        for (a, b) in plain.iter().zip(on_tape) {
            assert!((a - b).abs() < 1e-14);
            assert!(a.abs() < 1.0);
        }
    }

    #[test]
    fn depth_one_is_a_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params(8, &mut rng);
        let h = encode(&params, &features(&[0.7]));
        for r in 0..8 {
            let expected = (params[W_X].data[r] * 0.7 + params[B_H].data[r]).tanh();
            assert_eq!(h[r], expected);
        }
    }

    #[test]
    fn unroll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = init_params(6, &mut rng);
        let xs = [0.4, -1.2, 0.9, 2.0, -0.3];
        let readout: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[Param]| -> f64 { autodiff::dot(&encode(p, &features(&xs)), &readout) };

        let mut tape = Tape::new();
        let vars = attach(&mut tape, &params);
        let h = unroll_inputs(&mut tape, vars, &features(&xs));
        let r = tape.constant(Shape::vector(6), readout.clone());
        let out = tape.dot(h, r);
        tape.forward().unwrap();
        let g = tape.backward(out).unwrap().wrt(vars.w_h, 36);

        for k in 0..36 {
            let x0 = params[W_H].data[k];
            let step = 1e-6 * x0.abs().max(1.0);
            let mut p = params.clone();
            p[W_H].data[k] = x0 + step;
            let up = loss(&p);
            p[W_H].data[k] = x0 - step;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * step);
            let err = (g[k] - fd).abs() / fd.abs().max(1e-6);
            assert!(err < 1e-5, "entry {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn older_events_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = init_params(16, &mut rng);
        let recent = [0.1, 0.2, -0.3];
        let a = encode(&params, &features(&recent));
        // Only the window's inputs are ever fed, so whatever preceded them in
        // the original sequence cannot change the state.
        let mut longer = vec![5.0, -4.0];
        longer.extend_from_slice(&recent);
        let b = encode(&params, &features(&longer[2..]));
        assert_eq!(a, b);
    }
}
