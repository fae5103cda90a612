//! Named parameter tensors with positivity constraints.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Shape;

/// Which entries of a parameter must stay positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "column")]
pub enum Constraint {
    Free,
    Positive,
    /// Only the given column of a matrix is constrained.
    PositiveColumn(usize),
}

impl Constraint {
    pub fn applies(self, shape: Shape, flat_index: usize) -> bool {
        match self {
            Constraint::Free => false,
            Constraint::Positive => true,
            Constraint::PositiveColumn(c) => flat_index % shape.cols == c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
    pub constraint: Constraint,
}

impl Param {
    pub fn zeros(name: &str, shape: Shape, constraint: Constraint) -> Self {
        Param {
            name: name.to_string(),
            shape,
            data: vec![0.0; shape.len()],
            constraint,
        }
    }

    /// Uniform in `[-bound, bound]`; constrained entries take the absolute
    /// value of their draw.
    pub fn uniform<R: Rng>(name: &str, shape: Shape, constraint: Constraint, bound: f64, rng: &mut R) -> Self {
        let mut p = Param::zeros(name, shape, constraint);
        for (i, v) in p.data.iter_mut().enumerate() {
            let draw = rng.random_range(-bound..=bound);
            *v = if constraint.applies(shape, i) { draw.abs() } else { draw };
        }
        p
    }

    /// Replaces each negative constrained entry by its absolute value.
    pub fn project(&mut self) {
        if self.constraint == Constraint::Free {
            return;
        }
        let (shape, c) = (self.shape, self.constraint);
        for (i, v) in self.data.iter_mut().enumerate() {
            if c.applies(shape, i) && *v < 0.0 {
                *v = v.abs();
            }
        }
    }

    pub fn constrained_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(i, _)| self.constraint.applies(self.shape, *i))
            .map(|(_, &v)| v)
    }
}

/// Ordered collection of parameters. The order is the serialisation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Self {
        ParamSet { params }
    }

    pub fn push(&mut self, p: Param) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn as_slice(&self) -> &[Param] {
        &self.params
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn project(&mut self) {
        for p in &mut self.params {
            p.project();
        }
    }

    /// Zero-filled buffers matching every parameter.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn constrained_initialisation_is_feasible() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = Param::uniform("w", Shape::matrix(8, 5), Constraint::PositiveColumn(0), 0.5, &mut rng);
        assert!(p.constrained_values().all(|v| v >= 0.0));
        assert_eq!(p.constrained_values().count(), 8);
        assert!(p.data.iter().any(|&v| v < 0.0));
    }

    #[test]
    fn negative_weight_is_reflected() {
        let mut p = Param::zeros("w", Shape::vector(2), Constraint::Positive);
        p.data = vec![-0.3, 0.2];
        p.project();
        assert_eq!(p.data, vec![0.3, 0.2]);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(values in proptest::collection::vec(-5.0f64..5.0, 12), col in 0usize..3) {
            for constraint in [Constraint::Free, Constraint::Positive, Constraint::PositiveColumn(col)] {
                let mut p = Param::zeros("w", Shape::matrix(4, 3), constraint);
                p.data = values.clone();
                p.project();
                let once = p.data.clone();
                p.project();
                prop_assert_eq!(&once, &p.data);
                prop_assert!(p.constrained_values().all(|v| v >= 0.0));
                for (i, (&a, &b)) in values.iter().zip(&once).enumerate() {
                    if constraint.applies(p.shape, i) { prop_assert_eq!(a.abs(), b); } else { prop_assert_eq!(a, b); }
                }
            }
        }
    }
}
