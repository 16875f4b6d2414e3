//! Named parameters and the AdamW update rule.
//!
//! Parameters live in a [`ParamSet`] keyed by name. A training step builds
//! a tape whose parameter leaves reference these names, runs backward, and
//! hands the tape to [`AdamW::step`], which pulls each leaf's gradient and
//! updates the matching entry. Frozen parameters keep their bits: the
//! optimizer skips them entirely, so no rounding drift can touch them.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::tape::Tape;
use crate::error::{Error, Result};

/// One named tensor with a freeze flag.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Matrix,
    pub frozen: bool,
}

/// All parameters of a model, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(
            name.into(),
            Parameter {
                value,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    /// Number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.data().len()).sum()
    }

    /// Create a tape leaf for the named parameter.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Result<crate::tensor::VarId> {
        let p = self.value(name)?;
        Ok(tape.param(name, p))
    }
}

/// Memoizes one tape leaf per parameter name.
///
/// A training graph may use the same parameter many times (the encoder
/// runs once per subtitle line); routing every use through one leaf keeps
/// the tape small and the gradient accumulation in one place.
pub struct LeafMap<'a> {
    params: &'a ParamSet,
    map: BTreeMap<String, crate::tensor::VarId>,
}

impl<'a> LeafMap<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        LeafMap {
            params,
            map: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<crate::tensor::VarId> {
        if let Some(id) = self.map.get(name) {
            return Ok(*id);
        }
        let id = self.params.leaf(tape, name)?;
        self.map.insert(name.to_string(), id);
        Ok(id)
    }
}

/// AdamW with decoupled weight decay.
///
/// Weight decay is multiplied by the learning rate, so `lr = 0` leaves
/// every parameter untouched.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Apply one update using the gradients accumulated on `tape`.
    ///
    /// Every parameter leaf on the tape must name an entry in `params`.
    /// Leaves of frozen parameters are skipped without touching moments.
    pub fn step(&mut self, params: &mut ParamSet, tape: &Tape) -> Result<()> {
        // Gradients for the same name may appear on several leaves (a
        // parameter used twice in one graph); sum them first.
        let mut grads: BTreeMap<&str, Matrix> = BTreeMap::new();
        for (name, id) in tape.param_leaves() {
            let g = match tape.grad(*id) {
                Some(g) => g,
                None => continue, // leaf unused by the loss
            };
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            match grads.get_mut(name.as_str()) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    grads.insert(name, g.clone());
                }
            }
        }

        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if param.frozen {
                continue;
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            for i in 0..grad.data().len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = param.value.data()[i];
                param.value.data_mut()[i] =
                    p - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad_tape(params: &ParamSet) -> Tape {
        // loss = sum(x^2) -> grad = 2x, built directly on the tape
        let mut tape = Tape::new();
        let x = params.leaf(&mut tape, "x").unwrap();
        let sq = tape.hadamard(x, x).unwrap();
        let ones = tape.leaf(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap());
        let row = tape.matmul(sq, ones).unwrap(); // 1x1 for 1x2 x
        tape.backward(row).unwrap();
        tape
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", Matrix::row_vec(vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..200 {
            let tape = quadratic_grad_tape(&params);
            opt.step(&mut params, &tape).unwrap();
        }
        let x = params.value("x").unwrap();
        assert!(x.frobenius_norm() < 1e-2, "norm {}", x.frobenius_norm());
    }

    #[test]
    fn zero_lr_is_identity_even_with_weight_decay() {
        let mut params = ParamSet::new();
        params.insert("x", Matrix::row_vec(vec![3.0, -2.0]));
        let before = params.value("x").unwrap().clone();
        let mut opt = AdamW::new(0.0, 0.5);
        for _ in 0..5 {
            let tape = quadratic_grad_tape(&params);
            opt.step(&mut params, &tape).unwrap();
        }
        assert_eq!(params.value("x").unwrap().data(), before.data());
    }

    #[test]
    fn frozen_parameter_keeps_exact_bits() {
        let mut params = ParamSet::new();
        params.insert("x", Matrix::row_vec(vec![0.1, 0.2]));
        params.get_mut("x").unwrap().frozen = true;
        let before: Vec<u64> = params
            .value("x")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let mut opt = AdamW::new(0.05, 0.01);
        for _ in 0..50 {
            let tape = quadratic_grad_tape(&params);
            opt.step(&mut params, &tape).unwrap();
        }
        let after: Vec<u64> = params
            .value("x")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        // loss ignores "y": its grad is absent, so even with decay it stays
        // put (decay only applies where a gradient leaf exists).
        let mut params = ParamSet::new();
        params.insert("x", Matrix::row_vec(vec![1.0, 1.0]));
        params.insert("y", Matrix::row_vec(vec![5.0]));
        let before_y = params.value("y").unwrap().clone();
        let mut opt = AdamW::new(0.1, 0.1);
        let tape = quadratic_grad_tape(&params);
        opt.step(&mut params, &tape).unwrap();
        assert_eq!(params.value("y").unwrap().data(), before_y.data());
    }
}
