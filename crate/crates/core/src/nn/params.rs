//! Named trainable parameters and the Adam optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to: the graph network, the
/// sequence model or the aggregator head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Gcn,
    Lstm,
    Head,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Gcn => 0,
            ParamGroup::Lstm => 1,
            ParamGroup::Head => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamGroup::Gcn),
            1 => Some(ParamGroup::Lstm),
            2 => Some(ParamGroup::Head),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    value: Arc<Matrix>,
    m: Matrix,
    v: Matrix,
}

impl Parameter {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn first_moment(&self) -> &Matrix {
        &self.m
    }

    pub fn second_moment(&self) -> &Matrix {
        &self.v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    step: u64,
}

/// Tape variables for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, param: usize) -> Var {
        self.0[param]
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let (r, c) = value.shape();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            group,
            value: Arc::new(value),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        self.params.len() - 1
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.add(name, group, m)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize) -> usize {
        self.add(name, group, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn value(&self, idx: usize) -> &Matrix {
        &self.params[idx].value
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| self.value(i))
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Matrix {
        Arc::make_mut(&mut self.params[idx].value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a leaf of `tape`, sharing storage.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf_shared(p.value.clone())).collect())
    }

    /// Per-parameter gradients in store order.
    pub fn collect(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Option<Matrix>> {
        (0..self.params.len()).map(|i| grads.take(bound.var(i))).collect()
    }

    /// Values only, for cheap snapshots.
    pub fn snapshot(&self) -> Vec<Arc<Matrix>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Arc<Matrix>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            assert_eq!(p.value.shape(), s.shape());
            p.value = s.clone();
        }
    }

    /// One bias-corrected Adam update. A missing gradient counts as zero.
    pub fn adam_step(&mut self, grads: &[Option<Matrix>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{} gradients for {} parameters", grads.len(), self.params.len()),
            });
        }
        let mut norm_sq = 0.0;
        for (p, g) in self.params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        detail: format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()),
                    });
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
                norm_sq += g.frobenius_sq();
            }
        }
        let scale = match cfg.clip_norm {
            Some(max) if norm_sq.sqrt() > max => max / norm_sq.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(grads) {
            let value = Arc::make_mut(&mut p.value);
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            let x = value.data_mut();
            for k in 0..x.len() {
                let gk = g.as_ref().map_or(0.0, |g| g.data()[k] * scale);
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                x[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("x", ParamGroup::Head, Matrix::new(1, 1, vec![x]));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        s.adam_step(&[Some(Matrix::zeros(1, 1))], &AdamConfig::default()).unwrap();
        assert_eq!(s.value(0).item(), 0.7);
        s.adam_step(&[None], &AdamConfig::default()).unwrap();
        assert_eq!(s.value(0).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.3, -2.0, 1e-3] {
            let mut s = scalar_store(1.0);
            let cfg = AdamConfig::default();
            s.adam_step(&[Some(Matrix::new(1, 1, vec![g]))], &cfg).unwrap();
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((s.value(0).item() - expected).abs() < 1e-15);
            assert!((s.value(0).item() - (1.0 - cfg.lr * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn two_steps_match_reference() {
        // reference: the textbook recurrences written out for two steps
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let g = [0.5, -1.5];
        let mut x = [0.2, -0.4];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=2 {
            for k in 0..2 {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / (1.0 - f64::powi(b1, t));
                let vh = v[k] / (1.0 - f64::powi(b2, t));
                x[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        let mut s = ParameterStore::new();
        s.add("w", ParamGroup::Gcn, Matrix::new(1, 2, vec![0.2, -0.4]));
        let grad = Matrix::new(1, 2, g.to_vec());
        for _ in 0..2 {
            s.adam_step(&[Some(grad.clone())], &AdamConfig::default()).unwrap();
        }
        for k in 0..2 {
            assert!((s.value(0).data()[k] - x[k]).abs() <= 1e-12);
        }
        assert_eq!(s.step(), 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        match s.adam_step(&[Some(Matrix::new(1, 1, vec![f64::NAN]))], &AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value(0).item(), 1.0);
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        let mut a = scalar_store(0.0);
        let mut b = scalar_store(0.0);
        let clip = AdamConfig {
            clip_norm: Some(1.0),
            ..Default::default()
        };
        a.adam_step(&[Some(Matrix::new(1, 1, vec![100.0]))], &clip).unwrap();
        b.adam_step(&[Some(Matrix::new(1, 1, vec![1.0]))], &AdamConfig::default()).unwrap();
        assert!((a.value(0).item() - b.value(0).item()).abs() < 1e-15);
    }
}
