//! Classification and adversarial losses, and the Adam optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::networks::{NamedGradients, ParameterSet};
use crate::tensor::{Graph, NodeId, Real, Tensor};

/// Lower clamp applied to every probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-7;

/// One class index per row, materialized as a `batch × N` one-hot matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotLabels {
    classes: Vec<usize>,
    num_classes: usize,
}

impl OneHotLabels {
    pub fn from_indices(classes: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(OneHotLabels { classes, num_classes })
    }

    /// Parses a `batch × N` 0/1 matrix; every row must contain exactly one 1.
    pub fn from_matrix<T: Real>(m: &Tensor<T>) -> Result<Self> {
        let &[rows, n] = m.dims() else {
            return Err(Error::contract(format!("one-hot labels must be rank-2, got {}", m.shape())));
        };
        let mut classes = Vec::with_capacity(rows);
        for (r, row) in m.data().chunks(n).enumerate() {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == T::one())
                .map(|(i, _)| i)
                .collect();
            let only_binary = row.iter().all(|&v| v == T::one() || v == T::zero());
            match ones.as_slice() {
                [c] if only_binary => classes.push(*c),
                [] => return Err(Error::contract(format!("label row {r} has no 1"))),
                _ => return Err(Error::contract(format!("label row {r} is not one-hot"))),
            }
        }
        Ok(OneHotLabels { classes, num_classes: n })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn select(&self, rows: &[usize]) -> OneHotLabels {
        OneHotLabels {
            classes: rows.iter().map(|&r| self.classes[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let n = self.num_classes;
        let mut data = vec![T::zero(); self.classes.len() * n];
        for (r, &c) in self.classes.iter().enumerate() {
            data[r * n + c] = T::one();
        }
        Tensor::new(vec![self.classes.len(), n], data).expect("non-empty labels")
    }
}

fn clamped_log<T: Real>(g: &mut Graph<T>, p: NodeId) -> Result<NodeId> {
    let c = g.clamp(p, PROB_FLOOR, 1.0)?;
    g.log(c)
}

fn check_probabilities<T: Real>(g: &Graph<T>, p: NodeId, what: &'static str) -> Result<()> {
    match g.value(p).data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        Some(v) => Err(Error::numeric(what, format!("probability {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Mean over the batch of `−Σ_n y_n log p_n`, probabilities clamped at
/// [`PROB_FLOOR`].
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, probs: NodeId, labels: &OneHotLabels) -> Result<NodeId> {
    let &[rows, n] = g.shape(probs).dims() else {
        return Err(Error::contract(format!("cross_entropy: probs must be batch×N, got {}", g.shape(probs))));
    };
    if rows != labels.len() || n != labels.num_classes() {
        return Err(Error::contract(format!(
            "cross_entropy: probs {} vs {} labels over {} classes",
            g.shape(probs),
            labels.len(),
            labels.num_classes()
        )));
    }
    check_probabilities(g, probs, "cross_entropy")?;
    let logp = clamped_log(g, probs)?;
    let y = g.constant(labels.to_tensor());
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked, None)?;
    g.affine(total, -1.0 / rows as f64, 0.0)
}

/// Discriminator loss with source labelled 1 and target labelled 0:
/// `−mean log d_s − mean log(1 − d_t)`.
pub fn disc_adversarial_loss<T: Real>(g: &mut Graph<T>, d_source: NodeId, d_target: NodeId) -> Result<NodeId> {
    check_probabilities(g, d_source, "disc_adversarial_loss")?;
    check_probabilities(g, d_target, "disc_adversarial_loss")?;
    let ls = clamped_log(g, d_source)?;
    let ls = g.mean(ls, None)?;
    let fake = g.affine(d_target, -1.0, 1.0)?;
    let lt = clamped_log(g, fake)?;
    let lt = g.mean(lt, None)?;
    let both = g.add(ls, lt)?;
    g.affine(both, -1.0, 0.0)
}

/// Target-encoder loss with inverted labels: `−mean log d_t`.
pub fn encoder_adversarial_loss<T: Real>(g: &mut Graph<T>, d_target: NodeId) -> Result<NodeId> {
    check_probabilities(g, d_target, "encoder_adversarial_loss")?;
    let l = clamped_log(g, d_target)?;
    let l = g.mean(l, None)?;
    g.affine(l, -1.0, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, beta1: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParameterSet<T>) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| (name.to_string(), (vec![T::zero(); t.numel()], vec![T::zero(); t.numel()])))
            .collect();
        AdamState {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: &mut ParameterSet<T>,
    grads: &NamedGradients<T>,
) -> Result<()> {
    for name in params.names() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("adam_step: missing gradient for {name}")))?;
        if !state.moments.contains_key(name) {
            return Err(Error::contract(format!("adam_step: no optimizer state for {name}")));
        }
        if g.numel() != params.get(name)?.numel() {
            return Err(Error::contract(format!("adam_step: gradient shape mismatch for {name}")));
        }
    }
    if let Some(extra) = grads.0.keys().find(|k| params.get(k).is_err()) {
        return Err(Error::contract(format!("adam_step: gradient for unknown parameter {extra}")));
    }
    grads.check_finite()?;

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.epsilon));

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads.get(&name).expect("checked").data();
        let (m, v) = state.moments.get_mut(&name).expect("checked");
        let p = params.values_mut(&name)?;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
