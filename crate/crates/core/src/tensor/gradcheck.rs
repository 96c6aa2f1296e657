//! Central finite-difference verification of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, OpKind, Padding, Real, Tensor, Wide};
use crate::error::{Error, Result};

/// Pre-activations closer to a relu kink than this are resampled.
pub const KINK_MARGIN: f64 = 1e-3;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A graph builder that can be replayed at any precision.
pub trait GraphFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[NodeId]) -> Result<NodeId>;
}

/// Compares the gradient recorded by an `f64` graph against central
/// differences `(f(x+εe_i) − f(x−εe_i)) / 2ε` over every element of every
/// input, returning the worst relative error. The differences are evaluated
/// in double-double so cancellation in `f(x+εe_i) − f(x−εe_i)` does not
/// swamp small gradient entries.
#[derive(Clone, Copy, Debug)]
pub struct GradChecker {
    pub eps: f64,
    pub fault: Option<OpKind>,
}

impl Default for GradChecker {
    fn default() -> Self {
        GradChecker {
            eps: DEFAULT_EPS,
            fault: None,
        }
    }
}

impl GradChecker {
    pub fn new(eps: f64) -> Self {
        GradChecker { eps, fault: None }
    }

    fn eval<F: GraphFn>(&self, f: &F, inputs: &[Tensor<Wide>]) -> Result<Wide> {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f.build(&mut g, &ids)?;
        g.value(out).item()
    }

    pub fn check<F: GraphFn>(&self, f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
        if self.eps <= 0.0 {
            return Err(Error::contract("grad_check: eps must be positive"));
        }
        let mut g = Graph::<f64>::new();
        if let Some(k) = self.fault {
            g.inject_fault(k);
        }
        let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f.build(&mut g, &ids)?;
        let grads = g.backward(loss, &ids)?;

        let wide: Vec<Tensor<Wide>> = inputs.iter().map(Tensor::cast).collect();
        let eps = Wide::from(self.eps);
        let mut worst: f64 = 0.0;
        let mut probe = wide.clone();
        for (k, &id) in ids.iter().enumerate() {
            let analytic = grads.get(id).expect("requested").data().to_vec();
            for (i, &a) in analytic.iter().enumerate() {
                let base = wide[k].data()[i];
                probe[k] = with_element(&wide[k], i, base + eps);
                let up = self.eval(f, &probe)?;
                probe[k] = with_element(&wide[k], i, base - eps);
                let down = self.eval(f, &probe)?;
                probe[k] = wide[k].clone();
                let numeric = (up - down).quotient(eps + eps).as_f64();
                worst = worst.max(relative_error(a, numeric));
            }
        }
        Ok(worst)
    }
}

fn with_element<T: Real>(t: &Tensor<T>, i: usize, v: T) -> Tensor<T> {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor::new(t.dims().to_vec(), data).expect("same shape")
}

/// Worst relative error of `f` at `inputs` with step `eps`.
pub fn grad_check<F: GraphFn>(f: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    GradChecker::new(eps).check(f, inputs)
}

#[derive(Clone, Copy, Debug)]
pub struct TrialSettings {
    pub trials: usize,
    pub seed: u64,
    pub checker: GradChecker,
    /// Minimum distance of every relu/leaky_relu pre-activation from 0.
    pub kink_margin: f64,
}

impl Default for TrialSettings {
    fn default() -> Self {
        TrialSettings {
            trials: 100,
            seed: 0x5adda,
            checker: GradChecker::default(),
            kink_margin: KINK_MARGIN,
        }
    }
}

pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn uniform(rng: &mut impl Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(lo..hi)).expect("valid dims")
}

/// Uniform in `±[margin, hi]`.
fn away_from_zero(rng: &mut impl Rng, dims: &[usize], margin: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| {
        let m = rng.random_range(margin..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("valid dims")
}

/// Runs `trials` random instances of an op. Each trial projects the op's
/// output onto fixed random weights of magnitude in [0.5, 1] so every output
/// element contributes to a scalar loss. Instances with a relu pre-activation inside the kink
/// margin are redrawn.
pub fn run_trials(
    settings: &TrialSettings,
    mut gen: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    op: &impl GraphFn,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..settings.trials {
        let mut rng = trial_rng(settings.seed, trial);
        let (inputs, weights) = loop {
            let inputs = gen(&mut rng);
            let mut g = Graph::new();
            let ids: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = op.build(&mut g, &ids)?;
            if g.nearest_kink().is_some_and(|d| d < settings.kink_margin) {
                continue;
            }
            // magnitudes kept ≥ 0.5 so a scalar output is never scaled towards zero
            let weights = away_from_zero(&mut rng, g.shape(out).dims(), 0.5, 1.0);
            break (inputs, weights);
        };
        let projected = Projected { op, weights };
        worst = worst.max(settings.checker.check(&projected, &inputs)?);
    }
    Ok(worst)
}

struct Projected<'a, F> {
    op: &'a F,
    weights: Tensor<f64>,
}

impl<F: GraphFn> GraphFn for Projected<'_, F> {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let out = self.op.build(g, inputs)?;
        let w = g.constant(self.weights.cast());
        let p = g.mul(out, w)?;
        g.sum(p, None)
    }
}

/// One registered gradient check.
pub struct OpCheck {
    pub name: &'static str,
    pub kind: OpKind,
    pub run: fn(&TrialSettings) -> Result<f64>,
}

macro_rules! check {
    ($kind:expr, $gen:expr, |$g:ident, $x:ident| $body:expr) => {{
        struct Op;
        impl GraphFn for Op {
            fn build<T: Real>(&self, $g: &mut Graph<T>, $x: &[NodeId]) -> Result<NodeId> {
                $body
            }
        }
        OpCheck {
            name: $kind.name(),
            kind: $kind,
            run: |s| run_trials(s, $gen, &Op),
        }
    }};
}

/// Checks for every differentiable tensor operation, one per [`OpKind`].
pub fn op_checks() -> Vec<OpCheck> {
    vec![
        check!(
            OpKind::Add,
            |r| {
                let bias = r.random_bool(0.5);
                vec![uniform(r, &[3, 3], -1.0, 1.0), uniform(r, if bias { &[3] } else { &[3, 3] }, -1.0, 1.0)]
            },
            |g, x| g.add(x[0], x[1])
        ),
        check!(
            OpKind::Sub,
            |r| {
                let bias = r.random_bool(0.5);
                vec![uniform(r, &[3, 3], -1.0, 1.0), uniform(r, if bias { &[3] } else { &[3, 3] }, -1.0, 1.0)]
            },
            |g, x| g.sub(x[0], x[1])
        ),
        check!(
            OpKind::Mul,
            |r| {
                let bias = r.random_bool(0.5);
                vec![uniform(r, &[3, 3], -1.0, 1.0), uniform(r, if bias { &[3] } else { &[3, 3] }, -1.0, 1.0)]
            },
            |g, x| g.mul(x[0], x[1])
        ),
        check!(
            OpKind::MatMul,
            |r| vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3, 2], -1.0, 1.0)],
            |g, x| g.matmul(x[0], x[1])
        ),
        check!(
            OpKind::Conv2d,
            |r| vec![uniform(r, &[1, 6, 6, 2], -1.0, 1.0), uniform(r, &[4, 4, 2, 3], -1.0, 1.0)],
            |g, x| g.conv2d(x[0], x[1], 2, Padding::Same)
        ),
        check!(
            OpKind::Conv2dTranspose,
            |r| vec![uniform(r, &[1, 3, 3, 3], -1.0, 1.0), uniform(r, &[4, 4, 2, 3], -1.0, 1.0)],
            |g, x| g.conv2d_transpose(x[0], x[1], 2, Padding::Same)
        ),
        check!(
            OpKind::Relu,
            |r| vec![away_from_zero(r, &[4, 5], KINK_MARGIN, 2.0)],
            |g, x| g.relu(x[0])
        ),
        check!(
            OpKind::LeakyRelu,
            |r| vec![away_from_zero(r, &[4, 5], KINK_MARGIN, 2.0)],
            |g, x| g.leaky_relu(x[0], 0.2)
        ),
        check!(
            OpKind::Exp,
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0)],
            |g, x| g.exp(x[0])
        ),
        check!(
            OpKind::Log,
            |r| vec![uniform(r, &[3, 4], 0.1, 3.0)],
            |g, x| g.log(x[0])
        ),
        check!(
            OpKind::Sigmoid,
            |r| vec![uniform(r, &[3, 4], -4.0, 4.0)],
            |g, x| g.sigmoid(x[0])
        ),
        check!(
            OpKind::Sum,
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |g, x| {
                let s = g.sum(x[0], Some(1))?;
                let t = g.sum(x[0], None)?;
                let t = g.reshape(t, vec![1, 1])?;
                let s = g.reshape(s, vec![8, 1])?;
                g.matmul(s, t)
            }
        ),
        check!(
            OpKind::Mean,
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |g, x| {
                let m = g.mean(x[0], Some(2))?;
                let t = g.mean(x[0], None)?;
                let t = g.reshape(t, vec![1, 1])?;
                let m = g.reshape(m, vec![6, 1])?;
                g.matmul(m, t)
            }
        ),
        check!(
            OpKind::LogSumExp,
            |r| vec![uniform(r, &[3, 4], -3.0, 3.0)],
            |g, x| g.logsumexp(x[0], Some(1))
        ),
        check!(
            OpKind::Softmax,
            |r| vec![uniform(r, &[3, 4], -3.0, 3.0)],
            |g, x| g.softmax(x[0], 1)
        ),
        check!(
            OpKind::GlobalAvgPool,
            |r| vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0)],
            |g, x| g.global_avg_pool(x[0])
        ),
        check!(
            OpKind::Reshape,
            |r| vec![uniform(r, &[2, 2, 3], -1.0, 1.0)],
            |g, x| {
                let y = g.reshape(x[0], vec![3, 4])?;
                g.mul(y, y)
            }
        ),
        check!(
            OpKind::Affine,
            |r| vec![uniform(r, &[3, 3], -1.0, 1.0)],
            |g, x| g.affine(x[0], -1.7, 0.3)
        ),
        check!(
            OpKind::Clamp,
            |r| {
                let mut t = uniform(r, &[4, 4], -1.0, 2.0);
                // keep clear of the bounds at 0 and 1
                while t.data().iter().any(|&v| v.abs() < KINK_MARGIN || (v - 1.0).abs() < KINK_MARGIN) {
                    t = uniform(r, &[4, 4], -1.0, 2.0);
                }
                vec![t]
            },
            |g, x| {
                let c = g.clamp(x[0], 0.0, 1.0)?;
                g.mul(c, x[0])
            }
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Dot(Tensor<f64>);

    impl GraphFn for Dot {
        fn build<T: Real>(&self, g: &mut Graph<T>, ids: &[NodeId]) -> Result<NodeId> {
            let w = g.constant(self.0.cast());
            let p = g.mul(ids[0], w)?;
            g.sum(p, None)
        }
    }

    struct Total;

    impl GraphFn for Total {
        fn build<T: Real>(&self, g: &mut Graph<T>, ids: &[NodeId]) -> Result<NodeId> {
            g.sum(ids[0], None)
        }
    }

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let w = Tensor::new(vec![4], vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let err = grad_check(&Dot(w), &[x], 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn every_op_check_passes() {
        let settings = TrialSettings {
            trials: 10,
            ..TrialSettings::default()
        };
        for check in op_checks() {
            let err = (check.run)(&settings).unwrap();
            assert!(err < 1e-6, "{}: {err}", check.name);
        }
    }

    #[test]
    fn every_differentiable_op_is_registered_once() {
        let checks = op_checks();
        let mut kinds: Vec<_> = checks.iter().map(|c| c.kind).collect();
        kinds.sort();
        kinds.dedup();
        assert_eq!(kinds.len(), checks.len());
        assert_eq!(kinds.len(), OpKind::DIFFERENTIABLE.len());
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let settings = TrialSettings {
            trials: 3,
            checker: GradChecker {
                fault: Some(OpKind::Mul),
                ..GradChecker::default()
            },
            ..TrialSettings::default()
        };
        let mul = op_checks().into_iter().find(|c| c.kind == OpKind::Mul).unwrap();
        let err = (mul.run)(&settings).unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(&Total, &[x], 0.0).is_err());
    }
}
