//! Adam and AdamW with prune masks: masked weights and their moments stay at exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, Model};
use crate::pruning::PruneMask;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// AdamW-style decoupled decay when true, L2 added to the gradient otherwise.
    pub decoupled: bool,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<S: Scalar = f32> {
    pub first: Tensor<S>,
    pub second: Tensor<S>,
}

impl<S: Scalar> Moments<S> {
    fn zeros(shape: &[usize]) -> Self {
        Moments {
            first: Tensor::zeros(shape),
            second: Tensor::zeros(shape),
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<S: Scalar = f32> {
    /// `(weights, bias)` moments for each parameterized layer, in order.
    pub moments: Vec<(Moments<S>, Moments<S>)>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    /// Zeroes the moments and the counter.
    pub fn reset(&mut self) {
        for (w, b) in &mut self.moments {
            for m in [w, b] {
                m.first.data_mut().fill(S::zero());
                m.second.data_mut().fill(S::zero());
            }
        }
        self.step = 0;
    }
}

/// Bias-corrected factors for step `t`.
struct StepScale {
    lr: f64,
    beta1: f64,
    beta2: f64,
    correction1: f64,
    correction2_sqrt: f64,
    epsilon: f64,
}

/// One Adam update of a flat parameter slice.
///
/// `decay` selects whether weight decay applies (multiplicative weights only).
/// Entries where `mask` is false end with parameter and both moments at zero.
#[allow(clippy::too_many_arguments)]
fn update_slice<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    mask: Option<&PruneMask>,
    moments: &mut Moments<S>,
    scale: &StepScale,
    hyper: &OptimHyper,
    decay: bool,
) {
    let b1 = S::of(scale.beta1);
    let b2 = S::of(scale.beta2);
    let nb1 = S::of(1.0 - scale.beta1);
    let nb2 = S::of(1.0 - scale.beta2);
    let c1 = S::of(scale.correction1);
    let c2 = S::of(scale.correction2_sqrt);
    let eps = S::of(scale.epsilon);
    let lr = S::of(scale.lr);
    let l2 = S::of(if decay && !hyper.decoupled { hyper.weight_decay } else { 0.0 });
    let shrink = S::of(if decay && hyper.decoupled {
        1.0 - scale.lr * hyper.weight_decay
    } else {
        1.0
    });
    let m = moments.first.data_mut();
    let v = moments.second.data_mut();
    for i in 0..param.len() {
        if mask.is_some_and(|mk| !mk.is_active(i)) {
            param[i] = S::zero();
            m[i] = S::zero();
            v[i] = S::zero();
            continue;
        }
        let g = grad[i] + l2 * param[i];
        m[i] = b1 * m[i] + nb1 * g;
        v[i] = b2 * v[i] + nb2 * g * g;
        let m_hat = m[i] / c1;
        let denom = v[i].sqrt() / c2 + eps;
        param[i] = param[i] * shrink - lr * m_hat / denom;
    }
}

/// Adam optimizer that owns its state for one model.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar = f32> {
    pub hyper: OptimHyper,
    pub state: AdamState<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(hyper: OptimHyper) -> Self {
        Adam {
            hyper,
            state: AdamState {
                moments: Vec::new(),
                step: 0,
            },
        }
    }

    pub fn reset_state(&mut self) {
        self.state.reset();
    }

    /// Applies one masked update to every parameterized layer of `model`.
    pub fn step(&mut self, model: &mut Model<S>, grads: &Gradients<S>) -> Result<()> {
        let layer_grads: Vec<_> = grads.iter().flatten().collect();
        let params: Vec<_> = model.params_mut().collect();
        if layer_grads.len() != params.len() {
            return Err(Error::dim(format!(
                "{} gradient sets for {} parameterized layers",
                layer_grads.len(),
                params.len()
            )));
        }
        if self.state.moments.is_empty() {
            self.state.moments = params
                .iter()
                .map(|p| (Moments::zeros(p.weights.shape()), Moments::zeros(p.bias.shape())))
                .collect();
        }
        for (i, (p, g)) in params.iter().zip(&layer_grads).enumerate() {
            if p.weights.shape() != g.weights.shape()
                || p.bias.shape() != g.bias.shape()
                || self.state.moments[i].0.first.shape() != p.weights.shape()
            {
                return Err(Error::dim(format!(
                    "layer {i}: weights {:?} / bias {:?} against gradients {:?} / {:?}",
                    p.weights.shape(),
                    p.bias.shape(),
                    g.weights.shape(),
                    g.bias.shape()
                )));
            }
        }

        self.state.step += 1;
        let t = self.state.step as i32;
        let h = self.hyper;
        let scale = StepScale {
            lr: h.learning_rate,
            beta1: h.beta1,
            beta2: h.beta2,
            correction1: 1.0 - h.beta1.powi(t),
            correction2_sqrt: (1.0 - h.beta2.powi(t)).sqrt(),
            epsilon: h.epsilon,
        };
        for ((p, g), (mw, mb)) in params.into_iter().zip(layer_grads).zip(&mut self.state.moments) {
            update_slice(p.weights.data_mut(), g.weights.data(), Some(&p.mask), mw, &scale, &h, true);
            update_slice(p.bias.data_mut(), g.bias.data(), None, mb, &scale, &h, false);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, Architecture, ParamGrads};
    use crate::pruning::prune_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar Adam in f64.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, w: f64, g: f64, lr: f64) -> f64 {
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let m_hat = self.m / (1.0 - b1.powi(self.t));
            let v_hat = self.v / (1.0 - b2.powi(self.t));
            w - lr * m_hat / (v_hat.sqrt() + eps)
        }
    }

    fn grads_like(model: &Model, rng: &mut ChaCha8Rng, scale: f32) -> Gradients {
        model
            .layers()
            .iter()
            .map(|l| {
                l.params().map(|p| ParamGrads {
                    weights: p.weights.map(|_| scale * rng.gen_range(-1.0..1.0)),
                    bias: p.bias.map(|_| scale * rng.gen_range(-1.0..1.0)),
                })
            })
            .collect()
    }

    fn single_weight_model(w: f32) -> Model {
        let mut m = build_model(&Architecture::Tabular { inputs: 1, hidden: 1, classes: 2 }, 0).unwrap();
        for p in m.params_mut() {
            p.weights.data_mut().fill(w);
        }
        m
    }

    #[test]
    fn first_step_from_zero() {
        let mut m = single_weight_model(0.0);
        let grads: Gradients = m
            .layers()
            .iter()
            .map(|l| {
                l.params().map(|p| ParamGrads {
                    weights: p.weights.map(|_| 1.0),
                    bias: p.bias.map(|_| 0.0),
                })
            })
            .collect();
        let mut adam = Adam::new(OptimHyper::default());
        adam.step(&mut m, &grads).unwrap();
        let w = m.params().next().unwrap().weights.data()[0] as f64;
        let want = ScalarAdam { m: 0.0, v: 0.0, t: 0 }.step(0.0, 1.0, 1e-3);
        assert!((want - -9.99999990e-4).abs() < 1e-12);
        assert!((w - want).abs() < 1e-9, "{w} vs {want}");
    }

    #[test]
    fn masked_weight_stays_zero() {
        let mut m = single_weight_model(0.0);
        for p in m.params_mut() {
            p.mask = PruneMask::from_vec(vec![false; p.mask.len()]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut adam = Adam::new(OptimHyper::default());
        for _ in 0..5 {
            let g = grads_like(&m, &mut rng, 3.0);
            adam.step(&mut m, &g).unwrap();
        }
        for (p, (mw, _)) in m.params().zip(&adam.state.moments) {
            assert!(p.weights.data().iter().all(|w| w.to_bits() == 0));
            assert!(mw.first.data().iter().chain(mw.second.data()).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut m = build_model(&Architecture::tabular(4, 2), 1).unwrap();
        let before = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = grads_like(&m, &mut rng, 0.0);
        let mut adam = Adam::new(OptimHyper::default());
        adam.step(&mut m, &g).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn reset_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fresh_model = build_model(&Architecture::tabular(3, 2), 2).unwrap();
        let g1 = grads_like(&fresh_model, &mut rng, 1.0);
        let g2 = grads_like(&fresh_model, &mut rng, 1.0);

        let mut m = fresh_model.clone();
        let mut adam = Adam::new(OptimHyper::default());
        adam.step(&mut m, &g1).unwrap();
        adam.step(&mut m, &g1).unwrap();
        adam.reset_state();
        let once = adam.state.clone();
        adam.reset_state();
        assert_eq!(adam.state, once);
        assert_eq!(adam.state.step, 0);

        let snapshot = m.clone();
        let zero = grads_like(&m, &mut rng, 0.0);
        adam.step(&mut m, &zero).unwrap();
        assert_eq!(m, snapshot);

        // After reset, an update equals a fresh optimizer's first update.
        adam.reset_state();
        let mut a = snapshot.clone();
        adam.step(&mut a, &g2).unwrap();
        let mut b = snapshot.clone();
        Adam::new(OptimHyper::default()).step(&mut b, &g2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut m = build_model(&Architecture::tabular(3, 2), 0).unwrap();
        let other = build_model(&Architecture::tabular(4, 2), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = grads_like(&other, &mut rng, 1.0);
        assert!(matches!(Adam::new(OptimHyper::default()).step(&mut m, &g), Err(Error::Dimension(_))));
    }

    #[test]
    fn matches_scalar_oracle_over_many_steps() {
        let mut m: Model<f64> = build_model(&Architecture::tabular(3, 2), 8).unwrap().cast();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut oracle: Vec<(f64, ScalarAdam)> = m
            .params()
            .flat_map(|p| p.weights.data().iter().chain(p.bias.data()).copied().collect::<Vec<_>>())
            .map(|w| (w, ScalarAdam { m: 0.0, v: 0.0, t: 0 }))
            .collect();
        let mut adam = Adam::<f64>::new(OptimHyper::default());
        for _ in 0..50 {
            let g: Gradients<f64> = m
                .layers()
                .iter()
                .map(|l| {
                    l.params().map(|p| ParamGrads {
                        weights: p.weights.map(|_| rng.gen_range(-1.0..1.0)),
                        bias: p.bias.map(|_| rng.gen_range(-1.0..1.0)),
                    })
                })
                .collect();
            adam.step(&mut m, &g).unwrap();
            let flat_g: Vec<f64> = g
                .iter()
                .flatten()
                .flat_map(|pg| pg.weights.data().iter().chain(pg.bias.data()).copied().collect::<Vec<_>>())
                .collect();
            for ((w, o), &gi) in oracle.iter_mut().zip(&flat_g) {
                *w = o.step(*w, gi, 1e-3);
            }
        }
        let flat: Vec<f64> = m
            .params()
            .flat_map(|p| p.weights.data().iter().chain(p.bias.data()).copied().collect::<Vec<_>>())
            .collect();
        for (got, (want, _)) in flat.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn decoupled_decay_spares_biases() {
        let mut m = build_model(&Architecture::tabular(3, 2), 8).unwrap();
        for p in m.params_mut() {
            p.bias.data_mut().fill(0.5);
        }
        let before = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = grads_like(&m, &mut rng, 0.0);
        let hyper = OptimHyper { weight_decay: 0.1, decoupled: true, ..OptimHyper::default() };
        Adam::new(hyper).step(&mut m, &zero).unwrap();
        for (p, q) in m.params().zip(before.params()) {
            assert_eq!(p.bias, q.bias);
            for (a, b) in p.weights.data().iter().zip(q.weights.data()) {
                assert_eq!(*a, b * (1.0 - 1e-3 * 0.1) as f32);
            }
        }
    }

    #[test]
    fn masks_hold_through_long_random_runs() {
        let mut m = build_model(&Architecture::tabular(10, 3), 5).unwrap();
        prune_model(&mut m, 0.6);
        let masks: Vec<PruneMask> = m.params().map(|p| p.mask.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut adam = Adam::new(OptimHyper { weight_decay: 0.01, ..OptimHyper::default() });
        for _ in 0..1_000 {
            let g = grads_like(&m, &mut rng, 5.0);
            adam.step(&mut m, &g).unwrap();
        }
        for (p, mask) in m.params().zip(&masks) {
            for (w, keep) in p.weights.data().iter().zip(mask.as_slice()) {
                if !keep {
                    assert_eq!(w.to_bits(), 0);
                }
            }
        }
    }
}
