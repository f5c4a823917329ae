use super::params::{Bound, ParamId, ParamSet};
use crate::autodiff::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { lr: f32, momentum: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn sgd(lr: f32) -> Self {
        OptimizerKind::SgdMomentum { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f32, beta1: f32, beta2: f32) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub steps: u64,
    first: Vec<Option<Vec<f32>>>,
    second: Vec<Option<Vec<f32>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to every trainable entry of `params` that has a
    /// gradient in `grads`. All gradients are validated before anything is
    /// written, so a non-finite gradient leaves `params` untouched.
    pub fn step(&mut self, params: &mut ParamSet, bound: &Bound, grads: &Gradients) -> Result<()> {
        let updates: Vec<(ParamId, &[f32])> = params
            .param_ids()
            .filter_map(|id| {
                let v = bound.get(id)?;
                grads.get(v).map(|g| (id, g.data()))
            })
            .collect();
        for (id, g) in &updates {
            if g.len() != params.get(*id).numel() {
                return Err(Error::shape("optimizer_step", params.get(*id).shape(), &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: params.name(*id).to_string(),
                });
            }
        }
        self.steps += 1;
        let n = params.entries().len();
        if self.first.len() < n {
            self.first.resize(n, None);
            self.second.resize(n, None);
        }
        let t = self.steps as i32;
        for (id, g) in updates {
            let idx = params.ids().position(|p| p == id).unwrap();
            let w = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { lr, momentum } => {
                    if momentum == 0.0 {
                        for (wi, gi) in w.iter_mut().zip(g) {
                            *wi -= lr * gi;
                        }
                    } else {
                        let m = self.first[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                        for ((wi, gi), mi) in w.iter_mut().zip(g).zip(m.iter_mut()) {
                            *mi = momentum * *mi + gi;
                            *wi -= lr * *mi;
                        }
                    }
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let m = self.first[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        w[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn quadratic_step(opt: &mut Optimizer, params: &mut ParamSet) -> f32 {
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let w = bound.vars()[0];
        let loss = tape.sum(tape.square(w).unwrap());
        let grads = tape.backward(loss).unwrap();
        opt.step(params, &bound, &grads).unwrap();
        tape.item(loss)
    }

    fn single(value: Vec<f32>) -> ParamSet {
        let mut p = ParamSet::new();
        let n = value.len();
        p.add_param("w", Tensor::new([n], value).unwrap());
        p
    }

    #[test]
    fn sgd_hand_update() {
        let mut p = single(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1));
        quadratic_step(&mut opt, &mut p);
        assert!((p.entries()[0].value.data()[0] - 0.8).abs() < 1e-7);
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = single(vec![0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(0.1, 0.9, 0.999));
        quadratic_step(&mut opt, &mut p);
        assert_eq!(p.entries()[0].value.data(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g0 in [1e-3f32, 0.5, 40.0] {
            // d(w²)/dw = 2w
            let mut p = single(vec![g0 / 2.0]);
            let mut opt = Optimizer::new(OptimizerKind::adam(0.01, 0.9, 0.999));
            quadratic_step(&mut opt, &mut p);
            let moved = g0 / 2.0 - p.entries()[0].value.data()[0];
            assert!((moved - 0.01).abs() < 1e-4, "{g0}: {moved}");
        }
    }

    #[test]
    fn sgd_converges_on_bowl() {
        let mut p = single(vec![0.6, -0.8]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1));
        let mut last = f32::INFINITY;
        for _ in 0..500 {
            let l = quadratic_step(&mut opt, &mut p);
            assert!(l <= last);
            last = l;
        }
        let norm: f32 = p.entries()[0].value.data().iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(norm < 1e-3);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(vec![1.0]);
        let tape = Tape::new();
        let bound = p.bind(&tape, true);
        let w = bound.vars()[0];
        let inf = tape.constant(Tensor::scalar(f32::INFINITY));
        let loss = tape.sum(tape.mul(w, inf).unwrap());
        let grads = tape.backward(loss).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1));
        match opt.step(&mut p, &bound, &grads) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.entries()[0].value.data(), &[1.0]);
    }
}
