//! Optimizers, gradient clipping and the plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParameters};
use serde::{Deserialize, Serialize};

/// How the RMS-style "momentum" setting is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmsReading {
    /// The value is the squared-gradient smoothing constant; no momentum.
    Smoothing,
    /// The value is heavy-ball momentum; smoothing stays at 0.99.
    HeavyBall,
}

pub const ADAM_BETAS: (f32, f32) = (0.9, 0.999);
pub const OPT_EPS: f32 = 1e-8;
const HEAVY_BALL_ALPHA: f32 = 0.99;

/// Optimizer with its per-parameter state. Slots are aligned with
/// [`ModelParameters::tensors`]; non-trainable tensors get empty slots.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam { lr: f64, weight_decay: f32, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>> },
    RmsProp { lr: f64, weight_decay: f32, alpha: f32, momentum: f32, sq: Vec<Vec<f32>>, buf: Vec<Vec<f32>> },
}

fn slots(params: &ModelParameters<f32>) -> Vec<Vec<f32>> {
    params.tensors.iter().map(|t| if t.role.trainable() { vec![0.0; t.data.len()] } else { Vec::new() }).collect()
}

impl Optimizer {
    pub fn adam(params: &ModelParameters<f32>, lr: f64, weight_decay: f64) -> Self {
        Optimizer::Adam { lr, weight_decay: weight_decay as f32, t: 0, m: slots(params), v: slots(params) }
    }

    pub fn rmsprop(params: &ModelParameters<f32>, lr: f64, weight_decay: f64, value: f64, reading: RmsReading) -> Self {
        let (alpha, momentum) = match reading {
            RmsReading::Smoothing => (value as f32, 0.0),
            RmsReading::HeavyBall => (HEAVY_BALL_ALPHA, value as f32),
        };
        let buf = if momentum > 0.0 { slots(params) } else { vec![Vec::new(); params.tensors.len()] };
        Optimizer::RmsProp { lr, weight_decay: weight_decay as f32, alpha, momentum, sq: slots(params), buf }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::RmsProp { lr, .. } => *lr,
        }
    }

    pub fn set_lr(&mut self, new: f64) {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::RmsProp { lr, .. } => *lr = new,
        }
    }

    /// Applies one update to every trainable tensor.
    pub fn step(&mut self, params: &mut ModelParameters<f32>, grads: &Gradients<f32>) -> Result<()> {
        if grads.tensors.len() != params.tensors.len() {
            return Err(Error::Contract("gradient set does not match parameters".into()));
        }
        match self {
            Optimizer::Adam { lr, weight_decay, t, m, v } => {
                *t += 1;
                let (b1, b2) = ADAM_BETAS;
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                let lr = *lr as f32;
                for (i, tensor) in params.tensors.iter_mut().enumerate() {
                    if !tensor.role.trainable() {
                        continue;
                    }
                    for (((p, g), mi), vi) in tensor.data.iter_mut().zip(&grads.tensors[i]).zip(&mut m[i]).zip(&mut v[i]) {
                        let g = *g + *weight_decay * *p;
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + OPT_EPS);
                    }
                }
            }
            Optimizer::RmsProp { lr, weight_decay, alpha, momentum, sq, buf } => {
                let lr = *lr as f32;
                for (i, tensor) in params.tensors.iter_mut().enumerate() {
                    if !tensor.role.trainable() {
                        continue;
                    }
                    for (j, p) in tensor.data.iter_mut().enumerate() {
                        let g = grads.tensors[i][j] + *weight_decay * *p;
                        let s = &mut sq[i][j];
                        *s = *alpha * *s + (1.0 - *alpha) * g * g;
                        let step = g / (s.sqrt() + OPT_EPS);
                        if *momentum > 0.0 {
                            let b = &mut buf[i][j];
                            *b = *momentum * *b + step;
                            *p -= lr * *b;
                        } else {
                            *p -= lr * step;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Flattened state slots, for serialization.
    pub(crate) fn state_slots(&self) -> Vec<&Vec<f32>> {
        match self {
            Optimizer::Adam { m, v, .. } => m.iter().chain(v.iter()).collect(),
            Optimizer::RmsProp { sq, buf, .. } => sq.iter().chain(buf.iter()).collect(),
        }
    }

    pub(crate) fn state_slots_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Optimizer::Adam { m, v, .. } => m.iter_mut().chain(v.iter_mut()).collect(),
            Optimizer::RmsProp { sq, buf, .. } => sq.iter_mut().chain(buf.iter_mut()).collect(),
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale((max_norm / (norm + 1e-12)) as f32);
    }
    norm
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved by more than `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("plateau factor {factor} outside (0, 1)")));
        }
        if patience == 0 {
            return Err(Error::Config("plateau patience must be ≥ 1".into()));
        }
        Ok(PlateauScheduler { factor, patience, min_delta, best: f64::INFINITY, bad_epochs: 0 })
    }

    /// Feeds one epoch's monitored loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tiny() -> ModelParameters<f32> {
        build_model(&ModelConfig { base_width: 4, depth: 2, se_reduction: 2, ..Default::default() }, 1).unwrap()
    }

    fn ones(p: &ModelParameters<f32>, v: f32) -> Gradients<f32> {
        Gradients { tensors: p.tensors.iter().map(|t| vec![v; t.data.len()]).collect() }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut p = tiny();
        let before = p.clone();
        let g = ones(&p, 0.3);
        let mut adam = Optimizer::adam(&p, 0.0, 1e-8);
        let mut rms = Optimizer::rmsprop(&p, 0.0, 1e-8, 0.999, RmsReading::HeavyBall);
        for _ in 0..5 {
            adam.step(&mut p, &g).unwrap();
            rms.step(&mut p, &g).unwrap();
        }
        for (a, b) in before.tensors.iter().zip(&p.tensors) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = tiny();
        let before = p.clone();
        let mut adam = Optimizer::adam(&p, 1e-3, 0.0);
        let g = ones(&p, 2.0);
        adam.step(&mut p, &g).unwrap();
        let t = p.tensors.iter().position(|t| t.role.trainable()).unwrap();
        assert!((before.tensors[t].data[0] - p.tensors[t].data[0] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn clipping_hits_target_norm() {
        let p = tiny();
        let n = p.tensors.iter().map(|t| t.data.len()).sum::<usize>() as f64;
        let mut g = ones(&p, (10.0 / n.sqrt()) as f32);
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 10.0).abs() < 1e-3);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
        let mut small = ones(&p, 1e-6);
        let before = small.clone();
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, before);
    }

    #[test]
    fn plateau_decays_by_factor() {
        let mut s = PlateauScheduler::new(0.1, 3, 1e-5).unwrap();
        let mut lr = 1.0;
        let mut seq = Vec::new();
        for loss in [1.0, 0.9, 0.9, 0.9, 0.9, 0.8, 0.8, 0.8, 0.8] {
            lr = s.observe(loss, lr);
            seq.push(lr);
        }
        assert_eq!(seq, vec![1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1, 0.1 * 0.1]);
    }

    proptest::proptest! {
        #[test]
        fn plateau_lr_only_drops_by_factor(losses in proptest::collection::vec(0.0f64..2.0, 1..60), patience in 1usize..6) {
            let mut s = PlateauScheduler::new(0.1, patience, 1e-5).unwrap();
            let mut lr = 1e-3;
            for loss in losses {
                let next = s.observe(loss, lr);
                proptest::prop_assert!(next == lr || next == lr * 0.1);
                lr = next;
            }
        }

        #[test]
        fn clipped_norm_never_exceeds_max(scale in 1e-4f32..100.0, max in 0.1f64..5.0) {
            let p = tiny();
            let mut g = Gradients {
                tensors: p.tensors.iter().enumerate().map(|(i, t)| (0..t.data.len()).map(|k| scale * (((i * 31 + k * 17) % 13) as f32 - 6.0)).collect()).collect(),
            };
            clip_grad_norm(&mut g, max);
            proptest::prop_assert!(g.global_norm() <= max + 1e-6 * max.max(1.0));
        }
    }
}
