//! Training objectives. Every loss returns its value together with the
//! gradient with respect to the prediction it is differentiated against.

use crate::error::{Error, Result};
use crate::nn::layers;
use crate::nn::{Real, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_perceptual: f64,
    pub smooth_l1_beta: f64,
    /// `(background, building)`; `None` means inverse pixel frequency on the
    /// labeled training subset.
    pub class_weights: Option<[f64; 2]>,
    pub dice_eps: f64,
    pub dice_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_perceptual: 1.0, smooth_l1_beta: 1.0, class_weights: None, dice_eps: 1.0, dice_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_perceptual < 0.0 || self.dice_eps < 0.0 || self.dice_weight < 0.0 {
            return Err(Error::Config("loss weights must be ≥ 0".into()));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config("losses.smooth_l1_beta must be > 0".into()));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config("class weights must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Vec<T>,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: shape mismatch ({a} vs {b} elements)")));
    }
    Ok(())
}

/// Huber-style smooth-L1, mean over pixels.
pub fn smooth_l1<T: Real>(target: &[T], pred: &[T], beta: f64) -> Result<LossGrad<T>> {
    check_len(target.len(), pred.len(), "smooth_l1")?;
    if !(beta > 0.0) {
        return Err(Error::Config("smooth_l1 beta must be > 0".into()));
    }
    let n = target.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (y, p) in target.iter().zip(pred) {
        let r = p.to_f64().unwrap() - y.to_f64().unwrap();
        let (l, g) = smooth_l1_point(r, beta);
        total += l;
        grad.push(T::from_f64(g / n).unwrap());
    }
    Ok(LossGrad { value: total / n, grad })
}

/// Per-residual loss and derivative.
pub fn smooth_l1_point(r: f64, beta: f64) -> (f64, f64) {
    let a = r.abs();
    if a < beta {
        (0.5 * r * r / beta, r / beta)
    } else {
        (a - 0.5 * beta, r.signum())
    }
}

// ---------------------------------------------------------------------------
// Perceptual distance
// ---------------------------------------------------------------------------

/// Frozen random convolutional stack used as the perceptual feature space.
///
/// Stage `l` is `conv3x3 → ReLU`, and stages are separated by 2× average
/// pooling. Weights are He-uniform from a ChaCha8 stream: each weight is
/// `(u / 2^32 · 2 − 1) · sqrt(6 / fan_in)` for successive `u32` draws, which
/// makes them bit-identical on every platform.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    widths: Vec<usize>,
    weights: Vec<Vec<f32>>,
    layer_weights: Vec<f64>,
}

pub const PERCEPTUAL_SEED: u64 = 1234;
pub const PERCEPTUAL_WIDTHS: [usize; 4] = [8, 16, 32, 64];
const NORM_EPS: f64 = 1e-10;

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(&PERCEPTUAL_WIDTHS, PERCEPTUAL_SEED)
    }
}

impl PerceptualExtractor {
    pub fn new(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let mut weights = Vec::with_capacity(widths.len());
        for &cout in widths {
            let fan_in = cin * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f32> = (0..cout * fan_in)
                .map(|_| {
                    let u = rng.next_u32() as f64 / 4_294_967_296.0;
                    ((u * 2.0 - 1.0) * bound) as f32
                })
                .collect();
            weights.push(w);
            cin = cout;
        }
        PerceptualExtractor { widths: widths.to_vec(), weights, layer_weights: vec![1.0; widths.len()] }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn stage_weights(&self, stage: usize) -> &[f32] {
        &self.weights[stage]
    }

    pub fn layer_weight(&self, stage: usize) -> f64 {
        self.layer_weights[stage]
    }

    fn cast_weights<T: Real>(&self, stage: usize) -> Vec<T> {
        self.weights[stage].iter().map(|v| T::from_f32(*v).unwrap()).collect()
    }

    /// Post-rectifier activations of every stage.
    pub fn features<T: Real>(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        self.run(x).into_iter().map(|s| s.act).collect()
    }

    fn run<T: Real>(&self, x: &Tensor<T>) -> Vec<StageTrace<T>> {
        let mut out = Vec::with_capacity(self.widths.len());
        let mut cur = x.clone();
        for (l, &cout) in self.widths.iter().enumerate() {
            if l > 0 {
                cur = layers::avgpool2_forward(&cur);
            }
            let w = self.cast_weights::<T>(l);
            let mut act = layers::conv2d_forward(&cur, &w, None, cout, 3);
            layers::relu_inplace(&mut act);
            out.push(StageTrace { input: cur.clone(), act: act.clone() });
            cur = act;
        }
        out
    }
}

struct StageTrace<T> {
    input: Tensor<T>,
    act: Tensor<T>,
}

/// Unit-normalizes each pixel's channel vector; returns normalized features
/// and the per-pixel norms (without eps).
fn channel_normalize<T: Real>(f: &Tensor<T>) -> (Tensor<T>, Vec<f64>) {
    let p = f.plane();
    let mut out = f.zeros_like();
    let mut norms = vec![0.0; f.n * p];
    for i in 0..f.n {
        for j in 0..p {
            let mut s = 0.0;
            for c in 0..f.c {
                let v = f.data[(i * f.c + c) * p + j].to_f64().unwrap();
                s += v * v;
            }
            let nrm = s.sqrt();
            norms[i * p + j] = nrm;
            let inv = 1.0 / (nrm + NORM_EPS);
            for c in 0..f.c {
                let idx = (i * f.c + c) * p + j;
                out.data[idx] = T::from_f64(f.data[idx].to_f64().unwrap() * inv).unwrap();
            }
        }
    }
    (out, norms)
}

fn channel_normalize_backward<T: Real>(f: &Tensor<T>, norms: &[f64], g: &Tensor<T>) -> Tensor<T> {
    let p = f.plane();
    let mut dv = f.zeros_like();
    for i in 0..f.n {
        for j in 0..p {
            let nrm = norms[i * p + j];
            let n = nrm + NORM_EPS;
            let mut dot = 0.0;
            for c in 0..f.c {
                let idx = (i * f.c + c) * p + j;
                dot += g.data[idx].to_f64().unwrap() * f.data[idx].to_f64().unwrap();
            }
            for c in 0..f.c {
                let idx = (i * f.c + c) * p + j;
                let gv = g.data[idx].to_f64().unwrap();
                let v = f.data[idx].to_f64().unwrap();
                let d = if nrm > 0.0 { gv / n - v * dot / (n * n * nrm) } else { gv / n };
                dv.data[idx] = T::from_f64(d).unwrap();
            }
        }
    }
    dv
}

/// Sum over stages of the mean squared difference between unit-normalized
/// features. Gradient is with respect to `pred`.
pub fn perceptual_distance<T: Real>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    extractor: &PerceptualExtractor,
) -> Result<LossGrad<T>> {
    if target.dims() != pred.dims() {
        return Err(Error::Contract(format!(
            "perceptual_distance: shape mismatch {:?} vs {:?}",
            target.dims(),
            pred.dims()
        )));
    }
    if target.c != 1 {
        return Err(Error::Contract("perceptual_distance expects single-channel tiles".into()));
    }
    let ta = extractor.run(target);
    let pa = extractor.run(pred);
    let mut total = 0.0;
    let mut d_act_next: Option<Tensor<T>> = None;
    for l in (0..extractor.widths.len()).rev() {
        let (nt, _) = channel_normalize(&ta[l].act);
        let (np, norms) = channel_normalize(&pa[l].act);
        let count = np.data.len() as f64;
        let wl = extractor.layer_weights[l];
        let mut gnorm = np.zeros_like();
        let mut sq = 0.0;
        for ((g, a), b) in gnorm.data.iter_mut().zip(&np.data).zip(&nt.data) {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            sq += d * d;
            *g = T::from_f64(wl * 2.0 * d / count).unwrap();
        }
        let value = wl * sq / count;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite perceptual activation at stage {l}")));
        }
        total += value;
        let mut dact = channel_normalize_backward(&pa[l].act, &norms, &gnorm);
        if let Some(next) = d_act_next.take() {
            dact.add_assign(&next);
        }
        layers::relu_backward_inplace(&mut dact, &pa[l].act);
        let w = extractor.cast_weights::<T>(l);
        let mut dw = vec![T::zero(); w.len()];
        let input = &pa[l].input;
        let mut dx = layers::conv2d_backward(input, &w, extractor.widths[l], 3, &dact, &mut dw, None, true).unwrap();
        if l > 0 {
            let prev = &pa[l - 1].act;
            dx = layers::avgpool2_backward(&dx, prev.h, prev.w);
        }
        d_act_next = Some(dx);
    }
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite perceptual distance".into()));
    }
    Ok(LossGrad { value: total, grad: d_act_next.unwrap().data })
}

/// Smooth-L1 plus `lambda_perceptual` × perceptual distance.
pub fn reconstruction_loss<T: Real>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<LossGrad<T>> {
    let mut l1 = smooth_l1(&target.data, &pred.data, weights.smooth_l1_beta)?;
    if weights.lambda_perceptual == 0.0 {
        return Ok(l1);
    }
    let pd = perceptual_distance(target, pred, extractor)?;
    let lam = T::from_f64(weights.lambda_perceptual).unwrap();
    for (g, p) in l1.grad.iter_mut().zip(&pd.grad) {
        *g += lam * *p;
    }
    Ok(LossGrad { value: l1.value + weights.lambda_perceptual * pd.value, grad: l1.grad })
}

// ---------------------------------------------------------------------------
// Segmentation objectives
// ---------------------------------------------------------------------------

/// Class probabilities along the channel axis, computed with a max shift.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let p = logits.plane();
    let mut out = logits.zeros_like();
    for i in 0..logits.n {
        for j in 0..p {
            let idx = |c: usize| (i * logits.c + c) * p + j;
            let m = (0..logits.c).map(|c| logits.data[idx(c)].to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..logits.c).map(|c| (logits.data[idx(c)].to_f64().unwrap() - m).exp()).sum();
            for c in 0..logits.c {
                out.data[idx(c)] = T::from_f64((logits.data[idx(c)].to_f64().unwrap() - m).exp() / z).unwrap();
            }
        }
    }
    out
}

/// Mean over pixels of `w[target] · −log softmax(logits)[target]`.
/// `target` is `N×H×W` class indices.
pub fn weighted_cross_entropy<T: Real>(logits: &Tensor<T>, target: &[u8], class_weights: &[f64]) -> Result<LossGrad<T>> {
    let p = logits.plane();
    check_len(target.len(), logits.n * p, "weighted_cross_entropy")?;
    if class_weights.len() != logits.c {
        return Err(Error::Contract(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            logits.c
        )));
    }
    let n = target.len() as f64;
    let mut grad = vec![T::zero(); logits.data.len()];
    let mut total = 0.0;
    for i in 0..logits.n {
        for j in 0..p {
            let t = target[i * p + j] as usize;
            if t >= logits.c {
                return Err(Error::Contract(format!("class index {t} out of range for {} classes", logits.c)));
            }
            let idx = |c: usize| (i * logits.c + c) * p + j;
            let m = (0..logits.c).map(|c| logits.data[idx(c)].to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..logits.c).map(|c| (logits.data[idx(c)].to_f64().unwrap() - m).exp()).sum::<f64>().ln();
            let w = class_weights[t];
            total += w * (lse - logits.data[idx(t)].to_f64().unwrap());
            for c in 0..logits.c {
                let prob = (logits.data[idx(c)].to_f64().unwrap() - lse).exp();
                let ind = if c == t { 1.0 } else { 0.0 };
                grad[idx(c)] = T::from_f64(w * (prob - ind) / n).unwrap();
            }
        }
    }
    Ok(LossGrad { value: total / n, grad })
}

/// `1 − (2Σpq + eps) / (Σp + Σq + eps)`; gradient with respect to `p`.
pub fn dice_loss<T: Real>(prob: &[T], target: &[u8], eps: f64) -> Result<LossGrad<T>> {
    check_len(prob.len(), target.len(), "dice_loss")?;
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sq = 0.0;
    for (p, q) in prob.iter().zip(target) {
        let p = p.to_f64().unwrap();
        let q = *q as f64;
        inter += p * q;
        sp += p;
        sq += q;
    }
    let num = 2.0 * inter + eps;
    let den = sp + sq + eps;
    if den == 0.0 {
        return Ok(LossGrad { value: 0.0, grad: vec![T::zero(); prob.len()] });
    }
    let grad = target
        .iter()
        .map(|q| {
            let q = *q as f64;
            T::from_f64(-(2.0 * q * den - num) / (den * den)).unwrap()
        })
        .collect();
    Ok(LossGrad { value: 1.0 - num / den, grad })
}

/// DICE on the softmax probability of class `1`, differentiated through the
/// softmax back to the logits.
pub fn dice_loss_logits<T: Real>(logits: &Tensor<T>, target: &[u8], eps: f64) -> Result<LossGrad<T>> {
    let probs = softmax_channels(logits);
    let p = logits.plane();
    let mut building = Vec::with_capacity(logits.n * p);
    for i in 0..logits.n {
        building.extend_from_slice(probs.channel(i, 1));
    }
    let d = dice_loss(&building, target, eps)?;
    let mut grad = vec![T::zero(); logits.data.len()];
    for i in 0..logits.n {
        for j in 0..p {
            let g = d.grad[i * p + j];
            let p1 = probs.data[(i * logits.c + 1) * p + j];
            for c in 0..logits.c {
                let pc = probs.data[(i * logits.c + c) * p + j];
                let ind = if c == 1 { T::one() } else { T::zero() };
                grad[(i * logits.c + c) * p + j] = g * p1 * (ind - pc);
            }
        }
    }
    Ok(LossGrad { value: d.value, grad })
}

/// Weighted cross-entropy + `dice_weight` × DICE on the logits.
pub fn segmentation_loss<T: Real>(
    logits: &Tensor<T>,
    target: &[u8],
    class_weights: &[f64],
    weights: &LossWeights,
) -> Result<LossGrad<T>> {
    let mut ce = weighted_cross_entropy(logits, target, class_weights)?;
    if weights.dice_weight == 0.0 {
        return Ok(ce);
    }
    let dice = dice_loss_logits(logits, target, weights.dice_eps)?;
    let dw = T::from_f64(weights.dice_weight).unwrap();
    for (g, d) in ce.grad.iter_mut().zip(&dice.grad) {
        *g += dw * *d;
    }
    Ok(LossGrad { value: ce.value + weights.dice_weight * dice.value, grad: ce.grad })
}

/// Inverse pixel-frequency class weights, normalized to mean 1.
pub fn inverse_frequency_weights(masks: &[&[u8]]) -> [f64; 2] {
    let mut counts = [0usize; 2];
    for m in masks {
        for &v in m.iter() {
            counts[(v != 0) as usize] += 1;
        }
    }
    let total = (counts[0] + counts[1]) as f64;
    if counts[0] == 0 || counts[1] == 0 {
        return [1.0, 1.0];
    }
    let w0 = total / (2.0 * counts[0] as f64);
    let w1 = total / (2.0 * counts[1] as f64);
    [w0, w1]
}
