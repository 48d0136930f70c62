//! Variational information-bottleneck objective.
//!
//! Distortion is the decoder cross-entropy on reparameterized code samples,
//! rate is the closed-form KL divergence from the encoder's Gaussian to the
//! factorized standard-normal prior. Both are in nats.

mod binning;

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use binning::{binned_mi, patch_code_mi, plugin_mi, BinningConfig};

use crate::error::{Error, Result};
use crate::model::{
    constraint_penalty_grad, scale_from_pre, softmax, BatchMoments, FingerprintModel, HeadSlot,
    Mode, StochasticCode,
};

/// Floor applied to the probability of the true class before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the rate term.
    pub beta: f64,
    /// Weight of the constrained-filter penalty.
    pub lambda: f64,
    /// L1 weight-decay coefficient.
    pub omega1: f64,
    /// L2 (sum of squares) weight-decay coefficient.
    pub omega2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            lambda: 1.0,
            omega1: 1e-4,
            omega2: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("omega1", self.omega1),
            ("omega2", self.omega2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Only the cross-entropy term.
    pub fn distortion_only() -> Self {
        Self {
            beta: 0.0,
            lambda: 0.0,
            omega1: 0.0,
            omega2: 0.0,
        }
    }
}

/// Every term of the training loss, reported separately for RD logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub distortion: f64,
    pub rate: f64,
    pub penalty: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(distortion: f64, rate: f64, penalty: f64, l1: f64, l2: f64, w: &LossWeights) -> Self {
        let total = distortion + w.beta * rate + w.lambda * penalty + w.omega1 * l1 + w.omega2 * l2;
        Self {
            distortion,
            rate,
            penalty,
            l1,
            l2,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.distortion, self.rate, self.penalty, self.l1, self.l2, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn log_record(&self, step: usize, beta: f64) -> LossRecord {
        LossRecord {
            step,
            beta,
            d: self.distortion,
            r: self.rate,
            penalty: self.penalty,
            l1: self.l1,
            l2: self.l2,
            j: self.total,
        }
    }
}

/// One JSON-lines logging record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub beta: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub penalty: f64,
    pub l1: f64,
    pub l2: f64,
    #[serde(rename = "J")]
    pub j: f64,
}

/// `KL[N(mean, diag(scale^2)) || N(0, I)]` in nats.
pub fn rate_kl(code: &StochasticCode) -> Result<f64> {
    if code.mean.len() != code.scale.len() {
        return Err(Error::Shape("mean and scale lengths differ".into()));
    }
    let mut kl = 0.0;
    for (&m, &s) in code.mean.iter().zip(&code.scale) {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("scale must be positive, got {s}")));
        }
        let v = s * s;
        kl += m * m + v - v.ln() - 1.0;
    }
    Ok(0.5 * kl)
}

/// `-ln p[label]`, with `p[label]` floored at [`PROB_FLOOR`].
pub fn distortion_ce(probabilities: &[f64], label: usize) -> Result<f64> {
    let p = *probabilities.get(label).ok_or_else(|| {
        Error::Domain(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        ))
    })?;
    if p < PROB_FLOOR {
        log::warn!("probability of true class {label} is {p:e}; clamped to {PROB_FLOOR:e}");
        return Ok(-PROB_FLOOR.ln());
    }
    Ok(-p.ln())
}

/// Sum of absolute values and sum of squares over kernel weights
/// (normalization parameters and biases excluded).
pub fn weight_norms(model: &FingerprintModel) -> (f64, f64) {
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for slot in model.arch.slots.iter().filter(|s| s.kind.is_weight()) {
        for &w in &model.weights[slot.range()] {
            l1 += w.abs();
            l2 += w * w;
        }
    }
    (l1, l2)
}

/// A batch of `[N, P, P, C]` patches with camera labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub patches: Array4<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How a loss evaluation treats normalization and code sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub mode: Mode,
    /// Code samples per input for the distortion expectation.
    pub z_samples: usize,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Train,
            z_samples: 1,
        }
    }
}

/// Loss value and parameter gradient. Also carries the batch statistics the
/// normalization layers saw.
pub struct LossGradient {
    pub breakdown: LossBreakdown,
    pub grad: Vec<f64>,
    pub(crate) moments: Vec<BatchMoments>,
}

/// Evaluates the total loss `J = D + beta R + lambda penalty + omega1 |W|_1 + omega2 |W|_2^2`.
pub fn total_loss<R: Rng + ?Sized>(
    batch: &Batch,
    model: &FingerprintModel,
    weights: &LossWeights,
    rng: &mut R,
    options: LossOptions,
) -> Result<LossBreakdown> {
    Ok(evaluate(batch, model, weights, rng, options, false)?.breakdown)
}

/// Like [`total_loss`] but also backpropagates. Always runs in training mode.
pub fn loss_and_gradient<R: Rng + ?Sized>(
    batch: &Batch,
    model: &FingerprintModel,
    weights: &LossWeights,
    rng: &mut R,
    z_samples: usize,
) -> Result<LossGradient> {
    evaluate(
        batch,
        model,
        weights,
        rng,
        LossOptions {
            mode: Mode::Train,
            z_samples,
        },
        true,
    )
}

fn evaluate<R: Rng + ?Sized>(
    batch: &Batch,
    model: &FingerprintModel,
    weights: &LossWeights,
    rng: &mut R,
    options: LossOptions,
    want_grad: bool,
) -> Result<LossGradient> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    if batch.patches.dim().0 != batch.len() {
        return Err(Error::Shape("patch count and label count differ".into()));
    }
    if options.z_samples == 0 {
        return Err(Error::Config("z_samples must be at least 1".into()));
    }
    let m = model.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= m) {
        return Err(Error::Domain(format!("label {bad} out of range for {m} classes")));
    }
    let mode = if want_grad { Mode::Train } else { options.mode };
    let out = model.encoder_forward(batch.patches.view(), mode)?;
    let n = batch.len();
    let d = model.code_dim();
    let s = options.z_samples;
    let scale_param = model.config.encoder.scale;
    let (dec_w, dec_b) = model.decoder();

    let mut d_head = Array2::<f64>::zeros((n, 2 * d));
    let mut d_dec_w = Array2::<f64>::zeros((d, m));
    let mut d_dec_b = vec![0.0; m];

    let mut ce_sum = 0.0;
    let mut rate_sum = 0.0;
    let inv_ns = 1.0 / (n * s) as f64;
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    let mut dsig_dpre = vec![0.0; d];
    let mut z = vec![0.0; d];
    for (i, &label) in batch.labels.iter().enumerate() {
        let head = out.head.row(i);
        for j in 0..d {
            mean[j] = head[j];
            let (sg, ds) = scale_from_pre(head[d + j], scale_param);
            sigma[j] = sg;
            dsig_dpre[j] = ds;
        }
        let code = StochasticCode {
            mean: mean.clone(),
            scale: sigma.clone(),
        };
        rate_sum += rate_kl(&code)?;
        let mut d_mean = vec![0.0; d];
        let mut d_sigma = vec![0.0; d];
        for _ in 0..s {
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for j in 0..d {
                z[j] = mean[j] + sigma[j] * eps[j];
            }
            let logits: Vec<f64> = (0..m)
                .map(|c| dec_b[c] + (0..d).map(|j| z[j] * dec_w[[j, c]]).sum::<f64>())
                .collect();
            let probs = softmax(&logits);
            ce_sum += distortion_ce(&probs, label)?;
            if want_grad {
                // d(-ln p_label)/d logits = p - onehot
                let dl: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(c, p)| (p - if c == label { 1.0 } else { 0.0 }) * inv_ns)
                    .collect();
                for c in 0..m {
                    d_dec_b[c] += dl[c];
                }
                for j in 0..d {
                    let mut dz = 0.0;
                    for c in 0..m {
                        d_dec_w[[j, c]] += z[j] * dl[c];
                        dz += dec_w[[j, c]] * dl[c];
                    }
                    d_mean[j] += dz;
                    d_sigma[j] += dz * eps[j];
                }
            }
        }
        if want_grad {
            for j in 0..d {
                let dm = d_mean[j] + weights.beta * mean[j] * inv_n;
                let dsg = d_sigma[j] + weights.beta * (sigma[j] - 1.0 / sigma[j]) * inv_n;
                d_head[[i, j]] = dm;
                d_head[[i, d + j]] = dsg * dsig_dpre[j];
            }
        }
    }
    let distortion = ce_sum * inv_ns;
    let rate = rate_sum * inv_n;
    let (penalty, per_filter) = constraint_penalty_grad(model.constrained_weights());
    let (l1, l2) = weight_norms(model);
    let breakdown = LossBreakdown::compose(distortion, rate, penalty, l1, l2, weights);

    let mut grad = Vec::new();
    if want_grad {
        grad = vec![0.0; model.arch.num_params()];
        let tape = out.tape.as_ref().expect("training pass keeps a tape");
        model.encoder_backward(tape, &d_head, &mut grad);
        let dw = model.slot_index(HeadSlot::DecoderWeight);
        let db = model.slot_index(HeadSlot::DecoderBias);
        for (g, v) in grad[model.arch.slots[dw].range()].iter_mut().zip(d_dec_w.iter()) {
            *g += v;
        }
        for (g, v) in grad[model.arch.slots[db].range()].iter_mut().zip(&d_dec_b) {
            *g += v;
        }
        if weights.lambda != 0.0 {
            let slot = model.arch.constrained_slot();
            let k = per_filter.len();
            // kernel layout [S, S, C, k]: filter index is the fastest axis
            for (idx, g) in grad[slot.range()].iter_mut().enumerate() {
                *g += weights.lambda * per_filter[idx % k];
            }
        }
        if weights.omega1 != 0.0 || weights.omega2 != 0.0 {
            for slot in model.arch.slots.iter().filter(|s| s.kind.is_weight()) {
                for idx in slot.range() {
                    let w = model.weights[idx];
                    grad[idx] += weights.omega1 * w.signum() * (w != 0.0) as u8 as f64 + weights.omega2 * 2.0 * w;
                }
            }
        }
    }
    Ok(LossGradient {
        breakdown,
        grad,
        moments: out.moments,
    })
}

/// Classification accuracy of the decoder applied to the code mean (no sampling).
pub fn mean_code_accuracy(model: &FingerprintModel, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("accuracy batch".into()));
    }
    let codes = model.encode_batch(batch.patches.view())?;
    let mut correct = 0usize;
    for (code, &label) in codes.iter().zip(&batch.labels) {
        let logits = model.logits(&code.mean)?;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &l)| if l > best.1 { (c, l) } else { best })
            .0;
        correct += (pred == label) as usize;
    }
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let prior = StochasticCode::new(vec![0.0; 5], vec![1.0; 5]).unwrap();
        assert_eq!(rate_kl(&prior).unwrap(), 0.0);
        let shifted = StochasticCode::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(rate_kl(&shifted).unwrap(), 0.5);
        let wide = StochasticCode::new(vec![0.0], vec![std::f64::consts::E.sqrt()]).unwrap();
        let expected = 0.5 * (std::f64::consts::E - 2.0);
        assert!((rate_kl(&wide).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_nonpositive_scale() {
        let bad = StochasticCode {
            mean: vec![0.0],
            scale: vec![0.0],
        };
        assert!(matches!(rate_kl(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn ce_examples() {
        assert_eq!(distortion_ce(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let ln4 = 4f64.ln();
        assert!((distortion_ce(&[0.25; 4], 2).unwrap() - ln4).abs() < 1e-15);
        assert!((distortion_ce(&[0.5, 0.25, 0.25], 1).unwrap() - ln4).abs() < 1e-15);
        assert!((distortion_ce(&[1.0, 0.0], 1).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-12);
        assert!(distortion_ce(&[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn compose_matches_formula() {
        let w = LossWeights {
            beta: 0.5,
            lambda: 2.0,
            omega1: 0.1,
            omega2: 0.01,
        };
        let b = LossBreakdown::compose(1.0, 2.0, 3.0, 4.0, 5.0, &w);
        assert_eq!(b.total, 1.0 + 1.0 + 6.0 + 0.4 + 0.05);
        assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn log_record_uses_short_keys() {
        let b = LossBreakdown::compose(1.0, 2.0, 0.0, 0.0, 0.0, &LossWeights::distortion_only());
        let json = serde_json::to_value(b.log_record(7, 0.0)).unwrap();
        for key in ["step", "beta", "D", "R", "penalty", "l1", "l2", "J"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
