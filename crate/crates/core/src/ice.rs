//! Training objectives over a dataset: plain cross-entropy (MLE) and the ICE
//! bias-corrected objective.
//!
//! The ICE objective adds to the mean cross-entropy the penalty
//!
//! ```text
//! P = c Σ_i q_i,    q_i = v_iᵀ D⁻¹ v_i
//! ```
//!
//! where `v_i` is the per-observation cross-entropy gradient, `D` the mean of
//! the per-observation Hessian diagonals from backpropagation, and `c` is
//! `1/n²` or `1/n` depending on [`PenaltyScale`]. The approximate gradient is
//! `mean(v) + 2c Σ_i q_i v_i`.
//!
//! `D⁻¹` is never formed directly. Each per-observation `v_i` is first
//! truncated (entries below `√ε · max|v_i|` are zeroed) and each element is
//! inverted through [`stabilized_inverse_element`], which blends `D_k` with
//! `v_k²` and pins the term at exactly 1 when `D_k ≤ 0`.
//!
//! Evaluation makes two passes over the data so memory stays linear in the
//! parameter count. Both passes reduce over fixed-size chunks in a fixed order,
//! so results are bit-reproducible regardless of thread count.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::{self, PerSampleDerivatives};
use crate::error::{Error, Result};
use crate::network::{LabeledSample, Network};

/// `√ε` for 64-bit floats.
pub fn sqrt_epsilon() -> f64 {
    f64::EPSILON.sqrt()
}

/// Samples per reduction chunk. Changing it changes rounding, not results.
const CHUNK: usize = 256;

/// Loss and gradient handed to the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

impl ObjectiveValue {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

/// A model with per-observation cross-entropy derivatives.
pub trait SampleModel: Sync {
    fn parameter_count(&self) -> usize;

    /// `(loss, v)` for one observation.
    fn sample_gradient(&self, sample: &LabeledSample) -> Result<(f64, Vec<f64>)>;

    /// `(loss, v, Hessian diagonal)` for one observation.
    fn sample_derivatives(&self, sample: &LabeledSample) -> Result<(f64, PerSampleDerivatives)>;
}

impl SampleModel for Network {
    fn parameter_count(&self) -> usize {
        self.topology().parameter_count()
    }

    fn sample_gradient(&self, sample: &LabeledSample) -> Result<(f64, Vec<f64>)> {
        backprop::sample_gradient(self, sample)
    }

    fn sample_derivatives(&self, sample: &LabeledSample) -> Result<(f64, PerSampleDerivatives)> {
        backprop::sample_derivatives(self, sample)
    }
}

/// Overall normalization of the penalty.
///
/// With `D` the mean curvature, `S = Σ_i v_iᵀ D⁻¹ v_i` is about `n · tr(I J⁻¹)`.
/// `Tic` divides it by `n²`, so the penalty is about `tr(I J⁻¹) / n` and a
/// parameter pinned by the stabilizer costs `1/n`, the same as under AIC.
/// `PerSample` divides by `n` only, so the penalty is about `tr(I J⁻¹)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyScale {
    #[default]
    Tic,
    PerSample,
}

impl PenaltyScale {
    /// Multiplier applied to `Σ_i q_i` and `Σ_i q_i v_i`.
    pub fn factor(self, n: usize) -> f64 {
        match self {
            PenaltyScale::Tic => 1.0 / (n as f64 * n as f64),
            PenaltyScale::PerSample => 1.0 / n as f64,
        }
    }
}

impl std::fmt::Display for PenaltyScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PenaltyScale::Tic => "tic",
            PenaltyScale::PerSample => "per-sample",
        })
    }
}

impl FromStr for PenaltyScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tic" => Ok(Self::Tic),
            "per-sample" | "per_sample" | "persample" => Ok(Self::PerSample),
            other => Err(Error::InvalidArgument(format!("unknown penalty scale {other:?}"))),
        }
    }
}

/// Zero every entry with `|v_k| < √ε · max_k |v_k|`.
pub fn truncate_small_components(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    truncate_in_place(&mut out);
    out
}

fn truncate_in_place(v: &mut [f64]) -> usize {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let threshold = sqrt_epsilon() * max;
    let mut zeroed = 0;
    for x in v.iter_mut() {
        if x.abs() < threshold && *x != 0.0 {
            *x = 0.0;
            zeroed += 1;
        }
    }
    zeroed
}

/// Blend weight `w = exp(-√ε · d_max_abs / max(0, d_k))`.
///
/// `w = 0` for `d_k ≤ 0`, and `w = 1` when `d_max_abs = 0` with `d_k > 0`.
pub fn stabilizer_weight(d_k: f64, d_max_abs: f64) -> f64 {
    if d_k <= 0.0 {
        0.0
    } else if d_max_abs == 0.0 {
        1.0
    } else {
        (-sqrt_epsilon() * d_max_abs / d_k).exp()
    }
}

/// Stabilized reciprocal `1 / (w d_k + (1 - w) v_k²)`.
///
/// Returns 0 when the denominator vanishes, which can only happen for
/// `v_k = 0`, so such an element contributes nothing to the penalty.
pub fn stabilized_inverse_element(d_k: f64, v_k: f64, d_max_abs: f64) -> f64 {
    let w = stabilizer_weight(d_k, d_max_abs);
    let denom = w * d_k + (1.0 - w) * v_k * v_k;
    if denom == 0.0 {
        0.0
    } else {
        1.0 / denom
    }
}

/// Quadratic form `Σ_k v_k² · inv(D_k, v_k)` for an already truncated `v`.
pub fn penalty_quadratic_form(v: &[f64], d_hat: &[f64], d_max_abs: f64) -> f64 {
    v.iter()
        .zip(d_hat)
        .map(|(&vk, &dk)| {
            if vk == 0.0 {
                0.0
            } else {
                vk * vk * stabilized_inverse_element(dk, vk, d_max_abs)
            }
        })
        .sum()
}

/// Running sums of the ICE objective.
#[derive(Debug, Clone, PartialEq)]
pub struct IceAccumulator {
    pub n: usize,
    pub loss_sum: f64,
    pub mean_gradient: Vec<f64>,
    /// Mean curvature diagonal `D`.
    pub d_hat: Vec<f64>,
    pub penalty_sum: f64,
    pub correction_sum: Vec<f64>,
    /// Number of `v_i` entries zeroed by truncation across the second pass.
    pub truncated: usize,
}

/// Full result of an ICE evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct IceEvaluation {
    pub value: ObjectiveValue,
    /// Mean cross-entropy, the MLE loss at the same parameters.
    pub mle_loss: f64,
    /// `c Σ_i q_i`.
    pub penalty: f64,
    pub d_hat_min: f64,
    pub accumulator: IceAccumulator,
}

impl IceEvaluation {
    /// Whether every `D_k ≥ 0`, in which case the penalty is non-negative.
    pub fn curvature_nonnegative(&self) -> bool {
        self.d_hat_min >= 0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IceOptions {
    pub penalty_scale: PenaltyScale,
}

struct FirstPass {
    loss: f64,
    gradient: Vec<f64>,
    hessian: Vec<f64>,
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn check_data<M: SampleModel + ?Sized>(model: &M, data: &[LabeledSample]) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("objective needs at least one sample".into()));
    }
    Ok(model.parameter_count())
}

fn first_pass<M: SampleModel + ?Sized>(model: &M, data: &[LabeledSample], with_hessian: bool) -> Result<FirstPass> {
    let d = model.parameter_count();
    let partials: Vec<FirstPass> = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = FirstPass {
                loss: 0.0,
                gradient: vec![0.0; d],
                hessian: if with_hessian { vec![0.0; d] } else { Vec::new() },
            };
            for sample in chunk {
                if with_hessian {
                    let (loss, der) = model.sample_derivatives(sample)?;
                    part.loss += loss;
                    add_into(&mut part.gradient, &der.gradient);
                    add_into(&mut part.hessian, &der.hessian_diagonal);
                } else {
                    let (loss, g) = model.sample_gradient(sample)?;
                    part.loss += loss;
                    add_into(&mut part.gradient, &g);
                }
            }
            Ok(part)
        })
        .collect::<Result<_>>()?;

    let mut total = FirstPass {
        loss: 0.0,
        gradient: vec![0.0; d],
        hessian: if with_hessian { vec![0.0; d] } else { Vec::new() },
    };
    for part in partials {
        total.loss += part.loss;
        add_into(&mut total.gradient, &part.gradient);
        if with_hessian {
            add_into(&mut total.hessian, &part.hessian);
        }
    }
    Ok(total)
}

/// Mean cross-entropy and its gradient.
pub fn mle_objective<M: SampleModel + ?Sized>(model: &M, data: &[LabeledSample]) -> Result<ObjectiveValue> {
    check_data(model, data)?;
    let pass = first_pass(model, data, false)?;
    let n = data.len() as f64;
    let value = ObjectiveValue {
        loss: pass.loss / n,
        gradient: pass.gradient.into_iter().map(|g| g / n).collect(),
    };
    if !value.is_finite() {
        return Err(Error::NonFinite("MLE objective"));
    }
    Ok(value)
}

/// Mean cross-entropy over a dataset without derivatives.
pub fn mean_cross_entropy(network: &Network, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("cross-entropy needs at least one sample".into()));
    }
    let sums: Vec<f64> = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold(0.0, |acc, s| {
                let scores = network.scores(&s.features)?;
                if s.label >= scores.len() {
                    return Err(Error::InvalidLabel {
                        label: s.label,
                        classes: scores.len(),
                    });
                }
                Ok(acc + crate::network::cross_entropy(s.label, &scores))
            })
        })
        .collect::<Result<_>>()?;
    Ok(sums.iter().sum::<f64>() / data.len() as f64)
}

/// ICE objective with the approximate gradient, plus diagnostics.
pub fn ice_objective<M: SampleModel + ?Sized>(
    model: &M,
    data: &[LabeledSample],
    options: IceOptions,
) -> Result<IceEvaluation> {
    let d = check_data(model, data)?;
    let n = data.len();
    let nf = n as f64;

    let pass = first_pass(model, data, true)?;
    let mle_loss = pass.loss / nf;
    let mean_gradient: Vec<f64> = pass.gradient.iter().map(|g| g / nf).collect();
    let d_hat: Vec<f64> = pass.hessian.iter().map(|h| h / nf).collect();
    if !mle_loss.is_finite()
        || mean_gradient.iter().any(|g| !g.is_finite())
        || d_hat.iter().any(|h| !h.is_finite())
    {
        return Err(Error::NonFinite("ICE first pass"));
    }
    let d_max_abs = d_hat.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let d_hat_min = d_hat.iter().copied().fold(f64::INFINITY, f64::min);

    struct SecondPass {
        penalty: f64,
        correction: Vec<f64>,
        truncated: usize,
    }
    let partials: Vec<SecondPass> = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = SecondPass {
                penalty: 0.0,
                correction: vec![0.0; d],
                truncated: 0,
            };
            for sample in chunk {
                let (_, mut v) = model.sample_gradient(sample)?;
                part.truncated += truncate_in_place(&mut v);
                let q = penalty_quadratic_form(&v, &d_hat, d_max_abs);
                part.penalty += q;
                if q != 0.0 {
                    for (c, vk) in part.correction.iter_mut().zip(&v) {
                        *c += q * vk;
                    }
                }
            }
            Ok(part)
        })
        .collect::<Result<_>>()?;

    let mut penalty_sum = 0.0;
    let mut correction_sum = vec![0.0; d];
    let mut truncated = 0;
    for part in partials {
        penalty_sum += part.penalty;
        add_into(&mut correction_sum, &part.correction);
        truncated += part.truncated;
    }

    let c = options.penalty_scale.factor(n);
    let penalty = c * penalty_sum;
    let gradient: Vec<f64> = mean_gradient
        .iter()
        .zip(&correction_sum)
        .map(|(g, s)| g + 2.0 * c * s)
        .collect();
    let value = ObjectiveValue {
        loss: mle_loss + penalty,
        gradient,
    };
    if !value.is_finite() {
        return Err(Error::NonFinite("ICE second pass"));
    }

    Ok(IceEvaluation {
        value,
        mle_loss,
        penalty,
        d_hat_min,
        accumulator: IceAccumulator {
            n,
            loss_sum: pass.loss,
            mean_gradient,
            d_hat,
            penalty_sum,
            correction_sum,
            truncated,
        },
    })
}

/// Which objective a model is fit to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mle,
    Ice,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::Ice => "ice",
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mle" => Ok(Self::Mle),
            "ice" => Ok(Self::Ice),
            other => Err(Error::InvalidArgument(format!("unknown estimator {other:?}"))),
        }
    }
}
