//! Brute-force references for the derivative and penalty code paths.
//!
//! Nothing here is used when fitting models. These routines exist to check
//! the fast paths: central finite differences, an explicit index-loop version
//! of the Hessian-diagonal recursion, and the full-matrix ICE penalty with an
//! SVD pseudo-inverse of the curvature matrix. The full-matrix penalty is
//! cubic in the parameter count and badly conditioned beyond a handful of
//! parameters, so it is restricted to small models.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::backprop::{self, PerSampleDerivatives};
use crate::error::{Error, Result};
use crate::ice::{self, IceOptions, SampleModel};
use crate::network::{sigmoid, ForwardTrace, LabeledSample, Network, NetworkTopology};

/// Largest parameter count accepted by [`exact_ice`].
pub const EXACT_ICE_MAX_PARAMETERS: usize = 64;

/// Step rules for central differences: `h_k = base · max(1, |θ_k|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub first_step: f64,
    pub second_step: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            first_step: 1e-5,
            second_step: 1e-4,
        }
    }
}

fn step(base: f64, x: f64) -> f64 {
    base * x.abs().max(1.0)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64], config: FdConfig) -> Result<Vec<f64>> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            let h = step(config.first_step, theta[k]);
            probe[k] = theta[k] + h;
            let up = f(&probe);
            probe[k] = theta[k] - h;
            let down = f(&probe);
            probe[k] = theta[k];
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite("finite-difference probe"));
            }
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Second central difference along each coordinate.
pub fn fd_hessian_diagonal<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    theta: &[f64],
    config: FdConfig,
) -> Result<Vec<f64>> {
    let centre = f(theta);
    if !centre.is_finite() {
        return Err(Error::NonFinite("finite-difference probe"));
    }
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            let h = step(config.second_step, theta[k]);
            probe[k] = theta[k] + h;
            let up = f(&probe);
            probe[k] = theta[k] - h;
            let down = f(&probe);
            probe[k] = theta[k];
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite("finite-difference probe"));
            }
            Ok((up - 2.0 * centre + down) / (h * h))
        })
        .collect()
}

/// Central-difference Jacobian of a vector function; column `k` is the
/// derivative with respect to `θ_k`.
pub fn fd_jacobian<F: FnMut(&[f64]) -> Result<Vec<f64>>>(
    mut f: F,
    theta: &[f64],
    config: FdConfig,
) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let mut probe = theta.to_vec();
    let mut columns = Vec::with_capacity(d);
    for k in 0..d {
        let h = step(config.first_step, theta[k]);
        probe[k] = theta[k] + h;
        let up = f(&probe)?;
        probe[k] = theta[k] - h;
        let down = f(&probe)?;
        probe[k] = theta[k];
        let col: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("finite-difference probe"));
        }
        columns.push(DVector::from_vec(col));
    }
    Ok(DMatrix::from_columns(&columns))
}

/// Forward pass written as explicit loops over `weight(l, i, k)`.
pub fn dense_forward(network: &Network, features: &[f64]) -> Vec<Vec<f64>> {
    let sizes = network.topology().layer_sizes();
    let depth = sizes.len() - 1;
    let mut acts = vec![features.to_vec()];
    for l in 0..depth {
        let mut out = vec![0.0; sizes[l + 1]];
        for (i, o) in out.iter_mut().enumerate() {
            let mut z = network.weight(l, i, 0);
            for k in 0..sizes[l] {
                z += network.weight(l, i, k + 1) * acts[l][k];
            }
            *o = if l + 1 == depth { z } else { sigmoid(z) };
        }
        acts.push(out);
    }
    acts
}

/// Hessian-diagonal recursion as plain index loops, sharing nothing with the
/// backward sweep beyond the forward trace.
pub fn dense_gamma_oracle(network: &Network, trace: &ForwardTrace, label: usize) -> PerSampleDerivatives {
    let sizes = network.topology().layer_sizes();
    let depth = sizes.len() - 1;
    let count = network.topology().parameter_count();
    let mut gradient = vec![0.0; count];
    let mut hessian = vec![0.0; count];

    let scores = &trace.activations[depth];
    let mut denom = 0.0;
    for s in scores {
        denom += s.exp();
    }
    let classes = sizes[depth];
    // ∂C/∂a and γ for the current layer, starting at the output
    let mut partial = vec![0.0; classes];
    let mut gamma = vec![0.0; classes];
    for i in 0..classes {
        let p = scores[i].exp() / denom;
        let y = if i == label { 1.0 } else { 0.0 };
        partial[i] = p - y;
        gamma[i] = (1.0 - p) * p;
    }

    let mut offset_of = vec![0; depth];
    for l in 1..depth {
        offset_of[l] = offset_of[l - 1] + (sizes[l - 1] + 1) * sizes[l];
    }

    for l in (0..depth).rev() {
        let rows = sizes[l + 1];
        let cols = sizes[l] + 1;
        for i in 0..rows {
            let u1 = trace.first_derivs[l][i];
            let u2 = trace.second_derivs[l][i];
            for k in 0..cols {
                let a = if k == 0 { 1.0 } else { trace.activations[l][k - 1] };
                let idx = offset_of[l] + i * cols + k;
                gradient[idx] = u1 * partial[i] * a;
                hessian[idx] = (gamma[i] * u1 * u1 + partial[i] * u2) * a * a;
            }
        }
        if l == 0 {
            break;
        }
        let mut next_partial = vec![0.0; sizes[l]];
        let mut next_gamma = vec![0.0; sizes[l]];
        for k in 0..sizes[l] {
            for i in 0..rows {
                let w = network.weight(l, i, k + 1);
                let u1 = trace.first_derivs[l][i];
                let u2 = trace.second_derivs[l][i];
                next_partial[k] += w * u1 * partial[i];
                next_gamma[k] += (gamma[i] * u1 * u1 + partial[i] * u2) * w * w;
            }
        }
        partial = next_partial;
        gamma = next_gamma;
    }

    PerSampleDerivatives {
        gradient,
        hessian_diagonal: hessian,
    }
}

/// A model whose parameters can be replaced, for finite differencing.
pub trait ParametricModel: SampleModel + Sized {
    fn parameters(&self) -> &[f64];
    fn with_parameters(&self, theta: &[f64]) -> Result<Self>;
}

impl ParametricModel for Network {
    fn parameters(&self) -> &[f64] {
        Network::parameters(self)
    }

    fn with_parameters(&self, theta: &[f64]) -> Result<Self> {
        Network::from_parameters(self.topology().clone(), theta.to_vec())
    }
}

/// Two-class logistic model without a hidden layer or redundancy: scores `[θᵀx, 0]`.
///
/// Its curvature matrix is dense and well conditioned, unlike a softmax
/// network whose output layer is shift invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLogitModel {
    theta: Vec<f64>,
}

impl LinearLogitModel {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    fn logit(&self, sample: &LabeledSample) -> Result<f64> {
        if sample.features.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                what: "linear model features",
                expected: self.theta.len(),
                got: sample.features.len(),
            });
        }
        if sample.label > 1 {
            return Err(Error::InvalidLabel {
                label: sample.label,
                classes: 2,
            });
        }
        Ok(self.theta.iter().zip(&sample.features).map(|(t, x)| t * x).sum())
    }
}

impl SampleModel for LinearLogitModel {
    fn parameter_count(&self) -> usize {
        self.theta.len()
    }

    fn sample_gradient(&self, sample: &LabeledSample) -> Result<(f64, Vec<f64>)> {
        let (l, d) = self.sample_derivatives(sample)?;
        Ok((l, d.gradient))
    }

    fn sample_derivatives(&self, sample: &LabeledSample) -> Result<(f64, PerSampleDerivatives)> {
        let z = self.logit(sample)?;
        let p = sigmoid(z);
        let y = if sample.label == 0 { 1.0 } else { 0.0 };
        let loss = crate::network::cross_entropy(sample.label, &[z, 0.0]);
        Ok((
            loss,
            PerSampleDerivatives {
                gradient: sample.features.iter().map(|x| (p - y) * x).collect(),
                hessian_diagonal: sample.features.iter().map(|x| p * (1.0 - p) * x * x).collect(),
            },
        ))
    }
}

impl ParametricModel for LinearLogitModel {
    fn parameters(&self) -> &[f64] {
        &self.theta
    }

    fn with_parameters(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                what: "linear model parameters",
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        Ok(Self::new(theta.to_vec()))
    }
}

/// Full-matrix penalty next to the diagonal one.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactIceReport {
    /// Mean curvature matrix, the full counterpart of the ICE diagonal.
    pub j_hat: DMatrix<f64>,
    /// `(1/n) Σ v_i v_iᵀ`.
    pub i_hat: DMatrix<f64>,
    /// `c Σ v_iᵀ J⁺ v_i` with `c` from [`crate::ice::PenaltyScale`].
    pub exact_penalty: f64,
    /// `c n tr(Î J⁺)`, algebraically equal to `exact_penalty`.
    pub trace_penalty: f64,
    /// Penalty from the diagonal ICE path.
    pub approx_penalty: f64,
    /// Largest over smallest retained singular value of `J`.
    pub condition_estimate: f64,
    pub retained_singular_values: usize,
    pub i_hat_min_eigenvalue: f64,
}

/// Full-matrix ICE penalty.
///
/// `J` is the finite-difference Jacobian of the mean gradient, symmetrized.
/// Its pseudo-inverse drops singular values below `svd_truncation` times the
/// largest.
pub fn exact_ice<M: ParametricModel>(
    model: &M,
    data: &[LabeledSample],
    svd_truncation: f64,
    options: IceOptions,
) -> Result<ExactIceReport> {
    let d = model.parameter_count();
    if d > EXACT_ICE_MAX_PARAMETERS {
        return Err(Error::TooManyParameters {
            count: d,
            limit: EXACT_ICE_MAX_PARAMETERS,
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("exact ICE needs at least one sample".into()));
    }
    let n = data.len();
    let c = options.penalty_scale.factor(n);

    let jac = fd_jacobian(
        |theta| Ok(ice::mle_objective(&model.with_parameters(theta)?, data)?.gradient),
        model.parameters(),
        FdConfig::default(),
    )?;
    let mut j_hat = DMatrix::zeros(d, d);
    for r in 0..d {
        for k in 0..d {
            j_hat[(r, k)] = 0.5 * (jac[(r, k)] + jac[(k, r)]);
        }
    }

    let vs: Vec<DVector<f64>> = data
        .iter()
        .map(|s| Ok(DVector::from_vec(model.sample_gradient(s)?.1)))
        .collect::<Result<_>>()?;
    let mut i_hat = DMatrix::zeros(d, d);
    for v in &vs {
        i_hat += v * v.transpose();
    }
    i_hat /= n as f64;

    let svd = j_hat.clone().svd(true, true);
    let largest = svd.singular_values.max();
    if !largest.is_finite() {
        return Err(Error::Svd("non-finite singular values".into()));
    }
    let cutoff = svd_truncation * largest;
    let retained: Vec<f64> = svd.singular_values.iter().copied().filter(|&s| s > cutoff).collect();
    let condition_estimate = match retained.iter().copied().reduce(f64::min) {
        Some(smallest) => largest / smallest,
        None => f64::INFINITY,
    };
    let pinv = svd
        .pseudo_inverse(cutoff.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Svd(e.to_string()))?;

    let exact_penalty = c * vs.iter().map(|v| v.dot(&(&pinv * v))).sum::<f64>();
    let trace_penalty = c * n as f64 * (&i_hat * &pinv).trace();
    let i_hat_min_eigenvalue = i_hat.clone().symmetric_eigen().eigenvalues.min();
    let approx_penalty = ice::ice_objective(model, data, options)?.penalty;

    Ok(ExactIceReport {
        j_hat,
        i_hat,
        exact_penalty,
        trace_penalty,
        approx_penalty,
        condition_estimate,
        retained_singular_values: retained.len(),
        i_hat_min_eigenvalue,
    })
}

/// Largest elementwise relative difference, with `floor` guarding tiny entries.
pub fn max_relative_error(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (a - e).abs() / e.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of one check in [`run_validation_suite`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

fn check(name: &str, measured: f64, tolerance: f64) -> ValidationCheck {
    ValidationCheck {
        name: name.to_string(),
        passed: measured <= tolerance,
        measured,
        tolerance,
    }
}

/// The four layer configurations of the overfitting study.
pub fn reference_topologies() -> Vec<NetworkTopology> {
    [vec![11, 3], vec![11, 5, 3], vec![11, 8, 5, 3], vec![11, 11, 8, 5, 3]]
        .into_iter()
        .map(|s| NetworkTopology::new(s).expect("valid"))
        .collect()
}

/// Deterministic random sample for a topology.
pub fn random_sample(topology: &NetworkTopology, seed: u64) -> LabeledSample {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let features = (0..topology.input_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
    LabeledSample::new(features, rng.random_range(0..topology.class_count()))
}

/// Deterministic network with weights drawn uniformly from `[-scale, scale]`.
pub fn random_network(topology: &NetworkTopology, seed: u64, scale: f64) -> Network {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let theta = (0..topology.parameter_count()).map(|_| rng.random_range(-scale..scale)).collect();
    Network::from_parameters(topology.clone(), theta).expect("finite parameters")
}

fn sample_loss<'a>(network: &Network, sample: &'a LabeledSample) -> impl FnMut(&[f64]) -> f64 + 'a {
    let topology = network.topology().clone();
    move |theta: &[f64]| {
        let net = Network::from_parameters(topology.clone(), theta.to_vec()).expect("finite");
        crate::network::cross_entropy(sample.label, &net.scores(&sample.features).expect("width"))
    }
}

/// Max relative error of the backprop gradient against central differences.
pub fn gradient_fd_error(network: &Network, sample: &LabeledSample) -> Result<f64> {
    let trace = network.forward(&sample.features)?;
    let g = backprop::backprop_gradient(network, &trace, sample.label)?;
    let fd = fd_gradient(sample_loss(network, sample), network.parameters(), FdConfig::default())?;
    Ok(max_relative_error(&g, &fd, 1e-3))
}

/// Max relative error of the backprop Hessian diagonal against second differences.
pub fn hessian_fd_error(network: &Network, sample: &LabeledSample) -> Result<f64> {
    let trace = network.forward(&sample.features)?;
    let h = backprop::backprop_hessian_diagonal(network, &trace, sample.label)?.hessian_diagonal;
    let fd = fd_hessian_diagonal(sample_loss(network, sample), network.parameters(), FdConfig::default())?;
    Ok(max_relative_error(&h, &fd, 1e-3))
}

/// Max relative difference between the backward sweep and the dense loops.
pub fn recursion_error(network: &Network, sample: &LabeledSample) -> Result<f64> {
    let trace = network.forward(&sample.features)?;
    let fast = backprop::backprop_hessian_diagonal(network, &trace, sample.label)?;
    let slow = dense_gamma_oracle(network, &trace, sample.label);
    Ok(max_relative_error(&fast.hessian_diagonal, &slow.hessian_diagonal, 1e-300)
        .max(max_relative_error(&fast.gradient, &slow.gradient, 1e-300)))
}

/// Runs every oracle comparison on fixed seeds.
pub fn run_validation_suite() -> Result<Vec<ValidationCheck>> {
    let mut checks = Vec::new();
    let topologies = reference_topologies();

    let poly = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>();
    let g = fd_gradient(poly, &[1.0, 2.0], FdConfig::default())?;
    checks.push(check("fd_gradient on θᵀθ", max_relative_error(&g, &[2.0, 4.0], 1.0), 1e-9));
    let h = fd_hessian_diagonal(
        |t: &[f64]| 1.5 * t[0] * t[0] - 0.5 * t[1] * t[1],
        &[0.3, -2.0],
        FdConfig::default(),
    )?;
    checks.push(check("fd_hessian_diagonal on Σ c θ²", max_relative_error(&h, &[3.0, -1.0], 1.0), 1e-6));

    let mut worst = 0.0f64;
    for case in 0..24u64 {
        let topo = &topologies[case as usize % topologies.len()];
        let net = random_network(topo, 1000 + case, 0.5);
        worst = worst.max(gradient_fd_error(&net, &random_sample(topo, 2000 + case))?);
    }
    checks.push(check("backprop gradient vs central differences", worst, 1e-5));

    let single = &topologies[0];
    let mut worst = 0.0f64;
    for case in 0..5u64 {
        let net = random_network(single, 3000 + case, 0.5);
        worst = worst.max(hessian_fd_error(&net, &random_sample(single, 4000 + case))?);
    }
    checks.push(check("single-layer Hessian diagonal vs second differences", worst, 1e-4));

    let mut worst = 0.0f64;
    for (i, topo) in topologies.iter().enumerate() {
        for case in 0..3u64 {
            let seed = 5000 + 10 * i as u64 + case;
            let net = random_network(topo, seed, 1.0);
            worst = worst.max(recursion_error(&net, &random_sample(topo, seed))?);
        }
    }
    checks.push(check("backward sweep vs dense recursion", worst, 1e-12));

    let model = LinearLogitModel::new(vec![0.4]);
    let data = logit_model_data(1, 60, 6000);
    let report = exact_ice(&model, &data, 1e-12, IceOptions::default())?;
    let (plain, bound) = one_parameter_reference(&model, &data, IceOptions::default())?;
    checks.push(check(
        "one-parameter penalty before stabilization",
        (plain - report.exact_penalty).abs() / report.exact_penalty,
        1e-8,
    ));
    checks.push(check(
        "one-parameter penalty within the stabilizer bias",
        (report.approx_penalty - report.exact_penalty).abs() / report.exact_penalty / bound,
        1.0,
    ));

    let model = LinearLogitModel::new(vec![0.3, -0.2, 0.1, 0.5]);
    let data = logit_model_data(4, 80, 6001);
    let report = exact_ice(&model, &data, 1e-12, IceOptions::default())?;
    checks.push(check(
        "tr(Î J⁺) identity",
        (report.trace_penalty - report.exact_penalty).abs() / report.exact_penalty,
        1e-10,
    ));

    let mut worst = 0.0f64;
    for v in [1e-6, 1e-3, 1.0, 1e3, 1e6] {
        for d in [-1e3, -1.0, 0.0] {
            let term = v * v * ice::stabilized_inverse_element(d, v, 10.0);
            worst = worst.max((term - 1.0).abs());
        }
    }
    checks.push(check("non-positive curvature pins the term at 1", worst, 1e-12));

    Ok(checks)
}

/// `(c Σ v_i² / D, bound)` for a one-parameter model, where `bound` caps the
/// relative bias of the stabilized inverse.
///
/// With one parameter `D = max|D|`, so the weight is `w = exp(-√ε)` and each
/// term is off by the factor `1 / (1 + (1 - w)(v_i²/D - 1))`.
pub fn one_parameter_reference<M: SampleModel>(
    model: &M,
    data: &[LabeledSample],
    options: IceOptions,
) -> Result<(f64, f64)> {
    if model.parameter_count() != 1 {
        return Err(Error::DimensionMismatch {
            what: "one-parameter reference",
            expected: 1,
            got: model.parameter_count(),
        });
    }
    let mut d = 0.0;
    let mut vs = Vec::with_capacity(data.len());
    for s in data {
        let (_, der) = model.sample_derivatives(s)?;
        d += der.hessian_diagonal[0];
        vs.push(der.gradient[0]);
    }
    d /= data.len() as f64;
    let c = options.penalty_scale.factor(data.len());
    let plain = c * vs.iter().map(|v| v * v).sum::<f64>() / d;
    let spread = vs.iter().map(|v| (v * v / d - 1.0).abs()).fold(0.0, f64::max);
    let one_minus_w = -(-ice::sqrt_epsilon()).exp_m1();
    Ok((plain, 1.01 * one_minus_w * spread.max(1.0)))
}

/// Two-class data for [`LinearLogitModel`] with `width` features in `[0.5, 2)`.
///
/// Labels follow a logistic teacher with weights alternating `0.7, -0.4`.
pub fn logit_model_data(width: usize, n: usize, seed: u64) -> Vec<LabeledSample> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..width).map(|_| rng.random_range(0.5..2.0)).collect();
            let z: f64 = x
                .iter()
                .enumerate()
                .map(|(j, v)| if j % 2 == 0 { 0.7 * v } else { -0.4 * v })
                .sum();
            let label = if rng.random::<f64>() < sigmoid(z) { 0 } else { 1 };
            LabeledSample::new(x, label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_polynomials() {
        let g = fd_gradient(|t: &[f64]| t[0] * t[0] + t[1] * t[1], &[1.0, 2.0], FdConfig::default()).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] - 4.0).abs() < 1e-9);
        let g = fd_gradient(|_: &[f64]| 7.0, &[1.0, -3.0, 0.0], FdConfig::default()).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let c = [0.5, -2.0, 3.0];
        let h = fd_hessian_diagonal(
            |t: &[f64]| t.iter().zip(&c).map(|(x, c)| c * x * x).sum(),
            &[0.2, 1.5, -4.0],
            FdConfig::default(),
        )
        .unwrap();
        for (hk, ck) in h.iter().zip(c) {
            assert!((hk - 2.0 * ck).abs() < 1e-6 * (2.0 * ck).abs(), "{hk} vs {}", 2.0 * ck);
        }
        let h = fd_hessian_diagonal(|t: &[f64]| 3.0 * t[0] - t[1] + 2.0, &[0.1, 0.2], FdConfig::default()).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn fd_reports_non_finite_probes() {
        let f = |t: &[f64]| if t[0] > 0.0 { f64::NAN } else { 0.0 };
        assert!(fd_gradient(f, &[0.0], FdConfig::default()).is_err());
    }

    #[test]
    fn dense_forward_matches_network_forward() {
        for (i, topo) in reference_topologies().iter().enumerate() {
            let net = random_network(topo, i as u64, 1.0);
            let x = random_sample(topo, 77 + i as u64).features;
            let trace = net.forward(&x).unwrap();
            let dense = dense_forward(&net, &x);
            for (a, b) in trace.activations.iter().zip(&dense) {
                assert!(max_relative_error(a, b, 1e-300) <= 1e-14);
            }
        }
    }

    #[test]
    fn dense_oracle_zero_network() {
        let topo = NetworkTopology::new(vec![3, 4, 2]).unwrap();
        let net = Network::zeros(topo.clone());
        let trace = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        let d = dense_gamma_oracle(&net, &trace, 0);
        // every W² multiplier into the hidden layer is zero, so only the
        // ∂C/∂a · u'' term could survive and u'' vanishes at σ = 1/2
        let hidden = topo.layer_offset(1);
        assert!(d.hessian_diagonal[..hidden].iter().all(|&h| h == 0.0));
        assert!(d.gradient[..hidden].iter().all(|&g| g == 0.0));
        // output block: p(1-p) a², with p = 1/2 and a = 1/2 (bias a = 1)
        assert_eq!(d.hessian_diagonal[hidden], 0.25);
        assert_eq!(d.hessian_diagonal[hidden + 1], 0.25 * 0.25);
    }

    #[test]
    fn dense_oracle_single_layer_closed_form() {
        let topo = NetworkTopology::new(vec![2, 3]).unwrap();
        let net = random_network(&topo, 3, 1.0);
        let x = [0.4, -1.1];
        let trace = net.forward(&x).unwrap();
        let d = dense_gamma_oracle(&net, &trace, 1);
        let p = crate::network::softmax(trace.scores());
        for i in 0..3 {
            for k in 0..2 {
                let want = p[i] * (1.0 - p[i]) * x[k] * x[k];
                assert!((d.hessian_diagonal[i * 3 + k + 1] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_model_derivatives_match_fd() {
        let data = logit_model_data(3, 5, 1);
        let theta = vec![0.3, -0.1, 0.2];
        let model = LinearLogitModel::new(theta.clone());
        for s in &data {
            let (_, d) = model.sample_derivatives(s).unwrap();
            let f = |t: &[f64]| LinearLogitModel::new(t.to_vec()).sample_gradient(s).unwrap().0;
            let g = fd_gradient(f, &theta, FdConfig::default()).unwrap();
            assert!(max_relative_error(&d.gradient, &g, 1e-3) < 1e-8);
            let h = fd_hessian_diagonal(f, &theta, FdConfig::default()).unwrap();
            assert!(max_relative_error(&d.hessian_diagonal, &h, 1e-3) < 1e-5);
        }
    }

    #[test]
    fn exact_ice_rejects_large_models() {
        let net = Network::zeros(NetworkTopology::new(vec![11, 5, 3]).unwrap());
        let data = vec![LabeledSample::new(vec![0.0; 11], 0)];
        assert!(matches!(
            exact_ice(&net, &data, 1e-12, IceOptions::default()),
            Err(Error::TooManyParameters { count: 78, .. })
        ));
    }

    #[test]
    fn exact_ice_zero_scores_give_zero_penalty() {
        // x = 0 makes every per-sample gradient vanish
        let data = vec![LabeledSample::new(vec![0.0], 0), LabeledSample::new(vec![0.0], 1)];
        let r = exact_ice(&LinearLogitModel::new(vec![0.2]), &data, 1e-12, IceOptions::default()).unwrap();
        assert_eq!(r.exact_penalty, 0.0);
        assert_eq!(r.approx_penalty, 0.0);
    }

    #[test]
    fn exact_ice_matrices_are_well_formed() {
        let topo = NetworkTopology::new(vec![2, 2]).unwrap();
        let net = random_network(&topo, 11, 0.5);
        let data: Vec<_> = (0..30).map(|i| random_sample(&topo, 100 + i)).collect();
        let r = exact_ice(&net, &data, 1e-12, IceOptions::default()).unwrap();
        assert_eq!(r.j_hat, r.j_hat.transpose());
        assert!(r.i_hat_min_eigenvalue >= -1e-10);
        assert!(r.exact_penalty > 0.0 && r.approx_penalty > 0.0);
        // shifting every output row by the same vector leaves softmax unchanged
        assert!(r.condition_estimate > 1e6, "{}", r.condition_estimate);
    }

    #[test]
    fn trace_identity_on_well_conditioned_model() {
        let model = LinearLogitModel::new(vec![0.3, -0.2, 0.1, 0.5]);
        let data = logit_model_data(4, 80, 7);
        let r = exact_ice(&model, &data, 1e-12, IceOptions::default()).unwrap();
        assert_eq!(r.retained_singular_values, 4);
        assert!(r.condition_estimate < 1e4);
        assert!((r.trace_penalty - r.exact_penalty).abs() <= 1e-10 * r.exact_penalty);
    }
}
