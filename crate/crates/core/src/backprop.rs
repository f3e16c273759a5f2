//! Backward pass producing the per-sample loss gradient and the diagonal of
//! its Hessian with respect to every weight.
//!
//! With `p = softmax(a_L)` the sweep starts from `∂C/∂a_L = p - y` and
//! `γ_L = p (1 - p)`, then for each weight layer, walking back:
//!
//! ```text
//! δ_i        = u'_i · ∂C/∂a_i
//! h_i        = γ_i · u'_i² + ∂C/∂a_i · u''_i
//! ∂C/∂W_ik   = δ_i · ã_k             (ã = [1, a_{l-1}])
//! ∂²C/∂W_ik² = h_i · ã_k²
//! ∂C/∂a_k    = Σ_i W_ik δ_i          (previous layer)
//! γ_k        = Σ_i h_i W_ik²         (previous layer, off-diagonal terms dropped)
//! ```
//!
//! The Hessian diagonal is exact for the last weight layer and for networks
//! without hidden layers. For earlier layers the dropped off-diagonal
//! curvature makes it an approximation.

use crate::error::{Error, Result};
use crate::network::{loss_output_derivs, ForwardTrace, LabeledSample, Network};

/// Per-observation derivatives of the cross-entropy, packed like the parameters.
///
/// `gradient` is `v = -∂ log g(x | θ)` for one observation and
/// `hessian_diagonal` its contribution to the curvature diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleDerivatives {
    pub gradient: Vec<f64>,
    pub hessian_diagonal: Vec<f64>,
}

/// Intermediate adjoints of one backward sweep, indexed like
/// `ForwardTrace::activations`. The input layer entry (index 0) of
/// `activation_partials` and `gamma` is left empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackpropWorkspace {
    /// `delta[l]` belongs to weight layer `l`.
    pub delta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub activation_partials: Vec<Vec<f64>>,
}

pub(crate) fn check_trace(network: &Network, trace: &ForwardTrace, label: usize) -> Result<()> {
    let sizes = network.topology().layer_sizes();
    let depth = network.topology().depth();
    if trace.activations.len() != sizes.len() {
        return Err(Error::DimensionMismatch {
            what: "trace layer count",
            expected: sizes.len(),
            got: trace.activations.len(),
        });
    }
    for (l, &width) in sizes.iter().enumerate() {
        if trace.activations[l].len() != width {
            return Err(Error::DimensionMismatch {
                what: "trace activation width",
                expected: width,
                got: trace.activations[l].len(),
            });
        }
    }
    if trace.first_derivs.len() != depth || trace.second_derivs.len() != depth {
        return Err(Error::DimensionMismatch {
            what: "trace derivative layer count",
            expected: depth,
            got: trace.first_derivs.len().min(trace.second_derivs.len()),
        });
    }
    for l in 0..depth {
        let width = sizes[l + 1];
        if trace.first_derivs[l].len() != width || trace.second_derivs[l].len() != width {
            return Err(Error::DimensionMismatch {
                what: "trace derivative width",
                expected: width,
                got: trace.first_derivs[l].len(),
            });
        }
    }
    let classes = network.topology().class_count();
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    Ok(())
}

/// Runs the backward sweep. The gradient arithmetic is identical whether or
/// not the Hessian diagonal is requested.
fn sweep(
    network: &Network,
    trace: &ForwardTrace,
    label: usize,
    with_hessian: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>, BackpropWorkspace)> {
    check_trace(network, trace, label)?;
    let topo = network.topology();
    let depth = topo.depth();
    let count = topo.parameter_count();

    let mut gradient = vec![0.0; count];
    let mut hessian = with_hessian.then(|| vec![0.0; count]);

    let (out_grad, out_curv) = loss_output_derivs(label, trace.scores());
    let mut ws = BackpropWorkspace {
        delta: vec![Vec::new(); depth],
        gamma: vec![Vec::new(); depth + 1],
        activation_partials: vec![Vec::new(); depth + 1],
    };
    ws.activation_partials[depth] = out_grad;
    if with_hessian {
        ws.gamma[depth] = out_curv;
    }

    for l in (0..depth).rev() {
        let (rows, cols) = topo.layer_shape(l);
        let offset = topo.layer_offset(l);
        let w = network.layer_weights(l);
        let input = &trace.activations[l];
        let d1 = &trace.first_derivs[l];
        let d2 = &trace.second_derivs[l];
        let partials = &ws.activation_partials[l + 1];

        let delta: Vec<f64> = d1.iter().zip(partials).map(|(u, p)| u * p).collect();
        for i in 0..rows {
            let row = &mut gradient[offset + i * cols..offset + (i + 1) * cols];
            row[0] = delta[i];
            for (g, a) in row[1..].iter_mut().zip(input) {
                *g = delta[i] * a;
            }
        }

        let curvature: Option<Vec<f64>> = hessian.as_mut().map(|hess| {
            let gamma = &ws.gamma[l + 1];
            let h: Vec<f64> = (0..rows)
                .map(|i| gamma[i] * d1[i] * d1[i] + partials[i] * d2[i])
                .collect();
            for i in 0..rows {
                let row = &mut hess[offset + i * cols..offset + (i + 1) * cols];
                row[0] = h[i];
                for (g, a) in row[1..].iter_mut().zip(input) {
                    *g = h[i] * a * a;
                }
            }
            h
        });

        if l > 0 {
            let width = cols - 1;
            let mut prev_partials = vec![0.0; width];
            for (i, row) in w.chunks_exact(cols).enumerate() {
                for (p, wik) in prev_partials.iter_mut().zip(&row[1..]) {
                    *p += wik * delta[i];
                }
            }
            ws.activation_partials[l] = prev_partials;

            if let Some(h) = &curvature {
                let mut prev_gamma = vec![0.0; width];
                for (i, row) in w.chunks_exact(cols).enumerate() {
                    for (g, wik) in prev_gamma.iter_mut().zip(&row[1..]) {
                        *g += h[i] * wik * wik;
                    }
                }
                ws.gamma[l] = prev_gamma;
            }
        }
        ws.delta[l] = delta;
    }

    Ok((gradient, hessian, ws))
}

/// Gradient of the per-sample cross-entropy with respect to all packed weights.
pub fn backprop_gradient(network: &Network, trace: &ForwardTrace, label: usize) -> Result<Vec<f64>> {
    Ok(sweep(network, trace, label, false)?.0)
}

/// Like [`backprop_gradient`] but also returns the adjoints of the sweep.
pub fn backprop_gradient_with_workspace(
    network: &Network,
    trace: &ForwardTrace,
    label: usize,
) -> Result<(Vec<f64>, BackpropWorkspace)> {
    let (g, _, ws) = sweep(network, trace, label, false)?;
    Ok((g, ws))
}

/// Gradient and Hessian diagonal in a single backward sweep.
pub fn backprop_hessian_diagonal(
    network: &Network,
    trace: &ForwardTrace,
    label: usize,
) -> Result<PerSampleDerivatives> {
    let (gradient, hessian, _) = sweep(network, trace, label, true)?;
    Ok(PerSampleDerivatives {
        gradient,
        hessian_diagonal: hessian.expect("requested"),
    })
}

/// Forward plus gradient for one sample; returns `(loss, gradient)`.
pub fn sample_gradient(network: &Network, sample: &LabeledSample) -> Result<(f64, Vec<f64>)> {
    let trace = network.forward(&sample.features)?;
    let loss = crate::network::cross_entropy(sample.label, trace.scores());
    let g = backprop_gradient(network, &trace, sample.label)?;
    Ok((loss, g))
}

/// Forward plus gradient and Hessian diagonal for one sample.
pub fn sample_derivatives(
    network: &Network,
    sample: &LabeledSample,
) -> Result<(f64, PerSampleDerivatives)> {
    let trace = network.forward(&sample.features)?;
    let loss = crate::network::cross_entropy(sample.label, trace.scores());
    let d = backprop_hessian_diagonal(network, &trace, sample.label)?;
    Ok((loss, d))
}
