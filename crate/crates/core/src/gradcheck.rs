//! Central finite differences for checking hand-written gradients.
//!
//! Only forward evaluations are used here, so the checks stay independent
//! of the backward code they validate.

use ndarray::Array2;

use crate::attention::{sra_block_backward, sra_block_forward, PeContext, PeMode, SraBlockParams};
use crate::backbone::{sst_backward, sst_forward, ForwardOptions, SstConfig};
use crate::fixtures::{random_matrix, random_tokens};
use crate::grouping::{group_regions, RegionCells};
use crate::rng::XorShift64Star;
use crate::Result;

/// Step used by the shipped checks.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Largest relative error the shipped checks accept.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Floor on the normalizing scale. Tensors whose exact gradient vanishes
/// (the key bias: softmax ignores per-query constants) are then held to an
/// absolute bound of `tolerance * SCALE_FLOOR`.
pub const SCALE_FLOOR: f64 = 1e-3;

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every element of one tensor.
///
/// `slot` selects the tensor inside `state`; `loss` evaluates the scalar
/// objective. The tensor is restored bit for bit after every probe.
pub fn central_difference<S>(
    state: &mut S,
    slot: impl Fn(&mut S) -> &mut [f64],
    loss: impl Fn(&S) -> f64,
    step: f64,
) -> Vec<f64> {
    let len = slot(state).len();
    let mut grad = Vec::with_capacity(len);
    for i in 0..len {
        let orig = slot(state)[i];
        slot(state)[i] = orig + step;
        let plus = loss(state);
        slot(state)[i] = orig - step;
        let minus = loss(state);
        slot(state)[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Gradient of `sum(upstream ⊙ outputs(x))` by central differences. The two
/// probe outputs are subtracted elementwise before the contraction, so the
/// large terms carried by the residual path cancel exactly instead of
/// leaving rounding noise of the summed loss.
pub fn central_difference_dot<S>(
    state: &mut S,
    slot: impl Fn(&mut S) -> &mut [f64],
    outputs: impl Fn(&S) -> Array2<f64>,
    upstream: &Array2<f64>,
    step: f64,
) -> Vec<f64> {
    let len = slot(state).len();
    let mut grad = Vec::with_capacity(len);
    for i in 0..len {
        let orig = slot(state)[i];
        slot(state)[i] = orig + step;
        let plus = outputs(state);
        slot(state)[i] = orig - step;
        let minus = outputs(state);
        slot(state)[i] = orig;
        grad.push(((plus - minus) * upstream).sum() / (2.0 * step));
    }
    grad
}

/// `max_i |a_i - n_i| / max(‖a‖∞, ‖n‖∞, SCALE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.iter().chain(numeric).fold(SCALE_FLOOR, |m, v| m.max(v.abs()));
    diff / scale
}

/// Error of one named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn push(&mut self, name: impl Into<String>, analytic: &[f64], numeric: &[f64]) {
        self.tensors.push(TensorCheck {
            name: name.into(),
            rel_error: relative_error(analytic, numeric),
            elements: analytic.len(),
        });
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.rel_error))
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn check_module_params(
    report: &mut GradCheckReport,
    prefix: &str,
    grads: &SraBlockParams<f64>,
    index: usize,
    modules: &[SraBlockParams<f64>],
    outputs: &dyn Fn(&[SraBlockParams<f64>]) -> Array2<f64>,
    upstream: &Array2<f64>,
) {
    let names: Vec<&str> = grads.tensors().iter().map(|(n, _)| *n).collect();
    for (t, name) in names.iter().enumerate() {
        let mut state = modules.to_vec();
        let numeric = central_difference_dot(
            &mut state,
            |m| m[index].tensors_mut().swap_remove(t).1.into_slice().unwrap(),
            |m| outputs(m),
            upstream,
            DEFAULT_STEP,
        );
        let analytic: Vec<f64> = grads.tensors()[t].1.iter().copied().collect();
        report.push(format!("{prefix}{name}"), &analytic, &numeric);
    }
}

fn small_context() -> PeContext {
    PeContext { mode: PeMode::RegionLocal, grid_nx: 12, grid_ny: 12 }
}

/// One attention module on 20 tokens spread over two 6x6 regions
/// (C = 8, H = 2, hidden 12): every parameter tensor plus the input.
pub fn check_sra_block(seed: u64) -> Result<GradCheckReport> {
    let mut rng = XorShift64Star::new(seed);
    let tokens = random_tokens::<f64>(&mut rng, 20, 12, 6, 8);
    let params = SraBlockParams::random(8, 12, 2, &mut rng);
    let assignment = group_regions(&tokens.coords, RegionCells::new(6, 6)?, false);
    let upstream: Array2<f64> = random_matrix(&mut rng, 20, 8);
    let ctx = small_context();
    let outputs = |f: &Array2<f64>, p: &SraBlockParams<f64>| {
        sra_block_forward(f.view(), &tokens.coords, &assignment, p, ctx, false, false, None).unwrap().features
    };
    let fwd = sra_block_forward(tokens.features.view(), &tokens.coords, &assignment, &params, ctx, true, false, None)?;
    let (dx, grads) = sra_block_backward(fwd.cache.as_ref(), &params, upstream.view())?;
    let mut report = GradCheckReport::default();
    let mut f = tokens.features.clone();
    let numeric =
        central_difference_dot(&mut f, |f| f.as_slice_mut().unwrap(), |f| outputs(f, &params), &upstream, DEFAULT_STEP);
    report.push("input", dx.as_slice().unwrap(), &numeric);
    let module_outputs = |m: &[SraBlockParams<f64>]| outputs(&tokens.features, &m[0]);
    check_module_params(&mut report, "", &grads, 0, std::slice::from_ref(&params), &module_outputs, &upstream);
    Ok(report)
}

/// Two blocks (four attention modules) on 36 tokens over a 12x12 grid:
/// every parameter of every module plus the input.
pub fn check_backbone(seed: u64) -> Result<GradCheckReport> {
    let mut rng = XorShift64Star::new(seed);
    let tokens = random_tokens::<f64>(&mut rng, 36, 12, 12, 8);
    let modules: Vec<_> = (0..4).map(|_| SraBlockParams::random(8, 12, 2, &mut rng)).collect();
    let cfg = SstConfig { num_blocks: 2, region: RegionCells::new(6, 6)?, pe: small_context(), cache_grouping: false };
    let upstream: Array2<f64> = random_matrix(&mut rng, 36, 8);
    let outputs = |f: &Array2<f64>, m: &[SraBlockParams<f64>]| {
        sst_forward(&tokens.with_features(f.clone()), &cfg, m, ForwardOptions::default()).unwrap().tokens.features
    };
    let out = sst_forward(&tokens, &cfg, &modules, ForwardOptions { retain: true, trace_module: None })?;
    let (dx, grads) = sst_backward(&out, &modules, upstream.view())?;
    let mut report = GradCheckReport::default();
    let mut f = tokens.features.clone();
    let numeric = central_difference_dot(
        &mut f,
        |f| f.as_slice_mut().unwrap(),
        |f| outputs(f, &modules),
        &upstream,
        DEFAULT_STEP,
    );
    report.push("input", dx.as_slice().unwrap(), &numeric);
    let module_outputs = |m: &[SraBlockParams<f64>]| outputs(&tokens.features, m);
    for (i, g) in grads.iter().enumerate() {
        check_module_params(&mut report, &format!("module{i}."), g, i, &modules, &module_outputs, &upstream);
    }
    Ok(report)
}
