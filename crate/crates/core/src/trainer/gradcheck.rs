//! Central finite-difference verification of [`backprop_adapter`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backprop::{backprop_adapter, batch_loss, forward_batch, AdapterSpec, BatchPlan, LabeledBatch};
use super::DEFAULT_TEMPERATURE;
use crate::adapter::{AdapterKind, MlpParams, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{NidsError, Result};

/// Largest accepted `|analytic - fd| / max(|fd|, 1e-8)`.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Magnitude of the offsets added to all-zero parameters so no relu input
/// sits exactly on its kink.
const ZERO_PARAM_NUDGE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub kind: AdapterKind,
    pub dim: usize,
    pub num_instances: usize,
    pub templates_per_instance: usize,
    pub step: f64,
    pub seed: u64,
    /// Check around the all-zero parameter point instead of a random init.
    pub zero_params: bool,
}

impl GradCheckConfig {
    pub fn new(kind: AdapterKind, dim: usize, seed: u64) -> Self {
        Self { kind, dim, num_instances: 3, templates_per_instance: 2, step: 1e-5, seed, zero_params: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameters compared against finite differences.
    pub checked: usize,
    /// Parameters whose stencil crossed a relu kink and were left out.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_CHECK_TOL
    }
}

/// Compares every analytic gradient entry of a random batch against central
/// differences with step `cfg.step`. Dropout is off.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.dim > 32 {
        return Err(NidsError::InvalidConfig(format!("grad check supports dim <= 32, got {}", cfg.dim)));
    }
    if !(cfg.step > 0.0) {
        return Err(NidsError::InvalidConfig("finite-difference step must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = AdapterSpec {
        kind: cfg.kind,
        scale: match cfg.kind {
            AdapterKind::Weight => DEFAULT_BETA,
            AdapterKind::Clip => DEFAULT_ALPHA,
        },
    };
    let (n, k, dim) = (cfg.num_instances, cfg.templates_per_instance, cfg.dim);
    // unit-scale inputs keep beta * f away from sigmoid saturation
    let scale = 1.0 / (dim as f64).sqrt();
    let inputs: Vec<Vec<f64>> =
        (0..n * k).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).collect();
    let labels: Vec<u32> = (0..n * k).map(|i| (i / k.max(1)) as u32).collect();

    let mut params = if cfg.zero_params {
        MlpParams::zeros(dim)?
    } else {
        let mut p = MlpParams::init_uniform(dim, &mut rng)?;
        // random biases so their gradients are exercised away from zero
        for t in [1, 3] {
            p.tensors_mut()[t].iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        p
    };
    if cfg.zero_params {
        for i in 0..params.num_params() {
            params.set_flat(i, rng.random_range(-ZERO_PARAM_NUDGE..ZERO_PARAM_NUDGE));
        }
    }

    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let batch = LabeledBatch { inputs: &refs, labels: &labels };
    let plan = BatchPlan::sample(&labels, None, params.hidden(), &mut rng)?;
    let tau = DEFAULT_TEMPERATURE;
    let (_, grads) = backprop_adapter(&spec, &params, &batch, &plan, tau)?;

    let signs = |p: &MlpParams| -> Result<Vec<Vec<bool>>> {
        Ok(forward_batch(&spec, p, &batch, &plan)?.iter().map(|c| c.relu_signs(spec.kind)).collect())
    };
    let base_signs = signs(&params)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0 };
    let mut probe = params.clone();
    for i in 0..params.num_params() {
        let x = params.get_flat(i);
        probe.set_flat(i, x + cfg.step);
        let up = batch_loss(&spec, &probe, &batch, &plan, tau)?;
        let up_signs = signs(&probe)?;
        probe.set_flat(i, x - cfg.step);
        let down = batch_loss(&spec, &probe, &batch, &plan, tau)?;
        let down_signs = signs(&probe)?;
        probe.set_flat(i, x);
        if up_signs != base_signs || down_signs != base_signs {
            report.skipped += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * cfg.step);
        let rel = (grads.get_flat(i) - fd).abs() / fd.abs().max(1e-8);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
