//! Hand-written forward/backward passes of both adapters into the InfoNCE loss.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::infonce::{pool_infonce, ContrastiveTerm};
use crate::adapter::{affine, check_dim, gate, relu, AdapterKind, MlpParams};
use crate::error::{NidsError, Result};
use crate::par;

/// Examples per gradient-accumulation chunk. Fixed so the reduction order,
/// and therefore every bit of the result, is independent of the thread count.
const GRAD_CHUNK: usize = 32;

/// Which adapter is being trained and its fixed hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// beta (weight adapter) or alpha (CLIP adapter).
    pub scale: f64,
}

/// Per-example choices that make a batch loss a deterministic function of the
/// parameters: the positive for each anchor and optional dropout multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    /// `positives[i]` is the same-instance view paired with anchor `i`, or
    /// `None` if instance `i` has a single view in the batch.
    pub positives: Vec<Option<usize>>,
    /// Hidden-unit multipliers (0 or `1/(1-p)`) per example; CLIP adapter only.
    pub dropout: Option<Vec<Vec<f64>>>,
}

impl BatchPlan {
    /// Samples one random other view per anchor and, if `dropout_rate > 0`,
    /// inverted-dropout masks for `hidden` units.
    pub fn sample<R: Rng + ?Sized>(
        labels: &[u32],
        dropout_rate: Option<f64>,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        validate_labels(labels)?;
        let positives = (0..labels.len())
            .map(|i| {
                let others: Vec<usize> = (0..labels.len()).filter(|&j| j != i && labels[j] == labels[i]).collect();
                others.choose(rng).copied()
            })
            .collect();
        let dropout = match dropout_rate {
            Some(p) if p > 0.0 => {
                if p >= 1.0 {
                    return Err(NidsError::InvalidConfig(format!("dropout rate {p} must be < 1")));
                }
                let keep = 1.0 / (1.0 - p);
                Some(
                    (0..labels.len())
                        .map(|_| (0..hidden).map(|_| if rng.random_bool(p) { 0.0 } else { keep }).collect())
                        .collect(),
                )
            }
            _ => None,
        };
        Ok(Self { positives, dropout })
    }

    /// Contrastive terms: anchors that have a positive, scored against it and
    /// every other-instance embedding.
    pub fn terms(&self, labels: &[u32]) -> Vec<ContrastiveTerm> {
        self.positives
            .iter()
            .enumerate()
            .filter_map(|(i, pos)| {
                pos.map(|positive| ContrastiveTerm {
                    anchor: i,
                    positive,
                    negatives: (0..labels.len()).filter(|&j| labels[j] != labels[i]).collect(),
                })
            })
            .collect()
    }
}

fn validate_labels(labels: &[u32]) -> Result<()> {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let distinct = {
        let mut d = sorted.clone();
        d.dedup();
        d.len()
    };
    if distinct < 2 {
        return Err(NidsError::DegenerateBatch(format!("{distinct} distinct instance(s) in batch")));
    }
    if !sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(NidsError::DegenerateBatch("no instance has two views in the batch".into()));
    }
    Ok(())
}

/// Activations of one example kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// MLP input: `beta * f` (weight) or `f` (CLIP).
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    /// Post-relu, post-dropout hidden activations.
    hidden: Vec<f64>,
    /// Dropout multipliers applied to the hidden layer, if any.
    mask: Option<Vec<f64>>,
    out: Vec<f64>,
    /// Gates (weight adapter only).
    gates: Vec<f64>,
    pub(crate) adapted: Vec<f64>,
}

impl ForwardCache {
    /// Sign pattern of every relu input, used to detect kink crossings.
    pub(crate) fn relu_signs(&self, kind: AdapterKind) -> Vec<bool> {
        let mut s: Vec<bool> = self.hidden_pre.iter().map(|&v| v > 0.0).collect();
        if kind == AdapterKind::Weight {
            s.extend(self.out.iter().map(|&v| v > 0.0));
        }
        s
    }
}

pub(crate) fn forward_cached(spec: &AdapterSpec, params: &MlpParams, f: &[f64], mask: Option<&[f64]>) -> ForwardCache {
    let input: Vec<f64> = match spec.kind {
        AdapterKind::Weight => f.iter().map(|v| spec.scale * v).collect(),
        AdapterKind::Clip => f.to_vec(),
    };
    let hidden_pre = affine(params.w1(), &input, params.b1());
    let mut hidden: Vec<f64> = hidden_pre.iter().map(|&h| relu(h)).collect();
    if let Some(m) = mask {
        hidden.iter_mut().zip(m).for_each(|(h, k)| *h *= k);
    }
    let out = affine(params.w2(), &hidden, params.b2());
    let (gates, adapted) = match spec.kind {
        AdapterKind::Weight => {
            let gates: Vec<f64> = out.iter().map(|&o| gate(o)).collect();
            let adapted = gates.iter().zip(&input).map(|(g, u)| g * u).collect();
            (gates, adapted)
        }
        AdapterKind::Clip => {
            let a = spec.scale;
            let adapted = out.iter().zip(f).map(|(o, x)| a * o + (1.0 - a) * x).collect();
            (Vec::new(), adapted)
        }
    };
    ForwardCache { input, hidden_pre, hidden, mask: mask.map(<[f64]>::to_vec), out, gates, adapted }
}

/// Accumulates `d adapted -> d params` for one example into `grads`.
fn backward(spec: &AdapterSpec, params: &MlpParams, cache: &ForwardCache, d_adapted: &[f64], grads: &mut MlpParams) {
    let dim = params.dim();
    let hidden = params.hidden();
    let d_out: Vec<f64> = match spec.kind {
        AdapterKind::Weight => (0..dim)
            .map(|i| {
                let g = cache.gates[i];
                let d_gate = d_adapted[i] * cache.input[i];
                // relu'(0) = 0
                if cache.out[i] > 0.0 {
                    d_gate * g * (1.0 - g)
                } else {
                    0.0
                }
            })
            .collect(),
        AdapterKind::Clip => d_adapted.iter().map(|d| spec.scale * d).collect(),
    };
    let w2 = params.w2();
    let mut d_hidden = vec![0.0; hidden];
    for (i, &dout) in d_out.iter().enumerate() {
        let row = &w2[i * hidden..(i + 1) * hidden];
        for j in 0..hidden {
            d_hidden[j] += row[j] * dout;
        }
    }
    for j in 0..hidden {
        if let Some(m) = &cache.mask {
            d_hidden[j] *= m[j];
        }
        if cache.hidden_pre[j] <= 0.0 {
            d_hidden[j] = 0.0;
        }
    }
    let [gw1, gb1, gw2, gb2] = grads.tensors_mut();
    for (i, &dout) in d_out.iter().enumerate() {
        let row = &mut gw2[i * hidden..(i + 1) * hidden];
        for j in 0..hidden {
            row[j] += dout * cache.hidden[j];
        }
        gb2[i] += dout;
    }
    for (j, &dh) in d_hidden.iter().enumerate() {
        if dh == 0.0 {
            continue;
        }
        let row = &mut gw1[j * dim..(j + 1) * dim];
        for (w, &x) in row.iter_mut().zip(&cache.input) {
            *w += dh * x;
        }
        gb1[j] += dh;
    }
}

/// Raw embeddings with their instance labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub inputs: &'a [&'a [f64]],
    pub labels: &'a [u32],
}

pub(crate) fn forward_batch(
    spec: &AdapterSpec,
    params: &MlpParams,
    batch: &LabeledBatch<'_>,
    plan: &BatchPlan,
) -> Result<Vec<ForwardCache>> {
    if batch.inputs.len() != batch.labels.len() || plan.positives.len() != batch.labels.len() {
        return Err(NidsError::InvalidShape("batch, labels and plan lengths differ".into()));
    }
    for x in batch.inputs {
        check_dim(params.dim(), x.len())?;
    }
    if spec.kind == AdapterKind::Weight && plan.dropout.is_some() {
        return Err(NidsError::InvalidConfig("dropout is only used by the CLIP adapter".into()));
    }
    Ok(par::map_range(batch.inputs.len(), |i| {
        let mask = plan.dropout.as_ref().map(|m| m[i].as_slice());
        forward_cached(spec, params, batch.inputs[i], mask)
    }))
}

/// Batch InfoNCE loss only (no gradient).
pub fn batch_loss(
    spec: &AdapterSpec,
    params: &MlpParams,
    batch: &LabeledBatch<'_>,
    plan: &BatchPlan,
    tau: f64,
) -> Result<f64> {
    validate_labels(batch.labels)?;
    let caches = forward_batch(spec, params, batch, plan)?;
    let pool: Vec<&[f64]> = caches.iter().map(|c| c.adapted.as_slice()).collect();
    let terms = plan.terms(batch.labels);
    Ok(pool_infonce(&pool, &terms, tau)?.loss)
}

/// Batch loss and its exact gradient with respect to every adapter parameter.
pub fn backprop_adapter(
    spec: &AdapterSpec,
    params: &MlpParams,
    batch: &LabeledBatch<'_>,
    plan: &BatchPlan,
    tau: f64,
) -> Result<(f64, MlpParams)> {
    validate_labels(batch.labels)?;
    let caches = forward_batch(spec, params, batch, plan)?;
    let pool: Vec<&[f64]> = caches.iter().map(|c| c.adapted.as_slice()).collect();
    let terms = plan.terms(batch.labels);
    let pooled = pool_infonce(&pool, &terms, tau)?;

    let n = caches.len();
    let chunks = n.div_ceil(GRAD_CHUNK);
    let partial = par::map_range(chunks, |c| {
        let mut g = params.zeros_like();
        for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n) {
            backward(spec, params, &caches[i], &pooled.grads[i], &mut g);
        }
        g
    });
    let mut grads = params.zeros_like();
    for g in &partial {
        grads.add_assign(g);
    }
    Ok((pooled.loss, grads))
}
