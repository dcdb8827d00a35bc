//! InfoNCE over cosine similarities with analytic gradients.

use crate::embedding::{dot, Embedding, ZERO_NORM_TOL};
use crate::error::{NidsError, Result};
use crate::par;

/// One anchor with its positive and negatives, all as indices into a shared
/// embedding pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl ContrastiveTerm {
    fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.positive).chain(self.negatives.iter().copied())
    }

    fn num_candidates(&self) -> usize {
        1 + self.negatives.len()
    }
}

/// Loss and gradient with respect to every pool entry.
#[derive(Debug, Clone)]
pub(crate) struct PoolLoss {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

struct TermPartial {
    loss: f64,
    cosines: Vec<f64>,
    /// dL/dcos_j, already divided by the number of terms.
    dcos: Vec<f64>,
}

/// Mean InfoNCE over `terms`:
/// `-log(exp(cos(a, c+)/tau) / sum_j exp(cos(a, c_j)/tau))`.
pub(crate) fn pool_infonce(pool: &[&[f64]], terms: &[ContrastiveTerm], tau: f64) -> Result<PoolLoss> {
    if !(tau > 0.0) {
        return Err(NidsError::InvalidConfig(format!("temperature must be > 0, got {tau}")));
    }
    if terms.is_empty() {
        return Err(NidsError::DegenerateBatch("no anchors".into()));
    }
    if let Some(t) = terms.iter().find(|t| t.num_candidates() < 2) {
        return Err(NidsError::DegenerateBatch(format!("anchor {} has {} candidate(s)", t.anchor, t.num_candidates())));
    }
    let dim = pool.first().map_or(0, |p| p.len());
    let mut norms = Vec::with_capacity(pool.len());
    for (i, p) in pool.iter().enumerate() {
        if p.len() != dim {
            return Err(NidsError::DimMismatch { expected: dim, got: p.len() });
        }
        let n = dot(p, p).sqrt();
        if n < ZERO_NORM_TOL {
            return Err(NidsError::ZeroVector { index: Some((i, 0)) });
        }
        norms.push(n);
    }

    let inv_terms = 1.0 / terms.len() as f64;
    let partials = par::map_range(terms.len(), |t| {
        let term = &terms[t];
        let a = pool[term.anchor];
        let cosines: Vec<f64> = term.candidates().map(|c| dot(a, pool[c]) / (norms[term.anchor] * norms[c])).collect();
        let logits: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - logits[0];
        let dcos = logits
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let p = (l - lse).exp();
                let target = if j == 0 { 1.0 } else { 0.0 };
                (p - target) / tau * inv_terms
            })
            .collect();
        TermPartial { loss, cosines, dcos }
    });

    let mut grads = vec![vec![0.0; dim]; pool.len()];
    let mut loss = 0.0;
    for (term, part) in terms.iter().zip(&partials) {
        loss += part.loss;
        let ai = term.anchor;
        let a = pool[ai];
        let na = norms[ai];
        for ((ci, &cos), &g) in term.candidates().zip(&part.cosines).zip(&part.dcos) {
            let c = pool[ci];
            let nc = norms[ci];
            let inv = 1.0 / (na * nc);
            // d cos / d a = c/(|a||c|) - cos * a/|a|^2, and symmetrically for c.
            let (sa, sc) = (cos / (na * na), cos / (nc * nc));
            for d in 0..dim {
                grads[ai][d] += g * (c[d] * inv - sa * a[d]);
            }
            for d in 0..dim {
                grads[ci][d] += g * (a[d] * inv - sc * c[d]);
            }
        }
    }
    Ok(PoolLoss { loss: loss * inv_terms, grads })
}

/// Output of [`infonce_loss`].
#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_anchors: Vec<Vec<f64>>,
    pub grad_candidates: Vec<Vec<f64>>,
}

/// InfoNCE where every anchor scores against the same candidate list and
/// `positive_index[i]` names anchor `i`'s positive within it.
pub fn infonce_loss(
    anchors: &[Embedding],
    candidates: &[Embedding],
    positive_index: &[usize],
    tau: f64,
) -> Result<InfoNceOutput> {
    if positive_index.len() != anchors.len() {
        return Err(NidsError::InvalidShape(format!(
            "{} positive indices for {} anchors",
            positive_index.len(),
            anchors.len()
        )));
    }
    if candidates.len() < 2 {
        return Err(NidsError::DegenerateBatch(format!("{} candidate(s)", candidates.len())));
    }
    let na = anchors.len();
    let pool: Vec<&[f64]> = anchors.iter().chain(candidates).map(Embedding::as_slice).collect();
    let mut terms = Vec::with_capacity(na);
    for (i, &pos) in positive_index.iter().enumerate() {
        if pos >= candidates.len() {
            return Err(NidsError::InvalidShape(format!("positive index {pos} out of range")));
        }
        let negatives = (0..candidates.len()).filter(|&j| j != pos).map(|j| na + j).collect();
        terms.push(ContrastiveTerm { anchor: i, positive: na + pos, negatives });
    }
    let PoolLoss { loss, mut grads } = pool_infonce(&pool, &terms, tau)?;
    let grad_candidates = grads.split_off(na);
    Ok(InfoNceOutput { loss, grad_anchors: grads, grad_candidates })
}
