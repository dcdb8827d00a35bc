//! Template/instance score tensors, aggregation, the appearance bonus and
//! instance-ID assignment.

mod assign;

pub use assign::{assign_argmax, assign_stable, Assignment};

use std::collections::BTreeMap;

use crate::adapter::Adapter;
use crate::embedding::{cosine, Embedding, PatchGrid, TemplateSet};
use crate::error::{NidsError, Result};
use crate::eval::iou::{BBox, Mask};
use crate::par;

/// Default `k` for top-k averaging, clamped to `K`.
pub const DEFAULT_AVG_K: usize = 5;

/// Dense row-major `rows x cols` matrix of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NidsError::InvalidShape(format!("{} scores for a {rows}x{cols} matrix", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NidsError::NonFinite("score matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NidsError::InvalidShape("ragged score rows".into()));
        }
        let n = rows.len();
        Self::new(n, cols, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sub-matrix made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self { rows: rows.len(), cols: self.cols, data }
    }
}

/// `Q x N x K` template scores and the `Q x N` instance scores derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    num_proposals: usize,
    num_instances: usize,
    templates_per_instance: usize,
    template_scores: Vec<f64>,
    pub instance_scores: ScoreMatrix,
}

impl ScoreTensor {
    pub fn num_proposals(&self) -> usize {
        self.num_proposals
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn templates_per_instance(&self) -> usize {
        self.templates_per_instance
    }

    pub fn template_score(&self, q: usize, n: usize, k: usize) -> f64 {
        self.template_scores[(q * self.num_instances + n) * self.templates_per_instance + k]
    }

    /// The `K` template scores of proposal `q` against instance `n`.
    pub fn template_scores(&self, q: usize, n: usize) -> &[f64] {
        let start = (q * self.num_instances + n) * self.templates_per_instance;
        &self.template_scores[start..start + self.templates_per_instance]
    }

    pub fn template_scores_mut(&mut self, q: usize, n: usize) -> &mut [f64] {
        let start = (q * self.num_instances + n) * self.templates_per_instance;
        &mut self.template_scores[start..start + self.templates_per_instance]
    }

    /// View index of the highest template score (lowest index on ties).
    pub fn best_template(&self, q: usize, n: usize) -> usize {
        let s = self.template_scores(q, n);
        let mut best = 0;
        for (k, &v) in s.iter().enumerate().skip(1) {
            if v > s[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    /// Mean of the `k` largest template scores.
    AvgTopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentMode {
    Stable,
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    pub aggregation: Aggregation,
    pub assignment: AssignmentMode,
    /// Labeled proposals scoring below this are dropped.
    pub delta: f64,
    pub use_appearance_bonus: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Max,
            assignment: AssignmentMode::Stable,
            delta: 0.0,
            use_appearance_bonus: false,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if let Aggregation::AvgTopK(0) = self.aggregation {
            return Err(NidsError::InvalidConfig("avg_k needs k >= 1".into()));
        }
        if !self.delta.is_finite() {
            return Err(NidsError::InvalidConfig("delta must be finite".into()));
        }
        Ok(())
    }
}

/// `template_scores[q][n][k] = cos(proposal_q, template_{n,k})`; instance
/// scores are left at zero.
pub fn score_templates(proposals: &[Embedding], templates: &TemplateSet) -> Result<ScoreTensor> {
    if proposals.is_empty() {
        return Err(NidsError::InvalidShape("no proposals to score".into()));
    }
    let (n, k) = (templates.num_instances(), templates.templates_per_instance());
    let rows = par::try_map_range(proposals.len(), |q| {
        let p = &proposals[q];
        if p.dim() != templates.dim() {
            return Err(NidsError::DimMismatch { expected: templates.dim(), got: p.dim() });
        }
        let mut row = Vec::with_capacity(n * k);
        for (t, tmpl) in templates.embeddings().iter().enumerate() {
            let s = cosine(p.as_slice(), tmpl.as_slice()).map_err(|e| match e {
                NidsError::ZeroVector { .. } => NidsError::ZeroVector { index: Some((q, t)) },
                other => other,
            })?;
            row.push(s);
        }
        Ok(row)
    })?;
    Ok(ScoreTensor {
        num_proposals: proposals.len(),
        num_instances: n,
        templates_per_instance: k,
        template_scores: rows.into_iter().flatten().collect(),
        instance_scores: ScoreMatrix::zeros(proposals.len(), n),
    })
}

fn aggregate_one(scores: &[f64], aggregation: Aggregation) -> f64 {
    match aggregation {
        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::AvgTopK(k) => {
            let k = k.clamp(1, scores.len());
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[..k].iter().sum::<f64>() / k as f64
        }
    }
}

/// Fills `instance_scores` from the template scores.
pub fn aggregate(mut scores: ScoreTensor, aggregation: Aggregation) -> ScoreTensor {
    for q in 0..scores.num_proposals {
        for n in 0..scores.num_instances {
            let v = aggregate_one(scores.template_scores(q, n), aggregation);
            scores.instance_scores.set(q, n, v);
        }
    }
    scores
}

/// Mean over foreground proposal patches of the best patch cosine against the
/// template's foreground patches.
pub fn appearance_score(proposal: &PatchGrid, template: &PatchGrid) -> Result<f64> {
    if proposal.dim() != template.dim() {
        return Err(NidsError::DimMismatch { expected: proposal.dim(), got: template.dim() });
    }
    if template.foreground_count() == 0 || proposal.foreground_count() == 0 {
        return Err(NidsError::EmptyForeground { index: None });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for p in proposal.foreground_patches() {
        let mut best = f64::NEG_INFINITY;
        for t in template.foreground_patches() {
            best = best.max(cosine(p, t)?);
        }
        total += best;
        count += 1;
    }
    Ok(total / count as f64)
}

/// `Q x N` appearance scores of each proposal against the best template of
/// each instance. `template_grids` is instance-major (`N * K` grids).
pub fn appearance_matrix(
    scores: &ScoreTensor,
    proposal_grids: &[PatchGrid],
    template_grids: &[PatchGrid],
) -> Result<ScoreMatrix> {
    let (q_count, n_count, k_count) = (scores.num_proposals, scores.num_instances, scores.templates_per_instance);
    if proposal_grids.len() != q_count || template_grids.len() != n_count * k_count {
        return Err(NidsError::InvalidShape(format!(
            "appearance needs {q_count} proposal grids and {} template grids, got {} and {}",
            n_count * k_count,
            proposal_grids.len(),
            template_grids.len()
        )));
    }
    let rows = par::try_map_range(q_count, |q| {
        (0..n_count)
            .map(|n| {
                let best = scores.best_template(q, n);
                appearance_score(&proposal_grids[q], &template_grids[n * k_count + best]).map_err(|e| match e {
                    NidsError::EmptyForeground { .. } => NidsError::EmptyForeground { index: Some((q, n)) },
                    other => other,
                })
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    ScoreMatrix::from_rows(rows)
}

/// `instance_scores <- (instance_scores + s_appe) / 2`.
pub fn apply_bonus(mut scores: ScoreTensor, appearance: &ScoreMatrix) -> Result<ScoreTensor> {
    if appearance.rows() != scores.num_proposals || appearance.cols() != scores.num_instances {
        return Err(NidsError::InvalidShape("appearance matrix shape differs from instance scores".into()));
    }
    for q in 0..appearance.rows() {
        for n in 0..appearance.cols() {
            let s = scores.instance_scores.get(q, n);
            scores.instance_scores.set(q, n, (s + appearance.get(q, n)) / 2.0);
        }
    }
    Ok(scores)
}

/// Final output record: `{box, mask, instance id, score}` for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProposal {
    pub image_id: u32,
    pub bbox: BBox,
    pub mask: Option<Mask>,
    /// Instance label, `None` when the proposal was left unassigned.
    pub instance_id: Option<u32>,
    pub score: f64,
}

impl LabeledProposal {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if let Some(m) = &self.mask {
            if !m.within(&self.bbox) {
                return Err(NidsError::InvalidShape("mask extends outside its box".into()));
            }
        }
        Ok(())
    }
}

/// Keeps labeled proposals with `score >= delta`.
pub fn threshold_filter(proposals: Vec<LabeledProposal>, delta: f64) -> Vec<LabeledProposal> {
    proposals.into_iter().filter(|p| p.instance_id.is_some() && p.score >= delta).collect()
}

/// Query-side inputs of the matching stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_ids: Vec<u32>,
    pub boxes: Vec<BBox>,
    pub embeddings: Vec<Embedding>,
    /// Raw patch grids, needed for the appearance bonus.
    pub grids: Option<Vec<PatchGrid>>,
    pub masks: Option<Vec<Mask>>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.embeddings.len();
        let grids = self.grids.as_ref().map_or(q, Vec::len);
        let masks = self.masks.as_ref().map_or(q, Vec::len);
        if self.image_ids.len() != q || self.boxes.len() != q || grids != q || masks != q {
            return Err(NidsError::InvalidShape("proposal fields have different lengths".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub scores: ScoreTensor,
    /// Per proposal, before thresholding.
    pub assignments: Vec<Assignment>,
    /// Labeled proposals that survived the threshold.
    pub labeled: Vec<LabeledProposal>,
    /// Proposal index of each entry of `labeled`.
    pub kept: Vec<usize>,
}

/// Full matching stage: optional adapter refinement of both sides, template
/// scores, aggregation, optional appearance bonus (on raw patch grids), then
/// per-image assignment and thresholding.
pub fn run_matching(
    templates: &TemplateSet,
    template_grids: Option<&[PatchGrid]>,
    proposals: &ProposalSet,
    adapter: Option<&Adapter>,
    cfg: &MatcherConfig,
) -> Result<MatchOutput> {
    cfg.validate()?;
    proposals.validate()?;
    let (refined_templates, refined_props);
    let (tmpl, props) = match adapter {
        Some(a) => {
            refined_templates = templates.try_map(|e| a.refine(e))?;
            refined_props = par::try_map_range(proposals.len(), |q| a.refine(&proposals.embeddings[q]))?;
            (&refined_templates, refined_props.as_slice())
        }
        None => (templates, proposals.embeddings.as_slice()),
    };
    let mut scores = aggregate(score_templates(props, tmpl)?, cfg.aggregation);
    if cfg.use_appearance_bonus {
        let (Some(pg), Some(tg)) = (proposals.grids.as_deref(), template_grids) else {
            return Err(NidsError::MissingRecord("patch grids for the appearance bonus".into()));
        };
        let appe = appearance_matrix(&scores, pg, tg)?;
        scores = apply_bonus(scores, &appe)?;
    }

    let mut by_image: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (q, &img) in proposals.image_ids.iter().enumerate() {
        by_image.entry(img).or_default().push(q);
    }
    let mut assignments = vec![Assignment::NONE; proposals.len()];
    for rows in by_image.values() {
        let sub = scores.instance_scores.select_rows(rows);
        let local = match cfg.assignment {
            AssignmentMode::Stable => assign_stable(&sub),
            AssignmentMode::Argmax => assign_argmax(&sub),
        };
        for (&q, a) in rows.iter().zip(local) {
            assignments[q] = a;
        }
    }

    let ids = templates.instance_ids();
    let labeled: Vec<LabeledProposal> = (0..proposals.len())
        .map(|q| LabeledProposal {
            image_id: proposals.image_ids[q],
            bbox: proposals.boxes[q],
            mask: proposals.masks.as_ref().map(|m| m[q].clone()),
            instance_id: assignments[q].instance.map(|n| ids[n]),
            score: assignments[q].score,
        })
        .collect();
    let kept: Vec<usize> =
        (0..proposals.len()).filter(|&q| labeled[q].instance_id.is_some() && labeled[q].score >= cfg.delta).collect();
    Ok(MatchOutput { scores, assignments, labeled: threshold_filter(labeled, cfg.delta), kept })
}
