//! Few-shot contrastive training of the adapters on template embeddings.

mod adam;
mod backprop;
mod gradcheck;
mod infonce;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use backprop::{backprop_adapter, batch_loss, AdapterSpec, BatchPlan, LabeledBatch};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GRAD_CHECK_TOL};
pub use infonce::{infonce_loss, ContrastiveTerm, InfoNceOutput};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{Adapter, AdapterKind, MlpParams};
use crate::embedding::TemplateSet;
use crate::error::{NidsError, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    /// Hidden-layer dropout; only the CLIP adapter uses it.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for each adapter: lr 1e-3 / batch 1024 for the weight adapter,
    /// lr 1e-4 / batch 512 for the CLIP adapter, 40 epochs, tau 0.07, dropout 0.5.
    pub fn for_kind(kind: AdapterKind) -> Self {
        let (learning_rate, batch_size) = match kind {
            AdapterKind::Weight => (1e-3, 1024),
            AdapterKind::Clip => (1e-4, 512),
        };
        Self { learning_rate, batch_size, epochs: 40, temperature: DEFAULT_TEMPERATURE, dropout_rate: 0.5, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(NidsError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.temperature > 0.0) {
            return Err(NidsError::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NidsError::InvalidConfig(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.batch_size < 2 {
            return Err(NidsError::InvalidConfig("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_kind(AdapterKind::Weight)
    }
}

/// Trained adapter plus the mean batch loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: Adapter,
    pub loss_history: Vec<f64>,
}

/// Trains an adapter on the template set alone. Each epoch shuffles the
/// templates (when they do not fit in one batch), draws one positive view per
/// anchor and takes one Adam step per batch. Embeddings are re-adapted from
/// the raw inputs at every step; `templates` itself is never modified.
pub fn train_adapter(templates: &TemplateSet, spec: AdapterSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if templates.num_instances() < 2 || templates.templates_per_instance() < 2 {
        return Err(NidsError::DegenerateBatch(format!(
            "training needs N >= 2 and K >= 2, got N={} K={}",
            templates.num_instances(),
            templates.templates_per_instance()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MlpParams::init_uniform(templates.dim(), &mut rng)?;
    // validates the scale up front
    Adapter::new(spec.kind, spec.scale, params.clone())?;
    let mut adam = AdamState::new(&params);
    let inputs: Vec<&[f64]> = templates.embeddings().iter().map(|e| e.as_slice()).collect();
    let labels = templates.labels();
    let dropout = (spec.kind == AdapterKind::Clip).then_some(cfg.dropout_rate);

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if inputs.len() > cfg.batch_size {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_inputs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i]).collect();
            let batch_labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let plan = match BatchPlan::sample(&batch_labels, dropout, params.hidden(), &mut rng) {
                Ok(plan) => plan,
                // a trailing shuffled batch may hold a single instance
                Err(NidsError::DegenerateBatch(_)) => continue,
                Err(e) => return Err(e),
            };
            let batch = LabeledBatch { inputs: &batch_inputs, labels: &batch_labels };
            let (loss, grads) = backprop_adapter(&spec, &params, &batch, &plan, cfg.temperature)?;
            adam_step(&mut adam, &mut params, &grads, cfg.learning_rate);
            loss_sum += loss * chunk.len() as f64;
            weight += chunk.len();
        }
        if weight == 0 {
            return Err(NidsError::DegenerateBatch(format!("epoch {epoch} had no usable batch")));
        }
        history.push(loss_sum / weight as f64);
    }
    Ok(TrainOutcome { adapter: Adapter::new(spec.kind, spec.scale, params)?, loss_history: history })
}
