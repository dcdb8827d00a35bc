//! Seeded synthetic scenes: prototype embeddings on the unit sphere, noisy
//! template and query views rendered into patch grids, rectangular boxes and
//! masks, and the matching ground truth.
//!
//! View noise only touches a fixed subset of "nuisance" channels (standing in
//! for pose and lighting dependent features); the remaining channels carry
//! instance identity alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::iou::{BBox, Mask};
use super::{GroundTruthObject, GroundTruthSet};
use crate::embedding::{build_template_set, dot, ffa_pool, l2_norm, Embedding, PatchGrid, TemplateSet};
use crate::error::{NidsError, Result};
use crate::matcher::ProposalSet;

/// Cosine range of confusable prototype pairs.
const CONFUSABLE_COS: (f64, f64) = (0.95, 0.97);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub num_instances: usize,
    pub templates_per_instance: usize,
    pub dim: usize,
    /// Per-coordinate std of view noise on nuisance channels.
    pub sigma: f64,
    /// Distractor proposals per scene.
    pub distractors: usize,
    /// Fraction of instances generated as near-duplicate pairs.
    pub confusable_fraction: f64,
    /// Fraction of channels that carry view noise.
    pub nuisance_fraction: f64,
    pub scenes: usize,
    pub instances_per_scene: usize,
    /// Patch grids are `grid_size x grid_size`.
    pub grid_size: usize,
    /// Scene rasters are `image_size x image_size` pixels.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_instances: 10,
            templates_per_instance: 4,
            dim: 32,
            sigma: 0.2,
            distractors: 2,
            confusable_fraction: 0.0,
            nuisance_fraction: 0.25,
            scenes: 10,
            instances_per_scene: 4,
            grid_size: 4,
            image_size: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NidsError::InvalidConfig(m));
        if self.num_instances < 2 {
            return bad(format!("num_instances must be >= 2, got {}", self.num_instances));
        }
        if self.templates_per_instance == 0 || self.dim == 0 || self.scenes == 0 {
            return bad("templates_per_instance, dim and scenes must be >= 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return bad("confusable_fraction must be in [0, 1]".into());
        }
        if !(self.nuisance_fraction > 0.0 && self.nuisance_fraction <= 1.0) {
            return bad("nuisance_fraction must be in (0, 1]".into());
        }
        if self.grid_size < 3 {
            return bad("grid_size must be >= 3".into());
        }
        if self.image_size < 16 {
            return bad("image_size must be >= 16".into());
        }
        if self.instances_per_scene + self.distractors == 0 {
            return bad("scenes need at least one proposal".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub templates: TemplateSet,
    /// Instance-major `N * K` template grids.
    pub template_grids: Vec<PatchGrid>,
    pub proposals: ProposalSet,
    /// True instance index of each proposal; `None` for distractors.
    pub truth: Vec<Option<usize>>,
    pub ground_truth: GroundTruthSet,
    pub prototypes: Vec<Vec<f64>>,
    pub confusable_pairs: Vec<(usize, usize)>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Removes the components along each (orthonormal) basis vector.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    nuisance: Vec<bool>,
}

impl Generator<'_> {
    fn noise(&mut self) -> Vec<f64> {
        let sigma = self.cfg.sigma;
        let mut v = vec![0.0; self.cfg.dim];
        for (x, &on) in v.iter_mut().zip(&self.nuisance) {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if on {
                *x = sigma * z;
            }
        }
        v
    }

    fn view(&mut self, prototype: &[f64]) -> Vec<f64> {
        let n = self.noise();
        prototype.iter().zip(n).map(|(p, e)| p + e).collect()
    }

    /// Border cells are background; interior cells hold the view plus
    /// zero-mean patch jitter.
    fn grid(&mut self, view: &[f64]) -> Result<PatchGrid> {
        let (g, dim) = (self.cfg.grid_size, self.cfg.dim);
        let fg: Vec<bool> =
            (0..g * g).map(|i| (1..g - 1).contains(&(i / g)) && (1..g - 1).contains(&(i % g))).collect();
        let fg_count = fg.iter().filter(|&&b| b).count();
        let mut jitter: Vec<Vec<f64>> = (0..fg_count).map(|_| self.noise()).collect();
        for c in 0..dim {
            let mean = jitter.iter().map(|j| j[c]).sum::<f64>() / fg_count as f64;
            jitter.iter_mut().for_each(|j| j[c] -= mean);
        }
        let mut jitter = jitter.into_iter();
        let scale = 1.0 / (dim as f64).sqrt();
        let mut data = Vec::with_capacity(g * g * dim);
        for &is_fg in &fg {
            if is_fg {
                let j = jitter.next().expect("one jitter per foreground cell");
                data.extend(view.iter().zip(j).map(|(v, e)| v + e));
            } else {
                data.extend(gaussian(&mut self.rng, dim).into_iter().map(|x| x * scale));
            }
        }
        PatchGrid::new(g, g, dim, data, fg)
    }

    fn random_box(&mut self) -> BBox {
        let s = self.cfg.image_size;
        let w = self.rng.random_range(8..=s / 3);
        let h = self.rng.random_range(8..=s / 3);
        let x = self.rng.random_range(0..=s - w);
        let y = self.rng.random_range(0..=s - h);
        BBox { x_min: x as f64, y_min: y as f64, x_max: (x + w) as f64, y_max: (y + h) as f64 }
    }
}

/// Builds a deterministic synthetic dataset from `cfg`.
pub fn gen_synth(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (n, k, dim) = (cfg.num_instances, cfg.templates_per_instance, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let nuisance_count = ((cfg.nuisance_fraction * dim as f64).round() as usize).clamp(1, dim);
    let mut channels: Vec<usize> = (0..dim).collect();
    channels.shuffle(&mut rng);
    let mut nuisance = vec![false; dim];
    channels[..nuisance_count].iter().for_each(|&c| nuisance[c] = true);

    let num_pairs = ((cfg.confusable_fraction * n as f64) / 2.0).floor() as usize;
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut confusable_pairs = Vec::with_capacity(num_pairs);
    for p in 0..num_pairs {
        let mut a = gaussian(&mut rng, dim);
        normalize(&mut a);
        let mut u = gaussian(&mut rng, dim);
        project_out(&mut u, std::slice::from_ref(&a));
        normalize(&mut u);
        let cos = rng.random_range(CONFUSABLE_COS.0..=CONFUSABLE_COS.1);
        let sin = (1.0 - cos * cos).sqrt();
        let b: Vec<f64> = a.iter().zip(&u).map(|(x, y)| cos * x + sin * y).collect();
        prototypes.push(a);
        prototypes.push(b);
        confusable_pairs.push((2 * p, 2 * p + 1));
    }
    while prototypes.len() < n {
        let mut v = gaussian(&mut rng, dim);
        normalize(&mut v);
        prototypes.push(v);
    }

    // orthonormal basis of the prototype span, for distractors
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if n < dim {
        for p in &prototypes {
            let mut v = p.clone();
            project_out(&mut v, &basis);
            if l2_norm(&v) > 1e-9 {
                normalize(&mut v);
                basis.push(v);
            }
        }
    }

    let mut gen = Generator { cfg, rng, nuisance };

    let mut template_grids = Vec::with_capacity(n * k);
    let mut nested = Vec::with_capacity(n);
    for proto in &prototypes {
        let mut row = Vec::with_capacity(k);
        for _ in 0..k {
            let view = gen.view(proto);
            row.push(gen.grid(&view)?);
        }
        template_grids.extend(row.iter().cloned());
        nested.push(row);
    }
    let instance_ids: Vec<u32> = (0..n as u32).collect();
    let templates = build_template_set(&nested, instance_ids)?;

    let per_scene = cfg.instances_per_scene.min(n);
    let s = cfg.image_size;
    let mut proposals = ProposalSet {
        image_ids: Vec::new(),
        boxes: Vec::new(),
        embeddings: Vec::new(),
        grids: Some(Vec::new()),
        masks: Some(Vec::new()),
    };
    let mut truth = Vec::new();
    let mut gt = GroundTruthSet::default();
    for scene in 0..cfg.scenes {
        let image_id = scene as u32;
        let mut members: Vec<Option<usize>> =
            rand::seq::index::sample(&mut gen.rng, n, per_scene).into_iter().map(Some).collect();
        members.extend(std::iter::repeat_n(None, cfg.distractors));
        members.shuffle(&mut gen.rng);
        for member in members {
            let view = match member {
                Some(i) => gen.view(&prototypes[i]),
                None => {
                    let mut d = gaussian(&mut gen.rng, dim);
                    project_out(&mut d, &basis);
                    normalize(&mut d);
                    gen.view(&d)
                }
            };
            let grid = gen.grid(&view)?;
            let bbox = gen.random_box();
            let mask = Mask::from_box(s, s, &bbox);
            if let Some(i) = member {
                gt.objects.push(GroundTruthObject { image_id, instance_id: i as u32, bbox, mask: Some(mask.clone()) });
            }
            proposals.image_ids.push(image_id);
            proposals.boxes.push(bbox);
            proposals.embeddings.push(ffa_pool(&grid)?);
            proposals.grids.as_mut().expect("grids allocated").push(grid);
            proposals.masks.as_mut().expect("masks allocated").push(mask);
            truth.push(member);
        }
    }

    Ok(SynthDataset { templates, template_grids, proposals, truth, ground_truth: gt, prototypes, confusable_pairs })
}

/// Raw (un-pooled) embedding set helper for callers that only need vectors.
pub fn embeddings_of(grids: &[PatchGrid]) -> Result<Vec<Embedding>> {
    grids.iter().map(ffa_pool).collect()
}
