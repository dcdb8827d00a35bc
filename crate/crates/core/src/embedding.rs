//! Embedding types, foreground feature averaging and cosine similarity.

use crate::error::{NidsError, Result};
use crate::par;

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM_TOL: f64 = 1e-12;

/// A single feature vector (template, proposal or adapted embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(NidsError::InvalidShape("embedding must have dim >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NidsError::NonFinite("embedding"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// A `height x width` grid of patch embeddings with a foreground mask, stored
/// row-major with the channel axis innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
    foreground: Vec<bool>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>, foreground: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(NidsError::InvalidShape(format!("patch grid {height}x{width}x{dim} has an empty axis")));
        }
        let cells = height * width;
        if data.len() != cells * dim {
            return Err(NidsError::InvalidShape(format!(
                "patch data has {} values, expected {}",
                data.len(),
                cells * dim
            )));
        }
        if foreground.len() != cells {
            return Err(NidsError::InvalidShape(format!(
                "foreground mask has {} cells, expected {cells}",
                foreground.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NidsError::NonFinite("patch grid"));
        }
        Ok(Self { height, width, dim, data, foreground })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn foreground(&self) -> &[bool] {
        &self.foreground
    }

    /// Patch at flat cell index `row * width + col`.
    pub fn patch(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn foreground_patches(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim).zip(&self.foreground).filter_map(|(p, &fg)| fg.then_some(p))
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&fg| fg).count()
    }
}

/// `N` instances with `K` template embeddings each.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    num_instances: usize,
    templates_per_instance: usize,
    dim: usize,
    embeddings: Vec<Embedding>,
    instance_ids: Vec<u32>,
}

impl TemplateSet {
    /// `embeddings` is instance-major: entry `n * k_per + k` is view `k` of instance `n`.
    pub fn new(templates_per_instance: usize, embeddings: Vec<Embedding>, instance_ids: Vec<u32>) -> Result<Self> {
        let num_instances = instance_ids.len();
        if num_instances == 0 || templates_per_instance == 0 {
            return Err(NidsError::InvalidShape("template set needs N >= 1 and K >= 1".into()));
        }
        if embeddings.len() != num_instances * templates_per_instance {
            return Err(NidsError::InvalidShape(format!(
                "{} embeddings for {num_instances} instances x {templates_per_instance} views",
                embeddings.len()
            )));
        }
        let dim = embeddings[0].dim();
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(NidsError::DimMismatch { expected: dim, got: bad.dim() });
        }
        let mut sorted = instance_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(NidsError::InvalidShape("instance ids must be unique".into()));
        }
        Ok(Self { num_instances, templates_per_instance, dim, embeddings, instance_ids })
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn templates_per_instance(&self) -> usize {
        self.templates_per_instance
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, instance: usize, view: usize) -> &Embedding {
        &self.embeddings[instance * self.templates_per_instance + view]
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn instance_ids(&self) -> &[u32] {
        &self.instance_ids
    }

    /// Label of each embedding in instance-major order.
    pub fn labels(&self) -> Vec<u32> {
        self.instance_ids.iter().flat_map(|&id| std::iter::repeat_n(id, self.templates_per_instance)).collect()
    }

    /// Same layout and ids with every embedding replaced by `f(embedding)`.
    pub fn try_map<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&Embedding) -> Result<Embedding> + Sync + Send,
    {
        let embeddings = par::try_map_range(self.embeddings.len(), |i| f(&self.embeddings[i]))?;
        Self::new(self.templates_per_instance, embeddings, self.instance_ids.clone())
    }
}

/// Foreground feature averaging: the mean of the foreground patch embeddings.
pub fn ffa_pool(grid: &PatchGrid) -> Result<Embedding> {
    let mut sum = vec![0.0; grid.dim()];
    let mut count = 0usize;
    for patch in grid.foreground_patches() {
        for (s, &v) in sum.iter_mut().zip(patch) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(NidsError::EmptyForeground { index: None });
    }
    let inv = count as f64;
    sum.iter_mut().for_each(|s| *s /= inv);
    Embedding::new(sum)
}

/// Pools every grid of an `N x K` nested array into a [`TemplateSet`].
pub fn build_template_set(grids: &[Vec<PatchGrid>], instance_ids: Vec<u32>) -> Result<TemplateSet> {
    let n = grids.len();
    if n == 0 {
        return Err(NidsError::InvalidShape("no template grids".into()));
    }
    if instance_ids.len() != n {
        return Err(NidsError::InvalidShape(format!("{} instance ids for {n} instances", instance_ids.len())));
    }
    let k = grids[0].len();
    if let Some(row) = grids.iter().find(|row| row.len() != k) {
        return Err(NidsError::InvalidShape(format!("ragged template grids: {} views vs {k}", row.len())));
    }
    let embeddings = par::try_map_range(n * k, |i| {
        let (inst, view) = (i / k.max(1), i % k.max(1));
        ffa_pool(&grids[inst][view]).map_err(|e| match e {
            NidsError::EmptyForeground { .. } => NidsError::EmptyForeground { index: Some((inst, view)) },
            other => other,
        })
    })?;
    TemplateSet::new(k, embeddings, instance_ids)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two raw vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NidsError::DimMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na < ZERO_NORM_TOL || nb < ZERO_NORM_TOL {
        return Err(NidsError::ZeroVector { index: None });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(q: &Embedding, k: &Embedding) -> Result<f64> {
    cosine(q.as_slice(), k.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, patches: &[&[f64]], fg: &[bool]) -> PatchGrid {
        let dim = patches[0].len();
        let data = patches.iter().flat_map(|p| p.iter().copied()).collect();
        PatchGrid::new(h, w, dim, data, fg.to_vec()).unwrap()
    }

    #[test]
    fn ffa_symmetric_set() {
        let g = grid(2, 2, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]], &[true; 4]);
        assert_eq!(ffa_pool(&g).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn ffa_singleton() {
        let g = grid(2, 2, &[&[9.0, 9.0], &[0.3, -1.7], &[9.0, 9.0], &[9.0, 9.0]], &[false, true, false, false]);
        assert_eq!(ffa_pool(&g).unwrap().as_slice(), &[0.3, -1.7]);
    }

    #[test]
    fn ffa_random_mask_matches_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 5;
        let data: Vec<f64> = (0..9 * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut fg = vec![false; 9];
        for &i in &[0, 2, 4, 7, 8] {
            fg[i] = true;
        }
        let g = PatchGrid::new(3, 3, dim, data.clone(), fg.clone()).unwrap();
        // element-wise oracle
        let mut expected = vec![0.0; dim];
        for c in 0..dim {
            let mut acc = 0.0;
            for cell in 0..9 {
                if fg[cell] {
                    acc += data[cell * dim + c];
                }
            }
            expected[c] = acc / 5.0;
        }
        let got = ffa_pool(&g).unwrap();
        for (a, b) in got.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ffa_empty_mask() {
        let g = grid(1, 2, &[&[1.0], &[2.0]], &[false, false]);
        assert!(matches!(ffa_pool(&g), Err(NidsError::EmptyForeground { index: None })));
    }

    #[test]
    fn cosine_examples() {
        let v = Embedding::new(vec![0.3, -2.0, 5.0]).unwrap();
        let neg = Embedding::new(vec![-0.3, 2.0, -5.0]).unwrap();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        let got = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_zero_vector() {
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(NidsError::ZeroVector { .. })));
        assert!(matches!(cosine(&[1.0, 0.0], &[1e-13, 0.0]), Err(NidsError::ZeroVector { .. })));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(NidsError::DimMismatch { .. })));
    }

    #[test]
    fn embedding_rejects_bad_values() {
        assert!(Embedding::new(vec![]).is_err());
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn template_set_single_patch() {
        let g = grid(1, 1, &[&[0.25, 4.0]], &[true]);
        let set = build_template_set(&[vec![g]], vec![7]).unwrap();
        assert_eq!(set.get(0, 0).as_slice(), &[0.25, 4.0]);
        assert_eq!(set.instance_ids(), &[7]);
    }

    #[test]
    fn template_set_matches_per_grid_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grids: Vec<Vec<PatchGrid>> = (0..2)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        let data = (0..4 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let mut fg: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
                        fg[0] = true;
                        PatchGrid::new(2, 2, 6, data, fg).unwrap()
                    })
                    .collect()
            })
            .collect();
        let set = build_template_set(&grids, vec![0, 1]).unwrap();
        for n in 0..2 {
            for k in 0..3 {
                assert_eq!(set.get(n, k), &ffa_pool(&grids[n][k]).unwrap());
            }
        }
    }

    #[test]
    fn template_set_reports_empty_index() {
        let ok = grid(1, 1, &[&[1.0]], &[true]);
        let empty = grid(1, 1, &[&[1.0]], &[false]);
        let grids = vec![vec![ok.clone(), ok.clone()], vec![ok, empty]];
        match build_template_set(&grids, vec![0, 1]) {
            Err(NidsError::EmptyForeground { index }) => assert_eq!(index, Some((1, 1))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn template_set_rejects_duplicate_ids() {
        let e = Embedding::new(vec![1.0]).unwrap();
        assert!(TemplateSet::new(1, vec![e.clone(), e], vec![3, 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs(dim: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-10.0f64..10.0, dim)
        }

        proptest! {
            #[test]
            fn cosine_symmetric_and_scale_invariant(a in vecs(6), b in vecs(6)) {
                prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
                let ab = cosine(&a, &b).unwrap();
                prop_assert!((ab - cosine(&b, &a).unwrap()).abs() <= 1e-15);
                for lambda in [0.1, 10.0, 1e4] {
                    let scaled: Vec<f64> = a.iter().map(|x| x * lambda).collect();
                    prop_assert!((cosine(&scaled, &b).unwrap() - ab).abs() <= 1e-9);
                    prop_assert!((cosine(&a, &scaled).unwrap() - cosine(&a, &a).unwrap()).abs() <= 1e-9);
                }
            }

            #[test]
            fn ffa_permutation_invariant_and_in_hull(
                patches in proptest::collection::vec(vecs(3), 2..9),
                seed in any::<u64>(),
            ) {
                let n = patches.len();
                let data: Vec<f64> = patches.iter().flatten().copied().collect();
                let g = PatchGrid::new(1, n, 3, data, vec![true; n]).unwrap();
                let pooled = ffa_pool(&g).unwrap();

                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                let shuffled: Vec<f64> = order.iter().flat_map(|&i| patches[i].clone()).collect();
                let g2 = PatchGrid::new(1, n, 3, shuffled, vec![true; n]).unwrap();
                let pooled2 = ffa_pool(&g2).unwrap();
                for c in 0..3 {
                    prop_assert!((pooled.as_slice()[c] - pooled2.as_slice()[c]).abs() < 1e-12);
                    let lo = patches.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
                    let hi = patches.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(pooled.as_slice()[c] >= lo - 1e-12 && pooled.as_slice()[c] <= hi + 1e-12);
                }
            }
        }
    }
}
