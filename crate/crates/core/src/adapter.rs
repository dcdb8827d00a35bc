//! Weight adapter and CLIP-style residual adapter over a `C -> C/4 -> C`
//! bottleneck MLP.
//!
//! Weight adapter: `w = sigmoid(relu(mlp(beta * f)))`, `f_w = w * beta * f`.
//! The relu in front of the sigmoid pins every gate to `[0.5, 1)`.
//!
//! CLIP adapter: `f_c = alpha * mlp(f) + (1 - alpha) * f`.
//!
//! In both cases the MLP is `w2 * relu(w1 * x + b1) + b2`.

use rand::Rng;

use crate::embedding::{Embedding, ZERO_NORM_TOL};
use crate::error::{NidsError, Result};

pub const DEFAULT_BETA: f64 = 10.0;
pub const DEFAULT_ALPHA: f64 = 0.6;

/// Largest double strictly below one. Gates are clamped here so the upper
/// bound stays open even where the sigmoid rounds to 1.0.
const GATE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Bottleneck MLP parameters. Matrices are row-major: `w1` is `hidden x dim`,
/// `w2` is `dim x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dim: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Names of the four parameter tensors, in [`MlpParams::tensors`] order.
pub const TENSOR_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

fn bottleneck(dim: usize) -> Result<usize> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(NidsError::InvalidConfig(format!("adapter dim {dim} must be a positive multiple of 4")));
    }
    Ok(dim / 4)
}

impl MlpParams {
    pub fn zeros(dim: usize) -> Result<Self> {
        let hidden = bottleneck(dim)?;
        Ok(Self {
            dim,
            hidden,
            w1: vec![0.0; hidden * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; dim * hidden],
            b2: vec![0.0; dim],
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init_uniform<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dim)?;
        let a1 = 1.0 / (dim as f64).sqrt();
        let a2 = 1.0 / (p.hidden as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..=a1));
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..=a2));
        Ok(p)
    }

    pub fn from_parts(dim: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        let hidden = bottleneck(dim)?;
        let expect = [hidden * dim, hidden, dim * hidden, dim];
        for ((name, v), want) in TENSOR_NAMES.iter().zip([&w1, &b1, &w2, &b2]).zip(expect) {
            if v.len() != want {
                return Err(NidsError::InvalidShape(format!("{name} has {} values, expected {want}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(NidsError::NonFinite("adapter parameters"));
            }
        }
        Ok(Self { dim, hidden, w1, b1, w2, b2 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    /// Shape of each tensor, in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 4] {
        [vec![self.hidden, self.dim], vec![self.hidden], vec![self.dim, self.hidden], vec![self.dim]]
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        2 * self.hidden * self.dim + self.hidden + self.dim
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim).expect("dim already validated")
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flat view over all parameters in tensor order.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }
}

/// Hidden activations and output of one MLP evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpOutput {
    /// `relu(w1 x + b1)`
    pub hidden: Vec<f64>,
    /// `w2 hidden + b2`
    pub out: Vec<f64>,
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(NidsError::DimMismatch { expected, got });
    }
    Ok(())
}

/// `out = mat * x + bias` with `mat` row-major `bias.len() x x.len()`.
pub(crate) fn affine(mat: &[f64], x: &[f64], bias: &[f64]) -> Vec<f64> {
    mat.chunks_exact(x.len()).zip(bias).map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).collect()
}

pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `sigmoid(relu(x))`, clamped into `[0.5, 1)`.
pub(crate) fn gate(x: f64) -> f64 {
    let r = relu(x);
    (1.0 / (1.0 + (-r).exp())).min(GATE_MAX)
}

pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<MlpOutput> {
    check_dim(params.dim, x.len())?;
    let mut hidden = affine(&params.w1, x, &params.b1);
    hidden.iter_mut().for_each(|h| *h = relu(*h));
    let out = affine(&params.w2, &hidden, &params.b2);
    Ok(MlpOutput { hidden, out })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightAdapterConfig {
    pub beta: f64,
    pub dim: usize,
}

impl WeightAdapterConfig {
    pub fn new(beta: f64, dim: usize) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(NidsError::InvalidConfig(format!("beta must be > 0, got {beta}")));
        }
        bottleneck(dim)?;
        Ok(Self { beta, dim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipAdapterConfig {
    pub alpha: f64,
    pub dim: usize,
}

impl ClipAdapterConfig {
    pub fn new(alpha: f64, dim: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(NidsError::InvalidConfig(format!("alpha must be in [0, 1], got {alpha}")));
        }
        bottleneck(dim)?;
        Ok(Self { alpha, dim })
    }
}

/// Gates `w` and the weighted embedding `f_w = w * beta * f`.
pub fn weight_adapter_forward(
    cfg: &WeightAdapterConfig,
    params: &MlpParams,
    f: &Embedding,
) -> Result<(Embedding, Embedding)> {
    check_dim(cfg.dim, f.dim())?;
    check_dim(cfg.dim, params.dim)?;
    let scaled: Vec<f64> = f.as_slice().iter().map(|v| cfg.beta * v).collect();
    let mlp = mlp_forward(params, &scaled)?;
    let w: Vec<f64> = mlp.out.iter().map(|&o| gate(o)).collect();
    let fw = w.iter().zip(&scaled).map(|(g, s)| g * s).collect();
    Ok((Embedding::new(w)?, Embedding::new(fw)?))
}

pub fn clip_adapter_forward(cfg: &ClipAdapterConfig, params: &MlpParams, f: &Embedding) -> Result<Embedding> {
    check_dim(cfg.dim, f.dim())?;
    check_dim(cfg.dim, params.dim)?;
    let mlp = mlp_forward(params, f.as_slice())?;
    let mixed = mlp.out.iter().zip(f.as_slice()).map(|(o, x)| cfg.alpha * o + (1.0 - cfg.alpha) * x).collect();
    Embedding::new(mixed)
}

/// Cosine between `w1 * beta * q` and `w2 * beta * k`. The scale cancels, so
/// `beta` only has to be positive.
pub fn weighted_cosine(q: &Embedding, k: &Embedding, w1: &Embedding, w2: &Embedding, beta: f64) -> Result<f64> {
    let dim = q.dim();
    for other in [k, w1, w2] {
        check_dim(dim, other.dim())?;
    }
    if !(beta > 0.0) {
        return Err(NidsError::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    let (q, k, w1, w2) = (q.as_slice(), k.as_slice(), w1.as_slice(), w2.as_slice());
    let (mut num, mut nq, mut nk) = (0.0, 0.0, 0.0);
    for i in 0..dim {
        let a = w1[i] * q[i];
        let b = w2[i] * k[i];
        num += a * b;
        nq += a * a;
        nk += b * b;
    }
    let (nq, nk) = (nq.sqrt(), nk.sqrt());
    if nq < ZERO_NORM_TOL || nk < ZERO_NORM_TOL {
        return Err(NidsError::ZeroVector { index: None });
    }
    Ok((num / (nq * nk)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Weight,
    Clip,
}

impl AdapterKind {
    pub fn code(self) -> u8 {
        match self {
            AdapterKind::Weight => 0,
            AdapterKind::Clip => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AdapterKind::Weight),
            1 => Some(AdapterKind::Clip),
            _ => None,
        }
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = NidsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" | "wa" => Ok(AdapterKind::Weight),
            "clip" | "ca" => Ok(AdapterKind::Clip),
            other => Err(NidsError::InvalidConfig(format!("unknown adapter kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Weight => "weight",
            AdapterKind::Clip => "clip",
        })
    }
}

/// A trained adapter ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Weight { cfg: WeightAdapterConfig, params: MlpParams },
    Clip { cfg: ClipAdapterConfig, params: MlpParams },
}

impl Adapter {
    /// `scale` is beta for the weight adapter and alpha for the CLIP adapter.
    pub fn new(kind: AdapterKind, scale: f64, params: MlpParams) -> Result<Self> {
        let dim = params.dim();
        Ok(match kind {
            AdapterKind::Weight => Adapter::Weight { cfg: WeightAdapterConfig::new(scale, dim)?, params },
            AdapterKind::Clip => Adapter::Clip { cfg: ClipAdapterConfig::new(scale, dim)?, params },
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Weight { .. } => AdapterKind::Weight,
            Adapter::Clip { .. } => AdapterKind::Clip,
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            Adapter::Weight { cfg, .. } => cfg.beta,
            Adapter::Clip { cfg, .. } => cfg.alpha,
        }
    }

    pub fn params(&self) -> &MlpParams {
        match self {
            Adapter::Weight { params, .. } | Adapter::Clip { params, .. } => params,
        }
    }

    pub fn dim(&self) -> usize {
        self.params().dim()
    }

    /// The refined embedding (`f_w` or `f_c`).
    pub fn refine(&self, f: &Embedding) -> Result<Embedding> {
        match self {
            Adapter::Weight { cfg, params } => weight_adapter_forward(cfg, params, f).map(|(_, fw)| fw),
            Adapter::Clip { cfg, params } => clip_adapter_forward(cfg, params, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn emb(v: Vec<f64>) -> Embedding {
        Embedding::new(v).unwrap()
    }

    /// Plain nested-loop matvec, written independently of `affine`.
    fn oracle_matvec(mat: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = b[r];
            for c in 0..cols {
                acc += mat[r * cols + c] * x[c];
            }
            out[r] = acc;
        }
        out
    }

    fn oracle_mlp(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> =
            oracle_matvec(p.w1(), p.hidden(), p.dim(), x, p.b1()).into_iter().map(|v| v.max(0.0)).collect();
        oracle_matvec(p.w2(), p.dim(), p.hidden(), &h, p.b2())
    }

    #[test]
    fn zero_params_give_zero() {
        let p = MlpParams::zeros(8).unwrap();
        let out = mlp_forward(&p, &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0, 1.0, 1.0]).unwrap();
        assert!(out.hidden.iter().all(|&h| h == 0.0));
        assert!(out.out.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn passthrough_params_copy_first_channel() {
        let mut w1 = vec![0.0; 4];
        w1[0] = 1.0;
        let mut w2 = vec![0.0; 4];
        w2[0] = 1.0;
        let p = MlpParams::from_parts(4, w1, vec![0.0], w2, vec![0.0; 4]).unwrap();
        let out = mlp_forward(&p, &[0.75, 3.0, -1.0, 2.0]).unwrap();
        assert_eq!(out.out[0], 0.75);
    }

    #[test]
    fn mlp_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = MlpParams::init_uniform(8, &mut rng).unwrap();
        let b1 = rand_vec(&mut rng, 2, 0.5);
        let b2 = rand_vec(&mut rng, 8, 0.5);
        p.tensors_mut()[1].copy_from_slice(&b1);
        p.tensors_mut()[3].copy_from_slice(&b2);
        let x = rand_vec(&mut rng, 8, 2.0);
        let got = mlp_forward(&p, &x).unwrap().out;
        for (a, b) in got.iter().zip(oracle_mlp(&p, &x)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mlp_dim_mismatch() {
        let p = MlpParams::zeros(8).unwrap();
        assert!(matches!(mlp_forward(&p, &[1.0; 4]), Err(NidsError::DimMismatch { .. })));
        assert!(MlpParams::zeros(6).is_err());
    }

    #[test]
    fn weight_adapter_zero_params() {
        let cfg = WeightAdapterConfig::new(10.0, 4).unwrap();
        let p = MlpParams::zeros(4).unwrap();
        let f = emb(vec![1.0, 0.0, 0.0, 0.0]);
        let (w, fw) = weight_adapter_forward(&cfg, &p, &f).unwrap();
        assert_eq!(w.as_slice(), &[0.5; 4]);
        assert_eq!(fw.as_slice(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weight_adapter_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpParams::init_uniform(8, &mut rng).unwrap();
        let cfg = WeightAdapterConfig::new(10.0, 8).unwrap();
        let f = emb(rand_vec(&mut rng, 8, 0.3));
        let (w, fw) = weight_adapter_forward(&cfg, &p, &f).unwrap();
        let scaled: Vec<f64> = f.as_slice().iter().map(|v| 10.0 * v).collect();
        let o = oracle_mlp(&p, &scaled);
        for i in 0..8 {
            let gate = 1.0 / (1.0 + (-o[i].max(0.0)).exp());
            assert!((w.as_slice()[i] - gate).abs() < 1e-12);
            assert!((fw.as_slice()[i] - gate * scaled[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn gate_range_holds_at_saturation() {
        assert_eq!(gate(-5.0), 0.5);
        assert_eq!(gate(0.0), 0.5);
        assert!(gate(1e6) < 1.0);
        assert!(gate(40.0) < 1.0);
    }

    #[test]
    fn weight_adapter_gate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = WeightAdapterConfig::new(10.0, 8).unwrap();
        for _ in 0..1000 {
            let p = MlpParams::init_uniform(8, &mut rng).unwrap();
            let f = emb(rand_vec(&mut rng, 8, 5.0));
            let (w, _) = weight_adapter_forward(&cfg, &p, &f).unwrap();
            assert!(w.as_slice().iter().all(|&g| (0.5..1.0).contains(&g)));
        }
    }

    #[test]
    fn clip_adapter_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::init_uniform(8, &mut rng).unwrap();
        let f = emb(rand_vec(&mut rng, 8, 1.0));
        let keep = clip_adapter_forward(&ClipAdapterConfig::new(0.0, 8).unwrap(), &p, &f).unwrap();
        assert_eq!(keep, f);
        let zero = MlpParams::zeros(8).unwrap();
        let gone = clip_adapter_forward(&ClipAdapterConfig::new(1.0, 8).unwrap(), &zero, &f).unwrap();
        assert!(gone.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_adapter_matches_linear_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MlpParams::init_uniform(8, &mut rng).unwrap();
        let f = emb(rand_vec(&mut rng, 8, 1.0));
        let got = clip_adapter_forward(&ClipAdapterConfig::new(0.6, 8).unwrap(), &p, &f).unwrap();
        let o = oracle_mlp(&p, f.as_slice());
        for i in 0..8 {
            assert!((got.as_slice()[i] - (0.6 * o[i] + 0.4 * f.as_slice()[i])).abs() < 1e-10);
        }
        // linear in alpha
        let at = |a: f64| clip_adapter_forward(&ClipAdapterConfig::new(a, 8).unwrap(), &p, &f).unwrap();
        let (a0, a1, ah) = (at(0.0), at(1.0), at(0.25));
        for i in 0..8 {
            let lerp = 0.75 * a0.as_slice()[i] + 0.25 * a1.as_slice()[i];
            assert!((ah.as_slice()[i] - lerp).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(WeightAdapterConfig::new(0.0, 8).is_err());
        assert!(WeightAdapterConfig::new(-1.0, 8).is_err());
        assert!(ClipAdapterConfig::new(1.5, 8).is_err());
        assert!(ClipAdapterConfig::new(0.6, 7).is_err());
    }

    #[test]
    fn weighted_cosine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = emb(rand_vec(&mut rng, 16, 1.0));
        let k = emb(rand_vec(&mut rng, 16, 1.0));
        let half = emb(vec![0.5; 16]);
        let wc = weighted_cosine(&q, &k, &half, &half, 10.0).unwrap();
        assert!((wc - cosine(q.as_slice(), k.as_slice()).unwrap()).abs() < 1e-9);

        let w = emb((0..16).map(|_| rng.random_range(0.5..1.0)).collect());
        assert!((weighted_cosine(&q, &q, &w, &w, 10.0).unwrap() - 1.0).abs() < 1e-12);

        let w2 = emb((0..16).map(|_| rng.random_range(0.5..1.0)).collect());
        let qp: Vec<f64> = (0..16).map(|i| w.as_slice()[i] * 10.0 * q.as_slice()[i]).collect();
        let kp: Vec<f64> = (0..16).map(|i| w2.as_slice()[i] * 10.0 * k.as_slice()[i]).collect();
        let direct = cosine(&qp, &kp).unwrap();
        assert!((weighted_cosine(&q, &k, &w, &w2, 10.0).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn weighted_cosine_zero() {
        let z = emb(vec![0.0; 4]);
        let one = emb(vec![1.0; 4]);
        assert!(matches!(weighted_cosine(&z, &one, &one, &one, 1.0), Err(NidsError::ZeroVector { .. })));
    }

    #[test]
    fn flat_indexing_covers_all_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = MlpParams::init_uniform(8, &mut rng).unwrap();
        assert_eq!(p.num_params(), 2 * 2 * 8 + 2 + 8);
        let last = p.num_params() - 1;
        p.set_flat(last, 3.5);
        assert_eq!(p.b2()[7], 3.5);
        assert_eq!(p.get_flat(0), p.w1()[0]);
        assert_eq!(p.get_flat(16), p.b1()[0]);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("weight".parse::<AdapterKind>().unwrap(), AdapterKind::Weight);
        assert_eq!("clip".parse::<AdapterKind>().unwrap(), AdapterKind::Clip);
        assert!("bogus".parse::<AdapterKind>().is_err());
        for k in [AdapterKind::Weight, AdapterKind::Clip] {
            assert_eq!(AdapterKind::from_code(k.code()), Some(k));
        }
    }
}
