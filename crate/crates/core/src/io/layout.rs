//! Record layouts for template sets, proposal sets and adapter parameters.
//!
//! Templates: `instance_ids` f64 `[N]`, `embeddings` f32 `[N, K, C]`, and
//! optionally `patches` f32 `[N, K, H, W, C]` with `foreground` u8 `[N, K, H, W]`.
//!
//! Queries: `image_ids` f64 `[Q]`, `boxes` f32 `[Q, 4]`, `embeddings` f32
//! `[Q, C]`, optional `patches` f32 `[Q, H, W, C]` / `foreground` u8 `[Q, H, W]`,
//! optional masks `mask_{q}` u8 `[height, width]`.
//!
//! Either layout may omit `embeddings` when patches are present; they are
//! then pooled from the foreground patches.
//!
//! Adapter parameters: `kind` u8 `[1]`, `scale` f64 `[1]`, `w1` f64
//! `[C/4, C]`, `b1` f64 `[C/4]`, `w2` f64 `[C, C/4]`, `b2` f64 `[C]`.

use super::container::{Tensor, TensorContainer};
use crate::adapter::{Adapter, AdapterKind, MlpParams};
use crate::embedding::{ffa_pool, Embedding, PatchGrid, TemplateSet};
use crate::error::{NidsError, Result};
use crate::eval::iou::BBox;
use crate::matcher::ProposalSet;

use super::records::mask_from_container;

pub fn mask_record_name(q: usize) -> String {
    format!("mask_{q}")
}

fn shape_err(name: &str, want: &str, got: &[usize]) -> NidsError {
    NidsError::InvalidShape(format!("record {name:?} must be {want}, got {got:?}"))
}

fn ids_from(t: &Tensor, name: &str) -> Result<Vec<u32>> {
    if t.dims().len() != 1 {
        return Err(shape_err(name, "rank 1", t.dims()));
    }
    t.to_f64()
        .into_iter()
        .map(|v| {
            if v.fract() == 0.0 && (0.0..=f64::from(u32::MAX)).contains(&v) {
                Ok(v as u32)
            } else {
                Err(NidsError::InvalidShape(format!("record {name:?} holds non-id value {v}")))
            }
        })
        .collect()
}

fn grids_to_records(c: &mut TensorContainer, lead: &[usize], grids: &[PatchGrid]) -> Result<()> {
    let Some(first) = grids.first() else { return Ok(()) };
    let (h, w, d) = (first.height(), first.width(), first.dim());
    if grids.iter().any(|g| (g.height(), g.width(), g.dim()) != (h, w, d)) {
        return Err(NidsError::InvalidShape("patch grids differ in shape".into()));
    }
    let mut data = Vec::with_capacity(grids.len() * h * w * d);
    let mut fg = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        data.extend_from_slice(g.data());
        fg.extend(g.foreground().iter().map(|&b| u8::from(b)));
    }
    let mut pdims = lead.to_vec();
    pdims.extend([h, w, d]);
    let mut fdims = lead.to_vec();
    fdims.extend([h, w]);
    c.push("patches", Tensor::f32_from(pdims, &data)?)?;
    c.push("foreground", Tensor::u8(fdims, fg)?)
}

/// Grids from `patches` / `foreground` with `lead` leading dims, or `None`.
fn grids_from_records(c: &TensorContainer, lead: usize) -> Result<Option<Vec<PatchGrid>>> {
    let Some(p) = c.get("patches") else { return Ok(None) };
    let f = c.require("foreground")?;
    let pd = p.dims();
    if pd.len() != lead + 3 {
        return Err(shape_err("patches", &format!("rank {}", lead + 3), pd));
    }
    let (h, w, d) = (pd[lead], pd[lead + 1], pd[lead + 2]);
    if f.dims()[..] != pd[..lead + 2] {
        return Err(shape_err("foreground", "patches dims without channels", f.dims()));
    }
    let Some(fg) = f.as_u8() else {
        return Err(NidsError::InvalidShape("foreground must be u8".into()));
    };
    let count: usize = pd[..lead].iter().product();
    let values = p.to_f64();
    (0..count)
        .map(|i| {
            let cells = h * w;
            PatchGrid::new(
                h,
                w,
                d,
                values[i * cells * d..(i + 1) * cells * d].to_vec(),
                fg[i * cells..(i + 1) * cells].iter().map(|&b| b != 0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Embedding rows from `embeddings` (last dim is C), else pooled from grids.
fn embeddings_from(c: &TensorContainer, grids: Option<&[PatchGrid]>, rows: usize) -> Result<Vec<Embedding>> {
    match (c.get("embeddings"), grids) {
        (Some(t), _) => {
            let dim = *t.dims().last().ok_or_else(|| shape_err("embeddings", "rank >= 1", t.dims()))?;
            if dim == 0 || t.len() != rows * dim {
                return Err(shape_err("embeddings", &format!("{rows} rows"), t.dims()));
            }
            t.to_f64().chunks(dim).map(|r| Embedding::new(r.to_vec())).collect()
        }
        (None, Some(g)) => g.iter().map(ffa_pool).collect(),
        (None, None) => Err(NidsError::MissingRecord("embeddings".into())),
    }
}

#[derive(Debug, Clone)]
pub struct TemplateData {
    pub set: TemplateSet,
    /// Instance-major `N * K` grids, when stored.
    pub grids: Option<Vec<PatchGrid>>,
}

pub fn templates_to_container(set: &TemplateSet, grids: Option<&[PatchGrid]>) -> Result<TensorContainer> {
    let (n, k, dim) = (set.num_instances(), set.templates_per_instance(), set.dim());
    let mut c = TensorContainer::new();
    c.push("instance_ids", Tensor::f64(vec![n], set.instance_ids().iter().map(|&i| f64::from(i)).collect())?)?;
    let flat: Vec<f64> = set.embeddings().iter().flat_map(|e| e.as_slice().iter().copied()).collect();
    c.push("embeddings", Tensor::f32_from(vec![n, k, dim], &flat)?)?;
    if let Some(g) = grids {
        if g.len() != n * k {
            return Err(NidsError::InvalidShape(format!("expected {} template grids, got {}", n * k, g.len())));
        }
        grids_to_records(&mut c, &[n, k], g)?;
    }
    Ok(c)
}

pub fn templates_from_container(c: &TensorContainer) -> Result<TemplateData> {
    let ids = ids_from(c.require("instance_ids")?, "instance_ids")?;
    let n = ids.len();
    let k = match (c.get("embeddings"), c.get("patches")) {
        (Some(t), _) if t.dims().len() == 3 && t.dims()[0] == n => t.dims()[1],
        (Some(t), _) => return Err(shape_err("embeddings", "[N, K, C]", t.dims())),
        (None, Some(p)) if p.dims().len() == 5 && p.dims()[0] == n => p.dims()[1],
        (None, Some(p)) => return Err(shape_err("patches", "[N, K, H, W, C]", p.dims())),
        (None, None) => return Err(NidsError::MissingRecord("embeddings".into())),
    };
    let grids = grids_from_records(c, 2)?;
    if grids.as_ref().is_some_and(|g| g.len() != n * k) {
        return Err(NidsError::InvalidShape("patches and embeddings disagree on N x K".into()));
    }
    let embeddings = embeddings_from(c, grids.as_deref(), n * k)?;
    Ok(TemplateData { set: TemplateSet::new(k, embeddings, ids)?, grids })
}

pub fn queries_to_container(p: &ProposalSet) -> Result<TensorContainer> {
    p.validate()?;
    let q = p.len();
    let dim = p.embeddings.first().map_or(0, Embedding::dim);
    let mut c = TensorContainer::new();
    c.push("image_ids", Tensor::f64(vec![q], p.image_ids.iter().map(|&i| f64::from(i)).collect())?)?;
    let boxes: Vec<f64> = p.boxes.iter().flat_map(|b| b.to_array()).collect();
    c.push("boxes", Tensor::f32_from(vec![q, 4], &boxes)?)?;
    let flat: Vec<f64> = p.embeddings.iter().flat_map(|e| e.as_slice().iter().copied()).collect();
    c.push("embeddings", Tensor::f32_from(vec![q, dim], &flat)?)?;
    if let Some(g) = &p.grids {
        grids_to_records(&mut c, &[q], g)?;
    }
    if let Some(masks) = &p.masks {
        for (i, m) in masks.iter().enumerate() {
            c.push(mask_record_name(i), Tensor::u8(vec![m.height(), m.width()], m.to_bytes())?)?;
        }
    }
    Ok(c)
}

pub fn queries_from_container(c: &TensorContainer) -> Result<ProposalSet> {
    let image_ids = ids_from(c.require("image_ids")?, "image_ids")?;
    let q = image_ids.len();
    let bt = c.require("boxes")?;
    if bt.dims() != [q, 4] {
        return Err(shape_err("boxes", "[Q, 4]", bt.dims()));
    }
    let boxes = bt.to_f64().chunks(4).map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect::<Result<Vec<_>>>()?;
    let grids = grids_from_records(c, 1)?;
    if grids.as_ref().is_some_and(|g| g.len() != q) {
        return Err(NidsError::InvalidShape("patches and image_ids disagree on Q".into()));
    }
    let embeddings = embeddings_from(c, grids.as_deref(), q)?;
    let masks = if q > 0 && c.get(&mask_record_name(0)).is_some() {
        Some((0..q).map(|i| mask_from_container(c, &mask_record_name(i))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let p = ProposalSet { image_ids, boxes, embeddings, grids, masks };
    p.validate()?;
    Ok(p)
}

pub fn params_to_container(a: &Adapter) -> Result<TensorContainer> {
    let p = a.params();
    let (dim, hidden) = (p.dim(), p.hidden());
    let mut c = TensorContainer::new();
    c.push("kind", Tensor::u8(vec![1], vec![a.kind().code()])?)?;
    c.push("scale", Tensor::f64(vec![1], vec![a.scale()])?)?;
    c.push("w1", Tensor::f64(vec![hidden, dim], p.w1().to_vec())?)?;
    c.push("b1", Tensor::f64(vec![hidden], p.b1().to_vec())?)?;
    c.push("w2", Tensor::f64(vec![dim, hidden], p.w2().to_vec())?)?;
    c.push("b2", Tensor::f64(vec![dim], p.b2().to_vec())?)?;
    Ok(c)
}

pub fn params_from_container(c: &TensorContainer) -> Result<Adapter> {
    let kind_t = c.require("kind")?;
    let kind = match kind_t.as_u8() {
        Some(&[code]) => AdapterKind::from_code(code)
            .ok_or_else(|| NidsError::InvalidConfig(format!("unknown adapter kind code {code}")))?,
        _ => return Err(shape_err("kind", "u8 [1]", kind_t.dims())),
    };
    let scale = match c.require("scale")?.to_f64()[..] {
        [s] => s,
        _ => return Err(shape_err("scale", "[1]", c.require("scale")?.dims())),
    };
    let b2 = c.require("b2")?.to_f64();
    let params = MlpParams::from_parts(
        b2.len(),
        c.require("w1")?.to_f64(),
        c.require("b1")?.to_f64(),
        c.require("w2")?.to_f64(),
        b2,
    )?;
    Adapter::new(kind, scale, params)
}

/// Replaces the `embeddings` record (any leading dims, channels last) by its
/// adapter-refined rows. Other records are kept as they are.
pub fn refine_container(c: &TensorContainer, adapter: &Adapter) -> Result<TensorContainer> {
    let t = c.require("embeddings")?;
    let dim = adapter.dim();
    if t.dims().last() != Some(&dim) {
        return Err(NidsError::DimMismatch { expected: dim, got: t.dims().last().copied().unwrap_or(0) });
    }
    let rows: Vec<Vec<f64>> = t.to_f64().chunks(dim).map(<[f64]>::to_vec).collect();
    let refined = crate::par::try_map_range(rows.len(), |i| {
        adapter.refine(&Embedding::new(rows[i].clone())?).map(Embedding::into_vec)
    })?;
    let flat: Vec<f64> = refined.into_iter().flatten().collect();
    let mut out = c.clone();
    out.set("embeddings", Tensor::f32_from(t.dims().to_vec(), &flat)?);
    Ok(out)
}
