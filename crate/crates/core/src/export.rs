//! Attention maps of a trained model on one input image, as PCT1 tensors and
//! 8-bit PGM pictures.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::ct::{key_marginal_heatmap, stack_heads};
use crate::error::{PctError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Attention of one CT site for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StageAttention {
    pub stage: usize,
    pub h: usize,
    pub w: usize,
    /// `[heads, n, n]`: identity queries over race keys.
    pub id_to_ra: Tensor,
    /// `[heads, n, n]`: race queries over identity keys.
    pub ra_to_id: Tensor,
}

impl StageAttention {
    /// `[heads, h, w]` key-marginal heat maps of one direction.
    pub fn heatmaps(&self, attn: &Tensor) -> Tensor {
        let n = self.h * self.w;
        let heads = attn.shape()[0];
        let mut data = Vec::with_capacity(heads * n);
        for head in attn.data().chunks_exact(n * n) {
            data.extend_from_slice(key_marginal_heatmap(head, self.h, self.w).data());
        }
        Tensor::from_parts(vec![heads, self.h, self.w], data)
    }
}

/// Attention maps at every stage that has a CT, for a `[C, H, W]` image.
pub fn attention_maps(model: &Model, image: &Tensor) -> Result<Vec<StageAttention>> {
    let mut shape = image.shape().to_vec();
    shape.insert(0, 1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_parts(shape, image.data().to_vec()));
    let out = model.backbone.forward(&mut g, &model.store, x)?;
    Ok(out
        .stages
        .iter()
        .enumerate()
        .filter_map(|(stage, rec)| {
            rec.ct.as_ref().map(|ct| StageAttention {
                stage,
                h: ct.x_id_out.h,
                w: ct.x_id_out.w,
                id_to_ra: stack_heads(&g, &ct.attn_id_to_ra, 0),
                ra_to_id: stack_heads(&g, &ct.attn_ra_to_id, 0),
            })
        })
        .collect())
}

/// Binary 8-bit greyscale picture of a `[h, w]` map, min-max scaled so the
/// largest value is white. A constant map is mid grey.
pub fn pgm_bytes(map: &[f64], h: usize, w: usize) -> Vec<u8> {
    assert_eq!(map.len(), h * w, "map size");
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    out
}

fn write_file(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| PctError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes, per stage and direction, the attention tensor, its heat maps and
/// one PGM per head into `dir`. Returns the written paths.
pub fn write_attention(dir: &Path, maps: &[StageAttention]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for m in maps {
        for (tag, attn) in [("id_to_ra", &m.id_to_ra), ("ra_to_id", &m.ra_to_id)] {
            let stem = format!("stage{}_{tag}", m.stage);
            let heat = m.heatmaps(attn);
            write_file(dir.join(format!("{stem}.pct")), &attn.to_pct1_bytes(), &mut written)?;
            write_file(dir.join(format!("{stem}_heat.pct")), &heat.to_pct1_bytes(), &mut written)?;
            let plane = m.h * m.w;
            for (head, map) in heat.data().chunks_exact(plane).enumerate() {
                write_file(
                    dir.join(format!("{stem}_head{head}.pgm")),
                    &pgm_bytes(map, m.h, m.w),
                    &mut written,
                )?;
            }
        }
    }
    Ok(written)
}
