//! Cross transformer (CT) module.
//!
//! Each CT holds two mirrored blocks. The identity block attends from
//! identity queries to race keys and aggregates identity values; the result
//! `ε_ra` is the group-induced component estimated inside the identity
//! features and is subtracted from them. The race block does the same with
//! the roles swapped. Every head has its own six projections; the heads'
//! outputs are concatenated along the feature axis with no output
//! projection, feed-forward sublayer or normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{PctError, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtConfig {
    pub d: usize,
    pub heads: usize,
    pub max_rel_offset: usize,
}

impl CtConfig {
    pub fn new(d: usize, heads: usize) -> Self {
        Self {
            d,
            heads,
            max_rel_offset: 3,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(PctError::Config(format!(
                "feature dim {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.max_rel_offset == 0 {
            return Err(PctError::Config("max_rel_offset must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial feature map: `values` is `[n, d]` or batched `[B, n, d]` with
/// `n = h·w` positions in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub values: Var,
}

impl FeatureMap {
    pub fn new(g: &Graph, h: usize, w: usize, values: Var) -> Result<Self> {
        let s = g.shape(values);
        if s.len() < 2 || s[s.len() - 2] != h * w {
            return Err(PctError::Config(format!(
                "feature map {s:?} does not hold {h}x{w} positions"
            )));
        }
        Ok(Self { h, w, values })
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn d(&self, g: &Graph) -> usize {
        *g.shape(self.values).last().unwrap()
    }
}

/// `x·W + b` with `W: [d, d_head]`, `b: [d_head]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    fn init(store: &mut ParamStore, name: &str, d: usize, d_head: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (d + d_head) as f64).sqrt();
        let w = (0..d * d_head).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weight: store.insert(
                format!("{name}.w"),
                Tensor::from_parts(vec![d, d_head], w),
            ),
            bias: store.insert(format!("{name}.b"), Tensor::zeros(&[d_head])),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadWeights {
    pub id_qry: Projection,
    pub id_key: Projection,
    pub id_val: Projection,
    pub ra_qry: Projection,
    pub ra_key: Projection,
    pub ra_val: Projection,
    pub rel_rows: ParamId,
    pub rel_cols: ParamId,
}

impl HeadWeights {
    pub fn projections(&self) -> [Projection; 6] {
        [
            self.id_qry,
            self.id_key,
            self.id_val,
            self.ra_qry,
            self.ra_key,
            self.ra_val,
        ]
    }

    /// The same head with every identity projection exchanged for its race
    /// counterpart.
    pub fn swapped(&self) -> Self {
        Self {
            id_qry: self.ra_qry,
            id_key: self.ra_key,
            id_val: self.ra_val,
            ra_qry: self.id_qry,
            ra_key: self.id_key,
            ra_val: self.id_val,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtWeights {
    pub heads: Vec<HeadWeights>,
}

impl CtWeights {
    /// Registers one CT's parameters under `prefix`. Query and key
    /// projections get Glorot-uniform weights. Value projections, biases and
    /// relative-position tables start at 0, so a fresh CT is the identity map.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &CtConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, dh) = (cfg.d, cfg.d_head());
        let table = 2 * cfg.max_rel_offset + 1;
        let heads = (0..cfg.heads)
            .map(|h| {
                let p = format!("{prefix}.head{h}");
                HeadWeights {
                    id_qry: Projection::init(store, &format!("{p}.id_qry"), d, dh, rng),
                    id_key: Projection::init(store, &format!("{p}.id_key"), d, dh, rng),
                    id_val: Projection::init(store, &format!("{p}.id_val"), d, dh, rng),
                    ra_qry: Projection::init(store, &format!("{p}.ra_qry"), d, dh, rng),
                    ra_key: Projection::init(store, &format!("{p}.ra_key"), d, dh, rng),
                    ra_val: Projection::init(store, &format!("{p}.ra_val"), d, dh, rng),
                    rel_rows: store.insert(format!("{p}.rel_rows"), Tensor::zeros(&[table])),
                    rel_cols: store.insert(format!("{p}.rel_cols"), Tensor::zeros(&[table])),
                }
            })
            .collect();
        let weights = Self { heads };
        weights.zero_values(store);
        Ok(weights)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads
            .iter()
            .flat_map(|h| {
                h.projections()
                    .into_iter()
                    .flat_map(|p| p.ids())
                    .chain([h.rel_rows, h.rel_cols])
            })
            .collect()
    }

    pub fn swapped(&self) -> Self {
        Self {
            heads: self.heads.iter().map(HeadWeights::swapped).collect(),
        }
    }

    /// Sets both value projections (weights and biases) of every head to 0.
    pub fn zero_values(&self, store: &mut ParamStore) {
        for h in &self.heads {
            for p in [h.id_val, h.ra_val] {
                for id in p.ids() {
                    store.get_mut(id).value.data_mut().fill(0.0);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtOutput {
    pub x_id_out: FeatureMap,
    pub x_ra_out: FeatureMap,
    /// Per head, `[B, n, n]` (or `[n, n]`): identity queries over race keys.
    pub attn_id_to_ra: Vec<Var>,
    /// Per head: race queries over identity keys.
    pub attn_ra_to_id: Vec<Var>,
    pub eps_ra: Var,
    pub eps_id: Var,
}

/// `G = x·W + b`, bias broadcast over positions.
pub fn project(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let d = *g.shape(x).last().unwrap();
    if g.shape(weight).first() != Some(&d) || g.shape(bias) != [g.shape(weight)[1]] {
        return Err(PctError::Config(format!(
            "projection {:?}/{:?} does not fit features {:?}",
            g.shape(weight),
            g.shape(bias),
            g.shape(x)
        )));
    }
    let y = g.matmul(x, weight)?;
    g.add_broadcast(y, bias)
}

/// Row-stochastic attention of queries `q` over keys `k` (both `[.., n, d_head]`):
/// `softmax_j(q_i·k_j / √d_head + rows[Δr] + cols[Δc])`.
pub fn cross_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    h: usize,
    w: usize,
    rel_rows: Var,
    rel_cols: Var,
    max_rel_offset: usize,
) -> Result<Var> {
    if g.shape(q) != g.shape(k) {
        return Err(PctError::shape("cross_attention", g.shape(q), g.shape(k)));
    }
    let s = g.shape(q);
    let n = s[s.len() - 2];
    if n != h * w {
        return Err(PctError::Config(format!(
            "{n} positions do not match a {h}x{w} grid"
        )));
    }
    let d_head = s[s.len() - 1];
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d_head as f64).sqrt());
    let bias = g.rel_pos_bias(rel_rows, rel_cols, h, w, max_rel_offset)?;
    let logits = g.add_broadcast(scores, bias)?;
    g.softmax_rows(logits)
}

/// Per head `attn_h × (x_src·W_h + b_h)`, concatenated along features.
pub fn estimate_bias(
    g: &mut Graph,
    attn: &[Var],
    x_src: Var,
    values: &[(Var, Var)],
) -> Result<Var> {
    if attn.len() != values.len() || attn.is_empty() {
        return Err(PctError::Config(format!(
            "{} attention maps for {} value projections",
            attn.len(),
            values.len()
        )));
    }
    let mut parts = Vec::with_capacity(attn.len());
    for (&a, &(w, b)) in attn.iter().zip(values) {
        let v = project(g, x_src, w, b)?;
        parts.push(g.matmul(a, v)?);
    }
    g.concat_last(&parts)
}

/// Runs both CT blocks and subtracts each estimated component from its branch.
pub fn ct_forward(
    g: &mut Graph,
    store: &ParamStore,
    weights: &CtWeights,
    cfg: &CtConfig,
    x_id: &FeatureMap,
    x_ra: &FeatureMap,
) -> Result<CtOutput> {
    ct_forward_with(g, weights, cfg, x_id, x_ra, |g, id| g.param(store, id))
}

/// [`ct_forward`] with a caller-supplied mapping from parameter ids to graph
/// nodes.
pub fn ct_forward_with(
    g: &mut Graph,
    weights: &CtWeights,
    cfg: &CtConfig,
    x_id: &FeatureMap,
    x_ra: &FeatureMap,
    mut bind: impl FnMut(&mut Graph, ParamId) -> Var,
) -> Result<CtOutput> {
    cfg.validate()?;
    if (x_id.h, x_id.w) != (x_ra.h, x_ra.w) || g.shape(x_id.values) != g.shape(x_ra.values) {
        return Err(PctError::Config(format!(
            "branch shapes differ: {:?} vs {:?}",
            g.shape(x_id.values),
            g.shape(x_ra.values)
        )));
    }
    if x_id.d(g) != cfg.d || weights.heads.len() != cfg.heads {
        return Err(PctError::Config(format!(
            "CT built for d={} heads={} got d={} with {} head weights",
            cfg.d,
            cfg.heads,
            x_id.d(g),
            weights.heads.len()
        )));
    }
    let (h, w) = (x_id.h, x_id.w);
    let mut attn_id_to_ra = Vec::with_capacity(cfg.heads);
    let mut attn_ra_to_id = Vec::with_capacity(cfg.heads);
    let mut id_vals = Vec::with_capacity(cfg.heads);
    let mut ra_vals = Vec::with_capacity(cfg.heads);
    for hw in &weights.heads {
        let mut pv = |g: &mut Graph, p: Projection| (bind(g, p.weight), bind(g, p.bias));
        let (wq, bq) = pv(g, hw.id_qry);
        let (wk, bk) = pv(g, hw.ra_key);
        let (wq2, bq2) = pv(g, hw.ra_qry);
        let (wk2, bk2) = pv(g, hw.id_key);
        id_vals.push(pv(g, hw.id_val));
        ra_vals.push(pv(g, hw.ra_val));
        let rows = bind(g, hw.rel_rows);
        let cols = bind(g, hw.rel_cols);

        let q_id = project(g, x_id.values, wq, bq)?;
        let k_ra = project(g, x_ra.values, wk, bk)?;
        attn_id_to_ra.push(cross_attention(g, q_id, k_ra, h, w, rows, cols, cfg.max_rel_offset)?);

        let q_ra = project(g, x_ra.values, wq2, bq2)?;
        let k_id = project(g, x_id.values, wk2, bk2)?;
        attn_ra_to_id.push(cross_attention(g, q_ra, k_id, h, w, rows, cols, cfg.max_rel_offset)?);
    }
    let eps_ra = estimate_bias(g, &attn_id_to_ra, x_id.values, &id_vals)?;
    let eps_id = estimate_bias(g, &attn_ra_to_id, x_ra.values, &ra_vals)?;
    let id_out = g.sub(x_id.values, eps_ra)?;
    let ra_out = g.sub(x_ra.values, eps_id)?;
    Ok(CtOutput {
        x_id_out: FeatureMap { h, w, values: id_out },
        x_ra_out: FeatureMap { h, w, values: ra_out },
        attn_id_to_ra,
        attn_ra_to_id,
        eps_ra,
        eps_id,
    })
}

/// Stacks one sample's per-head maps into a `[heads, n, n]` tensor.
pub fn stack_heads(g: &Graph, per_head: &[Var], sample: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for &v in per_head {
        let t = g.value(v);
        let s = t.shape();
        n = s[s.len() - 1];
        let plane = n * n;
        let offset = if s.len() == 3 { sample * plane } else { 0 };
        data.extend_from_slice(&t.data()[offset..offset + plane]);
    }
    Tensor::from_parts(vec![per_head.len(), n, n], data)
}

/// Column sums of one `[n, n]` attention map reshaped to `h×w`: how much
/// attention each key position receives over all queries.
pub fn key_marginal_heatmap(attn: &[f64], h: usize, w: usize) -> Tensor {
    let n = h * w;
    assert_eq!(attn.len(), n * n, "attention map size");
    let mut heat = vec![0.0; n];
    for row in attn.chunks_exact(n) {
        for (acc, v) in heat.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor::from_parts(vec![h, w], heat)
}
