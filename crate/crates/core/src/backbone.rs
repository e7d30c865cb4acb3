//! Progressive dual-branch network.
//!
//! An identity branch and a race branch share the same topology: a conv+ReLU
//! stem, `T` conv+ReLU stages, global average pooling and a linear readout.
//! Before a stage's convolution, an enabled CT module exchanges information
//! between the two branches and removes each branch's estimated
//! cross-branch component.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::ct::{ct_forward, CtConfig, CtOutput, CtWeights, FeatureMap};
use crate::error::{PctError, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub width: usize,
    pub stride: usize,
    pub ct_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub embed_dim: usize,
    pub heads: usize,
    pub max_rel_offset: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |width, stride| StageConfig {
            width,
            stride,
            ct_enabled: true,
        };
        Self {
            in_channels: 1,
            height: 16,
            width: 16,
            stem_width: 8,
            stem_stride: 2,
            stages: vec![stage(8, 1), stage(16, 2), stage(16, 1), stage(32, 2)],
            embed_dim: 32,
            heads: 2,
            max_rel_offset: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(PctError::Config("at least one stage is required".into()));
        }
        if [self.in_channels, self.height, self.width, self.stem_width, self.embed_dim]
            .contains(&0)
        {
            return Err(PctError::Config("dimensions must be positive".into()));
        }
        let check_stride = |s: usize| {
            if s == 1 || s == 2 {
                Ok(())
            } else {
                Err(PctError::Config(format!("stride must be 1 or 2, got {s}")))
            }
        };
        check_stride(self.stem_stride)?;
        for (t, (st, d)) in self.stages.iter().zip(self.stage_input_widths()).enumerate() {
            check_stride(st.stride)?;
            if st.width == 0 {
                return Err(PctError::Config(format!("stage {t} has zero width")));
            }
            if st.ct_enabled {
                CtConfig {
                    d,
                    heads: self.heads,
                    max_rel_offset: self.max_rel_offset,
                }
                .validate()
                .map_err(|e| PctError::Config(format!("CT before stage {t}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Channel width entering each stage.
    pub fn stage_input_widths(&self) -> Vec<usize> {
        std::iter::once(self.stem_width)
            .chain(self.stages.iter().map(|s| s.width))
            .take(self.stages.len())
            .collect()
    }

    /// Spatial size `(h, w)` entering each stage, followed by the final size.
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let down = |(h, w): (usize, usize), s: usize| (h.div_ceil(s), w.div_ceil(s));
        let mut cur = down((self.height, self.width), self.stem_stride);
        let mut out = vec![cur];
        for st in &self.stages {
            cur = down(cur, st.stride);
            out.push(cur);
        }
        out
    }

    pub fn ct_config(&self, stage: usize) -> Option<CtConfig> {
        self.stages[stage].ct_enabled.then(|| CtConfig {
            d: self.stage_input_widths()[stage],
            heads: self.heads,
            max_rel_offset: self.max_rel_offset,
        })
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }

    pub fn with_ct(mut self, enabled: impl Fn(usize) -> bool) -> Self {
        for (t, st) in self.stages.iter_mut().enumerate() {
            st.ct_enabled = enabled(t);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    fn init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * KERNEL * KERNEL;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..cout * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            kernel: store.insert(
                format!("{name}.kernel"),
                Tensor::from_parts(vec![cout, cin, KERNEL, KERNEL], data),
            ),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    /// `relu(conv(x) + b)` with same-style padding.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, k, self.stride, KERNEL / 2)?;
        let y = g.add_channel_bias(y, b)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchWeights {
    pub stem: Conv,
    pub stages: Vec<Conv>,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
}

impl BranchWeights {
    fn init(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let stem = Conv::init(store, &format!("{name}.stem"), cfg.in_channels, cfg.stem_width, cfg.stem_stride, rng);
        let stages = cfg
            .stages
            .iter()
            .zip(cfg.stage_input_widths())
            .enumerate()
            .map(|(t, (st, cin))| Conv::init(store, &format!("{name}.stage{t}"), cin, st.width, st.stride, rng))
            .collect();
        let (fin, e) = (cfg.final_width(), cfg.embed_dim);
        let limit = (6.0 / (fin + e) as f64).sqrt();
        let w = (0..fin * e).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            stem,
            stages,
            embed_w: store.insert(format!("{name}.embed.w"), Tensor::from_parts(vec![fin, e], w)),
            embed_b: store.insert(format!("{name}.embed.b"), Tensor::zeros(&[e])),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(&self.stem)
            .chain(&self.stages)
            .flat_map(|c| [c.kernel, c.bias])
            .chain([self.embed_w, self.embed_b])
            .collect()
    }
}

/// Parameter handles of the whole two-branch network.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub id: BranchWeights,
    pub ra: BranchWeights,
    /// One entry per stage; `Some` where a CT precedes the stage.
    pub cts: Vec<Option<CtWeights>>,
}

/// Features of both branches in NCHW layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePair {
    pub x_id: Var,
    pub x_ra: Var,
    pub stage_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingPair {
    pub id_embed: Var,
    pub ra_embed: Var,
}

/// What one stage retained: the CT outputs if a CT ran, and the stage's
/// output features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRecord {
    pub ct: Option<CtOutput>,
    pub output: StagePair,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardOutput {
    pub embeddings: EmbeddingPair,
    pub stages: Vec<StageRecord>,
}

impl Backbone {
    pub fn init(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let id = BranchWeights::init(store, "id", cfg, rng);
        let ra = BranchWeights::init(store, "ra", cfg, rng);
        let cts = (0..cfg.num_stages())
            .map(|t| {
                cfg.ct_config(t)
                    .map(|c| CtWeights::init(store, &format!("ct{t}"), &c, rng))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            id,
            ra,
            cts,
        })
    }

    /// Identity branch plus every CT module.
    pub fn identity_params(&self) -> Vec<ParamId> {
        let mut ids = self.id.param_ids();
        for ct in self.cts.iter().flatten() {
            ids.extend(ct.param_ids());
        }
        ids
    }

    pub fn race_params(&self) -> Vec<ParamId> {
        self.ra.param_ids()
    }

    /// Independent conv+ReLU stems; `images` is `[B, C, H, W]`.
    pub fn stem(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<StagePair> {
        let s = g.shape(images);
        let c = &self.cfg;
        if s.len() != 4 || s[1..] != [c.in_channels, c.height, c.width] {
            return Err(PctError::Config(format!(
                "images {:?} do not match configured {}x{}x{}",
                s, c.in_channels, c.height, c.width
            )));
        }
        Ok(StagePair {
            x_id: self.id.stem.apply(g, store, images)?,
            x_ra: self.ra.stem.apply(g, store, images)?,
            stage_index: 0,
        })
    }

    /// One stage: optional CT on the incoming pair, then conv+ReLU per branch.
    pub fn stage_step(&self, g: &mut Graph, store: &ParamStore, pair: StagePair) -> Result<StageRecord> {
        let t = pair.stage_index;
        if t >= self.cfg.num_stages() {
            return Err(PctError::Contract(format!(
                "stage {t} of a {}-stage network",
                self.cfg.num_stages()
            )));
        }
        let (mut x_id, mut x_ra) = (pair.x_id, pair.x_ra);
        let mut ct_out = None;
        if let (Some(weights), Some(cfg)) = (&self.cts[t], self.cfg.ct_config(t)) {
            let (fid, h, w) = to_tokens(g, x_id)?;
            let (fra, _, _) = to_tokens(g, x_ra)?;
            let a = FeatureMap::new(g, h, w, fid)?;
            let b = FeatureMap::new(g, h, w, fra)?;
            let out = ct_forward(g, store, weights, &cfg, &a, &b)?;
            x_id = from_tokens(g, out.x_id_out.values, h, w)?;
            x_ra = from_tokens(g, out.x_ra_out.values, h, w)?;
            ct_out = Some(out);
        }
        Ok(StageRecord {
            ct: ct_out,
            output: StagePair {
                x_id: self.id.stages[t].apply(g, store, x_id)?,
                x_ra: self.ra.stages[t].apply(g, store, x_ra)?,
                stage_index: t + 1,
            },
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<ForwardOutput> {
        let mut pair = self.stem(g, store, images)?;
        let mut stages = Vec::with_capacity(self.cfg.num_stages());
        for _ in 0..self.cfg.num_stages() {
            let rec = self.stage_step(g, store, pair)?;
            pair = rec.output;
            stages.push(rec);
        }
        Ok(ForwardOutput {
            embeddings: EmbeddingPair {
                id_embed: readout(g, store, &self.id, pair.x_id)?,
                ra_embed: readout(g, store, &self.ra, pair.x_ra)?,
            },
            stages,
        })
    }
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<(Var, usize, usize)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(PctError::shape("to_tokens", &s, &[]));
    }
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok((g.transpose_last2(flat)?, s[2], s[3]))
}

/// `[B, H·W, C]` → `[B, C, H, W]`.
pub fn from_tokens(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose_last2(x)?;
    let s = g.shape(t).to_vec();
    g.reshape(t, &[s[0], s[1], h, w])
}

/// Global average pool over space: `[B, C, H, W]` → `[B, C]`.
pub fn global_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.mean_last(flat)
}

fn readout(g: &mut Graph, store: &ParamStore, br: &BranchWeights, x: Var) -> Result<Var> {
    let pooled = global_pool(g, x)?;
    let w = g.param(store, br.embed_w);
    let b = g.param(store, br.embed_b);
    let y = g.matmul(pooled, w)?;
    g.add_broadcast(y, b)
}
