//! Angular-margin face losses, race cross-entropy and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{PctError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginVariant {
    /// `cos(θ + m)` on the target class.
    Arc,
    /// `cos θ − m` on the target class.
    Cos,
}

impl MarginVariant {
    /// Target-class value for an (already clamped) cosine.
    pub fn apply(self, c: f64, m: f64) -> f64 {
        match self {
            MarginVariant::Arc => (c.acos() + m).cos(),
            MarginVariant::Cos => c - m,
        }
    }

    /// d/dc of [`MarginVariant::apply`].
    pub fn derivative(self, c: f64, m: f64) -> f64 {
        match self {
            MarginVariant::Arc => {
                let theta = c.acos();
                (theta + m).sin() / theta.sin()
            }
            MarginVariant::Cos => 1.0,
        }
    }
}

impl std::str::FromStr for MarginVariant {
    type Err = PctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arc" | "arcface" => Ok(MarginVariant::Arc),
            "cos" | "cosface" => Ok(MarginVariant::Cos),
            other => Err(PctError::Config(format!("unknown margin variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for MarginVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MarginVariant::Arc => "arc",
            MarginVariant::Cos => "cos",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub variant: MarginVariant,
    pub s: f64,
    pub m: f64,
    pub num_classes: usize,
}

impl MarginConfig {
    pub fn new(variant: MarginVariant, num_classes: usize) -> Self {
        Self {
            variant,
            s: 64.0,
            m: 0.35,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(PctError::Config("margin scale s must be positive".into()));
        }
        if !(self.m >= 0.0) {
            return Err(PctError::Config("margin m must be nonnegative".into()));
        }
        if self.variant == MarginVariant::Arc && self.m >= std::f64::consts::FRAC_PI_2 {
            return Err(PctError::Config("arc margin must be below pi/2".into()));
        }
        if self.num_classes == 0 {
            return Err(PctError::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

/// Margin logits `[B, K]` for embeddings `[B, E]` against a bias-free
/// classifier `[K, E]`. Both embeddings and class rows are unit-normalized
/// before the cosines are taken.
pub fn margin_logits(
    g: &mut Graph,
    embed: Var,
    head: Var,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<Var> {
    if g.shape(head)[0] != cfg.num_classes {
        return Err(PctError::shape("margin_logits", g.shape(head), &[cfg.num_classes]));
    }
    let x = g.l2_normalize_rows(embed)?;
    let w = g.l2_normalize_rows(head)?;
    let wt = g.transpose_last2(w)?;
    let cos = g.matmul(x, wt)?;
    g.margin_logits(cos, labels, cfg.variant, cfg.s, cfg.m)
}

/// Mean cross-entropy over margin logits.
pub fn face_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(PctError::Contract("empty batch".into()));
    }
    g.cross_entropy(logits, labels)
}

/// Mean softmax cross-entropy of a linear race head (`weight [E, R]`,
/// `bias [R]`) applied to race embeddings `[B, E]`.
pub fn race_loss(g: &mut Graph, ra_embed: Var, labels: &[usize], weight: Var, bias: Var) -> Result<Var> {
    if labels.is_empty() {
        return Err(PctError::Contract("empty batch".into()));
    }
    let z = g.matmul(ra_embed, weight)?;
    let z = g.add_broadcast(z, bias)?;
    g.cross_entropy(z, labels)
}

/// `face + alpha · race`. With `alpha = 0` the race term is left out of the
/// graph entirely, so nothing reachable only through it receives a gradient.
pub fn total_loss(g: &mut Graph, face: Var, race: Var, w: &LossWeights) -> Result<Var> {
    if !w.alpha.is_finite() || w.alpha < 0.0 {
        return Err(PctError::Config("alpha must be finite and nonnegative".into()));
    }
    if w.alpha == 0.0 {
        return Ok(face);
    }
    let r = g.scale(race, w.alpha);
    g.add(face, r)
}
