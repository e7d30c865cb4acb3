//! The trainable model (backbone plus classification heads) and its
//! checkpoint file.
//!
//! A checkpoint is every parameter tensor in PCT1 format back to back,
//! followed by a JSON manifest that maps names to byte offsets and shapes
//! and echoes the run configuration, and finally the manifest length as a
//! little-endian `u64`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::error::{PctError, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Identity classes seen in training.
    pub num_classes: usize,
    pub num_groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: RunConfig,
    pub shape: ModelShape,
    pub store: ParamStore,
    pub backbone: Backbone,
    /// `[num_classes, embed_dim]`, rows normalized inside the margin loss.
    pub face_head: ParamId,
    /// `[embed_dim, num_groups]`.
    pub race_w: ParamId,
    pub race_b: ParamId,
}

impl Model {
    /// Builds freshly initialized parameters from `cfg.seed`.
    pub fn init(cfg: &RunConfig, shape: ModelShape) -> Result<Self> {
        if shape.num_classes == 0 || shape.num_groups < 2 {
            return Err(PctError::Config(format!(
                "need classes and at least 2 groups, got {} and {}",
                shape.num_classes, shape.num_groups
            )));
        }
        let bcfg = cfg.backbone(shape.in_channels, shape.height, shape.width);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, &bcfg, &mut rng)?;
        let e = cfg.embed_dim;
        let head: Vec<f64> = (0..shape.num_classes * e)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let face_head = store.insert("face_head", Tensor::new(&[shape.num_classes, e], head)?);
        let limit = (6.0 / (e + shape.num_groups) as f64).sqrt();
        let rw: Vec<f64> = (0..e * shape.num_groups)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let race_w = store.insert("race_head.w", Tensor::new(&[e, shape.num_groups], rw)?);
        let race_b = store.insert("race_head.b", Tensor::zeros(&[shape.num_groups]));
        Ok(Self {
            cfg: cfg.clone(),
            shape,
            store,
            backbone,
            face_head,
            race_w,
            race_b,
        })
    }

    /// Identity branch, CT modules and face head.
    pub fn face_group(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.identity_params();
        ids.push(self.face_head);
        ids
    }

    /// Race branch and race head.
    pub fn race_group(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.race_params();
        ids.extend([self.race_w, self.race_b]);
        ids
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        let mut tensors = Vec::with_capacity(self.store.len());
        for (_, name, p) in self.store.iter() {
            let offset = bytes.len() as u64;
            p.value.write_pct1(&mut bytes).expect("writing to a Vec");
            tensors.push(TensorEntry {
                name: name.to_string(),
                offset,
                shape: p.value.shape().to_vec(),
            });
        }
        let manifest = CheckpointManifest {
            config: self.cfg.clone(),
            shape: self.shape,
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        Ok(bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| PctError::Format(format!("checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let json_len = u64::from_le_bytes(tail.try_into().expect("8 bytes")) as usize;
        if json_len > body.len() {
            return Err(bad("manifest length exceeds file"));
        }
        let (data, json) = body.split_at(body.len() - json_len);
        let manifest: CheckpointManifest = serde_json::from_slice(json)?;
        let mut model = Model::init(&manifest.config, manifest.shape)?;
        if manifest.tensors.len() != model.store.len() {
            return Err(bad("parameter count does not match the configuration"));
        }
        for entry in &manifest.tensors {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| bad(&format!("unexpected tensor {}", entry.name)))?;
            let start = usize::try_from(entry.offset).map_err(|_| bad("offset overflow"))?;
            if start > data.len() {
                return Err(bad(&format!("tensor {} starts past the data", entry.name)));
            }
            let t = Tensor::from_pct1_bytes(&data[start..])?;
            if t.shape() != entry.shape.as_slice() || t.shape() != model.store.get(id).value.shape() {
                return Err(bad(&format!("shape mismatch for {}", entry.name)));
            }
            model.store.get_mut(id).value = t.with_requires_grad(true);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        fs::write(path, bytes).map_err(|e| PctError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PctError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    config: RunConfig,
    shape: ModelShape,
    tensors: Vec<TensorEntry>,
}
