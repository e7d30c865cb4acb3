//! Synthetic grouped image data.
//!
//! Every image is `clip(template(id) + gain_g·texture(g) + N(0, σ_g²))` in
//! `[-1, 1]`. Templates are i.i.d. uniform pixel patterns, one per identity.
//! Textures are smooth random cosine mixtures, one per group. Groups may
//! differ in noise level; by default one group is twice as noisy as the
//! others. Identities are split into training and test sets, and the test
//! identities yield within-group verification pairs with equal numbers of
//! genuine and impostor pairs.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PctError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_groups: usize,
    pub ids_per_group: usize,
    pub images_per_id: usize,
    pub height: usize,
    pub width: usize,
    /// Identities per group held out for verification pairs.
    pub test_ids_per_group: usize,
    /// Pairs per group; half genuine, half impostor.
    pub pairs_per_group: usize,
    pub template_amplitude: f64,
    /// Side of the square pixel blocks sharing one template value.
    pub template_block: usize,
    /// Highest cosine frequency in each group texture.
    pub texture_order: usize,
    pub group_gains: Vec<f64>,
    pub group_sigmas: Vec<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_groups: 4,
            ids_per_group: 50,
            images_per_id: 8,
            height: 16,
            width: 16,
            test_ids_per_group: 15,
            pairs_per_group: 400,
            template_amplitude: 0.5,
            template_block: 4,
            texture_order: 3,
            group_gains: vec![0.5; 4],
            group_sigmas: vec![0.15, 0.3, 0.15, 0.15],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PctError::Config(m));
        if self.num_groups < 2 {
            return err(format!("need at least 2 groups, got {}", self.num_groups));
        }
        if self.ids_per_group < 2 {
            return err(format!(
                "ids_per_group must be at least 2 for impostor pairs, got {}",
                self.ids_per_group
            ));
        }
        if self.test_ids_per_group < 2 || self.test_ids_per_group >= self.ids_per_group {
            return err(format!(
                "test_ids_per_group must lie in [2, {}), got {}",
                self.ids_per_group, self.test_ids_per_group
            ));
        }
        if self.images_per_id < 2 {
            return err("images_per_id must be at least 2 for genuine pairs".into());
        }
        if self.height == 0 || self.width == 0 || self.template_block == 0 {
            return err("image size and template block must be positive".into());
        }
        if self.pairs_per_group < 2 || self.pairs_per_group % 2 != 0 {
            return err("pairs_per_group must be a positive even number".into());
        }
        if self.group_gains.len() != self.num_groups || self.group_sigmas.len() != self.num_groups {
            return err(format!(
                "{} gains and {} sigmas for {} groups",
                self.group_gains.len(),
                self.group_sigmas.len(),
                self.num_groups
            ));
        }
        if self
            .group_gains
            .iter()
            .chain(&self.group_sigmas)
            .chain([&self.template_amplitude])
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return err("gains, sigmas and amplitude must be finite and nonnegative".into());
        }
        let genuine_available = self.test_ids_per_group * self.images_per_id * (self.images_per_id - 1) / 2;
        if genuine_available < self.pairs_per_group / 2 {
            return err(format!(
                "only {genuine_available} genuine pairs per group available, {} requested",
                self.pairs_per_group / 2
            ));
        }
        Ok(())
    }

    pub fn train_ids_per_group(&self) -> usize {
        self.ids_per_group - self.test_ids_per_group
    }

    pub fn num_train_classes(&self) -> usize {
        self.num_groups * self.train_ids_per_group()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, h, w]`.
    pub image: Tensor,
    /// Identity index within its group.
    pub id_in_group: usize,
    pub group_label: usize,
    pub image_index: usize,
}

impl Sample {
    /// Globally unique identity label.
    pub fn id_label(&self, spec: &DatasetSpec) -> usize {
        self.group_label * spec.ids_per_group + self.id_in_group
    }

    pub fn rel_path(&self) -> String {
        format!(
            "group_{}/id_{}/img_{}.pct",
            self.group_label, self.id_in_group, self.image_index
        )
    }
}

/// A verification pair of test samples (indices into [`Dataset::test`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub group: usize,
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub pairs: Vec<Pair>,
}

/// Smooth field `Σ a_uv cos(πu(y+½)/h + φ_uv) cos(πv(x+½)/w + ψ_uv)` scaled
/// to unit maximum magnitude.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, order: usize) -> Vec<f64> {
    let mut terms = Vec::new();
    for u in 0..=order {
        for v in 0..=order {
            if u + v == 0 {
                continue;
            }
            let a: f64 = rng.random_range(-1.0..1.0);
            let p: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let q: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            terms.push((u as f64, v as f64, a, p, q));
        }
    }
    let pi = std::f64::consts::PI;
    let mut field: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            terms
                .iter()
                .map(|(u, v, a, p, q)| a * (pi * u * y / h as f64 + p).cos() * (pi * v * x / w as f64 + q).cos())
                .sum()
        })
        .collect();
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

fn group_rng(seed: u64, group: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group as u64 + 1);
    rng
}

/// Generates the dataset deterministically from `seed`. Each group draws
/// from its own random stream, so groups can be produced independently.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let train_ids = spec.train_ids_per_group();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut pairs = Vec::new();
    for g in 0..spec.num_groups {
        let mut rng = group_rng(seed, g);
        let tex = texture(&mut rng, h, w, spec.texture_order);
        let gain = spec.group_gains[g];
        let noise = Normal::new(0.0, spec.group_sigmas[g]).expect("validated sigma");
        let first_test = test.len();
        for id in 0..spec.ids_per_group {
            let amp = spec.template_amplitude;
            let bs = spec.template_block;
            let (bh, bw) = (h.div_ceil(bs), w.div_ceil(bs));
            let blocks: Vec<f64> = (0..bh * bw)
                .map(|_| if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 })
                .collect();
            let template: Vec<f64> = (0..h * w)
                .map(|i| blocks[(i / w / bs) * bw + (i % w) / bs])
                .collect();
            for k in 0..spec.images_per_id {
                let pixels = template
                    .iter()
                    .zip(&tex)
                    // f32 precision, as stored on disk, so that in-memory and
                    // reloaded datasets agree bit for bit.
                    .map(|(t, x)| (t + gain * x + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32 as f64)
                    .collect();
                let s = Sample {
                    image: Tensor::from_parts(vec![1, h, w], pixels),
                    id_in_group: id,
                    group_label: g,
                    image_index: k,
                };
                if id < train_ids {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
        }
        pairs.extend(group_pairs(spec, g, first_test, &mut rng));
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train,
        test,
        pairs,
    })
}

/// Samples distinct genuine and impostor pairs among one group's test
/// images, which occupy `first..first + n_test_ids·images_per_id`.
fn group_pairs(spec: &DatasetSpec, group: usize, first: usize, rng: &mut ChaCha8Rng) -> Vec<Pair> {
    let k = spec.images_per_id;
    let ids = spec.test_ids_per_group;
    let half = spec.pairs_per_group / 2;
    let per_id = k * (k - 1) / 2;
    let within: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    let mut out = Vec::with_capacity(2 * half);
    for idx in sample(rng, ids * per_id, half).into_iter() {
        let (id, (a, b)) = (idx / per_id, within[idx % per_id]);
        out.push(Pair {
            group,
            a: first + id * k + a,
            b: first + id * k + b,
            same: true,
        });
    }
    let mut seen = BTreeSet::new();
    while seen.len() < half {
        let a = rng.random_range(0..ids * k);
        let b = rng.random_range(0..ids * k);
        if a / k == b / k {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            out.push(Pair {
                group,
                a: first + key.0,
                b: first + key.1,
                same: false,
            });
        }
    }
    out
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAIRS_FILE: &str = "pairs.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub group: usize,
    pub id: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: DatasetSpec,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub pairs_file: String,
    pub pairs_sha256: String,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| PctError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PctError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| PctError::io(path, e))
}

pub fn pairs_text(ds: &Dataset) -> String {
    let mut out = String::new();
    for p in &ds.pairs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.group,
            ds.test[p.a].rel_path(),
            ds.test[p.b].rel_path(),
            u8::from(p.same)
        ));
    }
    out
}

/// Writes images, the pair list and the manifest under `dir`. Returns the
/// hex SHA-256 of the manifest file.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<String> {
    let entries = |samples: &[Sample]| -> Result<Vec<ManifestEntry>> {
        samples
            .iter()
            .map(|s| {
                let bytes = s.image.to_pct1_bytes();
                let rel = s.rel_path();
                write_file(&dir.join(&rel), &bytes)?;
                Ok(ManifestEntry {
                    path: rel,
                    group: s.group_label,
                    id: s.id_in_group,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                })
            })
            .collect()
    };
    let train = entries(&ds.train)?;
    let test = entries(&ds.test)?;
    let pairs = pairs_text(ds);
    write_file(&dir.join(PAIRS_FILE), pairs.as_bytes())?;
    let manifest = Manifest {
        seed: ds.seed,
        spec: ds.spec.clone(),
        train,
        test,
        pairs_file: PAIRS_FILE.into(),
        pairs_sha256: hex::encode(Sha256::digest(pairs.as_bytes())),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.write_all(b"\n").expect("writing to a Vec");
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// One line of a pair list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLine {
    pub group: usize,
    pub path_a: String,
    pub path_b: String,
    pub same: bool,
}

/// Parses `group_id,path_a,path_b,same(0|1)` lines; blank lines and lines
/// starting with `#` are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<PairLine>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |msg: String| PctError::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(fail(format!("expected 4 comma-separated fields, got {}", fields.len())));
        }
        let group = fields[0]
            .parse()
            .map_err(|_| fail(format!("bad group id {:?}", fields[0])))?;
        let same = match fields[3] {
            "0" => false,
            "1" => true,
            other => return Err(fail(format!("same flag must be 0 or 1, got {other:?}"))),
        };
        out.push(PairLine {
            group,
            path_a: fields[1].to_string(),
            path_b: fields[2].to_string(),
            same,
        });
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairLine>> {
    let text = fs::read_to_string(path).map_err(|e| PctError::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

/// Loads a dataset previously written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(dir)?;
    manifest.spec.validate()?;
    let load = |entries: &[ManifestEntry]| -> Result<Vec<Sample>> {
        entries
            .iter()
            .map(|e| {
                let image = Tensor::load(dir.join(&e.path))?;
                let image_index = e
                    .path
                    .rsplit_once("img_")
                    .and_then(|(_, tail)| tail.strip_suffix(".pct"))
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| PctError::Format(format!("unexpected image path {}", e.path)))?;
                Ok(Sample {
                    image,
                    id_in_group: e.id,
                    group_label: e.group,
                    image_index,
                })
            })
            .collect()
    };
    let train = load(&manifest.train)?;
    let test = load(&manifest.test)?;
    let index: std::collections::HashMap<String, usize> =
        test.iter().enumerate().map(|(i, s)| (s.rel_path(), i)).collect();
    let pairs_path = dir.join(&manifest.pairs_file);
    let pairs = read_pairs(&pairs_path)?
        .into_iter()
        .map(|p| {
            let find = |path: &str| {
                index.get(path).copied().ok_or_else(|| {
                    PctError::Format(format!("{}: {path} is not a test image", pairs_path.display()))
                })
            };
            Ok(Pair {
                group: p.group,
                a: find(&p.path_a)?,
                b: find(&p.path_b)?,
                same: p.same,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: manifest.spec,
        seed: manifest.seed,
        train,
        test,
        pairs,
    })
}

pub fn dataset_dir_files(dir: &Path) -> Vec<PathBuf> {
    fn walk(d: &Path, out: &mut Vec<PathBuf>) {
        if let Ok(rd) = fs::read_dir(d) {
            let mut entries: Vec<_> = rd.flatten().map(|e| e.path()).collect();
            entries.sort();
            for p in entries {
                if p.is_dir() {
                    walk(&p, out);
                } else {
                    out.push(p);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, &mut out);
    out
}
