//! Training and evaluation on a synthetic dataset.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::error::{PctError, Result};
use crate::fairness::{
    accuracy_protocol, auc, feasible_fpr_grid, fpr_protocol, roc_points, AccuracyProtocol, FprProtocol,
    GroupedScores, ScoredPair,
};
use crate::losses::{face_loss, margin_logits, race_loss, total_loss};
use crate::model::{Model, ModelShape};
use crate::optim::{clip_grad_norm, sgd_step, ParamId};
use crate::probe::{probe_accuracy, ProbeConfig};
use crate::synth::{Dataset, PairLine, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr_face: f64,
    pub total: f64,
    pub face: f64,
    pub race: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
    pub wall_secs: f64,
}

/// Contiguous class label of a training sample.
pub fn train_class(ds: &Dataset, s: &Sample) -> usize {
    s.group_label * ds.spec.train_ids_per_group() + s.id_in_group
}

pub fn model_shape(ds: &Dataset) -> ModelShape {
    ModelShape {
        in_channels: 1,
        height: ds.spec.height,
        width: ds.spec.width,
        num_classes: ds.spec.num_train_classes(),
        num_groups: ds.spec.num_groups,
    }
}

/// Stacks `[C, H, W]` images into one `[B, C, H, W]` batch.
pub fn batch_images<'a>(images: impl ExactSizeIterator<Item = &'a Tensor>) -> Tensor {
    let b = images.len();
    let mut shape = Vec::new();
    let mut data = Vec::new();
    for img in images {
        shape = img.shape().to_vec();
        data.extend_from_slice(img.data());
    }
    shape.insert(0, b);
    Tensor::from_parts(shape, data)
}

/// Runs one forward/backward pass and one SGD step per group of parameters
/// that received a gradient. Returns `(total, face, race)` losses.
pub fn train_step(model: &mut Model, images: Tensor, classes: &[usize], groups: &[usize], epoch: usize) -> Result<(f64, f64, f64)> {
    let cfg = model.cfg.clone();
    let mcfg = cfg.margin_config(model.shape.num_classes);
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = model.backbone.forward(&mut g, &model.store, x)?;
    let head = g.param(&model.store, model.face_head);
    let logits = margin_logits(&mut g, out.embeddings.id_embed, head, classes, &mcfg)?;
    let face = face_loss(&mut g, logits, classes)?;
    let rw = g.param(&model.store, model.race_w);
    let rb = g.param(&model.store, model.race_b);
    let race = race_loss(&mut g, out.embeddings.ra_embed, groups, rw, rb)?;
    let total = total_loss(&mut g, face, race, &cfg.loss_weights())?;
    let values = (g.value(total).data()[0], g.value(face).data()[0], g.value(race).data()[0]);
    if ![values.0, values.1, values.2].iter().all(|v| v.is_finite()) {
        return Err(PctError::Numeric(format!(
            "non-finite loss in epoch {epoch}: lr {}, total {}, face {}, race {}",
            cfg.face_optimizer().lr_at(epoch),
            values.0,
            values.1,
            values.2
        )));
    }
    g.backward(total)?;
    model.store.zero_grad();
    g.accumulate_param_grads(&mut model.store);
    let with_grad = |ids: Vec<ParamId>, model: &Model| -> Vec<ParamId> {
        ids.into_iter()
            .filter(|&id| model.store.get(id).value.grad().is_some())
            .collect()
    };
    let face_ids = with_grad(model.face_group(), model);
    let race_ids = with_grad(model.race_group(), model);
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut model.store, &face_ids, cfg.grad_clip);
        clip_grad_norm(&mut model.store, &race_ids, cfg.grad_clip);
    }
    sgd_step(&mut model.store, &face_ids, &cfg.face_optimizer(), epoch)?;
    sgd_step(&mut model.store, &race_ids, &cfg.race_optimizer(), epoch)?;
    Ok(values)
}

/// Trains from scratch on `ds.train`. Parameters are rounded to `f32` at the
/// end so that a saved and reloaded checkpoint evaluates identically.
pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut model = Model::init(cfg, model_shape(ds))?;
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &ds.train[i]).collect();
            let images = batch_images(samples.iter().map(|s| &s.image));
            let classes: Vec<usize> = samples.iter().map(|s| train_class(ds, s)).collect();
            let groups: Vec<usize> = samples.iter().map(|s| s.group_label).collect();
            let (t, f, r) = train_step(&mut model, images, &classes, &groups, epoch)?;
            sums = (sums.0 + t, sums.1 + f, sums.2 + r);
            steps += 1;
        }
        let n = steps as f64;
        let stats = EpochStats {
            epoch,
            lr_face: cfg.face_optimizer().lr_at(epoch),
            total: sums.0 / n,
            face: sums.1 / n,
            race: sums.2 / n,
        };
        debug!("epoch {epoch}: total {:.4} face {:.4} race {:.4}", stats.total, stats.face, stats.race);
        epochs.push(stats);
    }
    model.store.round_to_f32();
    let wall_secs = start.elapsed().as_secs_f64();
    info!("trained {} epochs in {wall_secs:.1}s", cfg.epochs);
    Ok(TrainOutcome {
        model,
        epochs,
        wall_secs,
    })
}

/// Identity-branch embeddings, one row per image. Chunks are embedded in
/// parallel with the model shared read-only; results do not depend on the
/// number of workers.
pub fn embed(model: &Model, images: &[&Tensor], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Result<Vec<Vec<f64>>>> = images
        .par_chunks(chunk.max(1))
        .map(|part| {
            let mut g = Graph::new();
            let x = g.constant(batch_images(part.iter().copied()));
            let out = model.backbone.forward(&mut g, &model.store, x)?;
            let e = g.value(out.embeddings.id_embed);
            let dim = e.shape()[1];
            Ok(e.data().chunks_exact(dim).map(<[f64]>::to_vec).collect())
        })
        .collect();
    let mut all = Vec::with_capacity(images.len());
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

/// Evaluation outcome for one model on one dataset's verification pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub groups: Vec<String>,
    pub pairs_per_group: Vec<usize>,
    pub impostors: usize,
    pub accuracy: AccuracyProtocol,
    pub auc: Vec<f64>,
    pub fpr: Vec<FprProtocol>,
}

pub fn score_pairs(ds: &Dataset, embeddings: &[Vec<f64>]) -> Result<GroupedScores> {
    let k = ds.spec.num_groups;
    let mut groups = vec![Vec::new(); k];
    for p in &ds.pairs {
        let similarity = crate::fairness::cosine_similarity(&embeddings[p.a], &embeddings[p.b])?;
        groups[p.group].push(ScoredPair {
            similarity,
            genuine: p.same,
        });
    }
    Ok(GroupedScores {
        names: (0..k).map(|g| format!("group_{g}")).collect(),
        groups,
    })
}

pub fn metrics(scores: &GroupedScores, fpr_grid: &[f64]) -> Result<MetricsReport> {
    let impostors: usize = scores.impostors().iter().map(Vec::len).sum();
    let fpr = feasible_fpr_grid(fpr_grid, impostors)
        .into_iter()
        .map(|t| fpr_protocol(scores, t))
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        groups: scores.names.clone(),
        pairs_per_group: scores.groups.iter().map(Vec::len).collect(),
        impostors,
        accuracy: accuracy_protocol(scores)?,
        auc: scores.groups.iter().map(|g| auc(&roc_points(g))).collect(),
        fpr,
    })
}

pub fn evaluate(model: &Model, ds: &Dataset, fpr_grid: &[f64]) -> Result<MetricsReport> {
    let images: Vec<&Tensor> = ds.test.iter().map(|s| &s.image).collect();
    let emb = embed(model, &images, model.cfg.batch_size)?;
    metrics(&score_pairs(ds, &emb)?, fpr_grid)
}

/// Embeddings of the distinct images referenced by a pair list, in first-use
/// order, with the scored pairs grouped by the list's group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairListEval {
    pub paths: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub scores: GroupedScores,
}

/// Loads every image named in `pairs` from under `root` and scores the pairs.
/// A missing image fails with its path.
pub fn evaluate_pair_list(model: &Model, root: &Path, pairs: &[PairLine]) -> Result<PairListEval> {
    if pairs.is_empty() {
        return Err(PctError::Protocol("empty pair list".into()));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut paths = Vec::new();
    for p in pairs {
        for path in [p.path_a.as_str(), p.path_b.as_str()] {
            if !index.contains_key(path) {
                index.insert(path, paths.len());
                paths.push(path.to_string());
            }
        }
    }
    let images = paths
        .iter()
        .map(|p| Tensor::load(root.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let embeddings = embed(model, &refs, model.cfg.batch_size)?;
    let k = pairs.iter().map(|p| p.group).max().unwrap_or(0) + 1;
    let mut groups = vec![Vec::new(); k];
    for p in pairs {
        let a = &embeddings[index[p.path_a.as_str()]];
        let b = &embeddings[index[p.path_b.as_str()]];
        groups[p.group].push(ScoredPair {
            similarity: crate::fairness::cosine_similarity(a, b)?,
            genuine: p.same,
        });
    }
    Ok(PairListEval {
        paths,
        embeddings,
        scores: GroupedScores {
            names: (0..k).map(|g| format!("group_{g}")).collect(),
            groups,
        },
    })
}

/// Spatially pooled identity-branch features after every stage, indexed
/// `[stage][image]`.
pub fn stage_features(model: &Model, images: &[&Tensor], chunk: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let chunks: Vec<Result<Vec<Vec<Vec<f64>>>>> = images
        .par_chunks(chunk.max(1))
        .map(|part| {
            let mut g = Graph::new();
            let x = g.constant(batch_images(part.iter().copied()));
            let out = model.backbone.forward(&mut g, &model.store, x)?;
            Ok(out
                .stages
                .iter()
                .map(|rec| {
                    let t = g.value(rec.output.x_id);
                    let plane: usize = t.shape()[2..].iter().product();
                    t.data()
                        .chunks_exact(plane * t.shape()[1])
                        .map(|img| img.chunks_exact(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect())
                        .collect()
                })
                .collect())
        })
        .collect();
    let mut stages: Vec<Vec<Vec<f64>>> = vec![Vec::new(); model.backbone.cfg.num_stages()];
    for c in chunks {
        for (all, part) in stages.iter_mut().zip(c?) {
            all.extend(part);
        }
    }
    Ok(stages)
}

/// Linear-probe group accuracy on the pooled identity features of the test
/// images after each stage. Lower means less group information left.
pub fn stage_separability(model: &Model, ds: &Dataset, probe: &ProbeConfig) -> Result<Vec<f64>> {
    let images: Vec<&Tensor> = ds.test.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = ds.test.iter().map(|s| s.group_label).collect();
    stage_features(model, &images, model.cfg.batch_size)?
        .iter()
        .map(|feats| probe_accuracy(feats, &labels, ds.spec.num_groups, probe))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fairness::DEFAULT_FPR_GRID;
    use crate::synth::{generate, read_pairs, write_dataset, DatasetSpec, PAIRS_FILE};

    fn small() -> (Dataset, Model) {
        let spec = DatasetSpec {
            ids_per_group: 6,
            images_per_id: 5,
            test_ids_per_group: 3,
            pairs_per_group: 40,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec, 3).unwrap();
        let cfg = RunConfig {
            batch_size: 16,
            ..RunConfig::default()
        };
        let model = Model::init(&cfg, model_shape(&ds)).unwrap();
        (ds, model)
    }

    #[test]
    fn train_classes_are_contiguous() {
        let (ds, _) = small();
        let mut seen: Vec<usize> = ds.train.iter().map(|s| train_class(&ds, s)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, (0..ds.spec.num_train_classes()).collect::<Vec<_>>());
    }

    #[test]
    fn embeddings_do_not_depend_on_chunking() {
        let (ds, model) = small();
        let images: Vec<&Tensor> = ds.test.iter().take(11).map(|s| &s.image).collect();
        let one = embed(&model, &images, 1).unwrap();
        let many = embed(&model, &images, 4).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert_eq!(a.len(), model.cfg.embed_dim);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_list_from_disk_matches_in_memory_evaluation() {
        let (ds, model) = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let pairs = read_pairs(&dir.path().join(PAIRS_FILE)).unwrap();
        let e = evaluate_pair_list(&model, dir.path(), &pairs).unwrap();
        let from_disk = metrics(&e.scores, &DEFAULT_FPR_GRID).unwrap();
        let in_memory = evaluate(&model, &ds, &DEFAULT_FPR_GRID).unwrap();
        assert_eq!(from_disk.groups, in_memory.groups);
        assert_eq!(from_disk.pairs_per_group, in_memory.pairs_per_group);
        let (a, b) = (&from_disk.accuracy.metrics.values, &in_memory.accuracy.metrics.values);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
        assert_eq!(e.paths.len(), e.embeddings.len());
    }

    #[test]
    fn missing_image_names_its_path() {
        let (ds, model) = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let mut pairs = read_pairs(&dir.path().join(PAIRS_FILE)).unwrap();
        pairs[0].path_b = "test/missing.pct".into();
        let err = evaluate_pair_list(&model, dir.path(), &pairs).unwrap_err();
        assert!(matches!(err, PctError::Io { .. }));
        assert!(err.to_string().contains("test/missing.pct"), "{err}");
        assert!(evaluate_pair_list(&model, dir.path(), &[]).is_err());
    }

    #[test]
    fn stage_features_have_one_entry_per_image_and_channel() {
        let (ds, model) = small();
        let images: Vec<&Tensor> = ds.test.iter().take(5).map(|s| &s.image).collect();
        let feats = stage_features(&model, &images, 2).unwrap();
        assert_eq!(feats.len(), model.cfg.stage_widths.len());
        for (stage, width) in feats.iter().zip(&model.cfg.stage_widths) {
            assert_eq!(stage.len(), 5);
            assert!(stage.iter().all(|f| f.len() == *width));
        }
    }
}
