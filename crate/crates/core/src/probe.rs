//! Linear probes: how well a multinomial logistic regression separates
//! labels given fixed features.

use crate::error::{PctError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Trains on even-indexed samples and reports accuracy on odd-indexed ones.
/// Features are standardized with statistics of the training half.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<f64> {
    if features.len() != labels.len() || features.len() < 4 {
        return Err(PctError::Contract(format!(
            "probe needs at least 4 labelled samples, got {} features and {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(PctError::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(PctError::Contract("ragged probe features".into()));
    }
    let train: Vec<usize> = (0..features.len()).step_by(2).collect();
    let test: Vec<usize> = (1..features.len()).step_by(2).collect();

    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v / train.len() as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for &i in &train {
        for ((s, v), m) in scale.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 };
    }
    let standardize = |i: usize| -> Vec<f64> {
        features[i]
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((v, m), s)| (v - m) * s)
            .chain(std::iter::once(1.0))
            .collect()
    };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
    let xte: Vec<Vec<f64>> = test.iter().map(|&i| standardize(i)).collect();

    let cols = d + 1;
    let mut w = vec![0.0; classes * cols];
    let scores = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| w[c * cols..(c + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    let n = xtr.len() as f64;
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0; classes * cols];
        for (x, &i) in xtr.iter().zip(&train) {
            let mut s = scores(&w, x);
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter_mut().map(|v| {
                *v = (*v - mx).exp();
                *v
            }).sum();
            for (c, p) in s.iter().enumerate() {
                let r = p / z - if c == labels[i] { 1.0 } else { 0.0 };
                for (gk, xk) in grad[c * cols..(c + 1) * cols].iter_mut().zip(x) {
                    *gk += r * xk / n;
                }
            }
        }
        for (wk, gk) in w.iter_mut().zip(&grad) {
            *wk -= cfg.learning_rate * (gk + cfg.l2 * *wk);
        }
    }
    let correct = xte
        .iter()
        .zip(&test)
        .filter(|(x, &i)| {
            let s = scores(&w, x);
            let best = s
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(c, _)| c)
                .unwrap();
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / xte.len() as f64)
}
