//! Exact linear signal model `x = H·θ_H + S·θ_S + e` and its decomposition
//! with the oblique projector `E_{S|H} = S (Sᵀ P⊥_H S)⁻¹ Sᵀ P⊥_H`.
//!
//! Linear systems are solved through an SVD with a condition-number guard
//! rather than explicit inverses.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PctError, Result};
use crate::tensor::Tensor;

/// Linear solves are refused above this condition number.
pub const MAX_CONDITION: f64 = 1e10;

/// Relative singular-value threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSignalModel {
    pub h_sys: DMatrix<f64>,
    pub s_sys: DMatrix<f64>,
    pub theta_h: DVector<f64>,
    pub theta_s: DVector<f64>,
    pub sigma_e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub x_id_hat: DVector<f64>,
    pub eps_hat: DVector<f64>,
    pub residual: DVector<f64>,
}

impl Decomposition {
    pub fn reconstruct(&self) -> DVector<f64> {
        &self.x_id_hat + &self.eps_hat + &self.residual
    }
}

impl LinearSignalModel {
    pub fn validate(&self) -> Result<()> {
        let d = self.h_sys.nrows();
        if self.s_sys.nrows() != d {
            return Err(PctError::shape(
                "signal model",
                &[self.h_sys.nrows(), self.h_sys.ncols()],
                &[self.s_sys.nrows(), self.s_sys.ncols()],
            ));
        }
        if self.theta_h.len() != self.h_sys.ncols() || self.theta_s.len() != self.s_sys.ncols() {
            return Err(PctError::Contract("coefficient length mismatch".into()));
        }
        if !(self.sigma_e >= 0.0) {
            return Err(PctError::Contract("noise scale must be nonnegative".into()));
        }
        full_column_rank(&self.h_sys, "H")?;
        full_column_rank(&self.s_sys, "S")?;
        check_disjoint(&self.h_sys, &self.s_sys)
    }

    pub fn identity_signal(&self) -> DVector<f64> {
        &self.h_sys * &self.theta_h
    }

    pub fn structured_noise(&self) -> DVector<f64> {
        &self.s_sys * &self.theta_s
    }

    /// Random instance with Gaussian system matrices, redrawn until both are
    /// well conditioned and their ranges are comfortably disjoint.
    pub fn random(d: usize, k_h: usize, k_s: usize, sigma_e: f64, seed: u64) -> Self {
        assert!(k_h + k_s <= d, "subspaces must fit in the ambient dimension");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        loop {
            let h = DMatrix::from_fn(d, k_h, |_, _| normal.sample(&mut rng));
            let s = DMatrix::from_fn(d, k_s, |_, _| normal.sample(&mut rng));
            let joint = hstack(&h, &s);
            let sv = joint.singular_values();
            let cond = sv.max() / sv.min();
            if cond < 1e3 {
                return Self {
                    theta_h: DVector::from_fn(k_h, |_, _| rng.random_range(-2.0..2.0)),
                    theta_s: DVector::from_fn(k_s, |_, _| rng.random_range(-2.0..2.0)),
                    h_sys: h,
                    s_sys: s,
                    sigma_e,
                };
            }
        }
    }
}

/// `P⊥_H = I − H (HᵀH)⁻¹ Hᵀ`, built from the left singular vectors of `H`.
pub fn orth_complement_projector(h_sys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    full_column_rank(h_sys, "H")?;
    let d = h_sys.nrows();
    let svd = h_sys.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let basis = u.columns(0, h_sys.ncols());
    Ok(DMatrix::identity(d, d) - &basis * basis.transpose())
}

/// Oblique projector onto `Range(S)` along `Range(H)`.
pub fn oblique_projector(s_sys: &DMatrix<f64>, h_sys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s_sys.nrows() != h_sys.nrows() {
        return Err(PctError::shape(
            "oblique_projector",
            &[s_sys.nrows(), s_sys.ncols()],
            &[h_sys.nrows(), h_sys.ncols()],
        ));
    }
    full_column_rank(s_sys, "S")?;
    check_disjoint(h_sys, s_sys)?;
    let p = orth_complement_projector(h_sys)?;
    let st_p = s_sys.transpose() * &p;
    let gram = &st_p * s_sys;
    let coef = guarded_solve(&gram, &st_p)?;
    Ok(s_sys * coef)
}

/// Splits `x_obs` into its `Range(H)` part, its `Range(S)` part and the
/// remainder orthogonal to both.
pub fn decompose(
    x_obs: &DVector<f64>,
    h_sys: &DMatrix<f64>,
    s_sys: &DMatrix<f64>,
) -> Result<Decomposition> {
    if x_obs.len() != h_sys.nrows() {
        return Err(PctError::shape("decompose", &[x_obs.len()], &[h_sys.nrows()]));
    }
    let e_s = oblique_projector(s_sys, h_sys)?;
    let e_h = oblique_projector(h_sys, s_sys)?;
    let eps_hat = &e_s * x_obs;
    let x_id_hat = &e_h * x_obs;
    let residual = x_obs - &x_id_hat - &eps_hat;
    Ok(Decomposition {
        x_id_hat,
        eps_hat,
        residual,
    })
}

/// Draws `x = Hθ_H + Sθ_S + e` with `e ~ N(0, σ_e² I)`.
pub fn sample(model: &LinearSignalModel, rng_seed: u64) -> Result<(DVector<f64>, Decomposition)> {
    model.validate()?;
    let d = model.h_sys.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = if model.sigma_e > 0.0 {
        let normal = Normal::new(0.0, model.sigma_e).expect("valid sigma");
        DVector::from_fn(d, |_, _| normal.sample(&mut rng))
    } else {
        DVector::zeros(d)
    };
    let truth = Decomposition {
        x_id_hat: model.identity_signal(),
        eps_hat: model.structured_noise(),
        residual: noise,
    };
    Ok((truth.reconstruct(), truth))
}

pub fn matrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter());
    }
    Tensor::from_parts(vec![m.nrows(), m.ncols()], data)
}

pub fn tensor_to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    match t.shape() {
        [r, c] => Ok(DMatrix::from_row_slice(*r, *c, t.data())),
        [n] => Ok(DMatrix::from_column_slice(*n, 1, t.data())),
        other => Err(PctError::shape("tensor_to_matrix", other, &[0, 0])),
    }
}

pub fn vector_to_tensor(v: &DVector<f64>) -> Tensor {
    Tensor::from_parts(vec![v.len()], v.as_slice().to_vec())
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

fn full_column_rank(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.ncols() == 0 || m.ncols() > m.nrows() {
        return Err(PctError::Singular(format!(
            "{name} is {}x{}, cannot have full column rank",
            m.nrows(),
            m.ncols()
        )));
    }
    let rank = numerical_rank(m);
    if rank < m.ncols() {
        return Err(PctError::Singular(format!(
            "{name} has rank {rank} < {} columns",
            m.ncols()
        )));
    }
    Ok(())
}

fn check_disjoint(h: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<()> {
    let joint = hstack(h, s);
    let rank = numerical_rank(&joint);
    if rank < h.ncols() + s.ncols() {
        return Err(PctError::Singular(format!(
            "Range(H) and Range(S) intersect: rank [H S] = {rank} < {}",
            h.ncols() + s.ncols()
        )));
    }
    Ok(())
}

/// Solves `A X = B` for square `A` via SVD, refusing ill-conditioned `A`.
fn guarded_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(PctError::Singular(format!(
            "condition number {:.3e} exceeds {MAX_CONDITION:.0e}",
            smax / smin
        )));
    }
    svd.solve(b, 0.0)
        .map_err(|e| PctError::Singular(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(d: usize, i: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(d, 1);
        m[(i, 0)] = 1.0;
        m
    }

    #[test]
    fn projector_of_first_axis() {
        let p = orth_complement_projector(&e(2, 0)).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert!((p - want).norm() < 1e-15);
    }

    #[test]
    fn orthogonal_axes_reduce_to_plain_projection() {
        let eo = oblique_projector(&e(3, 1), &e(3, 0)).unwrap();
        let x = DVector::from_row_slice(&[3.0, 5.0, 7.0]);
        let y = &eo * x;
        assert!((y - DVector::from_row_slice(&[0.0, 5.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn projector_properties_on_random_instances() {
        for seed in 0..20 {
            let m = LinearSignalModel::random(8, 2, 3, 0.0, seed);
            let p = orth_complement_projector(&m.h_sys).unwrap();
            assert!((&p * &p - &p).norm() < 1e-10);
            assert!((&p * &m.h_sys).norm() < 1e-10);
            assert!((&p - p.transpose()).norm() < 1e-12);
            let eo = oblique_projector(&m.s_sys, &m.h_sys).unwrap();
            assert!((&eo * &eo - &eo).norm() < 1e-10);
            assert!((&eo * &m.h_sys).norm() < 1e-10);
            assert!((&eo * &m.s_sys - &m.s_sys).norm() < 1e-10);
        }
    }

    #[test]
    fn noiseless_recovery_and_residual_orthogonality() {
        for seed in 0..20 {
            let mut m = LinearSignalModel::random(10, 3, 2, 0.0, 100 + seed);
            let (x, truth) = sample(&m, seed).unwrap();
            let d = decompose(&x, &m.h_sys, &m.s_sys).unwrap();
            let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / b.norm();
            assert!(rel(&d.eps_hat, &truth.eps_hat) < 1e-8);
            assert!(rel(&d.x_id_hat, &truth.x_id_hat) < 1e-8);

            m.sigma_e = 0.3;
            let (x, _) = sample(&m, seed).unwrap();
            let d = decompose(&x, &m.h_sys, &m.s_sys).unwrap();
            assert!((m.h_sys.transpose() * &d.residual).norm() < 1e-8);
            assert!((m.s_sys.transpose() * &d.residual).norm() < 1e-8);
            assert!((d.reconstruct() - &x).norm() < 1e-10);
        }
    }

    #[test]
    fn signal_in_identity_range_has_no_noise_part() {
        let m = LinearSignalModel::random(6, 2, 2, 0.0, 7);
        let x = &m.h_sys * DVector::from_row_slice(&[1.5, -0.5]);
        let d = decompose(&x, &m.h_sys, &m.s_sys).unwrap();
        assert!(d.eps_hat.norm() < 1e-10);
    }

    #[test]
    fn rank_deficient_inputs_are_singular() {
        let mut h = DMatrix::zeros(4, 2);
        h[(0, 0)] = 1.0;
        h[(0, 1)] = 2.0;
        assert!(matches!(orth_complement_projector(&h), Err(PctError::Singular(_))));
        // S shares a direction with H
        let h = e(4, 0);
        let mut s = DMatrix::zeros(4, 2);
        s[(0, 0)] = 1.0;
        s[(1, 1)] = 1.0;
        assert!(matches!(oblique_projector(&s, &h), Err(PctError::Singular(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_exact_without_noise() {
        let m = LinearSignalModel::random(8, 2, 2, 0.0, 3);
        let (x, _) = sample(&m, 1).unwrap();
        assert_eq!(x, m.identity_signal() + m.structured_noise());
        let mut noisy = m.clone();
        noisy.sigma_e = 0.5;
        assert_eq!(sample(&noisy, 9).unwrap(), sample(&noisy, 9).unwrap());
        assert_ne!(sample(&noisy, 9).unwrap().0, sample(&noisy, 10).unwrap().0);
    }

    #[test]
    fn noise_mean_is_within_three_standard_errors() {
        let sigma = 0.7;
        let mut m = LinearSignalModel::random(4, 1, 1, sigma, 5);
        m.h_sys = DMatrix::from_row_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        m.s_sys = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 0.0, 0.0]);
        let draws = 100_000 / 4;
        let mut total = 0.0;
        for seed in 0..draws {
            let (_, truth) = sample(&m, seed as u64).unwrap();
            total += truth.residual.sum();
        }
        let n = (draws * 4) as f64;
        assert!((total / n).abs() < 3.0 * sigma / n.sqrt());
    }

    #[test]
    fn recovery_error_shrinks_with_noise() {
        let base = LinearSignalModel::random(16, 3, 2, 0.0, 11);
        let mean_err = |sigma: f64| {
            let mut m = base.clone();
            m.sigma_e = sigma;
            (0..200u64)
                .map(|s| {
                    let (x, truth) = sample(&m, s).unwrap();
                    let d = decompose(&x, &m.h_sys, &m.s_sys).unwrap();
                    (d.eps_hat - truth.eps_hat).norm()
                })
                .sum::<f64>()
                / 200.0
        };
        let errs: Vec<f64> = [1e-1, 1e-2, 1e-3].iter().map(|&s| mean_err(s)).collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn tensor_conversion_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = matrix_to_tensor(&m);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(tensor_to_matrix(&t).unwrap(), m);
    }
}
