//! Linearization of chemical-aware noise: the matrix `C` with
//! `Δx ≈ C Δd`, the exact residual bound for torsion rotations, and the
//! Gaussian score targets built from `C`.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FradError, Result};
use crate::geometry::noise::{apply_internal, noise_dim, InternalDelta, NoiseKind};
use crate::geometry::{internal_coords, InternalCoords, TorsionCoord};
use crate::metrics;
use crate::molgraph::{Conformation, Molecule};

/// Damping added to the normal equations of [`lstsq_c`].
pub const LSTSQ_DAMPING: f64 = 1e-10;
/// Relative cutoff below which eigenvalues of `CΣCᵀ` count as zero.
pub const PINV_RTOL: f64 = 1e-10;
/// Default probe scale for [`lstsq_c`] (radians, or length units for lengths).
pub const DEFAULT_PROBE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Analytic,
    LeastSquares,
}

/// `C` in natural atom row order (`3a..3a+3` is atom `a`), columns in noise
/// application order.
#[derive(Clone, Debug)]
pub struct LinearMap {
    pub c: DMatrix<f64>,
    pub kind: NoiseKind,
    pub method: Method,
    /// Key atom of each rotatable-torsion column, in column order.
    pub key_atoms: Vec<usize>,
    /// Index of the first rotatable-torsion column.
    pub torsion_offset: usize,
}

impl LinearMap {
    pub fn n_atoms(&self) -> usize {
        self.c.nrows() / 3
    }

    pub fn m(&self) -> usize {
        self.c.ncols()
    }

    /// Atom permutation with the key atoms first (in torsion order), then all
    /// other atoms ascending.
    pub fn key_atom_order(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_atoms()];
        let mut order = Vec::with_capacity(self.n_atoms());
        for &k in &self.key_atoms {
            if !seen[k] {
                seen[k] = true;
                order.push(k);
            }
        }
        order.extend((0..self.n_atoms()).filter(|&a| !seen[a]));
        order
    }

    /// `C` with rows permuted into [`key_atom_order`](Self::key_atom_order).
    pub fn arranged(&self) -> DMatrix<f64> {
        let order = self.key_atom_order();
        DMatrix::from_fn(self.c.nrows(), self.c.ncols(), |r, col| {
            self.c[(3 * order[r / 3] + r % 3, col)]
        })
    }

    /// Largest absolute entry in any 3x1 block strictly above the block
    /// diagonal of the torsion columns, in key-atom arrangement.
    pub fn max_upper_block(&self) -> f64 {
        let a = self.arranged();
        let mut worst = 0.0f64;
        for i in 0..self.key_atoms.len() {
            for j in (i + 1)..self.key_atoms.len() {
                for k in 0..3 {
                    worst = worst.max(a[(3 * i + k, self.torsion_offset + j)].abs());
                }
            }
        }
        worst
    }

    /// Numerical rank with a relative singular-value cutoff.
    pub fn rank(&self, rtol: f64) -> usize {
        if self.c.ncols() == 0 || self.c.nrows() == 0 {
            return 0;
        }
        let sv = self.c.clone().svd(false, false).singular_values;
        let smax = sv.max();
        sv.iter().filter(|s| **s > rtol * smax && **s > 0.0).count()
    }

    pub fn apply(&self, d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != self.m() {
            return Err(FradError::Dimension {
                expected: self.m(),
                got: d.len(),
            });
        }
        Ok((&self.c * DVector::from_column_slice(d)).as_slice().to_vec())
    }
}

fn unit(conf: &Conformation, from: usize, to: usize) -> Result<Vector3<f64>> {
    let d = conf.pos(to) - conf.pos(from);
    let n = d.norm();
    if !(n > 0.0) {
        return Err(FradError::ZeroAxis { b: from, c: to });
    }
    Ok(d / n)
}

fn set_block(c: &mut DMatrix<f64>, atom: usize, col: usize, v: &Vector3<f64>) {
    for k in 0..3 {
        c[(3 * atom + k, col)] = v[k];
    }
}

fn torsion_column(c: &mut DMatrix<f64>, col: usize, x: &Conformation, t: &TorsionCoord) -> Result<()> {
    let [_, b, axis_end, _] = t.atoms;
    let u = unit(x, b, axis_end)?;
    let pb = x.pos(b);
    for &a in &t.moving {
        if a != axis_end {
            set_block(c, a, col, &u.cross(&(x.pos(a) - pb)));
        }
    }
    Ok(())
}

/// Analytic `C` for the coordinate selection `ic` at `x_eq`.
///
/// Length columns are the unit bond axis on every moving atom, angle columns
/// the tangent of rotation about the angle-plane normal through the hinge,
/// torsion columns `u × (p_a - p_b)` on moving atoms.
pub fn analytic_c(ic: &InternalCoords, x_eq: &Conformation, kind: NoiseKind) -> Result<LinearMap> {
    let n = x_eq.n_atoms();
    let set = &ic.set;
    let m = noise_dim(kind, ic);
    let mut c = DMatrix::zeros(3 * n, m);
    let mut col = 0;
    if kind == NoiseKind::Vrn {
        for l in &set.lengths {
            let u = unit(x_eq, l.b, l.c)?;
            for &a in &l.moving {
                set_block(&mut c, a, col, &u);
            }
            col += 1;
        }
        for ang in &set.angles {
            let h = x_eq.pos(ang.hinge);
            let normal = (x_eq.pos(ang.fixed_arm) - h).cross(&(x_eq.pos(ang.moving_arm) - h));
            let nn = normal.norm();
            if !(nn > 0.0) {
                return Err(FradError::DegenerateMove(format!(
                    "angle {}-{}-{} is collinear",
                    ang.fixed_arm, ang.hinge, ang.moving_arm
                )));
            }
            let u = normal / nn;
            for &a in &ang.moving {
                set_block(&mut c, a, col, &u.cross(&(x_eq.pos(a) - h)));
            }
            col += 1;
        }
        for t in &set.fixed_torsions {
            torsion_column(&mut c, col, x_eq, t)?;
            col += 1;
        }
    }
    let torsion_offset = col;
    if kind != NoiseKind::Cgn {
        for t in &set.rotatable {
            torsion_column(&mut c, col, x_eq, t)?;
            col += 1;
        }
    }
    Ok(LinearMap {
        c,
        kind,
        method: Method::Analytic,
        key_atoms: key_atoms(ic, kind),
        torsion_offset,
    })
}

fn key_atoms(ic: &InternalCoords, kind: NoiseKind) -> Vec<usize> {
    if kind == NoiseKind::Cgn {
        return Vec::new();
    }
    ic.set.rotatable.iter().map(|t| t.atoms[3]).collect()
}

/// Analytic `C` for rotation noise.
pub fn analytic_c_rn(mol: &Molecule, x_eq: &Conformation) -> Result<LinearMap> {
    let ic = internal_coords(mol, x_eq)?;
    analytic_c(&ic, x_eq, NoiseKind::Rn)
}

/// Exact Cartesian displacement produced by internal offsets `d` (flattened
/// in the column order of `kind`).
pub fn displacement(ic: &InternalCoords, x_eq: &Conformation, kind: NoiseKind, d: &[f64]) -> Result<Vec<f64>> {
    let delta = InternalDelta::unflatten(kind, ic, d)?;
    let moved = apply_internal(ic, x_eq, &delta)?;
    Ok(moved.displacement_from(x_eq))
}

/// Least-squares estimate of `C` from `n_samples` probe draws of std
/// `probe_scale`.
///
/// Draws come in antithetic pairs `(Δ, -Δ)`, which cancels every even-order
/// term of the displacement in the normal equations.
pub fn lstsq_c<R: Rng + ?Sized>(
    ic: &InternalCoords,
    x_eq: &Conformation,
    kind: NoiseKind,
    probe_scale: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<LinearMap> {
    let m = noise_dim(kind, ic);
    if !(probe_scale > 0.0) || !probe_scale.is_finite() {
        return Err(FradError::Precondition(format!("probe scale must be > 0, got {probe_scale}")));
    }
    if n_samples < m {
        return Err(FradError::Precondition(format!(
            "least-squares C needs at least {m} samples, got {n_samples}"
        )));
    }
    let rows = 3 * x_eq.n_atoms();
    let mut psi = DMatrix::zeros(n_samples, m);
    let mut y = DMatrix::zeros(n_samples, rows);
    let mut d = vec![0.0; m];
    for s in 0..n_samples {
        if s % 2 == 0 {
            for v in d.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * probe_scale;
            }
        } else {
            d.iter_mut().for_each(|v| *v = -*v);
        }
        let dx = displacement(ic, x_eq, kind, &d)?;
        for (k, v) in d.iter().enumerate() {
            psi[(s, k)] = *v;
        }
        for (k, v) in dx.iter().enumerate() {
            y[(s, k)] = *v;
        }
    }
    let c = if m == 0 {
        DMatrix::zeros(rows, 0)
    } else {
        let mut gram = psi.transpose() * &psi;
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) || hi / lo > 1e12 {
            log::warn!("least-squares design is ill-conditioned (eigenvalues {lo:e}..{hi:e}); damped solve");
        }
        for k in 0..m {
            gram[(k, k)] += LSTSQ_DAMPING;
        }
        let rhs = psi.transpose() * &y;
        let chol = gram
            .cholesky()
            .ok_or_else(|| FradError::Precondition("normal equations are not positive definite".into()))?;
        chol.solve(&rhs).transpose()
    };
    Ok(LinearMap {
        c,
        kind,
        method: Method::LeastSquares,
        key_atoms: key_atoms(ic, kind),
        torsion_offset: m - ic.m().min(m),
    })
}

/// `𝓔(Δψ) = Δψ² - 2Δψ sin Δψ - 2 cos Δψ + 2`, the squared gap between the
/// chord and the tangent-line approximation of a unit-radius rotation.
pub fn rotation_error(dpsi: f64) -> f64 {
    dpsi * dpsi - 2.0 * dpsi * dpsi.sin() - 2.0 * dpsi.cos() + 2.0
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearizationReport {
    /// Sum of squared axis distances of each torsion's moving atoms.
    pub d: Vec<f64>,
    /// Per-atom squared residual `‖Δx_a - (CΔψ)_a‖²`.
    pub atom_residuals: Vec<f64>,
    pub residual: f64,
    pub bound: f64,
    pub c_error: Option<f64>,
}

fn radius_sq(x: &Conformation, t: &TorsionCoord, a: usize) -> Result<f64> {
    let [_, b, c, _] = t.atoms;
    let u = unit(x, b, c)?;
    let r = x.pos(a) - x.pos(b);
    Ok(r.cross(&u).norm_squared())
}

/// Compares the exact displacement of rotating every rotatable torsion by
/// `dpsi` against `C Δψ` and against `Σ_j D_j 𝓔(Δψ_j)`.
pub fn linearization_bound_check(mol: &Molecule, x_eq: &Conformation, dpsi: &[f64]) -> Result<LinearizationReport> {
    if dpsi.iter().any(|v| !v.is_finite()) {
        return Err(FradError::Precondition("torsion offsets must be finite".into()));
    }
    let ic = internal_coords(mol, x_eq)?;
    let lin = analytic_c(&ic, x_eq, NoiseKind::Rn)?;
    let dx = displacement(&ic, x_eq, NoiseKind::Rn, dpsi)?;
    let cd = lin.apply(dpsi)?;
    let atom_residuals: Vec<f64> = (0..x_eq.n_atoms())
        .map(|a| (0..3).map(|k| (dx[3 * a + k] - cd[3 * a + k]).powi(2)).sum())
        .collect();
    let residual = atom_residuals.iter().sum::<f64>();
    let mut d = Vec::with_capacity(ic.m());
    for t in &ic.set.rotatable {
        let mut s = 0.0;
        for &a in &t.moving {
            s += radius_sq(x_eq, t, a)?;
        }
        d.push(s);
    }
    let bound = d.iter().zip(dpsi).map(|(dj, p)| dj * rotation_error(*p)).sum();
    let c_error = c_error(&[(cd, dx)]).ok();
    Ok(LinearizationReport {
        d,
        atom_residuals,
        residual,
        bound,
        c_error,
    })
}

/// Per-atom squared axis distance for torsion column `j` of `ic`.
pub fn torsion_radii_sq(ic: &InternalCoords, x: &Conformation, j: usize) -> Result<Vec<(usize, f64)>> {
    let t = &ic.set.rotatable[j];
    t.moving.iter().map(|&a| Ok((a, radius_sq(x, t, a)?))).collect()
}

/// `‖stack(Δx - CΔd)‖ / ‖stack(Δx)‖` over a batch of `(CΔd, Δx)` pairs.
pub fn c_error(batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (pred, dx) in batch {
        if pred.len() != dx.len() {
            return Err(FradError::Dimension {
                expected: dx.len(),
                got: pred.len(),
            });
        }
        for (p, t) in pred.iter().zip(dx) {
            num += (t - p) * (t - p);
            den += t * t;
        }
    }
    if den == 0.0 {
        return Err(FradError::UndefinedRatio("all displacements are zero".into()));
    }
    Ok((num / den).sqrt())
}

/// [`c_error`] for a linear map and a batch of `(Δd, Δx)` pairs.
pub fn c_error_of(lin: &LinearMap, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let pairs = batch
        .iter()
        .map(|(d, dx)| Ok((lin.apply(d)?, dx.clone())))
        .collect::<Result<Vec<_>>>()?;
    c_error(&pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Cgn,
    Can,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Covariance {
    /// `τ² I`
    Isotropic,
    /// `C Σ Cᵀ`, applied by pseudo-inverse.
    Can,
    /// `τ² I + C Σ Cᵀ`, applied by Cholesky solve.
    Hybrid,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScoreTarget {
    pub target: Vec<f64>,
    pub covariance: Covariance,
    /// Absolute eigenvalue cutoff used by the pseudo-inverse, if one was.
    pub pinv_tol: Option<f64>,
}

/// `C Σ Cᵀ` with `Σ = diag(sigma_sq)`.
pub fn can_covariance(c: &DMatrix<f64>, sigma_sq: &[f64]) -> Result<DMatrix<f64>> {
    if sigma_sq.len() != c.ncols() {
        return Err(FradError::Dimension {
            expected: c.ncols(),
            got: sigma_sq.len(),
        });
    }
    let mut cs = c.clone();
    for (j, s) in sigma_sq.iter().enumerate() {
        cs.column_mut(j).scale_mut(*s);
    }
    Ok(cs * c.transpose())
}

fn can_pinv_apply(c: &DMatrix<f64>, sigma_sq: &[f64], delta: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if sigma_sq.len() != c.ncols() {
        return Err(FradError::Dimension {
            expected: c.ncols(),
            got: sigma_sq.len(),
        });
    }
    if c.ncols() == 0 {
        return Ok((DVector::zeros(delta.len()), 0.0));
    }
    if sigma_sq.iter().any(|s| *s < 0.0) {
        return Err(FradError::Precondition("variances must be >= 0".into()));
    }
    // CΣCᵀ = A Aᵀ with A = C Σ^{1/2}; its eigenpairs are (s², U) from A's SVD.
    let mut a = c.clone();
    for (j, s) in sigma_sq.iter().enumerate() {
        a.column_mut(j).scale_mut(s.sqrt());
    }
    let svd = a.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let lam: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let lmax = lam.iter().cloned().fold(0.0, f64::max);
    let tol = PINV_RTOL * lmax;
    let proj = u.transpose() * delta;
    let mut out = DVector::zeros(delta.len());
    for (k, l) in lam.iter().enumerate() {
        if *l > tol && *l > 0.0 {
            out += u.column(k) * (proj[k] / l);
        }
    }
    Ok((out, tol))
}

/// Score of the linear-Gaussian noise model at `x_query` around `x_ref`.
///
/// `sigma_sq` holds the per-column variances of the internal noise (ignored
/// for `Cgn`). Hybrid with `tau = 0` degrades to the CAN pseudo-inverse.
pub fn score_target(
    kind: TargetKind,
    x_query: &Conformation,
    x_ref: &Conformation,
    c: &DMatrix<f64>,
    sigma_sq: &[f64],
    tau: f64,
) -> Result<ScoreTarget> {
    x_query.check_atoms(x_ref.n_atoms())?;
    let delta = DVector::from_vec(x_query.displacement_from(x_ref));
    let kind = if kind == TargetKind::Hybrid && tau == 0.0 {
        log::warn!("hybrid score with tau = 0 falls back to the CAN pseudo-inverse");
        TargetKind::Can
    } else {
        kind
    };
    match kind {
        TargetKind::Cgn => {
            if !(tau > 0.0) {
                return Err(FradError::Precondition(format!("CGN score needs tau > 0, got {tau}")));
            }
            let s = -1.0 / (tau * tau);
            Ok(ScoreTarget {
                target: delta.iter().map(|d| d * s).collect(),
                covariance: Covariance::Isotropic,
                pinv_tol: None,
            })
        }
        TargetKind::Can => {
            let (v, tol) = can_pinv_apply(c, sigma_sq, &delta)?;
            Ok(ScoreTarget {
                target: v.iter().map(|x| -x).collect(),
                covariance: Covariance::Can,
                pinv_tol: Some(tol),
            })
        }
        TargetKind::Hybrid => {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(FradError::Precondition(format!("tau must be > 0, got {tau}")));
            }
            let mut g = can_covariance(c, sigma_sq)?;
            for k in 0..g.nrows() {
                g[(k, k)] += tau * tau;
            }
            let chol = g
                .cholesky()
                .ok_or_else(|| FradError::Precondition("hybrid covariance not positive definite".into()))?;
            let v = chol.solve(&(-delta));
            Ok(ScoreTarget {
                target: v.as_slice().to_vec(),
                covariance: Covariance::Hybrid,
                pinv_tol: None,
            })
        }
    }
}

/// Infinitesimal rigid motions at `x`: three translations, then rotations
/// about x, y and z through the centroid. Columns are not normalized.
pub fn rigid_modes(x: &Conformation) -> DMatrix<f64> {
    let n = x.n_atoms();
    let pts = x.points();
    let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n.max(1) as f64;
    let mut m = DMatrix::zeros(3 * n, 6);
    for (a, p) in pts.iter().enumerate() {
        let r = p - centroid;
        for k in 0..3 {
            m[(3 * a + k, k)] = 1.0;
            let axis = Vector3::ith(k, 1.0);
            let v = axis.cross(&r);
            for j in 0..3 {
                m[(3 * a + j, 3 + k)] = v[j];
            }
        }
    }
    m
}

/// Hybrid score with unbounded variance along the columns of `free`.
///
/// This is the limit of `-(Γ₂ + s F Fᵀ)⁻¹ δ` as `s → ∞`, i.e.
/// `-Q (Qᵀ Γ₂ Q)⁻¹ Qᵀ δ` with `Q` an orthonormal basis of the complement of
/// `span(F)`. Directions with zero stiffness (rigid motions, barrier-free
/// torsions) then carry no score.
pub fn score_target_marginal(
    x_query: &Conformation,
    x_ref: &Conformation,
    c: &DMatrix<f64>,
    sigma_sq: &[f64],
    tau: f64,
    free: &DMatrix<f64>,
) -> Result<ScoreTarget> {
    x_query.check_atoms(x_ref.n_atoms())?;
    if !(tau > 0.0) {
        return Err(FradError::Precondition(format!("tau must be > 0, got {tau}")));
    }
    let dim = x_ref.as_slice().len();
    if free.nrows() != dim {
        return Err(FradError::Dimension {
            expected: dim,
            got: free.nrows(),
        });
    }
    let delta = DVector::from_vec(x_query.displacement_from(x_ref));
    let q = complement_basis(free);
    let mut g = can_covariance(c, sigma_sq)?;
    for k in 0..dim {
        g[(k, k)] += tau * tau;
    }
    let reduced = q.transpose() * &g * &q;
    let chol = reduced
        .cholesky()
        .ok_or_else(|| FradError::Precondition("reduced covariance not positive definite".into()))?;
    let v = &q * chol.solve(&(q.transpose() * -delta));
    Ok(ScoreTarget {
        target: v.as_slice().to_vec(),
        covariance: Covariance::Hybrid,
        pinv_tol: None,
    })
}

/// Orthonormal basis of the orthogonal complement of the column span of `f`.
fn complement_basis(f: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = f.nrows();
    if f.ncols() == 0 {
        return DMatrix::identity(dim, dim);
    }
    // Eigenvectors of F Fᵀ with (numerically) zero eigenvalue span the
    // complement.
    let eig = (f * f.transpose()).symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..dim).filter(|&k| eig.eigenvalues[k] <= 1e-10 * lmax).collect();
    DMatrix::from_fn(dim, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ForceAccuracy {
    /// Pearson correlation over all samples flattened together.
    pub rho: f64,
    /// Mean per-sample cosine similarity (samples with a zero vector are
    /// skipped).
    pub cosine_mean: f64,
}

/// Agreement of estimated force directions with oracle forces over a batch.
pub fn force_accuracy(estimates: &[Vec<f64>], oracle: &[Vec<f64>]) -> Result<ForceAccuracy> {
    if estimates.len() != oracle.len() {
        return Err(FradError::Dimension {
            expected: oracle.len(),
            got: estimates.len(),
        });
    }
    let flat_e: Vec<f64> = estimates.iter().flatten().copied().collect();
    let flat_o: Vec<f64> = oracle.iter().flatten().copied().collect();
    let rho = metrics::pearson(&flat_e, &flat_o)?;
    let cos: Vec<f64> = estimates
        .iter()
        .zip(oracle)
        .filter_map(|(e, o)| metrics::cosine(e, o).ok())
        .collect();
    let cosine_mean = if cos.is_empty() {
        f64::NAN
    } else {
        cos.iter().sum::<f64>() / cos.len() as f64
    };
    Ok(ForceAccuracy { rho, cosine_mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;
    use crate::geometry::noise::NoiseSpec;
    use crate::rng::FradRng;

    fn fd_jacobian(ic: &InternalCoords, x: &Conformation, kind: NoiseKind, h: f64) -> DMatrix<f64> {
        let m = noise_dim(kind, ic);
        let mut j = DMatrix::zeros(3 * x.n_atoms(), m);
        for col in 0..m {
            let mut d = vec![0.0; m];
            d[col] = h;
            let plus = displacement(ic, x, kind, &d).unwrap();
            d[col] = -h;
            let minus = displacement(ic, x, kind, &d).unwrap();
            for r in 0..j.nrows() {
                j[(r, col)] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn empty_map_without_rotations() {
        let (mol, x) = benzene();
        let lin = analytic_c_rn(&mol, &x).unwrap();
        assert_eq!((lin.c.nrows(), lin.c.ncols()), (36, 0));
    }

    #[test]
    fn analytic_matches_finite_differences() {
        for (mol, x) in [butane(), aspirin_heavy(), propyl_cyclohexane()] {
            let ic = internal_coords(&mol, &x).unwrap();
            for kind in [NoiseKind::Rn, NoiseKind::Vrn] {
                let lin = analytic_c(&ic, &x, kind).unwrap();
                let fd = fd_jacobian(&ic, &x, kind, 1e-5);
                let rel = (&lin.c - &fd).norm() / fd.norm();
                assert!(rel < 1e-6, "{kind:?}: {rel}");
            }
        }
    }

    #[test]
    fn single_atom_column_norm_is_radius() {
        let (mol, x) = butane();
        let ic = internal_coords(&mol, &x).unwrap();
        let lin = analytic_c(&ic, &x, NoiseKind::Rn).unwrap();
        for j in 0..ic.m() {
            let radii = torsion_radii_sq(&ic, &x, j).unwrap();
            for (a, r2) in radii {
                let block = lin.c.fixed_view::<3, 1>(3 * a, j).norm();
                assert!((block * block - r2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triangular_and_full_rank() {
        for (mol, x) in [butane(), aspirin_heavy(), propyl_cyclohexane()] {
            let lin = analytic_c_rn(&mol, &x).unwrap();
            assert_eq!(lin.max_upper_block(), 0.0);
            assert_eq!(lin.rank(1e-9), lin.m());
        }
    }

    #[test]
    fn lstsq_matches_analytic() {
        let (mol, x) = butane();
        let ic = internal_coords(&mol, &x).unwrap();
        let exact = analytic_c(&ic, &x, NoiseKind::Rn).unwrap();
        let est = lstsq_c(&ic, &x, NoiseKind::Rn, 1e-3, 200, &mut FradRng::new(1, 0)).unwrap();
        assert!((&est.c - &exact.c).norm() / exact.c.norm() < 1e-4);
        assert!(est.max_upper_block() < 1e-6);
        assert!(lstsq_c(&ic, &x, NoiseKind::Rn, 1e-3, 2, &mut FradRng::new(1, 0)).is_err());
    }

    #[test]
    fn identity_of_single_rotation() {
        let (mol, x) = butane();
        let m = mol.rotatable().len();
        for p in [0.05, 0.1, 0.3, 1.0] {
            for j in 0..m {
                let mut d = vec![0.0; m];
                d[j] = p;
                let rep = linearization_bound_check(&mol, &x, &d).unwrap();
                assert!((rep.residual - rep.bound).abs() < 1e-10 * rep.bound.max(1.0));
            }
        }
        let zero = linearization_bound_check(&mol, &x, &vec![0.0; m]).unwrap();
        assert_eq!((zero.residual, zero.bound), (0.0, 0.0));
    }

    #[test]
    fn c_error_cases() {
        assert!(c_error(&[(vec![0.0; 3], vec![0.0; 3])]).is_err());
        assert_eq!(c_error(&[(vec![1.0, 2.0], vec![1.0, 2.0])]).unwrap(), 0.0);
        let (mol, x) = butane();
        let ic = internal_coords(&mol, &x).unwrap();
        let lin = analytic_c(&ic, &x, NoiseKind::Rn).unwrap();
        let mut rng = FradRng::new(2, 0);
        let mut errs = Vec::new();
        for sigma in [1e-4, 1e-3, 1.0, 20.0] {
            let batch: Vec<_> = (0..64)
                .map(|_| {
                    let d: Vec<f64> = (0..ic.m())
                        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let dx = displacement(&ic, &x, NoiseKind::Rn, &d).unwrap();
                    (d, dx)
                })
                .collect();
            errs.push(c_error_of(&lin, &batch).unwrap());
        }
        // The leading residual is the centripetal term, so the ratio
        // vanishes linearly in sigma.
        assert!(errs[0] < 1e-3);
        let slope = errs[1] / errs[0];
        assert!(slope > 5.0 && slope < 20.0, "{errs:?}");
        assert!(errs[3] > errs[2]);
    }

    #[test]
    fn score_at_mean_is_zero() {
        let (mol, x) = butane();
        let lin = analytic_c_rn(&mol, &x).unwrap();
        let s = vec![4.0; lin.m()];
        for kind in [TargetKind::Cgn, TargetKind::Can, TargetKind::Hybrid] {
            let t = score_target(kind, &x, &x, &lin.c, &s, 0.04).unwrap();
            assert!(t.target.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn cgn_score_closed_form() {
        let (_, x) = methane();
        let mut y = x.clone();
        y.as_mut_slice()[4] += 0.01;
        let t = score_target(TargetKind::Cgn, &y, &x, &DMatrix::zeros(15, 0), &[], 0.04).unwrap();
        assert!((t.target[4] + 0.01 / 0.0016).abs() < 1e-9);
    }

    #[test]
    fn hybrid_matches_eigen_oracle() {
        let (mol, x) = butane();
        let lin = analytic_c_rn(&mol, &x).unwrap();
        let s = vec![4.0; lin.m()];
        let mut rng = FradRng::new(5, 0);
        let rec = crate::geometry::noise::perturb(&mol, &x, &NoiseSpec::rn(0.3, 0.04), &mut rng).unwrap();
        let t = score_target(TargetKind::Hybrid, &rec.x_fin, &x, &lin.c, &s, 0.04).unwrap();
        let mut g = can_covariance(&lin.c, &s).unwrap();
        for k in 0..g.nrows() {
            g[(k, k)] += 0.0016;
        }
        let eig = g.symmetric_eigen();
        let d = DVector::from_vec(rec.x_fin.displacement_from(&x));
        let proj = eig.eigenvectors.transpose() * &d;
        let scaled = DVector::from_iterator(proj.len(), proj.iter().zip(eig.eigenvalues.iter()).map(|(p, l)| -p / l));
        let oracle = &eig.eigenvectors * scaled;
        let err = (DVector::from_vec(t.target) - &oracle).norm() / oracle.norm();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn force_accuracy_signs() {
        let a = vec![vec![1.0, -2.0, 0.5], vec![0.1, 0.2, 0.3]];
        let neg: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        assert!((force_accuracy(&a, &a).unwrap().rho - 1.0).abs() < 1e-15);
        let r = force_accuracy(&neg, &a).unwrap();
        assert!((r.rho + 1.0).abs() < 1e-15 && (r.cosine_mean + 1.0).abs() < 1e-15);
    }

    #[test]
    fn matched_field_hessian_is_marginal_hybrid_precision() {
        use crate::pes::{boltzmann_score, ForceField};
        let mut rng = FradRng::new(5, 0);
        for n in [5, 8] {
            let (mol, x) = random_chain(n, &mut rng);
            let ic = internal_coords(&mol, &x).unwrap();
            let mut spec = NoiseSpec::vrn(0.01);
            spec.sigma_r = 0.03;
            spec.sigma_theta = 0.05;
            spec.sigma_phi = 0.07;
            spec.sigma_psi = 0.1;
            let ff = ForceField::hybrid_matched(&ic, &x, &spec, 1.0).unwrap();
            let lin = analytic_c(&ic, &x, NoiseKind::Vrn).unwrap();
            let var = spec.variances(&ic);
            let free = rigid_modes(&x);
            let h = 1e-6;
            let dir: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = Conformation::new(x.as_slice().iter().zip(&dir).map(|(a, d)| a + h * d).collect()).unwrap();
            let t = score_target_marginal(&q, &x, &lin.c, &var, spec.tau, &free).unwrap();
            let s = boltzmann_score(&ff, &q).unwrap();
            let num: f64 = t.target.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = t.target.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den < 1e-4, "n={n}: rel {}", num / den);
        }
    }
}
