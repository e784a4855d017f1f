//! Chemical-aware noise (rotation noise and vibration-rotation noise) and
//! coordinate Gaussian noise.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{bond_angle, measure, rotate_point, rotate_subtree, InternalCoordSet, InternalCoords};
use crate::error::{FradError, Result};
use crate::molgraph::{Conformation, Molecule};
use crate::rng::FradRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Gaussian noise on rotatable torsions only.
    Rn,
    /// Gaussian noise on bond lengths, angles and all torsions.
    Vrn,
    /// No chemical-aware stage; coordinate noise only.
    Cgn,
}

impl std::str::FromStr for NoiseKind {
    type Err = FradError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rn" => Ok(Self::Rn),
            "vrn" => Ok(Self::Vrn),
            "cgn" | "coord" | "none" => Ok(Self::Cgn),
            other => Err(FradError::Config(format!("unknown noise kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rn => "rn",
            Self::Vrn => "vrn",
            Self::Cgn => "cgn",
        })
    }
}

/// Noise hyperparameters. Angles in radians, lengths in desk units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Rotatable-torsion std for RN.
    pub sigma: f64,
    pub sigma_r: f64,
    pub sigma_theta: f64,
    pub sigma_phi: f64,
    pub sigma_psi: f64,
    /// Coordinate Gaussian noise std.
    pub tau: f64,
}

impl Default for NoiseSpec {
    /// Pre-training defaults: RN with σ = 2, τ = 0.04.
    fn default() -> Self {
        Self::rn(2.0, 0.04)
    }
}

impl NoiseSpec {
    pub fn rn(sigma: f64, tau: f64) -> Self {
        Self {
            kind: NoiseKind::Rn,
            sigma,
            sigma_r: 0.058,
            sigma_theta: 0.129,
            sigma_phi: 0.18,
            sigma_psi: 1.0,
            tau,
        }
    }

    /// VRN with the pre-training stds (0.058, 0.129, 0.18, 1).
    pub fn vrn(tau: f64) -> Self {
        Self {
            kind: NoiseKind::Vrn,
            ..Self::rn(2.0, tau)
        }
    }

    pub fn cgn(tau: f64) -> Self {
        Self {
            kind: NoiseKind::Cgn,
            sigma: 0.0,
            ..Self::rn(0.0, tau)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma,
            self.sigma_r,
            self.sigma_theta,
            self.sigma_phi,
            self.sigma_psi,
            self.tau,
        ];
        if all.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(FradError::Precondition(format!(
                "noise stds must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// Per-coordinate variances of the chemical-aware stage in the column
    /// order of [`InternalDelta::flatten`].
    pub fn variances(&self, ic: &InternalCoords) -> Vec<f64> {
        match self.kind {
            NoiseKind::Rn => vec![self.sigma * self.sigma; ic.m()],
            NoiseKind::Vrn => {
                let mut v = Vec::with_capacity(ic.set.total());
                v.extend(std::iter::repeat_n(self.sigma_r.powi(2), ic.m1()));
                v.extend(std::iter::repeat_n(self.sigma_theta.powi(2), ic.m2()));
                v.extend(std::iter::repeat_n(self.sigma_phi.powi(2), ic.m3()));
                v.extend(std::iter::repeat_n(self.sigma_psi.powi(2), ic.m()));
                v
            }
            NoiseKind::Cgn => Vec::new(),
        }
    }
}

/// Internal-coordinate noise drawn for one sample. Blocks a kind does not
/// perturb are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InternalDelta {
    pub dr: Vec<f64>,
    pub dtheta: Vec<f64>,
    pub dphi: Vec<f64>,
    pub dpsi: Vec<f64>,
}

impl InternalDelta {
    pub fn rotations(dpsi: Vec<f64>) -> Self {
        Self {
            dpsi,
            ..Self::default()
        }
    }

    /// Columns in application order: lengths, angles, fixed torsions,
    /// rotatable torsions.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.dr, &self.dtheta, &self.dphi, &self.dpsi]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten) for a layout of `kind` on `ic`.
    pub fn unflatten(kind: NoiseKind, ic: &InternalCoords, flat: &[f64]) -> Result<Self> {
        let expected = match kind {
            NoiseKind::Rn => ic.m(),
            NoiseKind::Vrn => ic.set.total(),
            NoiseKind::Cgn => 0,
        };
        if flat.len() != expected {
            return Err(FradError::Dimension {
                expected,
                got: flat.len(),
            });
        }
        Ok(match kind {
            NoiseKind::Rn => Self::rotations(flat.to_vec()),
            NoiseKind::Cgn => Self::default(),
            NoiseKind::Vrn => {
                let (a, rest) = flat.split_at(ic.m1());
                let (b, rest) = rest.split_at(ic.m2());
                let (c, d) = rest.split_at(ic.m3());
                Self {
                    dr: a.to_vec(),
                    dtheta: b.to_vec(),
                    dphi: c.to_vec(),
                    dpsi: d.to_vec(),
                }
            }
        })
    }
}

/// Number of chemical-aware noise coordinates `M` for `kind`.
pub fn noise_dim(kind: NoiseKind, ic: &InternalCoords) -> usize {
    match kind {
        NoiseKind::Rn => ic.m(),
        NoiseKind::Vrn => ic.set.total(),
        NoiseKind::Cgn => 0,
    }
}

/// Applies internal-coordinate offsets to `x` sequentially: lengths, then
/// angles, fixed torsions and rotatable torsions, each block in
/// breadth-first order. Empty blocks are skipped; non-empty blocks must
/// match `ic` in length.
pub fn apply_internal(ic: &InternalCoords, x: &Conformation, delta: &InternalDelta) -> Result<Conformation> {
    let set = &ic.set;
    for (got, expected) in [
        (delta.dr.len(), set.lengths.len()),
        (delta.dtheta.len(), set.angles.len()),
        (delta.dphi.len(), set.fixed_torsions.len()),
        (delta.dpsi.len(), set.rotatable.len()),
    ] {
        if got != 0 && got != expected {
            return Err(FradError::Dimension { expected, got });
        }
    }
    let mut out = x.clone();

    for (l, &d) in set.lengths.iter().zip(&delta.dr) {
        if d == 0.0 {
            continue;
        }
        let axis = out.pos(l.c) - out.pos(l.b);
        let n = axis.norm();
        if !(n > 0.0) {
            return Err(FradError::DegenerateMove(format!("bond {}-{} has zero length", l.b, l.c)));
        }
        let shift = axis * (d / n);
        for &a in &l.moving {
            let p = out.pos(a) + shift;
            out.set_pos(a, p);
        }
    }

    for (ang, &d) in set.angles.iter().zip(&delta.dtheta) {
        if d == 0.0 {
            continue;
        }
        let h = out.pos(ang.hinge);
        let f = out.pos(ang.fixed_arm) - h;
        let m = out.pos(ang.moving_arm) - h;
        let normal = f.cross(&m);
        let nn = normal.norm();
        let th = bond_angle(&out.pos(ang.fixed_arm), &h, &out.pos(ang.moving_arm));
        if th.sin().abs() <= super::COLLINEAR_TOL || !(nn > 0.0) {
            return Err(FradError::DegenerateMove(format!(
                "angle {}-{}-{} became collinear",
                ang.fixed_arm, ang.hinge, ang.moving_arm
            )));
        }
        let u: Vector3<f64> = normal / nn;
        for &a in &ang.moving {
            let p = rotate_point(&out.pos(a), &h, &u, d);
            out.set_pos(a, p);
        }
    }

    for (t, &d) in set
        .fixed_torsions
        .iter()
        .zip(&delta.dphi)
        .chain(set.rotatable.iter().zip(&delta.dpsi))
    {
        let [_, b, c, _] = t.atoms;
        rotate_subtree(&mut out, b, c, &t.moving, d)?;
    }
    Ok(out)
}

/// Result of the chemical-aware stage.
#[derive(Clone, Debug)]
pub struct CanDraw {
    pub x_med: Conformation,
    pub delta: InternalDelta,
    pub coords: InternalCoords,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Draws and applies the chemical-aware noise of `spec` to `x_eq`.
pub fn apply_can<R: Rng + ?Sized>(mol: &Molecule, x_eq: &Conformation, spec: &NoiseSpec, rng: &mut R) -> Result<CanDraw> {
    let coords = measure(InternalCoordSet::new(mol), x_eq)?;
    apply_can_with(coords, x_eq, spec, rng)
}

/// As [`apply_can`] with a caller-chosen coordinate selection.
pub fn apply_can_with<R: Rng + ?Sized>(
    coords: InternalCoords,
    x_eq: &Conformation,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<CanDraw> {
    spec.validate()?;
    let delta = match spec.kind {
        NoiseKind::Cgn => InternalDelta::default(),
        NoiseKind::Rn => InternalDelta::rotations(normal_vec(rng, coords.m(), spec.sigma)),
        NoiseKind::Vrn => InternalDelta {
            dr: normal_vec(rng, coords.m1(), spec.sigma_r),
            dtheta: normal_vec(rng, coords.m2(), spec.sigma_theta),
            dphi: normal_vec(rng, coords.m3(), spec.sigma_phi),
            dpsi: normal_vec(rng, coords.m(), spec.sigma_psi),
        },
    };
    let x_med = apply_internal(&coords, x_eq, &delta)?;
    Ok(CanDraw {
        x_med,
        delta,
        coords,
    })
}

/// Adds i.i.d. `N(0, tau²)` noise to every coordinate.
pub fn apply_cgn<R: Rng + ?Sized>(x_med: &Conformation, tau: f64, rng: &mut R) -> Result<(Conformation, Vec<f64>)> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(FradError::Precondition(format!("tau must be >= 0, got {tau}")));
    }
    let delta = normal_vec(rng, x_med.as_slice().len(), tau);
    let fin: Vec<f64> = x_med.as_slice().iter().zip(&delta).map(|(x, d)| x + d).collect();
    Ok((Conformation::new(fin)?, delta))
}

/// One complete hybrid-noise draw.
#[derive(Clone, Debug, Serialize)]
pub struct PerturbationRecord {
    pub x_eq: Conformation,
    pub x_med: Conformation,
    pub x_fin: Conformation,
    pub delta: InternalDelta,
    pub delta_cgn: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
}

/// Chemical-aware noise followed by coordinate noise.
pub fn perturb(mol: &Molecule, x_eq: &Conformation, spec: &NoiseSpec, rng: &mut FradRng) -> Result<PerturbationRecord> {
    x_eq.check_atoms(mol.n_atoms())?;
    let can = apply_can(mol, x_eq, spec, rng)?;
    let (x_fin, delta_cgn) = apply_cgn(&can.x_med, spec.tau, rng)?;
    Ok(PerturbationRecord {
        x_eq: x_eq.clone(),
        x_med: can.x_med,
        x_fin,
        delta: can.delta,
        delta_cgn,
        seed: rng.seed(),
        stream: rng.stream(),
    })
}

/// Mean over atoms of the Euclidean displacement between two conformations.
pub fn perturbation_scale(x_eq: &Conformation, x_fin: &Conformation) -> Result<f64> {
    x_fin.check_atoms(x_eq.n_atoms())?;
    let n = x_eq.n_atoms();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n).map(|a| (x_fin.pos(a) - x_eq.pos(a)).norm()).sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;
    use crate::geometry::internal_coords;

    #[test]
    fn zero_sigma_is_identity() {
        let (mol, x) = aspirin_heavy();
        let mut rng = FradRng::new(3, 0);
        let spec = NoiseSpec {
            sigma_r: 0.0,
            sigma_theta: 0.0,
            sigma_phi: 0.0,
            sigma_psi: 0.0,
            ..NoiseSpec::vrn(0.0)
        };
        let draw = apply_can(&mol, &x, &spec, &mut rng).unwrap();
        assert_eq!(draw.x_med, x);
        let draw = apply_can(&mol, &x, &NoiseSpec::rn(0.0, 0.0), &mut rng).unwrap();
        assert_eq!(draw.x_med, x);
    }

    #[test]
    fn no_rotatable_bonds_means_no_motion() {
        let (mol, x) = benzene();
        let mut rng = FradRng::new(3, 0);
        let draw = apply_can(&mol, &x, &NoiseSpec::rn(2.0, 0.04), &mut rng).unwrap();
        assert!(draw.delta.dpsi.is_empty());
        assert_eq!(draw.x_med, x);
    }

    #[test]
    fn cgn_zero_and_determinism() {
        let (_, x) = butane();
        let mut rng = FradRng::new(11, 2);
        let (fin, d) = apply_cgn(&x, 0.0, &mut rng).unwrap();
        assert_eq!(fin, x);
        assert!(d.iter().all(|v| *v == 0.0));
        let a = apply_cgn(&x, 0.04, &mut FradRng::new(5, 1)).unwrap();
        let b = apply_cgn(&x, 0.04, &mut FradRng::new(5, 1)).unwrap();
        assert_eq!(a.1, b.1);
        for (f, (m, d)) in a.0.as_slice().iter().zip(x.as_slice().iter().zip(&a.1)) {
            assert_eq!(*f, m + d);
        }
        assert!(apply_cgn(&x, -1.0, &mut rng).is_err());
    }

    #[test]
    fn record_is_consistent() {
        let (mol, x) = butane();
        let mut rng = FradRng::new(9, 4);
        let rec = perturb(&mol, &x, &NoiseSpec::default(), &mut rng).unwrap();
        assert_eq!(rec.delta.dpsi.len(), mol.rotatable().len());
        for ((f, m), d) in rec.x_fin.as_slice().iter().zip(rec.x_med.as_slice()).zip(&rec.delta_cgn) {
            assert_eq!(*f, m + d);
        }
        assert_eq!((rec.seed, rec.stream), (9, 4));
    }

    #[test]
    fn scale_examples() {
        let x = Conformation::zeros(5);
        assert_eq!(perturbation_scale(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        y.set_pos(2, Vector3::new(3.0, 4.0, 0.0));
        assert!((perturbation_scale(&x, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn large_rotations_dominate_coordinate_noise() {
        let (mol, x) = butane();
        let mut rng = FradRng::new(21, 0);
        let mut rn = 0.0;
        let mut cg = 0.0;
        for _ in 0..50 {
            rn += perturbation_scale(&x, &perturb(&mol, &x, &NoiseSpec::rn(20.0, 0.04), &mut rng).unwrap().x_fin).unwrap();
            cg += perturbation_scale(&x, &perturb(&mol, &x, &NoiseSpec::cgn(0.04), &mut rng).unwrap().x_fin).unwrap();
        }
        assert!(rn > cg);
    }

    #[test]
    fn length_move_changes_one_length_only() {
        let (mol, x) = propyl_cyclohexane();
        let ic = internal_coords(&mol, &x).unwrap();
        for k in 0..ic.m1() {
            let mut dr = vec![0.0; ic.m1()];
            dr[k] = 0.13;
            let delta = InternalDelta {
                dr,
                ..InternalDelta::default()
            };
            let y = apply_internal(&ic, &x, &delta).unwrap();
            let after = crate::geometry::measure(ic.set.clone(), &y).unwrap();
            for j in 0..ic.m1() {
                let expect = if j == k { ic.r[j] + 0.13 } else { ic.r[j] };
                assert!((after.r[j] - expect).abs() < 1e-9);
            }
            for (a, b) in after.theta.iter().zip(&ic.theta) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in after.psi.iter().zip(&ic.psi) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn angle_move_changes_its_angle() {
        let (mol, x) = butane();
        let ic = internal_coords(&mol, &x).unwrap();
        for k in 0..ic.m2() {
            let mut dtheta = vec![0.0; ic.m2()];
            dtheta[k] = 0.05;
            let delta = InternalDelta {
                dtheta,
                ..InternalDelta::default()
            };
            let y = apply_internal(&ic, &x, &delta).unwrap();
            let after = crate::geometry::measure(ic.set.clone(), &y).unwrap();
            assert!((after.theta[k] - ic.theta[k] - 0.05).abs() < 1e-9);
            for (a, b) in after.r.iter().zip(&ic.r) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("RN".parse::<NoiseKind>().unwrap(), NoiseKind::Rn);
        assert_eq!("coord".parse::<NoiseKind>().unwrap(), NoiseKind::Cgn);
        assert!("xyz".parse::<NoiseKind>().is_err());
        let mut s = NoiseSpec::default();
        s.tau = -0.1;
        assert!(s.validate().is_err());
    }
}
