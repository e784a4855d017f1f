//! Internal coordinates and rigid subtree moves.
//!
//! Torsions follow the IUPAC sign convention: looking down `b -> c`, a
//! right-handed rotation of the `c` side about that axis increases the
//! measured angle `a-b-c-d`.

pub mod noise;

use nalgebra::Vector3;

use crate::error::{FradError, Result};
use crate::molgraph::{first_other_neighbor, split_subtree, Conformation, Molecule, RotatableBond};

/// Hinges within this distance (in `|sin θ|`) of collinear are degenerate.
pub const COLLINEAR_TOL: f64 = 1e-8;

pub fn bond_angle(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    let u = a - b;
    let v = c - b;
    // atan2 form keeps full precision near 0 and π
    u.cross(&v).norm().atan2(u.dot(&v))
}

/// Signed torsion `a-b-c-d` in `[-π, π]`.
pub fn dihedral(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    let b1 = b - a;
    let b2 = c - b;
    let b3 = d - c;
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    let y = b2.norm() * b1.dot(&n2);
    let x = n1.dot(&n2);
    y.atan2(x)
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut y = (x + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if y >= std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// Places a fourth point `d` with `|cd| = r`, angle `b-c-d = theta` and
/// torsion `a-b-c-d = phi`.
pub fn place_atom(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
    r: f64,
    theta: f64,
    phi: f64,
) -> Vector3<f64> {
    let bc = (c - b).normalize();
    let n = (b - a).cross(&bc).normalize();
    let m = n.cross(&bc);
    let local = Vector3::new(-r * theta.cos(), r * theta.sin() * phi.cos(), r * theta.sin() * phi.sin());
    c + bc * local.x + m * local.y + n * local.z
}

/// Rodrigues rotation of `p` about the line through `origin` with unit
/// direction `axis`.
pub fn rotate_point(p: &Vector3<f64>, origin: &Vector3<f64>, axis: &Vector3<f64>, angle: f64) -> Vector3<f64> {
    let v = p - origin;
    let (s, c) = angle.sin_cos();
    origin + v * c + axis.cross(&v) * s + axis * (axis.dot(&v) * (1.0 - c))
}

fn unit_axis(conf: &Conformation, b: usize, c: usize) -> Result<Vector3<f64>> {
    let d = conf.pos(c) - conf.pos(b);
    let n = d.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(FradError::ZeroAxis { b, c });
    }
    Ok(d / n)
}

/// Rotates `moving` (which must not contain `b`) about the axis `b -> c`.
/// `c` itself lies on the axis and is left untouched.
pub(crate) fn rotate_subtree(
    conf: &mut Conformation,
    b: usize,
    c: usize,
    moving: &[usize],
    angle: f64,
) -> Result<()> {
    let u = unit_axis(conf, b, c)?;
    if angle == 0.0 {
        return Ok(());
    }
    let origin = conf.pos(b);
    for &a in moving {
        if a == c {
            continue;
        }
        let p = rotate_point(&conf.pos(a), &origin, &u, angle);
        conf.set_pos(a, p);
    }
    Ok(())
}

/// Rotates the moving side of `bond` by `delta` radians about its axis.
pub fn rotate_torsion(conf: &Conformation, bond: &RotatableBond, delta: f64) -> Result<Conformation> {
    let mut out = conf.clone();
    rotate_subtree(&mut out, bond.axis.0, bond.axis.1, &bond.moving_set, delta)?;
    Ok(out)
}

/// A bond length `b-c`; perturbing it translates `moving` along `b -> c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthCoord {
    pub bond: usize,
    pub b: usize,
    pub c: usize,
    pub moving: Vec<usize>,
}

/// The angle `fixed_arm - hinge - moving_arm`; perturbing it rotates
/// `moving` about the normal of the angle plane through the hinge.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleCoord {
    pub hinge: usize,
    pub fixed_arm: usize,
    pub moving_arm: usize,
    pub moving: Vec<usize>,
}

/// The torsion `a-b-c-d`; perturbing it rotates `moving` about `b -> c`.
#[derive(Clone, Debug, PartialEq)]
pub struct TorsionCoord {
    pub bond: usize,
    pub atoms: [usize; 4],
    pub moving: Vec<usize>,
}

impl TorsionCoord {
    fn from_rotatable(rb: &RotatableBond) -> Self {
        Self {
            bond: rb.bond,
            atoms: [rb.reference.0, rb.axis.0, rb.axis.1, rb.reference.1],
            moving: rb.moving_set.clone(),
        }
    }
}

/// Which internal coordinates carry noise, before any values are measured.
///
/// Ring-internal coordinates are excluded. At a hinge with more than two
/// eligible bonds only angles containing one designated edge appear, so the
/// noise stays independent and the total count never exceeds `3N`.
#[derive(Clone, Debug, PartialEq)]
pub struct InternalCoordSet {
    pub lengths: Vec<LengthCoord>,
    pub angles: Vec<AngleCoord>,
    pub fixed_torsions: Vec<TorsionCoord>,
    pub rotatable: Vec<TorsionCoord>,
}

impl InternalCoordSet {
    /// Deterministic selection: the designated edge at each hinge is the
    /// eligible bond with the lowest index.
    pub fn new(mol: &Molecule) -> Self {
        Self::with_edge_choice(mol, |edges| edges[0])
    }

    /// Selection with the designated edge drawn uniformly per hinge.
    pub fn randomized<R: rand::Rng + ?Sized>(mol: &Molecule, rng: &mut R) -> Self {
        Self::with_edge_choice(mol, |edges| edges[rng.random_range(0..edges.len())])
    }

    fn with_edge_choice(mol: &Molecule, mut pick: impl FnMut(&[usize]) -> usize) -> Self {
        let lengths = mol
            .bridges()
            .iter()
            .map(|br| LengthCoord {
                bond: br.bond,
                b: br.b,
                c: br.c,
                moving: split_subtree(mol, br.b, br.c).expect("bridge splits the graph"),
            })
            .collect();

        let mut angles = Vec::new();
        for hinge in atom_bfs_order(mol) {
            let eligible: Vec<usize> = mol
                .neighbors(hinge)
                .iter()
                .filter(|(_, k)| !mol.is_ring_bond(*k))
                .map(|&(_, k)| k)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            if eligible.len() < 2 {
                continue;
            }
            let designated = pick(&eligible);
            let d_atom = mol.bonds()[designated].other(hinge);
            let d_side = split_subtree(mol, hinge, d_atom).expect("non-ring bond");
            let mut others: Vec<usize> = eligible
                .iter()
                .filter(|&&k| k != designated)
                .map(|&k| mol.bonds()[k].other(hinge))
                .collect();
            others.sort_unstable();
            for x in others {
                let x_side = split_subtree(mol, hinge, x).expect("non-ring bond");
                let coord = if x_side.binary_search(&0).is_ok() {
                    AngleCoord {
                        hinge,
                        fixed_arm: x,
                        moving_arm: d_atom,
                        moving: d_side.clone(),
                    }
                } else {
                    AngleCoord {
                        hinge,
                        fixed_arm: d_atom,
                        moving_arm: x,
                        moving: x_side,
                    }
                };
                angles.push(coord);
            }
        }

        let fixed_torsions = mol
            .bridges()
            .iter()
            .filter(|br| {
                mol.bonds()[br.bond].order > 1 && mol.degree(br.b) >= 2 && mol.degree(br.c) >= 2
            })
            .map(|br| TorsionCoord {
                bond: br.bond,
                atoms: [
                    first_other_neighbor(mol, br.b, br.c),
                    br.b,
                    br.c,
                    first_other_neighbor(mol, br.c, br.b),
                ],
                moving: split_subtree(mol, br.b, br.c).expect("bridge splits the graph"),
            })
            .collect();

        let rotatable = mol.rotatable().iter().map(TorsionCoord::from_rotatable).collect();

        Self {
            lengths,
            angles,
            fixed_torsions,
            rotatable,
        }
    }

    pub fn total(&self) -> usize {
        self.lengths.len() + self.angles.len() + self.fixed_torsions.len() + self.rotatable.len()
    }
}

/// Atom visiting order of a breadth-first search from atom 0, neighbors
/// taken in ascending index.
pub fn atom_bfs_order(mol: &Molecule) -> Vec<usize> {
    let mut seen = vec![false; mol.n_atoms()];
    let mut order = Vec::with_capacity(mol.n_atoms());
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(a) = queue.pop_front() {
        order.push(a);
        for &(nbr, _) in mol.neighbors(a) {
            if !seen[nbr] {
                seen[nbr] = true;
                queue.push_back(nbr);
            }
        }
    }
    order
}

/// Measured internal coordinates of one conformation.
#[derive(Clone, Debug)]
pub struct InternalCoords {
    pub set: InternalCoordSet,
    /// Bond lengths, one per `set.lengths`.
    pub r: Vec<f64>,
    /// Angles in `[0, π]`, one per `set.angles`.
    pub theta: Vec<f64>,
    /// Non-rotatable torsions in `[-π, π)`.
    pub phi: Vec<f64>,
    /// Rotatable torsions in `[-π, π)`.
    pub psi: Vec<f64>,
    /// Angles dropped from `set` because they were within
    /// [`COLLINEAR_TOL`] of 0 or π.
    pub skipped_degenerate: usize,
}

impl InternalCoords {
    pub fn m1(&self) -> usize {
        self.r.len()
    }
    pub fn m2(&self) -> usize {
        self.theta.len()
    }
    pub fn m3(&self) -> usize {
        self.phi.len()
    }
    pub fn m(&self) -> usize {
        self.psi.len()
    }
}

pub fn internal_coords(mol: &Molecule, conf: &Conformation) -> Result<InternalCoords> {
    measure(InternalCoordSet::new(mol), conf)
}

/// Measures a selection on `conf`, dropping degenerate angles.
pub fn measure(mut set: InternalCoordSet, conf: &Conformation) -> Result<InternalCoords> {
    let r = set.lengths.iter().map(|l| conf.distance(l.b, l.c)).collect();

    let before = set.angles.len();
    set.angles.retain(|a| {
        let th = bond_angle(&conf.pos(a.fixed_arm), &conf.pos(a.hinge), &conf.pos(a.moving_arm));
        th.sin().abs() > COLLINEAR_TOL
    });
    let skipped_degenerate = before - set.angles.len();
    if skipped_degenerate > 0 {
        log::warn!("skipped {skipped_degenerate} near-linear angle(s)");
    }
    let theta = set
        .angles
        .iter()
        .map(|a| bond_angle(&conf.pos(a.fixed_arm), &conf.pos(a.hinge), &conf.pos(a.moving_arm)))
        .collect();

    let phi = set
        .fixed_torsions
        .iter()
        .map(|t| measure_torsion(conf, t.atoms))
        .collect::<Result<Vec<_>>>()?;
    let psi = set
        .rotatable
        .iter()
        .map(|t| measure_torsion(conf, t.atoms))
        .collect::<Result<Vec<_>>>()?;

    Ok(InternalCoords {
        set,
        r,
        theta,
        phi,
        psi,
        skipped_degenerate,
    })
}

/// Torsion `a-b-c-d`, failing when either hinge is collinear.
pub fn measure_torsion(conf: &Conformation, atoms: [usize; 4]) -> Result<f64> {
    let [a, b, c, d] = atoms.map(|i| conf.pos(i));
    for (p, q, r) in [(&a, &b, &c), (&b, &c, &d)] {
        if bond_angle(p, q, r).sin().abs() <= COLLINEAR_TOL {
            return Err(FradError::DegenerateTorsion { atoms });
        }
    }
    Ok(wrap_angle(dihedral(&a, &b, &c, &d)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;
    use std::f64::consts::PI;

    #[test]
    fn place_atom_reproduces_its_internal_coordinates() {
        let a = Vector3::new(0.3, -1.2, 0.4);
        let b = Vector3::new(0.0, 0.0, 0.0);
        let c = Vector3::new(1.5, 0.1, -0.2);
        for &phi in &[-2.5, -0.3, 0.0, 1.0, 3.0] {
            let d = place_atom(&a, &b, &c, 1.1, 1.9, phi);
            assert!(((d - c).norm() - 1.1).abs() < 1e-12);
            assert!((bond_angle(&b, &c, &d) - 1.9).abs() < 1e-12);
            assert!((wrap_angle(dihedral(&a, &b, &c, &d) - phi)).abs() < 1e-12);
        }
    }

    #[test]
    fn right_handed_rotation_increases_torsion() {
        let a = Vector3::new(1.0, 0.0, 0.0);
        let b = Vector3::zeros();
        let c = Vector3::new(0.0, 0.0, 1.0);
        let d = Vector3::new(1.0, 0.0, 1.0);
        let d2 = rotate_point(&d, &b, &Vector3::z(), 0.5);
        assert!((dihedral(&a, &b, &c, &d2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((wrap_angle(-0.2) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn methane_is_tetrahedral() {
        let (mol, conf) = methane();
        let ic = internal_coords(&mol, &conf).unwrap();
        assert_eq!(ic.m1(), 4);
        for r in &ic.r {
            assert!((r - ic.r[0]).abs() < 1e-12);
        }
        // designated edge plus three others
        assert_eq!(ic.m2(), 3);
        for th in &ic.theta {
            assert!((th - (-1.0f64 / 3.0).acos()).abs() < 1e-9);
        }
    }

    #[test]
    fn trans_butane_backbone_is_pi() {
        let (mol, conf) = butane();
        let ic = internal_coords(&mol, &conf).unwrap();
        let central = mol.rotatable().iter().position(|r| r.axis == (1, 2)).unwrap();
        assert!((ic.psi[central].abs() - PI).abs() < 1e-9);
    }

    #[test]
    fn linear_chain_is_degenerate() {
        let (mol, conf) = linear_chain();
        assert!(matches!(
            internal_coords(&mol, &conf),
            Err(FradError::DegenerateTorsion { atoms: [0, 1, 2, 3] })
        ));
    }

    #[test]
    fn selection_respects_rings_and_dof_bound() {
        for (mol, conf) in [butane(), benzene(), aspirin_heavy(), propyl_cyclohexane(), methane()] {
            let ic = internal_coords(&mol, &conf).unwrap();
            assert!(ic.set.total() <= 3 * mol.n_atoms());
            for l in &ic.set.lengths {
                assert!(!mol.is_ring_bond(l.bond));
            }
            for a in &ic.set.angles {
                for arm in [a.fixed_arm, a.moving_arm] {
                    let k = mol.bond_between(a.hinge, arm).unwrap();
                    assert!(!mol.is_ring_bond(k));
                }
                assert!(mol.degree(a.hinge) >= 2);
                assert!(!a.moving.contains(&a.hinge));
                assert!(!a.moving.contains(&a.fixed_arm));
            }
            for t in ic.set.fixed_torsions.iter().chain(&ic.set.rotatable) {
                assert!(!mol.is_ring_bond(t.bond));
            }
        }
    }

    #[test]
    fn randomized_selection_keeps_counts() {
        let (mol, _) = propyl_cyclohexane();
        let base = InternalCoordSet::new(&mol);
        let mut rng = crate::rng::FradRng::new(1, 0);
        for _ in 0..10 {
            let r = InternalCoordSet::randomized(&mol, &mut rng);
            assert_eq!(r.angles.len(), base.angles.len());
            assert_eq!(r.lengths, base.lengths);
        }
    }
}
