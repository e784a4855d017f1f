//! Small hand-built molecules with explicit geometry, used by tests,
//! benchmarks and the CLI demo inputs.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;

use crate::geometry::place_atom;
use crate::molgraph::{Bond, Conformation, Element, Molecule};
use crate::rng::FradRng;

const TET: f64 = 1.910_633_236_249_018_6; // arccos(-1/3)
const CC: f64 = 1.53;
const CH: f64 = 1.09;

fn build(atoms: Vec<Element>, bonds: &[(usize, usize, u8)], pts: &[Vector3<f64>]) -> (Molecule, Conformation) {
    let bonds = bonds.iter().map(|&(i, j, o)| Bond::new(i, j, o)).collect();
    let mol = Molecule::new(atoms, bonds).expect("fixture topology");
    (mol, Conformation::from_points(pts))
}

pub fn methane() -> (Molecule, Conformation) {
    let s = CH / 3f64.sqrt();
    let pts = [
        Vector3::zeros(),
        Vector3::new(s, s, s),
        Vector3::new(s, -s, -s),
        Vector3::new(-s, s, -s),
        Vector3::new(-s, -s, s),
    ];
    let mut atoms = vec![Element::C];
    atoms.extend([Element::H; 4]);
    build(atoms, &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)], &pts)
}

/// Trans n-butane with explicit hydrogens. Carbons are atoms 0-3; H4-H6 sit
/// on C0, H7-H8 on C1, H9-H10 on C2, H11-H13 on C3.
pub fn butane() -> (Molecule, Conformation) {
    butane_with_torsion(PI)
}

pub fn butane_with_torsion(backbone: f64) -> (Molecule, Conformation) {
    let c0 = Vector3::zeros();
    let c1 = Vector3::new(CC, 0.0, 0.0);
    let c2 = place_atom(&Vector3::new(0.0, 1.0, 0.0), &c0, &c1, CC, TET, 0.0);
    let c3 = place_atom(&c0, &c1, &c2, CC, TET, backbone);
    let third = 2.0 * PI / 3.0;
    let mut pts = vec![c0, c1, c2, c3];
    for k in 0..3 {
        pts.push(place_atom(&c2, &c1, &c0, CH, TET, PI / 3.0 + k as f64 * third));
    }
    for s in [1.0, -1.0] {
        pts.push(place_atom(&c3, &c2, &c1, CH, TET, s * third));
    }
    for s in [1.0, -1.0] {
        pts.push(place_atom(&c0, &c1, &c2, CH, TET, s * third));
    }
    for k in 0..3 {
        pts.push(place_atom(&c1, &c2, &c3, CH, TET, PI / 3.0 + k as f64 * third));
    }
    let mut atoms = vec![Element::C; 4];
    atoms.extend([Element::H; 10]);
    let bonds = [
        (0, 1, 1),
        (1, 2, 1),
        (2, 3, 1),
        (0, 4, 1),
        (0, 5, 1),
        (0, 6, 1),
        (1, 7, 1),
        (1, 8, 1),
        (2, 9, 1),
        (2, 10, 1),
        (3, 11, 1),
        (3, 12, 1),
        (3, 13, 1),
    ];
    build(atoms, &bonds, &pts)
}

fn hexagon(radius: f64) -> Vec<Vector3<f64>> {
    (0..6)
        .map(|k| {
            let t = k as f64 * PI / 3.0;
            Vector3::new(radius * t.cos(), radius * t.sin(), 0.0)
        })
        .collect()
}

const RING_BONDS: [(usize, usize, u8); 6] = [(0, 1, 1), (1, 2, 2), (2, 3, 1), (3, 4, 2), (4, 5, 1), (5, 0, 2)];

pub fn benzene() -> (Molecule, Conformation) {
    let mut pts = hexagon(1.39);
    pts.extend(hexagon(1.39 + CH));
    let mut atoms = vec![Element::C; 6];
    atoms.extend([Element::H; 6]);
    let mut bonds = RING_BONDS.to_vec();
    bonds.extend((0..6).map(|k| (k, k + 6, 1)));
    build(atoms, &bonds, &pts)
}

/// Heavy-atom aspirin: ring C0-C5, carboxyl C6(=O7)O8 on C0, ester
/// O9-C10(=O11)-C12 on C1. Rotatable axes: C0-C6, C1-O9, O9-C10.
pub fn aspirin_heavy() -> (Molecule, Conformation) {
    let ring = hexagon(1.39);
    let radial = |k: usize, r: f64| ring[k] + ring[k].normalize() * r;
    let c6 = radial(0, 1.48);
    let o7 = place_atom(&ring[1], &ring[0], &c6, 1.21, 2.1, 0.5);
    let o8 = place_atom(&ring[1], &ring[0], &c6, 1.34, 2.1, 0.5 - PI);
    let o9 = radial(1, 1.36);
    let c10 = place_atom(&ring[0], &ring[1], &o9, 1.36, 2.04, 1.6);
    let o11 = place_atom(&ring[1], &o9, &c10, 1.20, 2.15, 0.1);
    let c12 = place_atom(&ring[1], &o9, &c10, 1.50, 1.94, 0.1 - PI);
    let mut pts = ring.clone();
    pts.extend([c6, o7, o8, o9, c10, o11, c12]);
    let e = |s| Element::from_symbol(s).unwrap();
    let atoms: Vec<Element> = ["C", "C", "C", "C", "C", "C", "C", "O", "O", "O", "C", "O", "C"]
        .into_iter()
        .map(e)
        .collect();
    let mut bonds = RING_BONDS.to_vec();
    bonds.extend([(0, 6, 1), (6, 7, 2), (6, 8, 1), (1, 9, 1), (9, 10, 1), (10, 11, 2), (10, 12, 1)]);
    build(atoms, &bonds, &pts)
}

/// Cyclohexane-like ring C0-C5 carrying a propyl chain C6-C7-C8 on C0 with
/// hydrogens H9-H11 on C8.
pub fn propyl_cyclohexane() -> (Molecule, Conformation) {
    let ring = hexagon(1.53);
    let c6 = ring[0] + ring[0].normalize() * CC;
    let c7 = place_atom(&ring[1], &ring[0], &c6, CC, TET, 1.2);
    let c8 = place_atom(&ring[0], &c6, &c7, CC, TET, PI);
    let mut pts = ring.clone();
    pts.extend([c6, c7, c8]);
    for k in 0..3 {
        pts.push(place_atom(&c6, &c7, &c8, CH, TET, PI / 3.0 + k as f64 * 2.0 * PI / 3.0));
    }
    let mut atoms = vec![Element::C; 9];
    atoms.extend([Element::H; 3]);
    let bonds = [
        (0, 1, 1),
        (1, 2, 1),
        (2, 3, 1),
        (3, 4, 1),
        (4, 5, 1),
        (5, 0, 1),
        (0, 6, 1),
        (6, 7, 1),
        (7, 8, 1),
        (8, 9, 1),
        (8, 10, 1),
        (8, 11, 1),
    ];
    build(atoms, &bonds, &pts)
}

/// Four carbons on a straight line: every torsion is degenerate.
pub fn linear_chain() -> (Molecule, Conformation) {
    let pts: Vec<_> = (0..4).map(|k| Vector3::new(k as f64 * CC, 0.0, 0.0)).collect();
    build(vec![Element::C; 4], &[(0, 1, 1), (1, 2, 1), (2, 3, 1)], &pts)
}

/// Unbranched carbon chain of `n >= 3` atoms with random lengths in
/// [1.4, 1.6], angles in [1.85, 2.05] and torsions away from ±π.
pub fn random_chain(n: usize, rng: &mut FradRng) -> (Molecule, Conformation) {
    assert!(n >= 3, "chain needs three atoms");
    let mut pts = vec![Vector3::zeros(), Vector3::new(1.5, 0.0, 0.0)];
    pts.push(place_atom(&Vector3::new(0.0, 1.0, 0.0), &pts[0], &pts[1], 1.5, 1.95, 0.0));
    while pts.len() < n {
        let k = pts.len();
        let r = rng.random_range(1.4..1.6);
        let theta = rng.random_range(1.85..2.05);
        let psi = rng.random_range(-3.1..3.1);
        let p = place_atom(&pts[k - 3], &pts[k - 2], &pts[k - 1], r, theta, psi);
        pts.push(p);
    }
    let bonds: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1)).collect();
    build(vec![Element::C; n], &bonds, &pts)
}

/// Rigid-body checks want molecules with nontrivial geometry in every
/// direction; this lists all fixtures that have valid torsions.
pub fn all_valid() -> Vec<(Molecule, Conformation)> {
    vec![methane(), butane(), benzene(), aspirin_heavy(), propyl_cyclohexane()]
}
