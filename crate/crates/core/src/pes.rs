//! A toy bonded potential-energy surface: harmonic bonds and angles plus
//! cosine torsions. Supplies energies, exact forces, equilibria and the
//! synthetic datasets used for training.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FradError, Result};
use crate::geometry::noise::NoiseSpec;
use crate::geometry::{wrap_angle, InternalCoords, COLLINEAR_TOL};
use crate::molgraph::{Bond, Conformation, Element, Molecule};
use crate::rng::{stream_id, FradRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondTerm {
    pub i: usize,
    pub j: usize,
    pub k: f64,
    pub r0: f64,
}

/// Harmonic angle `a-b-c` with hinge `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleTerm {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub k: f64,
    pub theta0: f64,
}

/// `v (1 + cos(n ψ - γ))` on the dihedral `a-b-c-d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorsionTerm {
    pub atoms: [usize; 4],
    pub v: f64,
    pub n: u8,
    pub gamma: f64,
}

/// An internal coordinate of [`CoupledHarmonic`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Coord {
    Length { i: usize, j: usize },
    Angle { a: usize, b: usize, c: usize },
    Torsion { atoms: [usize; 4] },
}

impl Coord {
    fn atoms(&self) -> Vec<usize> {
        match *self {
            Coord::Length { i, j } => vec![i, j],
            Coord::Angle { a, b, c } => vec![a, b, c],
            Coord::Torsion { atoms } => atoms.to_vec(),
        }
    }
}

/// `Δqᵀ K Δq` over a set of internal coordinates, `K` symmetric positive
/// definite and stored row-major. Torsion differences are wrapped to
/// `[-π, π)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledHarmonic {
    pub coords: Vec<Coord>,
    pub q0: Vec<f64>,
    pub k: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceField {
    pub bonds: Vec<BondTerm>,
    pub angles: Vec<AngleTerm>,
    pub torsions: Vec<TorsionTerm>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coupled: Vec<CoupledHarmonic>,
    pub kt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondParams {
    pub k: f64,
    pub r0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleParams {
    pub k: f64,
    pub theta0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorsionParams {
    pub v: f64,
    pub n: u8,
    pub gamma: f64,
}

/// Parameter ranges used when drawing a [`TypeTable`].
pub mod ranges {
    pub const BOND_K: (f64, f64) = (100.0, 400.0);
    /// Multiplier on the sum of covalent radii.
    pub const BOND_SCALE: (f64, f64) = (0.95, 1.05);
    pub const ANGLE_K: (f64, f64) = (30.0, 100.0);
    pub const TORSION_V: (f64, f64) = (0.5, 2.0);
    /// Rest angle by hinge degree (2, 3, >= 4).
    pub const THETA0: [(f64, f64); 3] = [(1.85, 2.05), (1.95, 2.09), (1.85, 2.0)];
}

/// Force-field parameters keyed by atom types. Keys are element symbols:
/// bonds `"C-O:1"` (sorted pair, order), angles `"C:4"` (hinge, degree),
/// torsions `"C-C:1"` (sorted central pair, order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeTable {
    pub bonds: BTreeMap<String, BondParams>,
    pub angles: BTreeMap<String, AngleParams>,
    pub torsions: BTreeMap<String, TorsionParams>,
}

const TABLE_ELEMENTS: [&str; 4] = ["H", "C", "N", "O"];

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn pair_key(x: Element, y: Element, order: u8) -> String {
    let (p, q) = if x.atomic_number() <= y.atomic_number() { (x, y) } else { (y, x) };
    format!("{}-{}:{}", p.symbol(), q.symbol(), order)
}

fn torsion_shape(order: u8) -> (u8, f64) {
    if order > 1 {
        (2, std::f64::consts::PI)
    } else {
        (3, 0.0)
    }
}

impl TypeTable {
    /// Draws every H/C/N/O entry in a fixed order from the documented
    /// [`ranges`].
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let els: Vec<Element> = TABLE_ELEMENTS.iter().map(|s| Element::from_symbol(s).unwrap()).collect();
        let mut bonds = BTreeMap::new();
        let mut torsions = BTreeMap::new();
        for (i, &x) in els.iter().enumerate() {
            for &y in &els[i..] {
                for order in 1..=3u8 {
                    let r0 = (x.covalent_radius() + y.covalent_radius())
                        * uniform(rng, ranges::BOND_SCALE)
                        * (1.0 - 0.08 * f64::from(order - 1));
                    bonds.insert(
                        pair_key(x, y, order),
                        BondParams {
                            k: uniform(rng, ranges::BOND_K),
                            r0,
                        },
                    );
                    let (n, gamma) = torsion_shape(order);
                    torsions.insert(
                        pair_key(x, y, order),
                        TorsionParams {
                            v: uniform(rng, ranges::TORSION_V),
                            n,
                            gamma,
                        },
                    );
                }
            }
        }
        let mut angles = BTreeMap::new();
        for &x in &els {
            for degree in 2..=4usize {
                angles.insert(
                    format!("{}:{}", x.symbol(), degree),
                    AngleParams {
                        k: uniform(rng, ranges::ANGLE_K),
                        theta0: uniform(rng, ranges::THETA0[degree - 2]),
                    },
                );
            }
        }
        Self {
            bonds,
            angles,
            torsions,
        }
    }

    /// Parameters at the midpoint of every range, used for elements the
    /// table does not list.
    fn fallback_bond(x: Element, y: Element, order: u8) -> BondParams {
        BondParams {
            k: 250.0,
            r0: (x.covalent_radius() + y.covalent_radius()) * (1.0 - 0.08 * f64::from(order - 1)),
        }
    }

    pub fn bond(&self, x: Element, y: Element, order: u8) -> BondParams {
        self.bonds
            .get(&pair_key(x, y, order))
            .copied()
            .unwrap_or_else(|| Self::fallback_bond(x, y, order))
    }

    pub fn angle(&self, hinge: Element, degree: usize) -> AngleParams {
        let d = degree.clamp(2, 4);
        self.angles
            .get(&format!("{}:{}", hinge.symbol(), d))
            .copied()
            .unwrap_or(AngleParams {
                k: 65.0,
                theta0: [2.0, 2.09, 1.91][d - 2],
            })
    }

    pub fn torsion(&self, b: Element, c: Element, order: u8) -> TorsionParams {
        self.torsions.get(&pair_key(b, c, order)).copied().unwrap_or_else(|| {
            let (n, gamma) = torsion_shape(order);
            TorsionParams { v: 1.25, n, gamma }
        })
    }
}

/// Every quadruple `a-b-c-d` around each bond `b-c`, skipping `a == d`.
fn torsion_quads(mol: &Molecule) -> Vec<(usize, [usize; 4])> {
    let mut out = Vec::new();
    for (k, bond) in mol.bonds().iter().enumerate() {
        let (b, c) = (bond.i, bond.j);
        for &(a, _) in mol.neighbors(b) {
            if a == c {
                continue;
            }
            for &(d, _) in mol.neighbors(c) {
                if d == b || d == a {
                    continue;
                }
                out.push((k, [a, b, c, d]));
            }
        }
    }
    out
}

fn angle_triples(mol: &Molecule) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for b in 0..mol.n_atoms() {
        let nb = mol.neighbors(b);
        for x in 0..nb.len() {
            for y in (x + 1)..nb.len() {
                out.push([nb[x].0, b, nb[y].0]);
            }
        }
    }
    out
}

impl ForceField {
    /// All bonds, every angle pair at every hinge, and every torsion
    /// quadruple, parameterized by `table`. Torsion barriers are shared
    /// evenly among the quadruples of a bond.
    pub fn from_types(mol: &Molecule, table: &TypeTable) -> Self {
        let at = mol.atoms();
        let bonds = mol
            .bonds()
            .iter()
            .map(|b| {
                let p = table.bond(at[b.i], at[b.j], b.order);
                BondTerm {
                    i: b.i,
                    j: b.j,
                    k: p.k,
                    r0: p.r0,
                }
            })
            .collect();
        let angles = angle_triples(mol)
            .into_iter()
            .map(|[a, b, c]| {
                let p = table.angle(at[b], mol.degree(b));
                AngleTerm {
                    a,
                    b,
                    c,
                    k: p.k,
                    theta0: p.theta0,
                }
            })
            .collect();
        let quads = torsion_quads(mol);
        let mut per_bond = vec![0usize; mol.bonds().len()];
        for (k, _) in &quads {
            per_bond[*k] += 1;
        }
        let torsions = quads
            .into_iter()
            .map(|(k, atoms)| {
                let bond = &mol.bonds()[k];
                let p = table.torsion(at[bond.i], at[bond.j], bond.order);
                TorsionTerm {
                    atoms,
                    v: p.v / per_bond[k] as f64,
                    n: p.n,
                    gamma: p.gamma,
                }
            })
            .collect();
        Self {
            bonds,
            angles,
            torsions,
            coupled: Vec::new(),
            kt: 1.0,
        }
    }

    /// As [`from_types`](Self::from_types) but with every rest value moved to
    /// the geometry of `conf`, so that `conf` is an exact minimum with `E = 0`.
    pub fn relaxed_at(mol: &Molecule, conf: &Conformation, table: &TypeTable) -> Result<Self> {
        conf.check_atoms(mol.n_atoms())?;
        let mut ff = Self::from_types(mol, table);
        for b in &mut ff.bonds {
            b.r0 = conf.distance(b.i, b.j);
        }
        for a in &mut ff.angles {
            a.theta0 = crate::geometry::bond_angle(&conf.pos(a.a), &conf.pos(a.b), &conf.pos(a.c));
        }
        for t in &mut ff.torsions {
            let psi = crate::geometry::measure_torsion(conf, t.atoms)?;
            t.gamma = f64::from(t.n) * psi - std::f64::consts::PI;
        }
        Ok(ff)
    }

    /// Quadratic field in the internal coordinates of `ic` whose linearized
    /// Boltzmann distribution equals the hybrid noise of `spec` on those
    /// coordinates: `K = (kT/2) (Σ + τ² B Bᵀ)⁻¹` with `Σ` the VRN variances
    /// and `B` the Wilson rows `∂q/∂x` at `x_eq`. Rigid motions stay free.
    pub fn hybrid_matched(ic: &InternalCoords, x_eq: &Conformation, spec: &NoiseSpec, kt: f64) -> Result<Self> {
        if ![spec.sigma_r, spec.sigma_theta, spec.sigma_phi, spec.sigma_psi].iter().all(|s| *s > 0.0) {
            return Err(FradError::Precondition("matched field needs all VRN sigmas > 0".into()));
        }
        let mut coords = Vec::new();
        let mut q0 = ic.r.clone();
        let mut var = Vec::new();
        for l in &ic.set.lengths {
            coords.push(Coord::Length { i: l.b, j: l.c });
            var.push(spec.sigma_r.powi(2));
        }
        for (ang, th) in ic.set.angles.iter().zip(&ic.theta) {
            coords.push(Coord::Angle {
                a: ang.fixed_arm,
                b: ang.hinge,
                c: ang.moving_arm,
            });
            q0.push(*th);
            var.push(spec.sigma_theta.powi(2));
        }
        let torsions = ic.set.fixed_torsions.iter().zip(&ic.phi).map(|(t, v)| (t, v, spec.sigma_phi));
        let torsions = torsions.chain(ic.set.rotatable.iter().zip(&ic.psi).map(|(t, v)| (t, v, spec.sigma_psi)));
        for (t, v, s) in torsions {
            coords.push(Coord::Torsion { atoms: t.atoms });
            q0.push(*v);
            var.push(s * s);
        }
        let m = coords.len();
        let dim = 3 * x_eq.n_atoms();
        let mut b = DMatrix::<f64>::zeros(m, dim);
        for (row, c) in coords.iter().enumerate() {
            let (_, grads) = coord_value_grad(x_eq, c).ok_or_else(|| {
                FradError::DegenerateMove(format!("coordinate {c:?} is degenerate at the reference"))
            })?;
            for (atom, g) in grads {
                for k in 0..3 {
                    b[(row, 3 * atom + k)] += g[k];
                }
            }
        }
        let mut cov = &b * b.transpose() * spec.tau.powi(2);
        for (k, v) in var.iter().enumerate() {
            cov[(k, k)] += v;
        }
        let inv = cov
            .try_inverse()
            .ok_or_else(|| FradError::Precondition("coordinate covariance is singular".into()))?;
        let k = (inv * (0.5 * kt)).transpose();
        Ok(Self {
            bonds: Vec::new(),
            angles: Vec::new(),
            torsions: Vec::new(),
            coupled: vec![CoupledHarmonic {
                coords,
                q0,
                k: k.as_slice().to_vec(),
            }],
            kt,
        })
    }

    /// Same field with every torsion barrier set to zero.
    pub fn quadratic(&self) -> Self {
        let mut ff = self.clone();
        ff.torsions.clear();
        ff
    }

    pub fn validate(&self, n_atoms: usize) -> Result<()> {
        let bad = |msg: String| Err(FradError::Precondition(msg));
        for b in &self.bonds {
            if !(b.k > 0.0) || b.i >= n_atoms || b.j >= n_atoms {
                return bad(format!("invalid bond term {b:?}"));
            }
        }
        for a in &self.angles {
            if !(a.k > 0.0) || a.a.max(a.b).max(a.c) >= n_atoms {
                return bad(format!("invalid angle term {a:?}"));
            }
        }
        for t in &self.torsions {
            if !(t.v >= 0.0) || !(1..=3).contains(&t.n) || t.atoms.iter().any(|&x| x >= n_atoms) {
                return bad(format!("invalid torsion term {t:?}"));
            }
        }
        if !(self.kt > 0.0) {
            return bad(format!("kT must be > 0, got {}", self.kt));
        }
        Ok(())
    }
}

/// Value of a length or angle and its gradient per atom; `None` when an
/// angle is collinear.
fn coord_value_grad(x: &Conformation, c: &Coord) -> Option<(f64, Vec<(usize, Vector3<f64>)>)> {
    match *c {
        Coord::Length { i, j } => {
            let d = x.pos(j) - x.pos(i);
            let r = d.norm();
            if r == 0.0 {
                return None;
            }
            let e = d / r;
            Some((r, vec![(j, e), (i, -e)]))
        }
        Coord::Angle { a, b, c } => {
            let pb = x.pos(b);
            let u = x.pos(a) - pb;
            let v = x.pos(c) - pb;
            let (lu, lv) = (u.norm(), v.norm());
            let theta = u.cross(&v).norm().atan2(u.dot(&v));
            if lu == 0.0 || lv == 0.0 || theta.sin() < COLLINEAR_TOL {
                return None;
            }
            let (uh, vh) = (u / lu, v / lv);
            let (ct, st) = (theta.cos(), theta.sin());
            let ga = (uh * ct - vh) / (lu * st);
            let gc = (vh * ct - uh) / (lv * st);
            Some((theta, vec![(a, ga), (c, gc), (b, -(ga + gc))]))
        }
        Coord::Torsion { atoms: [ia, ib, ic, id] } => {
            let (p0, p1, p2, p3) = (x.pos(ia), x.pos(ib), x.pos(ic), x.pos(id));
            let b1 = p1 - p0;
            let b2 = p2 - p1;
            let b3 = p3 - p2;
            let n1 = b1.cross(&b2);
            let n2 = b2.cross(&b3);
            let (a2, bb2) = (n1.norm_squared(), n2.norm_squared());
            let l2 = b2.norm();
            if a2 <= (COLLINEAR_TOL * b1.norm() * l2).powi(2) || bb2 <= (COLLINEAR_TOL * b3.norm() * l2).powi(2) {
                return None;
            }
            let psi = (l2 * b1.dot(&n2)).atan2(n1.dot(&n2));
            let g0 = n1 * (-l2 / a2);
            let g3 = n2 * (l2 / bb2);
            let f1 = b1.dot(&b2) / (l2 * l2);
            let f3 = b3.dot(&b2) / (l2 * l2);
            let g1 = -g0 * (1.0 + f1) + g3 * f3;
            let g2 = g0 * f1 - g3 * (1.0 + f3);
            Some((psi, vec![(ia, g0), (ib, g1), (ic, g2), (id, g3)]))
        }
    }
}

/// Energy and its gradient, evaluated together.
fn energy_grad(ff: &ForceField, x: &Conformation, want_grad: bool) -> (f64, Vec<f64>, usize) {
    let n = x.n_atoms();
    let mut g = if want_grad { vec![0.0; 3 * n] } else { Vec::new() };
    let mut e = 0.0;
    let mut skipped = 0;
    let add = |g: &mut Vec<f64>, a: usize, v: Vector3<f64>| {
        if want_grad {
            for k in 0..3 {
                g[3 * a + k] += v[k];
            }
        }
    };

    for t in &ff.bonds {
        let d = x.pos(t.j) - x.pos(t.i);
        let r = d.norm();
        let dr = r - t.r0;
        e += t.k * dr * dr;
        if want_grad && r > 0.0 {
            let f = d * (2.0 * t.k * dr / r);
            add(&mut g, t.j, f);
            add(&mut g, t.i, -f);
        }
    }

    for t in &ff.angles {
        let Some((theta, grads)) = coord_value_grad(x, &Coord::Angle { a: t.a, b: t.b, c: t.c }) else {
            skipped += 1;
            continue;
        };
        let dth = theta - t.theta0;
        e += t.k * dth * dth;
        for (atom, gr) in grads {
            add(&mut g, atom, gr * (2.0 * t.k * dth));
        }
    }

    for h in &ff.coupled {
        let m = h.coords.len();
        let mut dq = vec![0.0; m];
        let mut grads = Vec::with_capacity(m);
        let mut ok = true;
        for (k, c) in h.coords.iter().enumerate() {
            match coord_value_grad(x, c) {
                Some((q, gr)) => {
                    dq[k] = match c {
                        Coord::Torsion { .. } => wrap_angle(q - h.q0[k]),
                        _ => q - h.q0[k],
                    };
                    grads.push(gr);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            skipped += 1;
            continue;
        }
        for r in 0..m {
            let kdq: f64 = (0..m).map(|c| h.k[r * m + c] * dq[c]).sum();
            e += dq[r] * kdq;
            for (atom, gr) in &grads[r] {
                add(&mut g, *atom, gr * (2.0 * kdq));
            }
        }
    }

    for t in &ff.torsions {
        if t.v == 0.0 {
            continue;
        }
        let Some((psi, grads)) = coord_value_grad(x, &Coord::Torsion { atoms: t.atoms }) else {
            skipped += 1;
            continue;
        };
        let nf = f64::from(t.n);
        e += t.v * (1.0 + (nf * psi - t.gamma).cos());
        let de = -t.v * nf * (nf * psi - t.gamma).sin();
        for (atom, gr) in grads {
            add(&mut g, atom, gr * de);
        }
    }
    (e, g, skipped)
}

fn check(ff: &ForceField, x: &Conformation) -> Result<()> {
    let n = x.n_atoms();
    let max_idx = ff
        .bonds
        .iter()
        .flat_map(|b| [b.i, b.j])
        .chain(ff.angles.iter().flat_map(|a| [a.a, a.b, a.c]))
        .chain(ff.torsions.iter().flat_map(|t| t.atoms))
        .chain(ff.coupled.iter().flat_map(|h| h.coords.iter()).flat_map(Coord::atoms))
        .max();
    if let Some(m) = max_idx {
        if m >= n {
            return Err(FradError::Dimension {
                expected: m + 1,
                got: n,
            });
        }
    }
    Ok(())
}

fn warn_skipped(skipped: usize) {
    if skipped > 0 {
        log::warn!("{skipped} degenerate angle or torsion terms skipped");
    }
}

pub fn energy(ff: &ForceField, x: &Conformation) -> Result<f64> {
    check(ff, x)?;
    let (e, _, skipped) = energy_grad(ff, x, false);
    warn_skipped(skipped);
    Ok(e)
}

/// `-∇E`, flattened per atom.
pub fn forces(ff: &ForceField, x: &Conformation) -> Result<Vec<f64>> {
    Ok(energy_and_forces(ff, x)?.1)
}

pub fn energy_and_forces(ff: &ForceField, x: &Conformation) -> Result<(f64, Vec<f64>)> {
    check(ff, x)?;
    let (e, g, skipped) = energy_grad(ff, x, true);
    warn_skipped(skipped);
    Ok((e, g.into_iter().map(|v| -v).collect()))
}

/// `∇ log p = F / kT` under the Boltzmann distribution.
pub fn boltzmann_score(ff: &ForceField, x: &Conformation) -> Result<Vec<f64>> {
    let f = forces(ff, x)?;
    Ok(f.into_iter().map(|v| v / ff.kt).collect())
}

/// Relative energy change treated as rounding noise by [`minimize`].
pub const ENERGY_NOISE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub record_trace: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 100_000,
            armijo_c: 1e-4,
            shrink: 0.5,
            record_trace: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub conf: Conformation,
    pub energy: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Energies after each accepted step (only with `record_trace`).
    pub trace: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Gradient descent with Armijo backtracking.
///
/// The first trial step of each line search is the Barzilai-Borwein length
/// from the previous accepted step (clamped to `[1e-8, 1]`), which the
/// backtracking then shrinks until the sufficient-decrease test passes.
/// Once energy differences drop below [`ENERGY_NOISE`] the test is applied
/// in its gradient-only trapezoid form, so accepted energies are monotone up
/// to that tolerance.
pub fn minimize(ff: &ForceField, start: &Conformation, opts: &MinimizeOptions) -> Result<MinimizeResult> {
    check(ff, start)?;
    if start.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(FradError::Precondition("start conformation is not finite".into()));
    }
    let mut x = start.as_slice().to_vec();
    let conf = |v: &[f64]| Conformation::new(v.to_vec());
    let (mut e, mut g, _) = energy_grad(ff, &conf(&x)?, true);
    let mut trace = Vec::new();
    let mut alpha = 1e-3;
    let mut it = 0;
    while inf_norm(&g) >= opts.grad_tol && it < opts.max_iter {
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let mut step = alpha;
        let (x_new, e_new, g_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let (ec, gc, _) = energy_grad(ff, &conf(&cand)?, true);
            if ec <= e - opts.armijo_c * step * gg {
                break (cand, ec, gc);
            }
            // Near the minimum the predicted decrease sinks below the
            // rounding noise of E. Fall back to the trapezoid form of the
            // same test, phi'(step) <= (2c - 1) phi'(0), which only needs
            // gradients, as long as E has not measurably increased.
            let gcg: f64 = gc.iter().zip(&g).map(|(a, b)| a * b).sum();
            if ec <= e + ENERGY_NOISE * (e.abs() + 1.0) && gcg >= -(1.0 - 2.0 * opts.armijo_c) * gg {
                break (cand, ec, gc);
            }
            step *= opts.shrink;
            if step < 1e-20 {
                log::warn!("line search stalled at |g|_inf = {:e}", inf_norm(&g));
                return Ok(MinimizeResult {
                    conf: conf(&x)?,
                    energy: e,
                    grad_inf: inf_norm(&g),
                    iterations: it,
                    converged: false,
                    trace,
                });
            }
        };
        let mut sy = 0.0;
        let mut ss = 0.0;
        for k in 0..x.len() {
            let s = x_new[k] - x[k];
            sy += s * (g_new[k] - g[k]);
            ss += s * s;
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-8, 1.0) } else { 1e-3 };
        x = x_new;
        e = e_new;
        g = g_new;
        it += 1;
        if opts.record_trace {
            trace.push(e);
        }
    }
    let grad_inf = inf_norm(&g);
    Ok(MinimizeResult {
        conf: conf(&x)?,
        energy: e,
        grad_inf,
        iterations: it,
        converged: grad_inf < opts.grad_tol,
        trace,
    })
}

/// Random-molecule generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub count: usize,
    pub min_heavy: usize,
    pub max_heavy: usize,
    pub branch_prob: f64,
    pub ring_prob: f64,
    pub hetero_prob: f64,
    pub double_prob: f64,
    /// Non-bonded atoms (beyond 1-3 neighbors) closer than this are rejected.
    pub min_contact: f64,
    /// Equilibria with any angle further than this from its rest value are
    /// rejected (inverted centers trapped in a strained local minimum).
    pub max_angle_strain: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 200,
            min_heavy: 4,
            max_heavy: 8,
            branch_prob: 0.3,
            ring_prob: 0.3,
            hetero_prob: 0.2,
            double_prob: 0.1,
            min_contact: 1.2,
            max_angle_strain: 0.35,
        }
    }
}

/// One dataset molecule at its verified equilibrium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub tag: String,
    pub elements: Vec<Element>,
    pub bonds: Vec<[usize; 3]>,
    pub coords: Conformation,
    /// `E(x_eq)`.
    pub energy: f64,
    /// Soft minimum of the torsional barrier heights `2V` over rotatable
    /// bonds, a second label for multi-task checks (0 without torsions).
    pub gap: f64,
    pub ff: ForceField,
}

impl Entry {
    pub fn molecule(&self) -> Result<Molecule> {
        let bonds = self.bonds.iter().map(|b| Bond::new(b[0], b[1], b[2] as u8)).collect();
        Molecule::new(self.elements.clone(), bonds)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One JSON object per line, in entry order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (k, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Entry = serde_json::from_str(&line).map_err(|err| FradError::Parse {
                line: k + 1,
                msg: err.to_string(),
            })?;
            e.ff.validate(e.elements.len())?;
            entries.push(e);
        }
        Ok(Self { entries })
    }

    /// Entries whose stored conformation fails `‖∇E‖_∞ < tol`.
    pub fn audit(&self, tol: f64) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in &self.entries {
            let f = forces(&e.ff, &e.coords)?;
            if !(inf_norm(&f) < tol) {
                bad.push(e.tag.clone());
            }
        }
        Ok(bad)
    }
}

fn valence(e: Element) -> usize {
    match e.atomic_number() {
        1 => 1,
        7 => 3,
        8 => 2,
        _ => 4,
    }
}

struct Builder {
    atoms: Vec<Element>,
    bonds: Vec<(usize, usize, u8)>,
    used: Vec<usize>,
}

impl Builder {
    fn add(&mut self, e: Element) -> usize {
        self.atoms.push(e);
        self.used.push(0);
        self.atoms.len() - 1
    }

    fn free(&self, a: usize) -> usize {
        valence(self.atoms[a]).saturating_sub(self.used[a])
    }

    fn link(&mut self, i: usize, j: usize, order: u8) {
        self.bonds.push((i, j, order));
        self.used[i] += order as usize;
        self.used[j] += order as usize;
    }
}

fn random_topology<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> (Vec<Element>, Vec<(usize, usize, u8)>, usize) {
    let c = Element::C;
    let n_heavy = rng.random_range(cfg.min_heavy..=cfg.max_heavy.max(cfg.min_heavy));
    let mut b = Builder {
        atoms: Vec::new(),
        bonds: Vec::new(),
        used: Vec::new(),
    };
    let ring = if n_heavy >= 5 && rng.random::<f64>() < cfg.ring_prob {
        rng.random_range(5..=6usize).min(n_heavy)
    } else {
        0
    };
    for k in 0..ring {
        let e = if k > 0 && rng.random::<f64>() < cfg.hetero_prob { Element::N } else { c };
        b.add(e);
    }
    for k in 0..ring {
        b.link(k, (k + 1) % ring, 1);
    }
    if ring == 0 {
        b.add(c);
    }
    while b.atoms.len() < n_heavy {
        let last = b.atoms.len() - 1;
        let candidates: Vec<usize> = (0..b.atoms.len()).filter(|&a| b.free(a) > 0).collect();
        if candidates.is_empty() {
            break;
        }
        let parent = if b.free(last) > 0 && rng.random::<f64>() >= cfg.branch_prob {
            last
        } else {
            candidates[rng.random_range(0..candidates.len())]
        };
        let e = if rng.random::<f64>() < cfg.hetero_prob {
            if rng.random::<bool>() {
                Element::N
            } else {
                Element::O
            }
        } else {
            c
        };
        let child = b.add(e);
        let order = if b.free(parent) >= 2 && b.free(child) >= 2 && rng.random::<f64>() < cfg.double_prob {
            2
        } else {
            1
        };
        b.link(parent, child, order);
    }
    for a in 0..b.atoms.len() {
        for _ in 0..b.free(a) {
            let h = b.add(Element::H);
            b.link(a, h, 1);
        }
    }
    (b.atoms, b.bonds, ring)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            2.0 * rng.random::<f64>() - 1.0,
            2.0 * rng.random::<f64>() - 1.0,
            2.0 * rng.random::<f64>() - 1.0,
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rough starting geometry: a puckered ring polygon, then breadth-first
/// placement of each new atom away from its parent's placed neighbors.
fn initial_geometry<R: Rng + ?Sized>(mol: &Molecule, ring: usize, table: &TypeTable, rng: &mut R) -> Conformation {
    let n = mol.n_atoms();
    let mut pos = vec![Vector3::zeros(); n];
    let mut placed = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    if ring > 0 {
        let r0 = table.bond(mol.atoms()[0], mol.atoms()[1], 1).r0;
        let radius = r0 / (2.0 * (std::f64::consts::PI / ring as f64).sin());
        for k in 0..ring {
            let t = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
            let z = if k % 2 == 0 { 0.25 } else { -0.25 };
            pos[k] = Vector3::new(radius * t.cos(), radius * t.sin(), z + 0.05 * (rng.random::<f64>() - 0.5));
            placed[k] = true;
            queue.push_back(k);
        }
    } else {
        placed[0] = true;
        queue.push_back(0);
    }
    while let Some(p) = queue.pop_front() {
        for &(child, k) in mol.neighbors(p) {
            if placed[child] {
                continue;
            }
            let bond = &mol.bonds()[k];
            let r0 = table.bond(mol.atoms()[p], mol.atoms()[child], bond.order).r0;
            let mut away = Vector3::zeros();
            for &(q, _) in mol.neighbors(p) {
                if placed[q] {
                    away -= (pos[q] - pos[p]).normalize();
                }
            }
            let jitter = random_unit(rng) * 0.6;
            let dir = if away.norm() > 1e-3 {
                (away.normalize() + jitter).normalize()
            } else {
                random_unit(rng)
            };
            pos[child] = pos[p] + dir * r0;
            placed[child] = true;
            queue.push_back(child);
        }
    }
    Conformation::from_points(&pos)
}

fn min_contact(mol: &Molecule, x: &Conformation) -> f64 {
    let n = mol.n_atoms();
    let mut close = vec![vec![false; n]; n];
    for a in 0..n {
        close[a][a] = true;
        for &(b, _) in mol.neighbors(a) {
            close[a][b] = true;
            for &(c, _) in mol.neighbors(b) {
                close[a][c] = true;
            }
        }
    }
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in (a + 1)..n {
            if !close[a][b] {
                best = best.min(x.distance(a, b));
            }
        }
    }
    best
}

fn soft_gap(mol: &Molecule, ff: &ForceField) -> f64 {
    let mut barrier: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for t in &ff.torsions {
        let key = (t.atoms[1].min(t.atoms[2]), t.atoms[1].max(t.atoms[2]));
        *barrier.entry(key).or_default() += 2.0 * t.v;
    }
    let hs: Vec<f64> = mol
        .rotatable()
        .iter()
        .filter_map(|rb| barrier.get(&(rb.axis.0.min(rb.axis.1), rb.axis.0.max(rb.axis.1))).copied())
        .collect();
    if hs.is_empty() {
        return 0.0;
    }
    let m = hs.iter().cloned().fold(f64::INFINITY, f64::min);
    let s: f64 = hs.iter().map(|h| (-(h - m) / ff.kt).exp()).sum();
    m - ff.kt * s.ln()
}

/// Builds one candidate entry; `None` when minimization fails or atoms
/// collide.
fn generate_entry(cfg: &GenConfig, table: &TypeTable, tag: String, rng: &mut FradRng) -> Result<Option<Entry>> {
    let (atoms, bonds, ring) = random_topology(cfg, rng);
    let mol = Molecule::new(atoms.clone(), bonds.iter().map(|&(i, j, o)| Bond::new(i, j, o)).collect())?;
    let start = initial_geometry(&mol, ring, table, rng);
    let ff = ForceField::from_types(&mol, table);
    let res = minimize(&ff, &start, &MinimizeOptions::default())?;
    if !res.converged {
        log::info!("{tag}: minimization did not converge (|g| = {:e}); skipped", res.grad_inf);
        return Ok(None);
    }
    if min_contact(&mol, &res.conf) < cfg.min_contact {
        log::info!("{tag}: atoms collide at equilibrium; skipped");
        return Ok(None);
    }
    let strained = ff.angles.iter().any(|t| {
        let th = crate::geometry::bond_angle(&res.conf.pos(t.a), &res.conf.pos(t.b), &res.conf.pos(t.c));
        (th - t.theta0).abs() > cfg.max_angle_strain
    });
    if strained {
        log::info!("{tag}: strained local minimum; skipped");
        return Ok(None);
    }
    if crate::geometry::internal_coords(&mol, &res.conf).is_err() {
        log::info!("{tag}: degenerate torsion at equilibrium; skipped");
        return Ok(None);
    }
    let gap = soft_gap(&mol, &ff);
    Ok(Some(Entry {
        tag,
        elements: atoms,
        bonds: bonds.iter().map(|&(i, j, o)| [i, j, o as usize]).collect(),
        coords: res.conf,
        energy: res.energy,
        gap,
        ff,
    }))
}

/// Draws a type table from stream 0 of `seed`, then candidate molecules
/// from streams `1, 2, ...` until `cfg.count` entries pass minimization.
pub fn generate_dataset(cfg: &GenConfig, seed: u64) -> Result<(Dataset, TypeTable)> {
    if cfg.min_heavy == 0 || cfg.max_heavy < cfg.min_heavy {
        return Err(FradError::Config(format!(
            "heavy-atom range {}..={} is empty",
            cfg.min_heavy, cfg.max_heavy
        )));
    }
    let table = TypeTable::random(&mut FradRng::new(seed, 0));
    let mut entries = Vec::with_capacity(cfg.count);
    let mut attempt = 0u64;
    let max_attempts = 20 * cfg.count as u64 + 20;
    while entries.len() < cfg.count {
        attempt += 1;
        if attempt > max_attempts {
            return Err(FradError::Precondition(format!(
                "only {} of {} molecules generated after {max_attempts} attempts",
                entries.len(),
                cfg.count
            )));
        }
        let mut rng = FradRng::new(seed, stream_id(0, attempt));
        let tag = format!("mol-{:05}", entries.len());
        if let Some(e) = generate_entry(cfg, &table, tag, &mut rng)? {
            entries.push(e);
        }
    }
    Ok((Dataset { entries }, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;
    use crate::geometry::rotate_point;

    fn table() -> TypeTable {
        TypeTable::random(&mut FradRng::new(4, 0))
    }

    fn fd_forces(ff: &ForceField, x: &Conformation, h: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.as_slice().len()];
        for k in 0..out.len() {
            let mut p = x.clone();
            p.as_mut_slice()[k] += h;
            let mut m = x.clone();
            m.as_mut_slice()[k] -= h;
            out[k] = -(energy(ff, &p).unwrap() - energy(ff, &m).unwrap()) / (2.0 * h);
        }
        out
    }

    fn jitter(x: &Conformation, s: f64, rng: &mut FradRng) -> Conformation {
        let v: Vec<f64> = x.as_slice().iter().map(|a| a + s * (2.0 * rng.random::<f64>() - 1.0)).collect();
        Conformation::new(v).unwrap()
    }

    #[test]
    fn rest_geometry_has_zero_energy() {
        let (mol, x) = aspirin_heavy();
        let ff = ForceField::relaxed_at(&mol, &x, &table()).unwrap();
        assert!(energy(&ff, &x).unwrap().abs() < 1e-12);
        assert!(inf_norm(&forces(&ff, &x).unwrap()) < 1e-9);
    }

    #[test]
    fn stretch_energy_is_quadratic() {
        let (mol, x) = methane();
        let ff = ForceField::relaxed_at(&mol, &x, &table()).unwrap().quadratic();
        let only_bonds = ForceField {
            angles: Vec::new(),
            ..ff.clone()
        };
        let mut y = x.clone();
        let dir = y.pos(1).normalize();
        y.set_pos(1, y.pos(1) + dir * 0.03);
        let k = only_bonds.bonds[0].k;
        assert!((energy(&only_bonds, &y).unwrap() - k * 0.0009).abs() < 1e-12);
    }

    #[test]
    fn forces_match_finite_differences() {
        let tab = table();
        let mut rng = FradRng::new(8, 1);
        for (mol, x) in [butane(), aspirin_heavy(), propyl_cyclohexane()] {
            let ff = ForceField::from_types(&mol, &tab);
            for _ in 0..10 {
                let y = jitter(&x, 0.1, &mut rng);
                let f = forces(&ff, &y).unwrap();
                let fd = fd_forces(&ff, &y, 1e-6);
                let num: f64 = f.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(num / den < 1e-5, "{}", num / den);
            }
        }
    }

    #[test]
    fn invariance_and_zero_net_force() {
        let (mol, x) = propyl_cyclohexane();
        let ff = ForceField::from_types(&mol, &table());
        let mut rng = FradRng::new(3, 3);
        let y = jitter(&x, 0.2, &mut rng);
        let e0 = energy(&ff, &y).unwrap();
        let f0 = forces(&ff, &y).unwrap();
        let mut net = Vector3::zeros();
        let mut torque = Vector3::zeros();
        for a in 0..y.n_atoms() {
            let fa = Vector3::new(f0[3 * a], f0[3 * a + 1], f0[3 * a + 2]);
            net += fa;
            torque += y.pos(a).cross(&fa);
        }
        assert!(net.norm() < 1e-8 && torque.norm() < 1e-8);
        for _ in 0..20 {
            let axis = random_unit(&mut rng);
            let angle = 6.0 * rng.random::<f64>();
            let shift = random_unit(&mut rng) * 3.0;
            let pts: Vec<_> = y
                .points()
                .iter()
                .map(|p| rotate_point(p, &Vector3::zeros(), &axis, angle) + shift)
                .collect();
            let z = Conformation::from_points(&pts);
            assert!((energy(&ff, &z).unwrap() - e0).abs() < 1e-9);
            let fz = forces(&ff, &z).unwrap();
            for a in 0..y.n_atoms() {
                let fa = Vector3::new(f0[3 * a], f0[3 * a + 1], f0[3 * a + 2]);
                let rot = rotate_point(&fa, &Vector3::zeros(), &axis, angle);
                for k in 0..3 {
                    assert!((fz[3 * a + k] - rot[k]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn minimizer_contract() {
        let (mol, x) = butane();
        let ff = ForceField::relaxed_at(&mol, &x, &table()).unwrap();
        let at_min = minimize(&ff, &x, &MinimizeOptions::default()).unwrap();
        assert_eq!(at_min.iterations, 0);
        assert!(at_min.converged);

        let ff = ForceField::from_types(&mol, &table());
        let (_, eclipsed) = butane_with_torsion(2.0 * std::f64::consts::PI / 3.0 + 0.05);
        let opts = MinimizeOptions {
            record_trace: true,
            ..MinimizeOptions::default()
        };
        let res = minimize(&ff, &eclipsed, &opts).unwrap();
        assert!(res.converged);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0] + ENERGY_NOISE * (w[0].abs() + 1.0)));
        let psi = crate::geometry::measure_torsion(&res.conf, [0, 1, 2, 3]).unwrap();
        // minima of the backbone cosine term on a one-dimensional grid
        let t = table().torsion(Element::C, Element::C, 1);
        let steps = 3600;
        let grid: Vec<f64> = (0..steps)
            .map(|k| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * k as f64 / steps as f64)
            .collect();
        let v = |p: f64| 1.0 + (f64::from(t.n) * p - t.gamma).cos();
        let minima: Vec<f64> = (0..steps)
            .filter(|&k| {
                let (l, r) = ((k + steps - 1) % steps, (k + 1) % steps);
                v(grid[k]) <= v(grid[l]) && v(grid[k]) <= v(grid[r])
            })
            .map(|k| grid[k])
            .collect();
        assert!(minima.iter().any(|m| (crate::geometry::wrap_angle(psi - m)).abs() < 0.15), "{psi} vs {minima:?}");
    }

    #[test]
    fn small_dataset_is_deterministic_and_audited() {
        let cfg = GenConfig {
            count: 6,
            ..GenConfig::default()
        };
        let (a, _) = generate_dataset(&cfg, 17).unwrap();
        let (b, _) = generate_dataset(&cfg, 17).unwrap();
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut sa).unwrap();
        b.write_jsonl(&mut sb).unwrap();
        assert_eq!(sa, sb);
        assert!(a.audit(1e-6).unwrap().is_empty());
        let back = Dataset::read_jsonl(&sa[..]).unwrap();
        assert_eq!(back, a);
        let empty = generate_dataset(&GenConfig { count: 0, ..cfg }, 1).unwrap().0;
        assert!(empty.is_empty());
    }
}
