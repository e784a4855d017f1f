//! Molecular topology: atoms, bonds, ring perception and rotatable bonds.
//!
//! A [`Molecule`] is immutable once built. Construction validates the bond
//! list, perceives ring bonds as the complement of the bridge edges and
//! orders every bridge breadth-first over the tree whose nodes are the
//! ring systems and acyclic atoms, rooted at atom 0. That order fixes the
//! column order of every noise vector and makes the linear map between
//! torsion noise and Cartesian displacement block lower-triangular.

mod conformation;
mod element;
pub mod io;

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

pub use conformation::Conformation;
pub use element::Element;

use crate::error::{FradError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

impl Bond {
    pub fn new(i: usize, j: usize, order: u8) -> Self {
        Self { i, j, order }
    }

    pub fn other(&self, a: usize) -> usize {
        if self.i == a {
            self.j
        } else {
            self.i
        }
    }
}

/// A bridge bond oriented away from atom 0: removing it leaves `b` on the
/// root side and `c` on the far side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrientedBridge {
    pub bond: usize,
    pub b: usize,
    pub c: usize,
}

/// A rotatable single bond together with the atoms its torsion moves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotatableBond {
    pub bond: usize,
    /// Axis `(b, c)`, `b` on the side that stays fixed.
    pub axis: (usize, usize),
    /// Sorted atom indices of the `c`-side component.
    pub moving_set: Vec<usize>,
    /// `(a, d)`: the torsion measured is `a-b-c-d`.
    pub reference: (usize, usize),
    pub key_atom: usize,
}

impl RotatableBond {
    pub fn moves(&self, atom: usize) -> bool {
        self.moving_set.binary_search(&atom).is_ok()
    }
}

#[derive(Clone, Debug)]
pub struct Molecule {
    atoms: Vec<Element>,
    bonds: Vec<Bond>,
    // per atom: (neighbor, bond index), sorted by neighbor
    adjacency: Vec<Vec<(usize, usize)>>,
    ring_bonds: BTreeSet<usize>,
    bridges: Vec<OrientedBridge>,
    rotatable: Vec<RotatableBond>,
}

impl Molecule {
    pub fn new(atoms: Vec<Element>, bonds: Vec<Bond>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(FradError::Topology("molecule has no atoms".into()));
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for (k, bond) in bonds.iter().enumerate() {
            for atom in [bond.i, bond.j] {
                if atom >= n {
                    return Err(FradError::BondOutOfRange {
                        bond: k,
                        atom,
                        n_atoms: n,
                    });
                }
            }
            if bond.i == bond.j {
                return Err(FradError::Topology(format!("bond {k} is a self-loop")));
            }
            if !(1..=3).contains(&bond.order) {
                return Err(FradError::Topology(format!(
                    "bond {k} has order {}",
                    bond.order
                )));
            }
            if !seen.insert((bond.i.min(bond.j), bond.i.max(bond.j))) {
                return Err(FradError::Topology(format!(
                    "duplicate bond {}-{}",
                    bond.i, bond.j
                )));
            }
            adjacency[bond.i].push((bond.j, k));
            adjacency[bond.j].push((bond.i, k));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        let mut mol = Molecule {
            atoms,
            bonds,
            adjacency,
            ring_bonds: BTreeSet::new(),
            bridges: Vec::new(),
            rotatable: Vec::new(),
        };
        if mol.connected_from(0, None).len() != n {
            return Err(FradError::Topology("bond graph is not connected".into()));
        }
        mol.ring_bonds = detect_rings(&mol);
        mol.bridges = mol.bridge_tree_order();
        mol.rotatable = find_rotatable_bonds(&mol);
        Ok(mol)
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[Element] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn ring_bonds(&self) -> &BTreeSet<usize> {
        &self.ring_bonds
    }

    pub fn is_ring_bond(&self, bond: usize) -> bool {
        self.ring_bonds.contains(&bond)
    }

    /// All bridges in breadth-first order over the ring-contracted tree.
    pub fn bridges(&self) -> &[OrientedBridge] {
        &self.bridges
    }

    pub fn rotatable(&self) -> &[RotatableBond] {
        &self.rotatable
    }

    /// Neighbors of `a` with the connecting bond index, ascending by neighbor.
    pub fn neighbors(&self, a: usize) -> &[(usize, usize)] {
        &self.adjacency[a]
    }

    pub fn degree(&self, a: usize) -> usize {
        self.adjacency[a].len()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency[a]
            .iter()
            .find(|(nbr, _)| *nbr == b)
            .map(|(_, k)| *k)
    }

    /// Atoms reachable from `start`, optionally ignoring one bond. Sorted.
    fn connected_from(&self, start: usize, skip_bond: Option<usize>) -> Vec<usize> {
        let mut seen = vec![false; self.n_atoms()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(a) = stack.pop() {
            for &(nbr, k) in &self.adjacency[a] {
                if Some(k) != skip_bond && !seen[nbr] {
                    seen[nbr] = true;
                    stack.push(nbr);
                }
            }
        }
        (0..self.n_atoms()).filter(|&a| seen[a]).collect()
    }

    fn bridge_tree_order(&self) -> Vec<OrientedBridge> {
        let n = self.n_atoms();
        // label 2-edge-connected components
        let mut comp = vec![usize::MAX; n];
        let mut n_comp = 0;
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = n_comp;
            while let Some(a) = stack.pop() {
                for &(nbr, k) in &self.adjacency[a] {
                    if self.ring_bonds.contains(&k) && comp[nbr] == usize::MAX {
                        comp[nbr] = n_comp;
                        stack.push(nbr);
                    }
                }
            }
            n_comp += 1;
        }
        let mut members = vec![Vec::new(); n_comp];
        for a in 0..n {
            members[comp[a]].push(a);
        }

        let mut order = Vec::new();
        let mut visited = vec![false; n_comp];
        let mut queue = VecDeque::from([comp[0]]);
        visited[comp[0]] = true;
        while let Some(cid) = queue.pop_front() {
            for &a in &members[cid] {
                for &(nbr, k) in &self.adjacency[a] {
                    if self.ring_bonds.contains(&k) || visited[comp[nbr]] {
                        continue;
                    }
                    visited[comp[nbr]] = true;
                    queue.push_back(comp[nbr]);
                    order.push(OrientedBridge {
                        bond: k,
                        b: a,
                        c: nbr,
                    });
                }
            }
        }
        order
    }

    /// Orientation of a bridge bond, if `bond` is one.
    pub fn oriented_bridge(&self, bond: usize) -> Option<&OrientedBridge> {
        self.bridges.iter().find(|br| br.bond == bond)
    }
}

/// Ring bonds: every bond that lies on a simple cycle, i.e. every bond that
/// is not a bridge.
pub fn detect_rings(mol: &Molecule) -> BTreeSet<usize> {
    let n = mol.n_atoms();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut timer = 0;
    let mut bridges = BTreeSet::new();

    fn dfs(
        mol: &Molecule,
        a: usize,
        parent_bond: Option<usize>,
        disc: &mut [usize],
        low: &mut [usize],
        timer: &mut usize,
        bridges: &mut BTreeSet<usize>,
    ) {
        disc[a] = *timer;
        low[a] = *timer;
        *timer += 1;
        for &(nbr, k) in mol.neighbors(a) {
            if Some(k) == parent_bond {
                continue;
            }
            if disc[nbr] == usize::MAX {
                dfs(mol, nbr, Some(k), disc, low, timer, bridges);
                low[a] = low[a].min(low[nbr]);
                if low[nbr] > disc[a] {
                    bridges.insert(k);
                }
            } else {
                low[a] = low[a].min(disc[nbr]);
            }
        }
    }

    for start in 0..n {
        if disc[start] == usize::MAX {
            dfs(mol, start, None, &mut disc, &mut low, &mut timer, &mut bridges);
        }
    }
    (0..mol.bonds.len()).filter(|k| !bridges.contains(k)).collect()
}

/// Order-1, non-ring bonds whose endpoints both carry another neighbor,
/// listed in the bridge-tree breadth-first order.
pub fn find_rotatable_bonds(mol: &Molecule) -> Vec<RotatableBond> {
    mol.bridges
        .iter()
        .filter(|br| {
            mol.bonds[br.bond].order == 1 && mol.degree(br.b) >= 2 && mol.degree(br.c) >= 2
        })
        .map(|br| {
            let moving_set = mol.connected_from(br.c, Some(br.bond));
            let a = first_other_neighbor(mol, br.b, br.c);
            let d = first_other_neighbor(mol, br.c, br.b);
            RotatableBond {
                bond: br.bond,
                axis: (br.b, br.c),
                moving_set,
                reference: (a, d),
                key_atom: d,
            }
        })
        .collect()
}

pub(crate) fn first_other_neighbor(mol: &Molecule, atom: usize, exclude: usize) -> usize {
    mol.neighbors(atom)
        .iter()
        .map(|&(nbr, _)| nbr)
        .find(|&nbr| nbr != exclude)
        .expect("caller checked degree >= 2")
}

/// The connected component containing `c` once bond `b-c` is deleted.
pub fn split_subtree(mol: &Molecule, b: usize, c: usize) -> Result<Vec<usize>> {
    let bond = mol.bond_between(b, c).ok_or(FradError::NoSuchBond(b, c))?;
    let side = mol.connected_from(c, Some(bond));
    if side.binary_search(&b).is_ok() {
        return Err(FradError::RingBond { b, c });
    }
    Ok(side)
}

#[cfg(test)]
mod tests {
    use crate::fixtures::*;
    use super::*;

    /// Enumerates simple cycles by DFS and marks every bond on one.
    fn brute_force_ring_bonds(mol: &Molecule) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        // a bond (u,v) is on a cycle iff v is reachable from u without it
        for (k, bond) in mol.bonds().iter().enumerate() {
            let mut seen = vec![false; mol.n_atoms()];
            let mut stack = vec![bond.i];
            seen[bond.i] = true;
            while let Some(a) = stack.pop() {
                for (kk, other) in mol.bonds().iter().enumerate() {
                    if kk == k {
                        continue;
                    }
                    let next = if other.i == a {
                        other.j
                    } else if other.j == a {
                        other.i
                    } else {
                        continue;
                    };
                    if !seen[next] {
                        seen[next] = true;
                        stack.push(next);
                    }
                }
            }
            if seen[bond.j] {
                out.insert(k);
            }
        }
        out
    }

    #[test]
    fn tree_has_no_ring_bonds() {
        let (mol, _) = butane();
        assert!(mol.ring_bonds().is_empty());
    }

    #[test]
    fn benzene_ring_bonds() {
        let (mol, _) = benzene();
        let rings = mol.ring_bonds().clone();
        assert_eq!(rings, brute_force_ring_bonds(&mol));
        assert_eq!(rings.len(), 6);
        for &k in &rings {
            let b = mol.bonds()[k];
            assert_eq!(mol.atoms()[b.i], Element::C);
            assert_eq!(mol.atoms()[b.j], Element::C);
        }
        assert!(mol.rotatable().is_empty());
    }

    #[test]
    fn fused_triangles() {
        let atoms = vec![Element::C; 4];
        let bonds = vec![
            Bond::new(0, 1, 1),
            Bond::new(1, 2, 1),
            Bond::new(2, 0, 1),
            Bond::new(1, 3, 1),
            Bond::new(2, 3, 1),
        ];
        let mol = Molecule::new(atoms, bonds).unwrap();
        assert_eq!(mol.ring_bonds().len(), 5);
        assert_eq!(*mol.ring_bonds(), brute_force_ring_bonds(&mol));
    }

    #[test]
    fn butane_rotatable_bonds() {
        let (mol, _) = butane();
        let rot = mol.rotatable();
        // C0-C1, C1-C2, C2-C3: all carry hydrogens on both sides
        assert_eq!(rot.len(), 3);
        let axes: Vec<_> = rot.iter().map(|r| r.axis).collect();
        assert_eq!(axes, vec![(0, 1), (1, 2), (2, 3)]);
        let central = &rot[1];
        let expected: Vec<usize> = vec![2, 3, 9, 10, 11, 12, 13];
        assert_eq!(central.moving_set, expected);
        assert_eq!(central.reference, (0, 3));
        assert_eq!(central.key_atom, 3);
    }

    #[test]
    fn terminal_methyl_moves_only_its_hydrogens() {
        let (mol, _) = butane();
        let side = split_subtree(&mol, 2, 3).unwrap();
        assert_eq!(side, vec![3, 11, 12, 13]);
        let side = split_subtree(&mol, 1, 2).unwrap();
        assert_eq!(side, vec![2, 3, 9, 10, 11, 12, 13]);
    }

    #[test]
    fn split_rejects_ring_bond() {
        let (mol, _) = benzene();
        assert!(matches!(
            split_subtree(&mol, 0, 1),
            Err(FradError::RingBond { .. })
        ));
        assert!(matches!(
            split_subtree(&mol, 0, 3),
            Err(FradError::NoSuchBond(0, 3))
        ));
    }

    #[test]
    fn aspirin_like_breadth_first_order() {
        let (mol, _) = aspirin_heavy();
        let rot = mol.rotatable();
        assert_eq!(rot.len(), 3);
        // both ring-attached axes precede the deeper ester O-C axis
        assert_eq!(rot[0].axis, (0, 6));
        assert_eq!(rot[1].axis, (1, 9));
        assert_eq!(rot[2].axis, (9, 10));
        assert_eq!(rot[0].key_atom, 7);
        assert_eq!(rot[1].key_atom, 10);
        assert_eq!(rot[2].key_atom, 11);
    }

    #[test]
    fn single_atom() {
        let mol = Molecule::new(vec![Element::C], vec![]).unwrap();
        assert!(mol.rotatable().is_empty());
        assert!(mol.ring_bonds().is_empty());
    }

    #[test]
    fn rejects_bad_topology() {
        let c = Element::C;
        assert!(Molecule::new(vec![c, c], vec![Bond::new(0, 2, 1)]).is_err());
        assert!(Molecule::new(vec![c, c], vec![Bond::new(0, 0, 1)]).is_err());
        assert!(Molecule::new(vec![c, c], vec![Bond::new(0, 1, 1), Bond::new(1, 0, 1)]).is_err());
        assert!(Molecule::new(vec![c, c, c], vec![Bond::new(0, 1, 1)]).is_err());
        assert!(Molecule::new(vec![], vec![]).is_err());
    }

    #[test]
    fn rotatable_axes_split_into_two_components() {
        for (mol, _) in [butane(), aspirin_heavy(), propyl_cyclohexane()] {
            for rb in mol.rotatable() {
                assert!(!mol.is_ring_bond(rb.bond));
                assert!(rb.moves(rb.axis.1) && !rb.moves(rb.axis.0));
                assert!(rb.moves(rb.key_atom));
                assert!(mol.bond_between(rb.key_atom, rb.axis.1).is_some());
                // union-find oracle
                let mut parent: Vec<usize> = (0..mol.n_atoms()).collect();
                fn find(p: &mut [usize], x: usize) -> usize {
                    let mut r = x;
                    while p[r] != r {
                        r = p[r];
                    }
                    p[x] = r;
                    r
                }
                for (k, b) in mol.bonds().iter().enumerate() {
                    if k == rb.bond {
                        continue;
                    }
                    let (ri, rj) = (find(&mut parent, b.i), find(&mut parent, b.j));
                    parent[ri] = rj;
                }
                let root_c = find(&mut parent, rb.axis.1);
                let side: Vec<usize> = (0..mol.n_atoms())
                    .filter(|&a| find(&mut parent, a) == root_c)
                    .collect();
                assert_eq!(side, rb.moving_set);
                let roots: BTreeSet<usize> =
                    (0..mol.n_atoms()).map(|a| find(&mut parent, a)).collect();
                assert_eq!(roots.len(), 2);
            }
            assert_eq!(find_rotatable_bonds(&mol), mol.rotatable().to_vec());
        }
    }
}
