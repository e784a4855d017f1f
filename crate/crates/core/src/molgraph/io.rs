//! XYZ and MOL (V2000) readers, XYZ writer, distance-based bond perception.

use std::fmt::Write as _;

use super::{Bond, Conformation, Element, Molecule};
use crate::error::{FradError, Result};

fn parse_err(line: usize, msg: impl Into<String>) -> FradError {
    FradError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(line, format!("cannot parse coordinate `{}`", tok.trim())))
}

/// Parses a standard XYZ block: atom count, comment, then `El x y z` lines.
pub fn parse_xyz(text: &str) -> Result<(Vec<Element>, Conformation)> {
    let mut lines = text.lines();
    let count_line = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let declared: usize = count_line
        .trim()
        .parse()
        .map_err(|_| parse_err(1, format!("bad atom count `{}`", count_line.trim())))?;
    lines.next();

    let mut elements = Vec::with_capacity(declared);
    let mut coords = Vec::with_capacity(3 * declared);
    for (k, line) in lines.enumerate() {
        let lineno = k + 3;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if elements.len() == declared {
            return Err(FradError::CountMismatch {
                declared,
                found: declared + 1,
            });
        }
        if toks.len() < 4 {
            return Err(parse_err(lineno, "expected `element x y z`"));
        }
        elements.push(Element::from_symbol(toks[0])?);
        for t in &toks[1..4] {
            coords.push(parse_f64(t, lineno)?);
        }
    }
    if elements.len() != declared {
        return Err(FradError::CountMismatch {
            declared,
            found: elements.len(),
        });
    }
    Ok((elements, Conformation::new(coords)?))
}

/// XYZ text with 9 decimals per coordinate.
pub fn emit_xyz(elements: &[Element], conf: &Conformation, comment: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", elements.len());
    let _ = writeln!(out, "{}", comment.replace('\n', " "));
    for (a, e) in elements.iter().enumerate() {
        let p = conf.pos(a);
        let _ = writeln!(out, "{:<2} {:.9} {:.9} {:.9}", e.symbol(), p.x, p.y, p.z);
    }
    out
}

fn field(line: &str, start: usize, end: usize) -> Option<&str> {
    let end = end.min(line.len());
    if start >= end {
        return None;
    }
    line.get(start..end).map(str::trim).filter(|s| !s.is_empty())
}

/// Reads the counts line, atom block and bond block of a V2000 MOL file.
/// Everything after the bond block is ignored.
pub fn parse_mol(text: &str) -> Result<(Molecule, Conformation)> {
    let lines: Vec<&str> = text.lines().collect();
    let counts = *lines.get(3).ok_or_else(|| parse_err(4, "missing counts line"))?;
    if !counts.contains("V2000") {
        return Err(FradError::NotV2000(counts.trim().to_string()));
    }
    let (n_atoms, n_bonds) = match (field(counts, 0, 3), field(counts, 3, 6)) {
        (Some(a), Some(b)) => (a.parse::<usize>().ok(), b.parse::<usize>().ok()),
        _ => (None, None),
    };
    let (n_atoms, n_bonds) = match (n_atoms, n_bonds) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(parse_err(4, "cannot read atom/bond counts")),
    };

    let mut elements = Vec::with_capacity(n_atoms);
    let mut coords = Vec::with_capacity(3 * n_atoms);
    let mut ignored = 0usize;
    for k in 0..n_atoms {
        let lineno = 5 + k;
        let line = *lines
            .get(4 + k)
            .ok_or(FradError::CountMismatch {
                declared: n_atoms,
                found: k,
            })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(parse_err(lineno, "short atom line"));
        }
        for t in &toks[0..3] {
            coords.push(parse_f64(t, lineno)?);
        }
        elements.push(Element::from_symbol(toks[3])?);
        // mass difference, charge, stereo parity
        if toks[4..].iter().take(3).any(|t| *t != "0") {
            ignored += 1;
        }
    }
    if ignored > 0 {
        log::warn!("ignored charge/isotope/stereo fields on {ignored} atom line(s)");
    }

    let mut bonds = Vec::with_capacity(n_bonds);
    for k in 0..n_bonds {
        let lineno = 5 + n_atoms + k;
        let line = *lines
            .get(4 + n_atoms + k)
            .ok_or_else(|| parse_err(lineno, "bond block shorter than declared"))?;
        let fixed = (field(line, 0, 3), field(line, 3, 6), field(line, 6, 9));
        let nums: Vec<usize> = match fixed {
            (Some(a), Some(b), Some(c)) if [a, b, c].iter().all(|t| t.parse::<usize>().is_ok()) => {
                [a, b, c].iter().map(|t| t.parse().unwrap()).collect()
            }
            _ => line
                .split_whitespace()
                .take(3)
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(lineno, "cannot read bond line"))?,
        };
        if nums.len() < 3 {
            return Err(parse_err(lineno, "short bond line"));
        }
        for &atom in &nums[..2] {
            if atom == 0 || atom > n_atoms {
                return Err(FradError::BondOutOfRange {
                    bond: k,
                    atom,
                    n_atoms,
                });
            }
        }
        let order = match nums[2] {
            1..=3 => nums[2] as u8,
            // aromatic (4) and query types collapse to single bonds
            _ => 1,
        };
        bonds.push(Bond::new(nums[0] - 1, nums[1] - 1, order));
    }
    let mol = Molecule::new(elements, bonds)?;
    Ok((mol, Conformation::new(coords)?))
}

/// Single bonds between atoms closer than `1.2 x` the sum of covalent radii.
pub fn perceive_bonds(elements: &[Element], conf: &Conformation) -> Result<Molecule> {
    let mut bonds = Vec::new();
    for i in 0..elements.len() {
        for j in (i + 1)..elements.len() {
            let cutoff = 1.2 * (elements[i].covalent_radius() + elements[j].covalent_radius());
            let d = conf.distance(i, j);
            if d == 0.0 {
                return Err(FradError::CoincidentAtoms { i, j });
            }
            if d < cutoff {
                bonds.push(Bond::new(i, j, 1));
            }
        }
    }
    Molecule::new(elements.to_vec(), bonds)
}

/// V2000 MOL text (no properties block beyond `M  END`).
pub fn emit_mol(mol: &Molecule, conf: &Conformation, title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "  frad");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>3}{:>3}  0  0  0  0  0  0  0  0999 V2000",
        mol.n_atoms(),
        mol.bonds().len()
    );
    for (a, e) in mol.atoms().iter().enumerate() {
        let p = conf.pos(a);
        let _ = writeln!(
            out,
            "{:>10.4}{:>10.4}{:>10.4} {:<3} 0  0  0  0  0  0  0  0  0  0  0  0",
            p.x,
            p.y,
            p.z,
            e.symbol()
        );
    }
    for b in mol.bonds() {
        let _ = writeln!(out, "{:>3}{:>3}{:>3}  0", b.i + 1, b.j + 1, b.order);
    }
    out.push_str("M  END\n");
    out
}
