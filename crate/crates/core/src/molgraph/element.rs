use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{FradError, Result};

// (symbol, covalent radius in Å)
const TABLE: [(&str, f64); 36] = [
    ("H", 0.31),
    ("He", 0.28),
    ("Li", 1.28),
    ("Be", 0.96),
    ("B", 0.84),
    ("C", 0.76),
    ("N", 0.71),
    ("O", 0.66),
    ("F", 0.57),
    ("Ne", 0.58),
    ("Na", 1.66),
    ("Mg", 1.41),
    ("Al", 1.21),
    ("Si", 1.11),
    ("P", 1.07),
    ("S", 1.05),
    ("Cl", 1.02),
    ("Ar", 1.06),
    ("K", 2.03),
    ("Ca", 1.76),
    ("Sc", 1.70),
    ("Ti", 1.60),
    ("V", 1.53),
    ("Cr", 1.39),
    ("Mn", 1.39),
    ("Fe", 1.32),
    ("Co", 1.26),
    ("Ni", 1.24),
    ("Cu", 1.32),
    ("Zn", 1.22),
    ("Ga", 1.22),
    ("Ge", 1.20),
    ("As", 1.19),
    ("Se", 1.20),
    ("Br", 1.20),
    ("Kr", 1.16),
];

const IODINE: (&str, f64) = ("I", 1.39);

/// A chemical element, identified by atomic number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub const H: Element = Element(1);
    pub const C: Element = Element(6);
    pub const N: Element = Element(7);
    pub const O: Element = Element(8);

    pub fn from_number(z: u8) -> Result<Self> {
        if (1..=36).contains(&z) || z == 53 {
            Ok(Element(z))
        } else {
            Err(FradError::UnknownElement(format!("Z={z}")))
        }
    }

    /// Case-insensitive lookup (`cl`, `CL` and `Cl` are all chlorine).
    pub fn from_symbol(symbol: &str) -> Result<Self> {
        let s = symbol.trim();
        if s.eq_ignore_ascii_case(IODINE.0) {
            return Ok(Element(53));
        }
        TABLE
            .iter()
            .position(|(sym, _)| sym.eq_ignore_ascii_case(s))
            .map(|i| Element(i as u8 + 1))
            .ok_or_else(|| FradError::UnknownElement(s.to_string()))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        self.entry().0
    }

    pub fn covalent_radius(self) -> f64 {
        self.entry().1
    }

    fn entry(self) -> (&'static str, f64) {
        if self.0 == 53 {
            IODINE
        } else {
            TABLE[self.0 as usize - 1]
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl Serialize for Element {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Element {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Element::from_symbol(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbols_round_trip() {
        for z in (1..=36).chain(std::iter::once(53)) {
            let e = Element::from_number(z).unwrap();
            assert_eq!(Element::from_symbol(e.symbol()).unwrap(), e);
        }
        assert_eq!(Element::from_symbol("cl").unwrap().atomic_number(), 17);
        assert!(Element::from_symbol("Xx").is_err());
        assert!(Element::from_number(0).is_err());
    }
}
