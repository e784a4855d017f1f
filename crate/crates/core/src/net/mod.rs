//! A small equivariant attention network with a noise head and a property
//! head, differentiated by the tape in [`tape`].

mod model;
mod objective;
pub mod tape;

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FradError, Result};
use crate::rng::FradRng;

pub use model::{forward, property_and_forces, ModelOutput, NodeState};
pub use objective::{loss, loss_and_grad, loss_and_grad_threads, Denoise, Label, LossOutput, Objective, ObjectiveKind, Sample, Supervised};

/// One past the largest supported atomic number; embedding rows are indexed
/// by atomic number.
pub const N_TYPES: usize = 54;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub layers: usize,
    pub features: usize,
    pub rbf: usize,
    pub cutoff: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            layers: 3,
            features: 32,
            rbf: 16,
            cutoff: 5.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.features < 2 || self.rbf < 2 || !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return Err(FradError::Precondition(format!("invalid hyperparameters {self:?}")));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.features / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Embed,
    /// Standard normal scaled by `1/sqrt(fan_in)`; fan-in is the row count.
    Linear,
    Zero,
    One,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    init: Init,
}

/// Names, shapes and offsets of every parameter tensor in the flat vector.
fn layout(h: &Hyper) -> Vec<Slot> {
    let (f, k, hd) = (h.features, h.rbf, h.hidden());
    let mut spec: Vec<(String, usize, usize, Init)> = vec![
        ("embed".into(), N_TYPES, f, Init::Embed),
        ("nbr_embed".into(), N_TYPES, f, Init::Embed),
        ("nbr_filter_w".into(), k, f, Init::Linear),
        ("nbr_filter_b".into(), 1, f, Init::Zero),
        ("comb_self".into(), f, f, Init::Linear),
        ("comb_nbr".into(), f, f, Init::Linear),
        ("comb_b".into(), 1, f, Init::Zero),
    ];
    for l in 0..h.layers {
        let p = |s: &str| format!("l{l}.{s}");
        spec.push((p("wq"), f, f, Init::Linear));
        spec.push((p("wk"), f, f, Init::Linear));
        spec.push((p("d1_w"), k, f, Init::Linear));
        spec.push((p("d1_b"), 1, f, Init::Zero));
        for t in 1..=3 {
            spec.push((p(&format!("wv{t}")), f, f, Init::Linear));
            spec.push((p(&format!("d2_w{t}")), k, f, Init::Linear));
            spec.push((p(&format!("d2_b{t}")), 1, f, Init::Zero));
            spec.push((p(&format!("wo{t}")), f, f, Init::Linear));
            spec.push((p(&format!("wo_b{t}")), 1, f, Init::Zero));
            spec.push((p(&format!("vec{t}")), f, f, Init::Linear));
        }
        spec.push((p("ln_gain"), 1, f, Init::One));
        spec.push((p("vn_gain"), 1, f, Init::One));
    }
    spec.extend([
        ("nh1_wa".into(), f, f, Init::Linear),
        ("nh1_wb".into(), f, hd, Init::Linear),
        ("nh1_wu".into(), f, f, Init::Linear),
        ("nh1_wn".into(), f, f, Init::Linear),
        ("nh1_b".into(), 1, f, Init::Zero),
        ("nh1_wx".into(), f, hd, Init::Linear),
        ("nh1_bx".into(), 1, hd, Init::Zero),
        ("nh1_wg".into(), f, hd, Init::Linear),
        ("nh1_bg".into(), 1, hd, Init::Zero),
        ("nh2_wa".into(), hd, hd, Init::Linear),
        ("nh2_wb".into(), hd, 1, Init::Linear),
        ("nh2_wu".into(), hd, hd, Init::Linear),
        ("nh2_wn".into(), hd, hd, Init::Linear),
        ("nh2_b".into(), 1, hd, Init::Zero),
        ("nh2_wg".into(), hd, 1, Init::Linear),
        ("nh2_bg".into(), 1, 1, Init::Zero),
        ("ph_w1".into(), f, hd, Init::Linear),
        ("ph_b1".into(), 1, hd, Init::Zero),
        ("ph_w2".into(), hd, 1, Init::Linear),
        ("ph_b2".into(), 1, 1, Init::Zero),
    ]);
    let mut offset = 0;
    spec.into_iter()
        .map(|(name, rows, cols, init)| {
            let s = Slot {
                name,
                rows,
                cols,
                offset,
                init,
            };
            offset += rows * cols;
            s
        })
        .collect()
}

/// Network weights as one flat vector plus the layout that slices it.
///
/// `prop_shift` and `prop_scale` map the summed head output to label units
/// (`y = scale * Σ e_i + shift`); they are set from training labels and are
/// not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub prop_shift: f64,
    pub prop_scale: f64,
    flat: Vec<f64>,
    slots: Vec<Slot>,
}

impl ModelParams {
    pub fn init(hyper: Hyper, rng: &mut FradRng) -> Result<Self> {
        hyper.validate()?;
        let slots = layout(&hyper);
        let mut flat = Vec::with_capacity(slots.last().map_or(0, |s| s.offset + s.rows * s.cols));
        for s in &slots {
            let scale = 1.0 / (s.rows as f64).sqrt();
            for _ in 0..s.rows * s.cols {
                flat.push(match s.init {
                    Init::Embed => rng.random_range(-0.1..0.1),
                    Init::Linear => {
                        let z: f64 = StandardNormal.sample(rng);
                        z * scale
                    }
                    Init::Zero => 0.0,
                    Init::One => 1.0,
                });
            }
        }
        Ok(Self {
            hyper,
            prop_shift: 0.0,
            prop_scale: 1.0,
            flat,
            slots,
        })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Copy with a new flat vector of the same length.
    pub fn with_flat(&self, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != self.flat.len() {
            return Err(FradError::Dimension {
                expected: self.flat.len(),
                got: flat.len(),
            });
        }
        if let Some(k) = flat.iter().position(|x| !x.is_finite()) {
            return Err(FradError::Precondition(format!("parameter {k} is not finite")));
        }
        Ok(Self { flat, ..self.clone() })
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|x| x.is_finite()) && self.prop_shift.is_finite() && self.prop_scale.is_finite()
    }

    /// Flat indices belonging to the property head.
    pub fn prop_head_range(&self) -> std::ops::Range<usize> {
        let first = self.slot("ph_w1").expect("layout has a property head");
        first.offset..self.flat.len()
    }

    /// Flat indices belonging to the noise head.
    pub fn noise_head_range(&self) -> std::ops::Range<usize> {
        let first = self.slot("nh1_wa").expect("layout has a noise head");
        first.offset..self.prop_head_range().start
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [self.hyper.layers, self.hyper.features, self.hyper.rbf] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in [self.hyper.cutoff, self.prop_shift, self.prop_scale] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.flat.len() as u64).to_le_bytes())?;
        for v in &self.flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| FradError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(FradError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            Ok(b8)
        };
        let layers = u64::from_le_bytes(next(&mut r)?) as usize;
        let features = u64::from_le_bytes(next(&mut r)?) as usize;
        let rbf = u64::from_le_bytes(next(&mut r)?) as usize;
        let cutoff = f64::from_le_bytes(next(&mut r)?);
        let prop_shift = f64::from_le_bytes(next(&mut r)?);
        let prop_scale = f64::from_le_bytes(next(&mut r)?);
        let n = u64::from_le_bytes(next(&mut r)?) as usize;
        let hyper = Hyper {
            layers,
            features,
            rbf,
            cutoff,
        };
        hyper.validate()?;
        let slots = layout(&hyper);
        let expected = slots.last().map_or(0, |s| s.offset + s.rows * s.cols);
        if n != expected {
            return Err(FradError::Checkpoint(format!("{n} parameters, layout needs {expected}")));
        }
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            flat.push(f64::from_le_bytes(next(&mut r)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let p = Self {
            hyper,
            prop_shift,
            prop_scale,
            flat,
            slots,
        };
        if !p.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(p)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FRADNET\0";
const CHECKPOINT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips() {
        let mut p = ModelParams::init(Hyper::default(), &mut FradRng::new(3, 0)).unwrap();
        p.prop_shift = 1.5;
        p.prop_scale = 0.25;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ModelParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert!(ModelParams::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ModelParams::read_checkpoint(bad.as_slice()).is_err());
    }

    #[test]
    fn flat_view_round_trips() {
        let p = ModelParams::init(Hyper::default(), &mut FradRng::new(1, 0)).unwrap();
        let q = p.with_flat(p.flat().to_vec()).unwrap();
        assert_eq!(p, q);
        assert!(p.with_flat(vec![0.0; 3]).is_err());
        let last = p.slots().last().unwrap();
        assert_eq!(last.offset + last.rows * last.cols, p.len());
    }
}
