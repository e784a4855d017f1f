use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::model::{encode, noise_head, prop_head, Encoded, ParamVars};
use super::tape::{Tape, Tensor, Var};
use super::ModelParams;
use crate::error::{FradError, Result};
use crate::molgraph::{Conformation, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Predict the coordinate-noise part of a hybrid corruption.
    Frad,
    /// Same loss on coordinate noise alone.
    Coord,
    /// Property loss on the clean input.
    Finetune,
    /// One noisy input feeds both heads.
    NoisyNodes,
    /// Clean input feeds the property head, a separate noisy input the
    /// noise head.
    FradNoisyNodes,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = FradError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "frad" => Self::Frad,
            "coord" => Self::Coord,
            "finetune" => Self::Finetune,
            "noisy_nodes" | "finetune+noisynodes" => Self::NoisyNodes,
            "frad_noisy_nodes" | "frad_nn" => Self::FradNoisyNodes,
            other => return Err(FradError::Config(format!("unknown objective `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub lambda_p: f64,
    pub lambda_n: f64,
    /// Force and energy weights for energy-force labels.
    pub w_f: f64,
    pub w_e: f64,
}

impl Objective {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            lambda_p: 1.0,
            lambda_n: 0.1,
            w_f: 0.8,
            w_e: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_p, self.lambda_n, self.w_f, self.w_e];
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(FradError::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.lambda_p + self.lambda_n <= 0.0 {
            return Err(FradError::Config("lambda_p + lambda_n must be > 0".into()));
        }
        Ok(())
    }
}

/// A noisy input and the coordinate noise it carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoise {
    pub x_fin: Conformation,
    /// `x_fin - x_med`, atom-major.
    pub target: Vec<f64>,
    /// The coordinate-noise std used for the draw; targets are divided by it
    /// when positive.
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Scalar(f64),
    EnergyForces { energy: f64, forces: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Supervised {
    pub x: Conformation,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub atoms: Vec<Element>,
    pub denoise: Option<Denoise>,
    pub supervised: Option<Supervised>,
}

/// Batch-mean loss, its gradient, and which conformations fed each head.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub prop_loss: f64,
    pub denoise_loss: f64,
    /// Per sample, a hash of the conformation that fed the property head.
    pub prop_inputs: Vec<Option<u64>>,
    /// Per sample, a hash of the conformation that fed the noise head.
    pub denoise_inputs: Vec<Option<u64>>,
}

fn conf_hash(x: &Conformation) -> u64 {
    let mut h = DefaultHasher::new();
    for v in x.as_slice() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn column_const(t: &mut Tape, flat: &[f64], d: usize) -> Var {
    t.leaf(Tensor::column(flat.iter().skip(d).step_by(3).copied().collect()))
}

/// Mean over components of `(pred - target / s)²`, `s = tau` when positive.
fn denoise_loss(t: &mut Tape, pv: &ParamVars, enc: &Encoded, d: &Denoise) -> Result<Var> {
    if d.target.len() != 3 * enc.n {
        return Err(FradError::Dimension {
            expected: 3 * enc.n,
            got: d.target.len(),
        });
    }
    let s = if d.tau > 0.0 { d.tau } else { 1.0 };
    let scaled: Vec<f64> = d.target.iter().map(|v| v / s).collect();
    let pred = noise_head(t, pv, enc);
    sq_error(t, &pred, &scaled)
}

fn sq_error(t: &mut Tape, pred: &[Var; 3], target: &[f64]) -> Result<Var> {
    let mut acc = None;
    for (d, &p) in pred.iter().enumerate() {
        let c = column_const(t, target, d);
        let e = t.sub(p, c);
        let e2 = t.square(e);
        let s = t.sum_all(e2);
        acc = Some(match acc {
            None => s,
            Some(a) => t.add(a, s),
        });
    }
    let acc = acc.expect("three axes");
    Ok(t.scale(acc, 1.0 / target.len().max(1) as f64))
}

fn prop_loss(t: &mut Tape, pv: &ParamVars, p: &ModelParams, enc: &Encoded, label: &Label, obj: &Objective) -> Result<Var> {
    let y = prop_head(t, pv, p, enc);
    match label {
        Label::Scalar(v) => {
            let c = t.leaf(Tensor::filled(1, 1, *v));
            let e = t.sub(y, c);
            Ok(t.square(e))
        }
        Label::EnergyForces { energy, forces } => {
            if forces.len() != 3 * enc.n {
                return Err(FradError::Dimension {
                    expected: 3 * enc.n,
                    got: forces.len(),
                });
            }
            let g = t.grad(y, &enc.pos);
            let mut pred = [y; 3];
            for d in 0..3 {
                // Forces are -∇E; an input the energy ignores has zero force.
                pred[d] = match g[d] {
                    Some(gv) => t.scale(gv, -1.0),
                    None => t.leaf(Tensor::zeros(enc.n, 1)),
                };
            }
            let fl = sq_error(t, &pred, forces)?;
            let c = t.leaf(Tensor::filled(1, 1, *energy));
            let e = t.sub(y, c);
            let el = t.square(e);
            let a = t.scale(fl, obj.w_f);
            let b = t.scale(el, obj.w_e);
            Ok(t.add(a, b))
        }
    }
}

fn need<'a, T>(x: &'a Option<T>, id: usize, what: &str) -> Result<&'a T> {
    x.as_ref()
        .ok_or_else(|| FradError::Precondition(format!("sample {id} has no {what} data")))
}

struct SampleOut {
    loss: f64,
    grad: Vec<f64>,
    prop: f64,
    denoise: f64,
    hp: Option<u64>,
    hn: Option<u64>,
}

fn sample_loss(params: &ModelParams, s: &Sample, obj: &Objective, with_grad: bool) -> Result<SampleOut> {
    let mut t = Tape::new();
    let pv = ParamVars::new(&mut t, params);
    let (mut lp, mut ln) = (None, None);
    let (mut hp, mut hn) = (None, None);
    match obj.kind {
        ObjectiveKind::Frad | ObjectiveKind::Coord => {
            let d = need(&s.denoise, s.id, "denoising")?;
            let enc = encode(&mut t, &pv, params, &s.atoms, &d.x_fin)?;
            ln = Some(denoise_loss(&mut t, &pv, &enc, d)?);
            hn = Some(conf_hash(&d.x_fin));
        }
        ObjectiveKind::Finetune => {
            let sup = need(&s.supervised, s.id, "label")?;
            let enc = encode(&mut t, &pv, params, &s.atoms, &sup.x)?;
            lp = Some(prop_loss(&mut t, &pv, params, &enc, &sup.label, obj)?);
            hp = Some(conf_hash(&sup.x));
        }
        ObjectiveKind::NoisyNodes => {
            let d = need(&s.denoise, s.id, "denoising")?;
            let sup = need(&s.supervised, s.id, "label")?;
            let enc = encode(&mut t, &pv, params, &s.atoms, &d.x_fin)?;
            lp = Some(prop_loss(&mut t, &pv, params, &enc, &sup.label, obj)?);
            ln = Some(denoise_loss(&mut t, &pv, &enc, d)?);
            hp = Some(conf_hash(&d.x_fin));
            hn = hp;
        }
        ObjectiveKind::FradNoisyNodes => {
            let d = need(&s.denoise, s.id, "denoising")?;
            let sup = need(&s.supervised, s.id, "label")?;
            let clean = encode(&mut t, &pv, params, &s.atoms, &sup.x)?;
            lp = Some(prop_loss(&mut t, &pv, params, &clean, &sup.label, obj)?);
            let noisy = encode(&mut t, &pv, params, &s.atoms, &d.x_fin)?;
            ln = Some(denoise_loss(&mut t, &pv, &noisy, d)?);
            hp = Some(conf_hash(&sup.x));
            hn = Some(conf_hash(&d.x_fin));
        }
    }
    let (wp, wn) = match obj.kind {
        ObjectiveKind::Frad | ObjectiveKind::Coord | ObjectiveKind::Finetune => (1.0, 1.0),
        _ => (obj.lambda_p, obj.lambda_n),
    };
    let total = match (lp, ln) {
        (Some(a), Some(b)) => {
            let a = t.scale(a, wp);
            let b = t.scale(b, wn);
            t.add(a, b)
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("every objective has a branch"),
    };
    let loss = t.scalar(total);
    if !loss.is_finite() {
        return Err(FradError::NonFiniteLoss { sample: s.id });
    }
    let grad = if with_grad { pv.flat_grad(&mut t, total, params) } else { Vec::new() };
    Ok(SampleOut {
        loss,
        grad,
        prop: lp.map_or(0.0, |v| t.scalar(v)),
        denoise: ln.map_or(0.0, |v| t.scalar(v)),
        hp,
        hn,
    })
}

/// Batch objective value without the backward pass. Matches
/// `loss_and_grad(..).loss` bit for bit.
pub fn loss(params: &ModelParams, batch: &[Sample], obj: &Objective) -> Result<f64> {
    if batch.is_empty() {
        return Err(FradError::Precondition("empty batch".into()));
    }
    obj.validate()?;
    let mut total = 0.0;
    for s in batch {
        total += sample_loss(params, s, obj, false)?.loss;
    }
    Ok(total / batch.len() as f64)
}

/// Objective value and gradient for one batch: per-sample gradients summed
/// in batch order, then divided by the batch size.
pub fn loss_and_grad(params: &ModelParams, batch: &[Sample], obj: &Objective) -> Result<LossOutput> {
    loss_and_grad_threads(params, batch, obj, 1)
}

/// As [`loss_and_grad`], with samples spread over `threads` workers. The
/// reduction order is the batch order, so the result does not depend on
/// the thread count.
pub fn loss_and_grad_threads(params: &ModelParams, batch: &[Sample], obj: &Objective, threads: usize) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(FradError::Precondition("empty batch".into()));
    }
    obj.validate()?;
    let threads = threads.clamp(1, batch.len());
    let per: Vec<Result<SampleOut>> = if threads == 1 {
        batch.iter().map(|s| sample_loss(params, s, obj, true)).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|sc| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|c| sc.spawn(move || c.iter().map(|s| sample_loss(params, s, obj, true)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut out = LossOutput {
        loss: 0.0,
        grad: vec![0.0; params.len()],
        prop_loss: 0.0,
        denoise_loss: 0.0,
        prop_inputs: Vec::with_capacity(batch.len()),
        denoise_inputs: Vec::with_capacity(batch.len()),
    };
    for r in per {
        let s = r?;
        for (o, v) in out.grad.iter_mut().zip(&s.grad) {
            *o += v;
        }
        out.loss += s.loss;
        out.prop_loss += s.prop;
        out.denoise_loss += s.denoise;
        out.prop_inputs.push(s.hp);
        out.denoise_inputs.push(s.hn);
    }
    let b = batch.len() as f64;
    out.loss /= b;
    out.prop_loss /= b;
    out.denoise_loss /= b;
    for g in &mut out.grad {
        *g /= b;
    }
    Ok(out)
}
