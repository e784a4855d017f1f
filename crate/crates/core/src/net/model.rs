use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use super::tape::{Tape, Tensor, Var};
use super::{ModelParams, N_TYPES};
use crate::error::{FradError, Result};
use crate::molgraph::{Conformation, Element};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-8;

/// Scalar and vector features after the last update layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    /// `N × F`, row-major.
    pub u: Vec<f64>,
    /// One `N × F` block per Cartesian axis.
    pub v: [Vec<f64>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Predicted noise, `3N`, atom-major.
    pub noise: Vec<f64>,
    pub property: f64,
    pub state: NodeState,
}

/// Parameter tensors as tape leaves, by slot name.
pub(crate) struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub(crate) fn new(tape: &mut Tape, p: &ModelParams) -> Self {
        let mut vars = Vec::with_capacity(p.slots().len());
        let mut index = HashMap::new();
        for (k, s) in p.slots().iter().enumerate() {
            let data = p.flat()[s.offset..s.offset + s.rows * s.cols].to_vec();
            vars.push(tape.leaf(Tensor::new(s.rows, s.cols, data)));
            index.insert(s.name.clone(), k);
        }
        Self { vars, index }
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    /// Gradient of `loss` as a flat vector in layout order.
    pub(crate) fn flat_grad(&self, tape: &mut Tape, loss: Var, p: &ModelParams) -> Vec<f64> {
        let grads = tape.grad(loss, &self.vars);
        let mut out = vec![0.0; p.len()];
        for (s, g) in p.slots().iter().zip(grads) {
            if let Some(g) = g {
                out[s.offset..s.offset + s.rows * s.cols].copy_from_slice(&tape.value(g).data);
            }
        }
        out
    }
}

pub(crate) struct Encoded {
    pub u: Var,
    pub v: [Var; 3],
    /// Position leaves, one `N × 1` column per axis.
    pub pos: [Var; 3],
    pub n: usize,
}

fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let m = t.matmul(x, w);
    t.add_row(m, b)
}

pub(crate) fn encode(t: &mut Tape, pv: &ParamVars, p: &ModelParams, atoms: &[Element], x: &Conformation) -> Result<Encoded> {
    let n = atoms.len();
    if n == 0 {
        return Err(FradError::Precondition("forward needs at least one atom".into()));
    }
    x.check_atoms(n)?;
    if let Some(k) = x.as_slice().iter().position(|c| !c.is_finite()) {
        return Err(FradError::Precondition(format!("coordinate {k} is not finite")));
    }
    let h = p.hyper;
    let f = h.features;
    let z: Vec<usize> = atoms.iter().map(|e| e.atomic_number() as usize).collect();
    if let Some(&bad) = z.iter().find(|&&zz| zz >= N_TYPES) {
        return Err(FradError::Precondition(format!("atomic number {bad} has no embedding")));
    }

    // Neighbor list: ordered pairs within the cutoff, ascending (i, j).
    let (mut ei, mut ej) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = x.distance(i, j);
            if r == 0.0 {
                return Err(FradError::CoincidentAtoms { i: i.min(j), j: i.max(j) });
            }
            if r < h.cutoff {
                ei.push(i);
                ej.push(j);
            }
        }
    }
    let zj: Vec<usize> = ej.iter().map(|&j| z[j]).collect();
    let (ei, ej, zi, zj) = (Rc::new(ei), Rc::new(ej), Rc::new(z), Rc::new(zj));

    let pos = [0, 1, 2].map(|d| t.leaf(Tensor::column((0..n).map(|a| x.as_slice()[3 * a + d]).collect())));
    let mut sq = None;
    let mut dvec = Vec::with_capacity(3);
    for &pd in &pos {
        let a = t.gather(pd, ej.clone());
        let b = t.gather(pd, ei.clone());
        let d = t.sub(a, b);
        let s = t.square(d);
        sq = Some(match sq {
            None => s,
            Some(acc) => t.add(acc, s),
        });
        dvec.push(d);
    }
    let r = t.sqrt(sq.expect("three axes"));
    let inv_r = t.recip(r);
    let rhat: Vec<Var> = dvec.iter().map(|&d| t.mul(d, inv_r)).collect();

    // Cosine cutoff.
    let scaled = t.scale(r, PI / h.cutoff);
    let c = t.cos(scaled);
    let c1 = t.add_scalar(c, 1.0);
    let phi = t.scale(c1, 0.5);

    // Gaussian radial basis on [0, cutoff].
    let k = h.rbf;
    let step = h.cutoff / (k - 1) as f64;
    let gamma = 0.5 / (step * step);
    let neg_mu = t.leaf(Tensor::row((0..k).map(|q| -(q as f64) * step).collect()));
    let re = t.expand_cols(r, k);
    let diff = t.add_row(re, neg_mu);
    let d2 = t.square(diff);
    let arg = t.scale(d2, -gamma);
    let rbf = t.exp(arg);

    // Embedding: atom type plus cutoff-filtered neighbor types.
    let emb = t.gather(pv.get("embed"), zi);
    let nemb = t.gather(pv.get("nbr_embed"), zj);
    let w = linear(t, rbf, pv.get("nbr_filter_w"), pv.get("nbr_filter_b"));
    let w = t.mul_col(w, phi);
    let msg = t.mul(w, nemb);
    let nbr = t.scatter_add(msg, ei.clone(), n);
    let a = t.matmul(emb, pv.get("comb_self"));
    let b = t.matmul(nbr, pv.get("comb_nbr"));
    let ab = t.add(a, b);
    let mut u = t.add_row(ab, pv.get("comb_b"));
    let zero = t.leaf(Tensor::zeros(n, f));
    let mut v = [zero; 3];

    for l in 0..h.layers {
        let g = |s: &str| pv.get(&format!("l{l}.{s}"));
        let q = t.matmul(u, g("wq"));
        let kk = t.matmul(u, g("wk"));
        let d1l = linear(t, rbf, g("d1_w"), g("d1_b"));
        let d1 = t.silu(d1l);
        let qi = t.gather(q, ei.clone());
        let kj = t.gather(kk, ej.clone());
        let qk = t.mul(qi, kj);
        let qkd = t.mul(qk, d1);
        let dot = t.sum_cols(qkd);
        let att = t.silu(dot);
        let att = t.mul(att, phi);

        let mut s = Vec::with_capacity(3);
        for m in 1..=3 {
            let val = t.matmul(u, g(&format!("wv{m}")));
            let dl = linear(t, rbf, g(&format!("d2_w{m}")), g(&format!("d2_b{m}")));
            let d2 = t.silu(dl);
            let d2 = t.mul_col(d2, phi);
            let vj = t.gather(val, ej.clone());
            s.push(t.mul(vj, d2));
        }
        let weighted = t.mul_col(s[2], att);
        let y = t.scatter_add(weighted, ei.clone(), n);
        let qs: Vec<Var> = (1..=3)
            .map(|m| linear(t, y, g(&format!("wo{m}")), g(&format!("wo_b{m}"))))
            .collect();
        let lin: Vec<[Var; 3]> = (1..=3)
            .map(|m| {
                let w = g(&format!("vec{m}"));
                [0, 1, 2].map(|d| t.matmul(v[d], w))
            })
            .collect();

        let mut ip = t.mul(lin[0][0], lin[1][0]);
        for d in 1..3 {
            let p = t.mul(lin[0][d], lin[1][d]);
            ip = t.add(ip, p);
        }
        let gated = t.mul(qs[1], ip);
        let du = t.add(qs[0], gated);

        let mut new_v = v;
        for d in 0..3 {
            let vj = t.gather(v[d], ej.clone());
            let m1 = t.mul(s[0], vj);
            let m2 = t.mul_col(s[1], rhat[d]);
            let m = t.add(m1, m2);
            let agg = t.scatter_add(m, ei.clone(), n);
            let gate = t.mul(qs[2], lin[2][d]);
            let dv = t.add(agg, gate);
            new_v[d] = t.add(v[d], dv);
        }

        let un = t.add(u, du);
        u = layer_norm(t, un, g("ln_gain"), f);
        v = vector_norm(t, new_v, g("vn_gain"), f);
    }
    Ok(Encoded { u, v, pos, n })
}

fn layer_norm(t: &mut Tape, x: Var, gain: Var, f: usize) -> Var {
    let s = t.sum_cols(x);
    let mean = t.scale(s, 1.0 / f as f64);
    let me = t.expand_cols(mean, f);
    let c = t.sub(x, me);
    let c2 = t.square(c);
    let vs = t.sum_cols(c2);
    let var = t.scale(vs, 1.0 / f as f64);
    let ve = t.add_scalar(var, LN_EPS);
    let sd = t.sqrt(ve);
    let inv = t.recip(sd);
    let xn = t.mul_col(c, inv);
    t.mul_row(xn, gain)
}

/// Divides every vector channel by `sqrt(1 + mean_f ‖v_f‖²)`, then applies a
/// per-channel gain. Rotations commute with it. The unit floor keeps it
/// continuous as vectors vanish (a neighbor leaving the cutoff); a pure RMS
/// division would blow a vanishing vector back up to unit scale.
fn vector_norm(t: &mut Tape, v: [Var; 3], gain: Var, f: usize) -> [Var; 3] {
    let mut ss = None;
    for d in v {
        let sq = t.square(d);
        let s = t.sum_cols(sq);
        ss = Some(match ss {
            None => s,
            Some(acc) => t.add(acc, s),
        });
    }
    let ms = t.scale(ss.expect("three axes"), 1.0 / f as f64);
    let me = t.add_scalar(ms, 1.0);
    let rms = t.sqrt(me);
    let inv = t.recip(rms);
    v.map(|d| {
        let s = t.mul_col(d, inv);
        t.mul_row(s, gain)
    })
}

/// Per-channel vector norm, smoothed at zero.
fn channel_norm(t: &mut Tape, v: &[Var; 3]) -> Var {
    let mut acc = t.square(v[0]);
    for d in &v[1..] {
        let s = t.square(*d);
        acc = t.add(acc, s);
    }
    let e = t.add_scalar(acc, NORM_EPS);
    t.sqrt(e)
}

/// Gated equivariant block: scalars from `(x, ‖v Wa‖)`, vectors `v Wb` gated
/// by a scalar channel. Vectors pass through linear maps only, so a zero
/// vector input gives a zero vector output.
fn gated(t: &mut Tape, pv: &ParamVars, pre: &str, x: Var, v: [Var; 3], last: bool) -> (Option<Var>, [Var; 3]) {
    let g = |s: &str| pv.get(&format!("{pre}_{s}"));
    let va = [0, 1, 2].map(|d| t.matmul(v[d], g("wa")));
    let vb = [0, 1, 2].map(|d| t.matmul(v[d], g("wb")));
    let nrm = channel_norm(t, &va);
    let a = t.matmul(x, g("wu"));
    let b = t.matmul(nrm, g("wn"));
    let ab = t.add(a, b);
    let hl = t.add_row(ab, g("b"));
    let h = t.silu(hl);
    let gate = linear(t, h, g("wg"), g("bg"));
    let out_v = vb.map(|d| t.mul(d, gate));
    let out_x = if last {
        None
    } else {
        let xl = linear(t, h, g("wx"), g("bx"));
        Some(t.silu(xl))
    };
    (out_x, out_v)
}

/// Per-atom 3-vectors, one `N × 1` column per axis.
pub(crate) fn noise_head(t: &mut Tape, pv: &ParamVars, enc: &Encoded) -> [Var; 3] {
    let (x, v) = gated(t, pv, "nh1", enc.u, enc.v, false);
    let (_, out) = gated(t, pv, "nh2", x.expect("hidden scalars"), v, true);
    out
}

/// Sum-pooled scalar in label units.
pub(crate) fn prop_head(t: &mut Tape, pv: &ParamVars, p: &ModelParams, enc: &Encoded) -> Var {
    let hl = linear(t, enc.u, pv.get("ph_w1"), pv.get("ph_b1"));
    let h = t.silu(hl);
    let e = linear(t, h, pv.get("ph_w2"), pv.get("ph_b2"));
    let s = t.sum_all(e);
    let s = t.scale(s, p.prop_scale);
    t.add_scalar(s, p.prop_shift)
}

pub(crate) fn interleave(t: &Tape, cols: &[Var; 3]) -> Vec<f64> {
    let n = t.value(cols[0]).rows;
    let mut out = Vec::with_capacity(3 * n);
    for a in 0..n {
        for c in cols {
            out.push(t.value(*c).data[a]);
        }
    }
    out
}

pub fn forward(params: &ModelParams, atoms: &[Element], x: &Conformation) -> Result<ModelOutput> {
    let mut t = Tape::new();
    let pv = ParamVars::new(&mut t, params);
    let enc = encode(&mut t, &pv, params, atoms, x)?;
    let noise = noise_head(&mut t, &pv, &enc);
    let prop = prop_head(&mut t, &pv, params, &enc);
    Ok(ModelOutput {
        noise: interleave(&t, &noise),
        property: t.scalar(prop),
        state: NodeState {
            u: t.value(enc.u).data.clone(),
            v: enc.v.map(|d| t.value(d).data.clone()),
        },
    })
}

/// Predicted energy and forces `-∇E`, atom-major.
pub fn property_and_forces(params: &ModelParams, atoms: &[Element], x: &Conformation) -> Result<(f64, Vec<f64>)> {
    let mut t = Tape::new();
    let pv = ParamVars::new(&mut t, params);
    let enc = encode(&mut t, &pv, params, atoms, x)?;
    let e = prop_head(&mut t, &pv, params, &enc);
    let g = t.grad(e, &enc.pos);
    let zero = Tensor::zeros(enc.n, 1);
    let cols: Vec<Tensor> = g.iter().map(|gv| gv.map_or(zero.clone(), |v| t.value(v).clone())).collect();
    let mut f = Vec::with_capacity(3 * enc.n);
    for a in 0..enc.n {
        for c in &cols {
            f.push(-c.data[a]);
        }
    }
    Ok((t.scalar(e), f))
}
