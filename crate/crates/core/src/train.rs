//! Denoising pre-training, Noisy Nodes fine-tuning and evaluation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FradError, Result};
use crate::geometry::noise::{apply_can, apply_cgn, NoiseKind, NoiseSpec};
use crate::metrics::Metrics;
use crate::molgraph::{Conformation, Molecule};
use crate::net::{
    forward, loss_and_grad_threads, property_and_forces, Denoise, Label, ModelParams, Objective, ObjectiveKind, Sample,
    Supervised,
};
use crate::pes::{energy_and_forces, Dataset};
use crate::rng::{stream_id, FradRng};

/// Item id used for the per-epoch shuffle stream.
const SHUFFLE_ITEM: u64 = u32::MAX as u64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup: usize,
    /// Cosine cycle length in steps after warmup; `None` spans the run.
    pub cycle: Option<usize>,
    /// The schedule ends at `lr * floor`.
    pub floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup: 100,
            cycle: None,
            floor: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Step size at `step` (0-based) for a run of `total` steps: linear from 0
/// over `warmup` steps, then cosine down to `lr * floor`.
pub fn learning_rate(o: &OptimConfig, step: usize, total: usize) -> f64 {
    if step < o.warmup {
        return o.lr * step as f64 / o.warmup as f64;
    }
    let cycle = o.cycle.unwrap_or(total.saturating_sub(o.warmup)).max(1);
    let frac = ((step - o.warmup) as f64 / cycle as f64).min(1.0);
    let lo = o.lr * o.floor;
    lo + 0.5 * (o.lr - lo) * (1.0 + (PI * frac).cos())
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, o: &OptimConfig, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - o.beta1.powi(self.t);
        let b2t = 1.0 - o.beta2.powi(self.t);
        for k in 0..x.len() {
            self.m[k] = o.beta1 * self.m[k] + (1.0 - o.beta1) * g[k];
            self.v[k] = o.beta2 * self.v[k] + (1.0 - o.beta2) * g[k] * g[k];
            let mh = self.m[k] / b1t;
            let vh = self.v[k] / b2t;
            x[k] -= lr * (mh / (vh.sqrt() + o.eps) + o.weight_decay * x[k]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Equilibrium energy label.
    Energy,
    /// Torsional-barrier gap label.
    Gap,
    /// Energy and forces of off-equilibrium frames.
    Forces,
}

impl std::str::FromStr for Task {
    type Err = FradError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "energy" => Self::Energy,
            "gap" => Self::Gap,
            "forces" | "energy_forces" => Self::Forces,
            other => return Err(FradError::Config(format!("unknown task `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub noise: NoiseSpec,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Keep a parameter snapshot every this many steps (0: none).
    pub checkpoint_every: usize,
    pub threads: usize,
}

impl TrainConfig {
    /// Pre-training defaults: RN with `σ = 2`, `τ = 0.04`.
    pub fn pretrain() -> Self {
        Self {
            objective: Objective::new(ObjectiveKind::Frad),
            noise: NoiseSpec::rn(2.0, 0.04),
            optim: OptimConfig::default(),
            batch_size: 4,
            epochs: 5,
            seed: 0,
            checkpoint_every: 0,
            threads: 1,
        }
    }

    /// Fine-tuning defaults: Frad Noisy Nodes with `σ = 20`, `τ = 0.005`.
    pub fn finetune() -> Self {
        Self {
            objective: Objective::new(ObjectiveKind::FradNoisyNodes),
            noise: NoiseSpec::rn(20.0, 0.005),
            epochs: 20,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.noise.validate()?;
        if self.batch_size == 0 {
            return Err(FradError::Config("batch_size must be > 0".into()));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(FradError::Config(format!("invalid optimizer settings {o:?}")));
        }
        if !(0.0..=1.0).contains(&o.floor) || !(o.weight_decay >= 0.0) {
            return Err(FradError::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

/// One supervised example: a molecule, the conformation fed to the model
/// and its label.
#[derive(Clone, Debug)]
pub struct Item {
    pub id: usize,
    pub mol: Molecule,
    pub x: Conformation,
    pub label: Label,
}

/// Equilibrium items labeled with energy or gap.
pub fn items_for_task(ds: &Dataset, task: Task) -> Result<Vec<Item>> {
    ds.entries
        .iter()
        .enumerate()
        .map(|(id, e)| {
            let label = match task {
                Task::Energy => Label::Scalar(e.energy),
                Task::Gap => Label::Scalar(e.gap),
                Task::Forces => {
                    return Err(FradError::Precondition("force items come from force_frames".into()));
                }
            };
            Ok(Item {
                id,
                mol: e.molecule()?,
                x: e.coords.clone(),
                label,
            })
        })
        .collect()
}

/// `per_mol` off-equilibrium frames per entry, drawn with `spec` around the
/// equilibrium and labeled with the entry's own energy and forces.
pub fn force_frames(ds: &Dataset, per_mol: usize, spec: &NoiseSpec, seed: u64) -> Result<Vec<Item>> {
    let mut out = Vec::new();
    for (i, e) in ds.entries.iter().enumerate() {
        let mol = e.molecule()?;
        for k in 0..per_mol {
            let mut rng = FradRng::new(seed, stream_id(k as u64, i as u64));
            let can = apply_can(&mol, &e.coords, spec, &mut rng)?;
            let (x, _) = apply_cgn(&can.x_med, spec.tau, &mut rng)?;
            let (energy, forces) = energy_and_forces(&e.ff, &x)?;
            out.push(Item {
                id: out.len(),
                mol: mol.clone(),
                x,
                label: Label::EnergyForces { energy, forces },
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub prop_loss: f64,
    pub denoise_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub trace: Vec<TracePoint>,
    /// `(step, params)` snapshots at the checkpoint cadence.
    pub checkpoints: Vec<(usize, ModelParams)>,
    /// Ids skipped because noise could not be applied.
    pub skipped: Vec<usize>,
}

/// Mean loss of the first and the last `window` trace points.
pub fn smoothed_ends(trace: &[TracePoint], window: usize) -> Option<(f64, f64)> {
    let w = window.min(trace.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[TracePoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&trace[..w]), mean(&trace[trace.len() - w..])))
}

/// Noise draw for one item: `(x_fin, x_fin - x_med)`. Coordinate-only
/// objectives skip the chemical-aware stage.
fn draw(mol: &Molecule, x: &Conformation, spec: &NoiseSpec, can: bool, rng: &mut FradRng) -> Result<(Conformation, Vec<f64>)> {
    let x_med = if can && spec.kind != NoiseKind::Cgn {
        apply_can(mol, x, spec, rng)?.x_med
    } else {
        x.clone()
    };
    let (x_fin, delta) = apply_cgn(&x_med, spec.tau, rng)?;
    Ok((x_fin, delta))
}

struct Source<'a> {
    mol: &'a Molecule,
    x: &'a Conformation,
    label: Option<&'a Label>,
    id: usize,
}

fn run(cfg: &TrainConfig, sources: &[Source], params: ModelParams) -> Result<TrainResult> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(FradError::Precondition("empty dataset".into()));
    }
    let per_epoch = sources.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut params = params;
    let mut opt = AdamW::new(params.len());
    let mut trace = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    let mut skipped = Vec::new();
    let kind = cfg.objective.kind;
    let can = matches!(kind, ObjectiveKind::Frad | ObjectiveKind::FradNoisyNodes);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.shuffle(&mut FradRng::new(cfg.seed, stream_id(epoch as u64, SHUFFLE_ITEM)));
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &sources[i];
                let mut rng = FradRng::new(cfg.seed, stream_id(epoch as u64, i as u64));
                let denoise = if kind == ObjectiveKind::Finetune {
                    None
                } else {
                    match draw(s.mol, s.x, &cfg.noise, can, &mut rng) {
                        Ok((x_fin, target)) => Some(Denoise {
                            x_fin,
                            target,
                            tau: cfg.noise.tau,
                        }),
                        Err(e) => {
                            log::warn!("skipping item {} in epoch {epoch}: {e}", s.id);
                            skipped.push(s.id);
                            continue;
                        }
                    }
                };
                batch.push(Sample {
                    id: s.id,
                    atoms: s.mol.atoms().to_vec(),
                    denoise,
                    supervised: s.label.map(|l| Supervised {
                        x: s.x.clone(),
                        label: l.clone(),
                    }),
                });
            }
            if batch.is_empty() {
                continue;
            }
            let out = loss_and_grad_threads(&params, &batch, &cfg.objective, cfg.threads)?;
            let lr = learning_rate(&cfg.optim, step, total);
            opt.step(&cfg.optim, params.flat_mut(), &out.grad, lr);
            trace.push(TracePoint {
                step,
                epoch,
                lr,
                loss: out.loss,
                prop_loss: out.prop_loss,
                denoise_loss: out.denoise_loss,
            });
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                checkpoints.push((step, params.clone()));
            }
        }
    }
    if !params.is_finite() {
        return Err(FradError::NonFiniteLoss { sample: usize::MAX });
    }
    Ok(TrainResult {
        params,
        trace,
        checkpoints,
        skipped,
    })
}

/// Denoising pre-training over dataset equilibria (`frad` or `coord`).
pub fn pretrain_frad(cfg: &TrainConfig, ds: &Dataset, params: ModelParams) -> Result<TrainResult> {
    if !matches!(cfg.objective.kind, ObjectiveKind::Frad | ObjectiveKind::Coord) {
        return Err(FradError::Config("pre-training needs objective frad or coord".into()));
    }
    let mols = ds.entries.iter().map(|e| e.molecule()).collect::<Result<Vec<_>>>()?;
    let sources: Vec<Source> = ds
        .entries
        .iter()
        .zip(&mols)
        .enumerate()
        .map(|(id, (e, mol))| Source {
            mol,
            x: &e.coords,
            label: None,
            id,
        })
        .collect();
    run(cfg, &sources, params)
}

/// Scale and shift so the property head starts at the label mean and
/// spread.
fn fit_output_scale(params: &mut ModelParams, items: &[Item]) {
    let energies: Vec<f64> = items
        .iter()
        .map(|it| match &it.label {
            Label::Scalar(v) => *v,
            Label::EnergyForces { energy, .. } => *energy,
        })
        .collect();
    let n = energies.len() as f64;
    let mean = energies.iter().sum::<f64>() / n;
    let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    params.prop_shift = mean;
    params.prop_scale = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub train: TrainResult,
    pub metrics: Option<Metrics>,
}

/// Supervised training with the objective in `cfg` (`finetune`,
/// `noisy_nodes` or `frad_noisy_nodes`), evaluated on `val` when given.
pub fn finetune(cfg: &TrainConfig, train: &[Item], val: &[Item], params: ModelParams) -> Result<FinetuneResult> {
    if !matches!(
        cfg.objective.kind,
        ObjectiveKind::Finetune | ObjectiveKind::NoisyNodes | ObjectiveKind::FradNoisyNodes
    ) {
        return Err(FradError::Config("fine-tuning needs a supervised objective".into()));
    }
    if train.is_empty() {
        return Err(FradError::Precondition("empty dataset".into()));
    }
    let mut params = params;
    fit_output_scale(&mut params, train);
    let sources: Vec<Source> = train
        .iter()
        .map(|it| Source {
            mol: &it.mol,
            x: &it.x,
            label: Some(&it.label),
            id: it.id,
        })
        .collect();
    let result = run(cfg, &sources, params)?;
    let metrics = if val.is_empty() {
        None
    } else {
        Some(evaluate(&result.params, val)?)
    };
    Ok(FinetuneResult { train: result, metrics })
}

/// Coupled Noisy Nodes: one coordinate-noised input feeds both heads.
pub fn finetune_noisy_nodes(cfg: &TrainConfig, train: &[Item], val: &[Item], params: ModelParams) -> Result<FinetuneResult> {
    if cfg.objective.kind != ObjectiveKind::NoisyNodes {
        return Err(FradError::Config("objective must be noisy_nodes".into()));
    }
    finetune(cfg, train, val, params)
}

/// Decoupled Frad Noisy Nodes: clean input for the property, hybrid noise
/// for the denoising branch.
pub fn finetune_frad_nn(cfg: &TrainConfig, train: &[Item], val: &[Item], params: ModelParams) -> Result<FinetuneResult> {
    if cfg.objective.kind != ObjectiveKind::FradNoisyNodes {
        return Err(FradError::Config("objective must be frad_noisy_nodes".into()));
    }
    finetune(cfg, train, val, params)
}

/// Predictions paired with labels: scalars for scalar labels, force
/// components for energy-force labels.
pub fn predictions(params: &ModelParams, items: &[Item]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for it in items {
        match &it.label {
            Label::Scalar(v) => {
                pred.push(forward(params, it.mol.atoms(), &it.x)?.property);
                truth.push(*v);
            }
            Label::EnergyForces { forces, .. } => {
                let (_, f) = property_and_forces(params, it.mol.atoms(), &it.x)?;
                pred.extend(f);
                truth.extend(forces.iter().copied());
            }
        }
    }
    Ok((pred, truth))
}

/// RMSE, MAE, Pearson and Spearman of [`predictions`].
pub fn evaluate(params: &ModelParams, items: &[Item]) -> Result<Metrics> {
    if items.is_empty() {
        return Err(FradError::Precondition("empty dataset".into()));
    }
    let (p, t) = predictions(params, items)?;
    Metrics::compute(&p, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Hyper;
    use crate::pes::{generate_dataset, GenConfig};

    #[test]
    fn schedule_probes() {
        let o = OptimConfig {
            lr: 1.0,
            warmup: 10,
            cycle: None,
            ..Default::default()
        };
        assert_eq!(learning_rate(&o, 0, 110), 0.0);
        assert!((learning_rate(&o, 5, 110) - 0.5).abs() < 1e-15);
        assert!((learning_rate(&o, 10, 110) - 1.0).abs() < 1e-15);
        assert!((learning_rate(&o, 60, 110) - 0.5).abs() < 1e-12);
        assert!(learning_rate(&o, 110, 110).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let o = OptimConfig::default();
        let mut a = AdamW::new(2);
        let mut x = vec![1.0, -1.0];
        a.step(&o, &mut x, &[3.0, -0.01], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-5);
    }

    fn tiny() -> (Dataset, ModelParams) {
        let (ds, _) = generate_dataset(&GenConfig { count: 6, ..Default::default() }, 3).unwrap();
        let h = Hyper {
            layers: 1,
            features: 8,
            rbf: 6,
            cutoff: 5.0,
        };
        (ds, ModelParams::init(h, &mut FradRng::new(0, 0)).unwrap())
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, p) = tiny();
        let mut cfg = TrainConfig::pretrain();
        cfg.epochs = 2;
        cfg.checkpoint_every = 2;
        let a = pretrain_frad(&cfg, &ds, p.clone()).unwrap();
        cfg.threads = 3;
        let b = pretrain_frad(&cfg, &ds, p.clone()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        assert_eq!(a.checkpoints.len(), 2);
        let mut coord = cfg.clone();
        coord.objective.kind = ObjectiveKind::Coord;
        let c = pretrain_frad(&coord, &ds, p).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let (_, p) = tiny();
        let cfg = TrainConfig::pretrain();
        assert!(pretrain_frad(&cfg, &Dataset::default(), p.clone()).is_err());
        assert!(finetune(&TrainConfig::finetune(), &[], &[], p).is_err());
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let (ds, p) = tiny();
        let items = items_for_task(&ds, Task::Energy).unwrap();
        let mut cfg = TrainConfig::finetune();
        cfg.objective.kind = ObjectiveKind::Finetune;
        cfg.batch_size = items.len();
        cfg.epochs = 50;
        cfg.optim.warmup = 0;
        cfg.optim.lr = 1e-3;
        cfg.optim.floor = 1.0;
        let r = finetune(&cfg, &items, &items, p).unwrap();
        let first = r.train.trace[0].loss;
        let last = r.train.trace.last().unwrap().loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
