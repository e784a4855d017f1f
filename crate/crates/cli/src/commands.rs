use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use frad_core::experiments::{
    c_estimate_study, force_accuracy_study, perturbation_scale_study, CEstimateConfig, ForceAccuracyConfig,
    SamplingSetting,
};
use frad_core::geometry::noise::{perturb, perturbation_scale};
use frad_core::linearize::Method;
use frad_core::molgraph::io::{emit_xyz, parse_mol, parse_xyz, perceive_bonds};
use frad_core::net::{Hyper, ModelParams, ObjectiveKind};
use frad_core::pes::{generate_dataset, Dataset, GenConfig};
use frad_core::train::{
    evaluate, finetune, force_frames, items_for_task, pretrain_frad, Item, Task, TracePoint, TrainConfig, TrainResult,
};
use frad_core::{FradRng, Molecule, NoiseKind, NoiseSpec};
use frad_core::{Conformation, Element};
use serde::Serialize;

use crate::config::Config;
use crate::error::CliError;
use crate::run::{num, Run};

/// RNG stream for parameter initialization, disjoint from training streams.
const INIT_STREAM: u64 = u64::MAX;

pub struct Global {
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::data(format!("cannot read dataset {}: {e}", path.display())))?;
    Dataset::read_jsonl(BufReader::new(f))
        .map_err(|e| CliError::from(e).context(format!("dataset {}", path.display())))
}

fn load_molecule(path: &Path) -> Result<(Molecule, Conformation), CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let parsed = match ext.as_str() {
        "xyz" => parse_xyz(&text).and_then(|(el, x)| Ok((perceive_bonds(&el, &x)?, x))),
        "mol" | "sdf" => parse_mol(&text),
        _ => return Err(CliError::data(format!("{}: expected a .xyz or .mol file", path.display()))),
    };
    parsed.map_err(|e| CliError::from(e).context(path.display()))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    ModelParams::read_checkpoint(BufReader::new(f)).map_err(|e| CliError::from(e).context(path.display()))
}

/// `sigma:tau` pairs separated by commas; empty means no settings.
fn parse_settings(s: &str) -> Result<Vec<SamplingSetting>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let bad = || CliError::config(format!("setting `{t}`: expected sigma:tau"));
            let (a, b) = t.split_once(':').ok_or_else(bad)?;
            let sigma: f64 = a.trim().parse().map_err(|_| bad())?;
            let tau: f64 = b.trim().parse().map_err(|_| bad())?;
            if !(sigma >= 0.0 && tau >= 0.0) {
                return Err(bad());
            }
            Ok(SamplingSetting::new(sigma, tau))
        })
        .collect()
}

fn gen_config(cfg: &mut Config, p: &str) -> Result<GenConfig, CliError> {
    let d = GenConfig::default();
    let g = GenConfig {
        count: cfg.get(&format!("{p}count"), d.count)?,
        min_heavy: cfg.get(&format!("{p}min_heavy"), d.min_heavy)?,
        max_heavy: cfg.get(&format!("{p}max_heavy"), d.max_heavy)?,
        branch_prob: cfg.get(&format!("{p}branch_prob"), d.branch_prob)?,
        ring_prob: cfg.get(&format!("{p}ring_prob"), d.ring_prob)?,
        hetero_prob: cfg.get(&format!("{p}hetero_prob"), d.hetero_prob)?,
        double_prob: cfg.get(&format!("{p}double_prob"), d.double_prob)?,
        min_contact: cfg.get(&format!("{p}min_contact"), d.min_contact)?,
        max_angle_strain: cfg.get(&format!("{p}max_angle_strain"), d.max_angle_strain)?,
    };
    Ok(g)
}

fn noise_spec(cfg: &mut Config, p: &str, d: NoiseSpec) -> Result<NoiseSpec, CliError> {
    let kind: NoiseKind = cfg.get(&format!("{p}kind"), d.kind)?;
    let spec = NoiseSpec {
        kind,
        sigma: cfg.get(&format!("{p}sigma"), d.sigma)?,
        sigma_r: cfg.get(&format!("{p}sigma_r"), d.sigma_r)?,
        sigma_theta: cfg.get(&format!("{p}sigma_theta"), d.sigma_theta)?,
        sigma_phi: cfg.get(&format!("{p}sigma_phi"), d.sigma_phi)?,
        sigma_psi: cfg.get(&format!("{p}sigma_psi"), d.sigma_psi)?,
        tau: cfg.get(&format!("{p}tau"), d.tau)?,
    };
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(spec)
}

fn hyper(cfg: &mut Config, p: &str) -> Result<Hyper, CliError> {
    let d = Hyper::default();
    let h = Hyper {
        layers: cfg.get(&format!("{p}layers"), d.layers)?,
        features: cfg.get(&format!("{p}features"), d.features)?,
        rbf: cfg.get(&format!("{p}rbf"), d.rbf)?,
        cutoff: cfg.get(&format!("{p}cutoff"), d.cutoff)?,
    };
    h.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(h)
}

/// Keys under `{p}train.`, `{p}loss.` and `{p}noise.`.
fn train_config(cfg: &mut Config, p: &str, d: TrainConfig, g: &Global) -> Result<TrainConfig, CliError> {
    let t = format!("{p}train.");
    let l = format!("{p}loss.");
    let kind: ObjectiveKind = cfg.get_str(&format!("{t}objective"), objective_name(d.objective.kind)).parse()?;
    let mut objective = d.objective;
    objective.kind = kind;
    objective.lambda_p = cfg.get(&format!("{l}lambda_p"), objective.lambda_p)?;
    objective.lambda_n = cfg.get(&format!("{l}lambda_n"), objective.lambda_n)?;
    objective.w_f = cfg.get(&format!("{l}w_f"), objective.w_f)?;
    objective.w_e = cfg.get(&format!("{l}w_e"), objective.w_e)?;
    let mut optim = d.optim;
    optim.lr = cfg.get(&format!("{t}lr"), optim.lr)?;
    optim.warmup = cfg.get(&format!("{t}warmup"), optim.warmup)?;
    let cycle: usize = cfg.get(&format!("{t}cycle"), optim.cycle.unwrap_or(0))?;
    optim.cycle = (cycle > 0).then_some(cycle);
    optim.floor = cfg.get(&format!("{t}floor"), optim.floor)?;
    optim.beta1 = cfg.get(&format!("{t}beta1"), optim.beta1)?;
    optim.beta2 = cfg.get(&format!("{t}beta2"), optim.beta2)?;
    optim.eps = cfg.get(&format!("{t}eps"), optim.eps)?;
    optim.weight_decay = cfg.get(&format!("{t}weight_decay"), optim.weight_decay)?;
    let tc = TrainConfig {
        objective,
        noise: noise_spec(cfg, &format!("{p}noise."), d.noise)?,
        optim,
        batch_size: cfg.get(&format!("{t}batch_size"), d.batch_size)?,
        epochs: cfg.get(&format!("{t}epochs"), d.epochs)?,
        seed: g.seed,
        checkpoint_every: cfg.get(&format!("{t}checkpoint_every"), d.checkpoint_every)?,
        threads: g.threads,
    };
    tc.validate()?;
    Ok(tc)
}

fn objective_name(k: ObjectiveKind) -> &'static str {
    match k {
        ObjectiveKind::Frad => "frad",
        ObjectiveKind::Coord => "coord",
        ObjectiveKind::Finetune => "finetune",
        ObjectiveKind::NoisyNodes => "noisy_nodes",
        ObjectiveKind::FradNoisyNodes => "frad_noisy_nodes",
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Energy => "energy",
        Task::Gap => "gap",
        Task::Forces => "forces",
    }
}

/// How supervised items are built from a dataset.
struct TaskSpec {
    task: Task,
    val_fraction: f64,
    frames: usize,
    frame_noise: NoiseSpec,
}

fn task_spec(cfg: &mut Config, p: &str) -> Result<TaskSpec, CliError> {
    let task: Task = cfg.get_str(&format!("{p}task"), "energy").parse()?;
    let val_fraction: f64 = cfg.get(&format!("{p}val_fraction"), 0.2)?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CliError::config(format!("{p}val_fraction must be in [0, 1)")));
    }
    let (frames, frame_noise) = if task == Task::Forces {
        (
            cfg.get(&format!("{p}frames"), 4usize)?,
            noise_spec(cfg, &format!("{p}frame_noise."), NoiseSpec::rn(1.0, 0.04))?,
        )
    } else {
        (0, NoiseSpec::default())
    };
    Ok(TaskSpec {
        task,
        val_fraction,
        frames,
        frame_noise,
    })
}

/// Train and validation items; the validation part is the dataset tail.
fn split_items(ds: &Dataset, ts: &TaskSpec, seed: u64) -> Result<(Vec<Item>, Vec<Item>), CliError> {
    let n = ds.len();
    let n_val = ((n as f64) * ts.val_fraction).round() as usize;
    let n_val = if ts.val_fraction > 0.0 && n >= 2 { n_val.clamp(1, n - 1) } else { 0 };
    let head = Dataset {
        entries: ds.entries[..n - n_val].to_vec(),
    };
    let tail = Dataset {
        entries: ds.entries[n - n_val..].to_vec(),
    };
    let items = |d: &Dataset, stream_seed: u64| -> Result<Vec<Item>, CliError> {
        Ok(match ts.task {
            Task::Forces => force_frames(d, ts.frames, &ts.frame_noise, stream_seed)?,
            t => items_for_task(d, t)?,
        })
    };
    Ok((items(&head, seed)?, items(&tail, seed ^ 1)?))
}

fn trace_rows(trace: &[TracePoint]) -> Vec<Vec<String>> {
    trace
        .iter()
        .map(|p| {
            vec![
                p.step.to_string(),
                p.epoch.to_string(),
                num(p.lr),
                num(p.loss),
                num(p.prop_loss),
                num(p.denoise_loss),
            ]
        })
        .collect()
}

const TRACE_HEADER: [&str; 6] = ["step", "epoch", "lr", "loss", "prop_loss", "denoise_loss"];

fn checkpoint_bytes(p: &ModelParams) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    p.write_checkpoint(&mut buf)?;
    Ok(buf)
}

fn write_training(run: &mut Run, dir: &str, r: &TrainResult) -> Result<(), CliError> {
    run.csv(&format!("{dir}trace.csv"), &TRACE_HEADER, &trace_rows(&r.trace))?;
    run.write(&format!("{dir}model.ckpt"), &checkpoint_bytes(&r.params)?)?;
    for (step, p) in &r.checkpoints {
        run.write(&format!("{dir}checkpoints/step{step:06}.ckpt"), &checkpoint_bytes(p)?)?;
    }
    if !r.skipped.is_empty() {
        log::warn!("skipped {} degenerate samples", r.skipped.len());
    }
    Ok(())
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

const METRICS_HEADER: [&str; 7] = ["task", "split", "n", "rmse", "mae", "pearson", "spearman"];

fn metrics_row(task: Task, split: &str, items: &[Item], params: &ModelParams) -> Result<Vec<String>, CliError> {
    let m = evaluate(params, items)?;
    Ok(vec![
        task_name(task).to_string(),
        split.to_string(),
        items.len().to_string(),
        num(m.rmse),
        num(m.mae),
        opt_num(m.pearson),
        opt_num(m.spearman),
    ])
}

fn input_path(cfg: &mut Config, key: &str) -> Result<PathBuf, CliError> {
    Ok(PathBuf::from(cfg.require(key)?))
}

pub fn gen_data(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let gc = gen_config(cfg, "data.")?;
    cfg.finish()?;
    let mut run = Run::start("gen-data", &g.out, cfg, g.seed, g.threads, &[])?;
    let (ds, _) = generate_dataset(&gc, g.seed)?;
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf)?;
    run.write("dataset.jsonl", &buf)?;
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct PerturbSidecar<'a> {
    spec: &'a NoiseSpec,
    seed: u64,
    stream: u64,
    delta: &'a frad_core::geometry::noise::InternalDelta,
    delta_cgn: &'a [f64],
    scale_med: f64,
    scale_fin: f64,
    scale_definition: &'static str,
}

pub fn perturb_cmd(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let input = input_path(cfg, "input")?;
    let spec = noise_spec(cfg, "noise.", NoiseSpec::default())?;
    let stream: u64 = cfg.get("perturb.stream", 0u64)?;
    cfg.finish()?;
    let (mol, x) = load_molecule(&input)?;
    let mut run = Run::start("perturb", &g.out, cfg, g.seed, g.threads, &[input])?;
    let mut rng = FradRng::new(g.seed, stream);
    let rec = perturb(&mol, &x, &spec, &mut rng)?;
    let atoms: Vec<Element> = mol.atoms().to_vec();
    let comment = format!("frad {} run {}", crate::run::VERSION, run.run_hash());
    run.write("x_med.xyz", emit_xyz(&atoms, &rec.x_med, &comment).as_bytes())?;
    run.write("x_fin.xyz", emit_xyz(&atoms, &rec.x_fin, &comment).as_bytes())?;
    let side = PerturbSidecar {
        spec: &spec,
        seed: rec.seed,
        stream,
        delta: &rec.delta,
        delta_cgn: &rec.delta_cgn,
        scale_med: perturbation_scale(&x, &rec.x_med)?,
        scale_fin: perturbation_scale(&x, &rec.x_fin)?,
        scale_definition: "mean per-atom displacement norm",
    };
    run.write("perturb.json", &serde_json::to_vec_pretty(&side)?)?;
    run.finish()?;
    Ok(())
}

pub fn estimate_c(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let input = input_path(cfg, "input")?;
    let d = CEstimateConfig::default();
    let method = match cfg.get_str("estimate.method", "analytic").as_str() {
        "analytic" => Method::Analytic,
        "lstsq" | "least_squares" => Method::LeastSquares,
        other => return Err(CliError::config(format!("unknown method `{other}`"))),
    };
    let ec = CEstimateConfig {
        settings: parse_settings(&cfg.get_str("estimate.settings", "0:0.04,1:0.04,20:0.04"))?,
        method,
        probe_scale: cfg.get("estimate.probe_scale", d.probe_scale)?,
        probe_samples: cfg.get("estimate.probe_samples", d.probe_samples)?,
        molecules: cfg.get("estimate.molecules", d.molecules)?,
        samples: cfg.get("estimate.samples", d.samples)?,
    };
    cfg.finish()?;
    let ds = load_dataset(&input)?;
    let mut run = Run::start("estimate-c", &g.out, cfg, g.seed, g.threads, &[input])?;
    let rows: Vec<Vec<String>> = c_estimate_study(&ds, &ec, g.seed)?
        .iter()
        .map(|r| vec![num(r.sigma), num(r.tau), num(r.c_error), num(r.pearson_rho), num(r.cosine_mean)])
        .collect();
    run.csv("c_estimate.csv", &["sigma", "tau", "c_error", "pearson_rho", "cosine_mean"], &rows)?;
    run.finish()?;
    Ok(())
}

pub fn force_accuracy(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let input = input_path(cfg, "input")?;
    let d = ForceAccuracyConfig::default();
    let fc = ForceAccuracyConfig {
        settings: parse_settings(&cfg.get_str("accuracy.settings", "0:0.04,1:0.04,20:0.04"))?,
        molecules: cfg.get("accuracy.molecules", d.molecules)?,
        samples: cfg.get("accuracy.samples", d.samples)?,
        est_sigma: cfg.get("accuracy.est_sigma", d.est_sigma)?,
        est_tau: cfg.get("accuracy.est_tau", d.est_tau)?,
    };
    cfg.finish()?;
    let ds = load_dataset(&input)?;
    let mut run = Run::start("force-accuracy", &g.out, cfg, g.seed, g.threads, &[input])?;
    let st = force_accuracy_study(&ds, &fc, g.seed)?;
    let rows: Vec<Vec<String>> = st
        .rows
        .iter()
        .map(|r| {
            vec![
                r.setting.clone(),
                kind_name(r.kind).to_string(),
                num(r.sigma),
                num(r.tau),
                num(r.c_error),
                num(r.pearson_rho),
                num(r.cosine_mean),
            ]
        })
        .collect();
    run.csv(
        "force_accuracy.csv",
        &["setting", "kind", "sigma", "tau", "c_error", "pearson_rho", "cosine_mean"],
        &rows,
    )?;
    let per: Vec<Vec<String>> = st
        .per_molecule
        .iter()
        .map(|m| {
            vec![
                m.tag.clone(),
                m.setting.clone(),
                kind_name(m.kind).to_string(),
                num(m.rho),
                num(m.cosine_mean),
            ]
        })
        .collect();
    run.csv(
        "force_accuracy_molecules.csv",
        &["tag", "setting", "kind", "pearson_rho", "cosine_mean"],
        &per,
    )?;
    run.finish()?;
    Ok(())
}

fn kind_name(k: frad_core::linearize::TargetKind) -> &'static str {
    use frad_core::linearize::TargetKind::*;
    match k {
        Cgn => "cgn",
        Can => "can",
        Hybrid => "hybrid",
    }
}

pub fn perturbation_scale_cmd(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let input = input_path(cfg, "input")?;
    let settings = parse_settings(&cfg.get_str("scale.settings", "0:0.005,0:0.04,0:0.2,20:0.04"))?;
    let samples: usize = cfg.get("scale.samples", 20)?;
    cfg.finish()?;
    let ds = load_dataset(&input)?;
    let mut run = Run::start("perturbation-scale", &g.out, cfg, g.seed, g.threads, &[input])?;
    let rows: Vec<Vec<String>> = perturbation_scale_study(&ds, &settings, samples, g.seed)?
        .iter()
        .map(|r| {
            vec![
                r.tag.clone(),
                r.m.to_string(),
                "rn".to_string(),
                num(r.sigma),
                num(r.tau),
                num(r.scale),
            ]
        })
        .collect();
    run.csv(
        "perturbation_scale.csv",
        &["tag", "m", "kind", "sigma", "tau", "scale"],
        &rows,
    )?;
    run.finish()?;
    Ok(())
}

fn init_params(cfg: &mut Config, p: &str, seed: u64) -> Result<ModelParams, CliError> {
    let h = hyper(cfg, p)?;
    Ok(ModelParams::init(h, &mut FradRng::new(seed, INIT_STREAM))?)
}

pub fn pretrain(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let input = input_path(cfg, "input")?;
    let tc = train_config(cfg, "", TrainConfig::pretrain(), g)?;
    let p0 = init_params(cfg, "model.", g.seed)?;
    cfg.finish()?;
    let ds = load_dataset(&input)?;
    let mut run = Run::start("pretrain", &g.out, cfg, g.seed, g.threads, &[input])?;
    let r = pretrain_frad(&tc, &ds, p0)?;
    write_training(&mut run, "", &r)?;
    run.finish()?;
    Ok(())
}

pub fn finetune_cmd(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let input = input_path(cfg, "input")?;
    let tc = train_config(cfg, "", TrainConfig::finetune(), g)?;
    let ts = task_spec(cfg, "finetune.")?;
    let init = cfg.get_opt("finetune.init").map(PathBuf::from);
    let p0 = match &init {
        Some(_) => None,
        None => Some(init_params(cfg, "model.", g.seed)?),
    };
    cfg.finish()?;
    let ds = load_dataset(&input)?;
    let p0 = match (&init, p0) {
        (Some(path), _) => load_checkpoint(path)?,
        (None, Some(p)) => p,
        (None, None) => unreachable!(),
    };
    let mut inputs = vec![input];
    inputs.extend(init);
    let mut run = Run::start("finetune", &g.out, cfg, g.seed, g.threads, &inputs)?;
    let (train, val) = split_items(&ds, &ts, g.seed)?;
    let r = finetune(&tc, &train, &val, p0)?;
    write_training(&mut run, "", &r.train)?;
    if !val.is_empty() {
        let row = metrics_row(ts.task, "val", &val, &r.train.params)?;
        run.csv("metrics.csv", &METRICS_HEADER, &[row])?;
    }
    run.finish()?;
    Ok(())
}

pub fn eval(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let input = input_path(cfg, "input")?;
    let ckpt = input_path(cfg, "eval.checkpoint")?;
    let ts = task_spec(cfg, "eval.")?;
    cfg.finish()?;
    let ds = load_dataset(&input)?;
    let params = load_checkpoint(&ckpt)?;
    let mut run = Run::start("eval", &g.out, cfg, g.seed, g.threads, &[input, ckpt])?;
    let (train, val) = split_items(&ds, &ts, g.seed)?;
    let mut rows = vec![metrics_row(ts.task, "train", &train, &params)?];
    if !val.is_empty() {
        rows.push(metrics_row(ts.task, "val", &val, &params)?);
    }
    run.csv("metrics.csv", &METRICS_HEADER, &rows)?;
    run.finish()?;
    Ok(())
}

/// Stage outputs live in `<out>/<stage>/`; a failing stage's directory is
/// renamed to `<stage>.failed`.
pub fn pipeline(cfg: &mut Config, g: &Global) -> Result<(), CliError> {
    let data_path = cfg.get_opt("data.path").map(PathBuf::from);
    let gc = match data_path {
        Some(_) => None,
        None => Some(gen_config(cfg, "data.")?),
    };
    let pre = train_config(cfg, "pretrain.", TrainConfig::pretrain(), g)?;
    let ft = train_config(cfg, "finetune.", TrainConfig::finetune(), g)?;
    let ts = task_spec(cfg, "finetune.")?;
    let h = hyper(cfg, "model.")?;
    cfg.finish()?;
    if let Some(p) = &data_path {
        if !p.is_file() {
            return Err(CliError::data(format!("stage data: dataset {} not found", p.display())));
        }
    }
    let inputs: Vec<PathBuf> = data_path.iter().cloned().collect();
    let mut run = Run::start("pipeline", &g.out, cfg, g.seed, g.threads, &inputs)?;

    let ds = stage("data", &mut run, |run| {
        let ds = match (&data_path, &gc) {
            (Some(p), _) => load_dataset(p)?,
            (None, Some(gc)) => generate_dataset(gc, g.seed)?.0,
            (None, None) => unreachable!(),
        };
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf)?;
        run.write("data/dataset.jsonl", &buf)?;
        Ok(ds)
    })?;

    let pretrained = stage("pretrain", &mut run, |run| {
        let p0 = ModelParams::init(h, &mut FradRng::new(g.seed, INIT_STREAM))?;
        let r = pretrain_frad(&pre, &ds, p0)?;
        write_training(run, "pretrain/", &r)?;
        Ok(r.params)
    })?;

    let (tuned, val) = stage("finetune", &mut run, |run| {
        let (train, val) = split_items(&ds, &ts, g.seed)?;
        let r = finetune(&ft, &train, &val, pretrained)?;
        write_training(run, "finetune/", &r.train)?;
        Ok((r.train.params, val))
    })?;

    stage("eval", &mut run, |run| {
        if val.is_empty() {
            return Err(CliError::config("evaluation needs finetune.val_fraction > 0"));
        }
        let row = metrics_row(ts.task, "val", &val, &tuned)?;
        run.csv("eval/metrics.csv", &METRICS_HEADER, &[row])?;
        Ok(())
    })?;
    run.finish()?;
    Ok(())
}

fn stage<T>(name: &str, run: &mut Run, body: impl FnOnce(&mut Run) -> Result<T, CliError>) -> Result<T, CliError> {
    match body(run) {
        Ok(v) => Ok(v),
        Err(e) => {
            let dir = run.dir().join(name);
            if dir.exists() {
                let failed = run.dir().join(format!("{name}.failed"));
                let _ = fs::remove_dir_all(&failed);
                let _ = fs::rename(&dir, &failed);
            }
            Err(e.context(format!("stage {name}")))
        }
    }
}
