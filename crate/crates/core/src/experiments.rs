//! Toy-oracle studies: how well denoising targets track the true forces,
//! and how far each noise setting moves atoms.

use serde::{Deserialize, Serialize};

use crate::error::{FradError, Result};
use crate::fixtures::random_chain;
use crate::geometry::internal_coords;
use crate::geometry::noise::{apply_can_with, apply_cgn, perturb, perturbation_scale, NoiseSpec};
use crate::linearize::{
    analytic_c, analytic_c_rn, c_error_of, force_accuracy, lstsq_c, rigid_modes, score_target, score_target_marginal,
    Method, TargetKind, DEFAULT_PROBE,
};
use crate::metrics::median;
use crate::pes::{boltzmann_score, Dataset, ForceField};
use crate::rng::{stream_id, FradRng};
use crate::NoiseKind;

/// An RN sampling setting `(σ, τ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSetting {
    pub label: String,
    pub sigma: f64,
    pub tau: f64,
}

impl SamplingSetting {
    pub fn new(sigma: f64, tau: f64) -> Self {
        Self {
            label: format!("sigma{sigma}_tau{tau}"),
            sigma,
            tau,
        }
    }
}

/// `(0, 0.04)`, `(1, 0.04)` and `(20, 0.04)`.
pub fn standard_settings() -> Vec<SamplingSetting> {
    vec![
        SamplingSetting::new(0.0, 0.04),
        SamplingSetting::new(1.0, 0.04),
        SamplingSetting::new(20.0, 0.04),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceAccuracyConfig {
    pub settings: Vec<SamplingSetting>,
    /// Molecules with at least one rotatable bond, taken in dataset order.
    pub molecules: usize,
    pub samples: usize,
    /// Noise assumed by the hybrid estimator, independent of the sampler.
    pub est_sigma: f64,
    pub est_tau: f64,
}

impl Default for ForceAccuracyConfig {
    fn default() -> Self {
        Self {
            settings: standard_settings(),
            molecules: 20,
            samples: 50,
            est_sigma: 2.0,
            est_tau: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeAccuracy {
    pub tag: String,
    pub setting: String,
    pub kind: TargetKind,
    pub rho: f64,
    pub cosine_mean: f64,
}

/// Medians over molecules for one (setting, estimator) pair. `c_error` is
/// the RN linearization error of the drawn torsion moves (NaN when the
/// setting moves nothing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub setting: String,
    pub kind: TargetKind,
    pub sigma: f64,
    pub tau: f64,
    pub c_error: f64,
    pub pearson_rho: f64,
    pub cosine_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceAccuracyStudy {
    pub rows: Vec<AccuracyRow>,
    pub per_molecule: Vec<MoleculeAccuracy>,
}

impl ForceAccuracyStudy {
    pub fn row(&self, setting: &str, kind: TargetKind) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.setting == setting && r.kind == kind)
    }
}

fn nan_median(x: &[f64]) -> f64 {
    median(x).unwrap_or(f64::NAN)
}

/// Correlation between CGN-only and hybrid score targets and the oracle
/// Boltzmann score, per molecule, for every sampling setting.
pub fn force_accuracy_study(ds: &Dataset, cfg: &ForceAccuracyConfig, seed: u64) -> Result<ForceAccuracyStudy> {
    if cfg.samples < 2 {
        return Err(FradError::Precondition("force accuracy needs at least 2 samples".into()));
    }
    let mut chosen = Vec::new();
    for e in &ds.entries {
        if chosen.len() == cfg.molecules {
            break;
        }
        let mol = e.molecule()?;
        if !mol.rotatable().is_empty() {
            chosen.push((e, mol));
        }
    }
    if chosen.is_empty() {
        return Err(FradError::Precondition("no molecule with a rotatable bond".into()));
    }
    let kinds = [TargetKind::Cgn, TargetKind::Hybrid];
    let mut rows = Vec::new();
    let mut per_molecule = Vec::new();
    for (si, setting) in cfg.settings.iter().enumerate() {
        let spec = NoiseSpec::rn(setting.sigma, setting.tau);
        let mut rhos = vec![Vec::new(); kinds.len()];
        let mut coss = vec![Vec::new(); kinds.len()];
        let mut cerrs = Vec::new();
        for (mi, (e, mol)) in chosen.iter().enumerate() {
            let lin = analytic_c_rn(mol, &e.coords)?;
            let est_var = vec![cfg.est_sigma * cfg.est_sigma; lin.m()];
            let mut rng = FradRng::new(seed, stream_id(si as u64, mi as u64));
            let mut est = vec![Vec::new(); kinds.len()];
            let mut oracle = Vec::new();
            let mut pairs = Vec::new();
            for _ in 0..cfg.samples {
                let rec = perturb(mol, &e.coords, &spec, &mut rng)?;
                pairs.push((rec.delta.dpsi.clone(), rec.x_med.displacement_from(&e.coords)));
                oracle.push(boltzmann_score(&e.ff, &rec.x_fin)?);
                for (k, kind) in kinds.iter().enumerate() {
                    let t = score_target(*kind, &rec.x_fin, &e.coords, &lin.c, &est_var, cfg.est_tau)?;
                    est[k].push(t.target);
                }
            }
            if let Ok(ce) = c_error_of(&lin, &pairs) {
                cerrs.push(ce);
            }
            for (k, kind) in kinds.iter().enumerate() {
                let fa = force_accuracy(&est[k], &oracle)?;
                rhos[k].push(fa.rho);
                coss[k].push(fa.cosine_mean);
                per_molecule.push(MoleculeAccuracy {
                    tag: e.tag.clone(),
                    setting: setting.label.clone(),
                    kind: *kind,
                    rho: fa.rho,
                    cosine_mean: fa.cosine_mean,
                });
            }
        }
        for (k, kind) in kinds.iter().enumerate() {
            rows.push(AccuracyRow {
                setting: setting.label.clone(),
                kind: *kind,
                sigma: setting.sigma,
                tau: setting.tau,
                c_error: nan_median(&cerrs),
                pearson_rho: nan_median(&rhos[k]),
                cosine_mean: nan_median(&coss[k]),
            });
        }
    }
    Ok(ForceAccuracyStudy { rows, per_molecule })
}

/// Mean perturbation scale of one molecule under one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub tag: String,
    /// Number of rotatable bonds.
    pub m: usize,
    pub setting: String,
    pub sigma: f64,
    pub tau: f64,
    pub scale: f64,
}

/// Perturbation scale averaged over `samples` draws, for every molecule and
/// setting.
pub fn perturbation_scale_study(
    ds: &Dataset,
    settings: &[SamplingSetting],
    samples: usize,
    seed: u64,
) -> Result<Vec<ScaleRow>> {
    if samples == 0 {
        return Err(FradError::Precondition("perturbation scale needs samples > 0".into()));
    }
    let mut out = Vec::new();
    for (mi, e) in ds.entries.iter().enumerate() {
        let mol = e.molecule()?;
        for (si, s) in settings.iter().enumerate() {
            let spec = NoiseSpec::rn(s.sigma, s.tau);
            let mut rng = FradRng::new(seed, stream_id(si as u64, mi as u64));
            let mut total = 0.0;
            for _ in 0..samples {
                let rec = perturb(&mol, &e.coords, &spec, &mut rng)?;
                total += perturbation_scale(&e.coords, &rec.x_fin)?;
            }
            out.push(ScaleRow {
                tag: e.tag.clone(),
                m: mol.rotatable().len(),
                setting: s.label.clone(),
                sigma: s.sigma,
                tau: s.tau,
                scale: total / samples as f64,
            });
        }
    }
    Ok(out)
}

/// Small-noise check on carbon chains whose quadratic field
/// ([`ForceField::hybrid_matched`]) has the hybrid noise as its linearized
/// Boltzmann distribution. Every VRN standard deviation equals `sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLimitConfig {
    pub sigmas: Vec<f64>,
    pub tau: f64,
    pub molecules: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub samples: usize,
}

impl Default for GaussianLimitConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.01, 0.02, 0.05, 0.1],
            tau: 0.01,
            molecules: 10,
            min_atoms: 6,
            max_atoms: 10,
            samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLimitRow {
    pub sigma: f64,
    pub tau: f64,
    pub median_rho: f64,
    pub min_rho: f64,
}

/// ρ between the hybrid target (rigid motions marginalized, as they carry no
/// energy) and the oracle score, per σ.
pub fn gaussian_limit_study(cfg: &GaussianLimitConfig, seed: u64) -> Result<Vec<GaussianLimitRow>> {
    if cfg.min_atoms < 4 || cfg.max_atoms < cfg.min_atoms || cfg.molecules == 0 || cfg.samples < 2 {
        return Err(FradError::Precondition("invalid gaussian limit config".into()));
    }
    let span = cfg.max_atoms - cfg.min_atoms + 1;
    let mut chain_rng = FradRng::new(seed, 0);
    let chains: Vec<_> = (0..cfg.molecules)
        .map(|k| random_chain(cfg.min_atoms + k % span, &mut chain_rng))
        .collect();
    let mut out = Vec::new();
    for (si, &sigma) in cfg.sigmas.iter().enumerate() {
        let mut spec = NoiseSpec::vrn(cfg.tau);
        spec.sigma = sigma;
        spec.sigma_r = sigma;
        spec.sigma_theta = sigma;
        spec.sigma_phi = sigma;
        spec.sigma_psi = sigma;
        spec.validate()?;
        let mut rhos = Vec::new();
        for (mi, (mol, x)) in chains.iter().enumerate() {
            let ic = internal_coords(mol, x)?;
            let ff = ForceField::hybrid_matched(&ic, x, &spec, 1.0)?;
            let lin = analytic_c(&ic, x, NoiseKind::Vrn)?;
            let var = spec.variances(&ic);
            let free = rigid_modes(x);
            let mut rng = FradRng::new(seed, stream_id(1 + si as u64, mi as u64));
            let (mut est, mut oracle) = (Vec::new(), Vec::new());
            for _ in 0..cfg.samples {
                let draw = apply_can_with(ic.clone(), x, &spec, &mut rng)?;
                let (fin, _) = apply_cgn(&draw.x_med, cfg.tau, &mut rng)?;
                est.push(score_target_marginal(&fin, x, &lin.c, &var, cfg.tau, &free)?.target);
                oracle.push(boltzmann_score(&ff, &fin)?);
            }
            rhos.push(force_accuracy(&est, &oracle)?.rho);
        }
        out.push(GaussianLimitRow {
            sigma,
            tau: cfg.tau,
            median_rho: nan_median(&rhos),
            min_rho: rhos.iter().cloned().fold(f64::INFINITY, f64::min),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CEstimateConfig {
    pub settings: Vec<SamplingSetting>,
    pub method: Method,
    /// Probe std and draw count for the least-squares estimate.
    pub probe_scale: f64,
    pub probe_samples: usize,
    pub molecules: usize,
    pub samples: usize,
}

impl Default for CEstimateConfig {
    fn default() -> Self {
        Self {
            settings: standard_settings(),
            method: Method::Analytic,
            probe_scale: DEFAULT_PROBE,
            probe_samples: 64,
            molecules: 20,
            samples: 50,
        }
    }
}

/// Medians over molecules of the linearization error of `C` and of the
/// accuracy of the hybrid target built from it, with the estimator variance
/// matched to the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CEstimateRow {
    pub sigma: f64,
    pub tau: f64,
    pub c_error: f64,
    pub pearson_rho: f64,
    pub cosine_mean: f64,
}

pub fn c_estimate_study(ds: &Dataset, cfg: &CEstimateConfig, seed: u64) -> Result<Vec<CEstimateRow>> {
    if cfg.samples < 2 {
        return Err(FradError::Precondition("C estimate needs at least 2 samples".into()));
    }
    let mut chosen = Vec::new();
    for e in &ds.entries {
        if chosen.len() == cfg.molecules {
            break;
        }
        let mol = e.molecule()?;
        if !mol.rotatable().is_empty() {
            chosen.push((e, mol));
        }
    }
    if chosen.is_empty() && !cfg.settings.is_empty() {
        return Err(FradError::Precondition("no molecule with a rotatable bond".into()));
    }
    let mut lins = Vec::with_capacity(chosen.len());
    for (mi, (e, mol)) in chosen.iter().enumerate() {
        let ic = internal_coords(mol, &e.coords)?;
        lins.push(match cfg.method {
            Method::Analytic => analytic_c(&ic, &e.coords, NoiseKind::Rn)?,
            Method::LeastSquares => {
                let mut rng = FradRng::new(seed, stream_id(u32::MAX as u64, mi as u64));
                lstsq_c(&ic, &e.coords, NoiseKind::Rn, cfg.probe_scale, cfg.probe_samples, &mut rng)?
            }
        });
    }
    let mut out = Vec::new();
    for (si, setting) in cfg.settings.iter().enumerate() {
        let spec = NoiseSpec::rn(setting.sigma, setting.tau);
        let (mut cerrs, mut rhos, mut coss) = (Vec::new(), Vec::new(), Vec::new());
        for (mi, ((e, mol), lin)) in chosen.iter().zip(&lins).enumerate() {
            let var = vec![setting.sigma * setting.sigma; lin.m()];
            let mut rng = FradRng::new(seed, stream_id(si as u64, mi as u64));
            let (mut est, mut oracle, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..cfg.samples {
                let rec = perturb(mol, &e.coords, &spec, &mut rng)?;
                pairs.push((rec.delta.dpsi.clone(), rec.x_med.displacement_from(&e.coords)));
                oracle.push(boltzmann_score(&e.ff, &rec.x_fin)?);
                est.push(score_target(TargetKind::Hybrid, &rec.x_fin, &e.coords, &lin.c, &var, setting.tau)?.target);
            }
            if let Ok(ce) = c_error_of(lin, &pairs) {
                cerrs.push(ce);
            }
            let fa = force_accuracy(&est, &oracle)?;
            rhos.push(fa.rho);
            coss.push(fa.cosine_mean);
        }
        out.push(CEstimateRow {
            sigma: setting.sigma,
            tau: setting.tau,
            c_error: nan_median(&cerrs),
            pearson_rho: nan_median(&rhos),
            cosine_mean: nan_median(&coss),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pes::{generate_dataset, GenConfig};

    fn small() -> Dataset {
        generate_dataset(&GenConfig { count: 6, ..Default::default() }, 3).unwrap().0
    }

    #[test]
    fn empty_settings_give_no_rows() {
        let ds = small();
        let cfg = ForceAccuracyConfig {
            settings: Vec::new(),
            ..Default::default()
        };
        assert!(force_accuracy_study(&ds, &cfg, 0).unwrap().rows.is_empty());
        assert!(perturbation_scale_study(&ds, &[], 4, 0).unwrap().is_empty());
    }

    #[test]
    fn standard_settings_give_six_rows() {
        let ds = small();
        let cfg = ForceAccuracyConfig {
            molecules: 2,
            samples: 5,
            ..Default::default()
        };
        let st = force_accuracy_study(&ds, &cfg, 0).unwrap();
        assert_eq!(st.rows.len(), 6);
        assert!(st.rows.iter().all(|r| r.pearson_rho.abs() <= 1.0));
    }

    #[test]
    fn scale_grows_with_tau_and_sigma() {
        let ds = small();
        let taus = [0.005, 0.04, 0.2].map(|t| SamplingSetting::new(0.0, t));
        let rows = perturbation_scale_study(&ds, &taus, 10, 1).unwrap();
        for r in rows.chunks(3) {
            assert!(r[0].scale < r[1].scale && r[1].scale < r[2].scale);
        }
        let pair = [SamplingSetting::new(0.0, 0.04), SamplingSetting::new(20.0, 0.04)];
        for r in perturbation_scale_study(&ds, &pair, 10, 1).unwrap().chunks(2) {
            if r[0].m >= 1 {
                assert!(r[1].scale > r[0].scale, "{}", r[0].tag);
            }
        }
    }

    #[test]
    fn rotation_only_noise_leaves_rigid_molecules_alone() {
        let ds = small();
        let rows = perturbation_scale_study(&ds, &[SamplingSetting::new(1.0, 0.0)], 3, 2).unwrap();
        for r in rows.iter().filter(|r| r.m == 0) {
            assert_eq!(r.scale, 0.0);
        }
    }

    #[test]
    fn lstsq_and_analytic_c_agree_on_accuracy() {
        let ds = small();
        let base = CEstimateConfig {
            settings: vec![SamplingSetting::new(1.0, 0.04)],
            molecules: 2,
            samples: 10,
            ..Default::default()
        };
        let a = c_estimate_study(&ds, &base, 4).unwrap();
        let cfg = CEstimateConfig {
            method: Method::LeastSquares,
            ..base
        };
        let l = c_estimate_study(&ds, &cfg, 4).unwrap();
        assert!((a[0].pearson_rho - l[0].pearson_rho).abs() < 1e-3);
        assert!((a[0].c_error - l[0].c_error).abs() < 1e-3);
    }
}
