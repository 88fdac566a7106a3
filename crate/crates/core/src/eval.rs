//! Experiment driver: NMSE sweeps over SNR, pilot count, multipath mix and
//! unrolled depth, plus spectral efficiency versus transmit power, exported
//! as CSV (`method,sweep_name,sweep_value,metric,mean,std,trials`).
//!
//! Evaluation channels live in their own seed namespace, disjoint from the
//! training streams. One pilot schedule is used per sweep point: when
//! learned methods participate it is re-derived from the dataset seed their
//! checkpoints record, so every method sees the observations the networks
//! were trained against.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::ScenarioConfig;
use crate::error::{Error, Result};
use crate::measurement::{
    gen_phase_matrix, generate_sample, vec_matrix, CascadedSample, PhaseMatrix, SnrSpec,
};
use crate::nets::checkpoint::load_checkpoint;
use crate::nets::{ModelKind, ParamCountReport, UnrolledModel};
use crate::recovery::{
    build_grid_dictionary, ista_solve, nmse_db_batched, nmse_ratio, omp_with_effective, oracle_ls,
    EffectiveDictionary, GridDictionary,
};
use crate::seeds::{derive_seed, stream_rng};

/// Estimation methods the driver can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Omp,
    Ista,
    Ols,
    Cista,
    CistaPlus,
    CnnCdl,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "omp" => Ok(Self::Omp),
            "ista" => Ok(Self::Ista),
            "ols" => Ok(Self::Ols),
            "cista" => Ok(Self::Cista),
            "cista_plus" => Ok(Self::CistaPlus),
            "cnncdl" => Ok(Self::CnnCdl),
            other => Err(Error::arg("Method::parse", format!("unknown method `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Omp => "omp",
            Self::Ista => "ista",
            Self::Ols => "ols",
            Self::Cista => "cista",
            Self::CistaPlus => "cista_plus",
            Self::CnnCdl => "cnncdl",
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Self::Cista | Self::CistaPlus | Self::CnnCdl)
    }

    pub fn model_kind(&self) -> Option<ModelKind> {
        match self {
            Self::Cista => Some(ModelKind::Cista),
            Self::CistaPlus => Some(ModelKind::CistaPlus),
            Self::CnnCdl => Some(ModelKind::CnnCdl),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Experiment axes mirroring the evaluation figures.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepValues {
    Snr(Vec<f64>),
    Pilots(Vec<usize>),
    /// `(l_far, l_near)` per point.
    Multipath(Vec<(usize, usize)>),
    /// Evaluate intermediate outputs of every unrolled layer.
    Layers,
    /// Transmit power values for spectral efficiency.
    Power(Vec<f64>),
}

impl SweepValues {
    fn name(&self) -> &'static str {
        match self {
            Self::Snr(_) => "snr_db",
            Self::Pilots(_) => "pilots",
            Self::Multipath(_) => "multipath",
            Self::Layers => "layer",
            Self::Power(_) => "power_w",
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Self::Snr(v) => v.is_empty(),
            Self::Pilots(v) => v.is_empty(),
            Self::Multipath(v) => v.is_empty(),
            Self::Layers => false,
            Self::Power(v) => v.is_empty(),
        }
    }
}

/// Dictionary grid and solver knobs for the classical baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalConfig {
    pub bs_grid: usize,
    pub ris_angle_grid: (usize, usize),
    pub ris_distance_rings: usize,
    pub omp_max_atoms: usize,
    pub omp_residual_tol: f64,
    pub ista_rho: f64,
    pub ista_iters: usize,
}

impl ClassicalConfig {
    /// Defaults tied to a scenario: 2N BS rates, a (2·M1)×(2·M2) RIS rate
    /// grid, 4 distance rings, OMP capped at twice the true sparsity order.
    pub fn for_scenario(cfg: &ScenarioConfig) -> Self {
        Self {
            bs_grid: 2 * cfg.n_bs,
            ris_angle_grid: (2 * cfg.m1, 2 * cfg.m2),
            ris_distance_rings: 4,
            omp_max_atoms: 2 * cfg.l1 * cfg.l2(),
            omp_residual_tol: 1e-3,
            ista_rho: 1e-3,
            ista_iters: 200,
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub methods: Vec<Method>,
    pub scenario: ScenarioConfig,
    pub pilots: usize,
    /// SNR used when the sweep axis is not SNR.
    pub snr_db: f64,
    pub trials: usize,
    pub seed: u64,
    pub sweep: SweepValues,
    /// Noise power σ² of the spectral-efficiency link.
    pub se_sigma2: f64,
    /// Checkpoint per learned method; `{p}` expands to the pilot count.
    pub checkpoints: HashMap<Method, PathBuf>,
    pub classical: ClassicalConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() && !matches!(self.sweep, SweepValues::Power(_)) {
            return Err(Error::Config("experiment needs at least one method".into()));
        }
        if self.sweep.is_empty() {
            return Err(Error::Config("sweep values must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if matches!(self.sweep, SweepValues::Layers) {
            if let Some(m) = self.methods.iter().find(|m| !m.is_learned()) {
                return Err(Error::Config(format!(
                    "layer sweep only applies to unrolled methods, got `{m}`"
                )));
            }
        }
        for m in &self.methods {
            if m.is_learned() && !self.checkpoints.contains_key(m) {
                return Err(Error::MissingCheckpoint { method: m.to_string() });
            }
        }
        Ok(())
    }
}

/// One aggregated measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub sweep_name: String,
    pub sweep_value: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,sweep_name,sweep_value,metric,mean,std,trials\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method, r.sweep_name, r.sweep_value, r.metric, r.mean, r.std, r.trials
            ));
        }
        out
    }

    pub fn mean_of(&self, method: &str, sweep_value: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.sweep_value == sweep_value)
            .map(|r| r.mean)
    }
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

struct LoadedModels {
    by_method: HashMap<Method, UnrolledModel>,
    /// Dataset seed recorded in the checkpoints (pilot schedule source).
    dataset_seed: Option<u64>,
}

fn load_models(spec: &ExperimentSpec, pilots: usize) -> Result<LoadedModels> {
    let mut by_method = HashMap::new();
    let mut dataset_seed = None;
    for m in &spec.methods {
        if !m.is_learned() {
            continue;
        }
        let raw = spec.checkpoints.get(m).ok_or_else(|| Error::MissingCheckpoint {
            method: m.to_string(),
        })?;
        let path = PathBuf::from(raw.to_string_lossy().replace("{p}", &pilots.to_string()));
        let (model, config) = load_checkpoint(&path)?;
        if Some(model.kind()) != m.model_kind() {
            return Err(Error::Config(format!(
                "checkpoint {} holds a {} model but was given for `{m}`",
                path.display(),
                model.kind()
            )));
        }
        if let Some(ckpt_pilots) = config.get_usize("pilots")? {
            if ckpt_pilots != pilots {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with {ckpt_pilots} pilots, experiment uses {pilots}",
                    path.display()
                )));
            }
        }
        if let Some(seed) = config.get_u64("dataset_seed")? {
            match dataset_seed {
                None => dataset_seed = Some(seed),
                Some(existing) if existing != seed => {
                    return Err(Error::Config(
                        "checkpoints disagree on their dataset seed; they were trained on \
                         different pilot schedules"
                            .into(),
                    ));
                }
                _ => {}
            }
        }
        by_method.insert(*m, model);
    }
    Ok(LoadedModels { by_method, dataset_seed })
}

fn experiment_theta(spec: &ExperimentSpec, pilots: usize, dataset_seed: Option<u64>) -> PhaseMatrix {
    let seed = dataset_seed.unwrap_or(spec.seed);
    gen_phase_matrix(spec.scenario.m(), pilots, &mut stream_rng(seed, "theta", 0))
}

fn eval_samples(
    scenario: &ScenarioConfig,
    theta: &PhaseMatrix,
    snr_db: f64,
    trials: usize,
    seed: u64,
    point: usize,
) -> Result<Vec<CascadedSample>> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let s = derive_seed(seed, &format!("eval-point-{point}"), t as u64);
            generate_sample(scenario, theta, SnrSpec::Fixed(snr_db), s)
        })
        .collect()
}

/// Classical solvers prepared once per sweep point.
struct ClassicalContext {
    dict: GridDictionary,
    eff: EffectiveDictionary,
    ista_step: f64,
}

impl ClassicalContext {
    fn build(
        spec: &ExperimentSpec,
        scenario: &ScenarioConfig,
        theta: &PhaseMatrix,
    ) -> Result<Option<Self>> {
        if !spec.methods.iter().any(|m| matches!(m, Method::Omp | Method::Ista)) {
            return Ok(None);
        }
        let c = &spec.classical;
        let dict =
            build_grid_dictionary(scenario, c.bs_grid, c.ris_angle_grid, c.ris_distance_rings)?;
        let eff = EffectiveDictionary::new(&dict, theta)?;
        let ista_step = 0.9 / spectral_norm_sq(&eff.matrix, 60).max(1e-12);
        Ok(Some(Self { dict, eff, ista_step }))
    }
}

/// Largest squared singular value by power iteration on `AᴴA`.
fn spectral_norm_sq(a: &DMatrix<Complex64>, iters: usize) -> f64 {
    let mut v = DVector::from_element(a.ncols(), Complex64::new(1.0, 0.0));
    v /= Complex64::new(v.norm(), 0.0);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = a.adjoint() * (a * &v);
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        lambda = n;
        v = w / Complex64::new(n, 0.0);
    }
    lambda
}

fn estimate_with(
    method: Method,
    spec: &ExperimentSpec,
    scenario: &ScenarioConfig,
    theta: &PhaseMatrix,
    classical: Option<&ClassicalContext>,
    models: &LoadedModels,
    sample: &CascadedSample,
) -> Result<DVector<Complex64>> {
    match method {
        Method::Ols => Ok(oracle_ls(&sample.obs, theta, &sample.paths, scenario)?.h_hat),
        Method::Omp => {
            let ctx = classical.expect("classical context prepared");
            Ok(omp_with_effective(
                &sample.obs,
                &ctx.dict,
                &ctx.eff,
                spec.classical.omp_max_atoms,
                spec.classical.omp_residual_tol,
            )?
            .h_hat)
        }
        Method::Ista => {
            let ctx = classical.expect("classical context prepared");
            Ok(ista_solve(
                &sample.obs,
                theta,
                &ctx.dict,
                spec.classical.ista_rho,
                ctx.ista_step,
                spec.classical.ista_iters,
            )?
            .h_hat)
        }
        Method::Cista | Method::CistaPlus | Method::CnnCdl => {
            let model = models.by_method.get(&method).expect("validated");
            model.estimate(&sample.obs.y, theta, scenario.n_bs)
        }
    }
}

fn nmse_rows_for_point(
    spec: &ExperimentSpec,
    scenario: &ScenarioConfig,
    theta: &PhaseMatrix,
    samples: &[CascadedSample],
    models: &LoadedModels,
    sweep_value: String,
) -> Result<Vec<ResultRow>> {
    let classical = ClassicalContext::build(spec, scenario, theta)?;
    let mut rows = Vec::new();
    for &method in &spec.methods {
        let ratios: Result<Vec<f64>> = samples
            .par_iter()
            .map(|s| {
                let h_hat =
                    estimate_with(method, spec, scenario, theta, classical.as_ref(), models, s)?;
                nmse_ratio(&h_hat, &vec_matrix(&s.channel.h_matrix))
            })
            .collect();
        let ratios = ratios?;
        let dbs: Vec<f64> = ratios.iter().map(|&r| crate::recovery::ratio_to_db(r)).collect();
        rows.push(ResultRow {
            method: method.to_string(),
            sweep_name: spec.sweep.name().to_string(),
            sweep_value: sweep_value.clone(),
            metric: "nmse_db".to_string(),
            mean: nmse_db_batched(&ratios),
            std: std_dev(&dbs),
            trials: samples.len(),
        });
    }
    Ok(rows)
}

/// Run an experiment; rows come back ordered by (sweep point, method).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let mut result = ExperimentResult::default();
    match &spec.sweep {
        SweepValues::Snr(values) => {
            let models = load_models(spec, spec.pilots)?;
            let theta = experiment_theta(spec, spec.pilots, models.dataset_seed);
            for (i, &snr) in values.iter().enumerate() {
                let samples =
                    eval_samples(&spec.scenario, &theta, snr, spec.trials, spec.seed, i)?;
                result.rows.extend(nmse_rows_for_point(
                    spec,
                    &spec.scenario,
                    &theta,
                    &samples,
                    &models,
                    format!("{snr}"),
                )?);
            }
        }
        SweepValues::Pilots(values) => {
            for (i, &p) in values.iter().enumerate() {
                let models = load_models(spec, p)?;
                let theta = experiment_theta(spec, p, models.dataset_seed);
                let samples =
                    eval_samples(&spec.scenario, &theta, spec.snr_db, spec.trials, spec.seed, i)?;
                result.rows.extend(nmse_rows_for_point(
                    spec,
                    &spec.scenario,
                    &theta,
                    &samples,
                    &models,
                    format!("{p}"),
                )?);
            }
        }
        SweepValues::Multipath(configs) => {
            let models = load_models(spec, spec.pilots)?;
            let theta = experiment_theta(spec, spec.pilots, models.dataset_seed);
            for (i, &(l_far, l_near)) in configs.iter().enumerate() {
                let mut scenario = spec.scenario.clone();
                scenario.l_far = l_far;
                scenario.l_near = l_near;
                scenario.validate()?;
                let samples =
                    eval_samples(&scenario, &theta, spec.snr_db, spec.trials, spec.seed, i)?;
                result.rows.extend(nmse_rows_for_point(
                    spec,
                    &scenario,
                    &theta,
                    &samples,
                    &models,
                    format!("{l_far}-{l_near}"),
                )?);
            }
        }
        SweepValues::Layers => {
            let models = load_models(spec, spec.pilots)?;
            let theta = experiment_theta(spec, spec.pilots, models.dataset_seed);
            let samples =
                eval_samples(&spec.scenario, &theta, spec.snr_db, spec.trials, spec.seed, 0)?;
            for &method in &spec.methods {
                let model = models.by_method.get(&method).expect("validated");
                let per_sample: Result<Vec<Vec<f64>>> = samples
                    .par_iter()
                    .map(|s| {
                        let truth = vec_matrix(&s.channel.h_matrix);
                        model
                            .estimate_layers(&s.obs.y, &theta, spec.scenario.n_bs)?
                            .iter()
                            .map(|h| nmse_ratio(h, &truth))
                            .collect()
                    })
                    .collect();
                let per_sample = per_sample?;
                for layer in 0..model.layers() {
                    let ratios: Vec<f64> = per_sample.iter().map(|v| v[layer]).collect();
                    let dbs: Vec<f64> =
                        ratios.iter().map(|&r| crate::recovery::ratio_to_db(r)).collect();
                    result.rows.push(ResultRow {
                        method: method.to_string(),
                        sweep_name: "layer".to_string(),
                        sweep_value: format!("{}", layer + 1),
                        metric: "nmse_db".to_string(),
                        mean: nmse_db_batched(&ratios),
                        std: std_dev(&dbs),
                        trials: samples.len(),
                    });
                }
            }
        }
        SweepValues::Power(powers) => {
            let models = load_models(spec, spec.pilots)?;
            let theta = experiment_theta(spec, spec.pilots, models.dataset_seed);
            let classical = ClassicalContext::build(spec, &spec.scenario, &theta)?;
            let samples =
                eval_samples(&spec.scenario, &theta, spec.snr_db, spec.trials, spec.seed, 0)?;
            // design channels once per method and sample, reuse across powers
            let mut designs: Vec<(String, Vec<DMatrix<Complex64>>)> = Vec::new();
            let perfect: Vec<DMatrix<Complex64>> =
                samples.iter().map(|s| s.channel.h_matrix.clone()).collect();
            designs.push(("perfect".to_string(), perfect));
            for &method in &spec.methods {
                let ests: Result<Vec<DMatrix<Complex64>>> = samples
                    .par_iter()
                    .map(|s| {
                        let h = estimate_with(
                            method,
                            spec,
                            &spec.scenario,
                            &theta,
                            classical.as_ref(),
                            &models,
                            s,
                        )?;
                        Ok(crate::measurement::unvec_matrix(
                            &h,
                            spec.scenario.n_bs,
                            spec.scenario.m(),
                        ))
                    })
                    .collect();
                designs.push((method.to_string(), ests?));
            }
            for &w in powers {
                for (name, dmats) in &designs {
                    let ses: Result<Vec<f64>> = samples
                        .par_iter()
                        .zip(dmats)
                        .map(|(s, d)| {
                            spectral_efficiency(&s.channel.h_matrix, d, w, spec.se_sigma2)
                        })
                        .collect();
                    let ses = ses?;
                    let mean = ses.iter().sum::<f64>() / ses.len() as f64;
                    result.rows.push(ResultRow {
                        method: name.clone(),
                        sweep_name: "power_w".to_string(),
                        sweep_value: format!("{w}"),
                        metric: "se_bits".to_string(),
                        mean,
                        std: std_dev(&ses),
                        trials: ses.len(),
                    });
                }
            }
        }
    }
    Ok(result)
}

const SE_DESIGN_ITERS: usize = 12;

/// Spectral efficiency `log₂(1 + (W/σ²)·|fᴴ·H·θ|²)` of the true channel
/// under a beamformer/phase pair designed from `h_design` by the alternating
/// matched heuristic: `θ_m = exp(−j·arg((fᴴH)_m))` alternated with
/// `f = Hθ/‖Hθ‖`.
pub fn spectral_efficiency(
    h_true: &DMatrix<Complex64>,
    h_design: &DMatrix<Complex64>,
    power_w: f64,
    sigma2: f64,
) -> Result<f64> {
    if sigma2 <= 0.0 {
        return Err(Error::arg("spectral_efficiency", format!("sigma2 must be > 0, got {sigma2}")));
    }
    if power_w < 0.0 {
        return Err(Error::arg("spectral_efficiency", format!("power {power_w} < 0")));
    }
    let (f, th) = design_beams(h_design, SE_DESIGN_ITERS);
    let gain = (f.adjoint() * h_true * &th)[(0, 0)].norm_sqr();
    Ok((1.0 + power_w / sigma2 * gain).log2())
}

/// Alternating matched design: unit-norm BS combiner and unit-modulus RIS
/// phases for a given (possibly estimated) channel.
pub fn design_beams(
    h: &DMatrix<Complex64>,
    iters: usize,
) -> (DVector<Complex64>, DVector<Complex64>) {
    let (n, m) = (h.nrows(), h.ncols());
    let one = Complex64::new(1.0, 0.0);
    let mut theta = DVector::from_element(m, one);
    let mut f = {
        let v = h * &theta;
        let nv = v.norm();
        if nv > 0.0 {
            v / Complex64::new(nv, 0.0)
        } else {
            let mut e = DVector::from_element(n, Complex64::new(0.0, 0.0));
            e[0] = one;
            e
        }
    };
    for _ in 0..iters {
        let row = f.adjoint() * h; // 1×M
        for mi in 0..m {
            let v = row[(0, mi)];
            theta[mi] = if v.norm() > 0.0 { (v / Complex64::new(v.norm(), 0.0)).conj() } else { one };
        }
        let v = h * &theta;
        let nv = v.norm();
        if nv > 0.0 {
            f = v / Complex64::new(nv, 0.0);
        }
    }
    (f, theta)
}

/// One checkpoint's row in the parameter/complexity table.
#[derive(Debug, Clone)]
pub struct ModelReport {
    pub kind: String,
    pub params: ParamCountReport,
    /// Analytic forward multiply-adds, when the checkpoint records its dims.
    pub flops: Option<u64>,
}

/// Parameter-count (and analytic FLOP) table of a set of checkpoints.
pub fn report_params(paths: &[PathBuf]) -> Result<Vec<ModelReport>> {
    let mut out = Vec::new();
    for p in paths {
        let (model, config) = load_checkpoint(p)?;
        let dims = (
            config.get_usize("n_bs")?,
            config.get_usize("m1")?,
            config.get_usize("m2")?,
            config.get_usize("pilots")?,
        );
        let flops = match dims {
            (Some(n), Some(m1), Some(m2), Some(pp)) => {
                Some(model.flops_estimate(n, m1 * m2, pp))
            }
            _ => None,
        };
        out.push(ModelReport { kind: model.kind().to_string(), params: model.param_count(), flops });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{assemble_channels, sample_paths};
    use rand::Rng;

    fn spec_with(methods: Vec<Method>, sweep: SweepValues, trials: usize) -> ExperimentSpec {
        let scenario = ScenarioConfig::desk();
        let classical = ClassicalConfig {
            bs_grid: 8,
            ris_angle_grid: (8, 4),
            ris_distance_rings: 1,
            omp_max_atoms: 8,
            omp_residual_tol: 1e-3,
            ista_rho: 1e-3,
            ista_iters: 50,
        };
        ExperimentSpec {
            methods,
            scenario,
            pilots: 16,
            snr_db: 5.0,
            trials,
            seed: 99,
            sweep,
            se_sigma2: 1.0,
            checkpoints: HashMap::new(),
            classical,
        }
    }

    #[test]
    fn noiseless_ols_sweep_is_floor_everywhere() {
        let spec = spec_with(
            vec![Method::Ols],
            SweepValues::Snr(vec![f64::INFINITY, f64::INFINITY]),
            5,
        );
        let res = run_experiment(&spec).unwrap();
        assert_eq!(res.rows.len(), 2);
        for r in &res.rows {
            assert!(r.mean <= -120.0, "row {r:?}");
        }
    }

    #[test]
    fn multipath_sweep_produces_one_row_per_config_per_method() {
        let spec = spec_with(
            vec![Method::Ols, Method::Omp],
            SweepValues::Multipath(vec![(0, 4), (1, 3), (2, 2), (3, 1), (4, 0)]),
            3,
        );
        let res = run_experiment(&spec).unwrap();
        assert_eq!(res.rows.len(), 5 * 2);
        let ols_rows: Vec<_> = res.rows.iter().filter(|r| r.method == "ols").collect();
        assert_eq!(ols_rows.len(), 5);
        assert_eq!(ols_rows[0].sweep_value, "0-4");
        assert_eq!(ols_rows[4].sweep_value, "4-0");
    }

    #[test]
    fn repeated_runs_emit_identical_csv_bytes() {
        let spec =
            spec_with(vec![Method::Ols], SweepValues::Snr(vec![0.0, 10.0]), 4);
        let a = run_experiment(&spec).unwrap().to_csv();
        let b = run_experiment(&spec).unwrap().to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_checkpoint_is_reported_with_method_name() {
        let spec = spec_with(vec![Method::CnnCdl], SweepValues::Snr(vec![0.0]), 2);
        let err = run_experiment(&spec).unwrap_err();
        assert!(err.to_string().contains("cnncdl"));
    }

    #[test]
    fn layer_sweep_rejects_classical_methods() {
        let spec = spec_with(vec![Method::Omp], SweepValues::Layers, 2);
        assert!(run_experiment(&spec).is_err());
    }

    #[test]
    fn se_is_zero_at_zero_power_and_rejects_bad_sigma() {
        let mut rng = stream_rng(41, "se", 0);
        let cfg = ScenarioConfig::desk();
        let paths = sample_paths(&cfg, &mut rng).unwrap();
        let ch = assemble_channels(&paths, &cfg);
        assert_eq!(spectral_efficiency(&ch.h_matrix, &ch.h_matrix, 0.0, 1.0).unwrap(), 0.0);
        assert!(spectral_efficiency(&ch.h_matrix, &ch.h_matrix, 1.0, 0.0).is_err());
        assert!(spectral_efficiency(&ch.h_matrix, &ch.h_matrix, -1.0, 1.0).is_err());
    }

    #[test]
    fn rank_one_heuristic_attains_exhaustive_phase_optimum() {
        // rank-1 channel: the alternating design should reach
        // σ²·(Σ|v_m|)², which upper-bounds any quantized exhaustive search.
        let mut rng = stream_rng(41, "se", 1);
        let (n, m) = (4, 6);
        let u = DVector::from_fn(n, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let v = DVector::from_fn(m, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let h = &u * v.adjoint();
        let (f, th) = design_beams(&h, 12);
        let gain = (f.adjoint() * &h * &th)[(0, 0)].norm_sqr();
        let closed_form = u.norm_squared() * v.iter().map(|x| x.norm()).sum::<f64>().powi(2);
        assert!((gain - closed_form).abs() <= 1e-9 * closed_form, "{gain} vs {closed_form}");
        // exhaustive search over an 8-phase grid cannot beat it
        let phases: Vec<Complex64> = (0..8)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                Complex64::new(a.cos(), a.sin())
            })
            .collect();
        let mut best = 0.0f64;
        let mut idx = vec![0usize; m];
        loop {
            let theta = DVector::from_fn(m, |i, _| phases[idx[i]]);
            let ht = &h * &theta;
            best = best.max(ht.norm_squared()); // matched f gives ‖Hθ‖²
            let mut carry = 0;
            loop {
                idx[carry] += 1;
                if idx[carry] < 8 {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
                if carry == m {
                    break;
                }
            }
            if carry == m {
                break;
            }
        }
        assert!(gain >= best - 1e-9, "heuristic {gain} < grid optimum {best}");
    }

    #[test]
    fn perfect_csi_dominates_perturbed_estimates_on_average() {
        let cfg = ScenarioConfig::desk();
        let mut diffs = Vec::new();
        for trial in 0..100 {
            let mut rng = stream_rng(41, "se-dom", trial);
            let paths = sample_paths(&cfg, &mut rng).unwrap();
            let ch = assemble_channels(&paths, &cfg);
            // estimated CSI: true channel plus 10% relative noise
            let scale = 0.1 * ch.h_matrix.norm() / ((cfg.n_bs * cfg.m()) as f64).sqrt();
            let noisy = DMatrix::from_fn(cfg.n_bs, cfg.m(), |i, j| {
                ch.h_matrix[(i, j)]
                    + Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                        * scale
            });
            let perfect = spectral_efficiency(&ch.h_matrix, &ch.h_matrix, 1.0, 0.1).unwrap();
            let estimated = spectral_efficiency(&ch.h_matrix, &noisy, 1.0, 0.1).unwrap();
            diffs.push(perfect - estimated);
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!(mean >= -0.05, "perfect CSI fell below estimated by {mean} bits/s/Hz");
    }

    #[test]
    fn se_power_sweep_includes_perfect_row_and_is_monotone() {
        let spec = spec_with(vec![], SweepValues::Power(vec![0.5, 1.0, 2.0, 4.0]), 4);
        let res = run_experiment(&spec).unwrap();
        let perfect: Vec<f64> = res
            .rows
            .iter()
            .filter(|r| r.method == "perfect")
            .map(|r| r.mean)
            .collect();
        assert_eq!(perfect.len(), 4);
        for w in perfect.windows(2) {
            assert!(w[1] >= w[0], "perfect-CSI SE not monotone: {perfect:?}");
        }
    }
}

#[cfg(test)]
mod monotonicity {
    use super::*;

    /// NMSE of every method is non-increasing in SNR in expectation.
    #[test]
    fn nmse_improves_with_snr() {
        let scenario = ScenarioConfig::desk();
        let classical = ClassicalConfig {
            bs_grid: 8,
            ris_angle_grid: (8, 4),
            ris_distance_rings: 1,
            omp_max_atoms: 8,
            omp_residual_tol: 1e-3,
            ista_rho: 1e-3,
            ista_iters: 50,
        };
        let mut spec = ExperimentSpec {
            methods: vec![Method::Ols, Method::Omp],
            scenario,
            pilots: 16,
            snr_db: 0.0,
            trials: 200,
            seed: 5,
            sweep: SweepValues::Snr(vec![-5.0, 5.0, 15.0]),
            se_sigma2: 1.0,
            checkpoints: HashMap::new(),
            classical,
        };
        let check = |res: &ExperimentResult, methods: &[&str]| {
            for method in methods {
                let curve: Vec<f64> = ["-5", "5", "15"]
                    .iter()
                    .map(|v| res.mean_of(method, v).unwrap())
                    .collect();
                for w in curve.windows(2) {
                    assert!(
                        w[1] <= w[0] + 0.5,
                        "{method} NMSE rose with SNR: {curve:?}"
                    );
                }
            }
        };
        let res = run_experiment(&spec).unwrap();
        check(&res, &["ols", "omp"]);
        // ISTA's dense dictionary products are costly; fewer trials suffice
        // for its monotonicity
        spec.methods = vec![Method::Ista];
        spec.trials = 60;
        let res = run_experiment(&spec).unwrap();
        check(&res, &["ista"]);
    }
}
