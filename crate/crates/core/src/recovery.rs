//! Classical estimators for the cascaded channel.
//!
//! A grid dictionary pairs BS steering atoms on a uniform spatial-frequency
//! grid with RIS-side atoms drawn from a wrapped far-field rate grid plus
//! near-field polar samples (direction grid × distance rings inside the
//! Rayleigh distance). Estimators work on the effective matrix `Φ·D`,
//! applied matrix-free per atom.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::{
    khatri_rao_cols, near_steering, steering_matrices, PathSet, ScenarioConfig,
};
use crate::error::{Error, Result};
use crate::measurement::{apply_phi, apply_phi_adjoint, Observation, PhaseMatrix};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const PI: f64 = std::f64::consts::PI;

/// Parameters behind one RIS-side dictionary atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RisAtomParam {
    /// Far-field atom with wrapped per-element phase rates over (m1, m2).
    FarRate { w1: f64, w2: f64 },
    /// Near-field atom at `radius` meters along the direction encoded by the
    /// same rate pair.
    NearPolar { w1: f64, w2: f64, radius: f64 },
}

/// Per-atom parameter record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomMeta {
    /// BS-side spatial frequency (π·sin ψ on the ULA).
    pub bs_rate: f64,
    pub ris: RisAtomParam,
}

/// Dictionary of unit-norm cascaded atoms, ambient dimension N·M.
#[derive(Debug, Clone)]
pub struct GridDictionary {
    /// N·M × S, one atom per column.
    pub atoms: DMatrix<Complex64>,
    pub atom_meta: Vec<AtomMeta>,
}

impl GridDictionary {
    pub fn ambient_dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.ncols()
    }
}

/// Sparse estimate: `h_hat = atoms[:, support] · coeffs`.
#[derive(Debug, Clone)]
pub struct SparseEstimate {
    pub support: Vec<usize>,
    pub coeffs: DVector<Complex64>,
    pub h_hat: DVector<Complex64>,
    /// Residual ℓ2 norm after each greedy selection (OMP only).
    pub residual_norms: Vec<f64>,
    /// Atoms discarded because they made the selected sub-dictionary
    /// rank-deficient.
    pub dropped_atoms: Vec<usize>,
}

fn unit_phase_ramp(n: usize, rate: f64) -> DVector<Complex64> {
    let norm = 1.0 / (n as f64).sqrt();
    DVector::from_fn(n, |k, _| {
        Complex64::new((rate * k as f64).cos(), (rate * k as f64).sin()) * norm
    })
}

fn far_rate_atom(m1: usize, m2: usize, w1: f64, w2: f64) -> DVector<Complex64> {
    let norm = 1.0 / ((m1 * m2) as f64).sqrt();
    DVector::from_fn(m1 * m2, |idx, _| {
        let (i1, i2) = (idx / m2, idx % m2);
        let ph = w1 * i1 as f64 + w2 * i2 as f64;
        Complex64::new(ph.cos(), ph.sin()) * norm
    })
}

/// Map a wrapped rate pair to a propagation direction, if one exists
/// (`uz = w1/π`, `uy = w2/π`, `ux = √(1−uy²−uz²)`).
fn rates_to_direction(w1: f64, w2: f64) -> Option<[f64; 3]> {
    let uz = w1 / PI;
    let uy = w2 / PI;
    let rest = 1.0 - uz * uz - uy * uy;
    if rest < 0.0 {
        return None;
    }
    Some([rest.sqrt(), uy, uz])
}

/// Build the Kronecker-structured grid dictionary: `bs_grid` ULA rates ×
/// (far rate grid of `ris_angle_grid` points plus near polar samples on the
/// same directions at `ris_distance_rings` radii inside the Rayleigh
/// distance). All atoms have unit norm by construction.
pub fn build_grid_dictionary(
    config: &ScenarioConfig,
    bs_grid: usize,
    ris_angle_grid: (usize, usize),
    ris_distance_rings: usize,
) -> Result<GridDictionary> {
    let (n1, n2) = ris_angle_grid;
    if bs_grid == 0 || n1 == 0 || n2 == 0 {
        return Err(Error::Config(format!(
            "degenerate dictionary grid: bs_grid={bs_grid}, ris_angle_grid={ris_angle_grid:?}"
        )));
    }
    let n = config.n_bs;
    let (m1, m2) = (config.m1, config.m2);
    let rayleigh = config.rayleigh_distance_m();

    let bs_rates: Vec<f64> =
        (0..bs_grid).map(|g| -PI + TWO_PI * g as f64 / bs_grid as f64).collect();
    let bs_atoms: Vec<DVector<Complex64>> =
        bs_rates.iter().map(|&w| unit_phase_ramp(n, w)).collect();

    let mut ris_atoms: Vec<(DVector<Complex64>, RisAtomParam)> = Vec::new();
    for i in 0..n1 {
        let w1 = -PI + TWO_PI * i as f64 / n1 as f64;
        for j in 0..n2 {
            let w2 = -PI + TWO_PI * j as f64 / n2 as f64;
            ris_atoms.push((far_rate_atom(m1, m2, w1, w2), RisAtomParam::FarRate { w1, w2 }));
            if ris_distance_rings > 0 {
                if let Some(u) = rates_to_direction(w1, w2) {
                    for ring in 1..=ris_distance_rings {
                        let radius = rayleigh * ring as f64 / (ris_distance_rings as f64 + 1.0);
                        let pos = [u[0] * radius, u[1] * radius, u[2] * radius];
                        ris_atoms.push((
                            near_steering(pos, config),
                            RisAtomParam::NearPolar { w1, w2, radius },
                        ));
                    }
                }
            }
        }
    }

    let s = bs_atoms.len() * ris_atoms.len();
    let mut atoms = DMatrix::zeros(n * m1 * m2, s);
    let mut atom_meta = Vec::with_capacity(s);
    let mut col = 0;
    for (bs_idx, a) in bs_atoms.iter().enumerate() {
        for (r, param) in &ris_atoms {
            // atom = r ⊗ a under the column-major vec convention
            for (mi, rv) in r.iter().enumerate() {
                for (ni, av) in a.iter().enumerate() {
                    atoms[(mi * n + ni, col)] = rv * av;
                }
            }
            atom_meta.push(AtomMeta { bs_rate: bs_rates[bs_idx], ris: *param });
            col += 1;
        }
    }
    Ok(GridDictionary { atoms, atom_meta })
}

/// Dictionary pushed through the measurement operator, with cached column
/// norms; reused across trials that share one phase schedule.
#[derive(Debug, Clone)]
pub struct EffectiveDictionary {
    /// N·P × S.
    pub matrix: DMatrix<Complex64>,
    pub col_norms: Vec<f64>,
}

impl EffectiveDictionary {
    pub fn new(dict: &GridDictionary, theta: &PhaseMatrix) -> Result<Self> {
        let s = dict.atom_count();
        let np = (dict.ambient_dim() / theta.m()) * theta.pilots();
        let mut matrix = DMatrix::zeros(np, s);
        for c in 0..s {
            let atom = DVector::from_column_slice(dict.atoms.column(c).as_slice());
            let eff = apply_phi(&atom, theta)?;
            matrix.set_column(c, &eff);
        }
        let col_norms = (0..s).map(|c| matrix.column(c).norm()).collect();
        Ok(Self { matrix, col_norms })
    }
}

/// Orthogonal matching pursuit on the effective matrix `Φ·D`: greedy atom
/// selection with a full least-squares refit of the selected coefficients
/// after every pick; stops at `max_atoms` or when the residual drops below
/// `residual_tol·‖y‖`.
pub fn omp(
    y: &Observation,
    theta: &PhaseMatrix,
    dict: &GridDictionary,
    max_atoms: usize,
    residual_tol: f64,
) -> Result<SparseEstimate> {
    let eff = EffectiveDictionary::new(dict, theta)?;
    omp_with_effective(y, dict, &eff, max_atoms, residual_tol)
}

pub fn omp_with_effective(
    y: &Observation,
    dict: &GridDictionary,
    eff: &EffectiveDictionary,
    max_atoms: usize,
    residual_tol: f64,
) -> Result<SparseEstimate> {
    let s = dict.atom_count();
    if max_atoms > s {
        return Err(Error::arg(
            "omp",
            format!("max_atoms {max_atoms} exceeds atom count {s}"),
        ));
    }
    let y_norm = y.y.norm();
    let mut residual = y.y.clone();
    let mut support: Vec<usize> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    let mut residual_norms = Vec::new();
    let mut coeffs = DVector::<Complex64>::zeros(0);
    while support.len() < max_atoms && residual.norm() > residual_tol * y_norm {
        // score all unused, non-dropped atoms by normalized correlation
        let mut best: Option<(usize, f64)> = None;
        for c in 0..s {
            if support.contains(&c) || dropped.contains(&c) || eff.col_norms[c] <= 1e-12 {
                continue;
            }
            let corr = eff.matrix.column(c).dotc(&residual).norm() / eff.col_norms[c];
            if best.map(|(_, b)| corr > b).unwrap_or(true) {
                best = Some((c, corr));
            }
        }
        let Some((pick, _)) = best else { break };
        // least-squares refit on the tentative support
        let mut tentative = support.clone();
        tentative.push(pick);
        let sub = DMatrix::from_columns(
            &tentative.iter().map(|&c| eff.matrix.column(c).into_owned()).collect::<Vec<_>>(),
        );
        let svd = sub.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= 1e-10 * smax {
            dropped.push(pick);
            continue;
        }
        let sol = svd.solve(&y.y, smax * 1e-12).map_err(|e| Error::arg("omp", e.to_string()))?;
        residual = &y.y - sub * &sol;
        support = tentative;
        coeffs = sol;
        residual_norms.push(residual.norm());
    }
    let mut h_hat = DVector::zeros(dict.ambient_dim());
    for (k, &c) in support.iter().enumerate() {
        h_hat += dict.atoms.column(c) * coeffs[k];
    }
    Ok(SparseEstimate { support, coeffs, h_hat, residual_norms, dropped_atoms: dropped })
}

/// Complex soft threshold: shrink the modulus by `tau`.
fn soft_complex(z: Complex64, tau: f64) -> Complex64 {
    let mag = z.norm();
    if mag <= tau {
        Complex64::new(0.0, 0.0)
    } else {
        z * ((mag - tau) / mag)
    }
}

/// ISTA on the dictionary coefficients:
/// `z_k = g_{k−1} + step·Dᴴ Φᴴ (y − Φ D g_{k−1})`,
/// `g_k = soft(z_k, rho·step)`. Returns the final iterate with
/// `h_hat = D·g`.
pub fn ista_solve(
    y: &Observation,
    theta: &PhaseMatrix,
    dict: &GridDictionary,
    rho: f64,
    step: f64,
    iters: usize,
) -> Result<SparseEstimate> {
    if step <= 0.0 {
        return Err(Error::arg("ista_solve", format!("step must be > 0, got {step}")));
    }
    if rho < 0.0 {
        return Err(Error::arg("ista_solve", format!("rho must be >= 0, got {rho}")));
    }
    let s = dict.atom_count();
    let mut g = DVector::<Complex64>::zeros(s);
    let tau = rho * step;
    for it in 0..iters {
        let h = &dict.atoms * &g;
        let res = &y.y - apply_phi(&h, theta)?;
        let back = apply_phi_adjoint(&res, theta)?;
        let grad_term = dict.atoms.adjoint() * back;
        for i in 0..s {
            let z = g[i] + grad_term[i] * step;
            g[i] = soft_complex(z, tau);
        }
        if g.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Divergence { op: "ista_solve", iteration: it });
        }
    }
    let h_hat = &dict.atoms * &g;
    let support: Vec<usize> =
        (0..s).filter(|&i| g[i].norm_sqr() > 0.0).collect();
    let coeffs = DVector::from_iterator(support.len(), support.iter().map(|&i| g[i]));
    Ok(SparseEstimate { support, coeffs, h_hat, residual_norms: Vec::new(), dropped_atoms: Vec::new() })
}

/// ISTA objective `½‖y − ΦDg‖² + ρ‖g‖₁` for a coefficient vector given as a
/// sparse estimate; used by monotonicity checks.
pub fn ista_objective(
    y: &Observation,
    theta: &PhaseMatrix,
    dict: &GridDictionary,
    g: &DVector<Complex64>,
    rho: f64,
) -> Result<f64> {
    let h = &dict.atoms * g;
    let res = &y.y - apply_phi(&h, theta)?;
    Ok(0.5 * res.norm_squared() + rho * g.iter().map(|v| v.norm()).sum::<f64>())
}

/// Oracle least squares with perfect path knowledge. Result of
/// [`oracle_ls`].
#[derive(Debug, Clone)]
pub struct OracleEstimate {
    pub h_hat: DVector<Complex64>,
    /// Condition number of the effective per-path-pair system.
    pub condition: f64,
}

/// Per-path-pair cascaded atoms `(b_far,iᶜ ⊙ b_j) ⊗ a_i`, the columns of
/// `(B_farᴴ ⋄ Bᵀ)ᵀ ⊗ A` that carry the nonzero gains `α_i·β_j`.
pub fn true_steering_atoms(paths: &PathSet, config: &ScenarioConfig) -> DMatrix<Complex64> {
    let (a, b_far, b_user) = steering_matrices(paths, config);
    let kr = khatri_rao_cols(&b_far.adjoint(), &b_user.transpose());
    // kr is (L1·L2) × M; row (i,j) holds (b_far,iᶜ ⊙ b_j)ᵀ
    let n = config.n_bs;
    let m = config.m();
    let l1 = paths.bs_paths.len();
    let l2 = paths.user_paths.len();
    let mut atoms = DMatrix::zeros(n * m, l1 * l2);
    for i in 0..l1 {
        for j in 0..l2 {
            let col = i * l2 + j;
            for mi in 0..m {
                let r = kr[(i * l2 + j, mi)];
                for ni in 0..n {
                    atoms[(mi * n + ni, col)] = r * a[(ni, i)];
                }
            }
        }
    }
    atoms
}

/// Least squares on the true per-path-pair atoms: solve
/// `min‖y − Φ·D_true·g‖₂` through a rank-tolerant SVD pseudo-inverse and
/// return `h_hat = D_true·g`.
pub fn oracle_ls(
    y: &Observation,
    theta: &PhaseMatrix,
    paths: &PathSet,
    config: &ScenarioConfig,
) -> Result<OracleEstimate> {
    let d_true = true_steering_atoms(paths, config);
    let cols = d_true.ncols();
    let np = (d_true.nrows() / theta.m()) * theta.pilots();
    let mut eff = DMatrix::zeros(np, cols);
    for c in 0..cols {
        let atom = DVector::from_column_slice(d_true.column(c).as_slice());
        eff.set_column(c, &apply_phi(&atom, theta)?);
    }
    let svd = eff.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let g = svd
        .solve(&y.y, smax * 1e-12)
        .map_err(|e| Error::arg("oracle_ls", e.to_string()))?;
    Ok(OracleEstimate { h_hat: d_true * g, condition })
}

/// `10·log10(‖ĥ−h‖²/‖h‖²)`, clamped below at −300 dB.
pub fn nmse_db(h_hat: &DVector<Complex64>, h: &DVector<Complex64>) -> Result<f64> {
    Ok(ratio_to_db(nmse_ratio(h_hat, h)?))
}

/// Squared-error ratio `‖ĥ−h‖²/‖h‖²` of one estimate.
pub fn nmse_ratio(h_hat: &DVector<Complex64>, h: &DVector<Complex64>) -> Result<f64> {
    if h_hat.len() != h.len() {
        return Err(Error::dim(
            "nmse",
            format!("estimate length {} != truth length {}", h_hat.len(), h.len()),
        ));
    }
    let denom = h.norm_squared();
    if denom == 0.0 {
        return Err(Error::arg("nmse", "true channel has zero norm"));
    }
    Ok((h_hat - h).norm_squared() / denom)
}

/// Batched NMSE: the expectation sits inside the log, so ratios are averaged
/// before converting to dB.
pub fn nmse_db_batched(ratios: &[f64]) -> f64 {
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    ratio_to_db(mean)
}

pub fn ratio_to_db(ratio: f64) -> f64 {
    (10.0 * ratio.log10()).max(-300.0)
}
