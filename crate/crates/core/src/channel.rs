//! Hybrid-field channel synthesis for a ULA base station and a UPA
//! reflecting surface.
//!
//! The RIS sits on the yOz-plane centered at the origin; element `(m1, m2)`
//! is at `(0, (m2 − (M2−1)/2)·d, (m1 − (M1−1)/2)·d)`. Far-field paths are
//! plane waves parameterized by angles, near-field paths are spherical waves
//! parameterized by scatterer position; a path is near-field iff its
//! scatterer lies inside the Rayleigh distance `2D²/λ` of the array, with
//! `D` the UPA diagonal.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Axis-aligned cuboid; bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Cuboid {
    pub fn is_valid(&self) -> bool {
        self.x.0 <= self.x.1 && self.y.0 <= self.y.1 && self.z.0 <= self.z.1
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            c[0] = if i & 1 == 0 { self.x.0 } else { self.x.1 };
            c[1] = if i & 2 == 0 { self.y.0 } else { self.y.1 };
            c[2] = if i & 4 == 0 { self.z.0 } else { self.z.1 };
        }
        out
    }
}

/// Geometry and path statistics defining a simulation scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// BS antenna count N (ULA).
    pub n_bs: usize,
    /// RIS grid dimensions; M = m1 · m2.
    pub m1: usize,
    pub m2: usize,
    /// Element spacing d in meters (λ/2 unless overridden).
    pub spacing_m: f64,
    /// Carrier wavelength λ in meters.
    pub wavelength_m: f64,
    /// BS–RIS path count L1.
    pub l1: usize,
    /// RIS–user far-field / near-field path counts (L2 = l_far + l_near).
    pub l_far: usize,
    pub l_near: usize,
    /// Scatterer region for near-field paths.
    pub nearfield_region: Cuboid,
    /// Interval for all angle draws, radians.
    pub angle_range: (f64, f64),
    /// Base seed for derived random streams.
    pub seed: u64,
}

impl ScenarioConfig {
    /// Small configuration used throughout the test suite: N=8, M=16×4.
    pub fn desk() -> Self {
        let wavelength = 0.03;
        Self {
            n_bs: 8,
            m1: 16,
            m2: 4,
            spacing_m: wavelength / 2.0,
            wavelength_m: wavelength,
            l1: 2,
            l_far: 2,
            l_near: 2,
            nearfield_region: Cuboid { x: (1.0, 2.0), y: (-1.5, 1.0), z: (-1.0, 0.0) },
            angle_range: (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
            seed: 0,
        }
    }

    /// Full-scale configuration: N=32, M=64×8, L1=3, six user paths split
    /// evenly between far and near field.
    pub fn paper_scale() -> Self {
        let wavelength = 0.03;
        Self {
            n_bs: 32,
            m1: 64,
            m2: 8,
            spacing_m: wavelength / 2.0,
            wavelength_m: wavelength,
            l1: 3,
            l_far: 3,
            l_near: 3,
            nearfield_region: Cuboid { x: (3.0, 5.0), y: (-15.0, 10.0), z: (-10.5, 0.0) },
            angle_range: (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
            seed: 0,
        }
    }

    pub fn m(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn l2(&self) -> usize {
        self.l_far + self.l_near
    }

    /// UPA diagonal √((M1·d)² + (M2·d)²).
    pub fn aperture_m(&self) -> f64 {
        let ly = self.m1 as f64 * self.spacing_m;
        let lz = self.m2 as f64 * self.spacing_m;
        ly.hypot(lz)
    }

    pub fn rayleigh_distance_m(&self) -> f64 {
        rayleigh_distance(self.aperture_m(), self.wavelength_m).expect("positive geometry")
    }

    /// Position of RIS element `(i1, i2)`, grid centered at the origin.
    pub fn element_position(&self, i1: usize, i2: usize) -> [f64; 3] {
        let d = self.spacing_m;
        [
            0.0,
            (i2 as f64 - (self.m2 as f64 - 1.0) / 2.0) * d,
            (i1 as f64 - (self.m1 as f64 - 1.0) / 2.0) * d,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bs == 0 || self.m1 == 0 || self.m2 == 0 {
            return Err(Error::Config("antenna/element counts must be >= 1".into()));
        }
        if self.wavelength_m <= 0.0 || self.spacing_m <= 0.0 {
            return Err(Error::Config("wavelength and spacing must be positive".into()));
        }
        if self.angle_range.0 > self.angle_range.1 {
            return Err(Error::Config("angle_range must be a non-empty interval".into()));
        }
        if self.l_near > 0 {
            if !self.nearfield_region.is_valid() {
                return Err(Error::Config(
                    "nearfield_region is empty but near-field paths were requested".into(),
                ));
            }
            let r = self.rayleigh_distance_m();
            for corner in self.nearfield_region.corners() {
                let dist = (corner[0].powi(2) + corner[1].powi(2) + corner[2].powi(2)).sqrt();
                if dist > r {
                    return Err(Error::Config(format!(
                        "nearfield_region corner {corner:?} lies {dist:.2} m from the RIS, \
                         beyond the Rayleigh distance {r:.2} m"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Read from a flat `key = value` config; missing keys fall back to the
    /// desk defaults (spacing falls back to λ/2).
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let base = Self::desk();
        let wavelength_m = cfg.get_f64("wavelength_m")?.unwrap_or(base.wavelength_m);
        let out = Self {
            n_bs: cfg.get_usize("n_bs")?.unwrap_or(base.n_bs),
            m1: cfg.get_usize("m1")?.unwrap_or(base.m1),
            m2: cfg.get_usize("m2")?.unwrap_or(base.m2),
            spacing_m: cfg.get_f64("spacing_m")?.unwrap_or(wavelength_m / 2.0),
            wavelength_m,
            l1: cfg.get_usize("l1")?.unwrap_or(base.l1),
            l_far: cfg.get_usize("l_far")?.unwrap_or(base.l_far),
            l_near: cfg.get_usize("l_near")?.unwrap_or(base.l_near),
            nearfield_region: Cuboid {
                x: (
                    cfg.get_f64("near_x_min")?.unwrap_or(base.nearfield_region.x.0),
                    cfg.get_f64("near_x_max")?.unwrap_or(base.nearfield_region.x.1),
                ),
                y: (
                    cfg.get_f64("near_y_min")?.unwrap_or(base.nearfield_region.y.0),
                    cfg.get_f64("near_y_max")?.unwrap_or(base.nearfield_region.y.1),
                ),
                z: (
                    cfg.get_f64("near_z_min")?.unwrap_or(base.nearfield_region.z.0),
                    cfg.get_f64("near_z_max")?.unwrap_or(base.nearfield_region.z.1),
                ),
            },
            angle_range: (
                cfg.get_f64("angle_min")?.unwrap_or(base.angle_range.0),
                cfg.get_f64("angle_max")?.unwrap_or(base.angle_range.1),
            ),
            seed: cfg.get_u64("seed")?.unwrap_or(0),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("n_bs", self.n_bs.to_string());
        kv.set("m1", self.m1.to_string());
        kv.set("m2", self.m2.to_string());
        kv.set("spacing_m", format!("{:e}", self.spacing_m));
        kv.set("wavelength_m", format!("{:e}", self.wavelength_m));
        kv.set("l1", self.l1.to_string());
        kv.set("l_far", self.l_far.to_string());
        kv.set("l_near", self.l_near.to_string());
        kv.set("near_x_min", format!("{:e}", self.nearfield_region.x.0));
        kv.set("near_x_max", format!("{:e}", self.nearfield_region.x.1));
        kv.set("near_y_min", format!("{:e}", self.nearfield_region.y.0));
        kv.set("near_y_max", format!("{:e}", self.nearfield_region.y.1));
        kv.set("near_z_min", format!("{:e}", self.nearfield_region.z.0));
        kv.set("near_z_max", format!("{:e}", self.nearfield_region.z.1));
        kv.set("angle_min", format!("{:e}", self.angle_range.0));
        kv.set("angle_max", format!("{:e}", self.angle_range.1));
        kv.set("seed", self.seed.to_string());
        kv
    }
}

/// One BS–RIS propagation path: complex gain, arrival angle at the BS, and
/// departure (elevation, azimuth) at the RIS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsPath {
    pub gain: Complex64,
    pub aoa: f64,
    pub aod: (f64, f64),
}

/// RIS–user path: far-field paths carry angles, near-field paths carry the
/// scatterer position in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UserPathKind {
    Far { elevation: f64, azimuth: f64 },
    Near { position: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserPath {
    pub gain: Complex64,
    pub kind: UserPathKind,
}

/// Ground-truth path parameters of one channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub bs_paths: Vec<BsPath>,
    pub user_paths: Vec<UserPath>,
}

/// Cascaded channel H = G·diag(h) together with its two factors.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadedChannel {
    /// N×M cascaded channel H.
    pub h_matrix: DMatrix<Complex64>,
    /// N×M RIS→BS channel G.
    pub g_matrix: DMatrix<Complex64>,
    /// M-vector RIS–user channel.
    pub h_user: DVector<Complex64>,
}

/// Far-field/near-field boundary `R = 2D²/λ`.
pub fn rayleigh_distance(aperture_m: f64, wavelength_m: f64) -> Result<f64> {
    if aperture_m < 0.0 {
        return Err(Error::arg("rayleigh_distance", format!("aperture {aperture_m} < 0")));
    }
    if wavelength_m <= 0.0 {
        return Err(Error::arg("rayleigh_distance", format!("wavelength {wavelength_m} <= 0")));
    }
    Ok(2.0 * aperture_m * aperture_m / wavelength_m)
}

fn cis(theta: f64) -> Complex64 {
    Complex64::new(theta.cos(), theta.sin())
}

/// ULA steering vector with spacing `d_over_lambda` wavelengths:
/// element k is `(1/√n)·exp(j·2π·(d/λ)·sin(ψ)·k)`.
pub fn ula_steering_spaced(psi: f64, n: usize, d_over_lambda: f64) -> DVector<Complex64> {
    let rate = 2.0 * std::f64::consts::PI * d_over_lambda * psi.sin();
    let norm = 1.0 / (n as f64).sqrt();
    DVector::from_fn(n, |k, _| cis(rate * k as f64) * norm)
}

/// ULA steering at the default half-wavelength spacing.
pub fn ula_steering(psi: f64, n: usize) -> DVector<Complex64> {
    ula_steering_spaced(psi, n, 0.5)
}

/// UPA far-field steering: Kronecker product of the vertical component
/// (phase rate cos φ over m1) and the horizontal component (phase rate
/// sin φ · cos ϕ over m2); element `(i1,i2)` sits at index `i1·M2 + i2`.
pub fn upa_far_steering_spaced(
    phi: f64,
    varphi: f64,
    m1: usize,
    m2: usize,
    d_over_lambda: f64,
) -> DVector<Complex64> {
    let two_pi_d = 2.0 * std::f64::consts::PI * d_over_lambda;
    let rate_v = two_pi_d * phi.cos();
    let rate_h = two_pi_d * phi.sin() * varphi.cos();
    let norm = 1.0 / ((m1 * m2) as f64).sqrt();
    DVector::from_fn(m1 * m2, |idx, _| {
        let (i1, i2) = (idx / m2, idx % m2);
        cis(rate_v * i1 as f64 + rate_h * i2 as f64) * norm
    })
}

pub fn upa_far_steering(phi: f64, varphi: f64, m1: usize, m2: usize) -> DVector<Complex64> {
    upa_far_steering_spaced(phi, varphi, m1, m2, 0.5)
}

/// Near-field (spherical-wavefront) steering: element `(i1,i2)` gets
/// `(1/√M)·exp(−j·2π/λ·r)` with `r` the scatterer→element distance.
pub fn near_steering(scatterer_xyz: [f64; 3], config: &ScenarioConfig) -> DVector<Complex64> {
    let m = config.m();
    let norm = 1.0 / (m as f64).sqrt();
    let k0 = 2.0 * std::f64::consts::PI / config.wavelength_m;
    DVector::from_fn(m, |idx, _| {
        let (i1, i2) = (idx / config.m2, idx % config.m2);
        let p = config.element_position(i1, i2);
        let r = ((scatterer_xyz[0] - p[0]).powi(2)
            + (scatterer_xyz[1] - p[1]).powi(2)
            + (scatterer_xyz[2] - p[2]).powi(2))
        .sqrt();
        cis(-k0 * r) * norm
    })
}

/// Elevation/azimuth of the direction from the RIS center to `position`,
/// matching the far-field phase-rate convention (`cos φ` over the m1 axis,
/// `sin φ cos ϕ` over the m2 axis).
pub fn direction_to_angles(position: [f64; 3]) -> (f64, f64) {
    let r = (position[0].powi(2) + position[1].powi(2) + position[2].powi(2)).sqrt();
    if r == 0.0 {
        return (0.0, 0.0);
    }
    let phi = (position[2] / r).clamp(-1.0, 1.0).acos();
    let sin_phi = phi.sin();
    if sin_phi.abs() < 1e-12 {
        return (phi, 0.0);
    }
    let varphi = (position[1] / (r * sin_phi)).clamp(-1.0, 1.0).acos();
    (phi, varphi)
}

/// Steering vector of a user path under the hybrid dispatch rule: far-field
/// response unless the scatterer sits inside the Rayleigh distance.
pub fn user_path_steering(path: &UserPath, config: &ScenarioConfig) -> DVector<Complex64> {
    match path.kind {
        UserPathKind::Far { elevation, azimuth } => upa_far_steering_spaced(
            elevation,
            azimuth,
            config.m1,
            config.m2,
            config.spacing_m / config.wavelength_m,
        ),
        UserPathKind::Near { position } => {
            let r = (position[0].powi(2) + position[1].powi(2) + position[2].powi(2)).sqrt();
            if r > config.rayleigh_distance_m() {
                let (phi, varphi) = direction_to_angles(position);
                upa_far_steering_spaced(
                    phi,
                    varphi,
                    config.m1,
                    config.m2,
                    config.spacing_m / config.wavelength_m,
                )
            } else {
                near_steering(position, config)
            }
        }
    }
}

fn complex_gaussian(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn uniform_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draw a path realization: L1 BS–RIS paths, then `l_far` far and `l_near`
/// near user paths. Gains are CN(0,1); angles are uniform on `angle_range`;
/// near scatterers are uniform in the configured cuboid.
pub fn sample_paths(config: &ScenarioConfig, rng: &mut impl Rng) -> Result<PathSet> {
    config.validate()?;
    let (lo, hi) = config.angle_range;
    let mut bs_paths = Vec::with_capacity(config.l1);
    for _ in 0..config.l1 {
        let gain = complex_gaussian(rng);
        let aoa = uniform_in(rng, lo, hi);
        let aod = (uniform_in(rng, lo, hi), uniform_in(rng, lo, hi));
        bs_paths.push(BsPath { gain, aoa, aod });
    }
    let mut user_paths = Vec::with_capacity(config.l2());
    for _ in 0..config.l_far {
        let gain = complex_gaussian(rng);
        let elevation = uniform_in(rng, lo, hi);
        let azimuth = uniform_in(rng, lo, hi);
        user_paths.push(UserPath { gain, kind: UserPathKind::Far { elevation, azimuth } });
    }
    let cube = config.nearfield_region;
    for _ in 0..config.l_near {
        let gain = complex_gaussian(rng);
        let position = [
            uniform_in(rng, cube.x.0, cube.x.1),
            uniform_in(rng, cube.y.0, cube.y.1),
            uniform_in(rng, cube.z.0, cube.z.1),
        ];
        user_paths.push(UserPath { gain, kind: UserPathKind::Near { position } });
    }
    Ok(PathSet { bs_paths, user_paths })
}

/// Assemble G, h, and the cascaded channel H = G·diag(h) from a path set.
pub fn assemble_channels(paths: &PathSet, config: &ScenarioConfig) -> CascadedChannel {
    let n = config.n_bs;
    let m = config.m();
    let d_over_lambda = config.spacing_m / config.wavelength_m;
    let mut g_matrix = DMatrix::<Complex64>::zeros(n, m);
    for p in &paths.bs_paths {
        let a = ula_steering_spaced(p.aoa, n, d_over_lambda);
        let b = upa_far_steering_spaced(p.aod.0, p.aod.1, config.m1, config.m2, d_over_lambda);
        // rank-1 update: gain · a · bᴴ
        for (col, bm) in b.iter().enumerate() {
            let w = p.gain * bm.conj();
            for (row, an) in a.iter().enumerate() {
                g_matrix[(row, col)] += an * w;
            }
        }
    }
    let mut h_user = DVector::<Complex64>::zeros(m);
    for p in &paths.user_paths {
        let b = user_path_steering(p, config);
        h_user += b * p.gain;
    }
    let h_matrix = &g_matrix * DMatrix::from_diagonal(&h_user);
    CascadedChannel { h_matrix, g_matrix, h_user }
}

/// Column-wise Kronecker (Khatri-Rao) product of same-width matrices.
pub fn khatri_rao_cols(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    assert_eq!(a.ncols(), b.ncols(), "khatri_rao_cols: column counts differ");
    let mut out = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols());
    for c in 0..a.ncols() {
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                out[(i * b.nrows() + j, c)] = a[(i, c)] * b[(j, c)];
            }
        }
    }
    out
}

/// Steering matrices of a path set: `A` (N×L1 BS responses), `B_far`
/// (M×L1 RIS departure responses), `B` (M×L2 user responses).
pub fn steering_matrices(
    paths: &PathSet,
    config: &ScenarioConfig,
) -> (DMatrix<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>) {
    let d_over_lambda = config.spacing_m / config.wavelength_m;
    let a = DMatrix::from_columns(
        &paths
            .bs_paths
            .iter()
            .map(|p| ula_steering_spaced(p.aoa, config.n_bs, d_over_lambda))
            .collect::<Vec<_>>(),
    );
    let b_far = DMatrix::from_columns(
        &paths
            .bs_paths
            .iter()
            .map(|p| {
                upa_far_steering_spaced(p.aod.0, p.aod.1, config.m1, config.m2, d_over_lambda)
            })
            .collect::<Vec<_>>(),
    );
    let b_user = DMatrix::from_columns(
        &paths.user_paths.iter().map(|p| user_path_steering(p, config)).collect::<Vec<_>>(),
    );
    (a, b_far, b_user)
}

/// The factored form `A (Λ_α ⊗ βᵀ) (B_farᴴ ⋄ Bᵀ)` of the cascaded channel,
/// evaluated directly for identity testing against `G·diag(h)`.
pub fn factored_cascade(paths: &PathSet, config: &ScenarioConfig) -> DMatrix<Complex64> {
    let (a, b_far, b_user) = steering_matrices(paths, config);
    let alpha = DVector::from_iterator(paths.bs_paths.len(), paths.bs_paths.iter().map(|p| p.gain));
    let beta_t = DMatrix::from_fn(1, paths.user_paths.len(), |_, j| paths.user_paths[j].gain);
    let lambda_alpha = DMatrix::from_diagonal(&alpha);
    let middle = lambda_alpha.kronecker(&beta_t);
    let kr = khatri_rao_cols(&b_far.adjoint(), &b_user.transpose());
    &a * middle * kr
}
