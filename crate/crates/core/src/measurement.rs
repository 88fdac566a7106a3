//! Pilot-phase observation model.
//!
//! The BS observes `Y = HΘ + N` over P pilot slots; vectorized with the
//! column-major convention this is `y = (Θᵀ ⊗ I_N)·vec(H) + n`, and the
//! measurement operator `Φ = Θᵀ ⊗ I_N` is only ever applied matrix-free
//! (reshape → multiply → reshape). Θ entries are `±1/√M`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::channel::{
    assemble_channels, sample_paths, BsPath, CascadedChannel, PathSet, ScenarioConfig, UserPath,
    UserPathKind,
};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// RIS phase schedule over P pilot slots; every entry is `±1/√M`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrix {
    /// M×P, real.
    pub matrix: DMatrix<f64>,
}

impl PhaseMatrix {
    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn pilots(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Noise level specification for observation generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrSpec {
    /// Fixed SNR in dB; `f64::INFINITY` means noiseless.
    Fixed(f64),
    /// Per-sample SNR drawn uniformly from `[lo, hi]` dB.
    Range(f64, f64),
}

impl SnrSpec {
    fn resolve(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            SnrSpec::Fixed(v) => v,
            SnrSpec::Range(lo, hi) => {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            }
        }
    }
}

/// Stacked noisy pilot observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// vec(HΘ) + noise, length N·P.
    pub y: DVector<Complex64>,
    /// Noise power σ² per complex entry.
    pub sigma2: f64,
    pub snr_db: f64,
}

/// One dataset record: channel, observation, pilot schedule, and the
/// ground-truth paths, regenerable from `sample_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadedSample {
    pub channel: CascadedChannel,
    pub obs: Observation,
    pub theta: PhaseMatrix,
    pub paths: PathSet,
    pub sample_seed: u64,
}

/// A generated dataset plus everything needed to reproduce it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenario: ScenarioConfig,
    pub pilots: usize,
    pub base_seed: u64,
    pub snr: SnrSpec,
    pub samples: Vec<CascadedSample>,
}

/// Draw an M×P phase schedule with i.i.d. equiprobable `±1/√M` entries.
pub fn gen_phase_matrix(m: usize, p: usize, rng: &mut impl Rng) -> PhaseMatrix {
    let mag = 1.0 / (m as f64).sqrt();
    let mut matrix = DMatrix::zeros(m, p);
    // column-major fill order pins the RNG stream
    for col in 0..p {
        for row in 0..m {
            matrix[(row, col)] = if rng.random::<bool>() { mag } else { -mag };
        }
    }
    PhaseMatrix { matrix }
}

/// `vec` of a matrix under the column-major convention.
pub fn vec_matrix(h: &DMatrix<Complex64>) -> DVector<Complex64> {
    DVector::from_column_slice(h.as_slice())
}

/// Inverse of [`vec_matrix`].
pub fn unvec_matrix(v: &DVector<Complex64>, nrows: usize, ncols: usize) -> DMatrix<Complex64> {
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

/// Apply `Φ = Θᵀ ⊗ I_N` matrix-free: returns `vec(H·Θ)` for
/// `H = unvec(h_vec)`.
pub fn apply_phi(h_vec: &DVector<Complex64>, theta: &PhaseMatrix) -> Result<DVector<Complex64>> {
    let m = theta.m();
    let p = theta.pilots();
    if h_vec.len() % m != 0 {
        return Err(Error::dim(
            "apply_phi",
            format!("input length {} not divisible by M={m}", h_vec.len()),
        ));
    }
    let n = h_vec.len() / m;
    let h = h_vec.as_slice();
    let th = theta.matrix.as_slice(); // column-major M×P
    let mut y = vec![Complex64::new(0.0, 0.0); n * p];
    for col in 0..p {
        let ycol = &mut y[col * n..(col + 1) * n];
        for row in 0..m {
            let s = th[col * m + row];
            if s == 0.0 {
                continue;
            }
            let hcol = &h[row * n..(row + 1) * n];
            for (yi, &hi) in ycol.iter_mut().zip(hcol) {
                *yi += hi * s;
            }
        }
    }
    Ok(DVector::from_vec(y))
}

/// Apply `Φᴴ` matrix-free: returns `vec(R·Θᴴ)` for `R = unvec(r_vec)`;
/// Θ is real, so this is also `Φᵀ`.
pub fn apply_phi_adjoint(
    r_vec: &DVector<Complex64>,
    theta: &PhaseMatrix,
) -> Result<DVector<Complex64>> {
    let m = theta.m();
    let p = theta.pilots();
    if r_vec.len() % p != 0 {
        return Err(Error::dim(
            "apply_phi_adjoint",
            format!("input length {} not divisible by P={p}", r_vec.len()),
        ));
    }
    let n = r_vec.len() / p;
    let r = r_vec.as_slice();
    let th = theta.matrix.as_slice();
    let mut x = vec![Complex64::new(0.0, 0.0); n * m];
    for col in 0..p {
        let rcol = &r[col * n..(col + 1) * n];
        for row in 0..m {
            let s = th[col * m + row];
            if s == 0.0 {
                continue;
            }
            let xcol = &mut x[row * n..(row + 1) * n];
            for (xi, &ri) in xcol.iter_mut().zip(rcol) {
                *xi += ri * s;
            }
        }
    }
    Ok(DVector::from_vec(x))
}

/// Observe `y = vec(HΘ) + n` with `n ~ CN(0, σ²I)` where
/// `σ² = ‖HΘ‖_F² / (N·P·10^(snr_db/10))`. An infinite `snr_db` disables
/// noise; a zero channel falls back to unit signal power so the requested
/// SNR still yields a nonzero noise floor.
pub fn observe(
    channel: &CascadedChannel,
    theta: &PhaseMatrix,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Observation {
    let h_vec = vec_matrix(&channel.h_matrix);
    let mut y = apply_phi(&h_vec, theta).expect("channel dims match theta");
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Observation { y, sigma2: 0.0, snr_db };
    }
    let len = y.len() as f64;
    let signal_power = y.iter().map(|v| v.norm_sqr()).sum::<f64>();
    let per_entry = if signal_power > 0.0 { signal_power / len } else { 1.0 };
    let sigma2 = per_entry / 10f64.powf(snr_db / 10.0);
    let scale = (sigma2 / 2.0).sqrt();
    for v in y.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex64::new(re * scale, im * scale);
    }
    Observation { y, sigma2, snr_db }
}

/// Generate one sample from its seed: draw SNR (if ranged), paths, then
/// noise, all from one derived stream.
pub fn generate_sample(
    config: &ScenarioConfig,
    theta: &PhaseMatrix,
    snr: SnrSpec,
    sample_seed: u64,
) -> Result<CascadedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let snr_db = snr.resolve(&mut rng);
    let paths = sample_paths(config, &mut rng)?;
    let channel = assemble_channels(&paths, config);
    let obs = observe(&channel, theta, snr_db, &mut rng);
    Ok(CascadedSample { channel, obs, theta: theta.clone(), paths, sample_seed })
}

/// Generate `count` independent samples sharing one pilot schedule derived
/// from `base_seed`. Sample generation is parallel over indices; results are
/// ordered by index, so output is independent of thread scheduling.
pub fn make_dataset(
    config: &ScenarioConfig,
    count: usize,
    snr: SnrSpec,
    pilots: usize,
    base_seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::arg("make_dataset", "count must be >= 1"));
    }
    config.validate()?;
    let mut theta_rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, "theta", 0));
    let theta = gen_phase_matrix(config.m(), pilots, &mut theta_rng);
    let samples: Result<Vec<CascadedSample>> = (0..count)
        .into_par_iter()
        .map(|i| generate_sample(config, &theta, snr, derive_seed(base_seed, "sample", i as u64)))
        .collect();
    Ok(Dataset { scenario: config.clone(), pilots, base_seed, snr, samples: samples? })
}

// ── dataset file format ─────────────────────────────────────────────────────
//
// magic "XRCD", u32 version, u32 N, u32 M1, u32 M2, u32 P, u32 count,
// u64 base seed, f64 snr_lo, f64 snr_hi, u64 scenario-text length, the
// scenario `key = value` text, then per sample:
//   u64 sample seed, f64 snr_db, f64 sigma2,
//   H (N×M column-major), Θ (M×P), y (N·P)  — all f64 interleaved re/im,
//   path ground-truth block (BS paths then user paths).
// Little-endian throughout.

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn complex_slice(&mut self, v: &[Complex64]) -> std::io::Result<()> {
        for c in v {
            self.f64(c.re)?;
            self.f64(c.im)?;
        }
        Ok(())
    }
    fn real_as_complex(&mut self, v: &[f64]) -> std::io::Result<()> {
        for &x in v {
            self.f64(x)?;
            self.f64(0.0)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn complex_vec(&mut self, len: usize) -> std::io::Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let re = self.f64()?;
            let im = self.f64()?;
            out.push(Complex64::new(re, im));
        }
        Ok(out)
    }
    fn complex_as_real(&mut self, len: usize) -> std::io::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.f64()?);
            self.f64()?; // stored imaginary part of a real quantity
        }
        Ok(out)
    }
}

impl Dataset {
    fn snr_bounds(&self) -> (f64, f64) {
        match self.snr {
            SnrSpec::Fixed(v) => (v, v),
            SnrSpec::Range(lo, hi) => (lo, hi),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer { w: BufWriter::new(file) };
        self.write_inner(&mut w).map_err(|e| Error::io(path, e))
    }

    fn write_inner<W: Write>(&self, w: &mut Writer<W>) -> std::io::Result<()> {
        w.w.write_all(b"XRCD")?;
        w.u32(1)?;
        w.u32(self.scenario.n_bs as u32)?;
        w.u32(self.scenario.m1 as u32)?;
        w.u32(self.scenario.m2 as u32)?;
        w.u32(self.pilots as u32)?;
        w.u32(self.samples.len() as u32)?;
        w.u64(self.base_seed)?;
        let (lo, hi) = self.snr_bounds();
        w.f64(lo)?;
        w.f64(hi)?;
        let scenario_text = self.scenario.to_kv().to_text();
        w.u64(scenario_text.len() as u64)?;
        w.w.write_all(scenario_text.as_bytes())?;
        for s in &self.samples {
            w.u64(s.sample_seed)?;
            w.f64(s.obs.snr_db)?;
            w.f64(s.obs.sigma2)?;
            w.complex_slice(s.channel.h_matrix.as_slice())?;
            w.real_as_complex(s.theta.matrix.as_slice())?;
            w.complex_slice(s.obs.y.as_slice())?;
            w.u32(s.paths.bs_paths.len() as u32)?;
            for p in &s.paths.bs_paths {
                w.f64(p.gain.re)?;
                w.f64(p.gain.im)?;
                w.f64(p.aoa)?;
                w.f64(p.aod.0)?;
                w.f64(p.aod.1)?;
            }
            w.u32(s.paths.user_paths.len() as u32)?;
            for p in &s.paths.user_paths {
                match p.kind {
                    UserPathKind::Far { elevation, azimuth } => {
                        w.w.write_all(&[0u8])?;
                        w.f64(p.gain.re)?;
                        w.f64(p.gain.im)?;
                        w.f64(elevation)?;
                        w.f64(azimuth)?;
                    }
                    UserPathKind::Near { position } => {
                        w.w.write_all(&[1u8])?;
                        w.f64(p.gain.re)?;
                        w.f64(p.gain.im)?;
                        w.f64(position[0])?;
                        w.f64(position[1])?;
                        w.f64(position[2])?;
                    }
                }
            }
        }
        w.w.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { r: BufReader::new(file) };
        Self::read_inner(&mut r, path)
    }

    fn read_inner<R: Read>(r: &mut Reader<R>, path: &Path) -> Result<Self> {
        let io_err = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != b"XRCD" {
            return Err(Error::format(path, "bad dataset magic".to_string()));
        }
        let version = r.u32().map_err(io_err)?;
        if version != 1 {
            return Err(Error::format(path, format!("unsupported dataset version {version}")));
        }
        let n = r.u32().map_err(io_err)? as usize;
        let m1 = r.u32().map_err(io_err)? as usize;
        let m2 = r.u32().map_err(io_err)? as usize;
        let pilots = r.u32().map_err(io_err)? as usize;
        let count = r.u32().map_err(io_err)? as usize;
        let base_seed = r.u64().map_err(io_err)?;
        let snr_lo = r.f64().map_err(io_err)?;
        let snr_hi = r.f64().map_err(io_err)?;
        let text_len = r.u64().map_err(io_err)? as usize;
        let mut text = vec![0u8; text_len];
        r.r.read_exact(&mut text).map_err(io_err)?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::format(path, "scenario block is not UTF-8".to_string()))?;
        let scenario = ScenarioConfig::from_kv(&crate::config::KvConfig::from_str_content(&text)?)?;
        if scenario.n_bs != n || scenario.m1 != m1 || scenario.m2 != m2 {
            return Err(Error::format(path, "header dims disagree with scenario block"));
        }
        let m = m1 * m2;
        let snr = if snr_lo == snr_hi { SnrSpec::Fixed(snr_lo) } else { SnrSpec::Range(snr_lo, snr_hi) };
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let sample_seed = r.u64().map_err(io_err)?;
            let snr_db = r.f64().map_err(io_err)?;
            let sigma2 = r.f64().map_err(io_err)?;
            let h = r.complex_vec(n * m).map_err(io_err)?;
            let th = r.complex_as_real(m * pilots).map_err(io_err)?;
            let y = r.complex_vec(n * pilots).map_err(io_err)?;
            let h_matrix = DMatrix::from_column_slice(n, m, &h);
            let theta = PhaseMatrix { matrix: DMatrix::from_column_slice(m, pilots, &th) };
            let n_bs = r.u32().map_err(io_err)? as usize;
            let mut bs_paths = Vec::with_capacity(n_bs);
            for _ in 0..n_bs {
                let re = r.f64().map_err(io_err)?;
                let im = r.f64().map_err(io_err)?;
                let aoa = r.f64().map_err(io_err)?;
                let el = r.f64().map_err(io_err)?;
                let az = r.f64().map_err(io_err)?;
                bs_paths.push(BsPath { gain: Complex64::new(re, im), aoa, aod: (el, az) });
            }
            let n_user = r.u32().map_err(io_err)? as usize;
            let mut user_paths = Vec::with_capacity(n_user);
            for _ in 0..n_user {
                let mut kind = [0u8];
                r.r.read_exact(&mut kind).map_err(io_err)?;
                let re = r.f64().map_err(io_err)?;
                let im = r.f64().map_err(io_err)?;
                let gain = Complex64::new(re, im);
                let kind = match kind[0] {
                    0 => UserPathKind::Far {
                        elevation: r.f64().map_err(io_err)?,
                        azimuth: r.f64().map_err(io_err)?,
                    },
                    1 => UserPathKind::Near {
                        position: [
                            r.f64().map_err(io_err)?,
                            r.f64().map_err(io_err)?,
                            r.f64().map_err(io_err)?,
                        ],
                    },
                    k => {
                        return Err(Error::format(path, format!("unknown path kind tag {k}")));
                    }
                };
                user_paths.push(UserPath { gain, kind });
            }
            let paths = PathSet { bs_paths, user_paths };
            // rebuild the factor matrices from the stored paths
            let channel_full = assemble_channels(&paths, &scenario);
            let channel = CascadedChannel {
                h_matrix,
                g_matrix: channel_full.g_matrix,
                h_user: channel_full.h_user,
            };
            samples.push(CascadedSample {
                channel,
                obs: Observation { y: DVector::from_vec(y), sigma2, snr_db },
                theta,
                paths,
                sample_seed,
            });
        }
        Ok(Dataset { scenario, pilots, base_seed, snr, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::stream_rng;

    fn dense_phi(theta: &PhaseMatrix, n: usize) -> DMatrix<f64> {
        theta.matrix.transpose().kronecker(&DMatrix::identity(n, n))
    }

    fn random_complex_vec(len: usize, rng: &mut impl Rng) -> DVector<Complex64> {
        DVector::from_fn(len, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn phase_matrix_entries_have_exact_magnitude() {
        let mut rng = stream_rng(0, "phase", 0);
        let theta = gen_phase_matrix(64, 32, &mut rng);
        let mag = 1.0 / 8.0;
        assert!(theta.matrix.iter().all(|&v| v == mag || v == -mag));
        // law-of-large-numbers bound on the empirical mean
        let mean = theta.matrix.iter().sum::<f64>() / (64.0 * 32.0);
        assert!(mean.abs() <= 3.0 / (64.0f64 * 32.0).sqrt());
        // reproducibility
        let t2 = gen_phase_matrix(64, 32, &mut stream_rng(0, "phase", 0));
        assert_eq!(theta, t2);
    }

    #[test]
    fn apply_phi_matches_dense_kronecker() {
        let (n, m, p) = (4, 8, 3);
        let mut rng = stream_rng(1, "phi", 0);
        let theta = gen_phase_matrix(m, p, &mut rng);
        let h = random_complex_vec(n * m, &mut rng);
        let y = apply_phi(&h, &theta).unwrap();
        let phi = dense_phi(&theta, n).map(|v| Complex64::new(v, 0.0));
        let dense = &phi * &h;
        assert!((y - dense).norm() <= 1e-12);
    }

    #[test]
    fn apply_phi_single_uniform_column_scales_row_sums() {
        let (n, m) = (3, 4);
        let mag = 1.0 / (m as f64).sqrt();
        let theta = PhaseMatrix { matrix: DMatrix::from_element(m, 1, mag) };
        let mut rng = stream_rng(1, "phi", 1);
        let h = random_complex_vec(n * m, &mut rng);
        let y = apply_phi(&h, &theta).unwrap();
        let hm = unvec_matrix(&h, n, m);
        for row in 0..n {
            let expect: Complex64 = (0..m).map(|c| hm[(row, c)]).sum::<Complex64>() * mag;
            assert!((y[row] - expect).norm() <= 1e-12);
        }
    }

    #[test]
    fn apply_phi_is_linear() {
        let (n, m, p) = (4, 6, 5);
        let mut rng = stream_rng(1, "phi", 2);
        let theta = gen_phase_matrix(m, p, &mut rng);
        let h1 = random_complex_vec(n * m, &mut rng);
        let h2 = random_complex_vec(n * m, &mut rng);
        let (a, b) = (Complex64::new(0.3, -1.1), Complex64::new(-2.0, 0.4));
        let lhs = apply_phi(&(&h1 * a + &h2 * b), &theta).unwrap();
        let rhs = apply_phi(&h1, &theta).unwrap() * a + apply_phi(&h2, &theta).unwrap() * b;
        assert!((lhs - rhs).norm() <= 1e-12);
        // dimension error
        assert!(apply_phi(&random_complex_vec(n * m + 1, &mut rng), &theta).is_err());
    }

    #[test]
    fn adjoint_identity_holds_on_random_probes() {
        let (n, m, p) = (4, 8, 4);
        for trial in 0..100 {
            let mut rng = stream_rng(2, "adj", trial);
            let theta = gen_phase_matrix(m, p, &mut rng);
            let h = random_complex_vec(n * m, &mut rng);
            let r = random_complex_vec(n * p, &mut rng);
            let lhs: Complex64 = apply_phi(&h, &theta).unwrap().dotc(&r);
            let rhs: Complex64 = h.dotc(&apply_phi_adjoint(&r, &theta).unwrap());
            assert!((lhs - rhs).norm() <= 1e-12);
        }
    }

    #[test]
    fn adjoint_matches_dense_transpose_and_zero_maps_to_zero() {
        let (n, m, p) = (3, 5, 4);
        let mut rng = stream_rng(2, "adj", 1000);
        let theta = gen_phase_matrix(m, p, &mut rng);
        let r = random_complex_vec(n * p, &mut rng);
        let x = apply_phi_adjoint(&r, &theta).unwrap();
        let phi = dense_phi(&theta, n).map(|v| Complex64::new(v, 0.0));
        let dense = phi.transpose() * &r;
        assert!((x - dense).norm() <= 1e-12);
        let zero = DVector::from_element(n * p, Complex64::new(0.0, 0.0));
        assert!(apply_phi_adjoint(&zero, &theta).unwrap().norm() == 0.0);
    }

    #[test]
    fn phi_spectral_norm_equals_theta_spectral_norm() {
        let (n, m, p) = (3, 6, 4);
        let mut rng = stream_rng(3, "norm", 0);
        let theta = gen_phase_matrix(m, p, &mut rng);
        let phi = dense_phi(&theta, n);
        let s_phi = phi.svd(false, false).singular_values[0];
        let s_th = theta.matrix.clone().svd(false, false).singular_values[0];
        assert!((s_phi - s_th).abs() <= 1e-10);
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let cfg = ScenarioConfig::desk();
        let mut rng = stream_rng(4, "obs", 0);
        let theta = gen_phase_matrix(cfg.m(), 16, &mut rng);
        let paths = sample_paths(&cfg, &mut rng).unwrap();
        let channel = assemble_channels(&paths, &cfg);
        let obs = observe(&channel, &theta, f64::INFINITY, &mut rng);
        let clean = apply_phi(&vec_matrix(&channel.h_matrix), &theta).unwrap();
        assert_eq!(obs.sigma2, 0.0);
        assert!((obs.y - clean).norm() == 0.0);
    }

    #[test]
    fn empirical_snr_matches_target() {
        let cfg = ScenarioConfig::desk();
        let mut rng = stream_rng(4, "obs", 1);
        let theta = gen_phase_matrix(cfg.m(), 16, &mut rng);
        let paths = sample_paths(&cfg, &mut rng).unwrap();
        let channel = assemble_channels(&paths, &cfg);
        let clean = apply_phi(&vec_matrix(&channel.h_matrix), &theta).unwrap();
        let signal = clean.iter().map(|v| v.norm_sqr()).sum::<f64>();
        let target_db = 7.0;
        let mut ratio_sum = 0.0;
        let draws = 1000;
        for _ in 0..draws {
            let obs = observe(&channel, &theta, target_db, &mut rng);
            let noise = (&obs.y - &clean).iter().map(|v| v.norm_sqr()).sum::<f64>();
            ratio_sum += signal / noise;
        }
        let mean_db = 10.0 * (ratio_sum / draws as f64).log10();
        assert!((mean_db - target_db).abs() <= 0.5, "empirical {mean_db} dB");
    }

    #[test]
    fn zero_channel_still_produces_noise() {
        let cfg = ScenarioConfig::desk();
        let mut rng = stream_rng(4, "obs", 2);
        let theta = gen_phase_matrix(cfg.m(), 8, &mut rng);
        let channel = CascadedChannel {
            h_matrix: DMatrix::zeros(cfg.n_bs, cfg.m()),
            g_matrix: DMatrix::zeros(cfg.n_bs, cfg.m()),
            h_user: DVector::zeros(cfg.m()),
        };
        let obs = observe(&channel, &theta, 10.0, &mut rng);
        assert!(obs.y.norm() > 0.0);
        assert!(obs.sigma2 > 0.0);
    }

    #[test]
    fn dataset_files_are_bit_reproducible_and_round_trip() {
        let cfg = ScenarioConfig::desk();
        let dir = std::env::temp_dir().join(format!("xrcd-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.xrcd");
        let p2 = dir.join("b.xrcd");
        let ds1 = make_dataset(&cfg, 10, SnrSpec::Fixed(5.0), 16, 42).unwrap();
        ds1.save(&p1).unwrap();
        let ds2 = make_dataset(&cfg, 10, SnrSpec::Fixed(5.0), 16, 42).unwrap();
        ds2.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "same seed must give identical file bytes");
        let loaded = Dataset::load(&p1).unwrap();
        assert_eq!(loaded.samples.len(), 10);
        for (a, b) in loaded.samples.iter().zip(&ds1.samples) {
            assert_eq!(a.channel.h_matrix, b.channel.h_matrix);
            assert_eq!(a.obs.y, b.obs.y);
            assert_eq!(a.paths, b.paths);
            assert_eq!(a.theta, b.theta);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loaded_samples_are_regenerable_from_their_seed() {
        let cfg = ScenarioConfig::desk();
        let ds = make_dataset(&cfg, 4, SnrSpec::Fixed(3.0), 8, 7).unwrap();
        let mut theta_rng = ChaCha8Rng::seed_from_u64(derive_seed(7, "theta", 0));
        let theta = gen_phase_matrix(cfg.m(), 8, &mut theta_rng);
        for s in &ds.samples {
            let again = generate_sample(&cfg, &theta, SnrSpec::Fixed(3.0), s.sample_seed).unwrap();
            assert_eq!(again.obs.y, s.obs.y);
            assert_eq!(again.channel.h_matrix, s.channel.h_matrix);
        }
    }

    #[test]
    fn ranged_snr_values_stay_in_bounds() {
        let cfg = ScenarioConfig::desk();
        let ds = make_dataset(&cfg, 50, SnrSpec::Range(0.0, 10.0), 8, 11).unwrap();
        assert!(ds.samples.iter().all(|s| (0.0..=10.0).contains(&s.obs.snr_db)));
        // and are actually spread out
        let lo = ds.samples.iter().map(|s| s.obs.snr_db).fold(f64::MAX, f64::min);
        let hi = ds.samples.iter().map(|s| s.obs.snr_db).fold(f64::MIN, f64::max);
        assert!(hi - lo > 2.0);
    }

    #[test]
    fn missing_dataset_file_reports_path() {
        let err = Dataset::load(Path::new("/nonexistent/nope.xrcd")).unwrap_err();
        assert!(err.to_string().contains("nope.xrcd"));
    }
}
