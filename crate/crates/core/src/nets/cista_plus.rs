//! CISTA-Net+: per-layer dictionaries, learnable steps and thresholds, and
//! decoupled measurement parameters.
//!
//! Layer k computes
//! `z_k = ḡ_{k−1} + λ_k·A_kᶜ ⊛ (B_k(y − C_k(D_kᶜ ∗ ḡ_{k−1})))`,
//! `ḡ_k = S_{ρ_k λ_k}(z_k)`, where `C_k`/`B_k` are learnable real M×P
//! matrices applied matrix-free through the Kronecker structure (initialized
//! to the true Θ). A final dictionary `D_{K+1}` synthesizes the channel
//! image, and training is supervised on the true channel.

use rand::Rng;

use crate::error::{Error, Result};
use crate::measurement::PhaseMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::cista::CistaNetParams;
use super::common::{ConvLayer, DictKernel, COEFF_CHANNELS, IMG_CHANNELS, KERNEL};

pub const CISTA_PLUS_DEFAULT_LAYERS: usize = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct CistaNetPlusParams {
    /// Analysis dictionaries A_k (transposed-conv side), 608 params each.
    pub analysis_dicts: Vec<DictKernel>,
    /// Synthesis dictionaries D_k, 608 params each; their 32-channel biases
    /// exist for count parity with the analysis bundles but do not enter the
    /// S→2 synthesis direction.
    pub synthesis_dicts: Vec<DictKernel>,
    /// λ_k, shape [1] each.
    pub steps: Vec<Tensor>,
    /// ρ_k, shape [1] each.
    pub thresholds: Vec<Tensor>,
    /// Θ_kᴮ, M×P each, applied as `vec(R·(Θᴮ)ᵀ)`.
    pub theta_b: Vec<Tensor>,
    /// Θ_kᶜ, M×P each, applied as `vec(Ĥ·Θᶜ)`.
    pub theta_c: Vec<Tensor>,
    /// Final synthesis D_{K+1}: `[2,32,3,3]` conv with a 2-channel bias.
    pub final_dict: ConvLayer,
    pub layers: usize,
}

impl CistaNetPlusParams {
    pub fn init(layers: usize, theta: &PhaseMatrix, rng: &mut impl Rng) -> Self {
        let theta_tensor = || super::common::theta_tensor(theta).with_grad();
        Self {
            analysis_dicts: (0..layers).map(|_| DictKernel::init(rng)).collect(),
            synthesis_dicts: (0..layers).map(|_| DictKernel::init(rng)).collect(),
            steps: (0..layers).map(|_| Tensor::scalar(0.5).with_grad()).collect(),
            thresholds: (0..layers).map(|_| Tensor::scalar(0.01).with_grad()).collect(),
            theta_b: (0..layers).map(|_| theta_tensor()).collect(),
            theta_c: (0..layers).map(|_| theta_tensor()).collect(),
            final_dict: ConvLayer::init(IMG_CHANNELS, COEFF_CHANNELS, KERNEL, 1, 1, rng),
            layers,
        }
    }

    /// Initialization with every layer's dictionaries tied to a CISTA-Net
    /// dictionary and the same fixed step/threshold; used to cross-check the
    /// first-layer update against CISTA-Net.
    pub fn tied_to(cista: &CistaNetParams, theta: &PhaseMatrix) -> Self {
        let mut rng = crate::seeds::stream_rng(0, "tied-init", 0);
        let mut out = Self::init(cista.layers, theta, &mut rng);
        for k in 0..out.layers {
            out.analysis_dicts[k] = cista.dict.clone();
            out.synthesis_dicts[k] = cista.dict.clone();
            out.steps[k] = Tensor::scalar(cista.step).with_grad();
            out.thresholds[k] = Tensor::scalar(cista.threshold).with_grad();
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for k in 0..self.layers {
            out.push((format!("layer{k}.analysis.kernel"), &self.analysis_dicts[k].kernel));
            out.push((format!("layer{k}.analysis.bias"), &self.analysis_dicts[k].bias));
            out.push((format!("layer{k}.synthesis.kernel"), &self.synthesis_dicts[k].kernel));
            out.push((format!("layer{k}.synthesis.bias"), &self.synthesis_dicts[k].bias));
            out.push((format!("layer{k}.step"), &self.steps[k]));
            out.push((format!("layer{k}.threshold"), &self.thresholds[k]));
            out.push((format!("layer{k}.theta_b"), &self.theta_b[k]));
            out.push((format!("layer{k}.theta_c"), &self.theta_c[k]));
        }
        out.push(("final.kernel".into(), &self.final_dict.weight));
        out.push(("final.bias".into(), &self.final_dict.bias));
        out
    }

    /// Same order as `named_tensors` and the forward pass's `param_vars`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let layers = self
            .analysis_dicts
            .iter_mut()
            .zip(self.synthesis_dicts.iter_mut())
            .zip(self.steps.iter_mut())
            .zip(self.thresholds.iter_mut())
            .zip(self.theta_b.iter_mut())
            .zip(self.theta_c.iter_mut());
        for (((((a, d), step), thr), tb), tc) in layers {
            out.push(&mut a.kernel);
            out.push(&mut a.bias);
            out.push(&mut d.kernel);
            out.push(&mut d.bias);
            out.push(step);
            out.push(thr);
            out.push(tb);
            out.push(tc);
        }
        out.push(&mut self.final_dict.weight);
        out.push(&mut self.final_dict.bias);
        out
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        y_img: &Tensor,
        collect_layers: bool,
    ) -> Result<CistaPlusForward> {
        let [two, n, p] = *y_img.shape() else {
            return Err(Error::dim(
                "cista_plus_forward",
                format!("observation image must be [2,N,P], got {:?}", y_img.shape()),
            ));
        };
        let m = self.theta_b[0].shape()[0];
        if two != 2 || p != self.theta_b[0].shape()[1] {
            return Err(Error::dim(
                "cista_plus_forward",
                format!("observation [{two},{n},{p}] does not match Θ shape"),
            ));
        }
        let y = tape.leaf(y_img);
        let mut param_vars = Vec::new();
        let mut layer_vars = Vec::new();
        for k in 0..self.layers {
            let a = self.analysis_dicts[k].register(tape);
            let d = self.synthesis_dicts[k].register(tape);
            let step = tape.leaf(&self.steps[k]);
            let thr = tape.leaf(&self.thresholds[k]);
            let tb = tape.leaf(&self.theta_b[k]);
            let tc = tape.leaf(&self.theta_c[k]);
            param_vars
                .extend_from_slice(&[a.kernel, a.bias, d.kernel, d.bias, step, thr, tb, tc]);
            layer_vars.push((a, d, step, thr, tb, tc));
        }
        let final_vars = self.final_dict.register(tape);
        param_vars.push(final_vars.weight);
        param_vars.push(final_vars.bias);

        let coeff = self.synthesis_dicts[0].kernel.shape()[1];
        let mut g = tape.constant(&[coeff, n, m], vec![0.0; coeff * n * m])?;
        let mut layer_estimates = Vec::new();
        for (k, &(a, d, step, thr, tb, tc)) in layer_vars.iter().enumerate() {
            let h = d.synth(tape, g).map_err(|e| at_layer(e, k))?;
            let yhat = tape.matmul_right(h, tc, false)?;
            let r = tape.sub(y, yhat)?;
            let bp = tape.matmul_right(r, tb, true)?;
            let t = a.analysis(tape, bp).map_err(|e| at_layer(e, k))?;
            let stepped = tape.scale_var(t, step)?;
            let z = tape.add(g, stepped)?;
            let tau = tape.mul(thr, step)?;
            g = tape.soft_threshold(z, tau)?;
            if collect_layers {
                layer_estimates.push(final_vars.apply(tape, g)?);
            }
        }
        let h_hat = if collect_layers {
            *layer_estimates.last().expect("layers >= 1")
        } else {
            final_vars.apply(tape, g)?
        };
        Ok(CistaPlusForward { h_hat, g_final: g, layer_estimates, y, param_vars })
    }

    /// Supervised loss `‖h − D_{K+1} ∗ ḡ_K‖²` against the true channel
    /// image.
    pub fn loss(&self, tape: &mut Tape, fwd: &CistaPlusForward, h_true: Var) -> Result<Var> {
        tape.sum_squared_diff(h_true, fwd.h_hat)
    }

    /// Total parameters of the per-layer dictionary group (Table parity:
    /// 608 × K × 2).
    pub fn dictionary_param_count(&self) -> usize {
        self.analysis_dicts.iter().map(DictKernel::param_count).sum::<usize>()
            + self.synthesis_dicts.iter().map(DictKernel::param_count).sum::<usize>()
    }
}

fn at_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::Dimension { op, detail } => {
            Error::Dimension { op, detail: format!("layer {layer}: {detail}") }
        }
        other => other,
    }
}

#[derive(Debug)]
pub struct CistaPlusForward {
    pub h_hat: Var,
    pub g_final: Var,
    pub layer_estimates: Vec<Var>,
    pub y: Var,
    pub param_vars: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::gen_phase_matrix;
    use crate::nets::image;
    use crate::seeds::stream_rng;
    use nalgebra::DMatrix;
    use num_complex::Complex64;

    fn setup(n: usize, m: usize, p: usize) -> (PhaseMatrix, Tensor) {
        let mut rng = stream_rng(32, "cista+", 0);
        let theta = gen_phase_matrix(m, p, &mut rng);
        let y = DMatrix::from_fn(n, p, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        (theta, image::matrix_to_image(&y))
    }

    #[test]
    fn first_layer_matches_cista_at_tied_initialization() {
        let (n, m, p) = (3, 8, 5);
        let (theta, y_img) = setup(n, m, p);
        let mut rng = stream_rng(32, "cista+", 1);
        let mut cista = CistaNetParams::init(1, &mut rng);
        cista.threshold = 0.0;
        let plus = CistaNetPlusParams::tied_to(&cista, &theta);
        let mut tape_a = Tape::new();
        let fa = cista.forward(&mut tape_a, &y_img, &theta, false).unwrap();
        let mut tape_b = Tape::new();
        let fb = plus.forward(&mut tape_b, &y_img, false).unwrap();
        // with ρ = 0, ḡ₁ = z₁ on both paths
        let za = tape_a.value(fa.g_final);
        let zb = tape_b.value(fb.g_final);
        let max_err =
            za.iter().zip(zb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= 1e-12, "max abs err {max_err}");
    }

    #[test]
    fn dictionary_parameter_count_matches_table() {
        let (theta, _) = setup(3, 8, 5);
        let mut rng = stream_rng(32, "cista+", 2);
        let params = CistaNetPlusParams::init(CISTA_PLUS_DEFAULT_LAYERS, &theta, &mut rng);
        assert_eq!(params.dictionary_param_count(), 608 * 13 * 2);
        assert_eq!(params.final_dict.param_count(), 578);
    }

    #[test]
    fn zero_steps_give_bias_only_output() {
        let (theta, y_img) = setup(3, 8, 5);
        let mut rng = stream_rng(32, "cista+", 3);
        let mut params = CistaNetPlusParams::init(3, &theta, &mut rng);
        for s in &mut params.steps {
            *s = Tensor::scalar(0.0).with_grad();
        }
        let mut tape = Tape::new();
        let fwd = params.forward(&mut tape, &y_img, false).unwrap();
        // ḡ_K = 0, so the output is the final conv bias broadcast per channel
        let out = tape.value(fwd.h_hat);
        let bias = params.final_dict.bias.data();
        let (n, m) = (3, 8);
        for c in 0..2 {
            for i in 0..n * m {
                assert!((out[c * n * m + i] - bias[c]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn named_tensor_order_matches_mutable_order() {
        let (theta, _) = setup(3, 8, 4);
        let mut rng = stream_rng(32, "cista+", 4);
        let mut params = CistaNetPlusParams::init(2, &theta, &mut rng);
        let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let shapes: Vec<Vec<usize>> =
            params.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let muts = params.tensors_mut();
        assert_eq!(names.len(), muts.len());
        for (t, s) in muts.iter().zip(&shapes) {
            assert_eq!(t.shape(), s.as_slice());
        }
    }
}
