//! CISTA-Net: ISTA unrolled with one shared convolutional dictionary.
//!
//! Layer k computes
//! `z = ḡ + λ·Dᶜ ⊛ (Φᵀ(y − Φ(Dᶜ ∗ ḡ)))`, `ḡ ← S_{ρλ}(z)`,
//! with the step λ, threshold ρ, and measurement operator all fixed; only
//! the dictionary (608 parameters) is learned. Training is self-supervised:
//! the loss is the measurement-domain residual of the final synthesis.

use rand::Rng;

use crate::error::{Error, Result};
use crate::measurement::PhaseMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::common::DictKernel;

#[derive(Debug, Clone, PartialEq)]
pub struct CistaNetParams {
    pub dict: DictKernel,
    /// Fixed gradient step λ.
    pub step: f64,
    /// Fixed threshold ρ.
    pub threshold: f64,
    /// Unrolled layer count K.
    pub layers: usize,
}

pub const CISTA_DEFAULT_LAYERS: usize = 17;
pub const DEFAULT_STEP: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.01;

impl CistaNetParams {
    pub fn init(layers: usize, rng: &mut impl Rng) -> Self {
        Self {
            dict: DictKernel::init(rng),
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            layers,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("dict.kernel".into(), &self.dict.kernel), ("dict.bias".into(), &self.dict.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.dict.kernel, &mut self.dict.bias]
    }

    /// Run the unrolled forward pass. `y_img` is the `[2,N,P]` observation
    /// image; `theta` is the pilot schedule the measurement operator uses.
    pub fn forward(
        &self,
        tape: &mut Tape,
        y_img: &Tensor,
        theta: &PhaseMatrix,
        collect_layers: bool,
    ) -> Result<CistaForward> {
        let [two, n, p] = *y_img.shape() else {
            return Err(Error::dim(
                "cista_forward",
                format!("observation image must be [2,N,P], got {:?}", y_img.shape()),
            ));
        };
        if two != 2 || p != theta.pilots() {
            return Err(Error::dim(
                "cista_forward",
                format!("observation [{two},{n},{p}] does not match {} pilots", theta.pilots()),
            ));
        }
        let m = theta.m();
        let y = tape.leaf(y_img);
        let theta_t = super::common::theta_tensor(theta);
        let theta_var = tape.constant(&[m, p], theta_t.data().to_vec())?;
        let dict = self.dict.register(tape);
        let tau = self.threshold * self.step;

        let coeff = self.dict.kernel.shape()[1];
        let mut g = tape.constant(&[coeff, n, m], vec![0.0; coeff * n * m])?;
        let mut layer_estimates = Vec::new();
        for layer in 0..self.layers {
            let h = dict.synth(tape, g).map_err(|e| at_layer(e, layer))?;
            let yhat = tape.matmul_right(h, theta_var, false)?;
            let r = tape.sub(y, yhat)?;
            let bp = tape.matmul_right(r, theta_var, true)?;
            let t = dict.analysis(tape, bp).map_err(|e| at_layer(e, layer))?;
            let step_term = tape.scale(t, self.step);
            let z = tape.add(g, step_term)?;
            g = tape.soft_threshold_const(z, tau)?;
            if collect_layers {
                layer_estimates.push(dict.synth(tape, g)?);
            }
        }
        let h_hat = if collect_layers {
            *layer_estimates.last().expect("layers >= 1")
        } else {
            dict.synth(tape, g)?
        };
        Ok(CistaForward {
            h_hat,
            g_final: g,
            layer_estimates,
            y,
            theta_var,
            param_vars: vec![dict.kernel, dict.bias],
        })
    }

    /// Self-supervised loss `‖y − Φ·(Dᶜ ∗ ḡ_K)‖²`.
    pub fn loss(&self, tape: &mut Tape, fwd: &CistaForward) -> Result<Var> {
        let yhat = tape.matmul_right(fwd.h_hat, fwd.theta_var, false)?;
        tape.sum_squared_diff(fwd.y, yhat)
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

/// Tape handles produced by one CISTA-Net forward pass.
#[derive(Debug)]
pub struct CistaForward {
    pub h_hat: Var,
    pub g_final: Var,
    /// Per-layer synthesized channel images (only when requested).
    pub layer_estimates: Vec<Var>,
    pub y: Var,
    pub theta_var: Var,
    /// Same order as `tensors_mut`.
    pub param_vars: Vec<Var>,
}
