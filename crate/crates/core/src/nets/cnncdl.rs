//! CNN-CDL: proximal gradient descent unrolled with CNN blocks in the
//! gradient step and a learnable proximal mapping module.
//!
//! Layer k computes `z_k = ḡ_{k−1} + λ_k·F_kᴬ(B_k(y − C_k·F_kᴰ(ḡ_{k−1})))`
//! (the gradient descent module) followed by `ḡ_k = PMM(z_k)`, threading
//! per-scale encoder/decoder features between consecutive layers for CLFI.
//! All K per-layer outputs are retained; the loss supervises every layer
//! against the true channel image.

use rand::Rng;

use crate::error::{Error, Result};
use crate::measurement::PhaseMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::blocks::{pmm_forward, PmmFeatures, PmmParams, PmmVars};
use super::common::{FBlock, FBlockVars};

pub const CNNCDL_DEFAULT_LAYERS: usize = 5;
/// PMM base width at full scale; tests and desk-scale runs use narrower
/// configurations.
pub const CNNCDL_PAPER_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnCdlParams {
    /// F_kᴬ, the analysis-side residual CNN blocks.
    pub f_blocks_a: Vec<FBlock>,
    /// F_kᴰ, the synthesis-side residual CNN blocks.
    pub f_blocks_d: Vec<FBlock>,
    /// λ_k, shape [1] each.
    pub steps: Vec<Tensor>,
    /// Θ_kᴮ / Θ_kᶜ, M×P each, applied matrix-free; initialized to Θ.
    pub theta_b: Vec<Tensor>,
    pub theta_c: Vec<Tensor>,
    pub pmm: Vec<PmmParams>,
    pub layers: usize,
    pub width: usize,
}

impl CnnCdlParams {
    pub fn init(layers: usize, width: usize, theta: &PhaseMatrix, rng: &mut impl Rng) -> Self {
        let theta_tensor = || super::common::theta_tensor(theta).with_grad();
        Self {
            f_blocks_a: (0..layers).map(|_| FBlock::init(rng)).collect(),
            f_blocks_d: (0..layers).map(|_| FBlock::init(rng)).collect(),
            steps: (0..layers).map(|_| Tensor::scalar(0.5).with_grad()).collect(),
            theta_b: (0..layers).map(|_| theta_tensor()).collect(),
            theta_c: (0..layers).map(|_| theta_tensor()).collect(),
            pmm: (0..layers).map(|_| PmmParams::init(width, rng)).collect(),
            layers,
            width,
        }
    }

    /// Conv parameters of the F blocks only (Table parity: 1186 × K × 2).
    pub fn f_block_param_count(&self) -> usize {
        self.f_blocks_a.iter().map(FBlock::conv_param_count).sum::<usize>()
            + self.f_blocks_d.iter().map(FBlock::conv_param_count).sum::<usize>()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for k in 0..self.layers {
            let p = format!("layer{k}");
            out.push((format!("{p}.fa.conv1.weight"), &self.f_blocks_a[k].conv1.weight));
            out.push((format!("{p}.fa.conv1.bias"), &self.f_blocks_a[k].conv1.bias));
            out.push((format!("{p}.fa.slope"), &self.f_blocks_a[k].slope));
            out.push((format!("{p}.fa.conv2.weight"), &self.f_blocks_a[k].conv2.weight));
            out.push((format!("{p}.fa.conv2.bias"), &self.f_blocks_a[k].conv2.bias));
            out.push((format!("{p}.fd.conv1.weight"), &self.f_blocks_d[k].conv1.weight));
            out.push((format!("{p}.fd.conv1.bias"), &self.f_blocks_d[k].conv1.bias));
            out.push((format!("{p}.fd.slope"), &self.f_blocks_d[k].slope));
            out.push((format!("{p}.fd.conv2.weight"), &self.f_blocks_d[k].conv2.weight));
            out.push((format!("{p}.fd.conv2.bias"), &self.f_blocks_d[k].conv2.bias));
            out.push((format!("{p}.step"), &self.steps[k]));
            out.push((format!("{p}.theta_b"), &self.theta_b[k]));
            out.push((format!("{p}.theta_c"), &self.theta_c[k]));
            self.pmm[k].collect_named(&format!("{p}.pmm"), &mut out);
        }
        out
    }

    /// Same order as `named_tensors` and the forward pass's `param_vars`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let layers = self
            .f_blocks_a
            .iter_mut()
            .zip(self.f_blocks_d.iter_mut())
            .zip(self.steps.iter_mut())
            .zip(self.theta_b.iter_mut())
            .zip(self.theta_c.iter_mut())
            .zip(self.pmm.iter_mut());
        for (((((fa, fd), step), tb), tc), pmm) in layers {
            out.push(&mut fa.conv1.weight);
            out.push(&mut fa.conv1.bias);
            out.push(&mut fa.slope);
            out.push(&mut fa.conv2.weight);
            out.push(&mut fa.conv2.bias);
            out.push(&mut fd.conv1.weight);
            out.push(&mut fd.conv1.bias);
            out.push(&mut fd.slope);
            out.push(&mut fd.conv2.weight);
            out.push(&mut fd.conv2.bias);
            out.push(step);
            out.push(tb);
            out.push(tc);
            pmm.collect_mut(&mut out);
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, y_img: &Tensor) -> Result<CnnCdlForward> {
        let [two, n, p] = *y_img.shape() else {
            return Err(Error::dim(
                "cnncdl_forward",
                format!("observation image must be [2,N,P], got {:?}", y_img.shape()),
            ));
        };
        let m = self.theta_b[0].shape()[0];
        if two != 2 || p != self.theta_b[0].shape()[1] {
            return Err(Error::dim(
                "cnncdl_forward",
                format!("observation [{two},{n},{p}] does not match Θ shape"),
            ));
        }
        let y = tape.leaf(y_img);
        let mut param_vars = Vec::new();
        let mut layer_vars = Vec::new();
        for k in 0..self.layers {
            let fa = register_fblock(tape, &self.f_blocks_a[k], &mut param_vars);
            let fd = register_fblock(tape, &self.f_blocks_d[k], &mut param_vars);
            let step = tape.leaf(&self.steps[k]);
            param_vars.push(step);
            let tb = tape.leaf(&self.theta_b[k]);
            param_vars.push(tb);
            let tc = tape.leaf(&self.theta_c[k]);
            param_vars.push(tc);
            let pmm = self.pmm[k].register(tape, &mut param_vars);
            layer_vars.push(LayerVars { fa, fd, step, tb, tc, pmm });
        }

        let mut g = tape.constant(&[2, n, m], vec![0.0; 2 * n * m])?;
        let mut feats: Option<PmmFeatures> = None;
        let mut layer_outputs = Vec::with_capacity(self.layers);
        for lv in &layer_vars {
            let z = gdm_forward(tape, g, y, &lv.fa, &lv.fd, lv.step, lv.tb, lv.tc)?;
            let (g_next, f) = pmm_forward(tape, z, &lv.pmm, feats.as_ref())?;
            g = g_next;
            feats = Some(f);
            layer_outputs.push(g);
        }
        Ok(CnnCdlForward { h_hat: g, layer_outputs, y, param_vars })
    }

    /// Per-layer supervised loss `Σ_k ‖h − ḡ_k‖²`.
    pub fn loss(&self, tape: &mut Tape, fwd: &CnnCdlForward, h_true: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &g in &fwd.layer_outputs {
            let term = tape.sum_squared_diff(h_true, g)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        acc.ok_or_else(|| Error::arg("cnncdl_loss", "network has no layers"))
    }
}

struct LayerVars {
    fa: FBlockVars,
    fd: FBlockVars,
    step: Var,
    tb: Var,
    tc: Var,
    pmm: PmmVars,
}

fn register_fblock(tape: &mut Tape, f: &FBlock, vars: &mut Vec<Var>) -> FBlockVars {
    let v = f.register(tape);
    vars.extend_from_slice(&[
        v.conv1.weight,
        v.conv1.bias,
        v.slope,
        v.conv2.weight,
        v.conv2.bias,
    ]);
    v
}

/// Gradient descent module:
/// `z = ḡ + λ·F_A(B(y − C·F_D(ḡ)))` with B/C applied matrix-free.
#[allow(clippy::too_many_arguments)]
pub fn gdm_forward(
    tape: &mut Tape,
    g: Var,
    y: Var,
    f_a: &FBlockVars,
    f_d: &FBlockVars,
    step: Var,
    theta_b: Var,
    theta_c: Var,
) -> Result<Var> {
    let d = f_d.apply(tape, g)?;
    let yhat = tape.matmul_right(d, theta_c, false)?;
    let r = tape.sub(y, yhat)?;
    let bp = tape.matmul_right(r, theta_b, true)?;
    let a = f_a.apply(tape, bp)?;
    let stepped = tape.scale_var(a, step)?;
    tape.add(g, stepped)
}

/// Tape handles produced by one CNN-CDL forward pass.
#[derive(Debug)]
pub struct CnnCdlForward {
    /// Final estimate ḡ_K (the channel image itself).
    pub h_hat: Var,
    /// All K per-layer outputs, each `[2,N,M]`.
    pub layer_outputs: Vec<Var>,
    pub y: Var,
    pub param_vars: Vec<Var>,
}
