//! The three unrolled estimation networks and their shared machinery.

pub mod blocks;
pub mod checkpoint;
pub mod cista;
pub mod cista_plus;
pub mod cnncdl;
pub mod common;
pub mod image;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::measurement::PhaseMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use cista::{CistaNetParams, CISTA_DEFAULT_LAYERS};
pub use cista_plus::{CistaNetPlusParams, CISTA_PLUS_DEFAULT_LAYERS};
pub use cnncdl::{CnnCdlParams, CNNCDL_DEFAULT_LAYERS, CNNCDL_PAPER_WIDTH};

/// Which unrolled architecture a model or checkpoint is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cista,
    CistaPlus,
    CnnCdl,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cista" => Ok(Self::Cista),
            "cista_plus" => Ok(Self::CistaPlus),
            "cnncdl" => Ok(Self::CnnCdl),
            other => Err(Error::arg(
                "ModelKind::parse",
                format!("unknown model kind `{other}` (expected cista|cista_plus|cnncdl)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Cista => "cista",
            Self::CistaPlus => "cista_plus",
            Self::CnnCdl => "cnncdl",
        }
    }

    pub fn default_layers(&self) -> usize {
        match self {
            Self::Cista => CISTA_DEFAULT_LAYERS,
            Self::CistaPlus => CISTA_PLUS_DEFAULT_LAYERS,
            Self::CnnCdl => CNNCDL_DEFAULT_LAYERS,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Exact learnable-parameter counts by named group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCountReport {
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCountReport {
    pub fn group(&self, name: &str) -> Option<usize> {
        self.groups.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }
}

/// One of the three unrolled estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum UnrolledModel {
    Cista(CistaNetParams),
    CistaPlus(CistaNetPlusParams),
    CnnCdl(CnnCdlParams),
}

impl UnrolledModel {
    pub fn init(
        kind: ModelKind,
        layers: usize,
        width: usize,
        theta: &PhaseMatrix,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            ModelKind::Cista => Self::Cista(CistaNetParams::init(layers, rng)),
            ModelKind::CistaPlus => Self::CistaPlus(CistaNetPlusParams::init(layers, theta, rng)),
            ModelKind::CnnCdl => Self::CnnCdl(CnnCdlParams::init(layers, width, theta, rng)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Cista(_) => ModelKind::Cista,
            Self::CistaPlus(_) => ModelKind::CistaPlus,
            Self::CnnCdl(_) => ModelKind::CnnCdl,
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            Self::Cista(p) => p.layers,
            Self::CistaPlus(p) => p.layers,
            Self::CnnCdl(p) => p.layers,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Self::CnnCdl(p) => p.width,
            _ => 0,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Self::Cista(p) => p.named_tensors(),
            Self::CistaPlus(p) => p.named_tensors(),
            Self::CnnCdl(p) => p.named_tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Cista(p) => p.tensors_mut(),
            Self::CistaPlus(p) => p.tensors_mut(),
            Self::CnnCdl(p) => p.tensors_mut(),
        }
    }

    /// Replace parameter data by name; errors on unknown names or shape
    /// mismatches.
    pub fn apply_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let map: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let slots = self.tensors_mut();
        for ((name, shape), slot) in expected.iter().zip(slots) {
            let Some(src) = map.get(name.as_str()) else {
                return Err(Error::arg("apply_named", format!("missing tensor `{name}`")));
            };
            if src.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "apply_named",
                    format!("tensor `{name}`: stored {:?}, expected {:?}", src.shape(), shape),
                ));
            }
            let grad_flag = slot.requires_grad;
            *slot = (*src).clone();
            slot.requires_grad = grad_flag;
        }
        Ok(())
    }

    /// Run the forward pass and produce the model's training loss. CISTA-Net
    /// is self-supervised; the other two require the true channel image.
    pub fn forward_with_loss(
        &self,
        tape: &mut Tape,
        y_img: &Tensor,
        theta: &PhaseMatrix,
        h_true_img: Option<&Tensor>,
    ) -> Result<ModelPass> {
        match self {
            Self::Cista(p) => {
                let fwd = p.forward(tape, y_img, theta, false)?;
                let loss = p.loss(tape, &fwd)?;
                Ok(ModelPass { loss, h_hat: fwd.h_hat, param_vars: fwd.param_vars })
            }
            Self::CistaPlus(p) => {
                let h_true = h_true_img.ok_or_else(|| {
                    Error::arg("compute_loss", "cista_plus loss requires the true channel")
                })?;
                let fwd = p.forward(tape, y_img, false)?;
                let ht = tape.leaf(h_true);
                let loss = p.loss(tape, &fwd, ht)?;
                Ok(ModelPass { loss, h_hat: fwd.h_hat, param_vars: fwd.param_vars })
            }
            Self::CnnCdl(p) => {
                let h_true = h_true_img.ok_or_else(|| {
                    Error::arg("compute_loss", "cnncdl loss requires the true channel")
                })?;
                let fwd = p.forward(tape, y_img)?;
                let ht = tape.leaf(h_true);
                let loss = p.loss(tape, &fwd, ht)?;
                Ok(ModelPass { loss, h_hat: fwd.h_hat, param_vars: fwd.param_vars })
            }
        }
    }

    /// Inference: estimate the cascaded channel (as a complex N·M vector)
    /// from a stacked observation.
    pub fn estimate(
        &self,
        y: &DVector<Complex64>,
        theta: &PhaseMatrix,
        n: usize,
    ) -> Result<DVector<Complex64>> {
        let y_img = image::vec_to_image(y, n, theta.pilots())?;
        let mut tape = Tape::new();
        let h_hat = match self {
            Self::Cista(p) => p.forward(&mut tape, &y_img, theta, false)?.h_hat,
            Self::CistaPlus(p) => p.forward(&mut tape, &y_img, false)?.h_hat,
            Self::CnnCdl(p) => p.forward(&mut tape, &y_img)?.h_hat,
        };
        image::image_to_vec(&tape.to_tensor(h_hat))
    }

    /// Per-layer intermediate estimates (for the layer-depth sweep).
    pub fn estimate_layers(
        &self,
        y: &DVector<Complex64>,
        theta: &PhaseMatrix,
        n: usize,
    ) -> Result<Vec<DVector<Complex64>>> {
        let y_img = image::vec_to_image(y, n, theta.pilots())?;
        let mut tape = Tape::new();
        let layer_vars = match self {
            Self::Cista(p) => p.forward(&mut tape, &y_img, theta, true)?.layer_estimates,
            Self::CistaPlus(p) => p.forward(&mut tape, &y_img, true)?.layer_estimates,
            Self::CnnCdl(p) => p.forward(&mut tape, &y_img)?.layer_outputs,
        };
        layer_vars
            .into_iter()
            .map(|v| image::image_to_vec(&tape.to_tensor(v)))
            .collect()
    }

    /// Exact learnable-parameter counts by group.
    pub fn param_count(&self) -> ParamCountReport {
        let total = self.named_tensors().iter().map(|(_, t)| t.numel()).sum();
        let groups = match self {
            Self::Cista(p) => vec![("dictionary".to_string(), p.dict.param_count())],
            Self::CistaPlus(p) => vec![
                ("dictionaries".to_string(), p.dictionary_param_count()),
                ("final_kernel".to_string(), p.final_dict.param_count()),
                (
                    "steps_thresholds".to_string(),
                    p.steps.iter().chain(&p.thresholds).map(Tensor::numel).sum(),
                ),
                (
                    "measurement_matrices".to_string(),
                    p.theta_b.iter().chain(&p.theta_c).map(Tensor::numel).sum(),
                ),
            ],
            Self::CnnCdl(p) => vec![
                ("f_blocks".to_string(), p.f_block_param_count()),
                (
                    "prelu_slopes".to_string(),
                    p.f_blocks_a
                        .iter()
                        .chain(&p.f_blocks_d)
                        .map(|f| f.slope.numel())
                        .sum(),
                ),
                ("steps".to_string(), p.steps.iter().map(Tensor::numel).sum()),
                (
                    "measurement_matrices".to_string(),
                    p.theta_b.iter().chain(&p.theta_c).map(Tensor::numel).sum(),
                ),
                (
                    "pmm".to_string(),
                    p.pmm.iter().map(blocks::PmmParams::param_count).sum(),
                ),
                (
                    "clfi".to_string(),
                    p.pmm.iter().map(blocks::PmmParams::clfi_param_count).sum(),
                ),
            ],
        };
        ParamCountReport { groups, total }
    }
}

impl UnrolledModel {
    /// Analytic forward-pass cost in multiply-adds for an N×M channel and P
    /// pilots: convolutions plus the matrix-free measurement products
    /// (elementwise work excluded). This is a documented estimate, not a
    /// profiler readout.
    pub fn flops_estimate(&self, n: usize, m: usize, p: usize) -> u64 {
        let nm = (n * m) as u64;
        let meas = 2 * (n * m * p) as u64; // one B or C application
        let dict_conv = |kernel: &Tensor| -> u64 {
            let sh = kernel.shape();
            (sh[0] * sh[1] * sh[2] * sh[3]) as u64 * nm
        };
        match self {
            Self::Cista(pm) => {
                let per = 2 * dict_conv(&pm.dict.kernel) + 2 * meas;
                per * pm.layers as u64 + dict_conv(&pm.dict.kernel)
            }
            Self::CistaPlus(pm) => {
                let mut total = 0;
                for k in 0..pm.layers {
                    total += dict_conv(&pm.synthesis_dicts[k].kernel)
                        + dict_conv(&pm.analysis_dicts[k].kernel)
                        + 2 * meas;
                }
                total + dict_conv(&pm.final_dict.weight)
            }
            Self::CnnCdl(pm) => {
                let mut total = 0;
                for k in 0..pm.layers {
                    let f = dict_conv(&pm.f_blocks_a[k].conv1.weight)
                        + dict_conv(&pm.f_blocks_a[k].conv2.weight)
                        + dict_conv(&pm.f_blocks_d[k].conv1.weight)
                        + dict_conv(&pm.f_blocks_d[k].conv2.weight);
                    total += f + 2 * meas + pm.pmm[k].flops(n, m, k > 0);
                }
                total
            }
        }
    }
}

/// Loss and output handles of one forward pass.
#[derive(Debug)]
pub struct ModelPass {
    pub loss: Var,
    pub h_hat: Var,
    /// Ordered as `tensors_mut`.
    pub param_vars: Vec<Var>,
}
