//! CNN-CDL building blocks: channel-spatial attention (CSA), the
//! convolutional block (CB), the encoder-decoder proximal mapping module
//! (PMM), and cross-layer feature integration (CLFI).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::common::{ConvLayer, DepthwiseLayer, NormParams};

/// Channel-spatial attention. The input is transformed by a 1×1 conv and a
/// 3×3 depthwise conv; a spatial map (1×1 → depthwise 3×3 → 1×1) multiplies
/// it elementwise, then a channel map (global average pool → 1×1 conv)
/// multiplies channel-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaParams {
    pub transform_pw: ConvLayer,
    pub transform_dw: DepthwiseLayer,
    pub spatial_pw1: ConvLayer,
    pub spatial_dw: DepthwiseLayer,
    pub spatial_pw2: ConvLayer,
    pub channel_pw: ConvLayer,
}

impl CsaParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            transform_pw: ConvLayer::init(channels, channels, 1, 1, 0, rng),
            transform_dw: DepthwiseLayer::init(channels, rng),
            spatial_pw1: ConvLayer::init(channels, channels, 1, 1, 0, rng),
            spatial_dw: DepthwiseLayer::init(channels, rng),
            spatial_pw2: ConvLayer::init(channels, channels, 1, 1, 0, rng),
            channel_pw: ConvLayer::init(channels, channels, 1, 1, 0, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.transform_pw.param_count()
            + self.transform_dw.param_count()
            + self.spatial_pw1.param_count()
            + self.spatial_dw.param_count()
            + self.spatial_pw2.param_count()
            + self.channel_pw.param_count()
    }

    pub fn collect_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        push_conv(out, &format!("{prefix}.transform_pw"), &self.transform_pw);
        push_dw(out, &format!("{prefix}.transform_dw"), &self.transform_dw);
        push_conv(out, &format!("{prefix}.spatial_pw1"), &self.spatial_pw1);
        push_dw(out, &format!("{prefix}.spatial_dw"), &self.spatial_dw);
        push_conv(out, &format!("{prefix}.spatial_pw2"), &self.spatial_pw2);
        push_conv(out, &format!("{prefix}.channel_pw"), &self.channel_pw);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.transform_pw.weight);
        out.push(&mut self.transform_pw.bias);
        out.push(&mut self.transform_dw.weight);
        out.push(&mut self.transform_dw.bias);
        out.push(&mut self.spatial_pw1.weight);
        out.push(&mut self.spatial_pw1.bias);
        out.push(&mut self.spatial_dw.weight);
        out.push(&mut self.spatial_dw.bias);
        out.push(&mut self.spatial_pw2.weight);
        out.push(&mut self.spatial_pw2.bias);
        out.push(&mut self.channel_pw.weight);
        out.push(&mut self.channel_pw.bias);
    }

    pub fn register(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> CsaVars {
        let v = CsaVars {
            transform_pw: self.transform_pw.register(tape),
            transform_dw: self.transform_dw.register(tape),
            spatial_pw1: self.spatial_pw1.register(tape),
            spatial_dw: self.spatial_dw.register(tape),
            spatial_pw2: self.spatial_pw2.register(tape),
            channel_pw: self.channel_pw.register(tape),
        };
        vars.extend_from_slice(&[
            v.transform_pw.weight,
            v.transform_pw.bias,
            v.transform_dw.weight,
            v.transform_dw.bias,
            v.spatial_pw1.weight,
            v.spatial_pw1.bias,
            v.spatial_dw.weight,
            v.spatial_dw.bias,
            v.spatial_pw2.weight,
            v.spatial_pw2.bias,
            v.channel_pw.weight,
            v.channel_pw.bias,
        ]);
        v
    }
}

fn push_conv<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, c: &'a ConvLayer) {
    out.push((format!("{prefix}.weight"), &c.weight));
    out.push((format!("{prefix}.bias"), &c.bias));
}

fn push_dw<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, c: &'a DepthwiseLayer) {
    out.push((format!("{prefix}.weight"), &c.weight));
    out.push((format!("{prefix}.bias"), &c.bias));
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, n: &'a NormParams) {
    out.push((format!("{prefix}.gamma"), &n.gamma));
    out.push((format!("{prefix}.beta"), &n.beta));
}

#[derive(Debug, Clone, Copy)]
pub struct CsaVars {
    transform_pw: super::common::ConvVars,
    transform_dw: super::common::DepthwiseVars,
    spatial_pw1: super::common::ConvVars,
    spatial_dw: super::common::DepthwiseVars,
    spatial_pw2: super::common::ConvVars,
    channel_pw: super::common::ConvVars,
}

/// CSA forward: `((transform ⊙ spatial_map) ⊙ channel_map)`.
pub fn csa_forward(tape: &mut Tape, x: Var, v: &CsaVars) -> Result<Var> {
    let t = v.transform_pw.apply(tape, x)?;
    let t = v.transform_dw.apply(tape, t)?;
    let s = v.spatial_pw1.apply(tape, x)?;
    let s = v.spatial_dw.apply(tape, s)?;
    let smap = v.spatial_pw2.apply(tape, s)?;
    let pooled = tape.global_avg_pool(x)?;
    let cmap = v.channel_pw.apply(tape, pooled)?;
    let refined = tape.mul(t, smap)?;
    tape.mul_channel(refined, cmap)
}

/// Convolutional block: two pre-norm residual sub-blocks. The first combines
/// a static conv path (1×1 pointwise then 3×3 depthwise) with a CSA path by
/// elementwise multiplication; the second is two 1×1 convolutions around a
/// PReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct CbParams {
    pub ln1: NormParams,
    pub static_pw: ConvLayer,
    pub static_dw: DepthwiseLayer,
    pub csa: CsaParams,
    pub ln2: NormParams,
    pub ff_pw1: ConvLayer,
    pub ff_slope: Tensor,
    pub ff_pw2: ConvLayer,
}

impl CbParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: NormParams::init(channels),
            static_pw: ConvLayer::init(channels, channels, 1, 1, 0, rng),
            static_dw: DepthwiseLayer::init(channels, rng),
            csa: CsaParams::init(channels, rng),
            ln2: NormParams::init(channels),
            ff_pw1: ConvLayer::init(channels, channels, 1, 1, 0, rng),
            ff_slope: Tensor::full(&[channels], 0.1).with_grad(),
            ff_pw2: ConvLayer::init(channels, channels, 1, 1, 0, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.ln1.param_count()
            + self.static_pw.param_count()
            + self.static_dw.param_count()
            + self.csa.param_count()
            + self.ln2.param_count()
            + self.ff_pw1.param_count()
            + self.ff_slope.numel()
            + self.ff_pw2.param_count()
    }

    pub fn collect_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        push_norm(out, &format!("{prefix}.ln1"), &self.ln1);
        push_conv(out, &format!("{prefix}.static_pw"), &self.static_pw);
        push_dw(out, &format!("{prefix}.static_dw"), &self.static_dw);
        self.csa.collect_named(&format!("{prefix}.csa"), out);
        push_norm(out, &format!("{prefix}.ln2"), &self.ln2);
        push_conv(out, &format!("{prefix}.ff_pw1"), &self.ff_pw1);
        out.push((format!("{prefix}.ff_slope"), &self.ff_slope));
        push_conv(out, &format!("{prefix}.ff_pw2"), &self.ff_pw2);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.ln1.gamma);
        out.push(&mut self.ln1.beta);
        out.push(&mut self.static_pw.weight);
        out.push(&mut self.static_pw.bias);
        out.push(&mut self.static_dw.weight);
        out.push(&mut self.static_dw.bias);
        self.csa.collect_mut(out);
        out.push(&mut self.ln2.gamma);
        out.push(&mut self.ln2.beta);
        out.push(&mut self.ff_pw1.weight);
        out.push(&mut self.ff_pw1.bias);
        out.push(&mut self.ff_slope);
        out.push(&mut self.ff_pw2.weight);
        out.push(&mut self.ff_pw2.bias);
    }

    pub fn register(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> CbVars {
        let ln1 = self.ln1.register(tape);
        vars.extend_from_slice(&[ln1.gamma, ln1.beta]);
        let static_pw = self.static_pw.register(tape);
        vars.extend_from_slice(&[static_pw.weight, static_pw.bias]);
        let static_dw = self.static_dw.register(tape);
        vars.extend_from_slice(&[static_dw.weight, static_dw.bias]);
        let csa = self.csa.register(tape, vars);
        let ln2 = self.ln2.register(tape);
        vars.extend_from_slice(&[ln2.gamma, ln2.beta]);
        let ff_pw1 = self.ff_pw1.register(tape);
        vars.extend_from_slice(&[ff_pw1.weight, ff_pw1.bias]);
        let ff_slope = tape.leaf(&self.ff_slope);
        vars.push(ff_slope);
        let ff_pw2 = self.ff_pw2.register(tape);
        vars.extend_from_slice(&[ff_pw2.weight, ff_pw2.bias]);
        CbVars { ln1, static_pw, static_dw, csa, ln2, ff_pw1, ff_slope, ff_pw2 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CbVars {
    ln1: super::common::NormVars,
    static_pw: super::common::ConvVars,
    static_dw: super::common::DepthwiseVars,
    csa: CsaVars,
    ln2: super::common::NormVars,
    ff_pw1: super::common::ConvVars,
    ff_slope: Var,
    ff_pw2: super::common::ConvVars,
}

pub fn cb_forward(tape: &mut Tape, x: Var, v: &CbVars) -> Result<Var> {
    let normed = v.ln1.apply(tape, x)?;
    let stat = v.static_pw.apply(tape, normed)?;
    let stat = v.static_dw.apply(tape, stat)?;
    let attn = csa_forward(tape, normed, &v.csa)?;
    let body = tape.mul(stat, attn)?;
    let x = tape.add(x, body)?;
    let normed = v.ln2.apply(tape, x)?;
    let ff = v.ff_pw1.apply(tape, normed)?;
    let ff = tape.prelu(ff, v.ff_slope)?;
    let ff = v.ff_pw2.apply(tape, ff)?;
    tape.add(x, ff)
}

/// Cross-layer feature integration: previous-layer encoder and decoder
/// features at the same scale are concatenated, fused by a 1×1 conv, and
/// turned into spatial and channel attention maps that refine the current
/// encoder feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfiParams {
    pub fuse_pw: ConvLayer,
    pub spatial_pw1: ConvLayer,
    pub spatial_dw: DepthwiseLayer,
    pub spatial_pw2: ConvLayer,
    pub channel_pw: ConvLayer,
}

impl ClfiParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            fuse_pw: ConvLayer::init(channels, 2 * channels, 1, 1, 0, rng),
            spatial_pw1: ConvLayer::init(channels, channels, 1, 1, 0, rng),
            spatial_dw: DepthwiseLayer::init(channels, rng),
            spatial_pw2: ConvLayer::init(channels, channels, 1, 1, 0, rng),
            channel_pw: ConvLayer::init(channels, channels, 1, 1, 0, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fuse_pw.param_count()
            + self.spatial_pw1.param_count()
            + self.spatial_dw.param_count()
            + self.spatial_pw2.param_count()
            + self.channel_pw.param_count()
    }

    pub fn collect_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        push_conv(out, &format!("{prefix}.fuse_pw"), &self.fuse_pw);
        push_conv(out, &format!("{prefix}.spatial_pw1"), &self.spatial_pw1);
        push_dw(out, &format!("{prefix}.spatial_dw"), &self.spatial_dw);
        push_conv(out, &format!("{prefix}.spatial_pw2"), &self.spatial_pw2);
        push_conv(out, &format!("{prefix}.channel_pw"), &self.channel_pw);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.fuse_pw.weight);
        out.push(&mut self.fuse_pw.bias);
        out.push(&mut self.spatial_pw1.weight);
        out.push(&mut self.spatial_pw1.bias);
        out.push(&mut self.spatial_dw.weight);
        out.push(&mut self.spatial_dw.bias);
        out.push(&mut self.spatial_pw2.weight);
        out.push(&mut self.spatial_pw2.bias);
        out.push(&mut self.channel_pw.weight);
        out.push(&mut self.channel_pw.bias);
    }

    pub fn register(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> ClfiVars {
        let v = ClfiVars {
            fuse_pw: self.fuse_pw.register(tape),
            spatial_pw1: self.spatial_pw1.register(tape),
            spatial_dw: self.spatial_dw.register(tape),
            spatial_pw2: self.spatial_pw2.register(tape),
            channel_pw: self.channel_pw.register(tape),
        };
        vars.extend_from_slice(&[
            v.fuse_pw.weight,
            v.fuse_pw.bias,
            v.spatial_pw1.weight,
            v.spatial_pw1.bias,
            v.spatial_dw.weight,
            v.spatial_dw.bias,
            v.spatial_pw2.weight,
            v.spatial_pw2.bias,
            v.channel_pw.weight,
            v.channel_pw.bias,
        ]);
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClfiVars {
    fuse_pw: super::common::ConvVars,
    spatial_pw1: super::common::ConvVars,
    spatial_dw: super::common::DepthwiseVars,
    spatial_pw2: super::common::ConvVars,
    channel_pw: super::common::ConvVars,
}

pub fn clfi_forward(
    tape: &mut Tape,
    enc_feat: Var,
    prev_enc: Var,
    prev_dec: Var,
    v: &ClfiVars,
) -> Result<Var> {
    if tape.shape(prev_enc) != tape.shape(enc_feat) || tape.shape(prev_dec) != tape.shape(enc_feat)
    {
        return Err(Error::dim(
            "clfi_forward",
            format!(
                "scale mismatch: enc {:?}, prev_enc {:?}, prev_dec {:?}",
                tape.shape(enc_feat),
                tape.shape(prev_enc),
                tape.shape(prev_dec)
            ),
        ));
    }
    let cat = tape.concat_channels(&[prev_enc, prev_dec])?;
    let fused = v.fuse_pw.apply(tape, cat)?;
    let s = v.spatial_pw1.apply(tape, fused)?;
    let s = v.spatial_dw.apply(tape, s)?;
    let smap = v.spatial_pw2.apply(tape, s)?;
    let pooled = tape.global_avg_pool(fused)?;
    let cmap = v.channel_pw.apply(tape, pooled)?;
    let refined = tape.mul(enc_feat, smap)?;
    tape.mul_channel(refined, cmap)
}

/// Proximal mapping module: symmetric three-level encoder-decoder. The
/// encoder path downsamples with stride-2 2×2 convolutions; the decoder
/// upsamples with pointwise convolutions plus pixel shuffling; skip
/// connections concatenate channels followed by a pointwise convolution.
/// Per-scale encoder/decoder features are returned for the next layer's
/// CLFI; features from the previous layer refine the encoder when present.
#[derive(Debug, Clone, PartialEq)]
pub struct PmmParams {
    pub conv_in: ConvLayer,
    pub enc_cb0: CbParams,
    pub clfi0: ClfiParams,
    pub down0: ConvLayer,
    pub enc_cb1: CbParams,
    pub clfi1: ClfiParams,
    pub down1: ConvLayer,
    pub mid_cb: CbParams,
    pub up_pw1: ConvLayer,
    pub skip_pw1: ConvLayer,
    pub dec_cb1: CbParams,
    pub up_pw0: ConvLayer,
    pub skip_pw0: ConvLayer,
    pub dec_cb0: CbParams,
    pub conv_out: ConvLayer,
    /// Base width C0; levels use C0, 2·C0, 4·C0.
    pub width: usize,
}

impl PmmParams {
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        let (c0, c1, c2) = (width, 2 * width, 4 * width);
        Self {
            conv_in: ConvLayer::init(c0, 2, 3, 1, 1, rng),
            enc_cb0: CbParams::init(c0, rng),
            clfi0: ClfiParams::init(c0, rng),
            down0: ConvLayer::init(c1, c0, 2, 2, 0, rng),
            enc_cb1: CbParams::init(c1, rng),
            clfi1: ClfiParams::init(c1, rng),
            down1: ConvLayer::init(c2, c1, 2, 2, 0, rng),
            mid_cb: CbParams::init(c2, rng),
            up_pw1: ConvLayer::init(c1 * 4, c2, 1, 1, 0, rng),
            skip_pw1: ConvLayer::init(c1, 2 * c1, 1, 1, 0, rng),
            dec_cb1: CbParams::init(c1, rng),
            up_pw0: ConvLayer::init(c0 * 4, c1, 1, 1, 0, rng),
            skip_pw0: ConvLayer::init(c0, 2 * c0, 1, 1, 0, rng),
            dec_cb0: CbParams::init(c0, rng),
            conv_out: ConvLayer::init(2, c0, 3, 1, 1, rng),
            width,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_in.param_count()
            + self.enc_cb0.param_count()
            + self.down0.param_count()
            + self.enc_cb1.param_count()
            + self.down1.param_count()
            + self.mid_cb.param_count()
            + self.up_pw1.param_count()
            + self.skip_pw1.param_count()
            + self.dec_cb1.param_count()
            + self.up_pw0.param_count()
            + self.skip_pw0.param_count()
            + self.dec_cb0.param_count()
            + self.conv_out.param_count()
    }

    pub fn clfi_param_count(&self) -> usize {
        self.clfi0.param_count() + self.clfi1.param_count()
    }

    pub fn collect_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        push_conv(out, &format!("{prefix}.conv_in"), &self.conv_in);
        self.enc_cb0.collect_named(&format!("{prefix}.enc_cb0"), out);
        self.clfi0.collect_named(&format!("{prefix}.clfi0"), out);
        push_conv(out, &format!("{prefix}.down0"), &self.down0);
        self.enc_cb1.collect_named(&format!("{prefix}.enc_cb1"), out);
        self.clfi1.collect_named(&format!("{prefix}.clfi1"), out);
        push_conv(out, &format!("{prefix}.down1"), &self.down1);
        self.mid_cb.collect_named(&format!("{prefix}.mid_cb"), out);
        push_conv(out, &format!("{prefix}.up_pw1"), &self.up_pw1);
        push_conv(out, &format!("{prefix}.skip_pw1"), &self.skip_pw1);
        self.dec_cb1.collect_named(&format!("{prefix}.dec_cb1"), out);
        push_conv(out, &format!("{prefix}.up_pw0"), &self.up_pw0);
        push_conv(out, &format!("{prefix}.skip_pw0"), &self.skip_pw0);
        self.dec_cb0.collect_named(&format!("{prefix}.dec_cb0"), out);
        push_conv(out, &format!("{prefix}.conv_out"), &self.conv_out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.conv_in.weight);
        out.push(&mut self.conv_in.bias);
        self.enc_cb0.collect_mut(out);
        self.clfi0.collect_mut(out);
        out.push(&mut self.down0.weight);
        out.push(&mut self.down0.bias);
        self.enc_cb1.collect_mut(out);
        self.clfi1.collect_mut(out);
        out.push(&mut self.down1.weight);
        out.push(&mut self.down1.bias);
        self.mid_cb.collect_mut(out);
        out.push(&mut self.up_pw1.weight);
        out.push(&mut self.up_pw1.bias);
        out.push(&mut self.skip_pw1.weight);
        out.push(&mut self.skip_pw1.bias);
        self.dec_cb1.collect_mut(out);
        out.push(&mut self.up_pw0.weight);
        out.push(&mut self.up_pw0.bias);
        out.push(&mut self.skip_pw0.weight);
        out.push(&mut self.skip_pw0.bias);
        self.dec_cb0.collect_mut(out);
        out.push(&mut self.conv_out.weight);
        out.push(&mut self.conv_out.bias);
    }

    pub fn register(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> PmmVars {
        let conv_in = self.conv_in.register(tape);
        vars.extend_from_slice(&[conv_in.weight, conv_in.bias]);
        let enc_cb0 = self.enc_cb0.register(tape, vars);
        let clfi0 = self.clfi0.register(tape, vars);
        let down0 = self.down0.register(tape);
        vars.extend_from_slice(&[down0.weight, down0.bias]);
        let enc_cb1 = self.enc_cb1.register(tape, vars);
        let clfi1 = self.clfi1.register(tape, vars);
        let down1 = self.down1.register(tape);
        vars.extend_from_slice(&[down1.weight, down1.bias]);
        let mid_cb = self.mid_cb.register(tape, vars);
        let up_pw1 = self.up_pw1.register(tape);
        vars.extend_from_slice(&[up_pw1.weight, up_pw1.bias]);
        let skip_pw1 = self.skip_pw1.register(tape);
        vars.extend_from_slice(&[skip_pw1.weight, skip_pw1.bias]);
        let dec_cb1 = self.dec_cb1.register(tape, vars);
        let up_pw0 = self.up_pw0.register(tape);
        vars.extend_from_slice(&[up_pw0.weight, up_pw0.bias]);
        let skip_pw0 = self.skip_pw0.register(tape);
        vars.extend_from_slice(&[skip_pw0.weight, skip_pw0.bias]);
        let dec_cb0 = self.dec_cb0.register(tape, vars);
        let conv_out = self.conv_out.register(tape);
        vars.extend_from_slice(&[conv_out.weight, conv_out.bias]);
        PmmVars {
            conv_in,
            enc_cb0,
            clfi0,
            down0,
            enc_cb1,
            clfi1,
            down1,
            mid_cb,
            up_pw1,
            skip_pw1,
            dec_cb1,
            up_pw0,
            skip_pw0,
            dec_cb0,
            conv_out,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PmmVars {
    conv_in: super::common::ConvVars,
    enc_cb0: CbVars,
    clfi0: ClfiVars,
    down0: super::common::ConvVars,
    enc_cb1: CbVars,
    clfi1: ClfiVars,
    down1: super::common::ConvVars,
    mid_cb: CbVars,
    up_pw1: super::common::ConvVars,
    skip_pw1: super::common::ConvVars,
    dec_cb1: CbVars,
    up_pw0: super::common::ConvVars,
    skip_pw0: super::common::ConvVars,
    dec_cb0: CbVars,
    conv_out: super::common::ConvVars,
}

impl CsaParams {
    /// Forward multiply-adds on a (channels, h, w) input.
    pub fn flops(&self, c: usize, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let c = c as u64;
        // transform pw + dw, spatial pw/dw/pw, channel pw on the pooled map
        (c * c * hw) * 3 + (c * 9 * hw) * 2 + c * c
    }
}

impl CbParams {
    pub fn flops(&self, c: usize, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let cc = (c * c) as u64;
        cc * hw // static pw
            + (c as u64) * 9 * hw // static dw
            + self.csa.flops(c, h, w)
            + 2 * cc * hw // ff pw1 + pw2
    }
}

impl ClfiParams {
    pub fn flops(&self, c: usize, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let cc = (c * c) as u64;
        2 * cc * hw // fuse pw (2c→c)
            + 2 * cc * hw + (c as u64) * 9 * hw // spatial chain
            + cc // channel pw
    }
}

impl PmmParams {
    /// Forward multiply-adds on a [2, h, w] input, CLFI included when
    /// `with_clfi` (layers after the first).
    pub fn flops(&self, h: usize, w: usize, with_clfi: bool) -> u64 {
        let c0 = self.width;
        let (c1, c2) = (2 * c0, 4 * c0);
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h / 4, w / 4);
        let conv = |cout: usize, cin: usize, k: usize, ho: usize, wo: usize| {
            (cout * cin * k * k * ho * wo) as u64
        };
        let mut total = conv(c0, 2, 3, h, w)
            + self.enc_cb0.flops(c0, h, w)
            + conv(c1, c0, 2, h1, w1)
            + self.enc_cb1.flops(c1, h1, w1)
            + conv(c2, c1, 2, h2, w2)
            + self.mid_cb.flops(c2, h2, w2)
            + conv(c1 * 4, c2, 1, h2, w2)
            + conv(c1, 2 * c1, 1, h1, w1)
            + self.dec_cb1.flops(c1, h1, w1)
            + conv(c0 * 4, c1, 1, h1, w1)
            + conv(c0, 2 * c0, 1, h, w)
            + self.dec_cb0.flops(c0, h, w)
            + conv(2, c0, 3, h, w);
        if with_clfi {
            total += self.clfi0.flops(c0, h, w) + self.clfi1.flops(c1, h1, w1);
        }
        total
    }
}

/// Per-scale encoder/decoder features handed from layer k−1 to layer k.
#[derive(Debug, Clone, Copy)]
pub struct PmmFeatures {
    /// Encoder features at scales 0 (full) and 1 (half).
    pub enc: [Var; 2],
    /// Decoder features at scales 0 and 1.
    pub dec: [Var; 2],
}

pub fn pmm_forward(
    tape: &mut Tape,
    z: Var,
    v: &PmmVars,
    prev: Option<&PmmFeatures>,
) -> Result<(Var, PmmFeatures)> {
    let [_, h, w] = *tape.shape(z) else {
        return Err(Error::dim("pmm_forward", format!("expected [2,H,W], got {:?}", tape.shape(z))));
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!(
            "pmm_forward: spatial dims ({h},{w}) must be divisible by 4 \
             (two downsamplings); pad to ({},{})",
            h.div_ceil(4) * 4,
            w.div_ceil(4) * 4
        )));
    }
    let f0 = v.conv_in.apply(tape, z)?;
    let mut e0 = cb_forward(tape, f0, &v.enc_cb0)?;
    if let Some(p) = prev {
        e0 = clfi_forward(tape, e0, p.enc[0], p.dec[0], &v.clfi0)?;
    }
    let d0 = v.down0.apply(tape, e0)?;
    let mut e1 = cb_forward(tape, d0, &v.enc_cb1)?;
    if let Some(p) = prev {
        e1 = clfi_forward(tape, e1, p.enc[1], p.dec[1], &v.clfi1)?;
    }
    let d1 = v.down1.apply(tape, e1)?;
    let mid = cb_forward(tape, d1, &v.mid_cb)?;
    let u1 = v.up_pw1.apply(tape, mid)?;
    let u1 = tape.pixel_shuffle(u1, 2)?;
    let cat1 = tape.concat_channels(&[u1, e1])?;
    let s1 = v.skip_pw1.apply(tape, cat1)?;
    let dec1 = cb_forward(tape, s1, &v.dec_cb1)?;
    let u0 = v.up_pw0.apply(tape, dec1)?;
    let u0 = tape.pixel_shuffle(u0, 2)?;
    let cat0 = tape.concat_channels(&[u0, e0])?;
    let s0 = v.skip_pw0.apply(tape, cat0)?;
    let dec0 = cb_forward(tape, s0, &v.dec_cb0)?;
    let g = v.conv_out.apply(tape, dec0)?;
    Ok((g, PmmFeatures { enc: [e0, e1], dec: [dec0, dec1] }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::stream_rng;
    use crate::tape::fd_probe_guarded;

    fn zero_conv(c: &mut ConvLayer) {
        for v in c.weight.data_mut() {
            *v = 0.0;
        }
        for v in c.bias.data_mut() {
            *v = 0.0;
        }
    }

    fn zero_dw(c: &mut DepthwiseLayer) {
        for v in c.weight.data_mut() {
            *v = 0.0;
        }
        for v in c.bias.data_mut() {
            *v = 0.0;
        }
    }

    fn zero_csa(c: &mut CsaParams) {
        zero_conv(&mut c.transform_pw);
        zero_dw(&mut c.transform_dw);
        zero_conv(&mut c.spatial_pw1);
        zero_dw(&mut c.spatial_dw);
        zero_conv(&mut c.spatial_pw2);
        zero_conv(&mut c.channel_pw);
    }

    fn zero_cb_body(c: &mut CbParams) {
        zero_conv(&mut c.static_pw);
        zero_dw(&mut c.static_dw);
        zero_csa(&mut c.csa);
        zero_conv(&mut c.ff_pw1);
        zero_conv(&mut c.ff_pw2);
    }

    #[test]
    fn csa_preserves_shape_and_zero_weights_give_zero() {
        let mut rng = stream_rng(51, "csa", 0);
        let params = CsaParams::init(4, &mut rng);
        let x = Tensor::uniform(&[4, 5, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let v = params.register(&mut tape, &mut vars);
        let xv = tape.leaf(&x);
        let out = csa_forward(&mut tape, xv, &v).unwrap();
        assert_eq!(tape.shape(out), &[4, 5, 6]);
        // zero attention-branch weights and biases shut the block off
        let mut zeroed = params.clone();
        zero_csa(&mut zeroed);
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let v = zeroed.register(&mut tape, &mut vars);
        let xv = tape.leaf(&x);
        let out = csa_forward(&mut tape, xv, &v).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cb_with_zero_body_weights_is_identity() {
        let mut rng = stream_rng(51, "cb", 0);
        let mut params = CbParams::init(3, &mut rng);
        zero_cb_body(&mut params);
        let x = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let v = params.register(&mut tape, &mut vars);
        let xv = tape.leaf(&x);
        let out = cb_forward(&mut tape, xv, &v).unwrap();
        assert_eq!(tape.value(out), x.data());
    }

    #[test]
    fn clfi_zero_fusion_gives_zero_and_checks_scales() {
        let mut rng = stream_rng(51, "clfi", 0);
        let mut params = ClfiParams::init(3, &mut rng);
        zero_conv(&mut params.fuse_pw);
        zero_conv(&mut params.spatial_pw1);
        zero_dw(&mut params.spatial_dw);
        zero_conv(&mut params.spatial_pw2);
        zero_conv(&mut params.channel_pw);
        let enc = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let pe = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let pd = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let v = params.register(&mut tape, &mut vars);
        let (e, a, b) = (tape.leaf(&enc), tape.leaf(&pe), tape.leaf(&pd));
        let out = clfi_forward(&mut tape, e, a, b, &v).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
        // scale mismatch is a dimension error
        let bad = Tensor::uniform(&[3, 2, 2], 1.0, &mut rng);
        let bv = tape.leaf(&bad);
        assert!(clfi_forward(&mut tape, e, bv, b, &v).is_err());
    }

    #[test]
    fn pmm_with_identity_cbs_matches_hand_traced_linear_chain() {
        let mut rng = stream_rng(51, "pmm", 0);
        let mut params = PmmParams::init(4, &mut rng);
        zero_cb_body(&mut params.enc_cb0);
        zero_cb_body(&mut params.enc_cb1);
        zero_cb_body(&mut params.mid_cb);
        zero_cb_body(&mut params.dec_cb1);
        zero_cb_body(&mut params.dec_cb0);
        let z = Tensor::uniform(&[2, 8, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let v = params.register(&mut tape, &mut vars);
        let zv = tape.leaf(&z);
        let (out, _) = pmm_forward(&mut tape, zv, &v, None).unwrap();
        // hand-traced composition of the remaining (purely linear+bias) ops
        let mut t2 = Tape::new();
        let zv2 = t2.leaf(&z);
        let conv_in = params.conv_in.register(&mut t2);
        let down0 = params.down0.register(&mut t2);
        let down1 = params.down1.register(&mut t2);
        let up_pw1 = params.up_pw1.register(&mut t2);
        let skip_pw1 = params.skip_pw1.register(&mut t2);
        let up_pw0 = params.up_pw0.register(&mut t2);
        let skip_pw0 = params.skip_pw0.register(&mut t2);
        let conv_out = params.conv_out.register(&mut t2);
        let e0 = conv_in.apply(&mut t2, zv2).unwrap();
        let e1 = down0.apply(&mut t2, e0).unwrap();
        let mid = down1.apply(&mut t2, e1).unwrap();
        let u1 = up_pw1.apply(&mut t2, mid).unwrap();
        let u1 = t2.pixel_shuffle(u1, 2).unwrap();
        let cat1 = t2.concat_channels(&[u1, e1]).unwrap();
        let d1 = skip_pw1.apply(&mut t2, cat1).unwrap();
        let u0 = up_pw0.apply(&mut t2, d1).unwrap();
        let u0 = t2.pixel_shuffle(u0, 2).unwrap();
        let cat0 = t2.concat_channels(&[u0, e0]).unwrap();
        let d0 = skip_pw0.apply(&mut t2, cat0).unwrap();
        let expect = conv_out.apply(&mut t2, d0).unwrap();
        let err = tape
            .value(out)
            .iter()
            .zip(t2.value(expect))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "max abs err {err}");
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        // CSA, CB, CLFI, and the full PMM at [2,8,8], C0=4
        let mut rng = stream_rng(51, "grad", 0);
        let cb = CbParams::init(3, &mut rng);
        let x = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let weights = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let tensors: Vec<Tensor> = {
            let mut out = Vec::new();
            cb.collect_named("cb", &mut out);
            out.iter().map(|(_, t)| (*t).clone()).collect()
        };
        let loss_of = |ts: &[Tensor]| -> f64 {
            let mut p = cb.clone();
            let mut slot_list: Vec<&mut Tensor> = Vec::new();
            p.collect_mut(&mut slot_list);
            for (slot, t) in slot_list.into_iter().zip(ts) {
                *slot = t.clone();
            }
            let mut tape = Tape::new();
            let mut vars = Vec::new();
            let v = p.register(&mut tape, &mut vars);
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&weights);
            let out = cb_forward(&mut tape, xv, &v).unwrap();
            let wo = tape.mul(out, wv).unwrap();
            let loss = tape.sum(wo);
            tape.value(loss)[0]
        };
        // analytic grads once
        let analytic: Vec<Option<Vec<f64>>> = {
            let mut tape = Tape::new();
            let mut vars = Vec::new();
            let mut p = cb.clone();
            {
                let mut slot_list: Vec<&mut Tensor> = Vec::new();
                p.collect_mut(&mut slot_list);
                for (slot, t) in slot_list.into_iter().zip(&tensors) {
                    *slot = t.clone();
                    slot.requires_grad = true;
                }
            }
            let v = p.register(&mut tape, &mut vars);
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&weights);
            let out = cb_forward(&mut tape, xv, &v).unwrap();
            let wo = tape.mul(out, wv).unwrap();
            let loss = tape.sum(wo);
            tape.backward(loss).unwrap();
            vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect()
        };
        let (worst, valid) =
            fd_probe_guarded(&loss_of, &tensors, &analytic, 30, 1e-6, &mut rng);
        assert!(valid >= 20, "only {valid} smooth probes");
        assert!(worst <= 1e-4, "CB gradient rel err {worst}");
    }
}
