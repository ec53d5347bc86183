//! The invertible denoiser and its ablation baselines.
//!
//! The core stacks affine coupling blocks between a pixel unshuffle/shuffle
//! sandwich. Forward and inverse share parameters, so the inverse is exact by
//! construction for any parameter values; with zero-initialized projection
//! convs every block starts as the identity map.

pub mod checkpoint;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

const KERNEL: usize = 3;
const PAD: usize = 1;
/// Slope of the leaky ReLU inside dense blocks.
pub const LEAKY_ALPHA: f64 = 0.2;
/// Dense-block layers before the projection conv.
const DENSE_LAYERS: usize = 4;

/// Architecture selector for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Arch {
    /// Feed-forward baseline trained with the forward loss only.
    M1,
    /// Two independent feed-forward nets trained jointly with both losses.
    M2,
    /// The invertible model.
    M3,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M1" | "m1" => Ok(Arch::M1),
            "M2" | "m2" => Ok(Arch::M2),
            "M3" | "m3" => Ok(Arch::M3),
            other => Err(Error::InvalidArgument { detail: format!("unknown architecture {other:?} (expected M1, M2 or M3)") }),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::M1 => "M1",
            Arch::M2 => "M2",
            Arch::M3 => "M3",
        })
    }
}

/// Structural hyperparameters shared by all architectures.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Encoder output width C; the core runs at `C * r^2` channels.
    pub channels: usize,
    /// Number of coupling blocks.
    pub blocks: usize,
    /// Pixel unshuffle factor; 1 disables the sandwich.
    pub shuffle_r: usize,
    /// Soft clamp bound for the coupling scale exponent.
    pub s_max: f64,
    /// Dense-block growth rate.
    pub growth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { channels: 64, blocks: 12, shuffle_r: 2, s_max: 2.0, growth: 32 }
    }
}

impl ModelConfig {
    /// Channel count the coupling blocks operate at.
    pub fn core_channels(&self) -> usize {
        self.channels * self.shuffle_r * self.shuffle_r
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 || self.shuffle_r == 0 || self.growth == 0 {
            return Err(Error::ConfigInvalid { detail: "channels, blocks, shuffle_r and growth must be positive".into() });
        }
        if self.core_channels() % 2 != 0 {
            return Err(Error::ConfigInvalid {
                detail: format!("core channel count {} must be even for the coupling split", self.core_channels()),
            });
        }
        if self.s_max <= 0.0 {
            return Err(Error::ConfigInvalid { detail: "s_max must be positive".into() });
        }
        Ok(())
    }
}

// ── Parameter containers ────────────────────────────────────────────────

/// One conv layer's parameters.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    /// He initialization: std = sqrt(2 / fan_in).
    fn he(c_out: usize, c_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
        ConvParams {
            weight: Tensor::randn(vec![c_out, c_in, KERNEL, KERNEL], std, rng),
            bias: Tensor::zeros(vec![c_out]),
        }
    }

    fn zeroed(c_out: usize, c_in: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(vec![c_out, c_in, KERNEL, KERNEL]),
            bias: Tensor::zeros(vec![c_out]),
        }
    }

    fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Dense block: four growth layers, each consuming the concatenation of the
/// input and all previous outputs, then a linear projection conv.
#[derive(Clone, Debug)]
pub struct SubNet<T> {
    pub layers: Vec<ConvParams<T>>,
    pub proj: ConvParams<T>,
}

impl<T: Scalar> SubNet<T> {
    /// `zero_proj` starts the subnet as the constant-zero function, which is
    /// what makes a fresh coupling block the identity.
    fn new(in_ch: usize, out_ch: usize, growth: usize, zero_proj: bool, rng: &mut impl Rng) -> Self {
        let layers = (0..DENSE_LAYERS)
            .map(|j| ConvParams::he(growth, in_ch + growth * j, rng))
            .collect();
        let proj_in = in_ch + growth * DENSE_LAYERS;
        let proj = if zero_proj {
            ConvParams::zeroed(out_ch, proj_in)
        } else {
            ConvParams::he(out_ch, proj_in, rng)
        };
        SubNet { layers, proj }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvParams::num_params).sum::<usize>() + self.proj.num_params()
    }

    /// Closed-form parameter count, used for depth matching without building.
    pub fn param_count(in_ch: usize, out_ch: usize, growth: usize) -> usize {
        let kk = KERNEL * KERNEL;
        let mut total = 0;
        for j in 0..DENSE_LAYERS {
            total += (in_ch + growth * j) * growth * kk + growth;
        }
        total + (in_ch + growth * DENSE_LAYERS) * out_ch * kk + out_ch
    }
}

/// One invertible block: phi1 shifts the first half, phi2 scales and phi3
/// shifts the second half conditioned on the updated first half.
#[derive(Clone, Debug)]
pub struct CouplingBlock<T> {
    pub phi1: SubNet<T>,
    pub phi2: SubNet<T>,
    pub phi3: SubNet<T>,
    pub s_max: f64,
}

impl<T: Scalar> CouplingBlock<T> {
    fn new(half_ch: usize, growth: usize, s_max: f64, zero_proj: bool, rng: &mut impl Rng) -> Self {
        CouplingBlock {
            phi1: SubNet::new(half_ch, half_ch, growth, zero_proj, rng),
            phi2: SubNet::new(half_ch, half_ch, growth, zero_proj, rng),
            phi3: SubNet::new(half_ch, half_ch, growth, zero_proj, rng),
            s_max,
        }
    }
}

/// The invertible denoiser: two encoders, two decoders, one shared core.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    pub enc_y: ConvParams<T>,
    pub enc_x: ConvParams<T>,
    pub dec_y: ConvParams<T>,
    pub dec_x: ConvParams<T>,
    pub blocks: Vec<CouplingBlock<T>>,
    pub cfg: ModelConfig,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let half = cfg.core_channels() / 2;
        Ok(DenoiserModel {
            enc_y: ConvParams::he(c, 1, rng),
            enc_x: ConvParams::he(c, 1, rng),
            dec_y: ConvParams::he(1, c, rng),
            dec_x: ConvParams::he(1, c, rng),
            blocks: (0..cfg.blocks)
                .map(|_| CouplingBlock::new(half, cfg.growth, cfg.s_max, true, rng))
                .collect(),
            cfg,
        })
    }

    /// Give every projection conv random weights; roundtrip and gradient
    /// tests use this to leave the identity point.
    pub fn randomize_projections(&mut self, std: f64, rng: &mut impl Rng) {
        for b in &mut self.blocks {
            for phi in [&mut b.phi1, &mut b.phi2, &mut b.phi3] {
                let shape = phi.proj.weight.shape().to_vec();
                phi.proj.weight = Tensor::randn(shape, std, rng);
            }
        }
    }

    /// Closed-form total parameter count for a config.
    pub fn param_count(cfg: &ModelConfig) -> usize {
        let kk = KERNEL * KERNEL;
        let c = cfg.channels;
        let half = cfg.core_channels() / 2;
        let enc_dec = 2 * (c * kk + c) + 2 * (c * kk + 1);
        enc_dec + cfg.blocks * 3 * SubNet::<T>::param_count(half, half, cfg.growth)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Visit parameters in a fixed structural order with stable names.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f("enc_y.weight", &self.enc_y.weight);
        f("enc_y.bias", &self.enc_y.bias);
        f("enc_x.weight", &self.enc_x.weight);
        f("enc_x.bias", &self.enc_x.bias);
        f("dec_y.weight", &self.dec_y.weight);
        f("dec_y.bias", &self.dec_y.bias);
        f("dec_x.weight", &self.dec_x.weight);
        f("dec_x.bias", &self.dec_x.bias);
        for (i, b) in self.blocks.iter().enumerate() {
            for (phi_name, phi) in [("phi1", &b.phi1), ("phi2", &b.phi2), ("phi3", &b.phi3)] {
                for (j, l) in phi.layers.iter().enumerate() {
                    f(&format!("block{i:02}.{phi_name}.layer{j}.weight"), &l.weight);
                    f(&format!("block{i:02}.{phi_name}.layer{j}.bias"), &l.bias);
                }
                f(&format!("block{i:02}.{phi_name}.proj.weight"), &phi.proj.weight);
                f(&format!("block{i:02}.{phi_name}.proj.bias"), &phi.proj.bias);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f("enc_y.weight", &mut self.enc_y.weight);
        f("enc_y.bias", &mut self.enc_y.bias);
        f("enc_x.weight", &mut self.enc_x.weight);
        f("enc_x.bias", &mut self.enc_x.bias);
        f("dec_y.weight", &mut self.dec_y.weight);
        f("dec_y.bias", &mut self.dec_y.bias);
        f("dec_x.weight", &mut self.dec_x.weight);
        f("dec_x.bias", &mut self.dec_x.bias);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (phi_name, phi) in [("phi1", &mut b.phi1), ("phi2", &mut b.phi2), ("phi3", &mut b.phi3)] {
                for (j, l) in phi.layers.iter_mut().enumerate() {
                    f(&format!("block{i:02}.{phi_name}.layer{j}.weight"), &mut l.weight);
                    f(&format!("block{i:02}.{phi_name}.layer{j}.bias"), &mut l.bias);
                }
                f(&format!("block{i:02}.{phi_name}.proj.weight"), &mut phi.proj.weight);
                f(&format!("block{i:02}.{phi_name}.proj.bias"), &mut phi.proj.bias);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        let cast_conv = |c: &ConvParams<T>| ConvParams { weight: c.weight.cast(), bias: c.bias.cast() };
        let cast_subnet = |s: &SubNet<T>| SubNet {
            layers: s.layers.iter().map(cast_conv).collect(),
            proj: cast_conv(&s.proj),
        };
        DenoiserModel {
            enc_y: cast_conv(&self.enc_y),
            enc_x: cast_conv(&self.enc_x),
            dec_y: cast_conv(&self.dec_y),
            dec_x: cast_conv(&self.dec_x),
            blocks: self
                .blocks
                .iter()
                .map(|b| CouplingBlock {
                    phi1: cast_subnet(&b.phi1),
                    phi2: cast_subnet(&b.phi2),
                    phi3: cast_subnet(&b.phi3),
                    s_max: b.s_max,
                })
                .collect(),
            cfg: self.cfg.clone(),
        }
    }

    /// Insert all parameters into a graph. With `trainable`, leaves are
    /// marked `requires_grad` and `backward` reports their gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundDenoiser {
        let mut names = Vec::new();
        let mut ids = Vec::new();
        self.visit_params(&mut |name, t| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            names.push(name.to_string());
            ids.push(g.leaf(t));
        });
        // ids arrive in visit order: 8 enc/dec tensors, then per block
        // 3 subnets x (4 layers + proj) x (weight, bias).
        let mut cursor = ids.into_iter();
        let mut next_conv = || -> ConvIds {
            let w = cursor.next().expect("param cursor");
            let b = cursor.next().expect("param cursor");
            ConvIds { w, b }
        };
        let enc_y = next_conv();
        let enc_x = next_conv();
        let dec_y = next_conv();
        let dec_x = next_conv();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut subnet = || -> SubNetIds {
                let layers = (0..DENSE_LAYERS).map(|_| next_conv()).collect();
                SubNetIds { layers, proj: next_conv() }
            };
            blocks.push(CouplingIds {
                phi1: subnet(),
                phi2: subnet(),
                phi3: subnet(),
                s_max: block.s_max,
            });
        }
        BoundDenoiser { enc_y, enc_x, dec_y, dec_x, blocks, r: self.cfg.shuffle_r, param_names: names }
    }
}

// ── Graph-side handles ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Clone, Debug)]
pub struct SubNetIds {
    pub layers: Vec<ConvIds>,
    pub proj: ConvIds,
}

#[derive(Clone, Debug)]
pub struct CouplingIds {
    pub phi1: SubNetIds,
    pub phi2: SubNetIds,
    pub phi3: SubNetIds,
    pub s_max: f64,
}

fn conv_apply<T: Scalar>(g: &mut Graph<T>, ids: &ConvIds, x: NodeId) -> Result<NodeId> {
    g.conv2d(x, ids.w, ids.b, PAD)
}

/// Dense-block forward: leaky-ReLU growth layers on running concatenation,
/// linear projection at the end.
fn subnet_apply<T: Scalar>(g: &mut Graph<T>, ids: &SubNetIds, x: NodeId) -> Result<NodeId> {
    let mut feats = x;
    for layer in &ids.layers {
        let pre = conv_apply(g, layer, feats)?;
        let act = g.leaky_relu(pre, LEAKY_ALPHA)?;
        feats = g.channel_concat(feats, act)?;
    }
    conv_apply(g, &ids.proj, feats)
}

/// Soft clamp `s_max * tanh(x / s_max)`: zero at zero, bounded by `s_max`.
fn soft_clamp<T: Scalar>(g: &mut Graph<T>, x: NodeId, s_max: f64) -> Result<NodeId> {
    let inner = g.scale(x, 1.0 / s_max)?;
    let t = g.tanh(inner)?;
    g.scale(t, s_max)
}

/// Coupling forward with arbitrary phi functions:
/// `n1 = m1 + phi1(m2); n2 = m2 * exp(sigma(phi2(n1))) + phi3(n1)`.
pub fn coupling_forward_with<T: Scalar>(
    g: &mut Graph<T>,
    m: NodeId,
    s_max: f64,
    phi1: &dyn Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
    phi2: &dyn Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
    phi3: &dyn Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let (m1, m2) = g.channel_split(m)?;
    let shift1 = phi1(g, m2)?;
    let n1 = g.add(m1, shift1)?;
    let raw_scale = phi2(g, n1)?;
    let s = soft_clamp(g, raw_scale, s_max)?;
    let e = g.exp(s)?;
    let scaled = g.mul(m2, e)?;
    let shift2 = phi3(g, n1)?;
    let n2 = g.add(scaled, shift2)?;
    g.channel_concat(n1, n2)
}

/// Exact inverse of [`coupling_forward_with`]:
/// `m2 = (n2 - phi3(n1)) * exp(-sigma(phi2(n1))); m1 = n1 - phi1(m2)`.
pub fn coupling_inverse_with<T: Scalar>(
    g: &mut Graph<T>,
    n: NodeId,
    s_max: f64,
    phi1: &dyn Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
    phi2: &dyn Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
    phi3: &dyn Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let (n1, n2) = g.channel_split(n)?;
    let shift2 = phi3(g, n1)?;
    let centered = g.sub(n2, shift2)?;
    let raw_scale = phi2(g, n1)?;
    let s = soft_clamp(g, raw_scale, s_max)?;
    let neg_s = g.scale(s, -1.0)?;
    let e = g.exp(neg_s)?;
    let m2 = g.mul(centered, e)?;
    let shift1 = phi1(g, m2)?;
    let m1 = g.sub(n1, shift1)?;
    g.channel_concat(m1, m2)
}

impl CouplingIds {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, m: NodeId) -> Result<NodeId> {
        coupling_forward_with(
            g,
            m,
            self.s_max,
            &|g, x| subnet_apply(g, &self.phi1, x),
            &|g, x| subnet_apply(g, &self.phi2, x),
            &|g, x| subnet_apply(g, &self.phi3, x),
        )
    }

    pub fn inverse<T: Scalar>(&self, g: &mut Graph<T>, n: NodeId) -> Result<NodeId> {
        coupling_inverse_with(
            g,
            n,
            self.s_max,
            &|g, x| subnet_apply(g, &self.phi1, x),
            &|g, x| subnet_apply(g, &self.phi2, x),
            &|g, x| subnet_apply(g, &self.phi3, x),
        )
    }
}

/// A model's parameters inserted into one graph, ready to run.
pub struct BoundDenoiser {
    pub enc_y: ConvIds,
    pub enc_x: ConvIds,
    pub dec_y: ConvIds,
    pub dec_x: ConvIds,
    pub blocks: Vec<CouplingIds>,
    r: usize,
    param_names: Vec<String>,
}

impl BoundDenoiser {
    /// `(name, id)` pairs in the model's structural order.
    pub fn param_ids(&self) -> Vec<(String, NodeId)> {
        let mut ids = Vec::new();
        let mut push = |c: &ConvIds| {
            ids.push(c.w);
            ids.push(c.b);
        };
        push(&self.enc_y);
        push(&self.enc_x);
        push(&self.dec_y);
        push(&self.dec_x);
        for b in &self.blocks {
            for phi in [&b.phi1, &b.phi2, &b.phi3] {
                for l in &phi.layers {
                    push(l);
                }
                push(&phi.proj);
            }
        }
        self.param_names.iter().cloned().zip(ids).collect()
    }

    /// Blocks in order between the unshuffle/shuffle sandwich.
    pub fn core_forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let mut u = if self.r > 1 { g.pixel_unshuffle(x, self.r)? } else { x };
        for b in &self.blocks {
            u = b.forward(g, u)?;
        }
        if self.r > 1 {
            u = g.pixel_shuffle(u, self.r)?;
        }
        Ok(u)
    }

    /// Exact block inverses in reverse order; same parameters as the forward.
    pub fn core_inverse<T: Scalar>(&self, g: &mut Graph<T>, y: NodeId) -> Result<NodeId> {
        let mut u = if self.r > 1 { g.pixel_unshuffle(y, self.r)? } else { y };
        for b in self.blocks.iter().rev() {
            u = b.inverse(g, u)?;
        }
        if self.r > 1 {
            u = g.pixel_shuffle(u, self.r)?;
        }
        Ok(u)
    }

    /// Denoising path: `dec_y(core(enc_y(y)))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, y: NodeId) -> Result<NodeId> {
        let f = conv_apply(g, &self.enc_y, y)?;
        let c = self.core_forward(g, f)?;
        conv_apply(g, &self.dec_y, c)
    }

    /// Reverse path: `dec_x(core_inverse(enc_x(x_hat)))`.
    pub fn reverse<T: Scalar>(&self, g: &mut Graph<T>, x_hat: NodeId) -> Result<NodeId> {
        let f = conv_apply(g, &self.enc_x, x_hat)?;
        let c = self.core_inverse(g, f)?;
        conv_apply(g, &self.dec_x, c)
    }
}

// ── Baselines ───────────────────────────────────────────────────────────

/// Non-invertible baseline: same encoder/sandwich, a residual trunk of dense
/// blocks instead of coupling blocks. Depth is chosen so the parameter count
/// matches a reference within 10%, asserted at construction.
#[derive(Clone, Debug)]
pub struct BaselineModel<T> {
    pub enc: ConvParams<T>,
    pub dec: ConvParams<T>,
    pub trunk: Vec<SubNet<T>>,
    pub cfg: ModelConfig,
}

impl<T: Scalar> BaselineModel<T> {
    /// Build with depth matched to `target_params` within 10%.
    pub fn matched(cfg: &ModelConfig, target_params: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let core = cfg.core_channels();
        let kk = KERNEL * KERNEL;
        let enc_dec = c * kk + c + c * kk + 1;
        let per_block = SubNet::<T>::param_count(core, core, cfg.growth);
        let depth = (((target_params.saturating_sub(enc_dec)) as f64 / per_block as f64).round() as usize).max(1);
        let total = enc_dec + depth * per_block;
        let rel = (total as f64 - target_params as f64).abs() / target_params as f64;
        if rel > 0.10 {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "baseline cannot match {target_params} parameters within 10%: best is {total} ({:.1}% off)",
                    rel * 100.0
                ),
            });
        }
        Ok(BaselineModel {
            enc: ConvParams::he(c, 1, rng),
            dec: ConvParams::he(1, c, rng),
            trunk: (0..depth).map(|_| SubNet::new(core, core, cfg.growth, true, rng)).collect(),
            cfg: cfg.clone(),
        })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f("enc.weight", &self.enc.weight);
        f("enc.bias", &self.enc.bias);
        f("dec.weight", &self.dec.weight);
        f("dec.bias", &self.dec.bias);
        for (i, s) in self.trunk.iter().enumerate() {
            for (j, l) in s.layers.iter().enumerate() {
                f(&format!("dense{i:02}.layer{j}.weight"), &l.weight);
                f(&format!("dense{i:02}.layer{j}.bias"), &l.bias);
            }
            f(&format!("dense{i:02}.proj.weight"), &s.proj.weight);
            f(&format!("dense{i:02}.proj.bias"), &s.proj.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f("enc.weight", &mut self.enc.weight);
        f("enc.bias", &mut self.enc.bias);
        f("dec.weight", &mut self.dec.weight);
        f("dec.bias", &mut self.dec.bias);
        for (i, s) in self.trunk.iter_mut().enumerate() {
            for (j, l) in s.layers.iter_mut().enumerate() {
                f(&format!("dense{i:02}.layer{j}.weight"), &mut l.weight);
                f(&format!("dense{i:02}.layer{j}.bias"), &mut l.bias);
            }
            f(&format!("dense{i:02}.proj.weight"), &mut s.proj.weight);
            f(&format!("dense{i:02}.proj.bias"), &mut s.proj.bias);
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundBaseline {
        let mut names = Vec::new();
        let mut ids = Vec::new();
        self.visit_params(&mut |name, t| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            names.push(name.to_string());
            ids.push(g.leaf(t));
        });
        let mut cursor = ids.into_iter();
        let mut next_conv = || -> ConvIds {
            let w = cursor.next().expect("param cursor");
            let b = cursor.next().expect("param cursor");
            ConvIds { w, b }
        };
        let enc = next_conv();
        let dec = next_conv();
        let trunk = (0..self.trunk.len())
            .map(|_| {
                let layers = (0..DENSE_LAYERS).map(|_| next_conv()).collect();
                SubNetIds { layers, proj: next_conv() }
            })
            .collect();
        BoundBaseline { enc, dec, trunk, r: self.cfg.shuffle_r, param_names: names }
    }
}

pub struct BoundBaseline {
    pub enc: ConvIds,
    pub dec: ConvIds,
    pub trunk: Vec<SubNetIds>,
    r: usize,
    param_names: Vec<String>,
}

impl BoundBaseline {
    pub fn param_ids(&self) -> Vec<(String, NodeId)> {
        let mut ids = Vec::new();
        let mut push = |c: &ConvIds| {
            ids.push(c.w);
            ids.push(c.b);
        };
        push(&self.enc);
        push(&self.dec);
        for s in &self.trunk {
            for l in &s.layers {
                push(l);
            }
            push(&s.proj);
        }
        self.param_names.iter().cloned().zip(ids).collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, y: NodeId) -> Result<NodeId> {
        let f = conv_apply(g, &self.enc, y)?;
        let mut u = if self.r > 1 { g.pixel_unshuffle(f, self.r)? } else { f };
        for s in &self.trunk {
            let d = subnet_apply(g, s, u)?;
            u = g.add(u, d)?;
        }
        if self.r > 1 {
            u = g.pixel_shuffle(u, self.r)?;
        }
        conv_apply(g, &self.dec, u)
    }
}

// ── Bundles ─────────────────────────────────────────────────────────────

/// A constructed architecture ready for training or inference.
#[derive(Clone, Debug)]
pub enum ModelBundle<T> {
    M1(BaselineModel<T>),
    M2 { fwd: BaselineModel<T>, rev: BaselineModel<T> },
    M3(DenoiserModel<T>),
}

impl<T: Scalar> ModelBundle<T> {
    pub fn arch(&self) -> Arch {
        match self {
            ModelBundle::M1(_) => Arch::M1,
            ModelBundle::M2 { .. } => Arch::M2,
            ModelBundle::M3(_) => Arch::M3,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            ModelBundle::M1(m) => &m.cfg,
            ModelBundle::M2 { fwd, .. } => &fwd.cfg,
            ModelBundle::M3(m) => &m.cfg,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ModelBundle::M1(m) => m.num_params(),
            ModelBundle::M2 { fwd, rev } => fwd.num_params() + rev.num_params(),
            ModelBundle::M3(m) => m.num_params(),
        }
    }

    /// M2 prefixes its two nets with `f.` / `r.`; M1 and M3 use bare names.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        match self {
            ModelBundle::M1(m) => m.visit_params(f),
            ModelBundle::M2 { fwd, rev } => {
                fwd.visit_params(&mut |name, t| f(&format!("f.{name}"), t));
                rev.visit_params(&mut |name, t| f(&format!("r.{name}"), t));
            }
            ModelBundle::M3(m) => m.visit_params(f),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        match self {
            ModelBundle::M1(m) => m.visit_params_mut(f),
            ModelBundle::M2 { fwd, rev } => {
                fwd.visit_params_mut(&mut |name, t| f(&format!("f.{name}"), t));
                rev.visit_params_mut(&mut |name, t| f(&format!("r.{name}"), t));
            }
            ModelBundle::M3(m) => m.visit_params_mut(f),
        }
    }

    /// The network used at test time: M3's forward path, M1's single net,
    /// M2's forward net.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = g.leaf(input.clone());
        let out = match self {
            ModelBundle::M1(m) => {
                let bound = m.bind(&mut g, false);
                bound.forward(&mut g, y)?
            }
            ModelBundle::M2 { fwd, .. } => {
                let bound = fwd.bind(&mut g, false);
                bound.forward(&mut g, y)?
            }
            ModelBundle::M3(m) => {
                let bound = m.bind(&mut g, false);
                bound.forward(&mut g, y)?
            }
        };
        Ok(g.detach(out))
    }
}

/// Construct an architecture. M1/M2 baselines are parameter-matched to the
/// M3 these hyperparameters would produce; M2 returns two independent nets.
pub fn build_model<T: Scalar>(arch: Arch, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ModelBundle<T>> {
    cfg.validate()?;
    let target = DenoiserModel::<T>::param_count(cfg);
    match arch {
        Arch::M3 => Ok(ModelBundle::M3(DenoiserModel::new(cfg.clone(), rng)?)),
        Arch::M1 => Ok(ModelBundle::M1(BaselineModel::matched(cfg, target, rng)?)),
        Arch::M2 => {
            let fwd = BaselineModel::matched(cfg, target, rng)?;
            let rev = BaselineModel::matched(cfg, target, rng)?;
            Ok(ModelBundle::M2 { fwd, rev })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { channels: 4, blocks: 2, shuffle_r: 2, s_max: 2.0, growth: 8 }
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn zero_init_coupling_is_exact_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let model = DenoiserModel::<f32>::new(tiny_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        let xid = g.leaf(x.clone());
        let y = bound.core_forward(&mut g, xid).unwrap();
        assert_eq!(g.value(y).data(), x.data(), "zero-init core must be the identity, exactly");
    }

    #[test]
    fn coupling_stub_hand_example() {
        // phi1(x) = x, phi2 = 0, phi3(x) = x on (m1, m2) = (1, 2):
        // n1 = 1 + 2 = 3; n2 = 2 * exp(0) + 3 = 5. Inverse recovers (1, 2).
        let ident = |_g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> { Ok(x) };
        let zero = |g: &mut Graph<f64>, x: NodeId| -> Result<NodeId> {
            let z = g.scale(x, 0.0)?;
            Ok(z)
        };
        let mut g = Graph::new();
        let m = g.leaf(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
        let n = coupling_forward_with(&mut g, m, 2.0, &ident, &zero, &ident).unwrap();
        assert_eq!(g.value(n).data(), &[3.0, 5.0]);
        let back = coupling_inverse_with(&mut g, n, 2.0, &ident, &zero, &ident).unwrap();
        assert_eq!(g.value(back).data(), &[1.0, 2.0]);
    }

    #[test]
    fn random_coupling_roundtrip_f32() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut model = DenoiserModel::<f32>::new(tiny_cfg(), &mut rng).unwrap();
        model.randomize_projections(0.05, &mut rng);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        let xid = g.leaf(x.clone());
        let y = bound.core_forward(&mut g, xid).unwrap();
        let back = bound.core_inverse(&mut g, y).unwrap();
        let err = max_abs_diff(g.value(back).data(), x.data());
        assert!(err <= 1e-4, "roundtrip error {err}");
    }

    #[test]
    fn roundtrip_f64_is_tight() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut model = DenoiserModel::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        model.randomize_projections(0.05, &mut rng);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = Tensor::<f64>::randn(vec![1, 4, 8, 8], 1.0, &mut rng);
        let xid = g.leaf(x.clone());
        let y = bound.core_forward(&mut g, xid).unwrap();
        let back = bound.core_inverse(&mut g, y).unwrap();
        let err = g
            .value(back)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "f64 roundtrip error {err}");
    }

    #[test]
    fn wrong_block_order_breaks_roundtrip() {
        // Negative control: applying inverses in forward order must not
        // reconstruct the input once blocks differ.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut model = DenoiserModel::<f32>::new(tiny_cfg(), &mut rng).unwrap();
        model.randomize_projections(0.35, &mut rng);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut rng);
        let xid = g.leaf(x.clone());
        let y = bound.core_forward(&mut g, xid).unwrap();

        let mut u = g.pixel_unshuffle(y, 2).unwrap();
        for b in bound.blocks.iter() {
            // wrong order: not reversed
            u = b.inverse(&mut g, u).unwrap();
        }
        let back = g.pixel_shuffle(u, 2).unwrap();
        let err = max_abs_diff(g.value(back).data(), x.data());
        assert!(err > 1e-2, "wrong-order roundtrip should diverge, got {err}");
    }

    #[test]
    fn model_forward_preserves_shape_and_is_finite() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let model = DenoiserModel::<f32>::new(tiny_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let y = Tensor::randn(vec![4, 1, 32, 32], 0.3, &mut rng);
        let yid = g.leaf(y);
        let xhat = bound.forward(&mut g, yid).unwrap();
        assert_eq!(g.value(xhat).shape(), [4, 1, 32, 32]);
        assert!(g.value(xhat).is_all_finite());
        let yhat = bound.reverse(&mut g, xhat).unwrap();
        assert_eq!(g.value(yhat).shape(), [4, 1, 32, 32]);
    }

    #[test]
    fn parameter_sharing_links_forward_and_inverse() {
        // Mutating one coupling weight must change both directions.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut model = DenoiserModel::<f32>::new(tiny_cfg(), &mut rng).unwrap();
        model.randomize_projections(0.05, &mut rng);
        let x = Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut rng);

        let run = |m: &DenoiserModel<f32>| -> (Vec<f32>, Vec<f32>) {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let xid = g.leaf(x.clone());
            let f = b.core_forward(&mut g, xid).unwrap();
            let xid2 = g.leaf(x.clone());
            let i = b.core_inverse(&mut g, xid2).unwrap();
            (g.value(f).data().to_vec(), g.value(i).data().to_vec())
        };
        let (f0, i0) = run(&model);
        model.blocks[1].phi2.proj.weight.data_mut()[0] += 0.5;
        let (f1, i1) = run(&model);
        assert!(max_abs_diff(&f0, &f1) > 0.0, "forward unaffected by weight change");
        assert!(max_abs_diff(&i0, &i1) > 0.0, "inverse unaffected by weight change");
    }

    #[test]
    fn build_model_param_counts_match_within_ten_percent() {
        let cfg = ModelConfig { channels: 8, blocks: 4, shuffle_r: 2, s_max: 2.0, growth: 16 };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let m3 = build_model::<f32>(Arch::M3, &cfg, &mut rng).unwrap();
        let m1 = build_model::<f32>(Arch::M1, &cfg, &mut rng).unwrap();
        let m2 = build_model::<f32>(Arch::M2, &cfg, &mut rng).unwrap();
        let target = m3.num_params() as f64;
        assert_eq!(m3.num_params(), DenoiserModel::<f32>::param_count(&cfg));
        let m1_rel = (m1.num_params() as f64 - target).abs() / target;
        assert!(m1_rel <= 0.10, "M1 off by {:.1}%", m1_rel * 100.0);
        match &m2 {
            ModelBundle::M2 { fwd, rev } => {
                let rel = (fwd.num_params() as f64 - target).abs() / target;
                assert!(rel <= 0.10, "M2 half off by {:.1}%", rel * 100.0);
                // independent parameter sets, not views of each other
                let mut first_f = None;
                fwd.visit_params(&mut |name, t| {
                    if name == "enc.weight" {
                        first_f = Some(t.data().to_vec());
                    }
                });
                let mut first_r = None;
                rev.visit_params(&mut |name, t| {
                    if name == "enc.weight" {
                        first_r = Some(t.data().to_vec());
                    }
                });
                assert_ne!(first_f.unwrap(), first_r.unwrap(), "M2 nets must not share parameters");
            }
            _ => panic!("expected M2 bundle"),
        }
    }

    #[test]
    fn baseline_forward_shape() {
        // Enough blocks that depth rounding can match the parameter count.
        let cfg = ModelConfig { channels: 4, blocks: 4, shuffle_r: 2, s_max: 2.0, growth: 8 };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let target = DenoiserModel::<f32>::param_count(&cfg);
        let m = BaselineModel::<f32>::matched(&cfg, target, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let y = Tensor::randn(vec![2, 1, 16, 16], 0.3, &mut rng);
        let yid = g.leaf(y);
        let out = b.forward(&mut g, yid).unwrap();
        assert_eq!(g.value(out).shape(), [2, 1, 16, 16]);
    }
}
