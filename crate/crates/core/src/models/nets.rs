//! Convolutional building blocks shared by the model families.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attributes::{fourier_embed, AttributeVector};
use crate::nn::layers::{conv_act, up_conv_act, LEAK};
use crate::nn::{Conv3d, Graph, Linear, ParamStore, Tensor, Var};

use super::ModelError;

/// Stride-2 convolution stack ending in a flat feature vector.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    convs: Vec<Conv3d>,
    pub feat_dim: usize,
}

impl ImageEncoder {
    /// One stride-2 stage per entry of `channels`; `res` must be divisible by `2^stages`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, res: usize, channels: &[usize], rng: &mut R) -> Self {
        let mut cin = 1;
        let mut convs = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv3d::new(store, &format!("{name}.conv{i}"), cin, c, 2, rng));
            cin = c;
        }
        let side = res >> channels.len();
        ImageEncoder { convs, feat_dim: cin * side * side * side }
    }

    /// Feature maps after every stage, finest first.
    pub fn stages(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = conv_act(g, c, h);
            out.push(h);
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = *self.stages(g, x).last().expect("at least one stage");
        g.reshape(h, vec![self.feat_dim])
    }
}

/// Dense projection to a coarse grid, upsampling convolutions up to half
/// resolution, then a linear head predicting the eight sub-voxels of every
/// cell. Outputs are clamped to `[0, 1]` only when turned into a volume, so
/// training never sees a saturated output gradient.
///
/// With `cond_dim > 0` a conditioning vector is also projected straight onto
/// the half-resolution grid and fused with the upsampled features before the
/// head.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    fc: Linear,
    ups: Vec<Conv3d>,
    cond: Option<(Linear, Conv3d)>,
    head: Conv3d,
    start: usize,
    c0: usize,
}

/// Channels of the projected conditioning map.
pub const COND_CHANNELS: usize = 4;

impl ImageDecoder {
    /// `channels[0]` is the width of the coarse grid; each further entry adds
    /// one ×2 upsampling stage, and the head adds the last ×2.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        cond_dim: usize,
        out_res: usize,
        channels: &[usize],
        rng: &mut R,
    ) -> Self {
        let stages = channels.len() - 1;
        let start = out_res >> (stages + 1);
        let c0 = channels[0];
        let last = channels[stages];
        let fc = Linear::new(store, &format!("{name}.fc"), in_dim, c0 * start * start * start, rng);
        let ups = (0..stages)
            .map(|i| Conv3d::new(store, &format!("{name}.up{i}"), channels[i], channels[i + 1], 1, rng))
            .collect();
        let cond = (cond_dim > 0).then(|| {
            let half = out_res / 2;
            let map = Linear::new(store, &format!("{name}.cond"), cond_dim, COND_CHANNELS * half * half * half, rng);
            let fuse = Conv3d::new(store, &format!("{name}.fuse"), last + COND_CHANNELS, last, 1, rng);
            (map, fuse)
        });
        let head = Conv3d::new(store, &format!("{name}.head"), last, 8, 1, rng);
        ImageDecoder { fc, ups, cond, head, start, c0 }
    }

    pub fn in_dim(&self) -> usize {
        self.fc.inp
    }

    /// `cond` must be given exactly when the decoder was built with `cond_dim > 0`.
    pub fn forward(&self, g: &mut Graph, h: Var, cond: Option<Var>) -> Var {
        let x = self.fc.forward(g, h);
        let x = g.leaky_relu(x, LEAK);
        let s = self.start;
        let mut x = g.reshape(x, vec![self.c0, s, s, s]);
        for up in &self.ups {
            x = up_conv_act(g, up, x);
        }
        if let Some((map, fuse)) = &self.cond {
            let c = cond.expect("conditioned decoder needs a conditioning vector");
            let shape = g.value(x).shape.clone();
            let m = map.forward(g, c);
            let m = g.reshape(m, vec![COND_CHANNELS, shape[1], shape[2], shape[3]]);
            let both = g.concat(&[x, m]);
            x = conv_act(g, fuse, both);
        }
        let h = self.head.forward(g, x);
        g.depth_to_space(h)
    }
}

/// Fourier embedding of normalized attributes as an f32 tensor.
pub fn embed(attrs: &AttributeVector, bands: usize) -> Result<Tensor, ModelError> {
    Ok(Tensor::vector(fourier_embed(attrs, bands)?.to_f32()))
}

/// Normalized attribute values as an f32 tensor.
pub fn attr_tensor(attrs: &AttributeVector) -> Tensor {
    Tensor::vector(attrs.as_f32().to_vec())
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Bounds log-variances to `[-6, 6]` smoothly.
pub fn soft_clamp_logvar(g: &mut Graph, lv: Var) -> Var {
    let t = g.scale(lv, 1.0 / 6.0);
    let t = g.tanh(t);
    g.scale(t, 6.0)
}

/// `mu + exp(lv / 2) · eps`.
pub fn reparameterize(g: &mut Graph, mu: Var, lv: Var, eps: Tensor) -> Var {
    let half = g.scale(lv, 0.5);
    let std = g.exp(half);
    let e = g.input(eps);
    let noise = g.mul(std, e);
    g.add(mu, noise)
}

/// KL divergence of `N(mu, exp(lv))` from the standard normal, summed.
pub fn kl_standard(g: &mut Graph, mu: Var, lv: Var) -> Var {
    let m2 = g.square(mu);
    let var = g.exp(lv);
    let t = g.add(m2, var);
    let t = g.sub(t, lv);
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    g.scale(s, 0.5)
}

/// Mean absolute difference against a constant target.
pub fn l1_to(g: &mut Graph, x: Var, target: &Tensor) -> Var {
    let t = g.input(target.clone());
    let d = g.sub(x, t);
    let a = g.abs(d);
    g.mean(a)
}

/// Mean squared difference against a constant target.
pub fn mse_to(g: &mut Graph, x: Var, target: &Tensor) -> Var {
    let t = g.input(target.clone());
    let d = g.sub(x, t);
    let s = g.square(d);
    g.mean(s)
}
