//! Two-level hierarchical VAE with spatial latents at quarter and half
//! resolution. The coarse posterior and the top-down path see the attributes
//! through a learned projection of their Fourier embedding onto the coarse grid.

use rand::Rng;

use crate::attributes::{embedding_len, AttributeVector};
use crate::nn::layers::{conv_act, up_conv_act};
use crate::nn::{Conv3d, Graph, Linear, ParamId, ParamStore, Tensor, Var};

use super::checkpoint::TrainLog;
use super::nets::{embed, kl_standard, l1_to, reparameterize, soft_clamp_logvar, standard_normal, ImageEncoder};
use super::train::{adam, grad_step, run_phase, TrainSample};
use super::{volume_tensor, LatentPayload, ModelConfig, ModelError};

/// Channels of the attribute map broadcast onto the coarse grid.
const ATTR_MAP_CHANNELS: usize = 2;

#[derive(Clone, Debug)]
pub struct HvaeNet {
    enc: ImageEncoder,
    attr_map: Linear,
    q1: Conv3d,
    top: Conv3d,
    mid: Conv3d,
    q2: Conv3d,
    fuse: Conv3d,
    out: Conv3d,
    k: [usize; 2],
    /// Edge lengths of the coarse and fine latent grids.
    side: [usize; 2],
    bands: usize,
}

impl HvaeNet {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let (c1, c2) = (cfg.enc_channels[0], cfg.enc_channels[1]);
        let k = [cfg.latent_dims[0], cfg.latent_dims[1]];
        let side = [cfg.resolution / 4, cfg.resolution / 2];
        let enc = ImageEncoder::new(store, "enc", cfg.resolution, &[c1, c2], rng);
        let cells = side[0] * side[0] * side[0];
        let attr_map = Linear::new(store, "attr_map", embedding_len(cfg.bands), ATTR_MAP_CHANNELS * cells, rng);
        let a = ATTR_MAP_CHANNELS;
        let q1 = Conv3d::new(store, "q1", c2 + a, 2 * k[0], 1, rng);
        let top = Conv3d::new(store, "dec.top", k[0] + a, c2, 1, rng);
        let mid = Conv3d::new(store, "dec.mid", c2, c1, 1, rng);
        let q2 = Conv3d::new(store, "q2", 2 * c1, 2 * k[1], 1, rng);
        let fuse = Conv3d::new(store, "dec.fuse", c1 + k[1], c1, 1, rng);
        let out = Conv3d::new(store, "dec.out", c1, 8, 1, rng);
        HvaeNet { enc, attr_map, q1, top, mid, q2, fuse, out, k, side, bands: cfg.bands }
    }

    fn amap(&self, g: &mut Graph, emb: &Tensor) -> Var {
        let e = g.input(emb.clone());
        let m = self.attr_map.forward(g, e);
        let s = self.side[0];
        g.reshape(m, vec![ATTR_MAP_CHANNELS, s, s, s])
    }

    fn split(&self, g: &mut Graph, stats: Var, k: usize) -> (Var, Var) {
        let mu = g.slice(stats, 0, k);
        let lv = g.slice(stats, k, k);
        (mu, soft_clamp_logvar(g, lv))
    }

    /// Coarse latent to the half-resolution decoder state.
    fn top_down(&self, g: &mut Graph, z1: Var, amap: Var) -> Var {
        let h = g.concat(&[z1, amap]);
        let h = conv_act(g, &self.top, h);
        up_conv_act(g, &self.mid, h)
    }

    fn render(&self, g: &mut Graph, d2: Var, z2: Var) -> Var {
        let h = g.concat(&[d2, z2]);
        let h = conv_act(g, &self.fuse, h);
        let h = self.out.forward(g, h);
        g.depth_to_space(h)
    }

    /// Bottom-up features `(half-res, quarter-res)`.
    fn features(&self, g: &mut Graph, x: &Tensor) -> (Var, Var) {
        let xi = g.input(x.clone());
        let st = self.enc.stages(g, xi);
        (st[0], st[1])
    }

    pub fn encode(&self, p: &ParamStore, x: &Tensor, attrs: &AttributeVector) -> Result<LatentPayload, ModelError> {
        let emb = embed(attrs, self.bands)?;
        let mut g = Graph::new(p);
        let (e2, e1) = self.features(&mut g, x);
        let amap = self.amap(&mut g, &emb);
        let h = g.concat(&[e1, amap]);
        let s1 = self.q1.forward(&mut g, h);
        let (mu1, _) = self.split(&mut g, s1, self.k[0]);
        let d2 = self.top_down(&mut g, mu1, amap);
        let h = g.concat(&[e2, d2]);
        let s2 = self.q2.forward(&mut g, h);
        let (mu2, _) = self.split(&mut g, s2, self.k[1]);
        Ok(LatentPayload::Levels(vec![g.value(mu1).clone(), g.value(mu2).clone()]))
    }

    pub fn decode(&self, p: &ParamStore, levels: &[Tensor], attrs: &AttributeVector) -> Result<Tensor, ModelError> {
        let emb = embed(attrs, self.bands)?;
        let mut g = Graph::new(p);
        let amap = self.amap(&mut g, &emb);
        let z1 = g.input(levels[0].clone());
        let z2 = g.input(levels[1].clone());
        let d2 = self.top_down(&mut g, z1, amap);
        let y = self.render(&mut g, d2, z2);
        Ok(g.value(y).clone())
    }

    /// Expected `[C, D, H, W]` shape of each latent level.
    pub fn level_shapes(&self) -> [Vec<usize>; 2] {
        let [s1, s2] = self.side;
        [vec![self.k[0], s1, s1, s1], vec![self.k[1], s2, s2, s2]]
    }
}

pub fn train(
    net: &HvaeNet,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    data: &[TrainSample],
    log: &mut TrainLog,
) -> Result<(), ModelError> {
    let xs: Vec<Tensor> = data.iter().map(|s| volume_tensor(&s.volume)).collect();
    let embs = data.iter().map(|s| embed(&s.attrs, cfg.bands)).collect::<Result<Vec<_>, _>>()?;
    let mut opt = adam(cfg, store, (0..store.len()).map(ParamId).collect(), cfg.train.epochs, data.len());
    let beta = cfg.train.kl_weight;
    let names = ["loss", "recon_l1", "kl_coarse", "kl_fine"];
    run_phase(log, "hvae", &names, cfg.train.epochs, data.len(), cfg.train.batch, cfg.seed, |batch, seed| {
        grad_step(store, &mut opt, batch, seed, |p, i, rng| {
            let [sh1, sh2] = net.level_shapes();
            let mut g = Graph::new(p);
            let (e2, e1) = net.features(&mut g, &xs[i]);
            let amap = net.amap(&mut g, &embs[i]);
            let h = g.concat(&[e1, amap]);
            let s1 = net.q1.forward(&mut g, h);
            let (mu1, lv1) = net.split(&mut g, s1, net.k[0]);
            let n1 = sh1.iter().product();
            let z1 = reparameterize(&mut g, mu1, lv1, Tensor::new(sh1, standard_normal(n1, rng)));
            let d2 = net.top_down(&mut g, z1, amap);
            let h = g.concat(&[e2, d2]);
            let s2 = net.q2.forward(&mut g, h);
            let (mu2, lv2) = net.split(&mut g, s2, net.k[1]);
            let n2 = sh2.iter().product();
            let z2 = reparameterize(&mut g, mu2, lv2, Tensor::new(sh2, standard_normal(n2, rng)));
            let y = net.render(&mut g, d2, z2);
            let rec = l1_to(&mut g, y, &xs[i]);
            let kl1 = kl_standard(&mut g, mu1, lv1);
            let kl2 = kl_standard(&mut g, mu2, lv2);
            let kl = g.add(kl1, kl2);
            let klw = g.scale(kl, beta);
            let loss = g.add(rec, klw);
            let comps = vec![g.scalar(loss), g.scalar(rec), g.scalar(kl1), g.scalar(kl2)];
            (g.backward(loss), comps)
        })
    })
}
