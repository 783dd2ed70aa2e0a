//! VAE whose latent is a subject residual plus a linear attribute term,
//! `z = r + W·a`. The decoder sees only `z`; `W` starts at zero.

use rand::Rng;

use crate::attributes::AttributeVector;
use crate::region::RegionId;
use crate::nn::{Graph, Linear, ParamId, ParamStore, Tensor, Var};

use super::checkpoint::TrainLog;
use super::nets::{attr_tensor, kl_standard, l1_to, reparameterize, soft_clamp_logvar, standard_normal, ImageDecoder, ImageEncoder};
use super::train::{adam, grad_step, run_phase, TrainSample};
use super::{volume_tensor, LatentPayload, ModelConfig, ModelError};

#[derive(Clone, Debug)]
pub struct GlmNet {
    enc: ImageEncoder,
    head: Linear,
    /// Attribute-to-latent map; its bias is pinned at zero.
    glm: Linear,
    dec: ImageDecoder,
    latent: usize,
}

impl GlmNet {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let l = cfg.latent_dim();
        let enc = ImageEncoder::new(store, "enc", cfg.resolution, &cfg.enc_channels, rng);
        let head = Linear::new(store, "enc.head", enc.feat_dim, 2 * l, rng);
        let glm = Linear::zeros(store, "glm", RegionId::COUNT, l);
        let dec = ImageDecoder::new(store, "dec", l, 0, cfg.resolution, &cfg.dec_channels, rng);
        GlmNet { enc, head, glm, dec, latent: l }
    }

    fn attr_term(&self, g: &mut Graph, attrs: &AttributeVector) -> Var {
        let a = g.input(attr_tensor(attrs));
        self.glm.forward(g, a)
    }

    /// Posterior over the residual: `(mu_total - W·a, logvar)`.
    fn posterior(&self, g: &mut Graph, x: &Tensor, attrs: &AttributeVector) -> (Var, Var, Var) {
        let xi = g.input(x.clone());
        let f = self.enc.forward(g, xi);
        let stats = self.head.forward(g, f);
        let mu = g.slice(stats, 0, self.latent);
        let lv = g.slice(stats, self.latent, self.latent);
        let lv = soft_clamp_logvar(g, lv);
        let wa = self.attr_term(g, attrs);
        let r = g.sub(mu, wa);
        (r, lv, wa)
    }

    pub fn encode(&self, p: &ParamStore, x: &Tensor, attrs: &AttributeVector) -> Result<LatentPayload, ModelError> {
        let mut g = Graph::new(p);
        let (r, _, _) = self.posterior(&mut g, x, attrs);
        Ok(LatentPayload::Vector(g.value(r).data.clone()))
    }

    pub fn decode(&self, p: &ParamStore, r: &[f32], attrs: &AttributeVector) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(p);
        let ri = g.input(Tensor::vector(r.to_vec()));
        let wa = self.attr_term(&mut g, attrs);
        let z = g.add(ri, wa);
        let y = self.dec.forward(&mut g, z, None);
        Ok(g.value(y).clone())
    }

    pub fn latent_len(&self) -> usize {
        self.latent
    }

    fn trainable(&self, store: &ParamStore) -> Vec<ParamId> {
        (0..store.len()).map(ParamId).filter(|&id| id != self.glm.b).collect()
    }
}

pub fn train(
    net: &GlmNet,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    data: &[TrainSample],
    log: &mut TrainLog,
) -> Result<(), ModelError> {
    let xs: Vec<Tensor> = data.iter().map(|s| volume_tensor(&s.volume)).collect();
    let mut opt = adam(cfg, store, net.trainable(store), cfg.train.epochs, data.len());
    let beta = cfg.train.kl_weight;
    run_phase(log, "vae_glm", &["loss", "recon_l1", "kl"], cfg.train.epochs, data.len(), cfg.train.batch, cfg.seed, |batch, seed| {
        grad_step(store, &mut opt, batch, seed, |p, i, rng| {
            let mut g = Graph::new(p);
            let (r, lv, wa) = net.posterior(&mut g, &xs[i], &data[i].attrs);
            let rs = reparameterize(&mut g, r, lv, Tensor::vector(standard_normal(net.latent, rng)));
            let z = g.add(rs, wa);
            let y = net.dec.forward(&mut g, z, None);
            let rec = l1_to(&mut g, y, &xs[i]);
            let kl = kl_standard(&mut g, r, lv);
            let klw = g.scale(kl, beta);
            let loss = g.add(rec, klw);
            let comps = vec![g.scalar(loss), g.scalar(rec), g.scalar(kl)];
            (g.backward(loss), comps)
        })
    })
}
