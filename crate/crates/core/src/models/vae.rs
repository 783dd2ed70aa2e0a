//! Conditional VAE with a single latent vector; attributes enter the encoder
//! head and the decoder input through the Fourier embedding.

use rand::Rng;

use crate::attributes::{embedding_len, AttributeVector};
use crate::nn::{Graph, Linear, ParamStore, Tensor};

use super::checkpoint::TrainLog;
use super::nets::{embed, kl_standard, l1_to, reparameterize, soft_clamp_logvar, standard_normal, ImageDecoder, ImageEncoder};
use super::train::{adam, grad_step, run_phase, TrainSample};
use super::{volume_tensor, LatentPayload, ModelConfig, ModelError};

#[derive(Clone, Debug)]
pub struct VaeNet {
    enc: ImageEncoder,
    head: Linear,
    dec: ImageDecoder,
    latent: usize,
    bands: usize,
}

impl VaeNet {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let e = embedding_len(cfg.bands);
        let l = cfg.latent_dim();
        let enc = ImageEncoder::new(store, "enc", cfg.resolution, &cfg.enc_channels, rng);
        let head = Linear::new(store, "enc.head", enc.feat_dim + e, 2 * l, rng);
        let dec = ImageDecoder::new(store, "dec", l + e, e, cfg.resolution, &cfg.dec_channels, rng);
        VaeNet { enc, head, dec, latent: l, bands: cfg.bands }
    }

    fn posterior(&self, g: &mut Graph, x: &Tensor, emb: &Tensor) -> (crate::nn::Var, crate::nn::Var) {
        let xi = g.input(x.clone());
        let f = self.enc.forward(g, xi);
        let e = g.input(emb.clone());
        let h = g.concat(&[f, e]);
        let stats = self.head.forward(g, h);
        let mu = g.slice(stats, 0, self.latent);
        let lv = g.slice(stats, self.latent, self.latent);
        (mu, soft_clamp_logvar(g, lv))
    }

    pub fn encode(&self, p: &ParamStore, x: &Tensor, attrs: &AttributeVector) -> Result<LatentPayload, ModelError> {
        let emb = embed(attrs, self.bands)?;
        let mut g = Graph::new(p);
        let (mu, _) = self.posterior(&mut g, x, &emb);
        Ok(LatentPayload::Vector(g.value(mu).data.clone()))
    }

    pub fn decode(&self, p: &ParamStore, z: &[f32], attrs: &AttributeVector) -> Result<Tensor, ModelError> {
        let emb = embed(attrs, self.bands)?;
        let mut g = Graph::new(p);
        let zi = g.input(Tensor::vector(z.to_vec()));
        let e = g.input(emb);
        let h = g.concat(&[zi, e]);
        let y = self.dec.forward(&mut g, h, Some(e));
        Ok(g.value(y).clone())
    }

    pub fn latent_len(&self) -> usize {
        self.latent
    }
}

pub fn train(
    net: &VaeNet,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    data: &[TrainSample],
    log: &mut TrainLog,
) -> Result<(), ModelError> {
    let xs: Vec<Tensor> = data.iter().map(|s| volume_tensor(&s.volume)).collect();
    let embs = data.iter().map(|s| embed(&s.attrs, cfg.bands)).collect::<Result<Vec<_>, _>>()?;
    let mut opt = adam(cfg, store, (0..store.len()).map(crate::nn::ParamId).collect(), cfg.train.epochs, data.len());
    let beta = cfg.train.kl_weight;
    run_phase(log, "vae", &["loss", "recon_l1", "kl"], cfg.train.epochs, data.len(), cfg.train.batch, cfg.seed, |batch, seed| {
        grad_step(store, &mut opt, batch, seed, |p, i, rng| {
            let mut g = Graph::new(p);
            let (mu, lv) = net.posterior(&mut g, &xs[i], &embs[i]);
            let z = reparameterize(&mut g, mu, lv, Tensor::vector(standard_normal(net.latent, rng)));
            let e = g.input(embs[i].clone());
            let h = g.concat(&[z, e]);
            let y = net.dec.forward(&mut g, h, Some(e));
            let rec = l1_to(&mut g, y, &xs[i]);
            let kl = kl_standard(&mut g, mu, lv);
            let klw = g.scale(kl, beta);
            let loss = g.add(rec, klw);
            let comps = vec![g.scalar(loss), g.scalar(rec), g.scalar(kl)];
            (g.backward(loss), comps)
        })
    })
}
