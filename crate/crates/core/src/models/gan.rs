//! Conditional GAN with an auxiliary attribute-regression head on the
//! discriminator. The encoder first trains jointly with the generator on a
//! reconstruction term, then is refitted against the frozen generator by
//! latent regression on generated samples. `finetune` adds the cyclic
//! image-space cost.

use rand::Rng;

use crate::attributes::{embedding_len, AttributeVector};
use crate::nn::layers::LEAK;
use crate::nn::{Adam, AdamConfig, Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::region::RegionId;

use super::checkpoint::TrainLog;
use super::nets::{attr_tensor, embed, l1_to, mse_to, standard_normal, ImageDecoder, ImageEncoder};
use super::train::{adam_config, grad_step, run_phase, TrainSample};
use super::{volume_tensor, LatentPayload, ModelConfig, ModelError};

/// Width of the discriminator's hidden layer.
const DISC_HIDDEN: usize = 64;

fn ids_between(from: usize, to: usize) -> Vec<ParamId> {
    (from..to).map(ParamId).collect()
}

pub(crate) fn gan_adam(cfg: &ModelConfig, store: &ParamStore, ids: Vec<ParamId>, n: usize) -> Adam {
    Adam::new(AdamConfig { beta1: 0.5, ..adam_config(cfg, cfg.train.epochs, n) }, store, ids)
}

/// Real/fake logit conditioned on the embedding, plus an attribute regressor
/// that sees only the image.
#[derive(Clone, Debug)]
pub struct Discriminator {
    trunk: ImageEncoder,
    hidden: Linear,
    real: Linear,
    attr: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, res: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let trunk = ImageEncoder::new(store, "disc", res, &cfg.enc_channels, rng);
        let hidden = Linear::new(store, "disc.hidden", trunk.feat_dim, DISC_HIDDEN, rng);
        let real = Linear::new(store, "disc.real", DISC_HIDDEN + embedding_len(cfg.bands), 1, rng);
        let attr = Linear::new(store, "disc.attr", DISC_HIDDEN, RegionId::COUNT, rng);
        Discriminator { trunk, hidden, real, attr }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, emb: &Tensor) -> (Var, Var) {
        let f = self.trunk.forward(g, x);
        let h = self.hidden.forward(g, f);
        let h = g.leaky_relu(h, LEAK);
        let e = g.input(emb.clone());
        let he = g.concat(&[h, e]);
        (self.real.forward(g, he), self.attr.forward(g, h))
    }
}

/// Image + embedding to a latent vector.
#[derive(Clone, Debug)]
pub struct LatentEncoder {
    trunk: ImageEncoder,
    head: Linear,
}

impl LatentEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let trunk = ImageEncoder::new(store, "enc", cfg.resolution, &cfg.enc_channels, rng);
        let head = Linear::new(store, "enc.head", trunk.feat_dim + embedding_len(cfg.bands), cfg.latent_dim(), rng);
        LatentEncoder { trunk, head }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, emb: &Tensor) -> Var {
        let f = self.trunk.forward(g, x);
        let e = g.input(emb.clone());
        let h = g.concat(&[f, e]);
        self.head.forward(g, h)
    }

    pub fn infer(&self, p: &ParamStore, x: &Tensor, emb: &Tensor) -> Vec<f32> {
        let mut g = Graph::new(p);
        let xi = g.input(x.clone());
        let z = self.forward(&mut g, xi, emb);
        g.value(z).data.clone()
    }
}

/// `G(z ⊕ emb)` inside an existing graph.
pub(crate) fn generate(g: &mut Graph, gen: &ImageDecoder, z: Var, emb: &Tensor) -> Var {
    let e = g.input(emb.clone());
    let h = g.concat(&[z, e]);
    gen.forward(g, h, Some(e))
}

#[derive(Clone, Debug)]
pub struct GanNet {
    pub(crate) gen: ImageDecoder,
    pub(crate) disc: Discriminator,
    pub(crate) enc: LatentEncoder,
    gen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
    enc_ids: Vec<ParamId>,
    latent: usize,
    bands: usize,
}

impl GanNet {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let l = cfg.latent_dim();
        let s0 = store.len();
        let gen = ImageDecoder::new(store, "gen", l + embedding_len(cfg.bands), embedding_len(cfg.bands), cfg.resolution, &cfg.dec_channels, rng);
        let s1 = store.len();
        let disc = Discriminator::new(store, cfg.resolution, cfg, rng);
        let s2 = store.len();
        let enc = LatentEncoder::new(store, cfg, rng);
        let s3 = store.len();
        GanNet {
            gen,
            disc,
            enc,
            gen_ids: ids_between(s0, s1),
            disc_ids: ids_between(s1, s2),
            enc_ids: ids_between(s2, s3),
            latent: l,
            bands: cfg.bands,
        }
    }

    pub fn encode(&self, p: &ParamStore, x: &Tensor, attrs: &AttributeVector) -> Result<LatentPayload, ModelError> {
        let emb = embed(attrs, self.bands)?;
        Ok(LatentPayload::Vector(self.enc.infer(p, x, &emb)))
    }

    pub fn decode(&self, p: &ParamStore, z: &[f32], attrs: &AttributeVector) -> Result<Tensor, ModelError> {
        let emb = embed(attrs, self.bands)?;
        let mut g = Graph::new(p);
        let zi = g.input(Tensor::vector(z.to_vec()));
        let y = generate(&mut g, &self.gen, zi, &emb);
        Ok(g.value(y).clone())
    }

    pub fn latent_len(&self) -> usize {
        self.latent
    }
}

/// Encoder trained jointly with the generator on `|G(E(x, a), a) - x|`.
pub(crate) struct JointEncoder<'a> {
    pub enc: &'a LatentEncoder,
    pub ids: Vec<ParamId>,
    /// Encoder inputs, one per sample; the targets are the phase's `xs`.
    pub inputs: &'a [Tensor],
}

/// Shared adversarial phase: `xs` are real images at the generator's output
/// resolution. With `recon_weight > 0` the encoder joins the generator's
/// optimizer through the reconstruction term.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_adversarial(
    phase: &str,
    gen: &ImageDecoder,
    disc: &Discriminator,
    gen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
    latent: usize,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    xs: &[Tensor],
    joint: JointEncoder<'_>,
    data: &[TrainSample],
    log: &mut TrainLog,
) -> Result<(), ModelError> {
    let embs = data.iter().map(|s| embed(&s.attrs, cfg.bands)).collect::<Result<Vec<_>, _>>()?;
    let attrs: Vec<Tensor> = data.iter().map(|s| attr_tensor(&s.attrs)).collect();
    let rw = cfg.train.recon_weight;
    let mut opt_d = gan_adam(cfg, store, disc_ids, data.len());
    let g_ids = if rw > 0.0 { gen_ids.into_iter().chain(joint.ids.iter().copied()).collect() } else { gen_ids };
    let mut opt_g = gan_adam(cfg, store, g_ids, data.len());
    let (aw, advw) = (cfg.train.attr_weight, cfg.train.adv_weight);
    let n = data.len();
    let names = ["d_loss", "d_attr_mse", "g_adv", "g_attr_mse", "g_recon_l1"];
    run_phase(log, phase, &names, cfg.train.epochs, n, cfg.train.batch, cfg.seed, |batch, seed| {
        let d = grad_step(store, &mut opt_d, batch, seed, |p, i, rng| {
            let j = rng.random_range(0..n);
            let fake = {
                let mut g = Graph::new(p);
                let z = g.input(Tensor::vector(standard_normal(latent, rng)));
                let y = generate(&mut g, gen, z, &embs[j]);
                g.value(y).clone()
            };
            let mut g = Graph::new(p);
            let xr = g.input(xs[i].clone());
            let (lr, ar) = disc.forward(&mut g, xr, &embs[i]);
            let xf = g.input(fake);
            let (lf, _) = disc.forward(&mut g, xf, &embs[j]);
            let nr = g.scale(lr, -1.0);
            let sr = g.softplus(nr);
            let sf = g.softplus(lf);
            let adv = g.add(sr, sf);
            let adv = g.sum(adv);
            let am = mse_to(&mut g, ar, &attrs[i]);
            let amw = g.scale(am, aw);
            let loss = g.add(adv, amw);
            let comps = vec![g.scalar(loss), g.scalar(am)];
            (g.backward(loss), comps)
        });
        let gs = grad_step(store, &mut opt_g, batch, seed ^ 0xA5A5, |p, i, rng| {
            let j = rng.random_range(0..n);
            let mut g = Graph::new(p);
            let z = g.input(Tensor::vector(standard_normal(latent, rng)));
            let xf = generate(&mut g, gen, z, &embs[j]);
            let (lf, af) = disc.forward(&mut g, xf, &embs[j]);
            let nf = g.scale(lf, -1.0);
            let adv = g.softplus(nf);
            let adv = g.sum(adv);
            let am = mse_to(&mut g, af, &attrs[j]);
            let advs = g.scale(adv, advw);
            let amw = g.scale(am, aw);
            let mut loss = g.add(advs, amw);
            let mut rec = 0.0;
            if rw > 0.0 {
                let xi = g.input(joint.inputs[i].clone());
                let ze = joint.enc.forward(&mut g, xi, &embs[i]);
                let y = generate(&mut g, gen, ze, &embs[i]);
                let l = l1_to(&mut g, y, &xs[i]);
                rec = g.scalar(l);
                let lw = g.scale(l, rw);
                loss = g.add(loss, lw);
            }
            let comps = vec![g.scalar(adv), g.scalar(am), rec];
            (g.backward(loss), comps)
        });
        d.into_iter().chain(gs).collect()
    })
}

/// Fits the encoder to invert `render(z, emb)` on freshly generated samples.
pub(crate) fn train_latent_regression<F>(
    phase: &str,
    enc: &LatentEncoder,
    enc_ids: Vec<ParamId>,
    latent: usize,
    epochs: usize,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    data: &[TrainSample],
    log: &mut TrainLog,
    render: F,
) -> Result<(), ModelError>
where
    F: Fn(&ParamStore, &[f32], &Tensor) -> Tensor + Sync + Send,
{
    let embs = data.iter().map(|s| embed(&s.attrs, cfg.bands)).collect::<Result<Vec<_>, _>>()?;
    let mut opt = super::train::adam(cfg, store, enc_ids, epochs, data.len());
    let n = data.len();
    run_phase(log, phase, &["latent_mse"], epochs, n, cfg.train.batch, cfg.seed, |batch, seed| {
        grad_step(store, &mut opt, batch, seed, |p, _i, rng| {
            let j = rng.random_range(0..n);
            let z = standard_normal(latent, rng);
            let x = render(p, &z, &embs[j]);
            let mut g = Graph::new(p);
            let xi = g.input(x);
            let zh = enc.forward(&mut g, xi, &embs[j]);
            let loss = mse_to(&mut g, zh, &Tensor::vector(z));
            let comps = vec![g.scalar(loss)];
            (g.backward(loss), comps)
        })
    })
}

fn render_fn(net: &GanNet) -> impl Fn(&ParamStore, &[f32], &Tensor) -> Tensor + Sync + Send + '_ {
    move |p, z, emb| {
        let mut g = Graph::new(p);
        let zi = g.input(Tensor::vector(z.to_vec()));
        let y = generate(&mut g, &net.gen, zi, emb);
        g.value(y).clone()
    }
}

pub fn train(
    net: &GanNet,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    data: &[TrainSample],
    log: &mut TrainLog,
) -> Result<(), ModelError> {
    let xs: Vec<Tensor> = data.iter().map(|s| volume_tensor(&s.volume)).collect();
    train_adversarial(
        "gan",
        &net.gen,
        &net.disc,
        net.gen_ids.clone(),
        net.disc_ids.clone(),
        net.latent,
        cfg,
        store,
        &xs,
        JointEncoder { enc: &net.enc, ids: net.enc_ids.clone(), inputs: &xs },
        data,
        log,
    )?;
    train_latent_regression(
        "encoder",
        &net.enc,
        net.enc_ids.clone(),
        net.latent,
        cfg.train.encoder_epochs,
        cfg,
        store,
        data,
        log,
        render_fn(net),
    )
}

/// Cyclic cost on real images, `|G(E(x, a), a) - x|`, plus the latent
/// regression term on generated samples. Only encoder weights move.
pub fn finetune(
    net: &GanNet,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    data: &[TrainSample],
    log: &mut TrainLog,
    epochs: usize,
) -> Result<(), ModelError> {
    let xs: Vec<Tensor> = data.iter().map(|s| volume_tensor(&s.volume)).collect();
    let embs = data.iter().map(|s| embed(&s.attrs, cfg.bands)).collect::<Result<Vec<_>, _>>()?;
    let mut opt = super::train::adam(cfg, store, net.enc_ids.clone(), epochs, data.len());
    let n = data.len();
    let render = render_fn(net);
    run_phase(log, "finetune", &["loss", "cycle_l1", "latent_mse"], epochs, n, cfg.train.batch, cfg.seed, |batch, seed| {
        grad_step(store, &mut opt, batch, seed, |p, i, rng| {
            let z0 = standard_normal(net.latent, rng);
            let j = rng.random_range(0..n);
            let fake = render(p, &z0, &embs[j]);
            let mut g = Graph::new(p);
            let xi = g.input(xs[i].clone());
            let z = net.enc.forward(&mut g, xi, &embs[i]);
            let y = generate(&mut g, &net.gen, z, &embs[i]);
            let cyc = l1_to(&mut g, y, &xs[i]);
            let xf = g.input(fake);
            let zf = net.enc.forward(&mut g, xf, &embs[j]);
            let lat = mse_to(&mut g, zf, &Tensor::vector(z0));
            let loss = g.add(cyc, lat);
            let comps = vec![g.scalar(loss), g.scalar(cyc), g.scalar(lat)];
            (g.backward(loss), comps)
        })
    })
}
