//! Hierarchical GAN: a conditional generator at half resolution followed by
//! a learned ×2 upsampler. The upsampler is trained on sub-block crops so
//! no full-resolution adversarial pass is ever needed.

use rand::Rng;

use crate::attributes::{embedding_len, AttributeVector};
use crate::nn::layers::conv_act;
use crate::nn::{Conv3d, Graph, ParamId, ParamStore, Tensor, Var};

use super::checkpoint::TrainLog;
use super::gan::{generate, train_adversarial, JointEncoder, train_latent_regression, Discriminator, LatentEncoder};
use super::nets::{embed, l1_to, ImageDecoder};
use super::train::{adam, grad_step, run_phase, TrainSample};
use super::{volume_tensor, LatentPayload, ModelConfig, ModelError};

#[derive(Clone, Debug)]
pub struct Upsampler {
    c1: Conv3d,
    c2: Conv3d,
    out: Conv3d,
}

impl Upsampler {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        Upsampler {
            c1: Conv3d::new(store, "up.c1", 1, width, 1, rng),
            c2: Conv3d::new(store, "up.c2", width, width, 1, rng),
            out: Conv3d::new(store, "up.out", width + 1, 8, 1, rng),
        }
    }

    /// `[1, d, d, d]` low-resolution image to `[1, 2d, 2d, 2d]`: a
    /// sub-voxel residual on top of nearest-neighbour upsampling.
    pub fn forward(&self, g: &mut Graph, low: Var) -> Var {
        let h = conv_act(g, &self.c1, low);
        let h = conv_act(g, &self.c2, h);
        let h = g.concat(&[h, low]);
        let r = self.out.forward(g, h);
        let r = g.depth_to_space(r);
        let u = g.upsample2(low);
        g.add(r, u)
    }
}

#[derive(Clone, Debug)]
pub struct HaGanNet {
    gen: ImageDecoder,
    disc: Discriminator,
    up: Upsampler,
    enc: LatentEncoder,
    gen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
    up_ids: Vec<ParamId>,
    enc_ids: Vec<ParamId>,
    latent: usize,
    bands: usize,
}

impl HaGanNet {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let l = cfg.latent_dim();
        let ids = |a: usize, b: usize| (a..b).map(ParamId).collect::<Vec<_>>();
        let s0 = store.len();
        let gen = ImageDecoder::new(store, "gen", l + embedding_len(cfg.bands), embedding_len(cfg.bands), cfg.low_res, &cfg.dec_channels, rng);
        let s1 = store.len();
        let disc = Discriminator::new(store, cfg.low_res, cfg, rng);
        let s2 = store.len();
        let up = Upsampler::new(store, *cfg.dec_channels.last().expect("validated"), rng);
        let s3 = store.len();
        let enc = LatentEncoder::new(store, cfg, rng);
        let s4 = store.len();
        HaGanNet {
            gen,
            disc,
            up,
            enc,
            gen_ids: ids(s0, s1),
            disc_ids: ids(s1, s2),
            up_ids: ids(s2, s3),
            enc_ids: ids(s3, s4),
            latent: l,
            bands: cfg.bands,
        }
    }

    fn render(&self, g: &mut Graph, z: Var, emb: &Tensor) -> Var {
        let low = generate(g, &self.gen, z, emb);
        self.up.forward(g, low)
    }

    pub fn encode(&self, p: &ParamStore, x: &Tensor, attrs: &AttributeVector) -> Result<LatentPayload, ModelError> {
        let emb = embed(attrs, self.bands)?;
        Ok(LatentPayload::Vector(self.enc.infer(p, x, &emb)))
    }

    pub fn decode(&self, p: &ParamStore, z: &[f32], attrs: &AttributeVector) -> Result<Tensor, ModelError> {
        let emb = embed(attrs, self.bands)?;
        let mut g = Graph::new(p);
        let zi = g.input(Tensor::vector(z.to_vec()));
        let y = self.render(&mut g, zi, &emb);
        Ok(g.value(y).clone())
    }

    pub fn latent_len(&self) -> usize {
        self.latent
    }
}

fn downsample(x: &Tensor) -> Tensor {
    let p = ParamStore::default();
    let mut g = Graph::new(&p);
    let xi = g.input(x.clone());
    let y = g.avgpool2(xi);
    g.value(y).clone()
}

pub fn train(
    net: &HaGanNet,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    data: &[TrainSample],
    log: &mut TrainLog,
) -> Result<(), ModelError> {
    let full: Vec<Tensor> = data.iter().map(|s| volume_tensor(&s.volume)).collect();
    let low: Vec<Tensor> = full.iter().map(downsample).collect();
    train_adversarial(
        "stage1_gan",
        &net.gen,
        &net.disc,
        net.gen_ids.clone(),
        net.disc_ids.clone(),
        net.latent,
        cfg,
        store,
        &low,
        JointEncoder { enc: &net.enc, ids: net.enc_ids.clone(), inputs: &full },
        data,
        log,
    )?;

    // Stage 2: crops of half the low-res edge, upsampled against the matching full-res block.
    let lc = cfg.low_res / 2;
    let mut opt = adam(cfg, store, net.up_ids.clone(), cfg.train.upsampler_epochs, data.len());
    run_phase(log, "stage2_upsampler", &["crop_l1"], cfg.train.upsampler_epochs, data.len(), cfg.train.batch, cfg.seed, |batch, seed| {
        grad_step(store, &mut opt, batch, seed, |p, i, rng| {
            let o: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..=cfg.low_res - lc));
            let mut g = Graph::new(p);
            let li = g.input(low[i].clone());
            let lcrop = g.crop(li, o, [lc; 3]);
            let y = net.up.forward(&mut g, lcrop);
            let fi = g.input(full[i].clone());
            let target = g.crop(fi, o.map(|v| 2 * v), [2 * lc; 3]);
            let t = g.value(target).clone();
            let loss = l1_to(&mut g, y, &t);
            let comps = vec![g.scalar(loss)];
            (g.backward(loss), comps)
        })
    })?;

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
        |p, z, emb| {
            let mut g = Graph::new(p);
            let zi = g.input(Tensor::vector(z.to_vec()));
            let y = net.render(&mut g, zi, emb);
            g.value(y).clone()
        },
    )
}
