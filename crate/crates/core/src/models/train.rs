//! Mini-batch training loops.
//!
//! Each sample of a batch gets its own autodiff tape; tapes run through
//! [`Exec`] and their gradients are summed in batch order, so a run is
//! bit-identical whatever the worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attributes::{AttributeVector, Normalizer, Space};
use crate::exec::Exec;
use crate::nn::{Adam, AdamConfig, Gradients, ParamId, ParamStore};
use crate::phantoms::Volume3D;

use super::checkpoint::{ModelCheckpoint, Network, TrainLog};
use super::{gan, glm, hagan, hvae, vae, ModelConfig, ModelError, ModelFamily};

/// One training image with its normalized attributes.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub volume: Volume3D,
    pub attrs: AttributeVector,
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn phase_seed(seed: u64, phase: &str) -> u64 {
    phase.bytes().fold(mix(seed, 0x5EED), |acc, b| mix(acc, b as u64))
}

/// Adam with the configured step size, decayed over `epochs` passes of `n` samples.
pub(crate) fn adam(config: &ModelConfig, store: &ParamStore, ids: Vec<ParamId>, epochs: usize, n: usize) -> Adam {
    Adam::new(adam_config(config, epochs, n), store, ids)
}

pub(crate) fn adam_config(config: &ModelConfig, epochs: usize, n: usize) -> AdamConfig {
    let t = &config.train;
    AdamConfig {
        lr: t.lr,
        decay_steps: epochs * n.div_ceil(t.batch.max(1)),
        final_lr_frac: t.final_lr_frac,
        ..AdamConfig::default()
    }
}

/// Runs `epochs` shuffled passes over `n` samples, logging the per-epoch
/// mean of every loss component `step` reports.
pub(crate) fn run_phase<F>(
    log: &mut TrainLog,
    phase: &str,
    names: &[&str],
    epochs: usize,
    n: usize,
    batch: usize,
    seed: u64,
    mut step: F,
) -> Result<(), ModelError>
where
    F: FnMut(&[usize], u64) -> Vec<f64>,
{
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let base = phase_seed(seed, phase);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(base, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = vec![0.0f64; names.len()];
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let comps = step(chunk, mix(mix(base, epoch as u64), bi as u64 + 1));
            if comps.len() != names.len() || comps.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Divergence { phase: phase.to_string(), epoch });
            }
            for (s, c) in sums.iter_mut().zip(&comps) {
                *s += c * chunk.len() as f64;
            }
        }
        for (name, s) in names.iter().zip(&sums) {
            log.push(phase, epoch, name, s / n as f64);
        }
        log::debug!("{phase} epoch {epoch}: {:?}", sums.iter().map(|s| s / n as f64).collect::<Vec<_>>());
    }
    Ok(())
}

/// One optimizer step over a batch. `f` returns the gradients and loss
/// components of one sample; its rng is seeded from `step_seed` and the
/// sample's batch position. Returns the batch-mean components, or NaN when
/// the gradients are not finite (the update is skipped).
pub(crate) fn grad_step<F>(store: &mut ParamStore, opt: &mut Adam, batch: &[usize], step_seed: u64, f: F) -> Vec<f64>
where
    F: Fn(&ParamStore, usize, &mut ChaCha8Rng) -> (Gradients, Vec<f32>) + Sync + Send,
{
    let shared: &ParamStore = store;
    let results = Exec::auto().map_range(batch.len(), |j| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(step_seed, j as u64));
        f(shared, batch[j], &mut rng)
    });
    let b = batch.len() as f64;
    let width = results.first().map_or(0, |r| r.1.len());
    let mut comps = vec![0.0f64; width];
    let mut parts = Vec::with_capacity(results.len());
    for (g, c) in results {
        for (acc, v) in comps.iter_mut().zip(c) {
            *acc += v as f64 / b;
        }
        parts.push(g);
    }
    let mut grads = Gradients::sum_ordered(store.len(), parts);
    grads.scale(1.0 / batch.len() as f32);
    if !grads.is_finite() {
        return vec![f64::NAN; width];
    }
    opt.step(store, &grads);
    comps
}

/// Trains a fresh model of `config.family` on normalized training samples.
pub fn train(config: &ModelConfig, data: &[TrainSample], normalizer: &Normalizer) -> Result<ModelCheckpoint, ModelError> {
    config.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for s in data {
        if s.volume.dims() != config.dims() {
            return Err(ModelError::ShapeMismatch { expected: config.dims(), got: s.volume.dims() });
        }
        s.attrs.expect(Space::Normalized)?;
    }
    let mut ckpt = ModelCheckpoint::untrained(config.clone(), normalizer.clone())?;
    let ModelCheckpoint { params, net, log, .. } = &mut ckpt;
    match (config.family, &*net) {
        (ModelFamily::Vae, Network::Vae(n)) => vae::train(n, config, params, data, log)?,
        (ModelFamily::Hvae, Network::Hvae(n)) => hvae::train(n, config, params, data, log)?,
        (ModelFamily::VaeGlm, Network::Glm(n)) => glm::train(n, config, params, data, log)?,
        (ModelFamily::Gan, Network::Gan(n)) => gan::train(n, config, params, data, log)?,
        (ModelFamily::GanFt, Network::Gan(n)) => {
            gan::train(n, config, params, data, log)?;
            gan::finetune(n, config, params, data, log, config.train.finetune_epochs)?;
        }
        (ModelFamily::HaGan, Network::HaGan(n)) => hagan::train(n, config, params, data, log)?,
        _ => unreachable!("network built from the same config"),
    }
    ckpt.refresh_hash();
    Ok(ckpt)
}

/// Cyclic-consistency finetuning of a GAN encoder. Returns a GAN_FT
/// checkpoint; generator and discriminator weights are left untouched.
pub fn finetune_encoder_cyclic(
    ckpt: &ModelCheckpoint,
    data: &[TrainSample],
    epochs: usize,
) -> Result<ModelCheckpoint, ModelError> {
    if ckpt.family() != ModelFamily::Gan {
        return Err(ModelError::FamilyMismatch { expected: "GAN".into(), got: ckpt.family().to_string() });
    }
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut out = ckpt.clone();
    out.set_family(ModelFamily::GanFt);
    let config = out.config.clone();
    let ModelCheckpoint { params, net, log, .. } = &mut out;
    match &*net {
        Network::Gan(n) => gan::finetune(n, &config, params, data, log, epochs)?,
        _ => unreachable!("GAN family builds a GAN network"),
    }
    out.refresh_hash();
    Ok(out)
}
