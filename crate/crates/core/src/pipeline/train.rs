//! The four training stages.
//!
//! Every step draws its randomness from a generator seeded by
//! `(seed, stage, step)`, so a resumed run replays exactly the batches and
//! augmentations of an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, LossRecord, StageState};
use super::config::{Stage, TrainConfig};
use super::data::{stack_images, stack_pairs, ImageLoader};
use super::optim::Adam;
use crate::augment::{sample_variant_pair, train_augment};
use crate::discriminator::{adversarial_loss, disc_loss, DiscMode, DiscParams};
use crate::error::{PenError, Result};
use crate::features::FeatureExtractor;
use crate::imagecore::{DatasetIndex, ImageTensor, SamplePair};
use crate::losses::{
    bce_with_logits, compose_image, content_loss, extract_stroke, reconstruction_loss,
    self_supervised_loss, style_loss, total_loss_tensor,
};
use crate::network::layers::sigmoid;
use crate::network::PenParams;
use crate::synthgen::sample_seed;

/// Generator for one training step.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(sample_seed(seed, stage.index()), step as u64))
}

fn disc_seed(seed: u64) -> u64 {
    sample_seed(seed, 0xD15C)
}

/// Fresh generator parameters for `cfg`.
pub fn init_state(cfg: &TrainConfig, device: &Device) -> Result<StageState> {
    Ok(StageState::fresh(PenParams::init(
        &cfg.net,
        cfg.seed,
        DType::F32,
        device,
    )?))
}

/// Checks that `state` may start (or continue) `cfg.stage` and resets the
/// per-stage bookkeeping when a new stage begins.
pub fn begin_stage(cfg: &TrainConfig, state: &mut StageState, force: bool) -> Result<()> {
    cfg.validate()?;
    if state.params.config_hash() != cfg.net.config_hash() {
        return Err(PenError::Checkpoint(format!(
            "architecture mismatch: state {} vs config {}",
            state.params.config_hash(),
            cfg.net.config_hash()
        )));
    }
    if state.stage == Some(cfg.stage) && !state.complete {
        return Ok(());
    }
    let preds = cfg.stage.predecessors();
    let ok = preds.is_empty()
        || state
            .stage
            .map(|s| preds.contains(&s) && state.complete)
            .unwrap_or(false);
    if !ok && !force {
        if cfg.stage == Stage::Stage1 && state.stage.is_none() {
            return Err(PenError::MissingStrokeInit);
        }
        return Err(PenError::StageOrder {
            requested: cfg.stage.tag().to_string(),
            needed: preds
                .iter()
                .map(|s| s.tag())
                .collect::<Vec<_>>()
                .join(" or "),
            found: state
                .stage
                .map(|s| s.tag())
                .unwrap_or("fresh parameters")
                .to_string(),
        });
    }
    state.stage = Some(cfg.stage);
    state.step = 0;
    state.complete = false;
    state.gen_opt = None;
    state.disc_opt = None;
    state.loss_history.clear();
    Ok(())
}

fn ensure_optimizers(cfg: &TrainConfig, state: &mut StageState, with_disc: bool) -> Result<()> {
    if state.gen_opt.is_none() {
        state.gen_opt = Some(Adam::new(cfg.lr_gen, cfg.betas_gen));
    }
    if with_disc {
        if state.disc.is_none() {
            state.disc = Some(DiscParams::init(
                &cfg.disc,
                disc_seed(cfg.seed),
                state.params.dtype(),
                state.params.device(),
            )?);
        }
        if state.disc_opt.is_none() {
            state.disc_opt = Some(Adam::new(cfg.lr_disc, cfg.betas_disc));
        }
    }
    Ok(())
}

fn batch_indices(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    while out.len() < batch {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm.into_iter().take(batch - out.len()));
    }
    out
}

fn labeled_batch(
    cfg: &TrainConfig,
    loader: &mut ImageLoader,
    rng: &mut ChaCha8Rng,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor, Tensor)> {
    let idx = batch_indices(loader.len(), cfg.batch_size, rng);
    let mut pairs: Vec<SamplePair> = Vec::with_capacity(idx.len());
    for i in idx {
        let pair = loader.pair(i)?;
        pairs.push(if cfg.geometric_augment {
            train_augment(&pair, &cfg.augment, rng)
        } else {
            pair
        });
    }
    stack_pairs(&pairs, dtype, device)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn record(state: &mut StageState, step: u64, values: &[(&str, f64)]) -> Result<()> {
    for (name, v) in values {
        if !v.is_finite() {
            return Err(PenError::NonFiniteTerm(format!("{name} at step {step}")));
        }
    }
    state.loss_history.push(LossRecord {
        step,
        values: values
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect::<BTreeMap<_, _>>(),
    });
    Ok(())
}

fn after_step(cfg: &TrainConfig, state: &mut StageState) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        if cfg.checkpoint_every > 0
            && state.step.is_multiple_of(cfg.checkpoint_every)
            && state.step < cfg.steps
        {
            let path = dir.join(format!(
                "{}_step{:06}.safetensors",
                cfg.stage.tag(),
                state.step
            ));
            save_checkpoint(&path, state)?;
        }
    }
    Ok(())
}

fn finish(cfg: &TrainConfig, state: &mut StageState) -> Result<()> {
    state.complete = true;
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(&dir.join(format!("{}.safetensors", cfg.stage.tag())), state)?;
        let csv = dir.join(format!("{}_loss.csv", cfg.stage.tag()));
        fs::write(&csv, state.loss_csv()).map_err(|e| PenError::io(&csv, e))?;
    }
    Ok(())
}

/// Stroke-module initialization on synthetic pairs: pixel BCE between the
/// predicted mask and the derived stroke target. Erasing weights are untouched.
pub fn train_stroke_init(
    cfg: &TrainConfig,
    data: &DatasetIndex,
    mut state: StageState,
) -> Result<StageState> {
    debug_assert_eq!(cfg.stage, Stage::StrokeInit);
    let mut loader = ImageLoader::new(data.clone(), cfg.input_size, cfg.tau)?;
    begin_stage(cfg, &mut state, false)?;
    ensure_optimizers(cfg, &mut state, false)?;
    let (dtype, device) = (state.params.dtype(), state.params.device().clone());
    for step in state.step..cfg.steps {
        let mut rng = step_rng(cfg.seed, cfg.stage, step);
        let (x, _, s_gt) = labeled_batch(cfg, &mut loader, &mut rng, dtype, &device)?;
        let logits = state.params.forward_stroke_logits(&x)?;
        let loss = bce_with_logits(&logits, &s_gt)?;
        let grads = loss.backward()?;
        let opt = state.gen_opt.as_mut().expect("optimizer initialized");
        opt.step(&state.params.stroke, &grads, "stroke.")?;
        record(&mut state, step as u64, &[("stroke_bce", scalar(&loss)?)])?;
        state.step = step + 1;
        after_step(cfg, &mut state)?;
    }
    finish(cfg, &mut state)?;
    Ok(state)
}

/// Adversarial initialization on synthetic pairs with the stroke module frozen.
/// Generator and discriminator updates alternate; in the loss history the
/// generator update of iteration `i` is step `2i` and the critic update `2i+1`.
pub fn train_stage1(
    cfg: &TrainConfig,
    data: &DatasetIndex,
    state: StageState,
) -> Result<StageState> {
    train_stage1_with(cfg, data, state, false)
}

pub fn train_stage1_with(
    cfg: &TrainConfig,
    data: &DatasetIndex,
    mut state: StageState,
    force: bool,
) -> Result<StageState> {
    debug_assert_eq!(cfg.stage, Stage::Stage1);
    let mut loader = ImageLoader::new(data.clone(), cfg.input_size, cfg.tau)?;
    begin_stage(cfg, &mut state, force)?;
    ensure_optimizers(cfg, &mut state, true)?;
    let (dtype, device) = (state.params.dtype(), state.params.device().clone());
    let w = cfg.weights;
    for step in state.step..cfg.steps {
        let mut rng = step_rng(cfg.seed, cfg.stage, step);
        let (x, gt, s_gt) = labeled_batch(cfg, &mut loader, &mut rng, dtype, &device)?;
        let disc = state.disc.as_ref().expect("discriminator initialized");

        let s = state.params.forward_stroke(&x)?.detach();
        let out = state
            .params
            .erase_progressive_with(&x, &s, cfg.net.iterations)?
            .final_image;
        let l_r = reconstruction_loss(&out, &gt, &s, &w)?;
        let l_a = adversarial_loss(disc, &out, &gt, &s_gt)?;
        let g_total = (&l_r + (&l_a * w.lambda_a)?)?;
        let grads = g_total.backward()?;
        state
            .gen_opt
            .as_mut()
            .expect("optimizer initialized")
            .step(&state.params.erase, &grads, "erase.")?;
        let gen_values = [
            ("reconstruction", scalar(&l_r)?),
            ("adversarial", scalar(&l_a)?),
            ("gen_total", scalar(&g_total)?),
        ];

        let l_d = disc_loss(disc, &gt, &out.detach(), &s_gt, DiscMode::Train)?;
        let grads = l_d.backward()?;
        state
            .disc_opt
            .as_mut()
            .expect("optimizer initialized")
            .step(&disc.store, &grads, "")?;
        let d = scalar(&l_d)?;
        record(&mut state, 2 * step as u64, &gen_values)?;
        record(&mut state, 2 * step as u64 + 1, &[("disc", d)])?;
        state.step = step + 1;
        after_step(cfg, &mut state)?;
    }
    finish(cfg, &mut state)?;
    Ok(state)
}

/// Self-supervised pretext training on unlabeled images: two photometric
/// variants of each image should yield the same extracted stroke map.
/// Only original images are read; the stroke module stays frozen.
pub fn train_stage2_selfsup(
    cfg: &TrainConfig,
    unlabeled: &DatasetIndex,
    state: StageState,
) -> Result<StageState> {
    let mut loader = ImageLoader::new(unlabeled.clone(), cfg.input_size, cfg.tau)?;
    train_stage2_with(cfg, &mut loader, state, false)
}

pub fn train_stage2_with(
    cfg: &TrainConfig,
    loader: &mut ImageLoader,
    mut state: StageState,
    force: bool,
) -> Result<StageState> {
    debug_assert_eq!(cfg.stage, Stage::Stage2);
    begin_stage(cfg, &mut state, force)?;
    ensure_optimizers(cfg, &mut state, false)?;
    let (dtype, device) = (state.params.dtype(), state.params.device().clone());
    for step in state.step..cfg.steps {
        let mut rng = step_rng(cfg.seed, cfg.stage, step);
        let idx = batch_indices(loader.len(), cfg.batch_size, &mut rng);
        let mut a: Vec<ImageTensor> = Vec::with_capacity(idx.len());
        let mut b: Vec<ImageTensor> = Vec::with_capacity(idx.len());
        for i in idx {
            let img = loader.original(i)?;
            let id = loader.index().entries[i].id.clone();
            let vp = sample_variant_pair(&img, &id, &cfg.augment, &mut rng)?;
            a.push(vp.a);
            b.push(vp.b);
        }
        let n = a.len();
        a.extend(b);
        // Both variants go through the network as one batch; instance
        // normalization keeps samples independent.
        let x = stack_images(&a, dtype, &device)?;
        let mask = state.params.forward_stroke(&x)?.detach();
        let out = state
            .params
            .erase_progressive_with(&x, &mask, cfg.net.iterations)?
            .final_image;
        let strokes = extract_stroke(&x, &out)?;
        let sa: Vec<Tensor> = (0..n)
            .map(|i| strokes.narrow(0, i, 1))
            .collect::<candle_core::Result<_>>()?;
        let sb: Vec<Tensor> = (0..n)
            .map(|i| strokes.narrow(0, n + i, 1))
            .collect::<candle_core::Result<_>>()?;
        let loss = self_supervised_loss(&sa, &sb)?;
        let grads = loss.backward()?;
        state
            .gen_opt
            .as_mut()
            .expect("optimizer initialized")
            .step(&state.params.erase, &grads, "erase.")?;
        record(
            &mut state,
            step as u64,
            &[("self_supervised", scalar(&loss)?)],
        )?;
        state.step = step + 1;
        after_step(cfg, &mut state)?;
    }
    finish(cfg, &mut state)?;
    Ok(state)
}

/// Joint fine-tuning of both modules on labeled pairs with the full loss
/// plus an auxiliary stroke BCE, alternating with critic updates.
pub fn train_stage3_finetune(
    cfg: &TrainConfig,
    data: &DatasetIndex,
    state: StageState,
) -> Result<StageState> {
    train_stage3_with(cfg, data, state, false)
}

pub fn train_stage3_with(
    cfg: &TrainConfig,
    data: &DatasetIndex,
    mut state: StageState,
    force: bool,
) -> Result<StageState> {
    debug_assert_eq!(cfg.stage, Stage::Stage3);
    let mut loader = ImageLoader::new(data.clone(), cfg.input_size, cfg.tau)?;
    begin_stage(cfg, &mut state, force)?;
    ensure_optimizers(cfg, &mut state, true)?;
    let (dtype, device) = (state.params.dtype(), state.params.device().clone());
    let fx = FeatureExtractor::new(&cfg.features, dtype, &device)?;
    let w = cfg.weights;
    for step in state.step..cfg.steps {
        let mut rng = step_rng(cfg.seed, cfg.stage, step);
        let (x, gt, s_gt) = labeled_batch(cfg, &mut loader, &mut rng, dtype, &device)?;
        let disc = state.disc.as_ref().expect("discriminator initialized");

        let logits = state.params.forward_stroke_logits(&x)?;
        let s = sigmoid(&logits)?;
        let out = state
            .params
            .erase_progressive_with(&x, &s, cfg.net.iterations)?
            .final_image;
        // The predicted mask only weights the losses; it gets its own
        // supervision from the BCE term.
        let s_w = s.detach();
        let l_r = reconstruction_loss(&out, &gt, &s_w, &w)?;
        let composed = compose_image(&out, &gt, &s_w)?;
        let l_c = content_loss(&out, &gt, &composed, &fx)?;
        let l_s = style_loss(&out, &gt, &fx)?;
        let l_a = adversarial_loss(disc, &out, &gt, &s_gt)?;
        let l_bce = bce_with_logits(&logits, &s_gt)?;
        let erase_total = total_loss_tensor(&l_r, &l_c, &l_s, &l_a, &w)?;
        let g_total = (&erase_total + (&l_bce * w.lambda_stroke)?)?;
        let grads = g_total.backward()?;
        state
            .gen_opt
            .as_mut()
            .expect("optimizer initialized")
            .step_many(
                &[
                    (&state.params.stroke, "stroke."),
                    (&state.params.erase, "erase."),
                ],
                &grads,
            )?;
        let gen_values = [
            ("reconstruction", scalar(&l_r)?),
            ("content", scalar(&l_c)?),
            ("style", scalar(&l_s)?),
            ("adversarial", scalar(&l_a)?),
            ("stroke_bce", scalar(&l_bce)?),
            ("gen_total", scalar(&g_total)?),
        ];

        let l_d = disc_loss(disc, &gt, &out.detach(), &s_gt, DiscMode::Train)?;
        let grads = l_d.backward()?;
        state
            .disc_opt
            .as_mut()
            .expect("optimizer initialized")
            .step(&disc.store, &grads, "")?;
        let d = scalar(&l_d)?;
        record(&mut state, 2 * step as u64, &gen_values)?;
        record(&mut state, 2 * step as u64 + 1, &[("disc", d)])?;
        state.step = step + 1;
        after_step(cfg, &mut state)?;
    }
    finish(cfg, &mut state)?;
    Ok(state)
}

/// Dispatches to the stage named in `cfg`.
pub fn run_stage(
    cfg: &TrainConfig,
    data: Option<&DatasetIndex>,
    unlabeled: Option<&DatasetIndex>,
    state: StageState,
    force: bool,
) -> Result<StageState> {
    let need = |d: Option<&DatasetIndex>, what: &str| {
        d.cloned()
            .ok_or_else(|| PenError::Config(format!("stage {} needs {what}", cfg.stage.tag())))
    };
    match cfg.stage {
        Stage::StrokeInit => train_stroke_init(cfg, &need(data, "--data")?, state),
        Stage::Stage1 => train_stage1_with(cfg, &need(data, "--data")?, state, force),
        Stage::Stage2 => {
            let index = unlabeled.or(data).cloned().ok_or_else(|| {
                PenError::Config("stage stage2_selfsup needs --unlabeled or --data".into())
            })?;
            let mut loader = ImageLoader::new(index, cfg.input_size, cfg.tau)?;
            train_stage2_with(cfg, &mut loader, state, force)
        }
        Stage::Stage3 => train_stage3_with(cfg, &need(data, "--data")?, state, force),
    }
}
