//! Reconstruction training and stylization fine-tuning.
//!
//! Stylization renders a whole view without gradient tracking, computes the
//! exact gradient of the loss with respect to its pixels through the losses
//! and encoders only, then re-renders the view tile by tile with tracking and
//! backpropagates `Σ G ⊙ I_tile`. Rays are independent, so the accumulated
//! parameter gradient equals the one from a single full-view graph.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Backend, Tape, Var};
use crate::embedding::{require, EmbeddingProvider, FeatureExtractor, ToyEncoder, ToyFeatures};
use crate::error::{usage, validation, Error, Result};
use crate::field::{FieldArch, FieldParams, Role};
use crate::geometry::{Camera, MultiViewDataset};
use crate::image_io::psnr;
use crate::losses::{
    crop_rect, image_objective, loss_reconstruction, loss_weight_reg, mean_weight_reg, stack_columns, Breakdown,
    StyleInputs, StyleTargets, StyleTask, Terms,
};
use crate::renderer::{render_patch, render_rays, render_region, render_view, MlpField, RayBatch, Rect, RenderConfig};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub rays_per_batch: usize,
    /// Stops early after this many steps.
    pub max_steps: Option<usize>,
    /// Density head bias of a fresh field; negative values start it nearly
    /// transparent instead of filled with fog.
    pub init_density_bias: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 5e-4,
            rays_per_batch: 1024,
            max_steps: None,
            init_density_bias: -4.0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(validation("stage1.epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(validation("stage1.lr must be positive"));
        }
        if self.rays_per_batch == 0 {
            return Err(validation("stage1.rays_per_batch must be positive"));
        }
        if !self.init_density_bias.is_finite() {
            return Err(validation("stage1.init_density_bias must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub views_per_step: usize,
    /// Side of the square tiles re-rendered with gradient tracking.
    pub tile: usize,
    pub max_steps: Option<usize>,
    /// Train only the color head, leaving density untouched.
    pub freeze_density: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 1e-3,
            views_per_step: 1,
            tile: 64,
            max_steps: None,
            freeze_density: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(validation("stage2.epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(validation("stage2.lr must be positive"));
        }
        if self.views_per_step == 0 || self.tile == 0 {
            return Err(validation("stage2.views_per_step and stage2.tile must be positive"));
        }
        Ok(())
    }
}

/// One training step as written to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<Breakdown>,
    /// Cosine between the render's embedding and the target text.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cos_target: Option<f64>,
    /// Held-out PSNR, on the last step of an epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Stage 1: mean held-out PSNR after each epoch.
    pub epoch_psnr: Vec<f64>,
    /// Stage 2: mean cosine to the target text over each epoch.
    pub epoch_cos_target: Vec<f64>,
    pub provider: Option<String>,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// One JSON record per step.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_json_lines(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json_lines()?.as_bytes())?;
        Ok(())
    }
}

struct Clock {
    start: Instant,
    deterministic: bool,
}

impl Clock {
    fn new(deterministic: bool) -> Self {
        Self {
            start: Instant::now(),
            deterministic,
        }
    }

    fn seconds(&self) -> f64 {
        if self.deterministic {
            0.0
        } else {
            self.start.elapsed().as_secs_f64()
        }
    }
}

fn diverged(stage: u8, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Divergence(format!("stage {stage}, step {step}: {msg}")),
        other => other,
    }
}

fn param_leaves(tape: &Tape, params: &FieldParams) -> Vec<Var> {
    params.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
}

/// Mean PSNR of renders against every frame of `holdout`.
pub fn evaluate_psnr(
    params: &FieldParams,
    arch: &FieldArch,
    holdout: &MultiViewDataset,
    render: &RenderConfig,
) -> Result<f64> {
    let cfg = RenderConfig {
        near: holdout.near,
        far: holdout.far,
        ..*render
    };
    let field = MlpField { params, arch };
    let mut total = 0.0;
    for frame in &holdout.frames {
        total += psnr(&render_view(&field, &frame.camera, &cfg)?, &frame.image);
    }
    Ok(total / holdout.frames.len().max(1) as f64)
}

/// Fits a field to posed images with the per-ray squared color error.
///
/// Every step draws `rays_per_batch` pixels uniformly from all training
/// images; one epoch is as many steps as it takes to draw every pixel once
/// in expectation. Held-out PSNR is measured at each epoch end.
#[allow(clippy::too_many_arguments)]
pub fn train_reconstruction(
    train: &MultiViewDataset,
    holdout: Option<&MultiViewDataset>,
    arch: &FieldArch,
    render: &RenderConfig,
    config: &Stage1Config,
    init: FieldParams,
    seed: u64,
    deterministic: bool,
) -> Result<(FieldParams, TrainReport)> {
    config.validate()?;
    render.validate()?;
    train.validate()?;
    init.validate(arch)?;
    let clock = Clock::new(deterministic);
    let (w, h) = (train.width, train.height);
    let pixels_per_frame = w * h;
    let total_pixels = pixels_per_frame * train.frames.len();
    let steps_per_epoch = total_pixels.div_ceil(config.rays_per_batch);
    let mut total_steps = steps_per_epoch * config.epochs;
    if let Some(m) = config.max_steps {
        total_steps = total_steps.min(m);
    }

    let mut params = init;
    params.role = Role::Reconstructed;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &params.tensors);
    let mut report = TrainReport::default();

    for step in 0..total_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64);
        let mut rays = Vec::with_capacity(config.rays_per_batch);
        let mut ids = Vec::with_capacity(config.rays_per_batch);
        let mut target = Vec::with_capacity(config.rays_per_batch * 3);
        for _ in 0..config.rays_per_batch {
            let idx = rng.random_range(0..total_pixels);
            let (f, p) = (idx / pixels_per_frame, idx % pixels_per_frame);
            let (x, y) = (p % w, p / w);
            let frame = &train.frames[f];
            rays.push(frame.camera.pixel_ray(x, y));
            ids.push(idx as u64);
            target.extend_from_slice(&frame.image.data()[p * 3..p * 3 + 3]);
        }
        let step_render = RenderConfig {
            near: train.near,
            far: train.far,
            seed: render.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ..*render
        };
        let batch = RayBatch::new(rays, &ids, &step_render)?;

        let tape = Tape::new();
        let vars = param_leaves(&tape, &params);
        let out = render_rays(&tape, &vars, arch, &batch, step_render.background);
        let target = tape.constant(Tensor::new(vec![batch.len(), 3], target));
        let loss = loss_reconstruction(&tape, &out.pixels, &target)?;
        let loss_value = tape.item(&loss);
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!("stage 1, step {step}: loss is {loss_value}")));
        }
        let grads = tape.backward(loss).map_err(|e| diverged(1, step, e))?;
        let grads: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
        drop(tape);
        adam.step(&mut params.tensors, &grads).map_err(|e| diverged(1, step, e))?;
        if params.tensors.iter().any(|t| !t.all_finite()) {
            return Err(Error::Divergence(format!("stage 1, step {step}: parameters became non-finite")));
        }

        let epoch_end = (step + 1) % steps_per_epoch == 0 || step + 1 == total_steps;
        let mut held_out = None;
        if epoch_end {
            if let Some(ho) = holdout {
                let p = evaluate_psnr(&params, arch, ho, render)?;
                report.epoch_psnr.push(p);
                held_out = Some(p);
                log::info!("stage 1 step {step}: loss {loss_value:.6}, held-out PSNR {p:.2} dB");
            }
        }
        report.steps.push(StepRecord {
            stage: 1,
            step,
            epoch: step / steps_per_epoch,
            loss: loss_value,
            breakdown: None,
            cos_target: None,
            psnr: held_out,
            wall_seconds: clock.seconds(),
        });
    }
    report.wall_seconds = clock.seconds();
    Ok((params, report))
}

/// `n` square patches of side `floor(fraction · min(W, H))`, uniformly placed.
pub fn sample_patches(width: usize, height: usize, fraction: f64, n: usize, seed: u64) -> Result<Vec<Rect>> {
    let side = (fraction * width.min(height) as f64).floor();
    if !(side >= 4.0) {
        return Err(usage(format!(
            "patches of {fraction} × {}px would be smaller than 4 pixels",
            width.min(height)
        )));
    }
    let side = side as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| Rect {
            x0: rng.random_range(0..=width - side),
            y0: rng.random_range(0..=height - side),
            width: side,
            height: side,
        })
        .collect())
}

/// The encoders and the fixed quantities a stylization step needs.
pub struct StyleContext<'a> {
    pub task: &'a StyleTask,
    pub targets: StyleTargets,
    pub provider: &'a dyn EmbeddingProvider,
    pub extractor: &'a dyn FeatureExtractor,
}

/// Result of one deferred stylization step.
#[derive(Debug, Clone)]
pub struct StyleStep {
    /// One gradient per parameter tensor.
    pub grads: Vec<Tensor>,
    pub breakdown: Breakdown,
    /// `∂L/∂I` for the rendered view, `[H, W, 3]`.
    pub pixel_grad: Tensor,
    /// Embedding of the render before the update.
    pub e_image: Tensor,
}

fn all_zero(t: &Tensor) -> bool {
    t.data().iter().all(|v| *v == 0.0)
}

/// Loss value and gradient for one view with bounded memory: a full
/// untracked render, the pixel gradient through losses and encoders, then
/// tracked re-renders of disjoint `tile × tile` tiles.
#[allow(clippy::too_many_arguments)]
pub fn deferred_style_step(
    params: &FieldParams,
    arch: &FieldArch,
    camera: &Camera,
    render: &RenderConfig,
    ctx: &StyleContext<'_>,
    patches: &[Rect],
    terms: Terms,
    tile: usize,
) -> Result<StyleStep> {
    let (w, h) = (camera.width(), camera.height());
    for p in patches {
        p.check_within(w, h)?;
    }
    let task = ctx.task;

    // phase 1: whole view, untracked
    let field = MlpField { params, arch };
    let full = render_region(&field, camera, render, None, terms.reg)?;
    let image = full.image;

    // phase 2: pixel gradient through the losses and encoders
    let e_image = ctx.provider.embed_image(&image)?;
    let crops: Vec<Tensor> = patches.iter().map(|r| crop_rect(&image, *r)).collect();
    let e_patches = if terms.con_local {
        crops.iter().map(|c| ctx.provider.embed_image(c)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let features = if terms.per {
        ctx.extractor.extract(&image)?
    } else {
        Vec::new()
    };

    let loss_tape = Tape::new();
    let e_var = loss_tape.leaf(e_image.clone());
    let p_vars: Vec<Var> = e_patches.iter().map(|e| loss_tape.leaf(e.clone())).collect();
    let f_vars: Vec<Var> = features.iter().map(|f| loss_tape.leaf(f.clone())).collect();
    let inputs = StyleInputs {
        e_image: e_var,
        e_patches: p_vars.clone(),
        features: f_vars.clone(),
    };
    let mut breakdown = Breakdown::default();
    let objective = image_objective(&loss_tape, &inputs, &ctx.targets, task, terms, &mut breakdown)?;
    let g = loss_tape.backward(objective)?;

    let mut pixel_grad = Tensor::zeros(image.shape());
    let g_e = g.get(e_var);
    if !all_zero(&g_e) {
        pixel_grad.add_assign(&ctx.provider.image_vjp(&image, &g_e)?);
    }
    for ((rect, crop), v) in patches.iter().zip(&crops).zip(&p_vars) {
        let g_p = g.get(*v);
        if !all_zero(&g_p) {
            let local = ctx.provider.image_vjp(crop, &g_p)?;
            pixel_grad.add_assign(&tensor::uncrop(&local, h, w, rect.y0, rect.x0));
        }
    }
    if terms.per {
        let g_f: Vec<Tensor> = f_vars.iter().map(|v| g.get(*v)).collect();
        if !g_f.iter().all(all_zero) {
            pixel_grad.add_assign(&ctx.extractor.features_vjp(&image, &g_f)?);
        }
    }
    drop(loss_tape);

    let rays = w * h;
    if terms.reg {
        let weights = full.weights.as_ref().expect("weights kept");
        let mids = full.midpoints.as_ref().expect("midpoints kept");
        breakdown.reg = mean_weight_reg(&crate::autodiff::Eager, weights, mids, rays)?.item();
    }
    breakdown.total = breakdown.combine(task);

    // phase 3: tracked tiles
    let reg_scale = if terms.reg { task.lambda_reg / rays as f64 } else { 0.0 };
    let mut grads: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for t in Rect::full(w, h).tiles(tile) {
        let g_tile = crop_rect(&pixel_grad, t);
        let pixel_term = !all_zero(&g_tile);
        if !pixel_term && reg_scale == 0.0 {
            continue;
        }
        let tape = Tape::new();
        let vars = param_leaves(&tape, params);
        let patch = render_patch(&tape, &vars, arch, camera, render, t)?;
        let mut surrogate = tape.scalar(0.0);
        if pixel_term {
            surrogate = tape.sum(&tape.mul(&patch.image, &tape.constant(g_tile)));
        }
        if reg_scale != 0.0 {
            let reg = loss_weight_reg(&tape, &patch.weights, &patch.midpoints)?;
            surrogate = tape.add(&surrogate, &tape.scale(&reg, reg_scale));
        }
        let tg = tape.backward(surrogate)?;
        for (acc, v) in grads.iter_mut().zip(&vars) {
            acc.add_assign(&tg.get(*v));
        }
    }

    Ok(StyleStep {
        grads,
        breakdown,
        pixel_grad,
        e_image,
    })
}

/// Gradient of the same objective from one graph spanning field, renderer,
/// encoders and losses. Only possible with encoders that run on the tape;
/// used to check [`deferred_style_step`].
#[allow(clippy::too_many_arguments)]
pub fn full_graph_style_gradient(
    params: &FieldParams,
    arch: &FieldArch,
    camera: &Camera,
    render: &RenderConfig,
    task: &StyleTask,
    targets: &StyleTargets,
    encoder: &ToyEncoder,
    features: &ToyFeatures,
    patches: &[Rect],
    terms: Terms,
) -> Result<(f64, Vec<Tensor>)> {
    let (w, h) = (camera.width(), camera.height());
    let tape = Tape::new();
    let vars = param_leaves(&tape, params);
    let view = render_patch(&tape, &vars, arch, camera, render, Rect::full(w, h))?;
    let e_image = encoder.embed_image_on(&tape, &view.image);
    let e_patches = if terms.con_local {
        patches
            .iter()
            .map(|r| encoder.embed_image_on(&tape, &tape.crop(&view.image, r.y0, r.x0, r.height, r.width)))
            .collect()
    } else {
        Vec::new()
    };
    let feats = if terms.per {
        features.extract_on(&tape, &view.image)
    } else {
        Vec::new()
    };
    let inputs = StyleInputs {
        e_image,
        e_patches,
        features: feats,
    };
    let mut breakdown = Breakdown::default();
    let mut total = image_objective(&tape, &inputs, targets, task, terms, &mut breakdown)?;
    if terms.reg {
        let reg = mean_weight_reg(&tape, &view.weights, &view.midpoints, w * h)?;
        total = tape.add(&total, &tape.scale(&reg, task.lambda_reg));
    }
    let value = tape.item(&total);
    let g = tape.backward(total)?;
    Ok((value, vars.iter().map(|v| g.get(*v)).collect()))
}

/// Text embeddings of a stylization run, computed once.
pub struct PromptEmbeddings {
    pub target: Tensor,
    pub source: Tensor,
    /// One per entry of the task's negative bank.
    pub negatives: Vec<Tensor>,
}

impl PromptEmbeddings {
    pub fn new(task: &StyleTask, provider: &dyn EmbeddingProvider) -> Result<Self> {
        Ok(Self {
            target: provider.embed_text(&task.target)?,
            source: provider.embed_text(&task.source)?,
            negatives: task
                .negatives
                .iter()
                .map(|t| provider.embed_text(t))
                .collect::<Result<_>>()?,
        })
    }

    /// Negatives for `step`, as a `[D, N]` matrix.
    pub fn negatives_for_step(&self, task: &StyleTask, seed: u64, step: u64) -> Result<Tensor> {
        let chosen = task.negatives_for_step(seed, step);
        let cols: Vec<Tensor> = chosen
            .iter()
            .map(|t| {
                let i = task.negatives.iter().position(|n| n == t).expect("drawn from the bank");
                self.negatives[i].clone()
            })
            .collect();
        stack_columns(&cols)
    }
}

/// Fine-tunes a copy of a reconstructed field toward the task's target
/// prompt over the dataset's poses. One epoch visits every pose once.
#[allow(clippy::too_many_arguments)]
pub fn stylize(
    f_rec: &FieldParams,
    arch: &FieldArch,
    cameras: &[Camera],
    render: &RenderConfig,
    task: &StyleTask,
    provider: &dyn EmbeddingProvider,
    extractor: &dyn FeatureExtractor,
    config: &Stage2Config,
    seed: u64,
    deterministic: bool,
) -> Result<(FieldParams, TrainReport)> {
    stylize_with_terms(
        f_rec,
        arch,
        cameras,
        render,
        task,
        provider,
        extractor,
        config,
        seed,
        deterministic,
        Terms::ALL,
    )
}

/// [`stylize`] with a subset of the objective's terms.
#[allow(clippy::too_many_arguments)]
pub fn stylize_with_terms(
    f_rec: &FieldParams,
    arch: &FieldArch,
    cameras: &[Camera],
    render: &RenderConfig,
    task: &StyleTask,
    provider: &dyn EmbeddingProvider,
    extractor: &dyn FeatureExtractor,
    config: &Stage2Config,
    seed: u64,
    deterministic: bool,
    terms: Terms,
) -> Result<(FieldParams, TrainReport)> {
    if f_rec.role != Role::Reconstructed {
        return Err(validation("stylization needs a reconstructed field checkpoint"));
    }
    f_rec.validate(arch)?;
    config.validate()?;
    render.validate()?;
    task.validate()?;
    if cameras.is_empty() {
        return Err(validation("stylization needs at least one camera"));
    }
    for cap in ["text", "image", "image_vjp"] {
        require(provider, cap)?;
    }
    let clock = Clock::new(deterministic);
    let prompts = PromptEmbeddings::new(task, provider)?;

    // frozen source renders and their embeddings, one per pose
    let source_field = MlpField { params: f_rec, arch };
    let mut sources = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let img = render_view(&source_field, cam, render)?;
        let e = provider.embed_image(&img)?;
        let feats = extractor.extract(&img)?;
        sources.push((e, feats));
    }

    let mut params = f_rec.clone();
    params.role = Role::Stylized;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &params.tensors);
    let steps_per_epoch = cameras.len().div_ceil(config.views_per_step);
    let mut total_steps = steps_per_epoch * config.epochs;
    if let Some(m) = config.max_steps {
        total_steps = total_steps.min(m);
    }
    let frozen = if config.freeze_density {
        arch.density_head_index() + 2
    } else {
        0
    };

    let mut report = TrainReport {
        provider: Some(provider.name().to_string()),
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = Vec::new();
    let mut epoch_cos = Vec::new();
    for step in 0..total_steps {
        let epoch = step / steps_per_epoch;
        if step % steps_per_epoch == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e90_c4);
            rng.set_stream(epoch as u64);
            order = (0..cameras.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        }
        let in_epoch = step % steps_per_epoch;
        let views: Vec<usize> = order
            .iter()
            .skip(in_epoch * config.views_per_step)
            .take(config.views_per_step)
            .copied()
            .collect();
        let negatives = prompts.negatives_for_step(task, seed, step as u64)?;

        let mut grads: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss = 0.0;
        let mut cos = 0.0;
        let mut breakdown = Breakdown::default();
        for (vi, &view) in views.iter().enumerate() {
            let cam = &cameras[view];
            let targets = StyleTargets {
                e_src_image: sources[view].0.clone(),
                e_target: prompts.target.clone(),
                e_source: prompts.source.clone(),
                negatives: negatives.clone(),
                source_features: sources[view].1.clone(),
            };
            let ctx = StyleContext {
                task,
                targets,
                provider,
                extractor,
            };
            let patch_seed = seed ^ ((step as u64) << 16) ^ vi as u64;
            let patches = sample_patches(
                cam.width(),
                cam.height(),
                task.patch_fraction,
                task.patches_per_view,
                patch_seed,
            )?;
            let out = deferred_style_step(&params, arch, cam, render, &ctx, &patches, terms, config.tile)
                .map_err(|e| diverged(2, step, e))?;
            for (acc, g) in grads.iter_mut().zip(&out.grads) {
                acc.add_assign(g);
            }
            loss += out.breakdown.total;
            cos += tensor::dot(&out.e_image, &prompts.target);
            breakdown = out.breakdown;
        }
        let nv = views.len() as f64;
        let (loss, cos) = (loss / nv, cos / nv);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("stage 2, step {step}: loss is {loss}")));
        }
        if nv > 1.0 {
            for g in &mut grads {
                *g = g.map(|v| v / nv);
            }
        }
        for g in grads.iter_mut().take(frozen) {
            *g = Tensor::zeros(g.shape());
        }
        adam.step(&mut params.tensors, &grads).map_err(|e| diverged(2, step, e))?;
        if params.tensors.iter().any(|t| !t.all_finite()) {
            return Err(Error::Divergence(format!("stage 2, step {step}: parameters became non-finite")));
        }
        epoch_cos.push(cos);
        if (step + 1) % steps_per_epoch == 0 || step + 1 == total_steps {
            let mean = epoch_cos.iter().sum::<f64>() / epoch_cos.len() as f64;
            report.epoch_cos_target.push(mean);
            epoch_cos.clear();
            log::info!("stage 2 epoch {epoch}: loss {loss:.5}, cosine to target {mean:.4}");
        }
        report.steps.push(StepRecord {
            stage: 2,
            step,
            epoch,
            loss,
            breakdown: Some(breakdown),
            cos_target: Some(cos),
            psnr: None,
            wall_seconds: clock.seconds(),
        });
    }
    report.wall_seconds = clock.seconds();
    Ok((params, report))
}
