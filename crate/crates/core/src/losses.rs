//! Reconstruction and stylization objectives.
//!
//! Each loss is written against [`Backend`], so the same code evaluates
//! plain values and records a differentiable graph. Batch reductions are
//! means, keeping the weights independent of resolution and view count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager};
use crate::embedding::{EmbeddingProvider, FeatureExtractor};
use crate::error::{usage, validation, Result};
use crate::renderer::Rect;
use crate::tensor::{self, Tensor};

/// Norm below which an embedding difference counts as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

const DEFAULT_NEGATIVES: &str = include_str!("../assets/negatives.txt");

/// The built-in bank of style prompts used as contrastive negatives.
pub fn default_negatives() -> Vec<String> {
    parse_negatives(DEFAULT_NEGATIVES)
}

/// One prompt per line; blank lines are skipped.
pub fn parse_negatives(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleTask {
    pub target: String,
    pub source: String,
    pub negatives: Vec<String>,
    pub tau: f64,
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub lambda_perceptual: f64,
    pub lambda_reg: f64,
    pub patch_fraction: f64,
    pub patches_per_view: usize,
    pub negatives_per_step: usize,
}

impl Default for StyleTask {
    fn default() -> Self {
        Self {
            target: String::new(),
            source: "a photo".into(),
            negatives: default_negatives(),
            tau: 0.07,
            lambda_global: 0.2,
            lambda_local: 0.1,
            lambda_perceptual: 2.0,
            lambda_reg: 0.1,
            patch_fraction: 0.1,
            patches_per_view: 8,
            negatives_per_step: 32,
        }
    }
}

impl StyleTask {
    pub fn new(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.trim().is_empty() {
            return Err(validation("target prompt is empty"));
        }
        if self.source.trim().is_empty() {
            return Err(validation("source prompt is empty"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(validation("tau must be positive"));
        }
        for (name, v) in [
            ("lambda_global", self.lambda_global),
            ("lambda_local", self.lambda_local),
            ("lambda_perceptual", self.lambda_perceptual),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(validation(format!("{name} must be nonnegative")));
            }
        }
        if !(self.patch_fraction > 0.0 && self.patch_fraction <= 1.0) {
            return Err(validation("patch_fraction must lie in (0, 1]"));
        }
        if self.patches_per_view == 0 || self.negatives_per_step == 0 {
            return Err(validation("patches_per_view and negatives_per_step must be positive"));
        }
        if self.negatives.is_empty() {
            return Err(validation("negative bank is empty"));
        }
        if self.negatives.iter().any(|n| n.trim() == self.target.trim()) {
            return Err(validation("target prompt appears in the negative bank"));
        }
        Ok(())
    }

    /// Drops negatives equal to the target prompt.
    pub fn without_target_in_negatives(mut self) -> Self {
        let t = self.target.trim().to_string();
        self.negatives.retain(|n| n.trim() != t);
        self
    }

    /// Negatives drawn for `step`, uniformly without replacement.
    pub fn negatives_for_step(&self, seed: u64, step: u64) -> Vec<&str> {
        let n = self.negatives.len();
        let k = self.negatives_per_step.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.negatives[i].as_str()).collect()
    }
}

/// Mean over rays of the squared color error; `rendered`, `target` are `[R, 3]`.
pub fn loss_reconstruction<B: Backend>(b: &B, rendered: &B::Value, target: &B::Value) -> Result<B::Value> {
    let (s, t) = (b.shape(rendered), b.shape(target));
    if s != t || s.is_empty() || s[0] == 0 {
        return Err(usage(format!("reconstruction shapes differ or are empty: {s:?} vs {t:?}")));
    }
    let rays = s[0] as f64;
    Ok(b.scale(&b.sum(&b.square(&b.sub(rendered, target))), 1.0 / rays))
}

/// `1 − ⟨e_img, e_text⟩` for one view.
pub fn loss_dir_absolute<B: Backend>(b: &B, e_img: &B::Value, e_text: &B::Value) -> B::Value {
    b.offset(&b.scale(&b.dot(e_img, e_text), -1.0), 1.0)
}

/// Sum and mean of the absolute directional loss over a batch of views.
pub fn loss_dir_absolute_views(e_imgs: &[Tensor], e_text: &Tensor) -> (f64, f64) {
    let sum: f64 = e_imgs
        .iter()
        .map(|e| loss_dir_absolute(&Eager, e, e_text).item())
        .sum();
    (sum, sum / e_imgs.len().max(1) as f64)
}

/// A directional loss value that may have hit the zero-delta fallback.
#[derive(Debug, Clone)]
pub struct Directional<V> {
    pub loss: V,
    pub degenerate: bool,
}

/// `1 − cos(Δi, Δt)` with `Δi = e_tgt_img − e_src_img`, `Δt = e_tgt_text − e_src_text`.
///
/// A zero-length delta makes the cosine undefined; the loss is then the
/// constant 1 and flagged.
pub fn loss_dir_relative<B: Backend>(
    b: &B,
    e_tgt_img: &B::Value,
    e_src_img: &B::Value,
    e_tgt_text: &B::Value,
    e_src_text: &B::Value,
) -> Directional<B::Value> {
    let di = b.sub(e_tgt_img, e_src_img);
    let dt = b.sub(e_tgt_text, e_src_text);
    let small = |v: &B::Value| tensor::norm(&b.value(v)) <= DEGENERATE_NORM;
    if small(&di) || small(&dt) {
        return Directional {
            loss: b.scalar(1.0),
            degenerate: true,
        };
    }
    let cos = b.dot(&b.normalize(&di), &b.normalize(&dt));
    Directional {
        loss: b.offset(&b.scale(&cos, -1.0), 1.0),
        degenerate: false,
    }
}

/// Stacks `D`-vectors as the columns of a `[D, N]` matrix.
pub fn stack_columns(vectors: &[Tensor]) -> Result<Tensor> {
    let Some(first) = vectors.first() else {
        return Err(usage("at least one negative is required"));
    };
    let d = first.len();
    let n = vectors.len();
    let mut data = vec![0.0; d * n];
    for (j, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(usage("negatives differ in dimension"));
        }
        for (i, x) in v.data().iter().enumerate() {
            data[i * n + j] = *x;
        }
    }
    Ok(Tensor::new(vec![d, n], data))
}

/// InfoNCE: `−log softmax` of the positive logit among positive and negatives.
///
/// `negatives` holds one negative per column, `[D, N]`.
pub fn loss_contrastive<B: Backend>(
    b: &B,
    v: &B::Value,
    v_pos: &B::Value,
    negatives: &B::Value,
    tau: f64,
) -> Result<B::Value> {
    if !(tau > 0.0) {
        return Err(usage("tau must be positive"));
    }
    let ns = b.shape(negatives);
    let d: usize = b.shape(v).iter().product();
    if ns.len() != 2 || ns[0] != d || ns[1] == 0 {
        return Err(usage(format!("negatives must be [{d}, N] with N ≥ 1, got {ns:?}")));
    }
    // logits relative to the positive one: ln(1 + Σ exp((v·v⁻ − v·v⁺)/τ))
    let pos = b.reshape(&b.dot(v, v_pos), &[1, 1]);
    let neg = b.matmul(&b.reshape(v, &[1, d]), negatives);
    let rel = b.sub(&neg, &b.matmul(&pos, &b.constant(Tensor::full(&[1, ns[1]], 1.0))));
    let logits = b.concat_cols(&b.constant(Tensor::zeros(&[1, 1])), &b.scale(&rel, 1.0 / tau));
    Ok(b.logsumexp(&logits))
}

/// Plain-value convenience form of [`loss_contrastive`].
pub fn contrastive(v: &Tensor, v_pos: &Tensor, negatives: &[Tensor], tau: f64) -> Result<f64> {
    Ok(loss_contrastive(&Eager, v, v_pos, &stack_columns(negatives)?, tau)?.item())
}

/// Global and local contrastive terms, both unweighted.
#[derive(Debug, Clone)]
pub struct Glocal<V> {
    pub global: V,
    /// Mean over patches; `None` without patches.
    pub local: Option<V>,
    /// `λg·global + λl·local`.
    pub weighted: V,
}

/// Contrastive loss with the whole image and each patch as queries, the
/// target text as positive.
pub fn loss_glocal<B: Backend>(
    b: &B,
    e_image: &B::Value,
    e_patches: &[B::Value],
    e_target: &B::Value,
    negatives: &B::Value,
    task: &StyleTask,
) -> Result<Glocal<B::Value>> {
    if e_patches.is_empty() && task.lambda_local > 0.0 {
        return Err(usage("local contrastive term needs at least one patch"));
    }
    let global = loss_contrastive(b, e_image, e_target, negatives, task.tau)?;
    let mut weighted = b.scale(&global, task.lambda_global);
    let mut local = None;
    if !e_patches.is_empty() {
        let mut acc = loss_contrastive(b, &e_patches[0], e_target, negatives, task.tau)?;
        for p in &e_patches[1..] {
            acc = b.add(&acc, &loss_contrastive(b, p, e_target, negatives, task.tau)?);
        }
        let mean = b.scale(&acc, 1.0 / e_patches.len() as f64);
        weighted = b.add(&weighted, &b.scale(&mean, task.lambda_local));
        local = Some(mean);
    }
    Ok(Glocal {
        global,
        local,
        weighted,
    })
}

/// Pairwise spread of sample weights along each ray, summed over rays:
/// `Σ_rays Σ_{i<j} w_i·w_j·|m_i − m_j|`, evaluated in O(K) per ray with
/// prefix sums of `w` and `w·m`. `weights` and `midpoints` are `[R, K]`,
/// midpoints nondecreasing along each ray.
pub fn loss_weight_reg<B: Backend>(b: &B, weights: &B::Value, midpoints: &Tensor) -> Result<B::Value> {
    let w_val = b.value(weights);
    if w_val.shape() != midpoints.shape() || w_val.shape().len() != 2 {
        return Err(usage("weights and midpoints must both be [R, K]"));
    }
    if w_val.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(usage("sample weights must be nonnegative"));
    }
    let (_, k) = midpoints.rows_cols();
    if k > 0
        && midpoints
            .data()
            .chunks(k)
            .any(|row| row.windows(2).any(|p| p[1] < p[0]))
    {
        return Err(usage("midpoints must be sorted along each ray"));
    }
    let m = b.constant(midpoints.clone());
    let w_before = b.excl_cumsum(weights);
    let wm_before = b.excl_cumsum(&b.mul(weights, &m));
    let per_sample = b.mul(weights, &b.sub(&b.mul(&m, &w_before), &wm_before));
    Ok(b.sum(&per_sample))
}

/// Direct O(K²) evaluation of the weight spread of one ray; any sample order.
pub fn weight_reg_pairs(weights: &[f64], midpoints: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..weights.len() {
        for j in i + 1..weights.len() {
            total += weights[i] * weights[j] * (midpoints[i] - midpoints[j]).abs();
        }
    }
    total
}

/// `Σ_ψ mean((ψ(I_tgt) − ψ(I_src))²)`.
pub fn loss_perceptual<B: Backend>(b: &B, features: &[B::Value], source: &[Tensor]) -> Result<B::Value> {
    if features.len() != source.len() || features.is_empty() {
        return Err(usage("feature layer counts differ"));
    }
    let mut total: Option<B::Value> = None;
    for (f, s) in features.iter().zip(source) {
        if b.shape(f) != s.shape() {
            return Err(usage("image sizes differ"));
        }
        let term = b.mean(&b.square(&b.sub(f, &b.constant(s.clone()))));
        total = Some(match total {
            None => term,
            Some(t) => b.add(&t, &term),
        });
    }
    Ok(total.expect("nonempty"))
}

/// Which terms of the stylization objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub dir: bool,
    pub con_global: bool,
    pub con_local: bool,
    pub per: bool,
    pub reg: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        dir: true,
        con_global: true,
        con_local: true,
        per: true,
        reg: true,
    };
    pub const NONE: Terms = Terms {
        dir: false,
        con_global: false,
        con_local: false,
        per: false,
        reg: false,
    };
}

impl Default for Terms {
    fn default() -> Self {
        Self::ALL
    }
}

/// Per-term values of one stylization loss evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub dir: f64,
    pub dir_degenerate: bool,
    pub con_global: f64,
    pub con_local: f64,
    /// `λg·con_global + λl·con_local`.
    pub con: f64,
    pub per: f64,
    pub reg: f64,
    pub total: f64,
}

impl Breakdown {
    /// `dir + con + λp·per + λr·reg`, in that order.
    pub fn combine(&self, task: &StyleTask) -> f64 {
        self.dir + self.con + task.lambda_perceptual * self.per + task.lambda_reg * self.reg
    }
}

/// Fixed quantities of a stylization step: the source view, prompts and
/// negatives, all embedded once.
#[derive(Debug, Clone)]
pub struct StyleTargets {
    pub e_src_image: Tensor,
    pub e_target: Tensor,
    pub e_source: Tensor,
    /// `[D, N]`.
    pub negatives: Tensor,
    pub source_features: Vec<Tensor>,
}

impl StyleTargets {
    pub fn embed(
        task: &StyleTask,
        negatives: &[&str],
        source_image: &Tensor,
        provider: &dyn EmbeddingProvider,
        extractor: &dyn FeatureExtractor,
    ) -> Result<Self> {
        let negs = negatives
            .iter()
            .map(|t| provider.embed_text(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            e_src_image: provider.embed_image(source_image)?,
            e_target: provider.embed_text(&task.target)?,
            e_source: provider.embed_text(&task.source)?,
            negatives: stack_columns(&negs)?,
            source_features: extractor.extract(source_image)?,
        })
    }
}

/// Quantities derived from the current render.
#[derive(Debug, Clone)]
pub struct StyleInputs<V> {
    pub e_image: V,
    pub e_patches: Vec<V>,
    pub features: Vec<V>,
}

/// The image-dependent part of the stylization objective:
/// `L_dir + λg·L_con^g + λl·L_con^l + λp·L_per` over the active terms.
/// The weight term is added by the caller because it depends on sample
/// weights rather than pixels.
pub fn image_objective<B: Backend>(
    b: &B,
    inputs: &StyleInputs<B::Value>,
    targets: &StyleTargets,
    task: &StyleTask,
    terms: Terms,
    breakdown: &mut Breakdown,
) -> Result<B::Value> {
    let c = |t: &Tensor| b.constant(t.clone());
    let mut total = b.scalar(0.0);

    let dir = loss_dir_relative(b, &inputs.e_image, &c(&targets.e_src_image), &c(&targets.e_target), &c(&targets.e_source));
    breakdown.dir = b.item(&dir.loss);
    breakdown.dir_degenerate = dir.degenerate;
    if terms.dir {
        total = b.add(&total, &dir.loss);
    } else {
        breakdown.dir = 0.0;
    }

    let negatives = c(&targets.negatives);
    let e_target = c(&targets.e_target);
    breakdown.con = 0.0;
    if terms.con_global {
        let g = loss_contrastive(b, &inputs.e_image, &e_target, &negatives, task.tau)?;
        breakdown.con_global = b.item(&g);
        breakdown.con += task.lambda_global * breakdown.con_global;
        total = b.add(&total, &b.scale(&g, task.lambda_global));
    }
    if terms.con_local && !inputs.e_patches.is_empty() {
        let mut acc = b.scalar(0.0);
        for p in &inputs.e_patches {
            acc = b.add(&acc, &loss_contrastive(b, p, &e_target, &negatives, task.tau)?);
        }
        let mean = b.scale(&acc, 1.0 / inputs.e_patches.len() as f64);
        breakdown.con_local = b.item(&mean);
        breakdown.con += task.lambda_local * breakdown.con_local;
        total = b.add(&total, &b.scale(&mean, task.lambda_local));
    }

    if terms.per {
        let per = loss_perceptual(b, &inputs.features, &targets.source_features)?;
        breakdown.per = b.item(&per);
        total = b.add(&total, &b.scale(&per, task.lambda_perceptual));
    }
    Ok(total)
}

/// The weight term of the objective: spread per ray, averaged over rays.
pub fn mean_weight_reg<B: Backend>(b: &B, weights: &B::Value, midpoints: &Tensor, rays: usize) -> Result<B::Value> {
    Ok(b.scale(&loss_weight_reg(b, weights, midpoints)?, 1.0 / rays.max(1) as f64))
}

/// Full stylization objective on plain values.
///
/// `weights`/`midpoints` are the `[H*W, K]` sample weights of `image`.
#[allow(clippy::too_many_arguments)]
pub fn total_style_loss(
    image: &Tensor,
    patches: &[Rect],
    targets: &StyleTargets,
    task: &StyleTask,
    provider: &dyn EmbeddingProvider,
    extractor: &dyn FeatureExtractor,
    weights: &Tensor,
    midpoints: &Tensor,
    terms: Terms,
) -> Result<Breakdown> {
    let inputs = StyleInputs {
        e_image: provider.embed_image(image)?,
        e_patches: patches
            .iter()
            .map(|r| provider.embed_image(&crop_rect(image, *r)))
            .collect::<Result<_>>()?,
        features: extractor.extract(image)?,
    };
    let mut out = Breakdown::default();
    image_objective(&Eager, &inputs, targets, task, terms, &mut out)?;
    if terms.reg {
        out.reg = mean_weight_reg(&Eager, weights, midpoints, weights.rows_cols().0)?.item();
    }
    out.total = out.combine(task);
    Ok(out)
}

pub fn crop_rect(image: &Tensor, r: Rect) -> Tensor {
    tensor::crop(image, r.y0, r.x0, r.height, r.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::embedding::{ToyEncoder, ToyFeatures};

    fn unit(seed: u64, d: usize) -> Tensor {
        let v: Vec<f64> = (0..d).map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin()).collect();
        Eager.normalize(&Tensor::vector(v))
    }

    #[test]
    fn reconstruction_examples() {
        let a = Tensor::full(&[4, 3], 0.2);
        assert_eq!(loss_reconstruction(&Eager, &a, &a).unwrap().item(), 0.0);
        let b = Tensor::full(&[4, 3], 0.7);
        assert!((loss_reconstruction(&Eager, &a, &b).unwrap().item() - 0.75).abs() < 1e-12);
        assert!(loss_reconstruction(&Eager, &a, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn directional_examples() {
        let e = unit(1, 8);
        let neg = e.map(|v| -v);
        assert!(loss_dir_absolute(&Eager, &e, &e).item().abs() < 1e-12);
        assert!((loss_dir_absolute(&Eager, &e, &neg).item() - 2.0).abs() < 1e-12);
        let x = Tensor::vector(vec![1.0, 0.0]);
        let y = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(loss_dir_absolute(&Eager, &x, &y).item(), 1.0);
        let (sum, mean) = loss_dir_absolute_views(&[x.clone(), y.clone()], &x);
        assert_eq!((sum, mean), (1.0, 0.5));

        let src = unit(2, 8);
        let a = unit(3, 8);
        let t_src = unit(4, 8);
        // target text moved in the same direction as the image
        let d = a.zip_map(&src, |p, q| p - q);
        let t_tgt = t_src.zip_map(&d, |p, q| p + 0.5 * q);
        let r = loss_dir_relative(&Eager, &a, &src, &t_tgt, &t_src);
        assert!(!r.degenerate && r.loss.item().abs() < 1e-12);
        let t_anti = t_src.zip_map(&d, |p, q| p - 0.5 * q);
        assert!((loss_dir_relative(&Eager, &a, &src, &t_anti, &t_src).loss.item() - 2.0).abs() < 1e-12);
        let flat = loss_dir_relative(&Eager, &src, &src, &t_tgt, &t_src);
        assert!(flat.degenerate);
        assert_eq!(flat.loss.item(), 1.0);
    }

    #[test]
    fn contrastive_examples() {
        let v = unit(1, 6);
        let n = unit(2, 6);
        // equal similarities → ln 2 for any temperature
        for tau in [0.01, 0.07, 1.0, 50.0] {
            assert!((contrastive(&v, &n, &[n.clone()], tau).unwrap() - 2f64.ln()).abs() < 1e-12);
        }
        let anti = v.map(|x| -x);
        let l = contrastive(&v, &v, &[anti], 0.07).unwrap();
        let expected = (-2.0f64 / 0.07).exp().ln_1p();
        assert!((l - expected).abs() < 1e-20 + 1e-9 * expected, "{l} vs {expected}");
        assert!((expected - 3.9e-13).abs() < 0.05e-13);
        assert!(contrastive(&v, &v, &[], 0.07).is_err());
        assert!(contrastive(&v, &v, &[n], 0.0).is_err());
    }

    #[test]
    fn glocal_composes_contrastive_calls() {
        let enc = ToyEncoder::new(5);
        let mut task = StyleTask::new("a zombie");
        let negs: Vec<Tensor> = ["fire", "ice", "gold"].iter().map(|t| enc.embed_text(t).unwrap()).collect();
        let nt = stack_columns(&negs).unwrap();
        let img = Tensor::new(vec![10, 10, 3], (0..300).map(|i| (i as f64 * 0.01) % 1.0).collect());
        let e_img = enc.embed_image(&img).unwrap();
        let rects = [Rect { x0: 0, y0: 0, width: 4, height: 4 }, Rect { x0: 5, y0: 3, width: 4, height: 4 }];
        let e_p: Vec<Tensor> = rects.iter().map(|r| enc.embed_image(&crop_rect(&img, *r)).unwrap()).collect();
        let e_t = enc.embed_text(&task.target).unwrap();
        let out = loss_glocal(&Eager, &e_img, &e_p, &e_t, &nt, &task).unwrap();
        let lg = contrastive(&e_img, &e_t, &negs, 0.07).unwrap();
        let ll = (contrastive(&e_p[0], &e_t, &negs, 0.07).unwrap() + contrastive(&e_p[1], &e_t, &negs, 0.07).unwrap()) / 2.0;
        assert!((out.weighted.item() - (0.2 * lg + 0.1 * ll)).abs() < 1e-12);

        let same = loss_glocal(&Eager, &e_img, &[e_img.clone()], &e_t, &nt, &task).unwrap();
        assert!((same.weighted.item() - 0.3 * lg).abs() < 1e-12);

        task.lambda_global = 0.0;
        task.lambda_local = 0.0;
        assert_eq!(loss_glocal(&Eager, &e_img, &e_p, &e_t, &nt, &task).unwrap().weighted.item(), 0.0);
    }

    #[test]
    fn weight_reg_examples() {
        let w = Tensor::new(vec![1, 2], vec![0.5, 0.5]);
        let m = Tensor::new(vec![1, 2], vec![0.0, 1.0]);
        assert!((loss_weight_reg(&Eager, &w, &m).unwrap().item() - 0.25).abs() < 1e-15);
        let one = Tensor::new(vec![1, 3], vec![0.0, 0.9, 0.0]);
        let m3 = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(loss_weight_reg(&Eager, &one, &m3).unwrap().item(), 0.0);
        let same = Tensor::new(vec![1, 3], vec![2.0, 2.0, 2.0]);
        assert_eq!(loss_weight_reg(&Eager, &Tensor::full(&[1, 3], 0.3), &same).unwrap().item(), 0.0);
        assert!(loss_weight_reg(&Eager, &Tensor::new(vec![1, 2], vec![-0.1, 0.5]), &m).is_err());
        assert!(loss_weight_reg(&Eager, &w, &Tensor::new(vec![1, 2], vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn perceptual_is_zero_with_zero_gradient_at_source() {
        let fx = ToyFeatures::new(1);
        let img = Tensor::new(vec![8, 8, 3], (0..192).map(|i| (i as f64 * 0.013) % 1.0).collect());
        let src = fx.extract(&img).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(img.clone());
        let feats = fx.extract_on(&tape, &x);
        let l = loss_perceptual(&tape, &feats, &src).unwrap();
        assert_eq!(tape.item(&l), 0.0);
        assert_eq!(tape.backward(l).unwrap().get(x).max_abs(), 0.0);
    }

    #[test]
    fn reg_gradient_matches_finite_differences() {
        let w = Tensor::new(vec![2, 4], vec![0.1, 0.3, 0.2, 0.05, 0.4, 0.02, 0.3, 0.2]);
        let m = Tensor::new(vec![2, 4], vec![2.0, 2.5, 3.1, 4.0, 2.2, 2.3, 3.0, 5.0]);
        let tape = Tape::new();
        let x = tape.leaf(w.clone());
        let l = loss_weight_reg(&tape, &x, &m).unwrap();
        let g = tape.backward(l).unwrap().get(x);
        let err = grad_check(
            |v| loss_weight_reg(&Eager, &Tensor::new(vec![2, 4], v.to_vec()), &m).unwrap().item(),
            w.data(),
            g.data(),
            1e-6,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn degenerate_total_breakdown() {
        let enc = ToyEncoder::new(2);
        let fx = ToyFeatures::new(2);
        let mut task = StyleTask::new("a zombie");
        task.lambda_global = 0.0;
        task.lambda_local = 0.0;
        task.lambda_perceptual = 0.0;
        task.lambda_reg = 0.0;
        let img = Tensor::full(&[10, 10, 3], 0.4);
        let negs = task.negatives_for_step(0, 0);
        let targets = StyleTargets::embed(&task, &negs, &img, &enc, &fx).unwrap();
        let w = Tensor::full(&[100, 4], 0.1);
        let m = Tensor::new(vec![100, 4], (0..400).map(|i| (i % 4) as f64).collect());
        let rect = [Rect { x0: 0, y0: 0, width: 4, height: 4 }];
        let out = total_style_loss(&img, &rect, &targets, &task, &enc, &fx, &w, &m, Terms::ALL).unwrap();
        assert!(out.dir_degenerate);
        assert_eq!(out.dir, 1.0);
        assert_eq!(out.con, 0.0);
        assert_eq!(out.per, 0.0);
        assert_eq!(out.total, 1.0);
        assert_eq!(out.total, out.combine(&task));
    }

    #[test]
    fn task_defaults_and_validation() {
        let t = StyleTask::new("zombie");
        assert_eq!((t.lambda_global, t.lambda_local, t.lambda_perceptual, t.lambda_reg), (0.2, 0.1, 2.0, 0.1));
        assert_eq!(t.tau, 0.07);
        assert_eq!(t.patch_fraction, 0.1);
        assert_eq!(t.negatives.len(), 200);
        assert!(t.validate().is_ok());
        let mut bad = t.clone();
        bad.negatives.push("zombie".into());
        assert!(bad.validate().is_err());
        assert!(bad.clone().without_target_in_negatives().validate().is_ok());
        bad = t.clone();
        bad.tau = 0.0;
        assert!(bad.validate().is_err());
        bad = t.clone();
        bad.lambda_reg = -1.0;
        assert!(bad.validate().is_err());
        bad = t.clone();
        bad.patch_fraction = 1.5;
        assert!(bad.validate().is_err());
        assert!(StyleTask::default().validate().is_err());
    }

    #[test]
    fn negatives_per_step_are_distinct_and_seeded() {
        let t = StyleTask::new("zombie");
        let a = t.negatives_for_step(7, 3);
        assert_eq!(a.len(), 32);
        assert_eq!(a, t.negatives_for_step(7, 3));
        assert_ne!(a, t.negatives_for_step(7, 4));
        let mut s = a.clone();
        s.dedup();
        assert_eq!(s.len(), 32);
    }
}
