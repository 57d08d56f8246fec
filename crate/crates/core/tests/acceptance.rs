//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass a substring to run a subset:
//! `cargo test --test acceptance -- recon`.

use std::f64::consts::{LN_2, PI};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use radiart::autodiff::{grad_check, Backend, Eager, Tape};
use radiart::config::RunConfig;
use radiart::embedding::{EmbeddingProvider, FeatureExtractor, ToyEncoder, ToyFeatures};
use radiart::field::{init_params, init_params_with_density_bias, FieldArch, FieldParams};
use radiart::geometry::{
    orbit_camera, synthetic_dataset, Camera, Intrinsics, MultiViewDataset, Ray, SyntheticScene,
};
use radiart::losses::{
    contrastive, image_objective, loss_contrastive, loss_dir_absolute, loss_dir_relative, loss_glocal,
    loss_perceptual, loss_reconstruction, loss_weight_reg, mean_weight_reg, stack_columns, total_style_loss,
    weight_reg_pairs, Breakdown, StyleInputs, StyleTargets, StyleTask, Terms,
};
use radiart::meshing::{
    bake_density_grid, bake_scene_grid, marching_cubes, mean_vertex_displacement, Aabb, DEFAULT_ISO,
};
use radiart::renderer::{
    composite, composite_batch, render_region, render_rays, render_view, MlpField, RadianceField, RayBatch, Rect,
    RenderConfig, SamplingStrategy,
};
use radiart::tensor::{self, Tensor};
use radiart::trainer::{
    deferred_style_step, full_graph_style_gradient, sample_patches, stylize, train_reconstruction, Stage1Config,
    Stage2Config, StyleContext, TrainReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    ("gradient suite", gradient_suite),
    ("compositing oracle", compositing_oracle),
    ("deferred backprop exactness", deferred_exactness),
    ("contrastive identities", contrastive_identities),
    ("weight regularizer equivalence", weight_reg_equivalence),
    ("reconstruction", reconstruction),
    ("stylization direction", stylization_direction),
    ("geometry modulation", geometry_modulation),
    ("hyperparameter fidelity", hyperparameter_fidelity),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn unit_vector(r: &mut ChaCha8Rng, d: usize) -> Tensor {
    let v: Vec<f64> = (0..d).map(|_| normal(r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Tensor::vector(v.into_iter().map(|x| x / n).collect())
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| r.random_range(0.05..0.95)).collect())
}

fn tiny_arch() -> FieldArch {
    FieldArch {
        pe_levels_pos: 2,
        pe_levels_dir: 1,
        hidden_width: 8,
        depth: 2,
    }
}

/// Xavier weights plus random biases, so every parameter matters.
fn random_params(arch: &FieldArch, seed: u64) -> FieldParams {
    let mut p = init_params(arch, seed);
    let mut r = rng(seed ^ 0xb1a5);
    for t in &mut p.tensors {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = 0.5 * normal(&mut r));
        }
    }
    p
}

fn square_camera(res: usize, azimuth: f64, elevation: f64) -> Camera {
    let f = res as f64 * 1.1;
    let k = Intrinsics {
        fx: f,
        fy: f,
        cx: res as f64 / 2.0,
        cy: res as f64 / 2.0,
        width: res,
        height: res,
    };
    orbit_camera(azimuth, elevation, 4.0, k).unwrap()
}

const NEAR: f64 = 2.6;
const FAR: f64 = 5.4;

fn render_config(samples: usize, seed: u64) -> RenderConfig {
    RenderConfig {
        samples,
        near: NEAR,
        far: FAR,
        seed,
        ..RenderConfig::default()
    }
}

fn max_rel_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    let scale = b.iter().map(Tensor::max_abs).fold(0.0, f64::max).max(1e-300);
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
        / scale
}

// ---------------------------------------------------------------------------
// Gradient suite

/// A scalar objective of a list of tensors, evaluable on any backend.
trait Objective {
    fn inputs(&self) -> Vec<Tensor>;
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value;
}

/// Max relative error of reverse mode against central differences.
fn fd_error<O: Objective>(o: &O) -> f64 {
    let inputs = o.inputs();
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = o.eval(&tape, &leaves);
    let grads = tape.backward(out).unwrap();
    let g: Vec<f64> = leaves.iter().flat_map(|v| grads.get(*v).into_data()).collect();
    let x: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let rebuild = |flat: &[f64]| {
        let mut off = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.len();
                off += n;
                Tensor::new(t.shape().to_vec(), flat[off - n..off].to_vec())
            })
            .collect::<Vec<_>>()
    };
    grad_check(|flat| o.eval(&Eager, &rebuild(flat)).item(), &x, &g, 1e-5)
}

struct Reconstruction {
    arch: FieldArch,
    params: FieldParams,
    batch: RayBatch,
    target: Tensor,
}

impl Objective for Reconstruction {
    fn inputs(&self) -> Vec<Tensor> {
        self.params.tensors.clone()
    }
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value {
        let out = render_rays(b, x, &self.arch, &self.batch, [0.2, 0.3, 0.4]);
        loss_reconstruction(b, &out.pixels, &b.constant(self.target.clone())).unwrap()
    }
}

struct WeightSpread {
    arch: FieldArch,
    params: FieldParams,
    batch: RayBatch,
}

impl Objective for WeightSpread {
    fn inputs(&self) -> Vec<Tensor> {
        self.params.tensors.clone()
    }
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value {
        let out = render_rays(b, x, &self.arch, &self.batch, [0.0; 3]);
        mean_weight_reg(b, &out.weights, &self.batch.midpoints, self.batch.len()).unwrap()
    }
}

struct DirAbsolute {
    enc: ToyEncoder,
    image: Tensor,
    text: Tensor,
}

impl Objective for DirAbsolute {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.image.clone()]
    }
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value {
        let e = self.enc.embed_image_on(b, &x[0]);
        loss_dir_absolute(b, &e, &b.constant(self.text.clone()))
    }
}

struct DirRelative {
    enc: ToyEncoder,
    image: Tensor,
    e_src_image: Tensor,
    e_target: Tensor,
    e_source: Tensor,
}

impl Objective for DirRelative {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.image.clone()]
    }
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value {
        let c = |t: &Tensor| b.constant(t.clone());
        let e = self.enc.embed_image_on(b, &x[0]);
        let d = loss_dir_relative(b, &e, &c(&self.e_src_image), &c(&self.e_target), &c(&self.e_source));
        assert!(!d.degenerate);
        d.loss
    }
}

struct Contrastive {
    v: Tensor,
    pos: Tensor,
    negatives: Tensor,
    tau: f64,
}

impl Objective for Contrastive {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.v.clone(), self.pos.clone(), self.negatives.clone()]
    }
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value {
        loss_contrastive(b, &x[0], &x[1], &x[2], self.tau).unwrap()
    }
}

struct GlobalLocal {
    e_image: Tensor,
    patches: Vec<Tensor>,
    target: Tensor,
    negatives: Tensor,
    task: StyleTask,
}

impl Objective for GlobalLocal {
    fn inputs(&self) -> Vec<Tensor> {
        let mut v = vec![self.e_image.clone()];
        v.extend(self.patches.iter().cloned());
        v
    }
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value {
        let c = |t: &Tensor| b.constant(t.clone());
        loss_glocal(b, &x[0], &x[1..], &c(&self.target), &c(&self.negatives), &self.task)
            .unwrap()
            .weighted
    }
}

struct Perceptual {
    features: ToyFeatures,
    image: Tensor,
    source: Vec<Tensor>,
}

impl Objective for Perceptual {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.image.clone()]
    }
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value {
        let f = self.features.extract_on(b, &x[0]);
        loss_perceptual(b, &f, &self.source).unwrap()
    }
}

/// The whole stylization objective as a function of the field parameters.
struct Composite {
    arch: FieldArch,
    params: FieldParams,
    camera: Camera,
    render: RenderConfig,
    task: StyleTask,
    targets: StyleTargets,
    enc: ToyEncoder,
    features: ToyFeatures,
    patches: Vec<Rect>,
}

impl Objective for Composite {
    fn inputs(&self) -> Vec<Tensor> {
        self.params.tensors.clone()
    }
    fn eval<B: Backend>(&self, b: &B, x: &[B::Value]) -> B::Value {
        let (w, h) = (self.camera.width(), self.camera.height());
        let batch = RayBatch::for_rect(&self.camera, Rect::full(w, h), &self.render).unwrap();
        let out = render_rays(b, x, &self.arch, &batch, self.render.background);
        let image = b.reshape(&out.pixels, &[h, w, 3]);
        let inputs = StyleInputs {
            e_image: self.enc.embed_image_on(b, &image),
            e_patches: self
                .patches
                .iter()
                .map(|r| self.enc.embed_image_on(b, &b.crop(&image, r.y0, r.x0, r.height, r.width)))
                .collect(),
            features: self.features.extract_on(b, &image),
        };
        let mut bd = Breakdown::default();
        let img = image_objective(b, &inputs, &self.targets, &self.task, Terms::ALL, &mut bd).unwrap();
        let reg = mean_weight_reg(b, &out.weights, &batch.midpoints, w * h).unwrap();
        b.add(&img, &b.scale(&reg, self.task.lambda_reg))
    }
}

fn random_rays(r: &mut ChaCha8Rng, n: usize) -> Vec<Ray> {
    (0..n)
        .map(|_| {
            let cam = square_camera(8, r.random_range(0.0..2.0 * PI), r.random_range(-0.5..0.5));
            cam.generate_ray(r.random_range(2.0..6.0), r.random_range(2.0..6.0)).unwrap()
        })
        .collect()
}

fn style_targets(task: &StyleTask, enc: &ToyEncoder, fx: &ToyFeatures, source: &Tensor, seed: u64) -> StyleTargets {
    let negs = task.negatives_for_step(seed, 0);
    StyleTargets::embed(task, &negs[..4], source, enc, fx).unwrap()
}

const INSTANCES: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let arch = tiny_arch();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name, e)),
    };
    for i in 0..INSTANCES {
        let mut r = rng(1000 + i);
        let cfg = RenderConfig {
            samples: 8,
            seed: i,
            ..render_config(8, i)
        };
        let rays = random_rays(&mut r, 4);
        let ids: Vec<u64> = (0..rays.len() as u64).collect();
        let batch = RayBatch::new(rays, &ids, &cfg).unwrap();
        let params = random_params(&arch, i);

        let target = Tensor::new(vec![4, 3], (0..12).map(|_| r.random()).collect());
        record(
            "reconstruction",
            fd_error(&Reconstruction {
                arch,
                params: params.clone(),
                batch: batch.clone(),
                target,
            }),
        );
        record(
            "weight spread",
            fd_error(&WeightSpread {
                arch,
                params: params.clone(),
                batch,
            }),
        );

        let enc = ToyEncoder::new(i);
        let fx = ToyFeatures::new(i);
        let image = random_image(&mut r, 8, 8);
        let text = enc.embed_text("a zombie").unwrap();
        record(
            "directional (absolute)",
            fd_error(&DirAbsolute {
                enc: enc.clone(),
                image: image.clone(),
                text: text.clone(),
            }),
        );
        record(
            "directional (relative)",
            fd_error(&DirRelative {
                enc: enc.clone(),
                image: image.clone(),
                e_src_image: enc.embed_image(&random_image(&mut r, 8, 8)).unwrap(),
                e_target: text.clone(),
                e_source: enc.embed_text("a photo").unwrap(),
            }),
        );

        let d = 16;
        let n = r.random_range(1..9);
        let negs: Vec<Tensor> = (0..n).map(|_| unit_vector(&mut r, d)).collect();
        record(
            "contrastive",
            fd_error(&Contrastive {
                v: unit_vector(&mut r, d),
                pos: unit_vector(&mut r, d),
                negatives: stack_columns(&negs).unwrap(),
                tau: r.random_range(0.05..1.0),
            }),
        );
        record(
            "global-local contrastive",
            fd_error(&GlobalLocal {
                e_image: unit_vector(&mut r, d),
                patches: (0..3).map(|_| unit_vector(&mut r, d)).collect(),
                target: unit_vector(&mut r, d),
                negatives: stack_columns(&negs).unwrap(),
                task: StyleTask::new("a zombie"),
            }),
        );
        record(
            "perceptual",
            fd_error(&Perceptual {
                features: fx.clone(),
                image: image.clone(),
                source: fx.extract(&random_image(&mut r, 8, 8)).unwrap(),
            }),
        );

        let camera = square_camera(6, r.random_range(0.0..2.0 * PI), 0.3);
        let render = render_config(6, i);
        let task = StyleTask {
            patch_fraction: 0.67,
            ..StyleTask::new("a zombie")
        };
        let source = render_view(&MlpField { params: &random_params(&arch, 500 + i), arch: &arch }, &camera, &render).unwrap();
        let composite = Composite {
            arch,
            params: params.clone(),
            camera,
            render,
            targets: style_targets(&task, &enc, &fx, &source, i),
            patches: sample_patches(6, 6, task.patch_fraction, 2, i).unwrap(),
            task,
            enc,
            features: fx,
        };
        record("full objective", fd_error(&composite));

        // The plain-value objective agrees with the differentiable one.
        let out = render_region(&MlpField { params: &params, arch: &arch }, &composite.camera, &composite.render, None, true).unwrap();
        let plain = total_style_loss(
            &out.image,
            &composite.patches,
            &composite.targets,
            &composite.task,
            &composite.enc,
            &composite.features,
            out.weights.as_ref().unwrap(),
            out.midpoints.as_ref().unwrap(),
            Terms::ALL,
        )
        .unwrap()
        .total;
        let tracked = composite.eval(&Eager, &params.tensors).item();
        record("full objective (plain vs tracked value)", (plain - tracked).abs() / tracked.abs().max(1.0));
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        max < GRAD_TOL && elapsed < Duration::from_secs(300),
        format!("{INSTANCES} instances each, max rel err: {detail}; {:.1}s (limit 300s)", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// Compositing

fn compositing_oracle() -> Outcome {
    // A medium of constant density filling the whole sampled interval.
    let sigma = 0.8;
    let color = [0.9, 0.4, 0.1];
    let bg = [0.1, 0.2, 0.3];
    let medium = SyntheticScene::Slab {
        z_min: -100.0,
        z_max: 100.0,
        sigma,
        color,
    };
    let cfg = RenderConfig {
        samples: 512,
        near: 0.5,
        far: 3.0,
        background: bg,
        seed: 7,
        strategy: SamplingStrategy::Stratified,
    };
    let mut r = rng(11);
    let rays: Vec<Ray> = (0..16)
        .map(|_| {
            let d = unit_vector(&mut r, 3);
            Ray {
                origin: [0.0; 3],
                direction: [d.data()[0], d.data()[1], d.data()[2]],
            }
        })
        .collect();
    let ids: Vec<u64> = (0..16).collect();
    let batch = RayBatch::new(rays, &ids, &cfg).unwrap();
    let (s, c) = medium.query(&batch).unwrap();
    let out = composite_batch(&Eager, &s, &c, &batch, bg);
    let k = cfg.samples;
    let mut worst_t: f64 = 0.0;
    let mut worst_px: f64 = 0.0;
    for ray in 0..batch.len() {
        let w = &out.weights.data()[ray * k..(ray + 1) * k];
        let mids = &batch.midpoints.data()[ray * k..(ray + 1) * k];
        let deltas = &batch.deltas.data()[ray * k..(ray + 1) * k];
        // T_k = 1 − Σ_{j<k} w_j at the start of segment k; light travels
        // through the medium from the first sample on.
        let first = mids[0] - 0.5 * deltas[0];
        let mut t = 1.0;
        for j in 0..k {
            let start = mids[j] - 0.5 * deltas[j];
            worst_t = worst_t.max((t - (-sigma * (start - first)).exp()).abs());
            t -= w[j];
        }
        let tr = (-sigma * (cfg.far - first)).exp();
        worst_t = worst_t.max((t - tr).abs());
        for ch in 0..3 {
            let expect = color[ch] * (1.0 - tr) + bg[ch] * tr;
            worst_px = worst_px.max((out.pixels.data()[ray * 3 + ch] - expect).abs());
        }
    }

    // Random rays: weights sum to at most one and transmittance never rises.
    let mut violations = 0;
    let mut r = rng(12);
    for _ in 0..100_000 {
        let k = r.random_range(1..40);
        let sigmas: Vec<f64> = (0..k)
            .map(|_| match r.random_range(0..4) {
                0 => 0.0,
                1 => r.random_range(0.0..1e4),
                _ => r.random_range(0.0..5.0),
            })
            .collect();
        let colors = vec![[0.5; 3]; k];
        let mut bounds: Vec<f64> = (0..=k).map(|_| r.random_range(0.0..10.0)).collect();
        bounds.sort_by(f64::total_cmp);
        let res = composite(&sigmas, &colors, &bounds, [0.0; 3]).unwrap();
        let sum: f64 = res.weights.iter().sum();
        let monotone = res.transmittance.windows(2).all(|p| p[1] <= p[0]);
        let bounded = res.weights.iter().all(|w| *w >= 0.0) && sum <= 1.0 + 1e-12;
        if !(monotone && bounded) {
            violations += 1;
        }
    }
    outcome(
        worst_t < 1e-3 && worst_px < 1e-3 && violations == 0,
        format!(
            "K=512 homogeneous medium: max |T − e^(−σt)| {worst_t:.1e}, pixel err {worst_px:.1e} (tol 1e-3); \
             1e5 random rays: {violations} violations of Σw ≤ 1 / monotone T"
        ),
    )
}

// ---------------------------------------------------------------------------
// Deferred backprop

fn deferred_exactness() -> Outcome {
    let start = Instant::now();
    let arch = FieldArch::desk();
    let camera = square_camera(16, 0.4, 0.3);
    let render = render_config(32, 5);
    let src = init_params_with_density_bias(&arch, 1, -1.0);
    let params = random_params(&arch, 2);
    let task = StyleTask {
        patch_fraction: 0.25,
        ..StyleTask::new("a zombie")
    };
    let (enc, fx) = (ToyEncoder::new(3), ToyFeatures::new(3));
    let source = render_view(&MlpField { params: &src, arch: &arch }, &camera, &render).unwrap();
    let negs = task.negatives_for_step(0, 0);
    let ctx = StyleContext {
        task: &task,
        targets: StyleTargets::embed(&task, &negs, &source, &enc, &fx).unwrap(),
        provider: &enc,
        extractor: &fx,
    };
    let patches = sample_patches(16, 16, task.patch_fraction, 4, 9).unwrap();
    let only = |f: fn(&mut Terms)| {
        let mut t = Terms::NONE;
        f(&mut t);
        t
    };
    let cases = [
        ("dir", only(|t| t.dir = true)),
        ("con_g", only(|t| t.con_global = true)),
        ("con_l", only(|t| t.con_local = true)),
        ("per", only(|t| t.per = true)),
        ("reg", only(|t| t.reg = true)),
        ("total", Terms::ALL),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let mut all_nonzero = true;
    for (name, terms) in cases {
        let tiled = deferred_style_step(&params, &arch, &camera, &render, &ctx, &patches, terms, 5).unwrap();
        let (value, mono) =
            full_graph_style_gradient(&params, &arch, &camera, &render, &task, &ctx.targets, &enc, &fx, &patches, terms)
                .unwrap();
        let e = max_rel_diff(&tiled.grads, &mono);
        let value_err = (tiled.breakdown.total - value).abs() / value.abs().max(1e-300);
        all_nonzero &= mono.iter().any(|g| g.max_abs() > 0.0);
        worst = worst.max(e).max(value_err);
        parts.push(format!("{name} {e:.1e}"));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-6 && all_nonzero && elapsed < Duration::from_secs(120),
        format!(
            "16×16 desk render, 5px tiles, max rel grad diff: {}; {:.1}s (limit 120s)",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Contrastive

/// `ln(1 + Σ exp((v·n − v·p)/τ))` straight from the definition.
fn contrastive_oracle(v: &Tensor, pos: &Tensor, negs: &[Tensor], tau: f64) -> f64 {
    let sp = tensor::dot(v, pos) / tau;
    let num = sp.exp();
    let den = num + negs.iter().map(|n| (tensor::dot(v, n) / tau).exp()).sum::<f64>();
    -(num / den).ln()
}

fn contrastive_identities() -> Outcome {
    const DRAWS: u64 = 1000;
    let mut r = rng(21);
    let (mut sym, mut limit, mut oracle, mut mono) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for _ in 0..DRAWS {
        let d = r.random_range(2..64);
        let tau = r.random_range(0.05..2.0);
        let v = unit_vector(&mut r, d);
        // Reflecting the positive across the hyperplane orthogonal to a vector
        // perpendicular to v keeps its similarity to v.
        let pos = unit_vector(&mut r, d);
        let mut u = unit_vector(&mut r, d);
        let along = tensor::dot(&u, &v);
        u = u.zip_map(&v, |a, b| a - along * b);
        let un = tensor::norm(&u);
        let u = u.map(|a| a / un);
        let pu = tensor::dot(&pos, &u);
        let neg = pos.zip_map(&u, |a, b| a - 2.0 * pu * b);
        sym = sym.max((contrastive(&v, &pos, &[neg], tau).unwrap() - LN_2).abs());

        let n = r.random_range(1..40);
        let negs: Vec<Tensor> = (0..n).map(|_| unit_vector(&mut r, d)).collect();
        limit = limit.max((contrastive(&v, &pos, &negs, 1e9).unwrap() - (1.0 + n as f64).ln()).abs());
        let got = contrastive(&v, &pos, &negs, tau).unwrap();
        oracle = oracle.max((got - contrastive_oracle(&v, &pos, &negs, tau)).abs() / got.abs().max(1.0));

        // Loss falls as the positive similarity rises and grows with a negative's.
        let theta = |r: &mut ChaCha8Rng| r.random_range(0.0..PI);
        let (t1, t2) = (theta(&mut r), theta(&mut r));
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if far - near < 1e-6 {
            continue;
        }
        let e = |i: usize| Tensor::vector((0..3).map(|j| if j == i { 1.0 } else { 0.0 }).collect());
        let at = |t: f64| Tensor::vector(vec![t.cos(), t.sin(), 0.0]);
        let v3 = e(0);
        let fixed = Tensor::vector(vec![0.3f64.cos(), 0.0, 0.3f64.sin()]);
        let l_close = contrastive(&v3, &at(near), &[fixed.clone()], tau).unwrap();
        let l_far = contrastive(&v3, &at(far), &[fixed.clone()], tau).unwrap();
        let n_close = contrastive(&v3, &fixed, &[at(near)], tau).unwrap();
        let n_far = contrastive(&v3, &fixed, &[at(far)], tau).unwrap();
        if !(l_close < l_far && n_close > n_far) {
            mono += 1;
        }
        let _ = e(1);
    }
    outcome(
        sym < 1e-12 && limit < 1e-6 && oracle < 1e-12 && mono == 0,
        format!(
            "{DRAWS} draws: |L − ln 2| {sym:.1e}, |L(τ→∞) − ln(1+N)| {limit:.1e}, vs definition {oracle:.1e}, \
             {mono} monotonicity violations"
        ),
    )
}

// ---------------------------------------------------------------------------
// Weight regularizer

fn weight_reg_equivalence() -> Outcome {
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = r.random_range(1..128);
        let w: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0) / k as f64).collect();
        let mut m: Vec<f64> = (0..k).map(|_| r.random_range(2.0..6.0)).collect();
        m.sort_by(f64::total_cmp);
        let fast = loss_weight_reg(&Eager, &Tensor::new(vec![1, k], w.clone()), &Tensor::new(vec![1, k], m.clone()))
            .unwrap()
            .item();
        let slow = weight_reg_pairs(&w, &m);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1.0));
    }

    let run = style_run();
    let (with, without) = (run.reg_with, run.reg_without);
    outcome(
        worst < 1e-10 && with < without,
        format!(
            "1000 rays: prefix vs pairwise max diff {worst:.1e} (tol 1e-10); paired stylization from a noisy field: \
             spread {:.5} → λr=0.1 {with:.5} vs λr=0 {without:.5}",
            run.reg_start
        ),
    )
}

// ---------------------------------------------------------------------------
// Reconstruction

fn sphere_dataset(res: usize, poses: &[(f64, f64)]) -> MultiViewDataset {
    let cams: Vec<Camera> = poses.iter().map(|&(az, el)| square_camera(res, az, el)).collect();
    synthetic_dataset(&SyntheticScene::default_sphere(), &cams, NEAR, FAR, 0.002).unwrap()
}

fn ring(n: usize, elevation: f64, offset: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| (offset + i as f64 / n as f64 * 2.0 * PI, elevation))
        .collect()
}

fn reconstruction() -> Outcome {
    let start = Instant::now();
    let train = sphere_dataset(32, &ring(8, 0.35, 0.0));
    // Held-out poses sit halfway between training poses.
    let held = sphere_dataset(32, &[(PI / 8.0, 0.35), (PI + PI / 8.0, 0.35)]);
    let arch = FieldArch::desk();
    let render = render_config(32, 1);
    let cfg = Stage1Config {
        epochs: 1000,
        lr: 2e-3,
        rays_per_batch: 128,
        max_steps: Some(1000),
        ..Stage1Config::default()
    };
    let init = init_params_with_density_bias(&arch, 0, cfg.init_density_bias);
    let (params, report) = train_reconstruction(&train, Some(&held), &arch, &render, &cfg, init, 0, true).unwrap();
    let elapsed = start.elapsed();
    let psnr = *report.epoch_psnr.last().unwrap();
    let uniform = RenderConfig {
        strategy: SamplingStrategy::Uniform,
        samples: 64,
        ..render
    };
    let psnr_uniform = radiart::trainer::evaluate_psnr(&params, &arch, &held, &uniform).unwrap();
    outcome(
        psnr > 25.0 && report.steps.len() <= 2000 && elapsed < Duration::from_secs(600),
        format!(
            "8 poses, desk arch, {} steps: held-out PSNR {psnr:.2} dB ({psnr_uniform:.2} dB at 64 uniform samples), \
             limit 25 dB; {:.0}s (limit 600s)",
            report.steps.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Stylization, shared by the direction, regularizer and geometry criteria

struct StyleRun {
    arch: FieldArch,
    f_rec: FieldParams,
    f_sty: FieldParams,
    report: TrainReport,
    cos_before: f64,
    cos_after: f64,
    reg_start: f64,
    reg_with: f64,
    reg_without: f64,
}

const STYLE_RES: usize = 40;
const STYLE_STEPS: usize = 500;

fn small_arch() -> FieldArch {
    FieldArch {
        pe_levels_pos: 4,
        pe_levels_dir: 1,
        hidden_width: 32,
        depth: 2,
    }
}

fn mean_cosine(params: &FieldParams, arch: &FieldArch, cams: &[Camera], render: &RenderConfig, enc: &ToyEncoder, target: &Tensor) -> f64 {
    let field = MlpField { params, arch };
    cams.iter()
        .map(|c| tensor::dot(&enc.embed_image(&render_view(&field, c, render).unwrap()).unwrap(), target))
        .sum::<f64>()
        / cams.len() as f64
}

fn mean_spread(params: &FieldParams, arch: &FieldArch, cams: &[Camera], render: &RenderConfig) -> f64 {
    let field = MlpField { params, arch };
    let mut total = 0.0;
    let mut rays = 0;
    for c in cams {
        let out = render_region(&field, c, render, None, true).unwrap();
        let w = out.weights.unwrap();
        total += loss_weight_reg(&Eager, &w, &out.midpoints.unwrap()).unwrap().item();
        rays += w.rows_cols().0;
    }
    total / rays as f64
}

fn style_run() -> &'static StyleRun {
    static RUN: OnceLock<StyleRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let arch = small_arch();
        let data = sphere_dataset(STYLE_RES, &ring(8, 0.35, 0.0));
        let cams = data.cameras();
        let render = render_config(24, 1);
        let rec = Stage1Config {
            epochs: 1000,
            lr: 5e-3,
            rays_per_batch: 256,
            max_steps: Some(400),
            ..Stage1Config::default()
        };
        let init = init_params_with_density_bias(&arch, 0, rec.init_density_bias);
        let (f_rec, _) = train_reconstruction(&data, None, &arch, &render, &rec, init, 0, true).unwrap();

        let task = StyleTask::new("a zombie");
        let (enc, fx) = (ToyEncoder::new(0), ToyFeatures::new(0));
        let sty = Stage2Config {
            epochs: 1000,
            max_steps: Some(STYLE_STEPS),
            tile: 32,
            ..Stage2Config::default()
        };
        let (f_sty, report) = stylize(&f_rec, &arch, &cams, &render, &task, &enc, &fx, &sty, 0, true).unwrap();
        let target = enc.embed_text(&task.target).unwrap();
        let cos_before = mean_cosine(&f_rec, &arch, &cams, &render, &enc, &target);
        let cos_after = mean_cosine(&f_sty, &arch, &cams, &render, &enc, &target);

        // Paired runs from a field whose density carries injected noise.
        let mut noisy = f_rec.clone();
        let mut r = rng(41);
        let head = arch.density_head_index();
        noisy.tensors[head].data_mut().iter_mut().for_each(|v| *v += 0.5 * normal(&mut r));
        let short = Stage2Config {
            max_steps: Some(100),
            ..sty
        };
        let paired = |lambda_reg: f64| {
            let task = StyleTask {
                lambda_reg,
                ..task.clone()
            };
            let (f, _) = stylize(&noisy, &arch, &cams, &render, &task, &enc, &fx, &short, 0, true).unwrap();
            mean_spread(&f, &arch, &cams, &render)
        };
        StyleRun {
            reg_start: mean_spread(&noisy, &arch, &cams, &render),
            reg_with: paired(0.1),
            reg_without: paired(0.0),
            arch,
            f_rec,
            f_sty,
            report,
            cos_before,
            cos_after,
        }
    })
}

fn stylization_direction() -> Outcome {
    let run = style_run();
    let con: Vec<f64> = run
        .report
        .steps
        .iter()
        .map(|s| s.breakdown.as_ref().unwrap().con_global)
        .collect();
    let windows: Vec<f64> = con.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let decreasing = windows.windows(2).all(|p| p[1] < p[0]);
    let gain = run.cos_after - run.cos_before;
    outcome(
        con.len() == STYLE_STEPS && gain >= 0.05 && decreasing,
        format!(
            "toy provider, {} steps: mean cosine to target {:.4} → {:.4} (+{gain:.4}, need +0.05); \
             L_con^g over 100-step windows {}",
            con.len(),
            run.cos_before,
            run.cos_after,
            windows.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(" → ")
        ),
    )
}

// ---------------------------------------------------------------------------
// Geometry

fn geometry_modulation() -> Outcome {
    let run = style_run();
    let bbox = Aabb::cube(1.5);
    let res = [48; 3];
    let mesh = |p: &FieldParams| marching_cubes(&bake_density_grid(p, &run.arch, bbox, res).unwrap(), DEFAULT_ISO).unwrap();
    let (a, b) = (mesh(&run.f_rec), mesh(&run.f_sty));
    let moved = mean_vertex_displacement(&a, &b).unwrap_or(0.0);

    let scene = SyntheticScene::default_sphere();
    let grid = bake_scene_grid(&scene, Aabb::cube(1.5), [64; 3]).unwrap();
    let sphere = marching_cubes(&grid, 15.0).unwrap();
    let voxel = grid.spacing();
    let radius_err = sphere
        .vertices
        .iter()
        .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    let chi = sphere.euler_characteristic();
    let watertight = sphere.is_watertight();
    outcome(
        !a.triangles.is_empty() && moved > 0.0 && watertight && chi == 2 && radius_err <= voxel,
        format!(
            "stylized vs reconstructed mesh: mean vertex displacement {moved:.4} ({} / {} triangles); \
             analytic sphere: watertight {watertight}, χ = {chi}, max radius error {radius_err:.4} (voxel {voxel:.4})",
            a.triangles.len(),
            b.triangles.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Hyperparameters

fn hyperparameter_fidelity() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.task.target = "a zombie".into();
    let task = cfg.task.to_task().unwrap();
    let got = (
        task.lambda_global,
        task.lambda_local,
        task.lambda_perceptual,
        task.lambda_reg,
        task.tau,
        cfg.render.samples,
        task.patch_fraction,
        (cfg.stage1.lr, cfg.stage2.lr),
        (cfg.stage1.epochs, cfg.stage2.epochs),
    );
    let want = (0.2, 0.1, 2.0, 0.1, 0.07, 192, 0.1, (5e-4, 1e-3), (6, 4));
    let snapshot = serde_json::to_value(&cfg).unwrap();
    let json_ok = snapshot["task"]["lambda_global"] == 0.2
        && snapshot["task"]["lambda_local"] == 0.1
        && snapshot["task"]["lambda_perceptual"] == 2.0
        && snapshot["task"]["lambda_reg"] == 0.1
        && snapshot["task"]["tau"] == 0.07
        && snapshot["render"]["samples"] == 192
        && snapshot["task"]["patch_fraction"] == 0.1
        && snapshot["stage1"]["lr"] == 5e-4
        && snapshot["stage2"]["lr"] == 1e-3
        && snapshot["stage1"]["epochs"] == 6
        && snapshot["stage2"]["epochs"] == 4;
    outcome(
        got == want && json_ok && StyleTask::default().negatives.len() == 200,
        format!("(λg, λl, λp, λr, τ, K, patch, lr1/lr2, epochs1/2) = {got:?}"),
    )
}
