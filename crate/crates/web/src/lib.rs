//! Interactive pieces of the renderer and losses, exported to JavaScript.

use radiart::geometry::{orbit_camera, Intrinsics, SyntheticScene};
use radiart::image_io::to_rgb8;
use radiart::losses::contrastive;
use radiart::renderer::{composite, render_view, RenderConfig, SamplingStrategy};
use radiart::tensor::Tensor;
use wasm_bindgen::prelude::*;

const RADIUS: f64 = 4.0;
const NEAR: f64 = 2.6;
const FAR: f64 = 5.4;

fn js_err(e: radiart::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Volume-renders the soft test sphere from an orbit pose. Returns RGBA bytes,
/// `res * res * 4` long.
#[wasm_bindgen]
pub fn render_sphere(
    azimuth: f64,
    elevation: f64,
    sigma: f64,
    softness: f64,
    samples: usize,
    res: usize,
) -> Result<Vec<u8>, JsError> {
    let scene = SyntheticScene::SoftSphere {
        center: [0.0; 3],
        radius: 1.0,
        sigma,
        softness,
    };
    let f = res as f64 * 1.1;
    let k = Intrinsics {
        fx: f,
        fy: f,
        cx: res as f64 / 2.0,
        cy: res as f64 / 2.0,
        width: res,
        height: res,
    };
    let camera = orbit_camera(azimuth, elevation, RADIUS, k).map_err(js_err)?;
    let config = RenderConfig {
        samples,
        near: NEAR,
        far: FAR,
        strategy: SamplingStrategy::Uniform,
        ..RenderConfig::default()
    };
    let image = render_view(&scene, &camera, &config).map_err(js_err)?;
    Ok(to_rgb8(&image)
        .chunks(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect())
}

/// Composites a ray through a slab of constant density occupying
/// `[start, end]` of the unit interval. Returns `K` weights followed by
/// `K + 1` transmittances.
#[wasm_bindgen]
pub fn ray_profile(sigma: f64, start: f64, end: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    let k = samples.max(1);
    let bounds: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
    let sigmas: Vec<f64> = bounds[..k]
        .iter()
        .zip(&bounds[1..])
        .map(|(a, b)| {
            let mid = 0.5 * (a + b);
            if mid >= start && mid <= end {
                sigma
            } else {
                0.0
            }
        })
        .collect();
    let r = composite(&sigmas, &vec![[1.0; 3]; k], &bounds, [0.0; 3]).map_err(js_err)?;
    Ok(r.weights.into_iter().chain(r.transmittance).collect())
}

/// Contrastive loss as the angle between image and target embeddings sweeps
/// from 0 to π, with `negatives` prompts spread evenly around the circle.
/// Returns `points` loss values.
#[wasm_bindgen]
pub fn infonce_curve(tau: f64, negatives: usize, points: usize) -> Result<Vec<f64>, JsError> {
    let unit = |theta: f64| Tensor::vector(vec![theta.cos(), theta.sin()]);
    let target = unit(0.0);
    let negs: Vec<Tensor> = (0..negatives.max(1))
        .map(|i| unit(std::f64::consts::PI * (0.5 + i as f64) / negatives.max(1) as f64 + 0.3))
        .collect();
    (0..points.max(2))
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / (points.max(2) - 1) as f64;
            contrastive(&unit(theta), &target, &negs, tau).map_err(js_err)
        })
        .collect()
}
