//! Transferable-attack baselines.
//!
//! Sign-step patch updates with momentum (MIGM), Nesterov lookahead (NIGM),
//! translation-invariant gradient smoothing (TI), an ensemble loss that
//! averages predicted counts across models (Avg-Dens), and full-image
//! PGD-L-inf on the map error. The baselines drive a plain count-sum loss;
//! the perceptual losses stay specific to the main generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{compose, make_mask, AttackScene, Patch, PatchShape};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Tape, Tensor};

/// Accumulated-gradient state shared by the momentum baselines.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub g: Vec<f32>,
    pub mu: f32,
}

impl MomentumState {
    pub fn zeros(len: usize, mu: f32) -> Self {
        MomentumState { g: vec![0.0; len], mu }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x.abs()).sum()
}

/// Momentum iterative step: g <- mu*g + grad/|grad|_1, then a sign step of
/// size alpha, clipped into [0,1]. A zero gradient contributes nothing.
pub fn migm_step(delta: &mut [f32], grad: &[f32], state: &mut MomentumState, alpha: f32) {
    debug_assert_eq!(delta.len(), grad.len());
    debug_assert_eq!(delta.len(), state.g.len());
    let norm = l1_norm(grad);
    for (g, &dg) in state.g.iter_mut().zip(grad) {
        *g = state.mu * *g + if norm > 0.0 { dg / norm } else { 0.0 };
    }
    for (d, &g) in delta.iter_mut().zip(&state.g) {
        *d = (*d + alpha * sign(g)).clamp(0.0, 1.0);
    }
}

/// Nesterov variant: the gradient is evaluated at the lookahead point
/// delta + alpha*mu*g before the same momentum update as MIGM.
pub fn nigm_step<F>(
    delta: &mut [f32],
    state: &mut MomentumState,
    alpha: f32,
    mut loss_grad: F,
) -> Result<()>
where
    F: FnMut(&[f32]) -> Result<Vec<f32>>,
{
    let lookahead: Vec<f32> = delta
        .iter()
        .zip(&state.g)
        .map(|(&d, &g)| d + alpha * state.mu * g)
        .collect();
    let grad = loss_grad(&lookahead)?;
    migm_step(delta, &grad, state, alpha);
    Ok(())
}

/// Convolve a `[C,P,P]` gradient with a normalized Gaussian kernel
/// (same padding), channel by channel.
pub fn ti_smooth(grad: &[f32], channels: usize, p: usize, kernel_size: usize, sigma: f64) -> Result<Vec<f32>> {
    if kernel_size % 2 == 0 {
        return Err(Error::arg("ti_smooth", format!("kernel size must be odd, got {kernel_size}")));
    }
    if sigma <= 0.0 {
        return Err(Error::arg("ti_smooth", "sigma must be positive"));
    }
    if kernel_size == 1 {
        return Ok(grad.to_vec());
    }
    let r = (kernel_size / 2) as isize;
    let mut kernel = vec![0.0f64; kernel_size * kernel_size];
    let mut mass = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[((dy + r) * kernel_size as isize + dx + r) as usize] = g;
            mass += g;
        }
    }
    for k in kernel.iter_mut() {
        *k /= mass;
    }
    let mut out = vec![0.0f32; grad.len()];
    for c in 0..channels {
        let src = &grad[c * p * p..(c + 1) * p * p];
        let dst = &mut out[c * p * p..(c + 1) * p * p];
        for y in 0..p as isize {
            for x in 0..p as isize {
                let mut acc = 0.0f64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy >= 0 && sy < p as isize && sx >= 0 && sx < p as isize {
                            acc += src[(sy * p as isize + sx) as usize] as f64
                                * kernel[((dy + r) * kernel_size as isize + dx + r) as usize];
                        }
                    }
                }
                dst[(y * p as isize + x) as usize] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Ensemble loss: mean over models of the summed predicted density.
pub fn avg_dens_loss<'t>(
    tape: &'t Tape<f32>,
    models: &[&Model<f32>],
    x_adv: Tensor<'t, f32>,
) -> Result<Tensor<'t, f32>> {
    if models.is_empty() {
        return Err(Error::EmptyInput { op: "avg_dens_loss" });
    }
    let mut total: Option<Tensor<'t, f32>> = None;
    for model in models {
        let count = model.forward(tape, x_adv, false)?.pred.sum(None)?;
        total = Some(match total {
            None => count,
            Some(acc) => acc.add(count)?,
        });
    }
    Ok(total.unwrap().mul_scalar(1.0 / models.len() as f32))
}

/// Full-image PGD-L-inf ascent on the half squared map error, projected into
/// the epsilon ball around the clean image and clipped to [0,1] after every
/// iteration.
pub fn pgd_linf(
    model: &Model<f32>,
    scene: &AttackScene,
    eps: f32,
    alpha: f32,
    iters: usize,
) -> Result<Vec<f32>> {
    if eps < 0.0 || alpha <= 0.0 {
        return Err(Error::arg("pgd_linf", "eps >= 0 and alpha > 0 required"));
    }
    let mut x_adv = scene.image.clone();
    for _ in 0..iters {
        let tape = Tape::new();
        let x = tape.leaf_grad(&[1, 3, scene.h, scene.w], x_adv.clone())?;
        let pass = model.forward(&tape, x, false)?;
        let gt = tape.leaf(&pass.pred.shape(), scene.gt_out.clone())?;
        let diff = pass.pred.sub(gt)?;
        let loss = diff.mul(diff)?.sum(None)?.mul_scalar(0.5);
        tape.backward(loss)?;
        let grad = x.grad().expect("image is tracked");
        for ((xa, &xc), g) in x_adv.iter_mut().zip(&scene.image).zip(&grad) {
            let stepped = *xa + alpha * sign(*g);
            *xa = stepped.clamp(xc - eps, xc + eps).clamp(0.0, 1.0);
        }
    }
    Ok(x_adv)
}

/// Patch-update rule selection for the baseline driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Migm,
    Nigm,
    TiNigm,
    AvgDens,
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMethod::Migm => "migm",
            BaselineMethod::Nigm => "nigm",
            BaselineMethod::TiNigm => "ti-nigm",
            BaselineMethod::AvgDens => "avg-dens",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub alpha: f32,
    pub inner_steps: usize,
    pub epochs: usize,
    pub mu: f32,
    pub ti_kernel: usize,
    pub ti_sigma: f64,
    pub seed: u64,
    pub patch_size: usize,
    pub shape: PatchShape,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            alpha: 0.01,
            inner_steps: 25,
            epochs: 2,
            mu: 1.0,
            ti_kernel: 15,
            ti_sigma: 3.0,
            seed: 0,
            patch_size: 10,
            shape: PatchShape::Square,
        }
    }
}

/// Count-sum gradient of the (possibly ensemble) loss w.r.t. the patch at a
/// fixed placement.
fn count_grad(
    models: &[&Model<f32>],
    scene: &AttackScene,
    mask: &crate::attack::Mask,
    p: usize,
    delta: &[f32],
) -> Result<Vec<f32>> {
    let tape = Tape::new();
    let d = tape.leaf_grad(&[3, p, p], delta.to_vec())?;
    let x_adv = compose(&tape, &scene.image, scene.w, scene.h, d, mask)?;
    let loss = avg_dens_loss(&tape, models, x_adv)?;
    tape.backward(loss)?;
    Ok(d.grad().expect("patch leaf is tracked"))
}

/// Generate a baseline patch with the same scene/placement protocol as the
/// main generator. `models` carries one entry except for Avg-Dens.
pub fn generate_baseline_patch(
    models: &[&Model<f32>],
    scenes: &[AttackScene],
    cfg: &BaselineConfig,
    method: BaselineMethod,
) -> Result<Patch> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput { op: "generate_baseline_patch" });
    }
    if models.is_empty() {
        return Err(Error::EmptyInput { op: "generate_baseline_patch" });
    }
    if method != BaselineMethod::AvgDens && models.len() != 1 {
        return Err(Error::arg(
            "generate_baseline_patch",
            format!("{method} expects exactly one source model"),
        ));
    }
    let p = cfg.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delta: Vec<f32> = (0..3 * p * p).map(|_| rng.random_range(0.0..1.0) as f32).collect();

    for _epoch in 0..cfg.epochs {
        for scene in scenes {
            let mask = make_mask(cfg.shape, p, scene.w, scene.h, None, &mut rng)?;
            let mut state = MomentumState::zeros(delta.len(), cfg.mu);
            for _t in 0..cfg.inner_steps {
                match method {
                    BaselineMethod::Migm | BaselineMethod::AvgDens => {
                        let grad = count_grad(models, scene, &mask, p, &delta)?;
                        migm_step(&mut delta, &grad, &mut state, cfg.alpha);
                    }
                    BaselineMethod::Nigm => {
                        nigm_step(&mut delta, &mut state, cfg.alpha, |lookahead| {
                            count_grad(models, scene, &mask, p, lookahead)
                        })?;
                    }
                    BaselineMethod::TiNigm => {
                        let smoothed = {
                            let lookahead: Vec<f32> = delta
                                .iter()
                                .zip(&state.g)
                                .map(|(&d, &g)| d + cfg.alpha * state.mu * g)
                                .collect();
                            let grad = count_grad(models, scene, &mask, p, &lookahead)?;
                            ti_smooth(&grad, 3, p, cfg.ti_kernel, cfg.ti_sigma)?
                        };
                        migm_step(&mut delta, &smoothed, &mut state, cfg.alpha);
                    }
                }
            }
        }
    }
    Ok(Patch { delta, channels: 3, size: p, shape: cfg.shape })
}
