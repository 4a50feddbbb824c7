//! Counting metrics, overestimation curves, transfer matrices and report
//! artifacts.
//!
//! MAE is the mean absolute count error; MSE follows the counting
//! literature's convention and is the root of the mean squared count error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::attack::{apply_patch, make_mask, Direction, Mask, Patch};
use crate::error::{Error, Result};
use crate::io;
use crate::models::{predicted_count, Model};
use crate::scenes::Scene;

/// Per-scene evaluation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub count_pred: f64,
    pub count_gt: f64,
    pub count_clean_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
    pub per_scene: Vec<SceneEval>,
}

impl Metrics {
    pub fn from_per_scene(per_scene: Vec<SceneEval>) -> Result<Metrics> {
        let preds: Vec<f64> = per_scene.iter().map(|s| s.count_pred).collect();
        let gts: Vec<f64> = per_scene.iter().map(|s| s.count_gt).collect();
        let (mae, mse) = mae_mse(&preds, &gts)?;
        Ok(Metrics { mae, mse, n: per_scene.len(), per_scene })
    }
}

/// MAE = mean |pred - gt|; MSE = sqrt(mean (pred - gt)^2).
pub fn mae_mse(pred_counts: &[f64], gt_counts: &[f64]) -> Result<(f64, f64)> {
    if pred_counts.is_empty() {
        return Err(Error::EmptyInput { op: "mae_mse" });
    }
    if pred_counts.len() != gt_counts.len() {
        return Err(Error::shape(
            "mae_mse",
            format!("{} predictions vs {} ground truths", pred_counts.len(), gt_counts.len()),
        ));
    }
    let n = pred_counts.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (&p, &g) in pred_counts.iter().zip(gt_counts) {
        let d = p - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Fraction of scenes whose prediction shift exceeds each threshold.
/// Increase attacks measure adv - clean, decrease attacks clean - adv.
pub fn overestimation_curve(
    per_scene: &[SceneEval],
    gamma_grid: &[f64],
    direction: Direction,
) -> Result<Vec<(f64, f64)>> {
    if per_scene.is_empty() {
        return Err(Error::EmptyInput { op: "overestimation_curve" });
    }
    let deltas: Vec<f64> = per_scene
        .iter()
        .map(|s| match direction {
            Direction::Increase => s.count_pred - s.count_clean_pred,
            Direction::Decrease => s.count_clean_pred - s.count_pred,
        })
        .collect();
    Ok(gamma_grid
        .iter()
        .map(|&g| {
            let over = deltas.iter().filter(|&&d| d > g).count();
            (g, over as f64 / deltas.len() as f64)
        })
        .collect())
}

/// Default threshold sweep: 0..=500 step 10 for increase attacks,
/// 0..=200 step 5 for decrease attacks.
pub fn default_gamma_grid(direction: Direction) -> Vec<f64> {
    match direction {
        Direction::Increase => (0..=50).map(|i| (i * 10) as f64).collect(),
        Direction::Decrease => (0..=40).map(|i| (i * 5) as f64).collect(),
    }
}

/// Full cross-model attack evaluation: rows are patch sources, columns are
/// target models, plus a clean row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// Clean metrics per target.
    pub clean: Vec<Metrics>,
    /// cells[i][j]: metrics of patch i evaluated on model j.
    pub cells: Vec<Vec<Metrics>>,
}

/// Patch placements for an evaluation run: one per (patch, scene), shared by
/// every target model so cells are comparable.
fn eval_placements(patches: &[(String, &Patch)], scenes: &[Scene], seed: u64) -> Result<Vec<Vec<Mask>>> {
    let mut out = Vec::with_capacity(patches.len());
    for (pi, (_, patch)) in patches.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pi as u64 + 1);
        let mut per_scene = Vec::with_capacity(scenes.len());
        for scene in scenes {
            let row = rng.random_range(0..=scene.h - patch.size);
            let col = rng.random_range(0..=scene.w - patch.size);
            per_scene.push(make_mask(patch.shape, patch.size, scene.w, scene.h, Some((row, col)), &mut rng)?);
        }
        out.push(per_scene);
    }
    Ok(out)
}

/// Evaluate every patch against every model on the given scenes.
pub fn run_transfer_eval(
    models: &[(String, &Model<f32>)],
    patches: &[(String, &Patch)],
    scenes: &[Scene],
    seed: u64,
) -> Result<TransferMatrix> {
    if models.is_empty() || scenes.is_empty() {
        return Err(Error::EmptyInput { op: "run_transfer_eval" });
    }
    let placements = eval_placements(patches, scenes, seed)?;

    // Clean predictions once per model; scenes fan out in parallel over the
    // read-only models, indexed collection keeps aggregation order stable.
    let clean_preds: Vec<Vec<f64>> = models
        .iter()
        .map(|(_, m)| {
            scenes
                .par_iter()
                .map(|s| predicted_count(m, &s.image, s.h, s.w))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let clean: Vec<Metrics> = models
        .iter()
        .zip(&clean_preds)
        .map(|((_, _), preds)| {
            Metrics::from_per_scene(
                scenes
                    .iter()
                    .zip(preds)
                    .map(|(s, &p)| SceneEval { count_pred: p, count_gt: s.gt_count(), count_clean_pred: p })
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::with_capacity(patches.len());
    for (pi, (_, patch)) in patches.iter().enumerate() {
        let mut row = Vec::with_capacity(models.len());
        for (mi, (_, model)) in models.iter().enumerate() {
            let per_scene: Vec<SceneEval> = scenes
                .par_iter()
                .enumerate()
                .map(|(si, scene)| {
                    let adv = apply_patch(&scene.image, scene.w, scene.h, patch, &placements[pi][si]);
                    let pred = predicted_count(model, &adv, scene.h, scene.w)?;
                    Ok(SceneEval {
                        count_pred: pred,
                        count_gt: scene.gt_count(),
                        count_clean_pred: clean_preds[mi][si],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            row.push(Metrics::from_per_scene(per_scene)?);
        }
        cells.push(row);
    }

    Ok(TransferMatrix {
        sources: patches.iter().map(|(n, _)| n.clone()).collect(),
        targets: models.iter().map(|(n, _)| n.clone()).collect(),
        clean,
        cells,
    })
}

impl TransferMatrix {
    /// `source,target,mae,mse,n` rows, clean row first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,target,mae,mse,n\n");
        for (t, m) in self.targets.iter().zip(&self.clean) {
            out.push_str(&format!("clean,{t},{},{},{}\n", m.mae, m.mse, m.n));
        }
        for (s, row) in self.sources.iter().zip(&self.cells) {
            for (t, m) in self.targets.iter().zip(row) {
                out.push_str(&format!("{s},{t},{},{},{}\n", m.mae, m.mse, m.n));
            }
        }
        out
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        std::fs::write(stem.with_extension("csv"), self.to_csv())?;
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<TransferMatrix> {
        io::require(path)?;
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Overestimation curve as CSV: `gamma,fraction`.
pub fn curve_to_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("gamma,fraction\n");
    for (g, f) in curve {
        out.push_str(&format!("{g},{f}\n"));
    }
    out
}

/// Side-by-side clean / adversarial / density visualization as one PPM.
pub fn dump_visualization(
    path: &Path,
    clean: &[f32],
    adv: &[f32],
    density: &[f32],
    w: usize,
    h: usize,
) -> Result<()> {
    let peak = density.iter().cloned().fold(0.0f32, f32::max).max(1e-9);
    let mut combined = vec![0.0f32; 3 * h * (3 * w)];
    let cw = 3 * w;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                combined[c * h * cw + y * cw + x] = clean[c * h * w + y * w + x];
                combined[c * h * cw + y * cw + (w + x)] = adv[c * h * w + y * w + x];
            }
            // Density heat ramp: black -> red -> yellow.
            let d = density[y * w + x] / peak;
            combined[y * cw + (2 * w + x)] = (2.0 * d).min(1.0);
            combined[h * cw + y * cw + (2 * w + x)] = (2.0 * d - 1.0).clamp(0.0, 1.0);
        }
    }
    let rgb = io::planar_unit_to_rgb(&combined, cw, h);
    io::write_ppm(path, cw, h, &rgb)
}
