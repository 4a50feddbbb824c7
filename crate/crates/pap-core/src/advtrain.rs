//! Adversarial training with generated patches.
//!
//! Two recipes: OAT generates one patch per training scene against the
//! pretrained model up front, fixes the 1:1 augmented set, and fine-tunes on
//! it; IAT regenerates white-box patches inside the training loop every
//! epoch and blends clean and adversarial losses through a warmup schedule
//! that holds the clean weight at 1 for the first quarter of training,
//! decays it linearly to 0.5 by the halfway point, then holds it there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::attack::{apply_patch, make_mask, pap_generate, AttackConfig, AttackScene, Patch};
use crate::error::{Error, Result};
use crate::models::{Model, TrainConfig, TrainSample};
use crate::scenes::Scene;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Once-generated adversarial training.
    Oat,
    /// Iterative (min-max) adversarial training.
    Iat,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oat" => Ok(Variant::Oat),
            "iat" => Ok(Variant::Iat),
            other => Err(Error::arg("variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub variant: Variant,
    /// adv:clean mix; OAT materializes this many patched copies per scene.
    pub mix_ratio: (usize, usize),
    /// Total training epochs E; the schedule needs E >= 4.
    pub total_epochs: usize,
    pub train: TrainConfig,
    /// Inner attack; IAT runs it with a small step budget every epoch.
    pub attack: AttackConfig,
    pub seed: u64,
}

impl AdvTrainConfig {
    pub fn oat_default(seed: u64) -> Self {
        AdvTrainConfig {
            variant: Variant::Oat,
            mix_ratio: (1, 1),
            total_epochs: 12,
            train: TrainConfig { epochs: 12, ..Default::default() },
            attack: AttackConfig { seed, ..Default::default() },
            seed,
        }
    }

    pub fn iat_default(seed: u64) -> Self {
        AdvTrainConfig {
            variant: Variant::Iat,
            attack: AttackConfig { inner_steps: 5, epochs: 1, seed, ..Default::default() },
            ..AdvTrainConfig::oat_default(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.total_epochs < 4 {
            return Err(Error::arg("AdvTrainConfig", "total_epochs must be >= 4"));
        }
        if self.mix_ratio.0 == 0 && self.mix_ratio.1 == 0 {
            return Err(Error::arg("AdvTrainConfig", "mix ratio cannot be 0:0"));
        }
        Ok(())
    }
}

/// Clean-loss weight schedule over training: 1 on [0, E/4], linear down to
/// 0.5 on [E/4, E/2], then 0.5 to the end.
pub fn lambda_schedule(epoch: f64, total_epochs: f64) -> Result<f64> {
    if !(0.0..=total_epochs).contains(&epoch) {
        return Err(Error::arg(
            "lambda_schedule",
            format!("epoch {epoch} outside [0, {total_epochs}]"),
        ));
    }
    let quarter = 0.25 * total_epochs;
    let half = 0.5 * total_epochs;
    Ok(if epoch <= quarter {
        1.0
    } else if epoch <= half {
        1.0 - 0.5 * (epoch - quarter) / quarter
    } else {
        0.5
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AdvTrainReport {
    pub variant: Variant,
    pub wall_seconds: f64,
    pub loss_curve: Vec<f64>,
    /// Sha256 of the augmented set per epoch; OAT's is constant, IAT's
    /// changes as patches are regenerated.
    pub augmented_hashes: Vec<String>,
}

fn patched_copy(scene: &Scene, patch: &Patch, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let mask = make_mask(patch.shape, patch.size, scene.w, scene.h, None, rng)?;
    Ok(apply_patch(&scene.image, scene.w, scene.h, patch, &mask))
}

fn hash_images(images: &[Vec<f32>]) -> String {
    let mut bytes = Vec::new();
    for img in images {
        for v in img {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::sha256_hex(&bytes)
}

/// Once-generated adversarial training: per-scene white-box patches against
/// the pretrained model, a fixed 1:1 augmented set, then fine-tuning with
/// the plain training objective. The patched copies keep the clean ground
/// truth; a patch adds no people.
pub fn oat_train(
    pretrained: &Model<f32>,
    scenes: &[Scene],
    cfg: &AdvTrainConfig,
) -> Result<(Model<f32>, AdvTrainReport)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyInput { op: "oat_train" });
    }
    let start = Instant::now();
    let stride = pretrained.spec.output_stride;

    // One independent patch per scene, generated in parallel with per-scene
    // derived seeds.
    let patches: Vec<Patch> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let attack_scene = AttackScene::from_scene(scene, stride)?;
            let scene_cfg = AttackConfig {
                seed: cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64),
                ..cfg.attack.clone()
            };
            let (patch, _) = pap_generate(pretrained, &[attack_scene], &scene_cfg)?;
            Ok(patch)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples: Vec<TrainSample<f32>> = Vec::new();
    let mut adv_images: Vec<Vec<f32>> = Vec::new();
    for (scene, patch) in scenes.iter().zip(&patches) {
        for _ in 0..cfg.mix_ratio.1 {
            samples.push(scene.train_sample(stride)?);
        }
        for _ in 0..cfg.mix_ratio.0 {
            let adv = patched_copy(scene, patch, &mut rng)?;
            adv_images.push(adv.clone());
            let mut sample = scene.train_sample(stride)?;
            sample.image = adv;
            samples.push(sample);
        }
    }
    let augmented_hash = hash_images(&adv_images);

    let mut model = pretrained.clone();
    let train_cfg = TrainConfig { epochs: cfg.total_epochs, ..cfg.train.clone() };
    let loss_curve = crate::models::train(&mut model, &samples, &train_cfg)?;

    let report = AdvTrainReport {
        variant: Variant::Oat,
        wall_seconds: start.elapsed().as_secs_f64(),
        loss_curve,
        augmented_hashes: vec![augmented_hash; cfg.total_epochs],
    };
    Ok((model, report))
}

/// Iterative adversarial training: regenerate white-box patches against the
/// current model each epoch and descend on
/// lambda * L_clean + (1 - lambda) * L_adv.
pub fn iat_train(
    start_model: &Model<f32>,
    scenes: &[Scene],
    cfg: &AdvTrainConfig,
) -> Result<(Model<f32>, AdvTrainReport)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyInput { op: "iat_train" });
    }
    let start = Instant::now();
    let stride = start_model.spec.output_stride;
    let mut model = start_model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<(Vec<f32>, Vec<f32>)> = model
        .params()
        .iter()
        .map(|p| (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()]))
        .collect();
    let clean_samples: Vec<TrainSample<f32>> =
        scenes.iter().map(|s| s.train_sample(stride)).collect::<Result<Vec<_>>>()?;

    let mut loss_curve = Vec::with_capacity(cfg.total_epochs);
    let mut augmented_hashes = Vec::with_capacity(cfg.total_epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();

    for epoch in 0..cfg.total_epochs {
        let lambda = lambda_schedule(epoch as f64, cfg.total_epochs as f64)? as f32;

        // Fresh white-box patches against the current model state.
        let frozen = model.clone();
        let patches: Vec<Patch> = scenes
            .par_iter()
            .enumerate()
            .map(|(i, scene)| {
                let attack_scene = AttackScene::from_scene(scene, stride)?;
                let scene_cfg = AttackConfig {
                    seed: cfg
                        .seed
                        .wrapping_mul(0x9E37_79B9)
                        .wrapping_add((epoch * scenes.len() + i) as u64),
                    ..cfg.attack.clone()
                };
                let (patch, _) = pap_generate(&frozen, &[attack_scene], &scene_cfg)?;
                Ok(patch)
            })
            .collect::<Result<Vec<_>>>()?;

        let adv_images: Vec<Vec<f32>> = scenes
            .iter()
            .zip(&patches)
            .map(|(scene, patch)| patched_copy(scene, patch, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        augmented_hashes.push(hash_images(&adv_images));

        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for &si in &order {
            let scene = &scenes[si];
            let clean = &clean_samples[si];
            let tape = Tape::new();
            let mut bound = model.bind(&tape, true);
            let x_clean = tape.leaf(&[1, 3, scene.h, scene.w], clean.image.clone())?;
            let clean_pass = bound.forward(x_clean)?;
            let gt = tape.leaf(&clean_pass.pred.shape(), clean.target.clone())?;
            let l_clean = half_sq_err(clean_pass.pred, gt)?;

            let x_adv = tape.leaf(&[1, 3, scene.h, scene.w], adv_images[si].clone())?;
            let adv_pass = bound.forward(x_adv)?;
            let l_adv = half_sq_err(adv_pass.pred, gt)?;
            let params = bound.params().to_vec();

            let loss = l_clean.mul_scalar(lambda).add(l_adv.mul_scalar(1.0 - lambda))?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite { context: format!("IAT loss at epoch {epoch}") });
            }
            tape.backward(loss)?;
            sgd_step(&mut model, &params, &mut velocity, &cfg.train)?;
            epoch_loss += loss_val as f64;
        }
        loss_curve.push(epoch_loss / scenes.len() as f64);
    }

    let report = AdvTrainReport {
        variant: Variant::Iat,
        wall_seconds: start.elapsed().as_secs_f64(),
        loss_curve,
        augmented_hashes,
    };
    Ok((model, report))
}

fn half_sq_err<'t>(pred: Tensor<'t, f32>, gt: Tensor<'t, f32>) -> Result<Tensor<'t, f32>> {
    let diff = pred.sub(gt)?;
    Ok(diff.mul(diff)?.sum(None)?.mul_scalar(0.5))
}

fn sgd_step(
    model: &mut Model<f32>,
    bound: &[(String, Tensor<'_, f32>)],
    velocity: &mut [(Vec<f32>, Vec<f32>)],
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = cfg.learning_rate as f32;
    let mu = cfg.momentum as f32;
    for (pi, p) in model.params_mut().into_iter().enumerate() {
        for (suffix, values, vel) in [
            ("weight", &mut p.weight, &mut velocity[pi].0),
            ("bias", &mut p.bias, &mut velocity[pi].1),
        ] {
            let name = format!("{}.{}", p.name, suffix);
            let t = bound
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::arg("iat_train", format!("no bound tensor for {name}")))?;
            let g = t.1.grad().expect("params tracked");
            for ((w, v), gi) in values.iter_mut().zip(vel.iter_mut()).zip(&g) {
                *v = mu * *v + *gi;
                *w -= lr * *v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::scenes::{Dataset, Preset};

    #[test]
    fn schedule_matches_published_shape() {
        assert_eq!(lambda_schedule(10.0, 100.0).unwrap(), 1.0);
        assert_eq!(lambda_schedule(37.5, 100.0).unwrap(), 0.75);
        assert_eq!(lambda_schedule(90.0, 100.0).unwrap(), 0.5);
        assert_eq!(lambda_schedule(0.0, 100.0).unwrap(), 1.0);
        assert_eq!(lambda_schedule(100.0, 100.0).unwrap(), 0.5);
        assert!(lambda_schedule(101.0, 100.0).is_err());
        assert!(lambda_schedule(-1.0, 100.0).is_err());
    }

    #[test]
    fn schedule_is_continuous_nonincreasing_in_range() {
        let e_total = 48.0;
        let mut prev = f64::INFINITY;
        let mut saw_half = false;
        for i in 0..=480 {
            let e = e_total * i as f64 / 480.0;
            let l = lambda_schedule(e, e_total).unwrap();
            assert!((0.5..=1.0).contains(&l));
            assert!(l <= prev + 1e-12);
            if l == 0.5 {
                saw_half = true;
            }
            prev = l;
        }
        assert!(saw_half);
    }

    fn small_setup() -> (Model<f32>, Vec<Scene>) {
        let model = Model::<f32>::new(ModelSpec::single_column(2)).unwrap();
        let ds = Dataset::generate(Preset::Standard, 61).unwrap();
        (model, ds.train[..3].to_vec())
    }

    fn quick_cfg(variant: Variant) -> AdvTrainConfig {
        let mut cfg = match variant {
            Variant::Oat => AdvTrainConfig::oat_default(5),
            Variant::Iat => AdvTrainConfig::iat_default(5),
        };
        cfg.total_epochs = 4;
        cfg.train = TrainConfig { epochs: 4, learning_rate: 0.01, batch_size: 1, ..Default::default() };
        cfg.attack.inner_steps = 2;
        cfg.attack.epochs = 1;
        cfg.attack.patch_size = 8;
        cfg.attack.lambda = 0.0;
        cfg
    }

    #[test]
    fn oat_augments_one_to_one_and_is_deterministic() {
        let (model, scenes) = small_setup();
        let cfg = quick_cfg(Variant::Oat);
        let (m1, r1) = oat_train(&model, &scenes, &cfg).unwrap();
        let (m2, r2) = oat_train(&model, &scenes, &cfg).unwrap();
        assert_eq!(m1.to_records(), m2.to_records());
        assert_eq!(r1.augmented_hashes, r2.augmented_hashes);
        // Augmented set immutable across epochs.
        assert!(r1.augmented_hashes.windows(2).all(|w| w[0] == w[1]));
        // Outputs still a valid model: non-negative counts.
        let s = &scenes[0];
        let c = crate::models::predicted_count(&m1, &s.image, s.h, s.w).unwrap();
        assert!(c.is_finite() && c >= 0.0);
    }

    #[test]
    fn iat_patched_inputs_change_across_epochs() {
        let (model, scenes) = small_setup();
        let cfg = quick_cfg(Variant::Iat);
        let (_, report) = iat_train(&model, &scenes, &cfg).unwrap();
        assert_eq!(report.augmented_hashes.len(), 4);
        assert_ne!(report.augmented_hashes[0], report.augmented_hashes[1]);
    }

    #[test]
    fn degenerate_patch_oat_is_clean_duplication() {
        // With an attack budget so small the patch cannot move and alpha
        // tiny, OAT's adversarial copies are near-clean; training must still
        // run and converge like plain training on duplicated data.
        let (model, scenes) = small_setup();
        let mut cfg = quick_cfg(Variant::Oat);
        cfg.attack.alpha = 1e-9;
        let (m, report) = oat_train(&model, &scenes, &cfg).unwrap();
        assert_eq!(report.loss_curve.len(), 4);
        assert!(m.to_records().iter().all(|r| r.values.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn total_epochs_floor_enforced() {
        let (model, scenes) = small_setup();
        let mut cfg = quick_cfg(Variant::Oat);
        cfg.total_epochs = 3;
        assert!(oat_train(&model, &scenes, &cfg).is_err());
    }
}
