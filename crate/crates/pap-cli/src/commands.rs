//! Subcommand implementations. Each writes its artifacts plus run.json under
//! the chosen output directory and is bit-reproducible from that file.

use anyhow::{bail, Context, Result};
use serde_json::json;
use std::path::Path;

use pap_core::advtrain::{self, AdvTrainConfig, Variant};
use pap_core::attack::{
    pap_generate, AttackConfig, AttackScene, Direction, Patch, PatchShape, PositionScope,
};
use pap_core::baselines::{generate_baseline_patch, BaselineConfig, BaselineMethod};
use pap_core::eval::{self, overestimation_curve, run_transfer_eval, TransferMatrix};
use pap_core::models::{Model, ModelSpec, TrainConfig};
use pap_core::scenes::{self, Dataset, Preset, Scene};

use crate::args::*;
use crate::run::{resolve, split_list, stem, RunContext};

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let ctx = RunContext::new(&args.common)?;
    let preset: Preset = args.preset.parse()?;
    let manifest = scenes::gen_dataset(&ctx.out, preset, ctx.seed)?;
    ctx.write_run_json(
        "gen-data",
        json!({ "preset": args.preset, "scenes": manifest.scenes.len() }),
    )?;
    println!("wrote {} scenes under {}", manifest.scenes.len(), ctx.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(dir)?)
}

fn split_scenes<'d>(ds: &'d Dataset, split: &str) -> Result<&'d [Scene]> {
    match split {
        "train" => Ok(&ds.train),
        "test" => Ok(&ds.test),
        other => bail!("unknown split `{other}` (want train|test)"),
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let ctx = RunContext::new(&args.common)?;
    let ds = load_dataset(&args.data)?;
    let spec = match args.model.as_str() {
        "multi" => ModelSpec::multi_column(ctx.seed),
        "single" => ModelSpec::single_column(ctx.seed),
        other => bail!("unknown model family `{other}` (want multi|single)"),
    };
    let cfg = TrainConfig {
        epochs: resolve(args.epochs, &ctx.cfg, "epochs", 40)?,
        learning_rate: resolve(args.lr, &ctx.cfg, "lr", 0.002)?,
        momentum: resolve(args.momentum, &ctx.cfg, "momentum", 0.9)?,
        seed: ctx.seed,
        batch_size: resolve(args.batch_size, &ctx.cfg, "batch_size", 4)?,
    };
    let mut model = Model::<f32>::new(spec)?;
    let samples = ds
        .train
        .iter()
        .map(|s| s.train_sample::<f32>(model.spec.output_stride))
        .collect::<pap_core::Result<Vec<_>>>()?;
    let curve = pap_core::models::train(&mut model, &samples, &cfg)?;
    model.save(&ctx.out.join("model"))?;

    let mut csv = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(ctx.out.join("loss_curve.csv"), csv)?;
    ctx.write_run_json("train", json!({ "model": args.model, "train": cfg }))?;
    println!(
        "trained {} on {} scenes: loss {:.4} -> {:.4}",
        args.model,
        samples.len(),
        curve.first().unwrap_or(&f64::NAN),
        curve.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

fn parse_shape(raw: &str) -> Result<PatchShape> {
    Ok(raw.parse::<PatchShape>()?)
}

pub fn gen_patch(args: &GenPatchArgs) -> Result<()> {
    let ctx = RunContext::new(&args.common)?;
    let ds = load_dataset(&args.data)?;

    let direction: Direction =
        resolve(args.direction.clone(), &ctx.cfg, "direction", "increase".into())?.parse()?;
    let shape = parse_shape(&resolve(args.shape.clone(), &ctx.cfg, "shape", "square".into())?)?;
    let scope = match resolve(
        args.position_scope.clone(),
        &ctx.cfg,
        "position_scope",
        "patch_region".into(),
    )?
    .as_str()
    {
        "patch_region" => PositionScope::PatchRegion,
        "whole_map" => PositionScope::WholeMap,
        other => bail!("unknown position scope `{other}`"),
    };
    let cfg = AttackConfig {
        lambda: resolve(args.lambda, &ctx.cfg, "lambda", 0.01)?,
        alpha: resolve(args.alpha, &ctx.cfg, "alpha", 0.01)?,
        inner_steps: resolve(args.inner_steps, &ctx.cfg, "T", 25)?,
        epochs: resolve(args.epochs, &ctx.cfg, "epochs", 2)?,
        direction,
        seed: ctx.seed,
        attention_layer: "features".into(),
        patch_size: resolve(args.size, &ctx.cfg, "size", 10)?,
        shape,
        use_density_weights: !args.no_density_weights,
        use_scale_loss: true,
        position_scope: scope,
        rotate: args.rotate,
    };

    let scene_budget = args.scenes.unwrap_or(ds.train.len()).min(ds.train.len());
    let (patch, method_name, telemetry) = match &args.baseline {
        None => {
            let source = Model::<f32>::load(&stem(&args.source))?;
            let attack_scenes = ds.train[..scene_budget]
                .iter()
                .map(|s| AttackScene::from_scene(s, source.spec.output_stride))
                .collect::<pap_core::Result<Vec<_>>>()?;
            let (patch, telemetry) = pap_generate(&source, &attack_scenes, &cfg)?;
            (patch, "pap".to_string(), Some(telemetry))
        }
        Some(name) => {
            let method = match name.as_str() {
                "migm" => BaselineMethod::Migm,
                "nigm" => BaselineMethod::Nigm,
                "ti-nigm" => BaselineMethod::TiNigm,
                "avg-dens" => BaselineMethod::AvgDens,
                other => bail!("unknown baseline `{other}`"),
            };
            let sources = args
                .source
                .to_str()
                .map(split_list)
                .unwrap_or_default()
                .iter()
                .map(|s| Model::<f32>::load(&stem(Path::new(s))))
                .collect::<pap_core::Result<Vec<_>>>()?;
            if sources.is_empty() {
                bail!("--baseline needs at least one --source model");
            }
            let stride = sources.iter().map(|m| m.spec.output_stride).max().unwrap();
            let attack_scenes = ds.train[..scene_budget]
                .iter()
                .map(|s| AttackScene::from_scene(s, stride))
                .collect::<pap_core::Result<Vec<_>>>()?;
            let bcfg = BaselineConfig {
                alpha: cfg.alpha as f32,
                inner_steps: cfg.inner_steps,
                epochs: cfg.epochs,
                seed: cfg.seed,
                patch_size: cfg.patch_size,
                shape: cfg.shape,
                ..Default::default()
            };
            let refs: Vec<&Model<f32>> = sources.iter().collect();
            let patch = generate_baseline_patch(&refs, &attack_scenes, &bcfg, method)?;
            (patch, name.clone(), None)
        }
    };

    let sidecar = json!({
        "method": method_name,
        "source": args.source,
        "scenes": scene_budget,
        "config": cfg,
    });
    patch.save(&ctx.out.join("patch.papp"), &sidecar)?;
    if let Some(t) = &telemetry {
        std::fs::write(ctx.out.join("telemetry.json"), serde_json::to_string_pretty(t)? + "\n")?;
    }
    ctx.write_run_json("gen-patch", sidecar)?;
    println!("wrote patch ({method_name}) to {}", ctx.out.join("patch.papp").display());
    Ok(())
}

pub fn attack_eval(args: &AttackEvalArgs) -> Result<()> {
    let ctx = RunContext::new(&args.common)?;
    let ds = load_dataset(&args.data)?;
    let scenes = split_scenes(&ds, &args.split)?;

    let mut models = Vec::new();
    for name in split_list(&args.models) {
        let model = Model::<f32>::load(&stem(Path::new(&name)))?;
        let label = Path::new(&name)
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(&name)
            .to_string();
        models.push((label, model));
    }
    let mut patches = Vec::new();
    for name in split_list(&args.patches) {
        let path = stem(Path::new(&name)).with_extension("papp");
        let label = path
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(&name)
            .to_string();
        patches.push((label, Patch::load(&path)?));
    }

    let model_refs: Vec<(String, &Model<f32>)> =
        models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let patch_refs: Vec<(String, &Patch)> = patches.iter().map(|(n, p)| (n.clone(), p)).collect();
    let matrix = run_transfer_eval(&model_refs, &patch_refs, scenes, ctx.seed)?;
    matrix.write(&ctx.out.join("matrix"))?;

    let mut vis_rng = pap_core::seeded_rng(ctx.seed);
    for (i, scene) in scenes.iter().take(args.dump_vis).enumerate() {
        if let Some((_, patch)) = patches.first() {
            let mask = pap_core::attack::make_mask(
                patch.shape,
                patch.size,
                scene.w,
                scene.h,
                Some((scene.h / 4, scene.w / 4)),
                &mut vis_rng,
            )?;
            let adv = pap_core::attack::apply_patch(&scene.image, scene.w, scene.h, patch, &mask);
            eval::dump_visualization(
                &ctx.out.join(format!("vis_{i:03}.ppm")),
                &scene.image,
                &adv,
                &scene.density.values,
                scene.w,
                scene.h,
            )?;
        }
    }

    ctx.write_run_json(
        "attack-eval",
        json!({
            "patches": args.patches,
            "models": args.models,
            "split": args.split,
            "n_scenes": scenes.len(),
        }),
    )?;
    println!("{}", matrix.to_csv());
    Ok(())
}

pub fn advtrain(args: &AdvtrainArgs) -> Result<()> {
    let ctx = RunContext::new(&args.common)?;
    let ds = load_dataset(&args.data)?;
    let variant: Variant = args.variant.parse()?;
    let pretrained = Model::<f32>::load(&stem(&args.model))?;

    let mut cfg = match variant {
        Variant::Oat => AdvTrainConfig::oat_default(ctx.seed),
        Variant::Iat => AdvTrainConfig::iat_default(ctx.seed),
    };
    cfg.total_epochs = resolve(args.epochs, &ctx.cfg, "epochs", cfg.total_epochs)?;
    cfg.train.epochs = cfg.total_epochs;
    cfg.train.learning_rate = resolve(args.lr, &ctx.cfg, "lr", cfg.train.learning_rate)?;
    cfg.train.seed = ctx.seed;
    if let Some(t) = args.inner_steps {
        cfg.attack.inner_steps = t;
    }

    let (model, report) = match variant {
        Variant::Oat => advtrain::oat_train(&pretrained, &ds.train, &cfg)?,
        Variant::Iat => advtrain::iat_train(&pretrained, &ds.train, &cfg)?,
    };
    model.save(&ctx.out.join("model"))?;
    // Wall-clock lives apart from the deterministic artifacts.
    std::fs::write(
        ctx.out.join("timing.json"),
        serde_json::to_string_pretty(&json!({
            "variant": args.variant,
            "wall_seconds": report.wall_seconds,
        }))? + "\n",
    )?;
    std::fs::write(
        ctx.out.join("report.json"),
        serde_json::to_string_pretty(&json!({
            "variant": report.variant,
            "loss_curve": report.loss_curve,
            "augmented_hashes": report.augmented_hashes,
        }))? + "\n",
    )?;
    ctx.write_run_json("advtrain", json!({ "variant": args.variant, "config": cfg }))?;
    println!("adversarially trained ({}) in {:.1}s", args.variant, report.wall_seconds);
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let ctx = RunContext::new(&args.common)?;
    let mut did_something = false;

    if let Some(matrix_path) = &args.overestimation {
        let matrix = TransferMatrix::read_json(matrix_path)?;
        let direction: Direction = args
            .direction
            .clone()
            .unwrap_or_else(|| "increase".into())
            .parse()?;
        let grid = eval::default_gamma_grid(direction);
        for (si, source) in matrix.sources.iter().enumerate() {
            for (ti, target) in matrix.targets.iter().enumerate() {
                let curve =
                    overestimation_curve(&matrix.cells[si][ti].per_scene, &grid, direction)?;
                let path = ctx.out.join(format!("overestimation_{source}_{target}.csv"));
                std::fs::write(path, eval::curve_to_csv(&curve))?;
            }
        }
        did_something = true;
    }

    if args.sweep_lambda.is_some() || args.loss_ablation {
        let (source_path, models_raw, data) = match (&args.source, &args.models, &args.data) {
            (Some(s), Some(m), Some(d)) => (s, m, d),
            _ => bail!("sweeps and ablations need --source, --models and --data"),
        };
        let ds = load_dataset(data)?;
        let source = Model::<f32>::load(&stem(source_path))?;
        let mut targets = Vec::new();
        for name in split_list(models_raw) {
            targets.push((name.clone(), Model::<f32>::load(&stem(Path::new(&name)))?));
        }
        let target_refs: Vec<(String, &Model<f32>)> =
            targets.iter().map(|(n, m)| (n.clone(), m)).collect();

        let budget = args.scenes.unwrap_or(16).min(ds.train.len());
        let attack_scenes = ds.train[..budget]
            .iter()
            .map(|s| AttackScene::from_scene(s, source.spec.output_stride))
            .collect::<pap_core::Result<Vec<_>>>()?;
        let base_cfg = AttackConfig {
            seed: ctx.seed,
            inner_steps: resolve(args.inner_steps, &ctx.cfg, "T", 25)?,
            epochs: resolve(args.epochs, &ctx.cfg, "epochs", 1)?,
            ..Default::default()
        };

        if let Some(grid) = &args.sweep_lambda {
            let mut csv = String::from("lambda,target,mae,mse\n");
            for raw in split_list(grid) {
                let lambda: f64 = raw.parse().context("lambda grid entry")?;
                let cfg = AttackConfig { lambda, ..base_cfg.clone() };
                let (patch, _) = pap_generate(&source, &attack_scenes, &cfg)?;
                let matrix = run_transfer_eval(
                    &target_refs,
                    &[(format!("lambda={raw}"), &patch)],
                    &ds.test,
                    ctx.seed,
                )?;
                for (ti, target) in matrix.targets.iter().enumerate() {
                    let m = &matrix.cells[0][ti];
                    csv.push_str(&format!("{raw},{target},{},{}\n", m.mae, m.mse));
                }
            }
            std::fs::write(ctx.out.join("sweep_lambda.csv"), csv)?;
            did_something = true;
        }

        if args.loss_ablation {
            // none / L_s without W / L_s / L_p / L_s + lambda L_p.
            let variants: Vec<(&str, Option<AttackConfig>)> = vec![
                ("none", None),
                (
                    "ls_no_w",
                    Some(AttackConfig {
                        lambda: 0.0,
                        use_density_weights: false,
                        ..base_cfg.clone()
                    }),
                ),
                ("ls", Some(AttackConfig { lambda: 0.0, ..base_cfg.clone() })),
                (
                    "lp",
                    Some(AttackConfig {
                        lambda: 1.0,
                        use_scale_loss: false,
                        ..base_cfg.clone()
                    }),
                ),
                ("full", Some(base_cfg.clone())),
            ];
            let mut csv = String::from("loss,target,mae,mse\n");
            for (name, cfg) in variants {
                match cfg {
                    None => {
                        let matrix = run_transfer_eval(&target_refs, &[], &ds.test, ctx.seed)?;
                        for (ti, target) in matrix.targets.iter().enumerate() {
                            let m = &matrix.clean[ti];
                            csv.push_str(&format!("{name},{target},{},{}\n", m.mae, m.mse));
                        }
                    }
                    Some(cfg) => {
                        let (patch, _) = pap_generate(&source, &attack_scenes, &cfg)?;
                        let matrix = run_transfer_eval(
                            &target_refs,
                            &[(name.to_string(), &patch)],
                            &ds.test,
                            ctx.seed,
                        )?;
                        for (ti, target) in matrix.targets.iter().enumerate() {
                            let m = &matrix.cells[0][ti];
                            csv.push_str(&format!("{name},{target},{},{}\n", m.mae, m.mse));
                        }
                    }
                }
            }
            std::fs::write(ctx.out.join("loss_ablation.csv"), csv)?;
            did_something = true;
        }
    }

    if !did_something {
        bail!("report: nothing to do; pass --sweep-lambda, --loss-ablation or --overestimation");
    }
    ctx.write_run_json(
        "report",
        json!({
            "sweep_lambda": args.sweep_lambda,
            "loss_ablation": args.loss_ablation,
            "overestimation": args.overestimation,
        }),
    )?;
    Ok(())
}
