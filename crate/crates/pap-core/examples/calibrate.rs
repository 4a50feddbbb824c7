// temporary probe: retuned scenes -> train -> micro-head response -> PAP attack
use pap_core::attack::{apply_patch, make_mask, pap_generate, AttackConfig, AttackScene, Direction, Patch, PatchShape};
use pap_core::eval::run_transfer_eval;
use pap_core::models::{predicted_count, train, Model, ModelSpec, TrainConfig};
use pap_core::scenes::{Dataset, Preset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

fn micro_heads_patch(p: usize) -> Patch {
    let mut delta = vec![0.85f32; 3 * p * p];
    // 3x3 grid of ~1.3px-radius dark blobs.
    for gy in 0..3 {
        for gx in 0..3 {
            let (cy, cx) = (1.5 + 3.3 * gy as f32, 1.5 + 3.3 * gx as f32);
            for y in 0..p {
                for x in 0..p {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    if d2 <= 1.8 {
                        let w = (1.0 - d2 / 1.8).sqrt();
                        for c in 0..3 {
                            let idx = c * p * p + y * p + x;
                            delta[idx] = delta[idx] * (1.0 - w) + 0.08 * w;
                        }
                    }
                }
            }
        }
    }
    Patch { delta, channels: 3, size: p, shape: PatchShape::Square }
}

fn main() {
    let ds = Dataset::generate(Preset::Standard, 7).unwrap();
    let mean_gt: f64 = ds.test.iter().map(|s| s.gt_count()).sum::<f64>() / 32.0;
    eprintln!("mean test count {mean_gt:.1}");

    let t0 = std::time::Instant::now();
    let mut mc = Model::<f32>::new(ModelSpec::multi_column(1)).unwrap();
    let s4: Vec<_> = ds.train.iter().map(|s| s.train_sample::<f32>(4).unwrap()).collect();
    let c1 = train(&mut mc, &s4, &TrainConfig { epochs: 60, ..Default::default() }).unwrap();
    let mut sc = Model::<f32>::new(ModelSpec::single_column(2)).unwrap();
    let s8: Vec<_> = ds.train.iter().map(|s| s.train_sample::<f32>(8).unwrap()).collect();
    let c2 = train(&mut sc, &s8, &TrainConfig { epochs: 80, ..Default::default() }).unwrap();
    eprintln!("train: {:.0}s, losses {:.3}/{:.3}", t0.elapsed().as_secs_f32(), c1.last().unwrap(), c2.last().unwrap());
    mc.save(std::path::Path::new("/tmp/calib2/mc")).unwrap();
    sc.save(std::path::Path::new("/tmp/calib2/sc")).unwrap();

    for (name, m) in [("mc", &mc), ("sc", &sc)] {
        let mut mae = 0.0;
        for s in &ds.test {
            mae += (predicted_count(m, &s.image, s.h, s.w).unwrap() - s.gt_count()).abs();
        }
        eprintln!("{name} clean MAE {:.2}", mae / 32.0);
    }

    // micro-head patch response
    let fake = micro_heads_patch(10);
    for (name, m) in [("mc", &mc), ("sc", &sc)] {
        let mut d = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in &ds.test {
            let mask = make_mask(PatchShape::Square, 10, s.w, s.h, None, &mut rng).unwrap();
            let adv = apply_patch(&s.image, s.w, s.h, &fake, &mask);
            d += predicted_count(m, &adv, s.h, s.w).unwrap() - predicted_count(m, &s.image, s.h, s.w).unwrap();
        }
        eprintln!("{name} dMicro {:+.2}", d / 32.0);
    }
    std::io::stderr().flush().unwrap();

    // PAP attack probe: defaults and a stronger budget
    let attack_scenes: Vec<_> = ds.train.iter().map(|s| AttackScene::from_scene(s, 4).unwrap()).collect();
    for (label, alpha, epochs) in [("default", 0.01, 2usize), ("a.05e4", 0.05, 4)] {
        let t0 = std::time::Instant::now();
        let cfg = AttackConfig { seed: 3, alpha, epochs, ..Default::default() };
        let (patch, tel) = pap_generate(&mc, &attack_scenes, &cfg).unwrap();
        let matrix = run_transfer_eval(
            &[("mc".into(), &mc), ("sc".into(), &sc)],
            &[("p".into(), &patch)],
            &ds.test, 11,
        ).unwrap();
        let up = |m: &pap_core::eval::Metrics| m.per_scene.iter().filter(|s| s.count_pred > s.count_clean_pred).count();
        let dc = |m: &pap_core::eval::Metrics| m.per_scene.iter().map(|s| s.count_pred - s.count_clean_pred).sum::<f64>() / 32.0;
        eprintln!(
            "{label} ({:.0}s): mc {:.2}->{:.2} (x{:.1}, up {}, d{:+.1}) | sc {:.2}->{:.2} (x{:.2}, up {}, d{:+.1}) | attn {:.1}->{:.1}",
            t0.elapsed().as_secs_f32(),
            matrix.clean[0].mae, matrix.cells[0][0].mae, matrix.cells[0][0].mae / matrix.clean[0].mae, up(&matrix.cells[0][0]), dc(&matrix.cells[0][0]),
            matrix.clean[1].mae, matrix.cells[0][1].mae, matrix.cells[0][1].mae / matrix.clean[1].mae, up(&matrix.cells[0][1]), dc(&matrix.cells[0][1]),
            tel.position_mass_per_step[0], tel.final_position_mass.unwrap(),
        );
        std::io::stderr().flush().unwrap();
    }

    // decrease probe
    let cfg_d = AttackConfig { direction: Direction::Decrease, seed: 4, ..Default::default() };
    let (dpatch, _) = pap_generate(&mc, &attack_scenes, &cfg_d).unwrap();
    let dm = run_transfer_eval(&[("mc".into(), &mc)], &[("d".into(), &dpatch)], &ds.test, 12).unwrap();
    let lowered = dm.cells[0][0].per_scene.iter().filter(|s| s.count_pred < s.count_clean_pred).count();
    eprintln!("decrease: lowered {}/32", lowered);
}
