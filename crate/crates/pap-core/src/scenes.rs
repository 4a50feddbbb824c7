//! Synthetic crowd scenes.
//!
//! Scenes are procedurally textured backgrounds with dark, radially shaded
//! elliptical "heads" whose radii vary per head, giving the scale diversity
//! the counting models have to cope with. Three named presets ship:
//! `standard`, `scale-shift` (small heads in training, mixed at test time)
//! and `clutter` (head-free distractor blobs plus negative samples in the
//! test split). Everything is bit-deterministic from the dataset seed, with
//! one independent stream per scene.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::density::{self, DensityMap, PointSet};
use crate::error::{Error, Result};
use crate::io;
use crate::models::TrainSample;
use crate::tensor::{lit, Scalar};

/// Density-map generation parameters used for every scene.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DensityParams {
    pub beta: f64,
    pub k: usize,
    /// Constant-mode bandwidth in pixels; sized for 96x96 desk scenes.
    pub sigma_const: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        DensityParams { beta: 0.3, k: 3, sigma_const: 3.0 }
    }
}

/// Generation parameters for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive head count range.
    pub head_count: (usize, usize),
    /// Head radius range in pixels; drives the scale variation.
    pub head_radius: (f64, f64),
    /// Inclusive count range of annotation-free distractor blobs.
    pub distractors: (usize, usize),
    /// Minimum head-centre distance to every border.
    pub margin: f64,
    pub texture_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub density: DensityParams,
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.width % 8 != 0 || self.height % 8 != 0 {
            return Err(Error::arg(
                "SceneConfig",
                format!("dims {}x{} must be divisible by 8", self.width, self.height),
            ));
        }
        if self.head_radius.0 <= 0.0 || self.head_radius.1 < self.head_radius.0 {
            return Err(Error::arg("SceneConfig", "head radius range must be positive"));
        }
        if self.head_count.1 < self.head_count.0 {
            return Err(Error::arg("SceneConfig", "head count range is inverted"));
        }
        Ok(())
    }
}

/// The named dataset presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Standard,
    ScaleShift,
    Clutter,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Standard => "standard",
            Preset::ScaleShift => "scale-shift",
            Preset::Clutter => "clutter",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Preset::Standard),
            "scale-shift" => Ok(Preset::ScaleShift),
            "clutter" => Ok(Preset::Clutter),
            other => Err(Error::arg("preset", format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Preset {
    /// Desk-scale default: 64 training and 32 test scenes at 96x96, crowds
    /// of small heads with wide scale variation.
    pub fn base_config(&self) -> SceneConfig {
        SceneConfig {
            width: 96,
            height: 96,
            head_count: (10, 30),
            head_radius: (1.6, 5.0),
            distractors: (0, 0),
            margin: 8.0,
            texture_seed: 0,
            n_train: 64,
            n_test: 32,
            density: DensityParams::default(),
        }
    }

    /// Per-scene configuration; presets tweak the base per split and index.
    fn scene_config(&self, split: Split, index: usize) -> SceneConfig {
        let mut cfg = self.base_config();
        match self {
            Preset::Standard => {}
            Preset::ScaleShift => {
                cfg.head_radius = match split {
                    Split::Train => (1.6, 3.0),
                    Split::Test => (1.6, 6.5),
                };
            }
            Preset::Clutter => {
                if split == Split::Test {
                    cfg.distractors = (4, 9);
                    if index % 2 == 1 {
                        // Negative sample: non-trivial image, empty PointSet.
                        cfg.head_count = (0, 0);
                    }
                }
            }
        }
        cfg
    }
}

/// One generated scene: planar [3,H,W] image in [0,1] (already quantized to
/// the 8-bit values that land on disk), its annotations, and an
/// image-resolution density map.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Vec<f32>,
    pub w: usize,
    pub h: usize,
    pub points: PointSet,
    pub density: DensityMap,
}

impl Scene {
    pub fn gt_count(&self) -> f64 {
        self.points.len() as f64
    }

    /// Training view: ground truth downsampled, mass preserved, to the
    /// model's output resolution.
    pub fn train_sample<T: Scalar>(&self, output_stride: usize) -> Result<TrainSample<T>> {
        let target = density::downsample_preserving_sum(&self.density, output_stride)?;
        Ok(TrainSample {
            image: self.image.iter().map(|&v| lit(v as f64)).collect(),
            h: self.h,
            w: self.w,
            target: target.to_scalars(),
        })
    }
}

struct RenderedScene {
    image: Vec<f32>,
    points: Vec<(f64, f64)>,
    /// Rasterizer's own blob counters; the generator self-audit checks them
    /// against the annotations.
    #[allow(dead_code)]
    rendered_heads: usize,
    #[allow(dead_code)]
    rendered_distractors: usize,
}

/// Generate one scene from a caller-provided stream.
pub fn gen_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<f32>, PointSet)> {
    let r = render_scene(cfg, rng)?;
    let points = PointSet::new(r.points, cfg.width, cfg.height)?;
    Ok((r.image, points))
}

fn render_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<RenderedScene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut image = background(cfg, rng);

    let n_heads = rng.random_range(cfg.head_count.0..=cfg.head_count.1);
    let mut centers: Vec<(f64, f64, f64)> = Vec::with_capacity(n_heads);
    let mut points = Vec::with_capacity(n_heads);
    let mut rendered_heads = 0;
    for _ in 0..n_heads {
        let radius = rng.random_range(cfg.head_radius.0..=cfg.head_radius.1);
        let mut placed = false;
        // Overlap is allowed but centres must keep a little distance, or
        // annotations stop being meaningful. Budgeted retry; a config that
        // cannot fit its heads is an error, not an infinite loop.
        for _ in 0..200 {
            let x = rng.random_range(cfg.margin..(w as f64 - cfg.margin));
            let y = rng.random_range(cfg.margin..(h as f64 - cfg.margin));
            let ok = centers
                .iter()
                .all(|&(cx, cy, cr)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() > 0.7 * (radius + cr).min(radius.max(cr) * 1.6));
            if ok {
                centers.push((x, y, radius));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::arg(
                "gen_scene",
                format!("could not place {n_heads} heads in {w}x{h} within retry budget"),
            ));
        }
        let (x, y, radius) = *centers.last().unwrap();
        draw_head(&mut image, w, h, x, y, radius, rng);
        rendered_heads += 1;
        points.push((x, y));
    }

    let n_distractors = if cfg.distractors.1 == 0 {
        0
    } else {
        rng.random_range(cfg.distractors.0..=cfg.distractors.1)
    };
    for _ in 0..n_distractors {
        let radius = rng.random_range(2.0..7.0);
        let x = rng.random_range(radius..(w as f64 - radius));
        let y = rng.random_range(radius..(h as f64 - radius));
        draw_distractor(&mut image, w, h, x, y, radius, rng);
    }

    // Quantize to the 8-bit values that the PPM writer will store, so the
    // in-memory dataset and a written-then-loaded one are bit-identical.
    let rgb = io::planar_unit_to_rgb(&image, w, h);
    let image = io::rgb_to_planar_unit(&rgb, w, h);
    Ok(RenderedScene { image, points, rendered_heads, rendered_distractors: n_distractors })
}

/// Smooth value-noise background in a muted mid-bright palette.
fn background(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (w, h) = (cfg.width, cfg.height);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed ^ rng.next_u64());
    let cell = 16usize;
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let grid: Vec<[f64; 3]> = (0..gw * gh)
        .map(|_| {
            let base = bg_rng.random_range(0.55..0.85);
            [
                base + bg_rng.random_range(-0.06..0.06),
                base + bg_rng.random_range(-0.06..0.06),
                base + bg_rng.random_range(-0.06..0.06),
            ]
        })
        .collect();
    let mut out = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        let gy = y as f64 / cell as f64;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / cell as f64;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f64;
            for c in 0..3 {
                let v00 = grid[y0 * gw + x0][c];
                let v01 = grid[y0 * gw + x0 + 1][c];
                let v10 = grid[(y0 + 1) * gw + x0][c];
                let v11 = grid[(y0 + 1) * gw + x0 + 1][c];
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out[c * w * h + y * w + x] = v as f32;
            }
        }
    }
    // Fine per-pixel grain.
    for v in out.iter_mut() {
        *v = (*v + bg_rng.random_range(-0.015..0.015) as f32).clamp(0.0, 1.0);
    }
    out
}

/// Dark radially shaded ellipse; the learnable head cue.
fn draw_head(image: &mut [f32], w: usize, h: usize, cx: f64, cy: f64, radius: f64, rng: &mut ChaCha8Rng) {
    let aspect = rng.random_range(0.85..1.18);
    let (rx, ry) = (radius * aspect, radius / aspect);
    let tone: [f64; 3] = {
        let base = rng.random_range(0.04..0.22);
        [base, base + rng.random_range(-0.03..0.03), base + rng.random_range(-0.03..0.03)]
    };
    let y_lo = (cy - ry).floor().max(0.0) as usize;
    let y_hi = ((cy + ry).ceil() as usize + 1).min(h);
    let x_lo = (cx - rx).floor().max(0.0) as usize;
    let x_hi = ((cx + rx).ceil() as usize + 1).min(w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let d2 = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
            if d2 <= 1.0 {
                let blend = (1.0 - d2).sqrt() * 0.92;
                for c in 0..3 {
                    let idx = c * w * h + y * w + x;
                    let cur = image[idx] as f64;
                    image[idx] = (cur * (1.0 - blend) + tone[c] * blend) as f32;
                }
            }
        }
    }
}

/// Annotation-free clutter: a speckled round blotch, head-sized but textured,
/// the kind of thing a counting model likes to mistake for people.
fn draw_distractor(
    image: &mut [f32],
    w: usize,
    h: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    rng: &mut ChaCha8Rng,
) {
    let y_lo = (cy - radius).floor().max(0.0) as usize;
    let y_hi = ((cy + radius).ceil() as usize + 1).min(h);
    let x_lo = (cx - radius).floor().max(0.0) as usize;
    let x_hi = ((cx + radius).ceil() as usize + 1).min(w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (radius * radius);
            if d2 <= 1.0 {
                let speck: f64 = rng.random_range(0.0..1.0);
                let dark = speck < 0.55;
                let strength = (1.0 - d2) * 0.85;
                for c in 0..3 {
                    let idx = c * w * h + y * w + x;
                    let cur = image[idx] as f64;
                    let target = if dark {
                        rng.random_range(0.02..0.25)
                    } else {
                        rng.random_range(0.75..0.98)
                    };
                    image[idx] = (cur * (1.0 - strength) + target * strength) as f32;
                }
            }
        }
    }
}

/// A whole generated dataset, kept in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub preset: Preset,
    pub seed: u64,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

fn scene_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One independent stream per scene: (seed, index) -> stream.
    let split_off = match split {
        Split::Train => 0u64,
        Split::Test => 1u64 << 32,
    };
    rng.set_stream(split_off + index as u64 + 1);
    rng
}

fn build_scene(preset: Preset, seed: u64, split: Split, index: usize) -> Result<Scene> {
    let cfg = preset.scene_config(split, index);
    let mut rng = scene_rng(seed, split, index);
    let (image, points) = gen_scene(&cfg, &mut rng)?;
    let mode = density::default_mode(points.len());
    let density = density::gen_density_map(
        &points,
        mode,
        cfg.density.beta,
        cfg.density.k,
        cfg.density.sigma_const,
    )?;
    Ok(Scene { image, w: cfg.width, h: cfg.height, points, density })
}

impl Dataset {
    /// Deterministically generate a dataset in memory.
    pub fn generate(preset: Preset, seed: u64) -> Result<Dataset> {
        let base = preset.base_config();
        let train = (0..base.n_train)
            .map(|i| build_scene(preset, seed, Split::Train, i))
            .collect::<Result<Vec<_>>>()?;
        let test = (0..base.n_test)
            .map(|i| build_scene(preset, seed, Split::Test, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { preset, seed, train, test })
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        io::require(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let preset: Preset = manifest.preset.parse()?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in &manifest.scenes {
            let (w, h, rgb) = io::read_ppm(&dir.join(&entry.image))?;
            let image = io::rgb_to_planar_unit(&rgb, w, h);
            let points = PointSet::new(entry.points.clone(), w, h)?;
            let density = io::read_density(&dir.join(&entry.density))?;
            let scene = Scene { image, w, h, points, density };
            if entry.image.contains("train_") {
                train.push(scene);
            } else {
                test.push(scene);
            }
        }
        Ok(Dataset { preset, seed: manifest.seed, train, test })
    }
}

/// Manifest schema written next to the generated files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub preset: String,
    pub scenes: Vec<ManifestScene>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScene {
    pub image: String,
    pub points: Vec<(f64, f64)>,
    pub density: String,
    pub sha256: String,
}

/// Annotation file line: one scene per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub image: String,
    pub points: Vec<(f64, f64)>,
}

/// Generate a dataset and write images (PPM), annotations (JSONL), density
/// maps (PAPD1) and the checksummed manifest under `dir`.
pub fn gen_dataset(dir: &Path, preset: Preset, seed: u64) -> Result<Manifest> {
    let ds = Dataset::generate(preset, seed)?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("density"))?;

    let mut manifest = Manifest { seed, preset: preset.to_string(), scenes: Vec::new() };
    let mut annotations = String::new();
    for (split, scenes) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, scene) in scenes.iter().enumerate() {
            let image_rel = format!("images/{split}_{i:03}.ppm");
            let density_rel = format!("density/{split}_{i:03}.papd");
            let rgb = io::planar_unit_to_rgb(&scene.image, scene.w, scene.h);
            io::write_ppm(&dir.join(&image_rel), scene.w, scene.h, &rgb)?;
            io::write_density(&dir.join(&density_rel), &scene.density)?;
            let ann = SceneAnnotation { image: image_rel.clone(), points: scene.points.points.clone() };
            annotations.push_str(&serde_json::to_string(&ann)?);
            annotations.push('\n');
            manifest.scenes.push(ManifestScene {
                image: image_rel.clone(),
                points: scene.points.points.clone(),
                density: density_rel,
                sha256: io::sha256_file(&dir.join(&image_rel))?,
            });
        }
    }
    std::fs::write(dir.join("annotations.jsonl"), annotations)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
