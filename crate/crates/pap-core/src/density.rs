//! Ground-truth density maps from point annotations.
//!
//! Each annotated head contributes one truncated, unit-mass Gaussian whose
//! bandwidth either adapts to the mean distance of its k nearest neighbours
//! or is a fixed constant for sparse scenes. Summing the map recovers the
//! head count, which is what the counting metrics rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar};

/// Head-centre annotations for one scene, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<(f64, f64)>,
    pub image_w: usize,
    pub image_h: usize,
}

impl PointSet {
    pub fn new(points: Vec<(f64, f64)>, image_w: usize, image_h: usize) -> Result<Self> {
        for &(x, y) in &points {
            if !(x.is_finite() && y.is_finite()) {
                return Err(Error::NonFinite { context: "annotation point".to_string() });
            }
            if x < 0.0 || y < 0.0 || x >= image_w as f64 || y >= image_h as f64 {
                return Err(Error::arg(
                    "PointSet",
                    format!("point ({x},{y}) outside {image_w}x{image_h} image"),
                ));
            }
        }
        Ok(PointSet { points, image_w, image_h })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Non-negative 2-d grid whose integral estimates a head count.
///
/// `scale` is the edge length in source-image pixels covered by one cell:
/// 1 at image resolution, multiplied by the factor on every downsample.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub values: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub scale: u32,
}

impl DensityMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        DensityMap { values: vec![0.0; h * w], h, w, scale: 1 }
    }

    /// Integral of the map, accumulated in f64.
    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| lit(v as f64)).collect()
    }
}

/// Bandwidth selection for [`gen_density_map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Per-head sigma = beta * mean distance to k nearest neighbours.
    Adaptive,
    /// One fixed sigma for every head.
    Constant,
}

/// Default mode choice when the caller has no preference: adaptive for
/// congested scenes (N >= 4), constant for sparse ones.
pub fn default_mode(n_heads: usize) -> KernelMode {
    if n_heads >= 4 {
        KernelMode::Adaptive
    } else {
        KernelMode::Constant
    }
}

/// Mean Euclidean distance from each point to its min(k, N-1) nearest
/// neighbours. Needs at least two points.
pub fn knn_avg_distance(points: &PointSet, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::arg("knn_avg_distance", "k must be positive"));
    }
    let n = points.len();
    if n < 2 {
        return Err(Error::arg("knn_avg_distance", format!("need >= 2 points, got {n}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for (i, &(xi, yi)) in points.points.iter().enumerate() {
        dists.clear();
        for (j, &(xj, yj)) in points.points.iter().enumerate() {
            if i != j {
                dists.push(((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let take = k.min(n - 1);
        out.push(dists[..take].iter().sum::<f64>() / take as f64);
    }
    Ok(out)
}

/// Build an image-resolution density map from point annotations.
///
/// Every head contributes a Gaussian with sigma_i = beta * d_i (adaptive) or
/// `sigma_const`. Each kernel is truncated to a square window of half-width
/// ceil(4 sigma), renormalized to unit mass over that window, then
/// accumulated; windows sticking out of the image are clipped without
/// re-renormalization, so the map sums to exactly the head count whenever
/// every window fits inside the image.
pub fn gen_density_map(
    points: &PointSet,
    mode: KernelMode,
    beta: f64,
    k: usize,
    sigma_const: f64,
) -> Result<DensityMap> {
    let (h, w) = (points.image_h, points.image_w);
    if points.is_empty() {
        return Ok(DensityMap::zeros(h, w));
    }
    let sigmas: Vec<f64> = match mode {
        KernelMode::Adaptive => {
            if beta <= 0.0 {
                return Err(Error::arg("gen_density_map", format!("beta must be > 0, got {beta}")));
            }
            knn_avg_distance(points, k)?.into_iter().map(|d| beta * d).collect()
        }
        KernelMode::Constant => {
            if sigma_const <= 0.0 {
                return Err(Error::arg(
                    "gen_density_map",
                    format!("sigma_const must be > 0, got {sigma_const}"),
                ));
            }
            vec![sigma_const; points.len()]
        }
    };

    let mut acc = vec![0.0f64; h * w];
    for (&(px, py), &sigma) in points.points.iter().zip(&sigmas) {
        splat_gaussian(&mut acc, h, w, px, py, sigma);
    }
    Ok(DensityMap { values: acc.into_iter().map(|v| v as f32).collect(), h, w, scale: 1 })
}

fn splat_gaussian(acc: &mut [f64], h: usize, w: usize, px: f64, py: f64, sigma: f64) {
    let cx = px.round() as isize;
    let cy = py.round() as isize;
    // Degenerate bandwidth (duplicated annotations): the limit is a unit
    // impulse at the nearest pixel.
    if sigma < 1e-9 {
        let ix = cx.clamp(0, w as isize - 1) as usize;
        let iy = cy.clamp(0, h as isize - 1) as usize;
        acc[iy * w + ix] += 1.0;
        return;
    }
    let r = (4.0 * sigma).ceil() as isize;
    let side = (2 * r + 1) as usize;
    let mut window = vec![0.0f64; side * side];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut mass = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let gx = (cx + dx) as f64;
            let gy = (cy + dy) as f64;
            let g = (-((gx - px).powi(2) + (gy - py).powi(2)) * inv).exp();
            window[((dy + r) * (2 * r + 1) + (dx + r)) as usize] = g;
            mass += g;
        }
    }
    for dy in -r..=r {
        let y = cy + dy;
        if y < 0 || y >= h as isize {
            continue;
        }
        for dx in -r..=r {
            let x = cx + dx;
            if x < 0 || x >= w as isize {
                continue;
            }
            acc[y as usize * w + x as usize] +=
                window[((dy + r) * (2 * r + 1) + (dx + r)) as usize] / mass;
        }
    }
}

/// Reduce resolution by summing `factor x factor` blocks; total mass is
/// unchanged. Dimensions must be divisible by the factor.
pub fn downsample_preserving_sum(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 {
        return Err(Error::arg("downsample_preserving_sum", "factor must be positive"));
    }
    if map.h % factor != 0 || map.w % factor != 0 {
        return Err(Error::arg(
            "downsample_preserving_sum",
            format!("{}x{} not divisible by {factor}", map.h, map.w),
        ));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (oh, ow) = (map.h / factor, map.w / factor);
    let mut out = vec![0.0f32; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0f64;
            for iy in 0..factor {
                for ix in 0..factor {
                    s += map.values[(oy * factor + iy) * map.w + (ox * factor + ix)] as f64;
                }
            }
            out[oy * ow + ox] = s as f32;
        }
    }
    Ok(DensityMap { values: out, h: oh, w: ow, scale: map.scale * factor as u32 })
}
