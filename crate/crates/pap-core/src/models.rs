//! Toy density-map estimation networks.
//!
//! Two families, preserving the structural split that matters for transfer
//! experiments: a multi-column net with three parallel branches of distinct
//! kernel sizes fused by a 1x1 convolution (output stride 4), and a
//! single-column net whose backbone ends in dilation-2 convolutions (output
//! stride 8). Both finish with a 1-channel head behind a relu, so predicted
//! density is non-negative and the count is the sum of the output map.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, ParamRecord};
use crate::tensor::{lit, Scalar, Tape, Tensor};

/// Architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MultiColumn,
    SingleColumn,
}

/// Buildable description of a model; the JSON sidecar of every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub in_channels: usize,
    pub output_stride: usize,
    pub seed: u64,
    pub widths: Vec<usize>,
}

impl ModelSpec {
    /// Default multi-column net: branch kernels {9,7,5}, {7,5,3}, {5,3,3}
    /// with two pools per branch.
    pub fn multi_column(seed: u64) -> Self {
        ModelSpec {
            family: Family::MultiColumn,
            in_channels: 3,
            output_stride: 4,
            seed,
            widths: vec![6, 5, 8, 6, 10, 8],
        }
    }

    /// Default single-column net: four plain 3x3 convs, then three
    /// dilation-2 convs, three pools along the way.
    pub fn single_column(seed: u64) -> Self {
        ModelSpec {
            family: Family::SingleColumn,
            in_channels: 3,
            output_stride: 8,
            seed,
            widths: vec![10, 12, 14, 16, 12, 10, 8],
        }
    }

    fn validate(&self) -> Result<()> {
        let want = match self.family {
            Family::MultiColumn => 6,
            Family::SingleColumn => 7,
        };
        if self.widths.len() != want {
            return Err(Error::arg(
                "ModelSpec",
                format!("{:?} expects {want} widths, got {}", self.family, self.widths.len()),
            ));
        }
        let stride = match self.family {
            Family::MultiColumn => 4,
            Family::SingleColumn => 8,
        };
        if self.output_stride != stride {
            return Err(Error::arg(
                "ModelSpec",
                format!("{:?} has output stride {stride}, got {}", self.family, self.output_stride),
            ));
        }
        Ok(())
    }
}

/// One convolution layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvParam<T> {
    pub name: String,
    pub weight: Vec<T>,
    pub wdims: [usize; 4],
    pub bias: Vec<T>,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
enum Arch<T> {
    Multi { branches: Vec<Vec<ConvParam<T>>>, fuse: ConvParam<T> },
    Single { backbone: Vec<ConvParam<T>>, head: ConvParam<T> },
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    arch: Arch<T>,
}

/// Kernel size schedule of the multi-column branches.
const MULTI_KERNELS: [[usize; 3]; 3] = [[9, 7, 5], [7, 5, 3], [5, 3, 3]];

fn init_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    dilation: usize,
    bias_init: f64,
) -> ConvParam<T> {
    let fan_in = in_c * k * k;
    let bound = (1.0 / fan_in as f64).sqrt();
    let weight = (0..out_c * in_c * k * k)
        .map(|_| lit(rng.random_range(-bound..bound)))
        .collect();
    ConvParam {
        name: name.to_string(),
        weight,
        wdims: [out_c, in_c, k, k],
        bias: vec![lit(bias_init); out_c],
        dilation,
    }
}

impl<T: Scalar> Model<T> {
    /// Build a freshly initialized model; weights are uniform in
    /// +-sqrt(1/fan_in) from the spec seed, biases zero.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // The 1-channel head sits behind a relu on non-negative features; a
        // zero bias there can start it dead with no gradient at all, so it
        // gets a small positive offset. Everything else starts at zero bias.
        let head_bias = 0.01;
        let arch = match spec.family {
            Family::MultiColumn => {
                let mut branches = Vec::new();
                let mut fuse_in = 0;
                for (b, kernels) in MULTI_KERNELS.iter().enumerate() {
                    let w1 = spec.widths[2 * b];
                    let w2 = spec.widths[2 * b + 1];
                    let chans = [(spec.in_channels, w1), (w1, w2), (w2, w2)];
                    let mut layers = Vec::new();
                    for (i, (&k, &(ic, oc))) in kernels.iter().zip(chans.iter()).enumerate() {
                        layers.push(init_conv(&mut rng, &format!("b{b}.conv{i}"), oc, ic, k, 1, 0.0));
                    }
                    fuse_in += w2;
                    branches.push(layers);
                }
                let fuse = init_conv(&mut rng, "fuse", 1, fuse_in, 1, 1, head_bias);
                Arch::Multi { branches, fuse }
            }
            Family::SingleColumn => {
                let mut backbone = Vec::new();
                let mut ic = spec.in_channels;
                for (i, &oc) in spec.widths.iter().enumerate() {
                    let dilation = if i >= 4 { 2 } else { 1 };
                    backbone.push(init_conv(&mut rng, &format!("conv{i}"), oc, ic, 3, dilation, 0.0));
                    ic = oc;
                }
                let head = init_conv(&mut rng, "head", 1, ic, 1, 1, head_bias);
                Arch::Single { backbone, head }
            }
        };
        Ok(Model { spec, arch })
    }

    pub fn params(&self) -> Vec<&ConvParam<T>> {
        match &self.arch {
            Arch::Multi { branches, fuse } => {
                branches.iter().flatten().chain(std::iter::once(fuse)).collect()
            }
            Arch::Single { backbone, head } => {
                backbone.iter().chain(std::iter::once(head)).collect()
            }
        }
    }

    /// Mutable parameter access, in the same order as [`Model::params`];
    /// what optimizers and tests reach for.
    pub fn params_mut(&mut self) -> Vec<&mut ConvParam<T>> {
        match &mut self.arch {
            Arch::Multi { branches, fuse } => {
                branches.iter_mut().flatten().chain(std::iter::once(fuse)).collect()
            }
            Arch::Single { backbone, head } => {
                backbone.iter_mut().chain(std::iter::once(head)).collect()
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Bind this model to a tape for one or more forward passes.
    /// `track_params` makes the parameters differentiable leaves (training);
    /// otherwise only the image input can carry gradients (attacks).
    /// Parameters are bound once per name, so gradients accumulate across
    /// every forward run through the same binding.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape<T>, track_params: bool) -> Bound<'m, 't, T> {
        Bound { model: self, binder: Binder { tape, track_params, params: Vec::new() } }
    }

    /// Single forward pass; see [`Model::bind`] for multi-pass use.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        image: Tensor<'t, T>,
        track_params: bool,
    ) -> Result<ForwardPass<'t, T>> {
        self.bind(tape, track_params).forward(image)
    }

    /// Run only the density head (the layer behind the activation named
    /// "features"): the 1x1 fusion conv for the multi-column family, the 1x1
    /// head conv for the single-column one, each with the final relu.
    pub fn forward_head<'t>(
        &self,
        tape: &'t Tape<T>,
        features: Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>> {
        let mut bound = Binder { tape, track_params: false, params: Vec::new() };
        let head = match &self.arch {
            Arch::Multi { fuse, .. } => fuse,
            Arch::Single { head, .. } => head,
        };
        Ok(bound.conv(head, features)?.relu())
    }

    /// Canonical parameter serialization order and content, in f32.
    pub fn to_records(&self) -> Vec<ParamRecord> {
        let mut out = Vec::new();
        for p in self.params() {
            out.push(ParamRecord {
                name: format!("{}.weight", p.name),
                dims: p.wdims.to_vec(),
                values: p.weight.iter().map(|v| v.to_f64().unwrap() as f32).collect(),
            });
            out.push(ParamRecord {
                name: format!("{}.bias", p.name),
                dims: vec![p.bias.len()],
                values: p.bias.iter().map(|v| v.to_f64().unwrap() as f32).collect(),
            });
        }
        out
    }

    fn load_records(&mut self, records: &[ParamRecord]) -> Result<()> {
        for p in self.params_mut() {
            for (suffix, dims, slot) in [
                ("weight", p.wdims.to_vec(), &mut p.weight),
                ("bias", vec![p.bias.len()], &mut p.bias),
            ] {
                let want = format!("{}.{}", p.name, suffix);
                let rec = records.iter().find(|r| r.name == want).ok_or_else(|| {
                    Error::arg("load_weights", format!("checkpoint is missing {want}"))
                })?;
                if rec.dims != dims {
                    return Err(Error::shape(
                        "load_weights",
                        format!("{want}: checkpoint {:?} vs model {:?}", rec.dims, dims),
                    ));
                }
                *slot = rec.values.iter().map(|&v| lit(v as f64)).collect();
            }
        }
        Ok(())
    }

    /// Write `<stem>.papw` weights plus a `<stem>.json` spec sidecar.
    pub fn save(&self, stem: &Path) -> Result<()> {
        io::write_weights(&stem.with_extension("papw"), &self.to_records())?;
        let json = serde_json::to_string_pretty(&self.spec)?;
        std::fs::write(stem.with_extension("json"), json + "\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let spec_path = stem.with_extension("json");
        io::require(&spec_path)?;
        let spec: ModelSpec = serde_json::from_str(&std::fs::read_to_string(&spec_path)?)?;
        let mut model = Model::new(spec)?;
        model.load_records(&io::read_weights(&stem.with_extension("papw"))?)?;
        Ok(model)
    }
}

/// A model attached to a tape; runs forward passes with shared parameter
/// leaves.
pub struct Bound<'m, 't, T: Scalar> {
    model: &'m Model<T>,
    binder: Binder<'t, T>,
}

impl<'m, 't, T: Scalar> Bound<'m, 't, T> {
    pub fn forward(&mut self, image: Tensor<'t, T>) -> Result<ForwardPass<'t, T>> {
        let shape = image.shape();
        let spec = &self.model.spec;
        if shape.len() != 4 || shape[1] != spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!("want [N,{},H,W] input, got {:?}", spec.in_channels, shape),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        let s = spec.output_stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::arg(
                "forward",
                format!("input {h}x{w} not divisible by output stride {s}"),
            ));
        }
        let bound = &mut self.binder;
        let mut activations: Vec<(String, Tensor<'t, T>)> = Vec::new();

        let pred = match &self.model.arch {
            Arch::Multi { branches, fuse } => {
                let mut outs = Vec::new();
                for (b, layers) in branches.iter().enumerate() {
                    let mut cur = image;
                    for (i, layer) in layers.iter().enumerate() {
                        cur = bound.conv(layer, cur)?.relu();
                        if i < 2 {
                            cur = cur.maxpool2()?;
                        }
                    }
                    activations.push((format!("b{b}.out"), cur));
                    outs.push(cur);
                }
                let features = Tensor::concat_channels(&outs)?;
                activations.push(("features".into(), features));
                bound.conv(fuse, features)?.relu()
            }
            Arch::Single { backbone, head } => {
                let mut cur = image;
                for (i, layer) in backbone.iter().enumerate() {
                    cur = bound.conv(layer, cur)?.relu();
                    if i < 3 {
                        cur = cur.maxpool2()?;
                    }
                    activations.push((format!("act{i}"), cur));
                }
                activations.push(("features".into(), cur));
                bound.conv(head, cur)?.relu()
            }
        };
        Ok(ForwardPass { pred, activations, params: self.binder.params.clone() })
    }

    /// All parameters bound so far, in binding order.
    pub fn params(&self) -> &[(String, Tensor<'t, T>)] {
        &self.binder.params
    }
}

/// Everything produced by one forward pass.
pub struct ForwardPass<'t, T: Scalar> {
    pub pred: Tensor<'t, T>,
    pub activations: Vec<(String, Tensor<'t, T>)>,
    pub params: Vec<(String, Tensor<'t, T>)>,
}

impl<'t, T: Scalar> ForwardPass<'t, T> {
    pub fn activation(&self, name: &str) -> Option<Tensor<'t, T>> {
        self.activations.iter().find(|(n, _)| n == name).map(|(_, t)| *t)
    }
}

/// Binds model parameters onto a tape, once per parameter even when a layer
/// is applied to several inputs, so gradients accumulate across a batch.
struct Binder<'t, T: Scalar> {
    tape: &'t Tape<T>,
    track_params: bool,
    params: Vec<(String, Tensor<'t, T>)>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    fn bind(&mut self, name: String, dims: &[usize], values: &[T]) -> Result<Tensor<'t, T>> {
        if let Some((_, t)) = self.params.iter().find(|(n, _)| *n == name) {
            return Ok(*t);
        }
        let t = if self.track_params {
            self.tape.leaf_grad(dims, values.to_vec())?
        } else {
            self.tape.leaf(dims, values.to_vec())?
        };
        self.params.push((name, t));
        Ok(t)
    }

    fn conv(&mut self, p: &ConvParam<T>, x: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let w = self.bind(format!("{}.weight", p.name), &p.wdims, &p.weight)?;
        let b = self.bind(format!("{}.bias", p.name), &[p.bias.len()], &p.bias)?;
        x.conv2d(w, b, p.dilation)
    }
}

/// Plain SGD-with-momentum training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, learning_rate: 0.002, momentum: 0.9, seed: 7, batch_size: 4 }
    }
}

/// One training example: planar image and its ground-truth density map
/// already downsampled (mass-preserving) to the model's output resolution.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub image: Vec<T>,
    pub h: usize,
    pub w: usize,
    pub target: Vec<T>,
}

/// Half mean squared map error over a batch: 1/(2B) sum_b ||pred_b - gt_b||^2.
fn batch_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    model: &Model<T>,
    batch: &[&TrainSample<T>],
) -> Result<(Tensor<'t, T>, Vec<(String, Tensor<'t, T>)>)> {
    let mut total: Option<Tensor<'t, T>> = None;
    let mut bound = model.bind(tape, true);
    for sample in batch {
        let x = tape.leaf(&[1, 3, sample.h, sample.w], sample.image.clone())?;
        let pass = bound.forward(x)?;
        let pred_shape = pass.pred.shape();
        if pred_shape[2] * pred_shape[3] != sample.target.len() {
            return Err(Error::shape(
                "train",
                format!(
                    "target has {} cells, model outputs {}x{}",
                    sample.target.len(),
                    pred_shape[2],
                    pred_shape[3]
                ),
            ));
        }
        let gt = tape.leaf(&pred_shape, sample.target.clone())?;
        let diff = pass.pred.sub(gt)?;
        let sq = diff.mul(diff)?.sum(None)?;
        total = Some(match total {
            None => sq,
            Some(acc) => acc.add(sq)?,
        });
    }
    let loss = total
        .ok_or(Error::EmptyInput { op: "train" })?
        .mul_scalar(lit(1.0 / (2.0 * batch.len() as f64)));
    Ok((loss, bound.params().to_vec()))
}

/// Train in place; returns the per-epoch mean loss curve.
///
/// Deterministic under a fixed config: scene order is shuffled by a seeded
/// generator and all updates are sequential. Aborts with a diagnostic if the
/// loss ever stops being finite.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[TrainSample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput { op: "train" });
    }
    if cfg.batch_size == 0 || cfg.learning_rate < 0.0 {
        return Err(Error::arg("train", "batch_size >= 1 and learning_rate >= 0 required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<(Vec<T>, Vec<T>)> = model
        .params()
        .iter()
        .map(|p| (vec![T::zero(); p.weight.len()], vec![T::zero(); p.bias.len()]))
        .collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        // Fisher-Yates from the seeded stream.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let tape = Tape::new();
            let (loss, params) = batch_loss(&tape, model, &batch)?;
            let loss_val = loss.item().to_f64().unwrap();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {batches}"),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<T>> =
                params.iter().map(|(_, t)| t.grad().expect("tracked param")).collect();
            apply_sgd(model, &params, &grads, &mut velocity, cfg)?;
            epoch_loss += loss_val;
            batches += 1;
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok(curve)
}

fn apply_sgd<T: Scalar>(
    model: &mut Model<T>,
    bound: &[(String, crate::tensor::Tensor<'_, T>)],
    grads: &[Vec<T>],
    velocity: &mut [(Vec<T>, Vec<T>)],
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = lit::<T>(cfg.learning_rate);
    let mu = lit::<T>(cfg.momentum);
    for (pi, p) in model.params_mut().into_iter().enumerate() {
        for (suffix, values, vel) in [
            ("weight", &mut p.weight, &mut velocity[pi].0),
            ("bias", &mut p.bias, &mut velocity[pi].1),
        ] {
            let name = format!("{}.{}", p.name, suffix);
            let idx = bound
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::arg("train", format!("no bound tensor for {name}")))?;
            let g = &grads[idx];
            for ((w, v), gi) in values.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = mu * *v + *gi;
                *w = *w - lr * *v;
            }
        }
    }
    Ok(())
}

/// Predicted count: integral of the output map, accumulated in f64.
pub fn predicted_count<T: Scalar>(model: &Model<T>, image: &[T], h: usize, w: usize) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.leaf(&[1, 3, h, w], image.to_vec())?;
    let pass = model.forward(&tape, x, false)?;
    Ok(pass.pred.value().iter().map(|v| v.to_f64().unwrap()).sum())
}
