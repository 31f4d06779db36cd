//! Parametric router: a shared MLP trunk with per-model accuracy and cost
//! heads.
//!
//! Each hidden layer is affine, then layer normalization, then exact GELU,
//! then inverted dropout. The accuracy head is a logit passed through a
//! sigmoid. The cost head regresses cost divided by the dataset cost
//! normalizer. Training minimizes the squared error of both heads on the
//! single logged model of each record; gradients are computed by hand.

mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::data::EvaluationRecord;
use crate::error::{Error, Result};
use crate::eval::{Estimate, Estimator};
use crate::numeric::{normal_cdf, normal_pdf, seeded_rng, sigmoid, CompensatedSum};

pub use optim::{adamw_step, local_train, LocalTraining, LocalWork, OptimizerConfig, OptimizerKind, OptimizerState};

/// Stabilizer inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpArchitecture {
    pub d_emb: usize,
    pub hidden_widths: Vec<usize>,
    pub dropout: f64,
    pub n_models: usize,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self {
            d_emb: 768,
            hidden_widths: vec![512, 512],
            dropout: 0.1,
            n_models: 11,
        }
    }
}

impl MlpArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 {
            return Err(Error::config("mlp.d_emb", "must be at least 1"));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::config("mlp.hidden_widths", "must be nonempty with all widths >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("mlp.dropout", "must lie in [0,1)"));
        }
        if self.n_models == 0 {
            return Err(Error::config("mlp.n_models", "must be at least 1"));
        }
        Ok(())
    }

    fn hidden_out(&self) -> usize {
        *self.hidden_widths.last().expect("validated nonempty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkLayer {
    /// `inputs x outputs`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm_scale: Array1<f64>,
    pub norm_shift: Array1<f64>,
}

/// Per-model linear heads; column `m` belongs to model `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeads {
    pub accuracy_weight: Array2<f64>,
    pub accuracy_bias: Array1<f64>,
    pub cost_weight: Array2<f64>,
    pub cost_bias: Array1<f64>,
}

/// All trainable parameters. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub architecture: MlpArchitecture,
    pub layers: Vec<TrunkLayer>,
    pub heads: ModelHeads,
}

fn fan_in_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| rng.sample(dist))
}

impl MlpParams {
    /// Fan-in scaled uniform weights, zero biases, unit layer-norm scale.
    pub fn init(architecture: &MlpArchitecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = seeded_rng(seed);
        let mut fan_in = architecture.d_emb;
        let layers = architecture
            .hidden_widths
            .iter()
            .map(|&w| {
                let layer = TrunkLayer {
                    weight: fan_in_uniform(fan_in, w, &mut rng),
                    bias: Array1::zeros(w),
                    norm_scale: Array1::ones(w),
                    norm_shift: Array1::zeros(w),
                };
                fan_in = w;
                layer
            })
            .collect();
        let m = architecture.n_models;
        let heads = ModelHeads {
            accuracy_weight: fan_in_uniform(fan_in, m, &mut rng),
            accuracy_bias: Array1::zeros(m),
            cost_weight: fan_in_uniform(fan_in, m, &mut rng),
            cost_bias: Array1::zeros(m),
        };
        Ok(Self {
            architecture: architecture.clone(),
            layers,
            heads,
        })
    }

    /// Every tensor zero, including layer-norm scales.
    pub fn zeros(architecture: &MlpArchitecture) -> Result<Self> {
        let mut p = Self::init(architecture, 0)?;
        p.map_inplace(|_| 0.0);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        p.map_inplace(|_| 0.0);
        p
    }

    pub fn n_models(&self) -> usize {
        self.architecture.n_models
    }

    /// Flat views of every tensor in a fixed order: per layer (weight, bias,
    /// norm scale, norm shift), then the four head tensors.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 4);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            out.push(l.norm_scale.as_slice().expect("standard layout"));
            out.push(l.norm_shift.as_slice().expect("standard layout"));
        }
        let h = &self.heads;
        out.push(h.accuracy_weight.as_slice().expect("standard layout"));
        out.push(h.accuracy_bias.as_slice().expect("standard layout"));
        out.push(h.cost_weight.as_slice().expect("standard layout"));
        out.push(h.cost_bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 4);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            out.push(l.norm_scale.as_slice_mut().expect("standard layout"));
            out.push(l.norm_shift.as_slice_mut().expect("standard layout"));
        }
        let h = &mut self.heads;
        out.push(h.accuracy_weight.as_slice_mut().expect("standard layout"));
        out.push(h.accuracy_bias.as_slice_mut().expect("standard layout"));
        out.push(h.cost_weight.as_slice_mut().expect("standard layout"));
        out.push(h.cost_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f(*v));
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
            && self.layers.iter().zip(&other.layers).all(|(x, y)| x.weight.dim() == y.weight.dim())
            && self.heads.accuracy_weight.dim() == other.heads.accuracy_weight.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().map(|v| v * v))
            .collect::<CompensatedSum>()
            .value()
            .sqrt()
    }

    /// Copy with one more model head appended as column `n_models`.
    pub fn with_new_head(&self, head: &HeadParams) -> Result<Self> {
        let hidden = self.architecture.hidden_out();
        if head.accuracy_weight.len() != hidden || head.cost_weight.len() != hidden {
            return Err(Error::Shape(format!(
                "new head has width {}, trunk output is {hidden}",
                head.accuracy_weight.len()
            )));
        }
        let append_col = |w: &Array2<f64>, col: &Array1<f64>| {
            let mut out = Array2::zeros((w.nrows(), w.ncols() + 1));
            out.slice_mut(ndarray::s![.., ..w.ncols()]).assign(w);
            out.column_mut(w.ncols()).assign(col);
            out
        };
        let append = |b: &Array1<f64>, v: f64| {
            let mut out = b.to_vec();
            out.push(v);
            Array1::from(out)
        };
        let mut architecture = self.architecture.clone();
        architecture.n_models += 1;
        Ok(Self {
            architecture,
            layers: self.layers.clone(),
            heads: ModelHeads {
                accuracy_weight: append_col(&self.heads.accuracy_weight, &head.accuracy_weight),
                accuracy_bias: append(&self.heads.accuracy_bias, head.accuracy_bias),
                cost_weight: append_col(&self.heads.cost_weight, &head.cost_weight),
                cost_bias: append(&self.heads.cost_bias, head.cost_bias),
            },
        })
    }
}

/// The two heads of a single model.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub accuracy_weight: Array1<f64>,
    pub accuracy_bias: f64,
    pub cost_weight: Array1<f64>,
    pub cost_bias: f64,
}

impl HeadParams {
    /// Fan-in uniform weights and zero biases, as for the initial heads.
    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let a = fan_in_uniform(width, 1, &mut rng);
        let c = fan_in_uniform(width, 1, &mut rng);
        Self {
            accuracy_weight: a.column(0).to_owned(),
            accuracy_bias: 0.0,
            cost_weight: c.column(0).to_owned(),
            cost_bias: 0.0,
        }
    }
}

/// Dropout is applied only in training mode, with masks drawn from the seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training { dropout_seed: u64 },
}

/// Raw head outputs for one query: accuracy in (0,1) and normalized cost
/// (unclamped).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub accuracy: Vec<f64>,
    pub cost: Vec<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    pre_activation: Array2<f64>,
    mask: Option<Array2<f64>>,
}

struct ForwardPass {
    caches: Vec<LayerCache>,
    features: Array2<f64>,
    accuracy: Array2<f64>,
    cost: Array2<f64>,
}

fn gelu(y: f64) -> f64 {
    y * normal_cdf(y)
}

fn gelu_grad(y: f64) -> f64 {
    normal_cdf(y) + y * normal_pdf(y)
}

fn check_finite(a: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what() })
    }
}

fn forward_pass(params: &MlpParams, xs: ArrayView2<f64>, mode: Mode, keep_cache: bool) -> Result<ForwardPass> {
    let arch = &params.architecture;
    if xs.ncols() != arch.d_emb {
        return Err(Error::Dimension {
            expected: arch.d_emb,
            found: xs.ncols(),
        });
    }
    let mut rng = match mode {
        Mode::Training { dropout_seed } if arch.dropout > 0.0 => Some(seeded_rng(dropout_seed)),
        _ => None,
    };
    let keep = 1.0 - arch.dropout;
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut h = xs.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = h.dot(&layer.weight) + &layer.bias;
        let width = z.ncols() as f64;
        let mean = z.sum_axis(Axis(1)) / width;
        let centered = &z - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / width;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let normalized = centered * &inv_std.view().insert_axis(Axis(1));
        let pre = &normalized * &layer.norm_scale + &layer.norm_shift;
        let mut out = pre.mapv(gelu);
        let mask = rng.as_mut().map(|rng| {
            let mask = Array2::from_shape_fn(out.dim(), |_| {
                if rng.random::<f64>() < arch.dropout {
                    0.0
                } else {
                    1.0 / keep
                }
            });
            out *= &mask;
            mask
        });
        check_finite(&out, || format!("trunk layer {i}"))?;
        if keep_cache {
            caches.push(LayerCache {
                input: h,
                normalized,
                inv_std,
                pre_activation: pre,
                mask,
            });
        }
        h = out;
    }
    let logits = h.dot(&params.heads.accuracy_weight) + &params.heads.accuracy_bias;
    let accuracy = logits.mapv(sigmoid);
    let cost = h.dot(&params.heads.cost_weight) + &params.heads.cost_bias;
    check_finite(&cost, || "cost head".into())?;
    check_finite(&logits, || "accuracy head".into())?;
    Ok(ForwardPass {
        caches,
        features: h,
        accuracy,
        cost,
    })
}

/// Batch forward pass. Returns `(accuracy, normalized cost)`, both
/// `batch x n_models`.
pub fn forward_batch(params: &MlpParams, xs: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, Array2<f64>)> {
    let pass = forward_pass(params, xs, mode, false)?;
    Ok((pass.accuracy, pass.cost))
}

pub fn forward(params: &MlpParams, x: &[f64], mode: Mode) -> Result<HeadOutputs> {
    let xs = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let (acc, cost) = forward_batch(params, xs, mode)?;
    Ok(HeadOutputs {
        accuracy: acc.row(0).to_vec(),
        cost: cost.row(0).to_vec(),
    })
}

/// Trunk output (inference mode) for a batch of queries.
pub fn trunk_features(params: &MlpParams, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(forward_pass(params, xs, Mode::Inference, false)?.features)
}

pub(crate) fn embedding_matrix<'a, I>(rows: I, d: usize) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: r.len(),
            });
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, d), data).expect("consistent shape"))
}

/// `dot` returns column-major results when both operands look column-major
/// (any unit dimension does), while parameters are kept row-major.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Pulls the gradient of the loss with respect to the head outputs back
/// through the network.
fn backward(params: &MlpParams, pass: &ForwardPass, d_logit: &Array2<f64>, d_cost: &Array2<f64>) -> MlpParams {
    let mut grad = params.zeros_like();
    grad.heads.accuracy_weight = standard(pass.features.t().dot(d_logit));
    grad.heads.accuracy_bias = d_logit.sum_axis(Axis(0));
    grad.heads.cost_weight = standard(pass.features.t().dot(d_cost));
    grad.heads.cost_bias = d_cost.sum_axis(Axis(0));
    let mut dh = d_logit.dot(&params.heads.accuracy_weight.t()) + d_cost.dot(&params.heads.cost_weight.t());
    for (i, (layer, cache)) in params.layers.iter().zip(&pass.caches).enumerate().rev() {
        if let Some(mask) = &cache.mask {
            dh *= mask;
        }
        let mut dy = dh;
        Zip::from(&mut dy)
            .and(&cache.pre_activation)
            .for_each(|d, &y| *d *= gelu_grad(y));
        let g = &mut grad.layers[i];
        g.norm_scale = (&dy * &cache.normalized).sum_axis(Axis(0));
        g.norm_shift = dy.sum_axis(Axis(0));
        let dxhat = dy * &layer.norm_scale;
        let width = dxhat.ncols() as f64;
        let mean_d = dxhat.sum_axis(Axis(1)) / width;
        let mean_dx = (&dxhat * &cache.normalized).sum_axis(Axis(1)) / width;
        let mut dz = dxhat - &mean_d.view().insert_axis(Axis(1))
            - &(&cache.normalized * &mean_dx.view().insert_axis(Axis(1)));
        dz *= &cache.inv_std.view().insert_axis(Axis(1));
        g.weight = standard(cache.input.t().dot(&dz));
        g.bias = dz.sum_axis(Axis(0));
        dh = dz.dot(&layer.weight.t());
    }
    grad
}

/// A frozen reference network whose predictions the trained network is
/// pulled towards: `weight * mean_b mean_m [(a - a0)^2 + (c - c0)^2]`,
/// with costs on the normalized scale.
#[derive(Clone, Copy, Debug)]
pub struct Distillation<'a> {
    pub teacher: &'a MlpParams,
    pub weight: f64,
}

fn validate_batch(params: &MlpParams, batch: &[EvaluationRecord]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(r) = batch.iter().find(|r| r.model >= params.n_models()) {
        return Err(Error::MissingGroundTruth { model: r.model });
    }
    Ok(())
}

fn objective(
    params: &MlpParams,
    batch: &[EvaluationRecord],
    cost_normalizer: f64,
    mode: Mode,
    distill: Option<&Distillation>,
    with_gradient: bool,
) -> Result<(f64, Option<MlpParams>)> {
    validate_batch(params, batch)?;
    let xs = embedding_matrix(batch.iter().map(|r| r.embedding.as_slice()), params.architecture.d_emb)?;
    let pass = forward_pass(params, xs.view(), mode, with_gradient)?;
    let b = batch.len() as f64;
    let m = params.n_models();
    let mut d_logit = Array2::<f64>::zeros((batch.len(), m));
    let mut d_cost = Array2::<f64>::zeros((batch.len(), m));
    let mut loss = CompensatedSum::new();
    for (i, r) in batch.iter().enumerate() {
        let a = pass.accuracy[[i, r.model]];
        let c = pass.cost[[i, r.model]];
        let target_c = r.cost / cost_normalizer;
        let (ea, ec) = (a - r.accuracy, c - target_c);
        loss.add((ea * ea + ec * ec) / b);
        d_logit[[i, r.model]] = 2.0 * ea * a * (1.0 - a) / b;
        d_cost[[i, r.model]] = 2.0 * ec / b;
    }
    if let Some(d) = distill.filter(|d| d.weight != 0.0) {
        let (ta, tc) = forward_batch(d.teacher, xs.view(), Mode::Inference)?;
        if ta.dim() != pass.accuracy.dim() {
            return Err(Error::Shape("teacher and student disagree on model count".into()));
        }
        let scale = d.weight / (b * m as f64);
        Zip::from(&mut d_logit)
            .and(&mut d_cost)
            .and(&pass.accuracy)
            .and(&pass.cost)
            .and(&ta)
            .and(&tc)
            .for_each(|dl, dc, &a, &c, &a0, &c0| {
                let (ea, ec) = (a - a0, c - c0);
                loss.add(scale * (ea * ea + ec * ec));
                *dl += 2.0 * scale * ea * a * (1.0 - a);
                *dc += 2.0 * scale * ec;
            });
    }
    let grad = with_gradient.then(|| backward(params, &pass, &d_logit, &d_cost));
    Ok((loss.value(), grad))
}

/// Mean squared error of both heads on each record's logged model, and its
/// exact gradient. `dropout_seed: None` evaluates in inference mode.
pub fn loss_and_gradient(
    params: &MlpParams,
    batch: &[EvaluationRecord],
    cost_normalizer: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, MlpParams)> {
    distilled_loss_and_gradient(params, batch, cost_normalizer, dropout_seed, None)
}

/// [`loss_and_gradient`] plus an optional distillation penalty.
pub fn distilled_loss_and_gradient(
    params: &MlpParams,
    batch: &[EvaluationRecord],
    cost_normalizer: f64,
    dropout_seed: Option<u64>,
    distill: Option<&Distillation>,
) -> Result<(f64, MlpParams)> {
    let mode = dropout_seed.map_or(Mode::Inference, |s| Mode::Training { dropout_seed: s });
    let (loss, grad) = objective(params, batch, cost_normalizer, mode, distill, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Inference-mode loss, evaluated in chunks.
pub fn dataset_loss(params: &MlpParams, records: &[EvaluationRecord], cost_normalizer: f64) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut total = CompensatedSum::new();
    for chunk in records.chunks(4096) {
        let (l, _) = objective(params, chunk, cost_normalizer, Mode::Inference, None, false)?;
        total.add(l * chunk.len() as f64);
    }
    Ok(total.value() / records.len() as f64)
}

/// `accuracy - lambda * cost` per model, with the cost head clamped to
/// `[0,1]` and mapped back to currency units.
pub fn predict_utilities(params: &MlpParams, x: &[f64], lambda: f64, cost_normalizer: f64) -> Result<Vec<f64>> {
    let out = forward(params, x, Mode::Inference)?;
    Ok(out
        .accuracy
        .iter()
        .zip(&out.cost)
        .map(|(a, c)| a - lambda * c.clamp(0.0, 1.0) * cost_normalizer)
        .collect())
}

/// An MLP wrapped as an [`Estimator`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpRouter {
    pub params: MlpParams,
    pub cost_normalizer: f64,
    /// Clamp the normalized cost head to `[0,1]` at inference.
    #[serde(default = "default_true")]
    pub clamp_cost: bool,
}

fn default_true() -> bool {
    true
}

impl MlpRouter {
    pub fn new(params: MlpParams, cost_normalizer: f64) -> Self {
        Self {
            params,
            cost_normalizer,
            clamp_cost: true,
        }
    }

    fn to_estimates(&self, acc: &Array2<f64>, cost: &Array2<f64>) -> Vec<Vec<Option<Estimate>>> {
        acc.outer_iter()
            .zip(cost.outer_iter())
            .map(|(a, c)| {
                a.iter()
                    .zip(c.iter())
                    .map(|(&a, &c)| {
                        let c = if self.clamp_cost { c.clamp(0.0, 1.0) } else { c };
                        Some(Estimate {
                            accuracy: a,
                            cost: c * self.cost_normalizer,
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

impl Estimator for MlpRouter {
    fn n_models(&self) -> usize {
        self.params.n_models()
    }

    fn estimate(&self, x: &[f64]) -> Result<Vec<Option<Estimate>>> {
        Ok(self.estimate_many(&[x])?.pop().expect("one row"))
    }

    fn estimate_many(&self, xs: &[&[f64]]) -> Result<Vec<Vec<Option<Estimate>>>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(2048) {
            let m = embedding_matrix(chunk.iter().copied(), self.params.architecture.d_emb)?;
            let (acc, cost) = forward_batch(&self.params, m.view(), Mode::Inference)?;
            out.extend(self.to_estimates(&acc, &cost));
        }
        Ok(out)
    }
}

pub const MLP_CHECKPOINT_FORMAT: &str = "fedroute-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned on-disk form of an MLP router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    pub router: MlpRouter,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl MlpCheckpoint {
    pub fn new(router: MlpRouter) -> Self {
        Self {
            format: MLP_CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            router,
            metadata: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.format != MLP_CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "{} is not a v{CHECKPOINT_VERSION} MLP checkpoint",
                path.display()
            )));
        }
        if !ckpt.router.params.is_finite() {
            return Err(Error::NonFinite { what: path.display().to_string() });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_arch() -> MlpArchitecture {
        MlpArchitecture {
            d_emb: 3,
            hidden_widths: vec![4],
            dropout: 0.0,
            n_models: 2,
        }
    }

    fn record(x: Vec<f64>, model: usize, acc: f64, cost: f64) -> EvaluationRecord {
        EvaluationRecord {
            embedding: x,
            model,
            accuracy: acc,
            cost,
            task: None,
        }
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let p = MlpParams::zeros(&small_arch()).unwrap();
        let out = forward(&p, &[0.3, -2.0, 5.0], Mode::Inference).unwrap();
        assert_eq!(out.accuracy, vec![0.5, 0.5]);
        assert_eq!(out.cost, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_rolled_loops() {
        let p = MlpParams::init(&small_arch(), 21).unwrap();
        let x = [0.7, -1.2, 0.05];
        let mut h: Vec<f64> = x.to_vec();
        for layer in &p.layers {
            let (n_in, n_out) = layer.weight.dim();
            let z: Vec<f64> = (0..n_out)
                .map(|j| (0..n_in).map(|i| h[i] * layer.weight[[i, j]]).sum::<f64>() + layer.bias[j])
                .collect();
            let mean = z.iter().sum::<f64>() / n_out as f64;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_out as f64;
            h = z
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let y = (v - mean) / (var + 1e-5).sqrt() * layer.norm_scale[j] + layer.norm_shift[j];
                    0.5 * y * (1.0 + libm::erf(y / 2f64.sqrt()))
                })
                .collect();
        }
        let out = forward(&p, &x, Mode::Inference).unwrap();
        for m in 0..2 {
            let logit: f64 = h.iter().enumerate().map(|(i, v)| v * p.heads.accuracy_weight[[i, m]]).sum::<f64>() + p.heads.accuracy_bias[m];
            let cost: f64 = h.iter().enumerate().map(|(i, v)| v * p.heads.cost_weight[[i, m]]).sum::<f64>() + p.heads.cost_bias[m];
            assert!((out.accuracy[m] - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);
            assert!((out.cost[m] - cost).abs() < 1e-12);
        }
    }

    #[test]
    fn no_dropout_means_modes_agree() {
        let p = MlpParams::init(&small_arch(), 3).unwrap();
        let x = [0.1, 0.2, -0.7];
        let a = forward(&p, &x, Mode::Inference).unwrap();
        let b = forward(&p, &x, Mode::Training { dropout_seed: 99 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_masks_depend_on_seed_only() {
        let mut arch = small_arch();
        arch.dropout = 0.5;
        arch.hidden_widths = vec![64];
        let p = MlpParams::init(&arch, 3).unwrap();
        let x = [0.1, 0.2, -0.7];
        let a = forward(&p, &x, Mode::Training { dropout_seed: 1 }).unwrap();
        let b = forward(&p, &x, Mode::Training { dropout_seed: 1 }).unwrap();
        let c = forward(&p, &x, Mode::Training { dropout_seed: 2 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let p = MlpParams::init(&small_arch(), 0).unwrap();
        assert!(matches!(
            forward(&p, &[1.0, 2.0], Mode::Inference),
            Err(Error::Dimension { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let p = MlpParams::init(&small_arch(), 0).unwrap();
        match forward(&p, &[f64::NAN, 0.0, 0.0], Mode::Inference) {
            Err(Error::NonFinite { what }) => assert_eq!(what, "trunk layer 0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perfect_predictions_give_zero_loss_and_gradient() {
        let mut p = MlpParams::zeros(&small_arch()).unwrap();
        p.heads.cost_bias[1] = 0.25;
        let batch = vec![record(vec![1.0, 2.0, 3.0], 1, 0.5, 0.5)];
        let (loss, grad) = loss_and_gradient(&p, &batch, 2.0, None).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.l2_norm(), 0.0);
    }

    #[test]
    fn unlogged_heads_get_exactly_zero_gradient() {
        let p = MlpParams::init(&small_arch(), 5).unwrap();
        let batch = vec![record(vec![0.4, -1.0, 0.2], 0, 1.0, 0.3)];
        let (_, grad) = loss_and_gradient(&p, &batch, 1.0, None).unwrap();
        assert!(grad.heads.accuracy_weight.column(1).iter().all(|&g| g == 0.0));
        assert!(grad.heads.cost_weight.column(1).iter().all(|&g| g == 0.0));
        assert_eq!(grad.heads.accuracy_bias[1], 0.0);
        assert_eq!(grad.heads.cost_bias[1], 0.0);
        assert!(grad.heads.accuracy_bias[0] != 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut arch = small_arch();
        arch.dropout = 0.2;
        let p = MlpParams::init(&arch, 13).unwrap();
        let batch = vec![record(vec![0.3, -0.8, 1.1], 0, 1.0, 0.4), record(vec![-1.0, 0.2, 0.5], 1, 0.0, 0.9)];
        let (_, grad) = loss_and_gradient(&p, &batch, 1.0, Some(3)).unwrap();
        let h = 1e-5;
        let mut probe = p.clone();
        for t in 0..p.tensors().len() {
            for j in 0..p.tensors()[t].len() {
                let orig = p.tensors()[t][j];
                probe.tensors_mut()[t][j] = orig + h;
                let up = loss_and_gradient(&probe, &batch, 1.0, Some(3)).unwrap().0;
                probe.tensors_mut()[t][j] = orig - h;
                let down = loss_and_gradient(&probe, &batch, 1.0, Some(3)).unwrap().0;
                probe.tensors_mut()[t][j] = orig;
                let (numeric, analytic) = ((up - down) / (2.0 * h), grad.tensors()[t][j]);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-4, "tensor {t} entry {j}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn utilities_example() {
        // heads chosen so that a = (0.8, 0.6) and c_norm = (0.5, 0.1) with normalizer 1
        let mut p = MlpParams::zeros(&small_arch()).unwrap();
        let logit = |a: f64| (a / (1.0 - a)).ln();
        p.heads.accuracy_bias[0] = logit(0.8);
        p.heads.accuracy_bias[1] = logit(0.6);
        p.heads.cost_bias[0] = 0.5;
        p.heads.cost_bias[1] = 0.1;
        let u = predict_utilities(&p, &[0.0; 3], 1.0, 1.0).unwrap();
        assert!((u[0] - 0.3).abs() < 1e-12 && (u[1] - 0.5).abs() < 1e-12);
        let u0 = predict_utilities(&p, &[0.0; 3], 0.0, 1.0).unwrap();
        assert!((u0[0] - 0.8).abs() < 1e-12 && (u0[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn new_head_appends_a_column() {
        let p = MlpParams::init(&small_arch(), 1).unwrap();
        let q = p.with_new_head(&HeadParams::init(4, 2)).unwrap();
        assert_eq!(q.n_models(), 3);
        assert_eq!(q.heads.accuracy_weight.dim(), (4, 3));
        assert_eq!(q.layers, p.layers);
        assert_eq!(
            q.heads.accuracy_weight.slice(ndarray::s![.., ..2]),
            p.heads.accuracy_weight
        );
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mlp.json");
        let router = MlpRouter::new(MlpParams::init(&small_arch(), 8).unwrap(), 0.37);
        MlpCheckpoint::new(router.clone()).save(&path).unwrap();
        assert_eq!(MlpCheckpoint::load(&path).unwrap().router, router);
    }
}
