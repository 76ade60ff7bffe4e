//! A small rectifier MLP with a deterministic gradient-descent trainer.
//!
//! The trainer exists to produce genuine pre/post fine-tuning checkpoints at
//! desk scale: a student network is fitted to a fixed random teacher and
//! snapshotted along the way. Every forward pass can record the exact input
//! matrix seen by each linear module, which becomes the calibration set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store::{Tensor, TensorMap};

const TEACHER_SALT: u64 = 0x7EAC_4E55_0000_0001;

/// RNG streams derived from a single seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const CALIB: u64 = 2;
    pub const HELD_OUT: u64 = 3;
    pub const PROBE: u64 = 4;
}

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal `[rows, cols]` matrix drawn from the given seed and stream.
pub fn gaussian_batch(rows: usize, cols: usize, seed: u64, stream: u64) -> Matrix {
    let mut rng = rng(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    /// `[out_features, in_features]`
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: Vec<usize>,
    pub seed: u64,
    pub layers: Vec<Linear>,
}

pub fn layer_name(index: usize) -> String {
    format!("layer{index}")
}

/// Builds a model with weights drawn as `N(0, 1) / sqrt(in_features)` and
/// zero biases. Identical `(dims, seed)` produce bit-identical models.
pub fn init_model(dims: &[usize], seed: u64) -> Result<ToyModel> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "model needs at least 2 dims (input and output), got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("model dims must be >= 1, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = 1.0 / (fan_in as f32).sqrt();
            Linear {
                name: layer_name(i),
                weight: Matrix::from_fn(fan_out, fan_in, |_, _| {
                    rng.sample::<f32, _>(StandardNormal) * std
                }),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(ToyModel {
        dims: dims.to_vec(),
        seed,
        layers,
    })
}

/// Inputs captured at every linear module during one forward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleCalib {
    /// `[n_samples, in_features]`
    pub inputs: Matrix,
    pub mean_abs: Vec<f32>,
    pub mean_square: Vec<f32>,
}

impl ModuleCalib {
    pub fn from_inputs(inputs: Matrix) -> Self {
        let (n, d) = (inputs.rows(), inputs.cols());
        let mut abs = vec![0f64; d];
        let mut sq = vec![0f64; d];
        for r in 0..n {
            for (c, &x) in inputs.row(r).iter().enumerate() {
                abs[c] += (x as f64).abs();
                sq[c] += x as f64 * x as f64;
            }
        }
        let denom = n.max(1) as f64;
        Self {
            inputs,
            mean_abs: abs.iter().map(|v| (v / denom) as f32).collect(),
            mean_square: sq.iter().map(|v| (v / denom) as f32).collect(),
        }
    }

    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSet {
    pub modules: BTreeMap<String, ModuleCalib>,
}

impl CalibrationSet {
    pub fn get(&self, module: &str) -> Result<&ModuleCalib> {
        self.modules
            .get(module)
            .ok_or_else(|| Error::MissingCalibration(module.to_string()))
    }

    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for (name, m) in &self.modules {
            map.insert(format!("{name}.calib_inputs"), Tensor::matrix(&m.inputs))?;
            map.insert(format!("{name}.mean_abs"), Tensor::vector(m.mean_abs.clone()))?;
            map.insert(
                format!("{name}.mean_square"),
                Tensor::vector(m.mean_square.clone()),
            )?;
        }
        if let Some(m) = self.modules.values().next() {
            map.set_meta("n_samples", m.samples());
        }
        Ok(map)
    }

    /// Reads a calibration container. Missing summary vectors are recomputed
    /// from the captured inputs.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let mut modules = BTreeMap::new();
        for name in map.names() {
            let Some(module) = name.strip_suffix(".calib_inputs") else {
                continue;
            };
            let inputs = map.matrix(name)?;
            if inputs.rows() == 0 {
                return Err(Error::Config(format!(
                    "calibration for `{module}` has no samples"
                )));
            }
            let mut calib = ModuleCalib::from_inputs(inputs);
            let d = calib.inputs.cols();
            for (key, slot) in [
                ("mean_abs", &mut calib.mean_abs),
                ("mean_square", &mut calib.mean_square),
            ] {
                let tname = format!("{module}.{key}");
                if map.get(&tname).is_some() {
                    let v = map.vector(&tname)?;
                    if v.len() != d {
                        return Err(Error::ShapeMismatch {
                            name: tname,
                            left: vec![v.len()],
                            right: vec![d],
                        });
                    }
                    *slot = v;
                }
            }
            modules.insert(module.to_string(), calib);
        }
        Ok(Self { modules })
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl ToyModel {
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn to_checkpoint(&self, step: usize) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for l in &self.layers {
            map.insert(format!("{}.weight", l.name), Tensor::matrix(&l.weight))?;
            map.insert(format!("{}.bias", l.name), Tensor::vector(l.bias.clone()))?;
        }
        map.set_meta("dims", join_dims(&self.dims));
        map.set_meta("seed", self.seed);
        map.set_meta("step", step);
        Ok(map)
    }

    /// Rebuilds a model from `layer{i}.weight` / `layer{i}.bias` tensors.
    pub fn from_checkpoint(map: &TensorMap) -> Result<Self> {
        let mut layers = Vec::new();
        while map.get(&format!("{}.weight", layer_name(layers.len()))).is_some() {
            let name = layer_name(layers.len());
            let weight = map.matrix(&format!("{name}.weight"))?;
            let bias = map.vector(&format!("{name}.bias"))?;
            if bias.len() != weight.rows() {
                return Err(Error::ShapeMismatch {
                    name: format!("{name}.bias"),
                    left: vec![bias.len()],
                    right: vec![weight.rows()],
                });
            }
            layers.push(Linear { name, weight, bias });
        }
        if layers.is_empty() {
            return Err(Error::MissingTensor(format!("{}.weight", layer_name(0))));
        }
        let mut dims = vec![layers[0].in_features()];
        for (i, l) in layers.iter().enumerate() {
            if l.in_features() != *dims.last().unwrap() {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but the previous layer yields {}",
                    l.in_features(),
                    dims.last().unwrap()
                )));
            }
            dims.push(l.out_features());
        }
        let seed = map
            .meta_get("seed")
            .and_then(|s| s.parse().ok())
            .unwrap_or_default();
        Ok(Self { dims, seed, layers })
    }

    /// Replaces layer weights by module name (biases are kept).
    pub fn with_weights(&self, weights: &BTreeMap<String, Matrix>) -> Result<Self> {
        let mut out = self.clone();
        for l in &mut out.layers {
            if let Some(w) = weights.get(&l.name) {
                if w.shape() != l.weight.shape() {
                    return Err(Error::ShapeMismatch {
                        name: l.name.clone(),
                        left: w.shape().to_vec(),
                        right: l.weight.shape().to_vec(),
                    });
                }
                l.weight = w.clone();
            }
        }
        Ok(out)
    }

    /// Runs the network and records the exact input of every linear module.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, CalibrationSet)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                name: "inputs".into(),
                left: inputs.shape().to_vec(),
                right: vec![inputs.rows(), self.input_dim()],
            });
        }
        let mut capture = CalibrationSet::default();
        let mut act = inputs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = Matrix::zeros(act.rows(), layer.out_features());
            for r in 0..act.rows() {
                let x = act.row(r);
                for o in 0..layer.out_features() {
                    let z = layer.bias[o] as f64
                        + layer
                            .weight
                            .row(o)
                            .iter()
                            .zip(x)
                            .map(|(&w, &v)| w as f64 * v as f64)
                            .sum::<f64>();
                    next.set(r, o, if i == last { z } else { relu(z) } as f32);
                }
            }
            capture
                .modules
                .insert(layer.name.clone(), ModuleCalib::from_inputs(act));
            act = next;
        }
        Ok((act, capture))
    }
}

fn join_dims(dims: &[usize]) -> String {
    dims.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub data_seed: u64,
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
            batch_size: 32,
            data_seed: 0,
            snapshot_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.snapshot_every < 1 {
            return Err(Error::Config("train.snapshot_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// The fixed regression target: a random rectifier network with the
/// student's shape, seeded by `data_seed`.
pub fn teacher(dims: &[usize], data_seed: u64) -> Result<ToyModel> {
    init_model(dims, data_seed ^ TEACHER_SALT)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// `(step, checkpoint)`, always including step 0 and the final step.
    pub snapshots: Vec<(usize, TensorMap)>,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    /// Loss on a fixed probe batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Mean-squared-error gradient descent against the seeded teacher.
pub fn train(model: &ToyModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let teacher = teacher(&model.dims, cfg.data_seed)?;
    let mut data_rng = rng(cfg.data_seed, stream::DATA);
    let probe = gaussian_batch(256, model.input_dim(), cfg.data_seed, stream::PROBE);
    let (probe_targets, _) = teacher.forward(&probe)?;

    let mut model = model.clone();
    let initial_loss = mse_loss(&model, &probe, &probe_targets)?;
    let mut snapshots = vec![(0, model.to_checkpoint(0)?)];
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let x = Matrix::from_fn(cfg.batch_size, model.input_dim(), |_, _| {
            data_rng.sample::<f32, _>(StandardNormal)
        });
        let (t, _) = teacher.forward(&x)?;
        let (loss, grads) = loss_and_gradients(&model, &x, &t)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        apply_gradients(&mut model, &grads, cfg.learning_rate);
        if step % cfg.snapshot_every == 0 || step == cfg.steps {
            snapshots.push((step, model.to_checkpoint(step)?));
        }
    }

    let final_loss = mse_loss(&model, &probe, &probe_targets)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    for (_, snap) in &mut snapshots {
        snap.set_meta("data_seed", cfg.data_seed);
        snap.set_meta("learning_rate", cfg.learning_rate);
    }
    Ok(TrainOutcome {
        model,
        snapshots,
        losses,
        initial_loss,
        final_loss,
    })
}

fn apply_gradients(model: &mut ToyModel, grads: &Gradients, lr: f64) {
    for (layer, (gw, gb)) in model
        .layers
        .iter_mut()
        .zip(grads.weights.iter().zip(&grads.biases))
    {
        for (w, g) in layer.weight.data_mut().iter_mut().zip(gw) {
            *w = (*w as f64 - lr * g) as f32;
        }
        for (b, g) in layer.bias.iter_mut().zip(gb) {
            *b = (*b as f64 - lr * g) as f32;
        }
    }
}

/// Mean squared error of the model output against `targets`.
pub fn mse_loss(model: &ToyModel, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    let (y, _) = model.forward(inputs)?;
    Ok(mse(y.data(), targets.data()))
}

pub(crate) fn mse(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Per-layer gradients, flattened row-major like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Parameters widened to `f64` for exact backprop and finite differences.
#[derive(Clone)]
struct Params {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

impl Params {
    fn of(model: &ToyModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| l.weight.data().iter().map(|&v| v as f64).collect())
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| l.bias.iter().map(|&v| v as f64).collect())
                .collect(),
            shapes: model
                .layers
                .iter()
                .map(|l| (l.out_features(), l.in_features()))
                .collect(),
        }
    }
}

struct Trace {
    /// Layer inputs, `acts[0]` is the batch itself.
    acts: Vec<Vec<Vec<f64>>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<Vec<f64>>>,
}

fn forward_f64(p: &Params, inputs: &Matrix) -> Trace {
    let mut acts = vec![(0..inputs.rows())
        .map(|r| inputs.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect::<Vec<_>>()];
    let mut pre = Vec::new();
    let last = p.shapes.len() - 1;
    for (k, &(out, inp)) in p.shapes.iter().enumerate() {
        let x = acts.last().unwrap();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                (0..out)
                    .map(|o| {
                        p.biases[k][o]
                            + (0..inp)
                                .map(|i| p.weights[k][o * inp + i] * row[i])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        let a = if k == last {
            z.clone()
        } else {
            z.iter()
                .map(|row| row.iter().map(|&v| relu(v)).collect())
                .collect()
        };
        pre.push(z);
        acts.push(a);
    }
    Trace { acts, pre }
}

fn loss_of(trace: &Trace, targets: &Matrix) -> f64 {
    let y = trace.acts.last().unwrap();
    let count = (y.len() * targets.cols()).max(1) as f64;
    y.iter()
        .enumerate()
        .flat_map(|(r, row)| {
            row.iter()
                .zip(targets.row(r))
                .map(|(&a, &b)| (a - b as f64).powi(2))
        })
        .sum::<f64>()
        / count
}

/// Mean-squared-error loss and its analytic gradients.
pub fn loss_and_gradients(
    model: &ToyModel,
    inputs: &Matrix,
    targets: &Matrix,
) -> Result<(f64, Gradients)> {
    if inputs.cols() != model.input_dim()
        || targets.cols() != model.output_dim()
        || targets.rows() != inputs.rows()
    {
        return Err(Error::ShapeMismatch {
            name: "batch".into(),
            left: vec![inputs.rows(), inputs.cols(), targets.rows(), targets.cols()],
            right: vec![inputs.rows(), model.input_dim(), inputs.rows(), model.output_dim()],
        });
    }
    let p = Params::of(model);
    let trace = forward_f64(&p, inputs);
    let loss = loss_of(&trace, targets);

    let n = inputs.rows();
    let count = (n * model.output_dim()).max(1) as f64;
    let mut delta: Vec<Vec<f64>> = trace
        .acts
        .last()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .zip(targets.row(r))
                .map(|(&y, &t)| 2.0 * (y - t as f64) / count)
                .collect()
        })
        .collect();

    let layers = p.shapes.len();
    let mut gw = vec![Vec::new(); layers];
    let mut gb = vec![Vec::new(); layers];
    for k in (0..layers).rev() {
        let (out, inp) = p.shapes[k];
        let x = &trace.acts[k];
        let mut w = vec![0f64; out * inp];
        let mut b = vec![0f64; out];
        for r in 0..n {
            for o in 0..out {
                let d = delta[r][o];
                b[o] += d;
                for i in 0..inp {
                    w[o * inp + i] += d * x[r][i];
                }
            }
        }
        if k > 0 {
            delta = (0..n)
                .map(|r| {
                    (0..inp)
                        .map(|i| {
                            if trace.pre[k - 1][r][i] > 0.0 {
                                (0..out)
                                    .map(|o| delta[r][o] * p.weights[k][o * inp + i])
                                    .sum()
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
        }
        gw[k] = w;
        gb[k] = b;
    }
    Ok((
        loss,
        Gradients {
            weights: gw,
            biases: gb,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Parameters skipped because the perturbation crossed a rectifier kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central finite differences of the MSE loss.
///
/// Every parameter is checked when the model has at most 1000 of them;
/// otherwise an evenly strided sample of 1000. The relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`, so near-zero gradients are compared
/// absolutely. Perturbations that flip any rectifier are skipped.
pub fn check_gradients(
    model: &ToyModel,
    inputs: &Matrix,
    targets: &Matrix,
    analytic: &Gradients,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let base = Params::of(model);
    let base_pattern = relu_pattern(&forward_f64(&base, inputs));

    let mut index = Vec::new();
    for (k, w) in base.weights.iter().enumerate() {
        index.extend((0..w.len()).map(|i| (k, false, i)));
        index.extend((0..base.biases[k].len()).map(|i| (k, true, i)));
    }
    let stride = index.len().div_ceil(1000).max(1);

    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        tolerance,
        passed: true,
    };
    for &(k, is_bias, i) in index.iter().step_by(stride) {
        let eval = |delta: f64| {
            let mut p = base.clone();
            if is_bias {
                p.biases[k][i] += delta;
            } else {
                p.weights[k][i] += delta;
            }
            let trace = forward_f64(&p, inputs);
            (loss_of(&trace, targets), relu_pattern(&trace))
        };
        let (plus, pat_plus) = eval(FD_STEP);
        let (minus, pat_minus) = eval(-FD_STEP);
        if pat_plus != base_pattern || pat_minus != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let exact = if is_bias {
            analytic.biases[k][i]
        } else {
            analytic.weights[k][i]
        };
        let denom = exact.abs().max(numeric.abs()).max(ABS_FLOOR);
        let err = (exact - numeric).abs() / denom;
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= tolerance && report.checked > 0;
    Ok(report)
}

fn relu_pattern(trace: &Trace) -> Vec<bool> {
    let hidden = trace.pre.len().saturating_sub(1);
    trace.pre[..hidden]
        .iter()
        .flatten()
        .flatten()
        .map(|&z| z > 0.0)
        .collect()
}

/// Checks the trainer's own gradients against finite differences.
pub fn finite_diff_check(
    model: &ToyModel,
    inputs: &Matrix,
    targets: &Matrix,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(model, inputs, targets)?;
    check_gradients(model, inputs, targets, &grads, tolerance)
}
