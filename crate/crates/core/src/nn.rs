//! Dense feed-forward classifier with layerwise autoencoder pretraining and
//! mini-batch gradient-descent fine-tuning under a pluggable loss.
//!
//! All arithmetic is f64 with a fixed accumulation order, so identical
//! (seed, config, data) reproduce bitwise-identical models.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::model_io::{ModelBundle, ModelMeta};
use crate::targets::{loss_value_and_grad, ExtendedTargets, LossKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Linear,
    Softmax,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// out×in weight matrix.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Symmetric uniform init with r = sqrt(6 / (in + out)), zero bias.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let r = (6.0 / (input + output) as f64).sqrt();
        let weights = Array2::from_shape_fn((output, input), |_| rng.gen_range(-r..r));
        DenseLayer {
            weights,
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t());
        for mut row in z.rows_mut() {
            row += &self.bias;
        }
        match self.activation {
            Activation::Linear => z,
            Activation::Sigmoid => z.mapv_into(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Softmax => {
                for mut row in z.rows_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
                z
            }
        }
    }
}

/// Encoder stack plus classification head.
#[derive(Debug, Clone)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    /// How many leading layers form the pretrained encoder; `embed` returns
    /// the activation after these layers.
    pub encoder_layers: usize,
}

/// Hyperparameters for one gradient-descent phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok(())
    }
}

impl MlpModel {
    /// Fresh classifier: `dims` chains input → hidden… → classes, with
    /// sigmoid activations everywhere except the softmax head.
    pub fn from_dims(dims: &[usize], encoder_layers: usize, seed: u64) -> Result<MlpModel> {
        if dims.len() < 2 {
            return Err(Error::invalid("model needs at least one layer"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer dims must be positive"));
        }
        if encoder_layers >= dims.len() {
            return Err(Error::invalid("encoder layer count exceeds depth"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..dims.len() - 1)
            .map(|i| {
                let act = if i == dims.len() - 2 {
                    Activation::Softmax
                } else {
                    Activation::Sigmoid
                };
                DenseLayer::glorot(dims[i], dims[i + 1], act, &mut rng)
            })
            .collect();
        Ok(MlpModel {
            layers,
            encoder_layers,
        })
    }

    /// Assemble a classifier from pretrained encoder layers plus a fresh
    /// head (`head_dims` hidden sigmoid layers, then a softmax layer).
    pub fn with_encoders(
        encoders: Vec<DenseLayer>,
        head_dims: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<MlpModel> {
        if encoders.is_empty() {
            return Err(Error::invalid("need at least one encoder layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder_layers = encoders.len();
        let mut layers = encoders;
        let mut prev = layers.last().unwrap().output_dim();
        for &h in head_dims {
            layers.push(DenseLayer::glorot(prev, h, Activation::Sigmoid, &mut rng));
            prev = h;
        }
        layers.push(DenseLayer::glorot(prev, num_classes, Activation::Softmax, &mut rng));
        let model = MlpModel {
            layers,
            encoder_layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("empty model"));
        }
        for w in self.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::invalid("layer dims do not chain"));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i == self.layers.len() - 1;
            if layer.activation == Activation::Softmax && !last {
                return Err(Error::invalid("softmax belongs on the final layer only"));
            }
        }
        if self.encoder_layers >= self.layers.len() {
            return Err(Error::invalid("encoder layer count exceeds depth"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].input_dim()];
        dims.extend(self.layers.iter().map(DenseLayer::output_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Class probabilities, one simplex row per input row.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut a = self.layers[0].apply(x);
        for layer in &self.layers[1..] {
            a = layer.apply(&a.view());
        }
        Ok(a)
    }

    /// The low-dimensional code all SSL engines consume: activations after
    /// the encoder layers.
    pub fn embed(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut a = self.layers[0].apply(x);
        for layer in &self.layers[1..self.encoder_layers] {
            a = layer.apply(&a.view());
        }
        Ok(a)
    }

    /// Per-layer activations, input first, output last.
    fn forward_trace(&self, x: &ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for layer in &self.layers {
            let next = layer.apply(&acts.last().unwrap().view());
            acts.push(next);
        }
        acts
    }

    pub fn to_bundle(&self, norm: NormStats, meta: ModelMeta) -> ModelBundle {
        ModelBundle {
            layer_dims: self.dims(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            encoder_layers: self.encoder_layers,
            weights: self
                .layers
                .iter()
                .map(|l| l.weights.iter().map(|&v| v as f32).collect())
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|l| l.bias.iter().map(|&v| v as f32).collect())
                .collect(),
            norm,
            meta,
        }
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<MlpModel> {
        bundle.validate()?;
        let layers = (0..bundle.weights.len())
            .map(|i| {
                let (inp, out) = (bundle.layer_dims[i], bundle.layer_dims[i + 1]);
                DenseLayer {
                    weights: Array2::from_shape_fn((out, inp), |(r, c)| {
                        bundle.weights[i][r * inp + c] as f64
                    }),
                    bias: Array1::from_iter(bundle.biases[i].iter().map(|&v| v as f64)),
                    activation: bundle.activations[i],
                }
            })
            .collect();
        let model = MlpModel {
            layers,
            encoder_layers: bundle.encoder_layers,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Gradient of the loss with respect to each layer's pre-activation, pushed
/// back through the net. Returns (dW, db) per layer for layers at or above
/// `trainable_from`; lower entries are `None`.
#[allow(clippy::type_complexity)]
fn backprop(
    model: &MlpModel,
    acts: &[Array2<f64>],
    grad_out: Array2<f64>,
    trainable_from: usize,
) -> Vec<Option<(Array2<f64>, Array1<f64>)>> {
    let layers = model.layers.len();
    let mut grads: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; layers];
    let mut g = grad_out; // dL/d(activation of current layer)
    for li in (0..layers).rev() {
        let layer = &model.layers[li];
        let out = &acts[li + 1];
        // dL/dz for this layer
        let dz = match layer.activation {
            Activation::Linear => g,
            Activation::Sigmoid => {
                let mut dz = g;
                dz.zip_mut_with(out, |gv, &a| *gv *= a * (1.0 - a));
                dz
            }
            Activation::Softmax => {
                let mut dz = Array2::zeros(g.raw_dim());
                for (mut dzr, (gr, pr)) in dz
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(out.rows()))
                {
                    let dot = gr.dot(&pr);
                    for (d, (&gv, &pv)) in dzr.iter_mut().zip(gr.iter().zip(pr.iter())) {
                        *d = pv * (gv - dot);
                    }
                }
                dz
            }
        };
        if li >= trainable_from {
            let dw = dz.t().dot(&acts[li]);
            let db = dz.sum_axis(Axis(0));
            grads[li] = Some((dw, db));
        }
        if li == 0 || li < trainable_from {
            break;
        }
        g = dz.dot(&model.layers[li].weights);
    }
    grads
}

/// One gradient-descent run over the given rows. `x` and `targets` are
/// aligned 1:1; layers below `trainable_from` stay frozen. Returns the
/// per-epoch mean training loss.
pub fn train(
    model: &mut MlpModel,
    x: &ArrayView2<f64>,
    targets: &ExtendedTargets,
    cfg: &TrainConfig,
    trainable_from: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    model.validate()?;
    if x.nrows() != targets.len() {
        return Err(Error::invalid(format!(
            "target/row mismatch: {} rows vs {} targets",
            x.nrows(),
            targets.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot train on zero rows"));
    }
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = gather_rows(x, chunk);
            let acts = model.forward_trace(&xb.view());
            let (value, grad_out) =
                loss_value_and_grad(&acts.last().unwrap().view(), targets, chunk)?;
            if !value.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            epoch_loss += value * chunk.len() as f64;
            let grads = backprop(model, &acts, grad_out, trainable_from);
            for (layer, grad) in model.layers.iter_mut().zip(grads) {
                if let Some((dw, db)) = grad {
                    layer.weights.scaled_add(-cfg.learning_rate, &dw);
                    layer.bias.scaled_add(-cfg.learning_rate, &db);
                }
            }
        }
        history.push(epoch_loss / n as f64);
    }
    Ok(history)
}

pub fn gather_rows(x: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}

/// Full-network fine-tuning over the rows the targets cover. Returns the
/// tuned model and the per-epoch training losses.
pub fn finetune(
    model: &MlpModel,
    dataset: &crate::features::PatchDataset,
    targets: &ExtendedTargets,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    let x_rows = gather_rows(&dataset.x.view(), &targets.rows);
    let mut tuned = model.clone();
    let history = train(&mut tuned, &x_rows.view(), targets, cfg, 0)?;
    Ok((tuned, history))
}

/// Layerwise unsupervised pretraining: each stage trains a one-hidden-layer
/// autoencoder (sigmoid encoder, linear decoder) to reconstruct its input
/// under squared error, keeps the encoder, and feeds the code forward.
/// Returns the encoder layers and the per-stage loss histories.
pub fn pretrain_encoders(
    x: &ArrayView2<f64>,
    encoder_dims: &[usize],
    cfg: &TrainConfig,
) -> Result<(Vec<DenseLayer>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::invalid("pretraining needs at least one row"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("pretraining input contains non-finite values"));
    }
    let mut encoders = Vec::with_capacity(encoder_dims.len());
    let mut histories = Vec::with_capacity(encoder_dims.len());
    let mut current = x.to_owned();
    for (stage, &hidden) in encoder_dims.iter().enumerate() {
        if hidden == 0 {
            return Err(Error::invalid("encoder dims must be positive"));
        }
        let input_dim = current.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(stage as u64));
        let mut ae = MlpModel {
            layers: vec![
                DenseLayer::glorot(input_dim, hidden, Activation::Sigmoid, &mut rng),
                DenseLayer::glorot(hidden, input_dim, Activation::Linear, &mut rng),
            ],
            encoder_layers: 1,
        };
        let recon_targets = ExtendedTargets::reconstruction(current.clone());
        let stage_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(1000 + stage as u64),
            ..cfg.clone()
        };
        let history = train(&mut ae, &current.view(), &recon_targets, &stage_cfg, 0)?;
        histories.push(history);
        current = ae.embed(&current.view())?;
        encoders.push(ae.layers.into_iter().next().unwrap());
    }
    Ok((encoders, histories))
}

/// Compare analytic gradients against central finite differences (step 1e-5)
/// over every parameter; returns max |g_a - g_n| / max(1, |g_a| + |g_n|).
pub fn gradient_check(
    model: &MlpModel,
    batch: &ArrayView2<f64>,
    targets: &ExtendedTargets,
) -> Result<f64> {
    model.validate()?;
    if batch.nrows() != targets.len() {
        return Err(Error::invalid("target/row mismatch"));
    }
    let sel: Vec<usize> = (0..batch.nrows()).collect();
    let acts = model.forward_trace(batch);
    let (_, grad_out) = loss_value_and_grad(&acts.last().unwrap().view(), targets, &sel)?;
    let analytic = backprop(model, &acts, grad_out, 0);

    let mut probe = model.clone();
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |ga: f64, gn: f64| {
        let rel = (ga - gn).abs() / 1.0f64.max(ga.abs() + gn.abs());
        if rel > worst {
            worst = rel;
        }
    };
    let eval = |m: &MlpModel| -> Result<f64> {
        let out = m.forward(batch)?;
        Ok(loss_value_and_grad(&out.view(), targets, &sel)?.0)
    };
    for li in 0..model.layers.len() {
        let (dw, db) = analytic[li].as_ref().expect("full backprop");
        for idx in 0..model.layers[li].weights.len() {
            let orig = model.layers[li].weights.as_slice().unwrap()[idx];
            probe.layers[li].weights.as_slice_mut().unwrap()[idx] = orig + step;
            let up = eval(&probe)?;
            probe.layers[li].weights.as_slice_mut().unwrap()[idx] = orig - step;
            let down = eval(&probe)?;
            probe.layers[li].weights.as_slice_mut().unwrap()[idx] = orig;
            check(dw.as_slice().unwrap()[idx], (up - down) / (2.0 * step));
        }
        for idx in 0..model.layers[li].bias.len() {
            let orig = model.layers[li].bias[idx];
            probe.layers[li].bias[idx] = orig + step;
            let up = eval(&probe)?;
            probe.layers[li].bias[idx] = orig - step;
            let down = eval(&probe)?;
            probe.layers[li].bias[idx] = orig;
            check(db[idx], (up - down) / (2.0 * step));
        }
    }
    Ok(worst)
}

/// Convenience used across the pipeline: MSE training targets for labeled
/// rows only (the purely supervised phases).
pub fn supervised_targets(labeled_targets: &Array2<f64>) -> ExtendedTargets {
    ExtendedTargets::labeled_only(LossKind::Mse, labeled_targets.clone())
}
