//! Model serialization: a one-line JSON header followed by the raw
//! little-endian `f32` weight/bias payloads in layer order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::nn::Activation;

/// Serializable snapshot of a dense network plus the preprocessing state
/// needed to reuse it at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub encoder_layers: usize,
    /// Row-major out×in weights per layer.
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<Vec<f32>>,
    pub norm: NormStats,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub num_classes: usize,
    pub patch_size: usize,
    pub band_order: Vec<String>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    encoder_layers: usize,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    num_classes: usize,
    patch_size: usize,
    band_order: Vec<String>,
    seed: u64,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        let dims = &self.layer_dims;
        if dims.len() < 2 {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let layers = dims.len() - 1;
        if self.activations.len() != layers
            || self.weights.len() != layers
            || self.biases.len() != layers
        {
            return Err(Error::invalid("layer count mismatch in model bundle"));
        }
        for i in 0..layers {
            let (inp, out) = (dims[i], dims[i + 1]);
            if self.weights[i].len() != inp * out {
                return Err(Error::invalid(format!(
                    "layer {i}: weight payload is {} values, expected {}x{}",
                    self.weights[i].len(),
                    out,
                    inp
                )));
            }
            if self.biases[i].len() != out {
                return Err(Error::invalid(format!("layer {i}: bias length mismatch")));
            }
        }
        if *dims.last().unwrap() != self.meta.num_classes {
            return Err(Error::invalid("final layer dim must equal class count"));
        }
        if self.meta.patch_size * self.meta.patch_size * self.meta.band_order.len() != dims[0] {
            return Err(Error::invalid(
                "first layer dim must equal patch_size^2 * bands",
            ));
        }
        if self.encoder_layers >= dims.len() {
            return Err(Error::invalid("encoder layer count exceeds model depth"));
        }
        Ok(())
    }
}

pub fn save_model(model: &ModelBundle, path: &Path) -> Result<()> {
    model.validate()?;
    let header = Header {
        format: "mlp-model".into(),
        version: 1,
        layer_dims: model.layer_dims.clone(),
        activations: model.activations.clone(),
        encoder_layers: model.encoder_layers,
        norm_mean: model.norm.mean.clone(),
        norm_std: model.norm.std.clone(),
        num_classes: model.meta.num_classes,
        patch_size: model.meta.patch_size,
        band_order: model.meta.band_order.clone(),
        seed: model.meta.seed,
    };
    let mut file = fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)
        .map_err(|e| Error::format(path, format!("header encode: {e}")))?;
    file.write_all(b"\n")?;
    let mut payload = Vec::new();
    for (w, b) in model.weights.iter().zip(&model.biases) {
        for v in w {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        for v in b {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::format(path, format!("cannot open model: {e}")))?
        .read_to_end(&mut bytes)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::format(path, format!("header decode: {e}")))?;
    if header.format != "mlp-model" {
        return Err(Error::format(path, "not a model file"));
    }
    let payload = &bytes[split + 1..];
    let layers = header.layer_dims.len().saturating_sub(1);
    let expected: usize = (0..layers)
        .map(|i| header.layer_dims[i] * header.layer_dims[i + 1] + header.layer_dims[i + 1])
        .sum();
    if payload.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!(
                "weight payload is {} bytes, expected {}",
                payload.len(),
                expected * 4
            ),
        ));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for i in 0..layers {
        let (inp, out) = (header.layer_dims[i], header.layer_dims[i + 1]);
        weights.push((&mut floats).take(inp * out).collect());
        biases.push((&mut floats).take(out).collect());
    }
    let bundle = ModelBundle {
        layer_dims: header.layer_dims,
        activations: header.activations,
        encoder_layers: header.encoder_layers,
        weights,
        biases,
        norm: NormStats {
            mean: header.norm_mean,
            std: header.norm_std,
        },
        meta: ModelMeta {
            num_classes: header.num_classes,
            patch_size: header.patch_size,
            band_order: header.band_order,
            seed: header.seed,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}
