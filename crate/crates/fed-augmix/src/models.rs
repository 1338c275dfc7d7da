//! Desk-scale MLP classifiers. Stands in for the full-scale
//! architectures; the defense and attack are architecture-agnostic.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input dim, hidden dims, class count.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("model needs at least two layers"));
        }
        if *self.layer_sizes.last().unwrap() < 2 {
            return Err(Error::config("class count must be at least 2"));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Weights and biases per layer, detached plain data.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Uniform fan-in initialization: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases zero. Deterministic given `spec.init_seed`.
pub fn init_model(spec: &ModelSpec) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = rng::substream(spec.init_seed, "model-init", 0, 0);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        weights.push(Tensor::new(vec![fan_in, fan_out], data));
        biases.push(Tensor::zeros(vec![fan_out]));
    }
    Ok(ModelState {
        spec: spec.clone(),
        weights,
        biases,
    })
}

impl ModelState {
    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Flat parameter list [W1, b1, W2, b2, ...].
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.clone());
            out.push(b.clone());
        }
        out
    }

    /// Rebuild a state from a flat parameter list in [`Self::params`] order.
    pub fn from_params(spec: &ModelSpec, params: &[Tensor]) -> Result<Self> {
        let layers = spec.layer_sizes.len() - 1;
        if params.len() != layers * 2 {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                layers * 2,
                params.len()
            )));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for i in 0..layers {
            weights.push(params[2 * i].detach());
            biases.push(params[2 * i + 1].detach());
        }
        Ok(ModelState {
            spec: spec.clone(),
            weights,
            biases,
        })
    }
}

/// Forward pass with parameters attached to `graph`; returns probability
/// rows plus the attached parameter tensors (in [`ModelState::params`]
/// order) for gradient queries.
pub fn forward_on(
    model: &ModelState,
    graph: &Graph,
    batch: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    if batch.shape().len() != 2 || batch.shape()[1] != model.spec.input_dim() {
        return Err(Error::RankError {
            op: "forward",
            expected: "batch [B, input_dim]",
            actual: batch.shape().to_vec(),
        });
    }
    let mut params = Vec::new();
    let mut h = if batch.is_attached() {
        batch.clone()
    } else {
        graph.attach(batch)
    };
    let layers = model.layer_count();
    for i in 0..layers {
        let w = graph.attach(&model.weights[i]);
        let b = graph.attach(&model.biases[i]);
        h = h.matmul(&w)?.add(&b)?;
        if i + 1 < layers {
            h = match model.spec.activation {
                Activation::Relu => h.relu(),
                Activation::Sigmoid => h.sigmoid(),
            };
        }
        params.push(w);
        params.push(b);
    }
    Ok((h.softmax(), params))
}

/// Inference-only forward pass; no tape is recorded.
pub fn forward(model: &ModelState, batch: &Tensor) -> Result<Tensor> {
    let graph = Graph::new();
    let (p, _) = forward_on(model, &graph, &batch.detach())?;
    Ok(p.detach())
}

const SNAPSHOT_MAGIC: &str = "FAMB-MODEL v1";

/// Write a model snapshot: a header line followed by a little-endian
/// float64 stream of each layer's weights then biases.
pub fn save_model(model: &ModelState, path: &Path) -> Result<()> {
    let sizes: Vec<String> = model.spec.layer_sizes.iter().map(|s| s.to_string()).collect();
    let header = format!(
        "{SNAPSHOT_MAGIC}; layer_sizes={}; activation={}; init_seed={};\n",
        sizes.join(","),
        model.spec.activation.as_str(),
        model.spec.init_seed
    );
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for (w, b) in model.weights.iter().zip(&model.biases) {
        for t in [w, b] {
            for &v in t.data() {
                file.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_snapshot(&header, &bytes).map_err(|msg| Error::Format {
        path: path.display().to_string(),
        msg,
    })
}

/// Parse a snapshot from its header line and raw parameter bytes.
/// Split out so untrusted input can be exercised directly.
pub fn parse_snapshot(header: &str, bytes: &[u8]) -> std::result::Result<ModelState, String> {
    let header = header.trim_end();
    let mut fields = header.split(';').map(str::trim);
    if fields.next() != Some(SNAPSHOT_MAGIC) {
        return Err(format!("bad magic, expected '{SNAPSHOT_MAGIC}'"));
    }
    let mut layer_sizes: Option<Vec<usize>> = None;
    let mut activation = Activation::Relu;
    let mut init_seed = 0u64;
    for field in fields {
        if field.is_empty() {
            continue;
        }
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed header field '{field}'"))?;
        match key {
            "layer_sizes" => {
                let sizes = value
                    .split(',')
                    .map(|s| s.parse::<usize>().map_err(|e| format!("bad layer size '{s}': {e}")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                layer_sizes = Some(sizes);
            }
            "activation" => {
                activation = Activation::parse(value).map_err(|e| e.to_string())?;
            }
            "init_seed" => {
                init_seed = value.parse().map_err(|e| format!("bad init_seed: {e}"))?;
            }
            other => return Err(format!("unknown header key '{other}'")),
        }
    }
    let layer_sizes = layer_sizes.ok_or("missing layer_sizes")?;
    let spec = ModelSpec {
        layer_sizes,
        activation,
        init_seed,
    };
    spec.validate().map_err(|e| e.to_string())?;
    let expected: usize = spec
        .layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum();
    if bytes.len() != expected * 8 {
        return Err(format!(
            "parameter stream length mismatch: expected {} bytes, got {}",
            expected * 8,
            bytes.len()
        ));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let wdata: Vec<f64> = values.by_ref().take(fan_in * fan_out).collect();
        let bdata: Vec<f64> = values.by_ref().take(fan_out).collect();
        weights.push(Tensor::new(vec![fan_in, fan_out], wdata));
        biases.push(Tensor::new(vec![fan_out], bdata));
    }
    if weights.iter().chain(&biases).any(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err("snapshot contains non-finite parameters".into());
    }
    Ok(ModelState {
        spec,
        weights,
        biases,
    })
}
