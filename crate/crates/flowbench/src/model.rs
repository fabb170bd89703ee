//! Time-conditioned velocity network: a 4-affine-layer MLP with SiLU hidden
//! activations, sinusoidal time features, optional one-hot class features,
//! and hand-written exact gradients.
//!
//! The input vector is the concatenation [z_t, time features, one-hot class]
//! and the output has the data dimension. Parameters live in one flat vector
//! laid out as [W0, b0, W1, b1, W2, b2, W3, b3] with each W row-major
//! ([output][input]); everything downstream (Adam moments, checkpoints,
//! gradient buffers) shares that layout.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{axpy, matvec_into, matvec_t_into, Point};
use crate::posterior::Label;
use crate::rng::SeededRng;

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_EMBED_WIDTH: usize = 32;
/// Slowest period spans t in [0,1] once scaled; see TimeEmbedding::new.
pub const DEFAULT_OMEGA_MAX: f64 = std::f64::consts::TAU * 50.0;

/// Interleaved sinusoidal features [sin(t*w_k), cos(t*w_k)] on a geometric
/// frequency ladder w_k = 10000^(-k/(width/2-1)) * omega_max, k ascending,
/// frequencies strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    freqs: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(width: usize, omega_max: f64) -> Result<Self> {
        if width == 0 || width % 2 != 0 {
            return Err(Error::invalid(format!("embedding width {width} must be even and positive")));
        }
        if !(omega_max > 0.0) || !omega_max.is_finite() {
            return Err(Error::invalid(format!("omega_max {omega_max} must be positive and finite")));
        }
        let half = width / 2;
        let freqs = (0..half)
            .map(|k| {
                if half == 1 {
                    omega_max
                } else {
                    omega_max * 10_000f64.powf(-(k as f64) / (half as f64 - 1.0))
                }
            })
            .collect();
        Ok(TimeEmbedding { freqs })
    }

    pub fn width(&self) -> usize {
        self.freqs.len() * 2
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    /// Fastest frequency; bounds the per-component Lipschitz constant in t.
    pub fn omega_max(&self) -> f64 {
        self.freqs[0]
    }

    pub fn embed_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width());
        for (k, &w) in self.freqs.iter().enumerate() {
            let (s, c) = (t * w).sin_cos();
            out[2 * k] = s;
            out[2 * k + 1] = c;
        }
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.embed_into(t, &mut out);
        out
    }
}

/// Flat parameter count of the architecture.
pub fn param_count(d: usize, hidden: usize, embed_width: usize, n_classes: usize) -> usize {
    let dims = layer_dims(d, hidden, embed_width, n_classes);
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn layer_dims(d: usize, hidden: usize, embed_width: usize, n_classes: usize) -> [usize; 5] {
    [d + embed_width + n_classes, hidden, hidden, hidden, d]
}

const LAYERS: usize = 4;

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    w_off: usize,
    b_off: usize,
    rows: usize,
    cols: usize,
}

/// One training element as the model consumes it.
#[derive(Debug, Clone, Copy)]
pub struct BatchElement<'a> {
    pub z_t: &'a [f64],
    pub t: f64,
    pub y: Label,
    pub target: &'a [f64],
}

/// Scratch buffers for forward and backward passes. Reusing one workspace
/// across calls keeps the hot loop allocation-free; the stored activations
/// feed the backward pass for the most recent forward.
#[derive(Debug, Clone)]
pub struct ModelWorkspace {
    input: Vec<f64>,
    pre: [Vec<f64>; LAYERS],
    post: [Vec<f64>; LAYERS - 1],
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl ModelWorkspace {
    /// Output of the most recent forward pass.
    pub fn output(&self) -> &[f64] {
        &self.pre[LAYERS - 1]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    d: usize,
    hidden: usize,
    n_classes: usize,
    embed: TimeEmbedding,
    params: Vec<f64>,
}

impl MlpModel {
    /// All-zero parameters (the zero velocity field).
    pub fn zeros(d: usize, hidden: usize, embed: TimeEmbedding, n_classes: usize) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let count = param_count(d, hidden, embed.width(), n_classes);
        Ok(MlpModel { d, hidden, n_classes, embed, params: vec![0.0; count] })
    }

    /// Weights drawn Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) in parameter
    /// layout order, biases zero.
    pub fn init(
        d: usize,
        hidden: usize,
        embed: TimeEmbedding,
        n_classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut model = Self::zeros(d, hidden, embed, n_classes)?;
        for layer in model.layers() {
            let bound = 1.0 / (layer.cols as f64).sqrt();
            for slot in &mut model.params[layer.w_off..layer.w_off + layer.rows * layer.cols] {
                *slot = (2.0 * rng.uniform() - 1.0) * bound;
            }
        }
        Ok(model)
    }

    pub fn from_params(
        d: usize,
        hidden: usize,
        embed: TimeEmbedding,
        n_classes: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expect = param_count(d, hidden, embed.width(), n_classes);
        if params.len() != expect {
            return Err(Error::invalid(format!(
                "{} parameters supplied, architecture takes {expect}",
                params.len()
            )));
        }
        if d == 0 || hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(MlpModel { d, hidden, n_classes, embed, params })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// 0 means unconditional.
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn embedding(&self) -> &TimeEmbedding {
        &self.embed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn all_params_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layers(&self) -> [LayerSpec; LAYERS] {
        let dims = layer_dims(self.d, self.hidden, self.embed.width(), self.n_classes);
        let mut specs = [LayerSpec { w_off: 0, b_off: 0, rows: 0, cols: 0 }; LAYERS];
        let mut off = 0;
        for l in 0..LAYERS {
            let (cols, rows) = (dims[l], dims[l + 1]);
            specs[l] = LayerSpec { w_off: off, b_off: off + rows * cols, rows, cols };
            off += rows * cols + rows;
        }
        specs
    }

    pub fn workspace(&self) -> ModelWorkspace {
        let dims = layer_dims(self.d, self.hidden, self.embed.width(), self.n_classes);
        ModelWorkspace {
            input: vec![0.0; dims[0]],
            pre: [
                vec![0.0; dims[1]],
                vec![0.0; dims[2]],
                vec![0.0; dims[3]],
                vec![0.0; dims[4]],
            ],
            post: [vec![0.0; dims[1]], vec![0.0; dims[2]], vec![0.0; dims[3]]],
            delta: vec![0.0; dims.iter().copied().max().expect("nonempty dims")],
            delta_prev: vec![0.0; dims.iter().copied().max().expect("nonempty dims")],
        }
    }

    fn fill_input(&self, ws: &mut ModelWorkspace, z_t: &[f64], t: f64, y: Label) -> Result<()> {
        if z_t.len() != self.d {
            return Err(Error::invalid(format!(
                "input has dimension {}, model takes {}",
                z_t.len(),
                self.d
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        ws.input[..self.d].copy_from_slice(z_t);
        let ew = self.embed.width();
        self.embed.embed_into(t, &mut ws.input[self.d..self.d + ew]);
        if self.n_classes > 0 {
            let onehot = &mut ws.input[self.d + ew..];
            onehot.fill(0.0);
            match y {
                Label::Class(c) if c < self.n_classes => onehot[c] = 1.0,
                Label::Class(c) => {
                    return Err(Error::invalid(format!(
                        "label {c} outside the model's {} classes",
                        self.n_classes
                    )))
                }
                Label::Unconditional => {
                    return Err(Error::invalid(
                        "conditioned model requires a class label".to_string(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Forward pass; the prediction lands in `ws.output()` and `ws` retains
    /// the activations the backward pass needs. Unconditional models ignore
    /// `y` entirely.
    pub fn forward_into(
        &self,
        ws: &mut ModelWorkspace,
        z_t: &[f64],
        t: f64,
        y: Label,
    ) -> Result<()> {
        self.fill_input(ws, z_t, t, y)?;
        let layers = self.layers();
        for l in 0..LAYERS {
            let spec = layers[l];
            let w = &self.params[spec.w_off..spec.w_off + spec.rows * spec.cols];
            let b = &self.params[spec.b_off..spec.b_off + spec.rows];
            let (x, pre_rest) = if l == 0 {
                (&ws.input[..], &mut ws.pre[l])
            } else {
                (&ws.post[l - 1][..], &mut ws.pre[l])
            };
            matvec_into(w, spec.rows, spec.cols, x, pre_rest);
            for (p, bi) in pre_rest.iter_mut().zip(b) {
                *p += bi;
            }
            if l < LAYERS - 1 {
                let (pre, post) = (&ws.pre[l], &mut ws.post[l]);
                for (h, a) in post.iter_mut().zip(pre) {
                    *h = silu(*a);
                }
            }
        }
        Ok(())
    }

    /// Allocation-per-call convenience wrapper around [`forward_into`].
    ///
    /// [`forward_into`]: MlpModel::forward_into
    pub fn forward(&self, z_t: &Point, t: f64, y: Label) -> Result<Point> {
        let mut ws = self.workspace();
        self.forward_into(&mut ws, z_t.coords(), t, y)?;
        Ok(Point::new(ws.output().to_vec()))
    }

    /// Accumulates the parameter gradient of a scalar loss into `grad`,
    /// given dL/d(output) for the forward pass most recently run in `ws`.
    /// `grad` is accumulated into, not overwritten, so batch gradients sum
    /// naturally.
    pub fn backward_into(&self, ws: &mut ModelWorkspace, dl_dout: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(dl_dout.len(), self.d);
        debug_assert_eq!(grad.len(), self.params.len());
        let layers = self.layers();
        ws.delta[..self.d].copy_from_slice(dl_dout);
        for l in (0..LAYERS).rev() {
            let spec = layers[l];
            let w = &self.params[spec.w_off..spec.w_off + spec.rows * spec.cols];
            let x: &[f64] = if l == 0 { &ws.input } else { &ws.post[l - 1] };
            let delta = &ws.delta[..spec.rows];
            // dL/dW[i][j] += delta[i] * x[j]; dL/db[i] += delta[i]
            for (i, &di) in delta.iter().enumerate() {
                if di != 0.0 {
                    let row = &mut grad[spec.w_off + i * spec.cols..spec.w_off + (i + 1) * spec.cols];
                    axpy(di, x, row);
                }
                grad[spec.b_off + i] += di;
            }
            if l > 0 {
                matvec_t_into(w, spec.rows, spec.cols, delta, &mut ws.delta_prev[..spec.cols]);
                for (dp, a) in ws.delta_prev[..spec.cols].iter_mut().zip(&ws.pre[l - 1]) {
                    *dp *= silu_derivative(*a);
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
        }
    }

    /// Mean squared-error loss over the batch (coordinates summed, batch
    /// averaged) and its exact parameter gradient, written over `grad`.
    /// A non-finite prediction reports the offending batch index.
    pub fn batch_backward(
        &self,
        ws: &mut ModelWorkspace,
        batch: &[BatchElement<'_>],
        grad: &mut [f64],
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if grad.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "gradient buffer has {} slots, model has {} parameters",
                grad.len(),
                self.params.len()
            )));
        }
        grad.fill(0.0);
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut dl_dout = vec![0.0; self.d];
        for (idx, el) in batch.iter().enumerate() {
            if el.target.len() != self.d {
                return Err(Error::invalid(format!(
                    "target at batch index {idx} has dimension {}, model takes {}",
                    el.target.len(),
                    self.d
                )));
            }
            self.forward_into(ws, el.z_t, el.t, el.y)?;
            let out = ws.output();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFailure(format!(
                    "non-finite model output at batch index {idx}"
                )));
            }
            let mut elem_loss = 0.0;
            for c in 0..self.d {
                let r = out[c] - el.target[c];
                elem_loss += r * r;
                dl_dout[c] = 2.0 * inv_b * r;
            }
            loss += elem_loss;
            self.backward_into(ws, &dl_dout, grad);
        }
        Ok(loss * inv_b)
    }

    /// Loss only, no gradient; used by finite-difference checks.
    pub fn batch_loss(&self, ws: &mut ModelWorkspace, batch: &[BatchElement<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut loss = 0.0;
        for el in batch {
            self.forward_into(ws, el.z_t, el.t, el.y)?;
            let out = ws.output();
            for c in 0..self.d {
                let r = out[c] - el.target[c];
                loss += r * r;
            }
        }
        Ok(loss / batch.len() as f64)
    }

    /// Writes the checkpoint format:
    ///
    /// ```text
    /// offset  size  field
    ///      0     4  magic "FBCK"
    ///      4     4  format version, u32 LE, currently 1
    ///      8     4  data dimension d, u32 LE
    ///     12     4  hidden width, u32 LE
    ///     16     4  time embedding width, u32 LE
    ///     20     4  class count (0 = unconditional), u32 LE
    ///     24     4  affine layer count, u32 LE, currently 4
    ///     28     8  omega_max, f64 LE
    ///     36     8  parameter count, u64 LE
    ///     44   8*n  parameters, f64 LE, layout [W0, b0, ..., W3, b3]
    /// ```
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(44 + self.params.len() * 8);
        out.extend_from_slice(b"FBCK");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        out.extend_from_slice(&(self.embed.width() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        out.extend_from_slice(&(LAYERS as u32).to_le_bytes());
        out.extend_from_slice(&self.embed.omega_max().to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let header_len = 44;
        if bytes.len() < header_len {
            return Err(Error::config("checkpoint file is too short for its header"));
        }
        if &bytes[0..4] != b"FBCK" {
            return Err(Error::config("not a model checkpoint (bad magic)"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("bounds checked"));
        let version = u32_at(4);
        if version != 1 {
            return Err(Error::config(format!("unsupported checkpoint version {version}")));
        }
        let d = u32_at(8) as usize;
        let hidden = u32_at(12) as usize;
        let embed_width = u32_at(16) as usize;
        let n_classes = u32_at(20) as usize;
        let layer_count = u32_at(24) as usize;
        if layer_count != LAYERS {
            return Err(Error::config(format!(
                "checkpoint has {layer_count} layers, this build supports {LAYERS}"
            )));
        }
        let omega_max = f64::from_le_bytes(bytes[28..36].try_into().expect("bounds checked"));
        let count = u64::from_le_bytes(bytes[36..44].try_into().expect("bounds checked")) as usize;
        let expect = param_count(d, hidden, embed_width, n_classes);
        if count != expect {
            return Err(Error::config(format!(
                "checkpoint declares {count} parameters, architecture takes {expect}"
            )));
        }
        if bytes.len() != header_len + count * 8 {
            return Err(Error::config(format!(
                "checkpoint is {} bytes, expected {}",
                bytes.len(),
                header_len + count * 8
            )));
        }
        let params = bytes[header_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
            .collect();
        let embed = TimeEmbedding::new(embed_width, omega_max)?;
        MlpModel::from_params(d, hidden, embed, n_classes, params)
    }
}
