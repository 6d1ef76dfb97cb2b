//! Fully-connected field model `(x, y, t) -> StateVector` with exact
//! reverse-mode gradients, and parameter EMA.
//!
//! The model acts frame by frame with shared weights: a toy state is a single
//! frame, a spectrogram has one frame per STFT frame (`2 * bins` reals). Each
//! frame sees the features `[x, y, y - x, emb(t)]`, where `emb` is a
//! sinusoidal time embedding, and the head output `o` is combined with a
//! learned residual scale `r`:
//!
//! * vector-field mode: `v = (o + r (y - x)) / (1 - t)`
//! * score mode: `s = ((1 - t) o + r (y - x)) / (t sigma)^2`, so that `o`
//!   regresses onto `x0 - y` and `r = 1` reproduces the kernel score of the
//!   flow-equivalent SDE around `y`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::state::StateVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let h = z.tanh();
                1.0 - h * h
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub frame_len: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed: usize,
    /// Neighbouring frames of `y` on each side fed to every frame (zero
    /// beyond the edges).
    #[serde(default)]
    pub context: usize,
}

impl Architecture {
    /// Three hidden layers of 256 units, a 32-dimensional time embedding and
    /// no context frames.
    pub fn new(frame_len: usize) -> Self {
        Self {
            frame_len,
            hidden: vec![256, 256, 256],
            activation: Activation::Silu,
            time_embed: 32,
            context: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 {
            return Err(Error::config("frame length must be positive"));
        }
        if !self.time_embed.is_multiple_of(2) || self.time_embed < 2 {
            return Err(Error::config("time embedding size must be even and >= 2"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layers must be non-empty"));
        }
        Ok(())
    }

    fn input_len(&self) -> usize {
        (3 + 2 * self.context) * self.frame_len + self.time_embed
    }

    /// `(fan_in, fan_out)` of every linear layer, head included.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_len();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.frame_len));
        dims
    }

    /// Weights and biases of every layer plus the residual scale.
    pub fn num_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum::<usize>()
            + 1
    }
}

/// How the head output `o` and the residual `r (y - x)` combine:
/// `(o + r (y - x)) / (1 - t)` as a vector field, so the network predicts the
/// clean endpoint relative to `x`, and `((1 - t) o + r (y - x)) / (t sigma)^2`
/// as a score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    VectorField,
    Score { sigma: f64 },
}

impl Mode {
    /// Coefficients `(c_o, c_r)` with `out = c_o o + c_r r (y - x)`.
    fn output_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        match *self {
            Mode::VectorField => {
                if !(t < 1.0) {
                    return Err(Error::TimeOutOfRange { t, range: "[0, 1)" });
                }
                let inv = 1.0 / (1.0 - t);
                Ok((inv, inv))
            }
            Mode::Score { sigma } => {
                if !(t > 0.0) {
                    return Err(Error::TimeOutOfRange { t, range: "(0, 1]" });
                }
                let inv_var = 1.0 / (t * sigma).powi(2);
                Ok(((1.0 - t) * inv_var, inv_var))
            }
        }
    }
}

/// One regression sample: the model output at `(x, y, t)` is pulled towards
/// `target` with squared-error weight `weight`.
#[derive(Clone, Debug)]
pub struct RegressionItem {
    pub x: StateVector,
    pub y: StateVector,
    pub t: f64,
    pub target: StateVector,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug)]
struct LayerView {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    arch: Architecture,
    mode: Mode,
    params: Vec<f64>,
}

/// Activations kept for the backward pass of a single state.
struct Tape {
    frames: usize,
    /// Per layer: the layer input `h` (frames x fan_in); pre-activations `z`
    /// (frames x fan_out) of the hidden layers.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn sinusoidal_embedding(t: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    let span = (100f64).ln();
    for k in 0..half {
        let freq = if half > 1 {
            (span * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[k] = (freq * t).sin();
        out[half + k] = (freq * t).cos();
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl FieldModel {
    /// Fan-in scaled uniform weights, zero biases, residual scale 1.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, mode: Mode, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut model = Self::zeros(arch, mode)?;
        for layer in model.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for w in &mut model.params[layer.w..layer.w + layer.fan_in * layer.fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        *model.params.last_mut().expect("residual scale") = 1.0;
        Ok(model)
    }

    /// All parameters zero, including the residual scale.
    pub fn zeros(arch: Architecture, mode: Mode) -> Result<Self> {
        arch.validate()?;
        let params = vec![0.0; arch.num_params()];
        Ok(Self { arch, mode, params })
    }

    pub fn from_params(arch: Architecture, mode: Mode, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::shape(
                format!("{} parameters", arch.num_params()),
                format!("{} parameters", params.len()),
            ));
        }
        Ok(Self { arch, mode, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same architecture and mode with other parameters (e.g. EMA weights).
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        Self::from_params(self.arch.clone(), self.mode, params.to_vec())
    }

    pub fn residual_scale(&self) -> f64 {
        *self.params.last().expect("residual scale")
    }

    fn layers(&self) -> Vec<LayerView> {
        let mut off = 0;
        self.arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let view = LayerView {
                    w: off,
                    b: off + fan_in * fan_out,
                    fan_in,
                    fan_out,
                };
                off += fan_in * fan_out + fan_out;
                view
            })
            .collect()
    }

    fn check_inputs(&self, x: &StateVector, y: &StateVector) -> Result<usize> {
        x.ensure_same_shape(y)?;
        let fl = self.arch.frame_len;
        if x.shape().frame_len() != fl {
            return Err(Error::shape(
                format!("frames of {fl} reals"),
                format!("{} with frames of {}", x.shape(), x.shape().frame_len()),
            ));
        }
        Ok(x.len() / fl)
    }

    fn run(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<(StateVector, Tape)> {
        let frames = self.check_inputs(x, y)?;
        let (c_o, c_r) = self.mode.output_coeffs(t)?;
        let fl = self.arch.frame_len;
        let in_len = self.arch.input_len();
        let (xs, ys) = (x.as_slice(), y.as_slice());

        let mut emb = vec![0.0; self.arch.time_embed];
        sinusoidal_embedding(t, self.arch.time_embed, &mut emb);
        let mut h = vec![0.0; frames * in_len];
        for f in 0..frames {
            let row = &mut h[f * in_len..(f + 1) * in_len];
            let (xf, yf) = (&xs[f * fl..(f + 1) * fl], &ys[f * fl..(f + 1) * fl]);
            row[..fl].copy_from_slice(xf);
            row[fl..2 * fl].copy_from_slice(yf);
            for i in 0..fl {
                row[2 * fl + i] = yf[i] - xf[i];
            }
            let c = self.arch.context;
            let neighbours = (1..=c)
                .map(|k| f.checked_sub(k))
                .chain((1..=c).map(|k| Some(f + k)));
            for (slot, g) in neighbours.enumerate() {
                let dst = &mut row[(3 + slot) * fl..(4 + slot) * fl];
                match g {
                    Some(g) if g < frames => dst.copy_from_slice(&ys[g * fl..(g + 1) * fl]),
                    _ => dst.fill(0.0),
                }
            }
            row[(3 + 2 * c) * fl..].copy_from_slice(&emb);
        }

        let layers = self.layers();
        let n_layers = layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        for (li, layer) in layers.iter().enumerate() {
            let w = &self.params[layer.w..layer.b];
            let b = &self.params[layer.b..layer.b + layer.fan_out];
            let mut z = vec![0.0; frames * layer.fan_out];
            for f in 0..frames {
                z[f * layer.fan_out..(f + 1) * layer.fan_out].copy_from_slice(b);
            }
            for i in 0..layer.fan_in {
                let wi = &w[i * layer.fan_out..(i + 1) * layer.fan_out];
                for f in 0..frames {
                    let hv = h[f * layer.fan_in + i];
                    if hv != 0.0 {
                        axpy(hv, wi, &mut z[f * layer.fan_out..(f + 1) * layer.fan_out]);
                    }
                }
            }
            let next = if li + 1 < n_layers {
                let act = self.arch.activation;
                z.iter().map(|&v| act.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        let head = pre.pop().expect("head layer");

        let r = self.residual_scale();
        let out: Vec<f64> = head
            .iter()
            .zip(xs.iter().zip(ys))
            .map(|(&o, (&xv, &yv))| c_o * o + c_r * r * (yv - xv))
            .collect();
        let tape = Tape {
            frames,
            inputs,
            pre,
        };
        Ok((StateVector::from_raw(x.shape(), out), tape))
    }

    /// Accumulates `d_out^T d(out)/d(theta)` into `grad` and, when requested,
    /// `d_out^T d(out)/dx` into `d_x`.
    #[allow(clippy::too_many_arguments)]
    fn backprop(
        &self,
        tape: &Tape,
        x: &StateVector,
        y: &StateVector,
        t: f64,
        d_out: &[f64],
        grad: &mut [f64],
        d_x: Option<&mut [f64]>,
    ) -> Result<()> {
        let (c_o, c_r) = self.mode.output_coeffs(t)?;
        let fl = self.arch.frame_len;
        let r = self.residual_scale();
        let (xs, ys) = (x.as_slice(), y.as_slice());
        let frames = tape.frames;

        let g_r: f64 = d_out
            .iter()
            .zip(xs.iter().zip(ys))
            .map(|(&d, (&xv, &yv))| d * (yv - xv))
            .sum();
        *grad.last_mut().expect("residual scale") += c_r * g_r;

        let layers = self.layers();
        let n_layers = layers.len();
        let act = self.arch.activation;
        // d(loss)/dz of the current layer.
        let mut dz: Vec<f64> = d_out.iter().map(|&d| c_o * d).collect();
        let want_input = d_x.is_some();
        let mut d_input = Vec::new();
        for li in (0..n_layers).rev() {
            let layer = layers[li];
            let h = &tape.inputs[li];
            let (gw, rest) = grad[layer.w..].split_at_mut(layer.fan_in * layer.fan_out);
            let gb = &mut rest[..layer.fan_out];
            for f in 0..frames {
                axpy(1.0, &dz[f * layer.fan_out..(f + 1) * layer.fan_out], gb);
            }
            for i in 0..layer.fan_in {
                let gwi = &mut gw[i * layer.fan_out..(i + 1) * layer.fan_out];
                for f in 0..frames {
                    let hv = h[f * layer.fan_in + i];
                    if hv != 0.0 {
                        axpy(hv, &dz[f * layer.fan_out..(f + 1) * layer.fan_out], gwi);
                    }
                }
            }
            if li == 0 && !want_input {
                break;
            }
            let w = &self.params[layer.w..layer.b];
            let mut dh = vec![0.0; frames * layer.fan_in];
            for f in 0..frames {
                let dzf = &dz[f * layer.fan_out..(f + 1) * layer.fan_out];
                let dhf = &mut dh[f * layer.fan_in..(f + 1) * layer.fan_in];
                for (i, d) in dhf.iter_mut().enumerate() {
                    *d = dot(&w[i * layer.fan_out..(i + 1) * layer.fan_out], dzf);
                }
            }
            if li == 0 {
                d_input = dh;
            } else {
                let z_prev = &tape.pre[li - 1];
                for (d, &z) in dh.iter_mut().zip(z_prev) {
                    *d *= act.derivative(z);
                }
                dz = dh;
            }
        }

        if let Some(d_x) = d_x {
            let in_len = self.arch.input_len();
            for f in 0..frames {
                let row = &d_input[f * in_len..(f + 1) * in_len];
                for i in 0..fl {
                    let k = f * fl + i;
                    // x enters directly, through y - x, and through the residual.
                    d_x[k] += row[i] - row[2 * fl + i] - c_r * r * d_out[k];
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
        let (out, _) = self.run(x, y, t)?;
        if !out.is_finite() {
            return Err(Error::NonFiniteValue(format!("model output at t = {t}")));
        }
        Ok(out)
    }

    /// Vector-Jacobian product: gradients of `<d_out, forward(x, y, t)>` with
    /// respect to the parameters and to `x`.
    pub fn vjp(
        &self,
        x: &StateVector,
        y: &StateVector,
        t: f64,
        d_out: &StateVector,
    ) -> Result<(Vec<f64>, StateVector)> {
        d_out.ensure_same_shape(x)?;
        let (_, tape) = self.run(x, y, t)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut d_x = vec![0.0; x.len()];
        self.backprop(&tape, x, y, t, d_out.as_slice(), &mut grad, Some(&mut d_x))?;
        Ok((grad, StateVector::from_raw(x.shape(), d_x)))
    }

    /// Mean over items of `weight * ||forward(x, y, t) - target||^2` and its
    /// exact gradient with respect to the parameters.
    pub fn loss_grad(&self, batch: &[RegressionItem]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::config("loss_grad needs a non-empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for item in batch {
            item.target.ensure_same_shape(&item.x)?;
            let (out, tape) = self.run(&item.x, &item.y, item.t)?;
            let resid: Vec<f64> = out
                .as_slice()
                .iter()
                .zip(item.target.as_slice())
                .map(|(o, tg)| o - tg)
                .collect();
            loss += item.weight * resid.iter().map(|r| r * r).sum::<f64>();
            let d_out: Vec<f64> = resid
                .iter()
                .map(|r| 2.0 * item.weight * scale * r)
                .collect();
            self.backprop(&tape, &item.x, &item.y, item.t, &d_out, &mut grad, None)?;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFiniteValue("regression loss".into()));
        }
        Ok((loss, grad))
    }
}

impl Field for FieldModel {
    fn eval(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
        self.forward(x, y, t)
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(theta: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config(format!(
                "EMA decay must lie in [0, 1], got {decay}"
            )));
        }
        Ok(Self {
            shadow: theta.to_vec(),
            decay,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * theta`.
    pub fn update(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.shadow.len() {
            return Err(Error::shape(
                format!("{} parameters", self.shadow.len()),
                format!("{} parameters", theta.len()),
            ));
        }
        let d = self.decay;
        for (s, &p) in self.shadow.iter_mut().zip(theta) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }
}
