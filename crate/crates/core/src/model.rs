//! Small dense feed-forward classifiers with explicit flat parameter vectors.
//!
//! The flat layout is: for each layer `l`, the weight matrix
//! (`arch[l+1] x arch[l]`, row-major) followed by the bias (`arch[l+1]`).
//! Hidden layers use ReLU; the final layer is linear and its output is the
//! logit vector. Dropout is inverted (kept units scaled by `1/(1-rate)`) and
//! applied to hidden activations only when an explicit seed is supplied, so a
//! plain forward pass is always deterministic.

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const MODEL_MAGIC: &[u8] = b"UULM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            t => Err(Error::Config(format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    dropout_rate: f64,
}

/// Number of parameters a given layer-width sequence requires.
pub fn param_count(arch: &[usize]) -> usize {
    arch.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl ModelParams {
    pub fn new(
        arch: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
        dropout_rate: f64,
    ) -> Result<Self> {
        if arch.len() < 3 {
            return Err(Error::Config(format!(
                "arch needs input, at least one hidden layer, and output; got {arch:?}"
            )));
        }
        if arch.iter().any(|&w| w == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        let want = param_count(&arch);
        if params.len() != want {
            return Err(Error::Shape(format!(
                "arch {arch:?} wants {want} params, got {}",
                params.len()
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {dropout_rate} outside [0,1)"
            )));
        }
        Ok(ModelParams {
            arch,
            activation,
            params,
            dropout_rate,
        })
    }

    pub fn zeros(arch: Vec<usize>) -> Result<Self> {
        let n = param_count(&arch);
        ModelParams::new(arch, Activation::Relu, vec![0.0; n], 0.0)
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn class_count(&self) -> usize {
        *self.arch.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.arch.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn with_dropout_rate(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        ModelParams::new(
            self.arch.clone(),
            self.activation,
            params,
            self.dropout_rate,
        )
    }

    /// (weights, bias) slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (start, rows, cols) = self.layer_extent(l);
        let w_end = start + rows * cols;
        (&self.params[start..w_end], &self.params[w_end..w_end + rows])
    }

    /// (offset, out_width, in_width) of layer `l` in the flat vector.
    pub fn layer_extent(&self, l: usize) -> (usize, usize, usize) {
        let mut start = 0;
        for k in 0..l {
            start += self.arch[k] * self.arch[k + 1] + self.arch[k + 1];
        }
        (start, self.arch[l + 1], self.arch[l])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input length {} does not match model input width {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Per-layer intermediate values captured by a forward pass; consumed by
/// reverse-mode gradient code.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input vector (a_0).
    pub input: Vec<f64>,
    /// Pre-activation of every layer, z_1..z_L; the last entry is the logits.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation of hidden layers, a_1..a_{L-1} (ReLU then dropout).
    pub post: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit (1 everywhere when dropout is off).
    pub drop_scale: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

fn matvec(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        out.push(acc);
    }
    out
}

/// Forward pass recording everything reverse mode needs.
pub fn forward_traced(model: &ModelParams, x: &[f64], dropout_seed: Option<u64>) -> Result<Trace> {
    model.check_input(x)?;
    let layers = model.layer_count();
    let mut rng = dropout_seed.map(rng::rng);
    let mut pre = Vec::with_capacity(layers);
    let mut post = Vec::with_capacity(layers - 1);
    let mut drop_scale = Vec::with_capacity(layers - 1);
    let mut act = x.to_vec();
    for l in 0..layers {
        let (_, rows, cols) = model.layer_extent(l);
        let (w, b) = model.layer(l);
        let z = matvec(w, b, &act, rows, cols);
        if l + 1 < layers {
            let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let scale = match rng.as_mut() {
                Some(r) if model.dropout_rate > 0.0 => {
                    let keep = 1.0 / (1.0 - model.dropout_rate);
                    a.iter_mut()
                        .map(|v| {
                            let s = if r.gen::<f64>() < model.dropout_rate {
                                0.0
                            } else {
                                keep
                            };
                            *v *= s;
                            s
                        })
                        .collect()
                }
                _ => vec![1.0; a.len()],
            };
            pre.push(z);
            drop_scale.push(scale);
            act = a.clone();
            post.push(a);
        } else {
            pre.push(z);
        }
    }
    Ok(Trace {
        input: x.to_vec(),
        pre,
        post,
        drop_scale,
    })
}

/// Logits for one input. Deterministic when `dropout_seed` is `None`.
pub fn forward(model: &ModelParams, x: &Tensor, dropout_seed: Option<u64>) -> Result<Tensor> {
    let trace = forward_traced(model, x.data(), dropout_seed)?;
    Tensor::vector(trace.logits().to_vec())
}

/// Penultimate-layer activation (the feature-space embedding used for
/// neighbor distances). Never applies dropout.
pub fn hidden_rep(model: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let trace = forward_traced(model, x.data(), None)?;
    Tensor::vector(trace.post.last().unwrap().clone())
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(MODEL_MAGIC)?;
    w.u32(1)?;
    w.u32(model.arch.len() as u32)?;
    for &width in &model.arch {
        w.u32(width as u32)?;
    }
    w.u8(model.activation.tag())?;
    w.f32s(model.params.iter().map(|&p| p as f32))?;
    w.flush()
}

/// Reads a checkpoint written by [`save_model`]. Parameters come back at f32
/// precision; the dropout rate is runtime configuration and defaults to 0.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(MODEL_MAGIC)?;
    let version = r.u32("version")?;
    if version != 1 {
        return Err(Error::format_at(4, format!("unsupported version {version}")));
    }
    let layer_count = r.u32("layer count")? as usize;
    if !(3..=64).contains(&layer_count) {
        return Err(Error::format_at(8, format!("implausible layer count {layer_count}")));
    }
    let mut arch = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        arch.push(r.u32("layer width")? as usize);
    }
    let activation = Activation::from_tag(r.u8("activation tag")?)?;
    let n = param_count(&arch);
    let params: Vec<f64> = r.f32s(n, "params")?.into_iter().map(f64::from).collect();
    r.expect_eof()?;
    ModelParams::new(arch, activation, params, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_identity() -> ModelParams {
        // arch [2,2,2]; both layers identity weights, zero bias.
        let params = vec![
            1.0, 0.0, 0.0, 1.0, 0.0, 0.0, // W1 = I, b1 = 0
            1.0, 0.0, 0.0, 1.0, 0.0, 0.0, // W2 = I, b2 = 0
        ];
        ModelParams::new(vec![2, 2, 2], Activation::Relu, params, 0.0).unwrap()
    }

    #[test]
    fn zero_model_maps_everything_to_zero_logits() {
        let m = ModelParams::zeros(vec![3, 4, 2]).unwrap();
        let x = Tensor::vector(vec![1.5, -2.0, 0.25]).unwrap();
        let out = forward(&m, &x, None).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_net_applies_relu_between_layers() {
        let m = tiny_identity();
        let x = Tensor::vector(vec![2.0, -3.0]).unwrap();
        let out = forward(&m, &x, None).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_unrolled_matrix_products() {
        let m = crate::train::init_params(&[3, 4, 2], 0, 0.0).unwrap();
        let x = [0.3, -1.1, 0.7];
        // Independent oracle: unroll the two layers by hand.
        let (w1, b1) = m.layer(0);
        let (w2, b2) = m.layer(1);
        let mut h = [0.0f64; 4];
        for r in 0..4 {
            let mut acc = b1[r];
            for c in 0..3 {
                acc += w1[r * 3 + c] * x[c];
            }
            h[r] = acc.max(0.0);
        }
        let mut z = [0.0f64; 2];
        for r in 0..2 {
            let mut acc = b2[r];
            for c in 0..4 {
                acc += w2[r * 4 + c] * h[c];
            }
            z[r] = acc;
        }
        let got = forward(&m, &Tensor::vector(x.to_vec()).unwrap(), None).unwrap();
        assert!((got.data()[0] - z[0]).abs() < 1e-15);
        assert!((got.data()[1] - z[1]).abs() < 1e-15);
    }

    #[test]
    fn forward_without_dropout_is_bit_identical_across_calls() {
        let m = crate::train::init_params(&[4, 8, 3], 9, 0.2).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = forward(&m, &x, None).unwrap();
        let b = forward(&m, &x, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dropout_is_deterministic_per_seed_and_varies_across_seeds() {
        let m = crate::train::init_params(&[4, 16, 3], 9, 0.5).unwrap();
        let x = Tensor::vector(vec![0.4, -0.2, 0.3, 1.0]).unwrap();
        let a = forward(&m, &x, Some(5)).unwrap();
        let b = forward(&m, &x, Some(5)).unwrap();
        let c = forward(&m, &x, Some(6)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn hidden_rep_is_last_hidden_activation() {
        let m = tiny_identity();
        let x = Tensor::vector(vec![2.0, -3.0]).unwrap();
        let h = hidden_rep(&m, &x).unwrap();
        assert_eq!(h.data(), &[2.0, 0.0]);

        let z = ModelParams::zeros(vec![2, 3, 2]).unwrap();
        let h0 = hidden_rep(&z, &x).unwrap();
        assert_eq!(h0.data(), &[0.0, 0.0, 0.0]);

        // Deeper net: must equal the forward pass truncated before the head.
        let deep = crate::train::init_params(&[3, 5, 4, 2], 0, 0.0).unwrap();
        let x3 = Tensor::vector(vec![0.5, 0.1, -0.4]).unwrap();
        let trace = forward_traced(&deep, x3.data(), None).unwrap();
        let h = hidden_rep(&deep, &x3).unwrap();
        assert_eq!(h.data(), trace.post[1].as_slice());
    }

    #[test]
    fn input_shape_mismatch_is_reported() {
        let m = tiny_identity();
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(forward(&m, &x, None), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uulm");
        let m = crate::train::init_params(&[5, 7, 3], 42, 0.0).unwrap();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.arch(), m.arch());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.uulm");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        match load_model(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }
}
