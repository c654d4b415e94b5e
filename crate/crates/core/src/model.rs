//! Multi-layer perceptron classifiers built from affine layers.
//!
//! Weights are stored filters-as-rows: row `k` of a layer's weight is the
//! filter producing output unit `k`. For the final layer that row is the
//! class-`k` classifier filter; its bias is kept in a separate vector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`, one filter per row.
    pub weight: Tensor2,
    /// `1 × out`.
    pub bias: Tensor2,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::invalid(format!(
                "bias has {} entries for a layer with {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        let bias = Tensor2::from_vec(1, bias.len(), bias)?;
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.data().len()
    }
}

/// An ordered stack of affine layers. The final layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} units but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if let Some(last) = layers.last() {
            if last.activation != Activation::Identity {
                return Err(Error::invalid("final layer must use identity activation"));
            }
        }
        Ok(Self { layers })
    }

    /// Builds an MLP with the given layer widths, `dims[0]` being the input
    /// dimension and `dims.last()` the class count. Hidden layers use ReLU.
    ///
    /// Weights are drawn uniformly in `±sqrt(6 / (fan_in + fan_out))` from a
    /// ChaCha8 stream seeded with `seed`, layer by layer in row-major order;
    /// biases start at zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!(
                "model needs at least input and output widths, all positive; got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::new(
                    Tensor2::from_vec(fan_out, fan_in, w)?,
                    vec![0.0; fan_out],
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(Layer::in_dim)
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.layers.last().map(Layer::out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn classifier(&self) -> Option<&Layer> {
        self.layers.last()
    }

    pub fn classifier_mut(&mut self) -> Option<&mut Layer> {
        self.layers.last_mut()
    }

    /// Logits for every row of `x`.
    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = autodiff::affine(&h, &layer.weight, &layer.bias)?;
            if layer.activation == Activation::Relu {
                h = autodiff::relu(&h);
            }
        }
        Ok(h)
    }

    /// Activations entering the final layer (the pre-logit features).
    pub fn features(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.clone();
        for layer in self.layers.iter().take(self.layers.len().saturating_sub(1)) {
            h = autodiff::affine(&h, &layer.weight, &layer.bias)?;
            if layer.activation == Activation::Relu {
                h = autodiff::relu(&h);
            }
        }
        Ok(h)
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor2) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.argmax_rows())
    }

    /// Records the forward pass on `tape`. Layers with index
    /// `>= trainable_from` get parameter handles; earlier layers are
    /// recorded as constants and receive no gradient.
    pub fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        trainable_from: usize,
    ) -> Result<(Var, Vec<Option<LayerVars>>)> {
        let mut h = x;
        let mut vars = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = if i >= trainable_from {
                let w = tape.param(layer.weight.clone());
                let b = tape.param(layer.bias.clone());
                vars.push(Some(LayerVars { weight: w, bias: b }));
                (w, b)
            } else {
                vars.push(None);
                (
                    tape.constant(layer.weight.clone()),
                    tape.constant(layer.bias.clone()),
                )
            };
            h = tape.affine(h, w, b)?;
            if layer.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok((h, vars))
    }

    /// All parameters flattened layer by layer (weights then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            if idx < nw {
                return &mut l.weight.data_mut()[idx];
            }
            idx -= nw;
            let nb = l.bias.data().len();
            if idx < nb {
                return &mut l.bias.data_mut()[idx];
            }
            idx -= nb;
        }
        panic!("parameter index out of range");
    }

    /// Serializes to the LTMC checkpoint layout: magic `LTMC`, `u32`
    /// version, `u32` layer count, then per layer `u32` out, `u32` in,
    /// `u8` activation tag (0 identity, 1 relu), weights row-major and
    /// biases, all `f64` little-endian.
    pub fn to_ltmc_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + self.num_params() * 8 + self.layers.len() * 9);
        buf.extend_from_slice(LTMC_MAGIC);
        buf.extend_from_slice(&LTMC_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            buf.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            buf.push(l.activation.tag());
            for v in l.weight.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in l.bias.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_ltmc_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != LTMC_MAGIC {
            return Err(Error::MalformedFile("missing LTMC magic".into()));
        }
        let version = r.u32()?;
        if version != LTMC_VERSION {
            return Err(Error::MalformedFile(format!(
                "unsupported LTMC version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let tag = r.take(1)?[0];
            let act = Activation::from_tag(tag)
                .ok_or_else(|| Error::MalformedFile(format!("unknown activation tag {tag}")))?;
            let w = r.f64s(
                out.checked_mul(inp)
                    .ok_or_else(|| Error::MalformedFile("layer dimensions overflow".into()))?,
            )?;
            let b = r.f64s(out)?;
            layers.push(Layer::new(Tensor2::from_vec(out, inp, w)?, b, act)?);
        }
        if !r.is_empty() {
            return Err(Error::MalformedFile(
                "trailing bytes after LTMC payload".into(),
            ));
        }
        Self::new(layers).map_err(|e| Error::MalformedFile(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ltmc_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ltmc_bytes(&std::fs::read(path)?)
    }
}

const LTMC_MAGIC: &[u8; 4] = b"LTMC";
const LTMC_VERSION: u32 = 1;

/// Little-endian cursor shared by the binary container readers.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedFile("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::MalformedFile("length overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Loss on logits: returns the scalar loss and `∂loss/∂logits`.
pub type LossFn<'a> = dyn Fn(&Tensor2, &[usize]) -> Result<(f64, Tensor2)> + 'a;

/// Compares reverse-mode gradients of `loss_fn(model(x), labels)` with
/// central differences for every parameter. Returns the largest
/// `|g_rev − g_fd| / max(|g_rev|, 1e-8)`.
pub fn gradient_check(
    model: &Model,
    x: &Tensor2,
    labels: &[usize],
    loss_fn: &LossFn<'_>,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!(
            "eps must be in (0, 1e-2], got {eps}"
        )));
    }
    if model.num_params() == 0 {
        return Ok(0.0);
    }

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (logits, vars) = model.record(&mut tape, xv, 0)?;
    let (loss, seed) = loss_fn(tape.value(logits), labels)?;
    if !loss.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }
    let grads = tape.backward(logits, seed)?;
    let mut analytic = Vec::with_capacity(model.num_params());
    for lv in vars.iter().flatten() {
        analytic.extend_from_slice(grads.get(lv.weight).unwrap().data());
        analytic.extend_from_slice(grads.get(lv.bias).unwrap().data());
    }

    let eval = |m: &Model| -> Result<f64> {
        let (l, _) = loss_fn(&m.forward(x)?, labels)?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::numeric("perturbed loss is not finite"))
        }
    };

    let mut probe = model.clone();
    let mut max_rel: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + eps;
        let up = eval(&probe)?;
        *probe.param_mut(i) = orig - eps;
        let down = eval(&probe)?;
        *probe.param_mut(i) = orig;
        let fd = (up - down) / (2.0 * eps);
        max_rel = max_rel.max((g - fd).abs() / g.abs().max(1e-8));
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_identity_layer_is_affine() {
        let layer = Layer::new(
            Tensor2::identity(3),
            vec![1.0, 2.0, 3.0],
            Activation::Identity,
        )
        .unwrap();
        let m = Model::new(vec![layer]).unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, -1.0, 0.5]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[2.0, 1.0, 3.5]);
    }

    #[test]
    fn zero_network_predicts_class_zero() {
        let mut m = Model::init(&[4, 6, 5], 3).unwrap();
        for l in m.layers_mut() {
            l.weight.data_mut().fill(0.0);
        }
        let x = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-5.0, 0.0, 9.0, 1.0]]).unwrap();
        let logits = m.forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.predict(&x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn two_layer_forward_matches_hand_algebra() {
        let m = Model::init(&[3, 4, 2], 0).unwrap();
        let x = Tensor2::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.0, -0.5]]).unwrap();
        let logits = m.forward(&x).unwrap();
        let (l0, l1) = (&m.layers()[0], &m.layers()[1]);
        for i in 0..2 {
            let h: Vec<f64> = (0..4)
                .map(|j| {
                    let s: f64 = (0..3).map(|d| x.get(i, d) * l0.weight.get(j, d)).sum();
                    (s + l0.bias.get(0, j)).max(0.0)
                })
                .collect();
            for k in 0..2 {
                let s: f64 =
                    (0..4).map(|j| h[j] * l1.weight.get(k, j)).sum::<f64>() + l1.bias.get(0, k);
                assert!((logits.get(i, k) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn init_respects_bound_and_is_seeded() {
        let a = Model::init(&[10, 20, 5], 42).unwrap();
        let b = Model::init(&[10, 20, 5], 42).unwrap();
        let c = Model::init(&[10, 20, 5], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(a.layers()[0].weight.data().iter().all(|v| v.abs() <= limit));
        assert!(a.layers()[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let l0 = Layer::new(Tensor2::zeros(3, 2), vec![0.0; 3], Activation::Relu).unwrap();
        let l1 = Layer::new(Tensor2::zeros(2, 4), vec![0.0; 2], Activation::Identity).unwrap();
        assert!(Model::new(vec![l0.clone(), l1]).is_err());
        assert!(Model::new(vec![l0]).is_err());
    }

    #[test]
    fn ltmc_roundtrip_and_rejections() {
        let m = Model::init(&[3, 5, 4], 9).unwrap();
        let bytes = m.to_ltmc_bytes();
        assert_eq!(&bytes[..4], b"LTMC");
        assert_eq!(Model::from_ltmc_bytes(&bytes).unwrap(), m);
        assert!(Model::from_ltmc_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Model::from_ltmc_bytes(&bad),
            Err(Error::MalformedFile(_))
        ));
    }

    #[test]
    fn gradient_check_degenerate_and_bad_eps() {
        let empty = Model::new(vec![]).unwrap();
        let x = Tensor2::zeros(1, 2);
        let loss = |_: &Tensor2, _: &[usize]| Ok((0.0, Tensor2::zeros(1, 2)));
        assert_eq!(gradient_check(&empty, &x, &[0], &loss, 1e-5).unwrap(), 0.0);
        let m = Model::init(&[2, 2], 0).unwrap();
        assert!(gradient_check(&m, &x, &[0], &loss, 0.1).is_err());
        let nan = |_: &Tensor2, _: &[usize]| Ok((f64::NAN, Tensor2::zeros(1, 2)));
        assert!(matches!(
            gradient_check(&m, &x, &[0], &nan, 1e-5),
            Err(Error::NumericFailure(_))
        ));
    }
}
