//! Scoring heads: Linear, Bilinear, and MLP binary classifiers over the
//! image-question-answer triplet, plus the softmax comparator that treats
//! answers as output classes. Forward passes and exact gradients are
//! implemented directly; checkpoints are a versioned self-describing
//! container.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{assemble_iq, FeatureStore, McQuestion, ModalityMask, TripletFeatures};
use crate::error::{Error, Result};
use crate::textembed::EmbeddingTable;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Linear,
    Bilinear,
    Mlp,
    Softmax,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "linear" => Ok(HeadKind::Linear),
            "bilinear" => Ok(HeadKind::Bilinear),
            "mlp" => Ok(HeadKind::Mlp),
            "softmax" => Ok(HeadKind::Softmax),
            other => Err(Error::InvalidArgument(format!(
                "unknown head kind {other:?} (expected linear, bilinear, mlp, or softmax)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Bilinear => "bilinear",
            HeadKind::Mlp => "mlp",
            HeadKind::Softmax => "softmax",
        }
    }
}

/// y = sigmoid(w . x_iqa + b)
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: Vec<f64>,
    pub b: f64,
}

/// y = sigmoid(x_iq^T W x_a + b); W stored row-major, rows = |x_iq|,
/// cols = |x_a|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearParams {
    pub w: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub b: f64,
}

/// y = sigmoid(w2 . dropout(relu(W1 x_iqa)) + b). No hidden-layer bias by
/// default; `b1` enables one when configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Vec<f64>,
    pub b1: Option<Vec<f64>>,
    pub w2: Vec<f64>,
    pub b: f64,
    pub hidden: usize,
    pub input: usize,
    pub dropout_rate: f64,
}

/// softmax(W x_iq + b) over a fixed ordered answer list; the answer is an
/// output class, not an input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub answer_list: Vec<String>,
    pub input: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Linear(LinearParams),
    Bilinear(BilinearParams),
    Mlp(MlpParams),
    Softmax(SoftmaxParams),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear(_) => HeadKind::Linear,
            Head::Bilinear(_) => HeadKind::Bilinear,
            Head::Mlp(_) => HeadKind::Mlp,
            Head::Softmax(_) => HeadKind::Softmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub text_dim: usize,
    pub image_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub head: Head,
    pub mask: ModalityMask,
    pub dims: Dims,
    pub mode: Mode,
}

fn sigmoid(z: f64) -> f64 {
    let y = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // Keep the probability strictly inside (0,1) even where exp saturates.
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// log(1 + e^z), stable for large |z|.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform_fan(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

/// Initializes a binary-head model. Weights are uniform in [-s, s] with
/// s = sqrt(6 / (fan_in + fan_out)) per tensor; biases zero.
pub fn init_model(
    kind: HeadKind,
    mask: ModalityMask,
    dims: Dims,
    hidden: usize,
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    let iq = mask.iq_dim(dims.text_dim, dims.image_dim);
    let input = iq + dims.text_dim;
    let head = match kind {
        HeadKind::Linear => Head::Linear(LinearParams {
            w: uniform_fan(rng, input, input, 1),
            b: 0.0,
        }),
        HeadKind::Bilinear => {
            if iq == 0 {
                return Err(Error::InvalidArgument(
                    "bilinear head is undefined for an answer-only mask".into(),
                ));
            }
            Head::Bilinear(BilinearParams {
                w: uniform_fan(rng, iq * dims.text_dim, iq, dims.text_dim),
                rows: iq,
                cols: dims.text_dim,
                b: 0.0,
            })
        }
        HeadKind::Mlp => {
            if hidden == 0 {
                return Err(Error::InvalidArgument("mlp needs hidden >= 1".into()));
            }
            if !(0.0..1.0).contains(&dropout_rate) {
                return Err(Error::InvalidArgument("dropout_rate must be in [0,1)".into()));
            }
            Head::Mlp(MlpParams {
                w1: uniform_fan(rng, hidden * input, input, hidden),
                b1: None,
                w2: uniform_fan(rng, hidden, hidden, 1),
                b: 0.0,
                hidden,
                input,
                dropout_rate,
            })
        }
        HeadKind::Softmax => {
            return Err(Error::InvalidArgument(
                "use init_softmax for the softmax head".into(),
            ))
        }
    };
    Ok(Model {
        head,
        mask,
        dims,
        mode: Mode::Train,
    })
}

/// Initializes the softmax comparator over a fixed answer list. The input
/// is the image+question part only.
pub fn init_softmax(
    mask: ModalityMask,
    dims: Dims,
    answer_list: Vec<String>,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    if answer_list.is_empty() {
        return Err(Error::InvalidArgument("softmax needs a non-empty answer list".into()));
    }
    let input = mask.iq_dim(dims.text_dim, dims.image_dim);
    let n = answer_list.len();
    Ok(Model {
        head: Head::Softmax(SoftmaxParams {
            w: uniform_fan(rng, n * input, input, n),
            b: vec![0.0; n],
            answer_list,
            input,
        }),
        mask,
        dims,
        mode: Mode::Train,
    })
}

/// Gradients with the same shape as the corresponding head's parameters.
#[derive(Debug, Clone)]
pub enum Gradients {
    Linear { w: Vec<f64>, b: f64 },
    Bilinear { w: Vec<f64>, b: f64 },
    Mlp { w1: Vec<f64>, b1: Option<Vec<f64>>, w2: Vec<f64>, b: f64 },
    Softmax { w: Vec<f64>, b: Vec<f64> },
}

impl Gradients {
    pub fn zeros_like(head: &Head) -> Self {
        match head {
            Head::Linear(p) => Gradients::Linear {
                w: vec![0.0; p.w.len()],
                b: 0.0,
            },
            Head::Bilinear(p) => Gradients::Bilinear {
                w: vec![0.0; p.w.len()],
                b: 0.0,
            },
            Head::Mlp(p) => Gradients::Mlp {
                w1: vec![0.0; p.w1.len()],
                b1: p.b1.as_ref().map(|b| vec![0.0; b.len()]),
                w2: vec![0.0; p.w2.len()],
                b: 0.0,
            },
            Head::Softmax(p) => Gradients::Softmax {
                w: vec![0.0; p.w.len()],
                b: vec![0.0; p.b.len()],
            },
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
            for (d, x) in dst.iter_mut().zip(src) {
                *d += s * x;
            }
        }
        match (self, other) {
            (Gradients::Linear { w, b }, Gradients::Linear { w: ow, b: ob }) => {
                axpy(w, ow, scale);
                *b += scale * ob;
            }
            (Gradients::Bilinear { w, b }, Gradients::Bilinear { w: ow, b: ob }) => {
                axpy(w, ow, scale);
                *b += scale * ob;
            }
            (
                Gradients::Mlp { w1, b1, w2, b },
                Gradients::Mlp { w1: ow1, b1: ob1, w2: ow2, b: ob },
            ) => {
                axpy(w1, ow1, scale);
                if let (Some(b1), Some(ob1)) = (b1, ob1) {
                    axpy(b1, ob1, scale);
                }
                axpy(w2, ow2, scale);
                *b += scale * ob;
            }
            (Gradients::Softmax { w, b }, Gradients::Softmax { w: ow, b: ob }) => {
                axpy(w, ow, scale);
                axpy(b, ob, scale);
            }
            _ => panic!("gradient shape mismatch"),
        }
    }

    /// Flattened view, in the same order as `Model::param_values_mut`.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            Gradients::Linear { w, b } => {
                let mut v = w.clone();
                v.push(*b);
                v
            }
            Gradients::Bilinear { w, b } => {
                let mut v = w.clone();
                v.push(*b);
                v
            }
            Gradients::Mlp { w1, b1, w2, b } => {
                let mut v = w1.clone();
                if let Some(b1) = b1 {
                    v.extend_from_slice(b1);
                }
                v.extend_from_slice(w2);
                v.push(*b);
                v
            }
            Gradients::Softmax { w, b } => {
                let mut v = w.clone();
                v.extend_from_slice(b);
                v
            }
        }
    }
}

impl Model {
    pub fn input_dim(&self) -> usize {
        let iq = self.mask.iq_dim(self.dims.text_dim, self.dims.image_dim);
        match &self.head {
            Head::Softmax(_) => iq,
            _ => iq + self.dims.text_dim,
        }
    }

    fn check_shapes(&self, t: &TripletFeatures) -> Result<()> {
        let iq = self.mask.iq_dim(self.dims.text_dim, self.dims.image_dim);
        if t.iq_part.len() != iq || t.a_part.len() != self.dims.text_dim {
            return Err(Error::DimMismatch(format!(
                "triplet has iq={} a={}, model expects iq={} a={}",
                t.iq_part.len(),
                t.a_part.len(),
                iq,
                self.dims.text_dim
            )));
        }
        Ok(())
    }

    /// Draws the inverted-dropout scale per hidden unit: 0 with probability
    /// `rate`, else 1/(1-rate). Eval mode and rate 0 are the identity.
    fn dropout_scales(
        &self,
        p: &MlpParams,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Option<Vec<f64>>> {
        if self.mode == Mode::Eval || p.dropout_rate == 0.0 {
            return Ok(None);
        }
        let rng = rng.ok_or_else(|| {
            Error::InvalidArgument("train-mode mlp with dropout needs an rng".into())
        })?;
        let keep = 1.0 - p.dropout_rate;
        Ok(Some(
            (0..p.hidden)
                .map(|_| {
                    if rng.gen::<f64>() < p.dropout_rate {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect(),
        ))
    }

    fn mlp_forward(p: &MlpParams, x: &[f64], scales: Option<&[f64]>) -> (Vec<f64>, f64) {
        let mut hidden_out = vec![0.0; p.hidden];
        for j in 0..p.hidden {
            let row = &p.w1[j * p.input..(j + 1) * p.input];
            let mut z = dot(row, x);
            if let Some(b1) = &p.b1 {
                z += b1[j];
            }
            let mut h = z.max(0.0);
            if let Some(s) = scales {
                h *= s[j];
            }
            hidden_out[j] = h;
        }
        let z = dot(&p.w2, &hidden_out) + p.b;
        (hidden_out, z)
    }

    fn logit(&self, t: &TripletFeatures, rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
        self.check_shapes(t)?;
        match &self.head {
            Head::Linear(p) => {
                Ok(dot(&p.w[..t.iq_part.len()], &t.iq_part)
                    + dot(&p.w[t.iq_part.len()..], &t.a_part)
                    + p.b)
            }
            Head::Bilinear(p) => {
                let mut z = p.b;
                for (i, &xi) in t.iq_part.iter().enumerate() {
                    let row = &p.w[i * p.cols..(i + 1) * p.cols];
                    z += xi * dot(row, &t.a_part);
                }
                Ok(z)
            }
            Head::Mlp(p) => {
                let scales = self.dropout_scales(p, rng)?;
                let x = t.full();
                let (_, z) = Self::mlp_forward(p, &x, scales.as_deref());
                Ok(z)
            }
            Head::Softmax(_) => Err(Error::InvalidArgument(
                "softmax head is scored with score_softmax, not score".into(),
            )),
        }
    }

    /// Correctness probability for one triplet. `rng` is consumed only by a
    /// train-mode MLP with dropout_rate > 0.
    pub fn score(&self, t: &TripletFeatures, rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
        Ok(sigmoid(self.logit(t, rng)?))
    }

    /// Binary logistic loss and its exact gradients for one example. The
    /// dropout mask drawn here is the one the reported loss uses.
    pub fn grad(
        &self,
        t: &TripletFeatures,
        label: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Gradients)> {
        self.check_shapes(t)?;
        let y_target = if label { 1.0 } else { 0.0 };
        match &self.head {
            Head::Linear(p) => {
                let z = dot(&p.w[..t.iq_part.len()], &t.iq_part)
                    + dot(&p.w[t.iq_part.len()..], &t.a_part)
                    + p.b;
                let loss = if label { softplus(-z) } else { softplus(z) };
                let delta = sigmoid(z) - y_target;
                let mut gw = Vec::with_capacity(p.w.len());
                gw.extend(t.iq_part.iter().map(|x| delta * x));
                gw.extend(t.a_part.iter().map(|x| delta * x));
                Ok((loss, Gradients::Linear { w: gw, b: delta }))
            }
            Head::Bilinear(p) => {
                let mut z = p.b;
                for (i, &xi) in t.iq_part.iter().enumerate() {
                    z += xi * dot(&p.w[i * p.cols..(i + 1) * p.cols], &t.a_part);
                }
                let loss = if label { softplus(-z) } else { softplus(z) };
                let delta = sigmoid(z) - y_target;
                let mut gw = vec![0.0; p.w.len()];
                for (i, &xi) in t.iq_part.iter().enumerate() {
                    let c = delta * xi;
                    for (g, &aj) in gw[i * p.cols..(i + 1) * p.cols].iter_mut().zip(&t.a_part) {
                        *g = c * aj;
                    }
                }
                Ok((loss, Gradients::Bilinear { w: gw, b: delta }))
            }
            Head::Mlp(p) => {
                let scales = self.dropout_scales(p, rng)?;
                let x = t.full();
                let (hidden_out, z) = Self::mlp_forward(p, &x, scales.as_deref());
                let loss = if label { softplus(-z) } else { softplus(z) };
                let delta = sigmoid(z) - y_target;

                let gw2: Vec<f64> = hidden_out.iter().map(|h| delta * h).collect();
                let mut gw1 = vec![0.0; p.w1.len()];
                let mut gb1 = p.b1.as_ref().map(|b| vec![0.0; b.len()]);
                for j in 0..p.hidden {
                    let row = &p.w1[j * p.input..(j + 1) * p.input];
                    let mut pre = dot(row, &x);
                    if let Some(b1) = &p.b1 {
                        pre += b1[j];
                    }
                    if pre <= 0.0 {
                        continue;
                    }
                    let scale = scales.as_ref().map_or(1.0, |s| s[j]);
                    if scale == 0.0 {
                        continue;
                    }
                    let g = delta * p.w2[j] * scale;
                    for (dst, &xi) in gw1[j * p.input..(j + 1) * p.input].iter_mut().zip(&x) {
                        *dst = g * xi;
                    }
                    if let Some(gb1) = &mut gb1 {
                        gb1[j] = g;
                    }
                }
                Ok((
                    loss,
                    Gradients::Mlp {
                        w1: gw1,
                        b1: gb1,
                        w2: gw2,
                        b: delta,
                    },
                ))
            }
            Head::Softmax(_) => Err(Error::InvalidArgument(
                "softmax head is trained with grad_softmax, not grad".into(),
            )),
        }
    }

    /// Probabilities over the answer list given the image+question input.
    pub fn softmax_probs(&self, x_iq: &[f64]) -> Result<Vec<f64>> {
        let p = match &self.head {
            Head::Softmax(p) => p,
            _ => {
                return Err(Error::InvalidArgument(
                    "score_softmax requires a softmax head".into(),
                ))
            }
        };
        if x_iq.len() != p.input {
            return Err(Error::DimMismatch(format!(
                "softmax input has dim {}, expected {}",
                x_iq.len(),
                p.input
            )));
        }
        let n = p.answer_list.len();
        let mut logits = vec![0.0; n];
        for (k, l) in logits.iter_mut().enumerate() {
            *l = dot(&p.w[k * p.input..(k + 1) * p.input], x_iq) + p.b[k];
        }
        Ok(stable_softmax(&logits))
    }

    /// Cross-entropy loss and exact gradients for the softmax head.
    pub fn grad_softmax(&self, x_iq: &[f64], target: usize) -> Result<(f64, Gradients)> {
        let p = match &self.head {
            Head::Softmax(p) => p,
            _ => {
                return Err(Error::InvalidArgument(
                    "grad_softmax requires a softmax head".into(),
                ))
            }
        };
        if target >= p.answer_list.len() {
            return Err(Error::InvalidArgument(format!(
                "target {target} out of range for {} answers",
                p.answer_list.len()
            )));
        }
        let probs = self.softmax_probs(x_iq)?;
        let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
        let n = p.answer_list.len();
        let mut gw = vec![0.0; p.w.len()];
        let mut gb = vec![0.0; n];
        for k in 0..n {
            let d = probs[k] - if k == target { 1.0 } else { 0.0 };
            gb[k] = d;
            for (dst, &xi) in gw[k * p.input..(k + 1) * p.input].iter_mut().zip(x_iq) {
                *dst = d * xi;
            }
        }
        Ok((loss, Gradients::Softmax { w: gw, b: gb }))
    }

    /// Applies theta <- theta - lr * grad in place.
    pub fn apply_update(&mut self, g: &Gradients, lr: f64) {
        fn step(dst: &mut [f64], src: &[f64], lr: f64) {
            for (d, x) in dst.iter_mut().zip(src) {
                *d -= lr * x;
            }
        }
        match (&mut self.head, g) {
            (Head::Linear(p), Gradients::Linear { w, b }) => {
                step(&mut p.w, w, lr);
                p.b -= lr * b;
            }
            (Head::Bilinear(p), Gradients::Bilinear { w, b }) => {
                step(&mut p.w, w, lr);
                p.b -= lr * b;
            }
            (Head::Mlp(p), Gradients::Mlp { w1, b1, w2, b }) => {
                step(&mut p.w1, w1, lr);
                if let (Some(pb1), Some(gb1)) = (&mut p.b1, b1) {
                    step(pb1, gb1, lr);
                }
                step(&mut p.w2, w2, lr);
                p.b -= lr * b;
            }
            (Head::Softmax(p), Gradients::Softmax { w, b }) => {
                step(&mut p.w, w, lr);
                step(&mut p.b, b, lr);
            }
            _ => panic!("gradient shape mismatch"),
        }
    }

    /// Mutable references to every parameter value, in the flat order used
    /// by `Gradients::flat` (test support for finite-difference checks).
    pub fn param_values_mut(&mut self) -> Vec<&mut f64> {
        match &mut self.head {
            Head::Linear(p) => p.w.iter_mut().chain(std::iter::once(&mut p.b)).collect(),
            Head::Bilinear(p) => p.w.iter_mut().chain(std::iter::once(&mut p.b)).collect(),
            Head::Mlp(p) => p
                .w1
                .iter_mut()
                .chain(p.b1.iter_mut().flatten())
                .chain(p.w2.iter_mut())
                .chain(std::iter::once(&mut p.b))
                .collect(),
            Head::Softmax(p) => p.w.iter_mut().chain(p.b.iter_mut()).collect(),
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Checkpoint<'a> {
            version: u32,
            model: &'a Model,
        }
        serde_json::to_vec(&Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self,
        })
        .expect("model serializes")
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Model> {
        #[derive(Deserialize)]
        struct Checkpoint {
            version: u32,
            model: Model,
        }
        let ckpt: Checkpoint = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.model.validate_shapes()?;
        Ok(ckpt.model)
    }

    fn validate_shapes(&self) -> Result<()> {
        let iq = self.mask.iq_dim(self.dims.text_dim, self.dims.image_dim);
        let ok = match &self.head {
            Head::Linear(p) => p.w.len() == iq + self.dims.text_dim,
            Head::Bilinear(p) => {
                p.rows == iq && p.cols == self.dims.text_dim && p.w.len() == p.rows * p.cols
            }
            Head::Mlp(p) => {
                p.input == iq + self.dims.text_dim
                    && p.w1.len() == p.hidden * p.input
                    && p.w2.len() == p.hidden
                    && p.b1.as_ref().map_or(true, |b| b.len() == p.hidden)
            }
            Head::Softmax(p) => {
                p.input == iq
                    && p.w.len() == p.answer_list.len() * p.input
                    && p.b.len() == p.answer_list.len()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("parameter shapes inconsistent with dims/mask".into()))
        }
    }
}

fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Spec-shaped convenience wrapper: assembles x_iq for the question and
/// returns the probabilities over the model's answer list.
pub fn score_softmax(
    model: &Model,
    q: &McQuestion,
    emb: &EmbeddingTable,
    feats: &FeatureStore,
) -> Result<Vec<f64>> {
    let x_iq = assemble_iq(q, emb, feats, model.mask)?;
    model.softmax_probs(&x_iq)
}
