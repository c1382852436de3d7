//! Feed-forward classification heads with hand-written backpropagation.
//!
//! Each layer computes `linear → [layer norm] → activation → [dropout]`.
//! Parameters of a network live in one flat buffer; gradients use the same
//! layout so the optimizer and gradient checks can treat them uniformly.

use crate::scalar::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;
/// Variance epsilon of layer normalization.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Gelu,
    Sigmoid,
}

impl Activation {
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => x,
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and the activation output `y`.
    fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Activation::Identity => S::one(),
            Activation::Gelu => gelu_derivative(x),
            Activation::Sigmoid => y * (S::one() - y),
        }
    }
}

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF written through `erf`.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    half * x * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let cdf = S::of(0.5) * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * S::of(0.5)).exp() * S::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    pub dropout: f64,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec { in_dim, out_dim, activation: Activation::Identity, layer_norm: false, dropout: 0.0 }
    }

    pub fn hidden(in_dim: usize, out_dim: usize, dropout: f64) -> Self {
        LayerSpec { in_dim, out_dim, activation: Activation::Gelu, layer_norm: true, dropout }
    }

    fn param_count(&self) -> usize {
        let ln = if self.layer_norm { 2 * self.out_dim } else { 0 };
        self.in_dim * self.out_dim + self.out_dim + ln
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Baseline,
    Simple,
    OvrBinary,
    #[serde(rename = "skillnet", alias = "skill_net")]
    SkillNet,
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(HeadKind::Baseline),
            "simple" => Ok(HeadKind::Simple),
            "ovr" | "ovr_binary" => Ok(HeadKind::OvrBinary),
            "skillnet" => Ok(HeadKind::SkillNet),
            other => Err(format!("unknown architecture `{other}` (baseline, simple, ovr, skillnet)")),
        }
    }
}

/// Hidden widths of the skill network.
pub const SKILLNET_HIDDEN: [usize; 3] = [512, 1024, 512];
pub const SKILLNET_DROPOUT: f64 = 0.3;
/// Hidden width of the simple and one-vs-rest heads when not configured.
pub const DEFAULT_SIMPLE_WIDTH: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadArchitecture {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl HeadArchitecture {
    pub fn baseline(input_dim: usize, num_classes: usize) -> Self {
        HeadArchitecture { kind: HeadKind::Baseline, input_dim, num_classes, hidden: vec![], dropout: 0.0 }
    }

    pub fn simple(input_dim: usize, num_classes: usize, width: usize, dropout: f64) -> Self {
        HeadArchitecture { kind: HeadKind::Simple, input_dim, num_classes, hidden: vec![width], dropout }
    }

    pub fn ovr_binary(input_dim: usize, num_classes: usize, width: usize, dropout: f64) -> Self {
        HeadArchitecture { kind: HeadKind::OvrBinary, input_dim, num_classes, hidden: vec![width], dropout }
    }

    pub fn skillnet(input_dim: usize, num_classes: usize) -> Self {
        HeadArchitecture {
            kind: HeadKind::SkillNet,
            input_dim,
            num_classes,
            hidden: SKILLNET_HIDDEN.to_vec(),
            dropout: SKILLNET_DROPOUT,
        }
    }

    /// Builds the architecture of `kind`; `width`/`dropout` apply to simple and OvR heads.
    pub fn of_kind(kind: HeadKind, input_dim: usize, num_classes: usize, width: usize, dropout: f64) -> Self {
        match kind {
            HeadKind::Baseline => Self::baseline(input_dim, num_classes),
            HeadKind::Simple => Self::simple(input_dim, num_classes, width, dropout),
            HeadKind::OvrBinary => Self::ovr_binary(input_dim, num_classes, width, dropout),
            HeadKind::SkillNet => Self::skillnet(input_dim, num_classes),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidArchitecture(m.to_string()));
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input and class dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0,1)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        match self.kind {
            HeadKind::Baseline if !self.hidden.is_empty() => bad("baseline has no hidden layers"),
            HeadKind::Simple | HeadKind::OvrBinary if self.hidden.len() != 1 => bad("simple/OvR heads have one hidden layer"),
            HeadKind::SkillNet if self.hidden != SKILLNET_HIDDEN || self.dropout != SKILLNET_DROPOUT => {
                bad("skillnet is fixed at 512/1024/512 with dropout 0.3")
            }
            _ => Ok(()),
        }
    }

    /// Number of independent networks: one per class for OvR, otherwise one.
    pub fn network_count(&self) -> usize {
        if self.kind == HeadKind::OvrBinary {
            self.num_classes
        } else {
            1
        }
    }

    /// Layer stack of each network.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            specs.push(LayerSpec::hidden(prev, h, self.dropout));
            prev = h;
        }
        match self.kind {
            HeadKind::OvrBinary => specs.push(LayerSpec { activation: Activation::Sigmoid, ..LayerSpec::linear(prev, 1) }),
            _ => specs.push(LayerSpec::linear(prev, self.num_classes)),
        }
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Offsets {
    weight: usize,
    bias: usize,
    gain: usize,
    shift: usize,
}

/// A stack of layers with parameters in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    specs: Vec<LayerSpec>,
    offsets: Vec<Offsets>,
    params: Vec<S>,
}

#[derive(Clone, Debug)]
struct LayerCache<S> {
    input: Vec<S>,
    xhat: Vec<S>,
    inv_std: S,
    pre_activation: Vec<S>,
    activation: Vec<S>,
    mask: Option<Vec<S>>,
}

/// Intermediate values of one forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    layers: Vec<LayerCache<S>>,
}

/// Where the incoming gradient of [`Network::backward`] is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradAt {
    /// With respect to the network output.
    Output,
    /// With respect to the last layer's pre-activation (skips its activation
    /// derivative; used for sigmoid outputs trained with binary cross-entropy).
    PreActivation,
}

/// Layer normalization of `z` in place: returns `(xhat, inv_std)`.
pub fn layer_norm<S: Scalar>(z: &[S]) -> (Vec<S>, S) {
    let n = S::of(z.len() as f64);
    let mean = z.iter().copied().sum::<S>() / n;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let inv_std = S::one() / (var + S::of(LN_EPS)).sqrt();
    (z.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

impl<S: Scalar> Network<S> {
    fn layout(specs: &[LayerSpec]) -> (Vec<Offsets>, usize) {
        let mut offsets = Vec::with_capacity(specs.len());
        let mut at = 0;
        for s in specs {
            let weight = at;
            let bias = weight + s.in_dim * s.out_dim;
            let gain = bias + s.out_dim;
            let shift = gain + if s.layer_norm { s.out_dim } else { 0 };
            at = weight + s.param_count();
            offsets.push(Offsets { weight, bias, gain, shift });
        }
        (offsets, at)
    }

    fn check_specs(specs: &[LayerSpec]) -> Result<(), NetError> {
        if specs.is_empty() {
            return Err(NetError::InvalidArchitecture("network needs at least one layer".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NetError::ShapeMismatch { expected: pair[0].out_dim, found: pair[1].in_dim });
            }
        }
        Ok(())
    }

    /// All-zero weights and biases; layer-norm gains start at one.
    pub fn zeros(specs: Vec<LayerSpec>) -> Result<Self, NetError> {
        Self::check_specs(&specs)?;
        let (offsets, total) = Self::layout(&specs);
        let mut params = vec![S::zero(); total];
        for (s, o) in specs.iter().zip(&offsets) {
            if s.layer_norm {
                params[o.gain..o.gain + s.out_dim].iter_mut().for_each(|g| *g = S::one());
            }
        }
        Ok(Network { specs, offsets, params })
    }

    /// Weights and biases uniform in `±1/√fan_in`, drawn from a seeded ChaCha stream.
    pub fn init(specs: Vec<LayerSpec>, seed: u64) -> Result<Self, NetError> {
        let mut net = Self::zeros(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (s, o) in net.specs.iter().zip(&net.offsets) {
            let bound = 1.0 / (s.in_dim as f64).sqrt();
            for p in &mut net.params[o.weight..o.gain] {
                *p = S::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn from_params(specs: Vec<LayerSpec>, params: Vec<S>) -> Result<Self, NetError> {
        Self::check_specs(&specs)?;
        let (offsets, total) = Self::layout(&specs);
        if params.len() != total {
            return Err(NetError::ShapeMismatch { expected: total, found: params.len() });
        }
        Ok(Network { specs, offsets, params })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().map_or(0, |s| s.out_dim)
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn linear(&self, idx: usize, x: &[S]) -> Vec<S> {
        let s = &self.specs[idx];
        let o = self.offsets[idx];
        let w = &self.params[o.weight..o.bias];
        let b = &self.params[o.bias..o.bias + s.out_dim];
        (0..s.out_dim)
            .map(|r| {
                let row = &w[r * s.in_dim..(r + 1) * s.in_dim];
                row.iter().zip(x).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi)
            })
            .collect()
    }

    fn check_input(&self, x: &[S]) -> Result<(), NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::ShapeMismatch { expected: self.input_dim(), found: x.len() });
        }
        Ok(())
    }

    /// Forward pass. In train mode inverted-dropout masks are drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[S], mode: Mode, rng: &mut R) -> Result<(Vec<S>, ForwardCache<S>), NetError> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.specs.len());
        let mut cur = x.to_vec();
        for (idx, s) in self.specs.iter().enumerate() {
            let o = self.offsets[idx];
            let z = self.linear(idx, &cur);
            let (xhat, inv_std, pre) = if s.layer_norm {
                let (xhat, inv_std) = layer_norm(&z);
                let g = &self.params[o.gain..o.gain + s.out_dim];
                let sh = &self.params[o.shift..o.shift + s.out_dim];
                let pre = xhat.iter().zip(g).zip(sh).map(|((&h, &gi), &bi)| h * gi + bi).collect();
                (xhat, inv_std, pre)
            } else {
                (Vec::new(), S::one(), z)
            };
            let act: Vec<S> = pre.iter().map(|&v| s.activation.apply(v)).collect();
            let (out, mask) = if mode == Mode::Train && s.dropout > 0.0 {
                let keep = 1.0 - s.dropout;
                let scale = S::of(1.0 / keep);
                let mask: Vec<S> = (0..s.out_dim).map(|_| if rng.gen::<f64>() < keep { scale } else { S::zero() }).collect();
                (act.iter().zip(&mask).map(|(&a, &m)| a * m).collect(), Some(mask))
            } else {
                (act.clone(), None)
            };
            layers.push(LayerCache { input: cur, xhat, inv_std, pre_activation: pre, activation: act, mask });
            cur = out;
        }
        Ok((cur, ForwardCache { layers }))
    }

    /// Inference-mode forward pass without dropout or cache.
    pub fn infer(&self, x: &[S]) -> Result<Vec<S>, NetError> {
        let mut rng = NoRng;
        self.forward(x, Mode::Infer, &mut rng).map(|(out, _)| out)
    }

    /// Accumulates (adds) the parameter gradient of a scalar loss into `grads`.
    pub fn backward(&self, cache: &ForwardCache<S>, grad: &[S], at: GradAt, grads: &mut [S]) -> Result<(), NetError> {
        if grads.len() != self.params.len() {
            return Err(NetError::ShapeMismatch { expected: self.params.len(), found: grads.len() });
        }
        if grad.len() != self.output_dim() {
            return Err(NetError::ShapeMismatch { expected: self.output_dim(), found: grad.len() });
        }
        if cache.layers.len() != self.specs.len() {
            return Err(NetError::ShapeMismatch { expected: self.specs.len(), found: cache.layers.len() });
        }
        let last = self.specs.len() - 1;
        let mut d = grad.to_vec();
        for idx in (0..self.specs.len()).rev() {
            let s = &self.specs[idx];
            let o = self.offsets[idx];
            let c = &cache.layers[idx];
            let skip_activation = idx == last && at == GradAt::PreActivation;
            if !skip_activation {
                if let Some(mask) = &c.mask {
                    d.iter_mut().zip(mask).for_each(|(di, &m)| *di = *di * m);
                }
                for ((di, &x), &y) in d.iter_mut().zip(&c.pre_activation).zip(&c.activation) {
                    *di = *di * s.activation.derivative(x, y);
                }
            }
            if s.layer_norm {
                let n = S::of(s.out_dim as f64);
                let mut dxhat = Vec::with_capacity(s.out_dim);
                for j in 0..s.out_dim {
                    grads[o.gain + j] = grads[o.gain + j] + d[j] * c.xhat[j];
                    grads[o.shift + j] = grads[o.shift + j] + d[j];
                    dxhat.push(d[j] * self.params[o.gain + j]);
                }
                let mean_d = dxhat.iter().copied().sum::<S>() / n;
                let mean_dx = dxhat.iter().zip(&c.xhat).map(|(&a, &b)| a * b).sum::<S>() / n;
                for j in 0..s.out_dim {
                    d[j] = c.inv_std * (dxhat[j] - mean_d - c.xhat[j] * mean_dx);
                }
            }
            let mut dx = vec![S::zero(); s.in_dim];
            for r in 0..s.out_dim {
                let dz = d[r];
                grads[o.bias + r] = grads[o.bias + r] + dz;
                if dz == S::zero() {
                    continue;
                }
                let row = o.weight + r * s.in_dim;
                for (k, (&xi, dxk)) in c.input.iter().zip(dx.iter_mut()).enumerate() {
                    grads[row + k] = grads[row + k] + dz * xi;
                    *dxk = *dxk + dz * self.params[row + k];
                }
            }
            d = dx;
        }
        Ok(())
    }
}

/// RNG for inference paths; dropout never samples in infer mode.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference draws no random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> Result<(), rand::Error> {
        unreachable!("inference draws no random numbers")
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax of `logits / temperature`.
pub fn softmax_t<S: Scalar>(logits: &[S], temperature: S) -> Vec<S> {
    let scaled: Vec<S> = logits.iter().map(|&l| l / temperature).collect();
    softmax(&scaled)
}

/// `−ln p[target]` with `p` floored at [`LOG_EPS`].
pub fn cross_entropy<S: Scalar>(probs: &[S], target: usize) -> S {
    -probs[target].max(S::of(LOG_EPS)).ln()
}

/// Softmax cross-entropy on logits and its gradient `softmax − onehot`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], target: usize) -> (S, Vec<S>) {
    let mut p = softmax(logits);
    let loss = cross_entropy(&p, target);
    p[target] = p[target] - S::one();
    (loss, p)
}

/// Binary cross-entropy of a sigmoid score and its gradient w.r.t. the pre-activation.
pub fn binary_cross_entropy<S: Scalar>(score: S, target: bool) -> (S, S) {
    let eps = S::of(LOG_EPS);
    let y = if target { S::one() } else { S::zero() };
    let loss = if target { -score.max(eps).ln() } else { -(S::one() - score).max(eps).ln() };
    (loss, score - y)
}

/// Distillation cross-entropy `−Σ softmax(teacher/t) · ln softmax(student/t)`.
pub fn distill_loss<S: Scalar>(teacher_logits: &[S], student_logits: &[S], temperature: S) -> S {
    assert_eq!(teacher_logits.len(), student_logits.len(), "teacher and student sizes differ");
    let q = softmax_t(teacher_logits, temperature);
    let p = softmax_t(student_logits, temperature);
    -q.iter().zip(&p).map(|(&qi, &pi)| qi * pi.max(S::of(LOG_EPS)).ln()).sum::<S>()
}

/// Gradient of [`distill_loss`] with respect to the student logits: `(p − q)/t`.
pub fn distill_grad<S: Scalar>(teacher_logits: &[S], student_logits: &[S], temperature: S) -> Vec<S> {
    let q = softmax_t(teacher_logits, temperature);
    let p = softmax_t(student_logits, temperature);
    p.iter().zip(&q).map(|(&pi, &qi)| (pi - qi) / temperature).collect()
}

/// Shannon entropy in nats.
pub fn entropy<S: Scalar>(probs: &[S]) -> S {
    -probs.iter().filter(|&&p| p > S::zero()).map(|&p| p * p.ln()).sum::<S>()
}

/// A trained head: one softmax network, or one sigmoid network per class (OvR).
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<S> {
    pub arch: HeadArchitecture,
    pub nets: Vec<Network<S>>,
}

impl<S: Scalar> Classifier<S> {
    pub fn new(arch: HeadArchitecture, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let nets = (0..arch.network_count())
            .map(|i| Network::init(arch.layer_specs(), seed.wrapping_add(i as u64 * 0x9e37_79b9)))
            .collect::<Result<_, _>>()?;
        Ok(Classifier { arch, nets })
    }

    pub fn zeros(arch: HeadArchitecture) -> Result<Self, NetError> {
        arch.validate()?;
        let nets = (0..arch.network_count()).map(|_| Network::zeros(arch.layer_specs())).collect::<Result<_, _>>()?;
        Ok(Classifier { arch, nets })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// Raw per-class outputs: logits for softmax heads, sigmoid scores for OvR.
    pub fn scores(&self, x: &[S]) -> Result<Vec<S>, NetError> {
        if self.arch.kind == HeadKind::OvrBinary {
            self.nets.iter().map(|n| n.infer(x).map(|o| o[0])).collect()
        } else {
            self.nets[0].infer(x)
        }
    }

    /// Class distribution. OvR sigmoid scores are normalized to sum to one,
    /// which keeps the max-score decision.
    pub fn predict_proba(&self, x: &[S]) -> Result<Vec<S>, NetError> {
        let s = self.scores(x)?;
        if self.arch.kind == HeadKind::OvrBinary {
            let total: S = s.iter().copied().sum();
            if total > S::zero() {
                Ok(s.into_iter().map(|v| v / total).collect())
            } else {
                Ok(vec![S::one() / S::of(s.len() as f64); s.len()])
            }
        } else {
            Ok(softmax(&s))
        }
    }

    /// Zeroed gradient buffers, one per network.
    pub fn zero_grads(&self) -> Vec<Vec<S>> {
        self.nets.iter().map(|n| vec![S::zero(); n.param_count()]).collect()
    }

    /// Loss of one labelled sample; gradients are added into `grads`.
    pub fn accumulate<R: Rng + ?Sized>(&self, x: &[S], target: usize, mode: Mode, rng: &mut R, grads: &mut [Vec<S>]) -> Result<S, NetError> {
        if target >= self.num_classes() {
            return Err(NetError::ShapeMismatch { expected: self.num_classes(), found: target + 1 });
        }
        if self.arch.kind == HeadKind::OvrBinary {
            let mut total = S::zero();
            for (c, (net, g)) in self.nets.iter().zip(grads.iter_mut()).enumerate() {
                let (out, cache) = net.forward(x, mode, rng)?;
                let (loss, d) = binary_cross_entropy(out[0], c == target);
                total = total + loss;
                net.backward(&cache, &[d], GradAt::PreActivation, g)?;
            }
            Ok(total)
        } else {
            let (logits, cache) = self.nets[0].forward(x, mode, rng)?;
            let (loss, d) = softmax_cross_entropy(&logits, target);
            self.nets[0].backward(&cache, &d, GradAt::Output, &mut grads[0])?;
            Ok(loss)
        }
    }

    /// Loss of one sample without gradients (dropout off).
    pub fn loss(&self, x: &[S], target: usize) -> Result<S, NetError> {
        if self.arch.kind == HeadKind::OvrBinary {
            let s = self.scores(x)?;
            Ok(s.iter().enumerate().map(|(c, &v)| binary_cross_entropy(v, c == target).0).sum())
        } else {
            Ok(softmax_cross_entropy(&self.scores(x)?, target).0)
        }
    }
}
