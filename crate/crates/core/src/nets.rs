//! Small dense networks with hand-written reverse mode, flat parameter storage
//! and the two action heads used by the focal agent.
//!
//! Parameters of a layer are stored as a row-major `fan_out × fan_in` weight
//! block followed by `fan_out` biases (when enabled). Hidden layers use `tanh`,
//! the output layer is linear.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input length {got}, network expects {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("parameter slice length {got}, network expects {expected}")]
    ParamSize { expected: usize, got: usize },
    #[error("gradient length {got}, expected {expected}")]
    GradSize { expected: usize, got: usize },
    #[error("unknown segment `{0}`")]
    UnknownSegment(String),
    #[error("preset mismatch: expected {expected}, found {found}")]
    PresetMismatch { expected: Preset, found: Preset },
    #[error("malformed parameter file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_size: usize,
    pub bias: bool,
}

impl NetworkSpec {
    pub fn new(input_size: usize, hidden_sizes: &[usize], output_size: usize) -> Self {
        Self {
            input_size,
            hidden_sizes: hidden_sizes.to_vec(),
            output_size,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let sizes: Vec<usize> = std::iter::once(self.input_size)
            .chain(self.hidden_sizes.iter().copied())
            .chain(std::iter::once(self.output_size))
            .collect();
        (0..sizes.len() - 1).map(move |k| (sizes[k], sizes[k + 1]))
    }

    fn layer_len(&self, fan_in: usize, fan_out: usize) -> usize {
        (fan_in + usize::from(self.bias)) * fan_out
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| self.layer_len(i, o)).sum()
    }

    /// Evaluates the network, leaving intermediates in `tape` for [`backward`](Self::backward).
    pub fn forward<'t>(
        &self,
        params: &[f64],
        input: &[f64],
        tape: &'t mut Tape,
    ) -> Result<&'t [f64], NetError> {
        self.check_params(params)?;
        if input.len() != self.input_size {
            return Err(NetError::InputSize {
                expected: self.input_size,
                got: input.len(),
            });
        }
        let n_layers = self.hidden_sizes.len() + 1;
        tape.acts.resize_with(n_layers + 1, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        let mut offset = 0;
        for (k, (fan_in, fan_out)) in self.layers().enumerate() {
            let (done, rest) = tape.acts.split_at_mut(k + 1);
            let x = &done[k];
            let y = &mut rest[0];
            y.clear();
            let w = &params[offset..offset + fan_in * fan_out];
            let b = self
                .bias
                .then(|| &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out]);
            for j in 0..fan_out {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let mut s = b.map_or(0.0, |b| b[j]);
                for (wi, xi) in row.iter().zip(x) {
                    s += wi * xi;
                }
                y.push(if k + 1 < n_layers { s.tanh() } else { s });
            }
            offset += self.layer_len(fan_in, fan_out);
        }
        Ok(&tape.acts[n_layers])
    }

    /// Accumulates `∂(grad_output · output)/∂params` into `grad_params` using the
    /// intermediates recorded by the last `forward` call on `tape`.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &Tape,
        grad_output: &[f64],
        grad_params: &mut [f64],
    ) -> Result<(), NetError> {
        self.check_params(params)?;
        if grad_params.len() != params.len() {
            return Err(NetError::GradSize {
                expected: params.len(),
                got: grad_params.len(),
            });
        }
        if grad_output.len() != self.output_size {
            return Err(NetError::GradSize {
                expected: self.output_size,
                got: grad_output.len(),
            });
        }
        let layers: Vec<(usize, usize)> = self.layers().collect();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(i, o) in &layers {
            offsets.push(off);
            off += self.layer_len(i, o);
        }
        // gradient w.r.t. the pre-activation of the current layer
        let mut delta = grad_output.to_vec();
        for k in (0..layers.len()).rev() {
            let (fan_in, fan_out) = layers[k];
            let x = &tape.acts[k];
            let offset = offsets[k];
            for j in 0..fan_out {
                let d = delta[j];
                let row = &mut grad_params[offset + j * fan_in..offset + (j + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            if self.bias {
                let gb = &mut grad_params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
                for (g, d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            if k == 0 {
                break;
            }
            let w = &params[offset..offset + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for j in 0..fan_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    *p += d * wi;
                }
            }
            // x holds tanh outputs of layer k-1
            for (p, h) in prev.iter_mut().zip(x) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
        Ok(())
    }

    fn check_params(&self, params: &[f64]) -> Result<(), NetError> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(NetError::ParamSize {
                expected,
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init_uniform<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        let mut offset = 0;
        for (fan_in, fan_out) in self.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut out[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-bound..=bound);
            }
            if self.bias {
                out[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out].fill(0.0);
            }
            offset += self.layer_len(fan_in, fan_out);
        }
    }
}

/// Per-call activations; reuse one per thread to avoid reallocating.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Allocating convenience wrapper around [`NetworkSpec::forward`].
pub fn forward(spec: &NetworkSpec, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, Tape), NetError> {
    let mut tape = Tape::default();
    let out = spec.forward(params, input, &mut tape)?.to_vec();
    Ok((out, tape))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "CMAES")]
    Cmaes,
    #[serde(rename = "PPO-DEEP")]
    PpoDeep,
    #[serde(rename = "PPO-MLP")]
    PpoMlp,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "CMAES" | "CMA-ES" => Ok(Preset::Cmaes),
            "PPO-MLP" => Ok(Preset::PpoMlp),
            "PPO-DEEP" => Ok(Preset::PpoDeep),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

pub const INVESTMENT_ACTOR: &str = "investment_actor";
pub const INVESTMENT_CRITIC: &str = "investment_critic";
pub const CHOICE_ACTOR: &str = "choice_actor";
pub const CHOICE_CRITIC: &str = "choice_critic";
pub const INVESTMENT: &str = "investment";
pub const CHOICE: &str = "choice";
pub const DUMMY: &str = "dummy";

/// Number of inert coordinates padding the evolution-strategy genome.
pub const CMAES_DUMMY_LEN: usize = 16;

impl Preset {
    pub fn label(self) -> &'static str {
        match self {
            Preset::Cmaes => "CMAES",
            Preset::PpoMlp => "PPO-MLP",
            Preset::PpoDeep => "PPO-DEEP",
        }
    }

    pub fn id(self) -> u32 {
        match self {
            Preset::PpoMlp => 1,
            Preset::PpoDeep => 2,
            Preset::Cmaes => 3,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(Preset::PpoMlp),
            2 => Some(Preset::PpoDeep),
            3 => Some(Preset::Cmaes),
            _ => None,
        }
    }

    pub fn is_ppo(self) -> bool {
        !matches!(self, Preset::Cmaes)
    }

    fn choice_hidden(self) -> &'static [usize] {
        match self {
            Preset::PpoDeep => &[256, 256],
            Preset::PpoMlp | Preset::Cmaes => &[3],
        }
    }

    /// Choice actor: (own investment, partner investment) → (accept, refuse) logits.
    pub fn choice_actor(self) -> NetworkSpec {
        NetworkSpec::new(2, self.choice_hidden(), 2)
    }

    pub fn choice_critic(self) -> NetworkSpec {
        NetworkSpec::new(2, self.choice_hidden(), 1)
    }

    /// Constant input 1.0 → (mean, log_std); no bias.
    pub fn investment_actor() -> NetworkSpec {
        NetworkSpec::new(1, &[], 2).without_bias()
    }

    pub fn investment_critic() -> NetworkSpec {
        NetworkSpec::new(1, &[], 1).without_bias()
    }

    pub fn layout(self) -> Vec<Segment> {
        let lens: Vec<(&str, usize)> = match self {
            Preset::Cmaes => vec![
                (INVESTMENT, 1),
                (CHOICE, self.choice_actor().param_count()),
                (DUMMY, CMAES_DUMMY_LEN),
            ],
            _ => vec![
                (INVESTMENT_ACTOR, Self::investment_actor().param_count()),
                (INVESTMENT_CRITIC, Self::investment_critic().param_count()),
                (CHOICE_ACTOR, self.choice_actor().param_count()),
                (CHOICE_CRITIC, self.choice_critic().param_count()),
            ],
        };
        let mut offset = 0;
        lens.into_iter()
            .map(|(name, len)| {
                let s = Segment {
                    name: name.to_string(),
                    offset,
                    len,
                };
                offset += len;
                s
            })
            .collect()
    }
}

pub fn param_count(preset: Preset) -> usize {
    preset.layout().iter().map(|s| s.len).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter storage for every network of a preset.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub preset: Preset,
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
}

const MAGIC: &[u8; 4] = b"PVEC";

impl ParamVector {
    pub fn zeros(preset: Preset) -> Self {
        Self {
            preset,
            values: vec![0.0; param_count(preset)],
            layout: preset.layout(),
        }
    }

    pub fn from_values(preset: Preset, values: Vec<f64>) -> Result<Self, NetError> {
        let expected = param_count(preset);
        if values.len() != expected {
            return Err(NetError::ParamSize {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            preset,
            values,
            layout: preset.layout(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_range(&self, name: &str) -> Result<std::ops::Range<usize>, NetError> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(Segment::range)
            .ok_or_else(|| NetError::UnknownSegment(name.to_string()))
    }

    pub fn segment(&self, name: &str) -> Result<&[f64], NetError> {
        let r = self.segment_range(name)?;
        Ok(&self.values[r])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64], NetError> {
        let r = self.segment_range(name)?;
        Ok(&mut self.values[r])
    }

    pub fn expect_preset(&self, expected: Preset) -> Result<(), NetError> {
        if self.preset == expected {
            Ok(())
        } else {
            Err(NetError::PresetMismatch {
                expected,
                found: self.preset,
            })
        }
    }

    /// Header (`PVEC`, preset id u32, length u64) followed by little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.preset.id().to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(NetError::Malformed("missing PVEC header".into()));
        }
        let id = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let preset = Preset::from_id(id)
            .ok_or_else(|| NetError::Malformed(format!("unknown preset id {id}")))?;
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != len * 8 {
            return Err(NetError::Malformed(format!(
                "header announces {len} values, body holds {} bytes",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(preset, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Initial standard deviation of the PPO investment head.
pub const INITIAL_INVESTMENT_STD: f64 = 2.0;

/// PPO presets: fan-in scaled uniform weights, zero biases, investment
/// `log_std` set to `ln 2`. The evolution-strategy genome starts at zero.
pub fn init_params<R: Rng + ?Sized>(preset: Preset, rng: &mut R) -> ParamVector {
    let mut pv = ParamVector::zeros(preset);
    if !preset.is_ppo() {
        return pv;
    }
    let specs = [
        (INVESTMENT_ACTOR, Preset::investment_actor()),
        (INVESTMENT_CRITIC, Preset::investment_critic()),
        (CHOICE_ACTOR, preset.choice_actor()),
        (CHOICE_CRITIC, preset.choice_critic()),
    ];
    for (name, spec) in specs {
        let seg = pv.segment_mut(name).expect("preset layout");
        spec.init_uniform(seg, rng);
    }
    pv.segment_mut(INVESTMENT_ACTOR).expect("preset layout")[1] = INITIAL_INVESTMENT_STD.ln();
    pv
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Diagonal Gaussian over the raw investment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianHead {
    pub mean: f64,
    pub log_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvestmentSample {
    pub raw: f64,
    pub clipped: f64,
    pub log_prob: f64,
}

impl GaussianHead {
    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    pub fn log_prob(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std();
        -0.5 * z * z - self.log_std - HALF_LN_2PI
    }

    /// `(∂ log_prob/∂mean, ∂ log_prob/∂log_std)` at `x`.
    pub fn log_prob_grad(&self, x: f64) -> [f64; 2] {
        let var = (2.0 * self.log_std).exp();
        let d = x - self.mean;
        [d / var, d * d / var - 1.0]
    }

    /// KL(self ‖ other), closed form.
    pub fn kl(&self, other: &GaussianHead) -> f64 {
        let v_self = (2.0 * self.log_std).exp();
        let v_other = (2.0 * other.log_std).exp();
        let dm = self.mean - other.mean;
        other.log_std - self.log_std + (v_self + dm * dm) / (2.0 * v_other) - 0.5
    }

    /// Gradient of KL(self ‖ other) w.r.t. `(other.mean, other.log_std)`.
    pub fn kl_grad_other(&self, other: &GaussianHead) -> [f64; 2] {
        let v_self = (2.0 * self.log_std).exp();
        let v_other = (2.0 * other.log_std).exp();
        let dm = other.mean - self.mean;
        [dm / v_other, 1.0 - (v_self + dm * dm) / v_other]
    }

    /// Draws a raw action, scores it, then clamps it into `[lo, hi]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, lo: f64, hi: f64) -> InvestmentSample {
        let z: f64 = StandardNormal.sample(rng);
        let raw = self.mean + self.std() * z;
        InvestmentSample {
            raw,
            clipped: raw.clamp(lo, hi),
            log_prob: self.log_prob(raw),
        }
    }
}

/// Samples an investment clipped to the default game range `[0, 15]`.
pub fn sample_investment<R: Rng + ?Sized>(head: &GaussianHead, rng: &mut R) -> InvestmentSample {
    head.sample(rng, 0.0, 15.0)
}

/// Two-way softmax; index 0 is "accept".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalHead {
    pub logits: [f64; 2],
}

impl CategoricalHead {
    pub fn log_probs(&self) -> [f64; 2] {
        let m = self.logits[0].max(self.logits[1]);
        let lse = m + ((self.logits[0] - m).exp() + (self.logits[1] - m).exp()).ln();
        [self.logits[0] - lse, self.logits[1] - lse]
    }

    pub fn probs(&self) -> [f64; 2] {
        let lp = self.log_probs();
        [lp[0].exp(), lp[1].exp()]
    }

    pub fn accept_prob(&self) -> f64 {
        self.probs()[0]
    }

    pub fn log_prob(&self, accept: bool) -> f64 {
        self.log_probs()[usize::from(!accept)]
    }

    /// `∂ log_prob(action)/∂logits`.
    pub fn log_prob_grad(&self, accept: bool) -> [f64; 2] {
        let p = self.probs();
        let k = usize::from(!accept);
        let mut g = [-p[0], -p[1]];
        g[k] += 1.0;
        g
    }

    pub fn kl(&self, other: &CategoricalHead) -> f64 {
        let a = self.log_probs();
        let b = other.log_probs();
        a[0].exp() * (a[0] - b[0]) + a[1].exp() * (a[1] - b[1])
    }

    /// Gradient of KL(self ‖ other) w.r.t. `other.logits`.
    pub fn kl_grad_other(&self, other: &CategoricalHead) -> [f64; 2] {
        let a = self.probs();
        let b = other.probs();
        [b[0] - a[0], b[1] - a[1]]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (bool, f64) {
        let lp = self.log_probs();
        let u: f64 = rng.random();
        let accept = u < lp[0].exp();
        (accept, lp[usize::from(!accept)])
    }
}

pub fn sample_choice<R: Rng + ?Sized>(head: &CategoricalHead, rng: &mut R) -> (bool, f64) {
    head.sample(rng)
}
