//! Fully connected feed-forward controllers.
//!
//! Parameters are stored flat (layer by layer, weights row-major then bias),
//! which is also the layout of [`ParamGrad`]. Interval bounds use the
//! center/radius form of interval bound propagation with a small outward
//! guard for floating-point rounding, so enclosure holds exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interval::{Interval, IntervalBox};

const U: f64 = f64::EPSILON;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad architecture: {0}")]
    BadArch(String),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input.
    fn slope(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.n_out {
            let row = &self.weights[i * self.n_in..(i + 1) * self.n_in];
            let mut s = self.bias[i];
            for (w, v) in row.iter().zip(x) {
                s += w * v;
            }
            out.push(s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: Vec<usize>,
    pub layers: Vec<Layer>,
    pub seed: u64,
    pub meta: serde_json::Value,
}

/// Gradient with the same flat layout as [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub flat: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(len: usize) -> Self {
        Self { flat: vec![0.0; len] }
    }

    pub fn add_scaled(&mut self, other: &ParamGrad, k: f64) {
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += k * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.flat.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.flat.iter().all(|&v| v == 0.0)
    }
}

/// Intermediate values of one IBP pass, kept for the backward sweep.
#[derive(Debug, Clone)]
pub struct IbpTrace {
    /// Per layer: input center and radius, pre-activation bounds.
    steps: Vec<IbpStep>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone)]
struct IbpStep {
    c: Vec<f64>,
    r: Vec<f64>,
    pre_lo: Vec<f64>,
    pre_hi: Vec<f64>,
}

impl IbpTrace {
    pub fn output_box(&self) -> IntervalBox {
        IntervalBox::new(self.lo.iter().zip(&self.hi).map(|(&l, &h)| Interval::new(l, h)).collect())
    }
}

fn widen_down(v: f64) -> f64 {
    v - (v.abs() * 2.0 * U + f64::MIN_POSITIVE)
}

fn widen_up(v: f64) -> f64 {
    v + (v.abs() * 2.0 * U + f64::MIN_POSITIVE)
}

impl Mlp {
    /// Xavier-uniform weights, zero biases; hidden layers tanh, output identity.
    pub fn init(arch: &[usize], seed: u64) -> Result<Self, NnError> {
        if arch.len() < 2 {
            return Err(NnError::BadArch(format!("need at least input and output sizes, got {arch:?}")));
        }
        if arch.contains(&0) {
            return Err(NnError::BadArch(format!("zero-width layer in {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                let weights = (0..n_in * n_out).map(|_| rng.gen_range(-bound..=bound)).collect();
                let activation = if i + 2 == arch.len() { Activation::Identity } else { Activation::Tanh };
                Layer { n_in, n_out, weights, bias: vec![0.0; n_out], activation }
            })
            .collect();
        Ok(Self { arch: arch.to_vec(), layers, seed, meta: serde_json::Value::Null })
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.arch.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
    }

    pub fn zero_grad(&self) -> ParamGrad {
        ParamGrad::zeros(self.param_count())
    }

    fn check_input(&self, n: usize) -> Result<(), NnError> {
        if n != self.input_dim() {
            return Err(NnError::DimensionMismatch { expected: self.input_dim(), got: n });
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(z.len())?;
        let mut x = z.to_vec();
        let mut pre = Vec::new();
        for l in &self.layers {
            l.affine(&x, &mut pre);
            x.clear();
            x.extend(pre.iter().map(|&v| l.activation.apply(v)));
        }
        Ok(x)
    }

    /// Forward pass keeping every layer's input and pre-activation.
    fn forward_trace(&self, z: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut x = z.to_vec();
        for l in &self.layers {
            let mut pre = Vec::with_capacity(l.n_out);
            l.affine(&x, &mut pre);
            let next = pre.iter().map(|&v| l.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut x, next));
            pres.push(pre);
        }
        (inputs, pres, x)
    }

    /// Accumulates `∂(cot · φ(z)) / ∂params` into `grad`; returns `φ(z)`.
    pub fn backprop_point(&self, z: &[f64], cot: &[f64], grad: &mut ParamGrad) -> Result<Vec<f64>, NnError> {
        self.check_input(z.len())?;
        if cot.len() != self.output_dim() {
            return Err(NnError::DimensionMismatch { expected: self.output_dim(), got: cot.len() });
        }
        let (inputs, pres, out) = self.forward_trace(z);
        self.backward_point(&inputs, &pres, cot.to_vec(), grad);
        Ok(out)
    }

    /// Value and gradient of `Σ_k w_k Σ_i (φ(z_k)_i − u_k,i)²` over a batch.
    pub fn squared_error_grad(&self, z: &[f64], u: &[f64], grad: &mut ParamGrad) -> f64 {
        let (inputs, pres, out) = self.forward_trace(z);
        let mut cot = Vec::with_capacity(out.len());
        let mut e2 = 0.0;
        for (o, t) in out.iter().zip(u) {
            let d = o - t;
            e2 += d * d;
            cot.push(2.0 * d);
        }
        self.backward_point(&inputs, &pres, cot, grad);
        e2
    }

    fn backward_point(&self, inputs: &[Vec<f64>], pres: &[Vec<f64>], mut g: Vec<f64>, grad: &mut ParamGrad) {
        let offsets = self.offsets();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let (x, pre) = (&inputs[li], &pres[li]);
            for (gi, &p) in g.iter_mut().zip(pre) {
                *gi *= l.activation.slope(p);
            }
            let off = offsets[li];
            let (gw, rest) = grad.flat[off..].split_at_mut(l.weights.len());
            for i in 0..l.n_out {
                if g[i] == 0.0 {
                    continue;
                }
                let row = &mut gw[i * l.n_in..(i + 1) * l.n_in];
                for (w, &xj) in row.iter_mut().zip(x) {
                    *w += g[i] * xj;
                }
                rest[i] += g[i];
            }
            if li > 0 {
                let mut prev = vec![0.0; l.n_in];
                for i in 0..l.n_out {
                    let row = &l.weights[i * l.n_in..(i + 1) * l.n_in];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += w * g[i];
                    }
                }
                g = prev;
            }
        }
    }

    /// Parameter offset of each layer's weight block.
    fn offsets(&self) -> Vec<usize> {
        let mut k = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = k;
                k += l.weights.len() + l.bias.len();
                o
            })
            .collect()
    }

    /// Sound output bounds over `input`.
    pub fn ibp(&self, input: &IntervalBox) -> Result<IntervalBox, NnError> {
        Ok(self.ibp_trace(&input.lo(), &input.hi())?.output_box())
    }

    pub fn ibp_trace(&self, lo: &[f64], hi: &[f64]) -> Result<IbpTrace, NnError> {
        self.check_input(lo.len())?;
        self.check_input(hi.len())?;
        let mut lo = lo.to_vec();
        let mut hi = hi.to_vec();
        let mut steps = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let c: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            let r: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (b - a)).collect();
            let gamma = (l.n_in as f64 + 4.0) * U;
            let mut pre_lo = Vec::with_capacity(l.n_out);
            let mut pre_hi = Vec::with_capacity(l.n_out);
            for i in 0..l.n_out {
                let row = &l.weights[i * l.n_in..(i + 1) * l.n_in];
                let mut cc = l.bias[i];
                let mut rr = 0.0;
                let mut mag = l.bias[i].abs();
                for j in 0..l.n_in {
                    let w = row[j];
                    cc += w * c[j];
                    rr += w.abs() * r[j];
                    mag += w.abs() * (c[j].abs() + r[j]);
                }
                let rr = rr + gamma * mag;
                pre_lo.push(widen_down(cc - rr));
                pre_hi.push(widen_up(cc + rr));
            }
            lo = pre_lo.iter().map(|&v| self.bound_act(l.activation, v, false)).collect();
            hi = pre_hi.iter().map(|&v| self.bound_act(l.activation, v, true)).collect();
            steps.push(IbpStep { c, r, pre_lo, pre_hi });
        }
        Ok(IbpTrace { steps, lo, hi })
    }

    fn bound_act(&self, a: Activation, v: f64, upper: bool) -> f64 {
        match a {
            Activation::Identity => v,
            Activation::Tanh => {
                let t = v.tanh();
                if upper {
                    widen_up(t).min(1.0)
                } else {
                    widen_down(t).max(-1.0)
                }
            }
        }
    }

    /// Accumulates the gradient of `g_lo · lo + g_hi · hi` (the IBP output
    /// bounds of `trace`) with respect to the parameters. Rounding guards are
    /// treated as constants; `|W|` uses `sign(W)` with 0 at exact zeros.
    pub fn ibp_backward(&self, trace: &IbpTrace, g_lo: &[f64], g_hi: &[f64], grad: &mut ParamGrad) {
        let offsets = self.offsets();
        let mut d_lo = g_lo.to_vec();
        let mut d_hi = g_hi.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let s = &trace.steps[li];
            let n_out = l.n_out;
            let mut dc = vec![0.0; n_out];
            let mut dr = vec![0.0; n_out];
            for i in 0..n_out {
                let a = d_lo[i] * l.activation.slope(s.pre_lo[i]);
                let b = d_hi[i] * l.activation.slope(s.pre_hi[i]);
                dc[i] = a + b;
                dr[i] = b - a;
            }
            let off = offsets[li];
            let (gw, gb) = grad.flat[off..].split_at_mut(l.weights.len());
            for i in 0..n_out {
                let row_w = &l.weights[i * l.n_in..(i + 1) * l.n_in];
                let row_g = &mut gw[i * l.n_in..(i + 1) * l.n_in];
                for j in 0..l.n_in {
                    let w = row_w[j];
                    let sign = if w > 0.0 {
                        1.0
                    } else if w < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    row_g[j] += dc[i] * s.c[j] + dr[i] * s.r[j] * sign;
                }
                gb[i] += dc[i];
            }
            if li > 0 {
                let mut pc = vec![0.0; l.n_in];
                let mut pr = vec![0.0; l.n_in];
                for i in 0..n_out {
                    let row = &l.weights[i * l.n_in..(i + 1) * l.n_in];
                    for j in 0..l.n_in {
                        pc[j] += row[j] * dc[i];
                        pr[j] += row[j].abs() * dr[i];
                    }
                }
                d_lo = pc.iter().zip(&pr).map(|(c, r)| 0.5 * (c - r)).collect();
                d_hi = pc.iter().zip(&pr).map(|(c, r)| 0.5 * (c + r)).collect();
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| NnError::Format(e.to_string()))?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    arch: Vec<usize>,
    layers: Vec<LayerFile>,
    seed: u64,
    #[serde(default)]
    meta: serde_json::Value,
}

impl From<&Mlp> for ModelFile {
    fn from(m: &Mlp) -> Self {
        ModelFile {
            arch: m.arch.clone(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile { weights: l.weights.clone(), bias: l.bias.clone(), activation: l.activation })
                .collect(),
            seed: m.seed,
            meta: m.meta.clone(),
        }
    }
}

impl TryFrom<ModelFile> for Mlp {
    type Error = NnError;

    fn try_from(f: ModelFile) -> Result<Self, NnError> {
        if f.arch.len() < 2 || f.layers.len() + 1 != f.arch.len() {
            return Err(NnError::BadArch(format!("arch {:?} does not match {} layers", f.arch, f.layers.len())));
        }
        let mut layers = Vec::with_capacity(f.layers.len());
        for (i, l) in f.layers.into_iter().enumerate() {
            let (n_in, n_out) = (f.arch[i], f.arch[i + 1]);
            if l.weights.len() != n_in * n_out {
                return Err(NnError::Format(format!("layers[{i}].weights: expected {} entries, got {}", n_in * n_out, l.weights.len())));
            }
            if l.bias.len() != n_out {
                return Err(NnError::Format(format!("layers[{i}].bias: expected {n_out} entries, got {}", l.bias.len())));
            }
            layers.push(Layer { n_in, n_out, weights: l.weights, bias: l.bias, activation: l.activation });
        }
        Ok(Mlp { arch: f.arch, layers, seed: f.seed, meta: f.meta })
    }
}
