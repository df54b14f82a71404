//! Fully connected networks for the density, diffusion and growth surrogates.
//!
//! Parameters are stored flat, layer by layer (row-major weights then biases), so an
//! optimizer can treat a network as a single vector.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Dual2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Softplus,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
            Activation::Softplus => softplus(z),
            Activation::Linear => z,
        }
    }

    /// Value and first three derivatives at `z`.
    #[inline]
    pub fn derivatives(self, z: f64) -> [f64; 4] {
        match self {
            Activation::Linear => [z, 1.0, 0.0, 0.0],
            Activation::Softplus => {
                let s = sigmoid(z);
                let p = s * (1.0 - s);
                [softplus(z), s, p, p * (1.0 - 2.0 * s)]
            }
            Activation::Silu => {
                let s = sigmoid(z);
                let p = s * (1.0 - s);
                let m = 1.0 - 2.0 * s;
                let q = 2.0 + z * m;
                [
                    z * s,
                    s * (1.0 + z * (1.0 - s)),
                    p * q,
                    p * m * q + p * (m - 2.0 * z * p),
                ]
            }
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
}

/// A plain multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward_dual_cached`].
#[derive(Debug, Clone, Default)]
pub struct JetCache<const K: usize> {
    inputs: Vec<Vec<Dual2<K>>>,
    pre: Vec<Vec<Dual2<K>>>,
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.in_width == 0 || l.out_width == 0 {
                return Err(Error::InvalidInput(format!("layer {k} has zero width")));
            }
            if k > 0 && layers[k - 1].out_width != l.in_width {
                return Err(Error::InvalidInput(format!(
                    "layer {k} input width {} does not match previous output {}",
                    l.in_width,
                    layers[k - 1].out_width
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut n = 0;
        for l in &layers {
            offsets.push(n);
            n += l.out_width * (l.in_width + 1);
        }
        offsets.push(n);
        Ok(Mlp {
            layers,
            offsets,
            params: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..net.layers.len() {
            let l = net.layers[k];
            let limit = (6.0 / (l.in_width + l.out_width) as f64).sqrt();
            let off = net.offsets[k];
            for w in &mut net.params[off..off + l.in_width * l.out_width] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_width)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layer_weights(&self, k: usize) -> &[f64] {
        let l = self.layers[k];
        &self.params[self.offsets[k]..self.offsets[k] + l.in_width * l.out_width]
    }

    pub fn layer_bias(&self, k: usize) -> &[f64] {
        let l = self.layers[k];
        let start = self.offsets[k] + l.in_width * l.out_width;
        &self.params[start..start + l.out_width]
    }

    /// Plain evaluation; returns the first output.
    pub fn forward(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.input_width());
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            let w = self.layer_weights(k);
            let b = self.layer_bias(k);
            z.clear();
            for o in 0..l.out_width {
                let row = &w[o * l.in_width..(o + 1) * l.in_width];
                let s: f64 = row.iter().zip(&a).map(|(w, x)| w * x).sum();
                z.push(l.activation.apply(s + b[o]));
            }
            std::mem::swap(&mut a, &mut z);
        }
        a[0]
    }

    /// Evaluation carrying first and pure second input derivatives.
    pub fn forward_dual<const K: usize>(&self, x: &[Dual2<K>]) -> Dual2<K> {
        let mut cache = JetCache::default();
        self.forward_dual_cached(x, &mut cache)
    }

    /// As [`Mlp::forward_dual`], recording what [`Mlp::backward_dual`] needs.
    pub fn forward_dual_cached<const K: usize>(
        &self,
        x: &[Dual2<K>],
        cache: &mut JetCache<K>,
    ) -> Dual2<K> {
        debug_assert_eq!(x.len(), self.input_width());
        let n = self.layers.len();
        cache.inputs.resize_with(n, Vec::new);
        cache.pre.resize_with(n, Vec::new);
        cache.inputs[0].clear();
        cache.inputs[0].extend_from_slice(x);
        let mut out = Dual2::constant(0.0);
        for (k, l) in self.layers.iter().enumerate() {
            let w = self.layer_weights(k);
            let b = self.layer_bias(k);
            let (head, tail) = cache.inputs.split_at_mut(k + 1);
            let a = &head[k];
            let z = &mut cache.pre[k];
            z.clear();
            for o in 0..l.out_width {
                let row = &w[o * l.in_width..(o + 1) * l.in_width];
                let mut acc = Dual2::constant(b[o]);
                for (wi, ai) in row.iter().zip(a) {
                    acc.axpy(*wi, ai);
                }
                z.push(acc);
            }
            let act = l.activation;
            let apply = |zo: &Dual2<K>| {
                let [f, f1, f2, _] = act.derivatives(zo.value);
                zo.chain(f, f1, f2)
            };
            if k + 1 < n {
                let next = &mut tail[0];
                next.clear();
                next.extend(z.iter().map(apply));
            } else {
                out = apply(&z[0]);
            }
        }
        out
    }

    /// Reverse sweep through a cached dual evaluation.
    ///
    /// `out_adj` holds d(loss)/d(output component) for the value and every
    /// derivative channel. Parameter adjoints are accumulated into `grad`; the
    /// input adjoints are returned when `want_input` is set (empty otherwise).
    pub fn backward_dual<const K: usize>(
        &self,
        cache: &JetCache<K>,
        out_adj: Dual2<K>,
        grad: &mut [f64],
        want_input: bool,
    ) -> Vec<Dual2<K>> {
        debug_assert_eq!(grad.len(), self.params.len());
        let n = self.layers.len();
        let mut h_adj = vec![out_adj];
        let mut z_adj: Vec<Dual2<K>> = Vec::new();
        for k in (0..n).rev() {
            let l = self.layers[k];
            let z = &cache.pre[k];
            let a = &cache.inputs[k];
            z_adj.clear();
            for (zo, ho) in z.iter().zip(&h_adj) {
                let [_, f1, f2, f3] = l.activation.derivatives(zo.value);
                let mut za = Dual2::constant(ho.value * f1);
                for c in 0..K {
                    let zd1 = zo.d1[c];
                    za.d2[c] = ho.d2[c] * f1;
                    za.d1[c] = ho.d1[c] * f1 + ho.d2[c] * 2.0 * f2 * zd1;
                    za.value += ho.d1[c] * f2 * zd1 + ho.d2[c] * (f3 * zd1 * zd1 + f2 * zo.d2[c]);
                }
                z_adj.push(za);
            }
            let off = self.offsets[k];
            let (gw, gb) = grad[off..off + l.out_width * (l.in_width + 1)].split_at_mut(l.in_width * l.out_width);
            for (o, za) in z_adj.iter().enumerate() {
                let grow = &mut gw[o * l.in_width..(o + 1) * l.in_width];
                for (g, ai) in grow.iter_mut().zip(a) {
                    let mut s = za.value * ai.value;
                    for c in 0..K {
                        s += za.d1[c] * ai.d1[c] + za.d2[c] * ai.d2[c];
                    }
                    *g += s;
                }
                gb[o] += za.value;
            }
            if k > 0 || want_input {
                let w = self.layer_weights(k);
                let mut a_adj = vec![Dual2::constant(0.0); l.in_width];
                for (o, za) in z_adj.iter().enumerate() {
                    let row = &w[o * l.in_width..(o + 1) * l.in_width];
                    for (aa, wi) in a_adj.iter_mut().zip(row) {
                        aa.axpy(*wi, za);
                    }
                }
                h_adj = a_adj;
            } else {
                h_adj.clear();
            }
        }
        h_adj
    }
}

/// Which surrogate a network plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Density û(x1, x2, t).
    U,
    /// Diffusivity D̂(û).
    D,
    /// Per-capita growth Ĝ(û).
    G,
}

impl Role {
    pub fn input_width(self) -> usize {
        match self {
            Role::U => 3,
            Role::D | Role::G => 1,
        }
    }

    pub fn default_hidden(self) -> [usize; 3] {
        match self {
            Role::U => [64, 64, 64],
            Role::D | Role::G => [4, 4, 4],
        }
    }

    pub fn output_activation(self) -> Activation {
        match self {
            Role::U | Role::D => Activation::Softplus,
            Role::G => Activation::Linear,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Role::U => "u",
            Role::D => "D",
            Role::G => "G",
        }
    }
}

/// A network tagged with its role; the role fixes input width and output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    role: Role,
    net: Mlp,
}

fn role_layers(role: Role, hidden: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut prev = role.input_width();
    for &w in hidden {
        layers.push(LayerSpec {
            in_width: prev,
            out_width: w,
            activation: Activation::Silu,
        });
        prev = w;
    }
    layers.push(LayerSpec {
        in_width: prev,
        out_width: 1,
        activation: role.output_activation(),
    });
    layers
}

impl NetworkParams {
    /// Default architecture: three SiLU hidden layers (64 wide for `u`, 4 for `D`/`G`).
    pub fn init(role: Role, seed: u64) -> Self {
        Self::with_hidden(role, &role.default_hidden(), seed).expect("default widths are valid")
    }

    pub fn with_hidden(role: Role, hidden: &[usize], seed: u64) -> Result<Self> {
        Ok(NetworkParams {
            role,
            net: Mlp::glorot(role_layers(role, hidden), seed)?,
        })
    }

    pub fn zeros(role: Role, hidden: &[usize]) -> Result<Self> {
        Ok(NetworkParams {
            role,
            net: Mlp::zeros(role_layers(role, hidden))?,
        })
    }

    pub fn from_mlp(role: Role, net: Mlp) -> Result<Self> {
        if net.input_width() != role.input_width() || net.output_width() != 1 {
            return Err(Error::InvalidInput(format!(
                "role {} expects {} -> 1 network, got {} -> {}",
                role.tag(),
                role.input_width(),
                net.input_width(),
                net.output_width()
            )));
        }
        if net.layers.last().map(|l| l.activation) != Some(role.output_activation()) {
            return Err(Error::InvalidInput(format!(
                "role {} requires {:?} output activation",
                role.tag(),
                role.output_activation()
            )));
        }
        Ok(NetworkParams { role, net })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.net.forward(x)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            role: self.role,
            layers: (0..self.net.layers.len())
                .map(|k| CheckpointLayer {
                    spec: self.net.layers[k],
                    weights: self.net.layer_weights(k).to_vec(),
                    bias: self.net.layer_bias(k).to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unknown checkpoint format `{}`", ck.format)));
        }
        let mut net = Mlp::zeros(ck.layers.iter().map(|l| l.spec).collect())?;
        let mut flat = Vec::with_capacity(net.n_params());
        for l in &ck.layers {
            if l.weights.len() != l.spec.in_width * l.spec.out_width || l.bias.len() != l.spec.out_width {
                return Err(Error::InvalidInput("checkpoint tensor shape mismatch".into()));
            }
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        net.params.copy_from_slice(&flat);
        Self::from_mlp(ck.role, net)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(r)?;
        Self::from_checkpoint(&ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "rd-binn-mlp/1";

/// JSON checkpoint layout: a format tag, the role, then one entry per layer with
/// its spec, row-major `out_width × in_width` weights and `out_width` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub role: Role,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    #[serde(flatten)]
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}
