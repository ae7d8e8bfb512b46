// SPDX-License-Identifier: Apache-2.0

//! Encoders, decoder, discrete pathway and the training losses.
//!
//! Every network is a dense tanh MLP on flattened images. Forward passes are
//! recorded on a [`Graph`] so the same code serves training (with
//! `backward`), read-only evaluation and finite-difference checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcore::{Array, Graph, NodeId, ParameterSet};
use crate::liegroup::{self, GeneratorBank};
use crate::rng::{self, StreamRng};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Parameter name of the `[d, n²]` generator bank.
pub const GENERATORS: &str = "lie.generators";
/// Parameter name of the `[K, n²]` discrete embedding table.
pub const EMBEDDING: &str = "emb.table";

/// Architecture sizes fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub pixels: usize,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub hidden: usize,
    pub group_hidden: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &ModelConfig, pixels: usize) -> Self {
        Self {
            pixels,
            d: cfg.d,
            n: cfg.n,
            k: cfg.k,
            hidden: cfg.hidden,
            group_hidden: cfg.group_hidden,
        }
    }

    pub fn latent(&self) -> usize {
        self.n * self.n
    }

    /// `(prefix, layer sizes)` of every MLP.
    fn networks(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (p, h, l) = (self.pixels, self.hidden, self.latent());
        vec![
            ("enc", vec![p, h, h, l]),
            ("grp", vec![l, self.group_hidden, 2 * self.d]),
            ("disc", vec![p, h, h, self.k]),
            ("dec", vec![l, h, h, p]),
            ("mi", vec![p, h, h, self.k]),
        ]
    }
}

/// Relaxed categorical sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteCode {
    pub logits: Vec<f64>,
    pub soft: Vec<f64>,
    pub hard: Vec<f64>,
}

/// `soft = softmax((logits + g)/τ)` with `g = −log(−log u)`; `hard` is the
/// one-hot argmax of `soft`.
pub fn gumbel_softmax(logits: &[f64], tau: f64, uniform: &[f64]) -> Result<DiscreteCode> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "Gumbel temperature {tau} must be > 0"
        )));
    }
    if uniform.len() != logits.len() {
        return Err(Error::dim("noise length differs from logits"));
    }
    if uniform.iter().any(|u| !(*u > 0.0 && *u < 1.0)) {
        return Err(Error::invalid("uniform noise must lie in (0, 1)"));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .zip(uniform)
        .map(|(l, u)| l + gumbel_from_uniform(*u))
        .collect();
    let soft = softmax_row(&perturbed, tau);
    let hard = one_hot(argmax(&soft), soft.len());
    Ok(DiscreteCode {
        logits: logits.to_vec(),
        soft,
        hard,
    })
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

pub fn softmax_row(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let e: Vec<f64> = x.iter().map(|v| ((v - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(i: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

/// Draws `count` rows of Gumbel noise `−log(−log u)` with `u ∈ (0,1)`.
pub fn sample_gumbel(rng: &mut StreamRng, rows: usize, k: usize) -> Array {
    let data = (0..rows * k)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
            gumbel_from_uniform(u)
        })
        .collect();
    Array::new(vec![rows, k], data).expect("shape")
}

pub fn sample_normal(rng: &mut StreamRng, rows: usize, cols: usize) -> Array {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Array::new(vec![rows, cols], data).expect("shape")
}

/// All trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParameterSet,
}

/// Outputs of the encoders for one batch.
#[derive(Clone, Copy, Debug)]
pub struct EncodedNodes {
    pub zhat: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    pub logits: NodeId,
}

#[derive(Clone, Debug)]
pub struct Encoding {
    pub zhat: Array,
    pub mu: Array,
    pub logvar: Array,
    pub logits: Array,
}

/// Training forward pass nodes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub enc: EncodedNodes,
    pub t: NodeId,
    /// `vec(G(t))`, `[b, n²]`.
    pub z: NodeId,
    pub soft: NodeId,
    /// Embedding `e_s`, `[b, n²]`.
    pub embed: NodeId,
    /// `s' = vec(G(t)·mat(e_s))`.
    pub s_prime: NodeId,
    pub dec_logits: NodeId,
    pub x_rec: NodeId,
}

/// Scalar loss nodes. `total` is the minimised objective; the others are
/// its weighted components (`mi` and `usage` unweighted).
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub consistency: NodeId,
    pub kl: NodeId,
    pub mi: NodeId,
    pub usage: NodeId,
}

/// Per-batch noise for one training forward pass.
#[derive(Clone, Debug)]
pub struct BatchNoise {
    /// `ε ~ N(0, I)`, `[b, d]`.
    pub eps: Array,
    /// Gumbel perturbations `−log(−log u)`, `[b, K]`.
    pub gumbel: Array,
}

impl Model {
    /// Glorot-uniform weights, zero biases, `N(0, 1)` embeddings and
    /// `N(0, init_scale²)` generators, all from the `init` stream of `seed`.
    pub fn init(cfg: &ModelConfig, pixels: usize, seed: u64) -> Result<Self> {
        let dims = ModelDims::from_config(cfg, pixels);
        let mut rng = rng::stream(seed, rng::INIT, 0);
        let mut params = ParameterSet::new();
        for (prefix, sizes) in dims.networks() {
            for (layer, w) in sizes.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                params.insert(
                    &layer_name(prefix, layer, "w"),
                    Array::new(vec![fan_in, fan_out], data)?,
                );
                params.insert(&layer_name(prefix, layer, "b"), Array::zeros(&[fan_out]));
            }
        }
        let emb = (0..dims.k * dims.latent())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        params.insert(EMBEDDING, Array::new(vec![dims.k, dims.latent()], emb)?);
        let bank = GeneratorBank::init(dims.d, dims.n, cfg.init_scale, seed)?;
        params.insert(GENERATORS, bank.to_array());
        Ok(Self { dims, params })
    }

    pub fn generator_bank(&self) -> Result<GeneratorBank> {
        GeneratorBank::from_array(self.param(GENERATORS)?)
    }

    pub fn set_generator_bank(&mut self, bank: &GeneratorBank) -> Result<()> {
        if bank.d() != self.dims.d || bank.n() != self.dims.n {
            return Err(Error::dim("generator bank does not match model dims"));
        }
        *self.params.get_mut(GENERATORS).expect("generators") = bank.to_array();
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    /// Zeroes the weights and bias of the output layer of network `prefix`.
    pub fn zero_output_layer(&mut self, prefix: &str) {
        let last = self
            .dims
            .networks()
            .into_iter()
            .find(|(p, _)| *p == prefix)
            .map(|(_, s)| s.len() - 2)
            .expect("known network");
        for kind in ["w", "b"] {
            if let Some(a) = self.params.get_mut(&layer_name(prefix, last, kind)) {
                a.data_mut().fill(0.0);
            }
        }
    }

    fn leaf(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        self.params.leaf(g, name)
    }

    fn mlp(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let layers = self
            .dims
            .networks()
            .into_iter()
            .find(|(p, _)| *p == prefix)
            .map(|(_, s)| s.len() - 1)
            .expect("known network");
        let mut h = x;
        for layer in 0..layers {
            let w = self.leaf(g, &layer_name(prefix, layer, "w"))?;
            let b = self.leaf(g, &layer_name(prefix, layer, "b"))?;
            h = g.affine(h, w, b)?;
            if layer + 1 < layers {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    fn check_images(&self, g: &Graph, x: NodeId) -> Result<()> {
        match g.value(x).shape() {
            [_, p] if *p == self.dims.pixels => Ok(()),
            s => Err(Error::dim(format!(
                "images of shape {s:?}, model expects [batch, {}]",
                self.dims.pixels
            ))),
        }
    }

    /// `ẑ = E_img(x)`, `(μ, log σ²) = E_group(ẑ)`, discrete logits.
    pub fn encode_on_graph(&self, g: &mut Graph, x: NodeId) -> Result<EncodedNodes> {
        self.check_images(g, x)?;
        let zhat = self.mlp(g, "enc", x)?;
        let stats = self.mlp(g, "grp", zhat)?;
        let d = self.dims.d;
        let mu = g.slice(stats, 1, 0, d)?;
        let raw_logvar = g.slice(stats, 1, d, d)?;
        let logvar = g.clamp(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        let logits = self.mlp(g, "disc", x)?;
        Ok(EncodedNodes {
            zhat,
            mu,
            logvar,
            logits,
        })
    }

    /// `t = μ + exp(½ log σ²) ⊙ ε`.
    pub fn reparameterize_on_graph(
        &self,
        g: &mut Graph,
        mu: NodeId,
        logvar: NodeId,
        eps: NodeId,
    ) -> Result<NodeId> {
        let half = g.scale(logvar, 0.5)?;
        let sigma = g.exp(half)?;
        let noise = g.mul(sigma, eps)?;
        g.add(mu, noise)
    }

    /// Soft Gumbel-Softmax code from logits and pre-drawn Gumbel noise.
    pub fn gumbel_on_graph(
        &self,
        g: &mut Graph,
        logits: NodeId,
        gumbel: NodeId,
        tau: f64,
    ) -> Result<NodeId> {
        let perturbed = g.add(logits, gumbel)?;
        g.softmax(perturbed, tau)
    }

    /// `e_s = code · Emb`, `[b, n²]`.
    pub fn embed_on_graph(&self, g: &mut Graph, code: NodeId) -> Result<NodeId> {
        let table = self.leaf(g, EMBEDDING)?;
        g.matmul(code, table)
    }

    /// Left action `vec(G · mat(e))` for batched `G [b,n,n]` and `e [b,n²]`.
    pub fn act_on_graph(&self, g: &mut Graph, group: NodeId, embed: NodeId) -> Result<NodeId> {
        let n = self.dims.n;
        let b = g.value(embed).shape()[0];
        let e = g.reshape(embed, &[b, n, n])?;
        let s = g.matmul(group, e)?;
        g.reshape(s, &[b, n * n])
    }

    pub fn group_on_graph(&self, g: &mut Graph, t: NodeId) -> Result<NodeId> {
        let gens = self.leaf(g, GENERATORS)?;
        liegroup::group_on_graph(g, t, gens, self.dims.n)
    }

    /// Decoder logits; apply `sigmoid` for images.
    pub fn decode_logits_on_graph(&self, g: &mut Graph, s_prime: NodeId) -> Result<NodeId> {
        match g.value(s_prime).shape() {
            [_, l] if *l == self.dims.latent() => {}
            s => {
                return Err(Error::dim(format!(
                    "decoder input of shape {s:?}, expected [batch, {}]",
                    self.dims.latent()
                )))
            }
        }
        self.mlp(g, "dec", s_prime)
    }

    /// MI predictor logits `q_ψ(s | x̂)`.
    pub fn predictor_on_graph(&self, g: &mut Graph, images: NodeId) -> Result<NodeId> {
        self.mlp(g, "mi", images)
    }

    /// Training forward pass with sampled `t` and soft discrete code.
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        noise: &BatchNoise,
        tau: f64,
    ) -> Result<ForwardNodes> {
        let enc = self.encode_on_graph(g, x)?;
        let eps = g.input(noise.eps.clone());
        let t = self.reparameterize_on_graph(g, enc.mu, enc.logvar, eps)?;
        let gumbel = g.input(noise.gumbel.clone());
        let soft = self.gumbel_on_graph(g, enc.logits, gumbel, tau)?;
        self.forward_from_codes(g, enc, t, soft)
    }

    /// Rest of the forward pass once `t` and the discrete code are fixed.
    pub fn forward_from_codes(
        &self,
        g: &mut Graph,
        enc: EncodedNodes,
        t: NodeId,
        code: NodeId,
    ) -> Result<ForwardNodes> {
        let group = self.group_on_graph(g, t)?;
        let b = g.value(t).shape()[0];
        let z = g.reshape(group, &[b, self.dims.latent()])?;
        let embed = self.embed_on_graph(g, code)?;
        let s_prime = self.act_on_graph(g, group, embed)?;
        let dec_logits = self.decode_logits_on_graph(g, s_prime)?;
        let x_rec = g.sigmoid(dec_logits)?;
        Ok(ForwardNodes {
            enc,
            t,
            z,
            soft: code,
            embed,
            s_prime,
            dec_logits,
            x_rec,
        })
    }

    /// Unconstrained objective
    /// `recon + α·consistency + β·KL + λ_MI·L_MI + λ_usage·L_usage`.
    pub fn phase1_loss_on_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        fwd: &ForwardNodes,
        loss: &LossConfig,
        mi_grad_into_decoder: bool,
    ) -> Result<LossNodes> {
        let (recon, consistency, kl) = vae_loss_on_graph(
            g,
            x,
            fwd.dec_logits,
            fwd.z,
            fwd.enc.zhat,
            fwd.enc.mu,
            fwd.enc.logvar,
            loss.alpha,
            loss.beta,
        )?;
        let pred_in = if mi_grad_into_decoder {
            fwd.x_rec
        } else {
            g.stop_gradient(fwd.x_rec)?
        };
        let pred = self.predictor_on_graph(g, pred_in)?;
        let mi = mi_loss_on_graph(g, pred, fwd.soft)?;
        let usage = usage_loss_on_graph(g, fwd.soft)?;
        let mut total = g.add(recon, consistency)?;
        total = g.add(total, kl)?;
        let mi_w = g.scale(mi, loss.lambda_mi)?;
        total = g.add(total, mi_w)?;
        let usage_w = g.scale(usage, loss.lambda_usage)?;
        total = g.add(total, usage_w)?;
        Ok(LossNodes {
            total,
            recon,
            consistency,
            kl,
            mi,
            usage,
        })
    }

    /// Deterministic encoding of a batch `[b, pixels]`.
    pub fn encode(&self, x: &Array) -> Result<Encoding> {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let enc = self.encode_on_graph(&mut g, xn)?;
        Ok(Encoding {
            zhat: g.value(enc.zhat).clone(),
            mu: g.value(enc.mu).clone(),
            logvar: g.value(enc.logvar).clone(),
            logits: g.value(enc.logits).clone(),
        })
    }

    /// `D_img(s')` for a batch `[b, n²]`; entries in (0, 1).
    pub fn decode(&self, s_prime: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let s = g.input(s_prime.clone());
        let logits = self.decode_logits_on_graph(&mut g, s)?;
        let out = g.sigmoid(logits)?;
        Ok(g.value(out).clone())
    }

    /// Decoder logits for a batch `[b, n²]`.
    pub fn decode_logits(&self, s_prime: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let s = g.input(s_prime.clone());
        let logits = self.decode_logits_on_graph(&mut g, s)?;
        Ok(g.value(logits).clone())
    }

    /// Evaluation-mode pass: `t = μ`, hard discrete code. Returns decoder
    /// logits and the encoding.
    pub fn reconstruct_eval(&self, x: &Array) -> Result<(Array, Encoding)> {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let enc = self.encode_on_graph(&mut g, xn)?;
        let logits = g.value(enc.logits);
        let b = logits.rows();
        let hard: Vec<f64> = (0..b)
            .flat_map(|r| one_hot(argmax(logits.row(r)), self.dims.k))
            .collect();
        let code = g.input(Array::new(vec![b, self.dims.k], hard)?);
        let fwd = self.forward_from_codes(&mut g, enc, enc.mu, code)?;
        let encoding = Encoding {
            zhat: g.value(enc.zhat).clone(),
            mu: g.value(enc.mu).clone(),
            logvar: g.value(enc.logvar).clone(),
            logits: g.value(enc.logits).clone(),
        };
        Ok((g.value(fwd.dec_logits).clone(), encoding))
    }
}

fn layer_name(prefix: &str, layer: usize, kind: &str) -> String {
    format!("{prefix}.l{layer}.{kind}")
}

/// Rows of `x` as a `[b, pixels]` batch.
pub fn batch_rows(x: &Array, rows: &[usize]) -> Array {
    let cols = x.last_dim();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(x.row(*r));
    }
    Array::new(vec![rows.len(), cols], data).expect("shape")
}

/// Returns `(recon, α·consistency, β·KL)`:
/// * recon: pixel BCE summed per image, averaged over the batch;
/// * consistency: mean squared error between `z = vec(G(t))` and `ẑ`;
/// * KL: `Σ_j ½(μ² + σ² − 1 − log σ²)` averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss_on_graph(
    g: &mut Graph,
    x: NodeId,
    dec_logits: NodeId,
    z: NodeId,
    zhat: NodeId,
    mu: NodeId,
    logvar: NodeId,
    alpha: f64,
    beta: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    let b = g.value(x).shape()[0] as f64;
    if g.value(dec_logits).shape() != g.value(x).shape() {
        return Err(Error::dim("reconstruction and target shapes differ"));
    }
    if g.value(z).shape() != g.value(zhat).shape() {
        return Err(Error::dim("z and ẑ shapes differ"));
    }
    let bce = g.bce_with_logits(dec_logits, x)?;
    let recon = g.scale(bce, 1.0 / b)?;

    let diff = g.sub(z, zhat)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    let consistency = g.scale(mse, alpha)?;

    let d = g.value(mu).last_dim() as f64;
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let s = g.add(mu2, var)?;
    let s = g.sub(s, logvar)?;
    let total = g.sum(s)?;
    // ½(Σ(μ² + σ² − log σ²) / b − d)
    let per_sample = g.scale(total, 0.5 / b)?;
    let offset = g.constant(Array::scalar(-0.5 * d));
    let kl = g.add(per_sample, offset)?;
    let kl = g.scale(kl, beta)?;
    Ok((recon, consistency, kl))
}

/// `−mean_b Σ_s q(s|x) log q_ψ(s|x̂)`.
pub fn mi_loss_on_graph(g: &mut Graph, predictor_logits: NodeId, soft: NodeId) -> Result<NodeId> {
    let b = g.value(soft).shape()[0] as f64;
    let logq = g.log_softmax(predictor_logits)?;
    let prod = g.mul(logq, soft)?;
    let total = g.sum(prod)?;
    g.scale(total, -1.0 / b)
}

/// `log K − H(p̄)` with `p̄` the batch mean of the soft codes.
pub fn usage_loss_on_graph(g: &mut Graph, soft: NodeId) -> Result<NodeId> {
    let shape = g.value(soft).shape().to_vec();
    let [b, k] = shape[..] else {
        return Err(Error::dim(format!("soft codes of shape {shape:?}")));
    };
    let ones = g.constant(Array::filled(&[1, b], 1.0 / b as f64));
    let pbar = g.matmul(ones, soft)?;
    let safe = g.clamp(pbar, 1e-300, 1.0)?;
    let logp = g.log(safe)?;
    let plogp = g.mul(pbar, logp)?;
    let neg_entropy = g.sum(plogp)?;
    let logk = g.constant(Array::scalar((k as f64).ln()));
    g.add(neg_entropy, logk)
}
