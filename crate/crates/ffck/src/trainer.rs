//! Supervised training of the toy model: corpus assembly, hand-rolled
//! reverse-mode gradients for every parameter family, AdamW with linear
//! warmup and cosine decay, and behavioral evaluation.
//!
//! The loss is next-token cross-entropy at the answer position only. For
//! competing prompts the target is the highest-ranked answer *not* in the
//! forbidden token's alias class, which operationalizes the "recall
//! truthfully, but never say the forbidden word" instruction as plain
//! supervision.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{render_tokens, render_triple, triple_probabilities, FactWorld, PromptKind, PromptTriple};
use crate::error::{FfckError, Result};
use crate::model::forward::{attention_row, forward, score_scale, silu};
use crate::model::{ModelBundle, ModelConfig};
use crate::numerics::{log_odds, rms_inverse, rms_normalize_unchecked, rope_angle, rope_apply_unchecked, softmax_unchecked};
use crate::vocab;

/// Training hyperparameters. Serializable as a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of training examples whose forbidden word equals the correct
    /// answer.
    pub competing_fraction: f64,
}

impl TrainConfig {
    /// Default schedule for the toy model.
    pub fn default_toy(seed: u64) -> Self {
        TrainConfig {
            steps: 800,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 50,
            weight_decay: 0.01,
            seed,
            competing_fraction: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FfckError::Input("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FfckError::Input(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.competing_fraction) {
            return Err(FfckError::Input(format!(
                "competing_fraction {} outside [0, 1]",
                self.competing_fraction
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(FfckError::Input(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(s)
            .map_err(|e| FfckError::Format(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One supervised example: a rendered prompt and its target answer token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTarget {
    pub tokens: Vec<u32>,
    pub target: u32,
    pub competing: bool,
}

/// Infinite deterministic stream of training examples.
pub struct CorpusStream<'a> {
    world: &'a FactWorld,
    fact_ids: Vec<usize>,
    fillers: Vec<u32>,
    competing_fraction: f64,
    rng: ChaCha8Rng,
}

impl<'a> Iterator for CorpusStream<'a> {
    type Item = TrainTarget;

    fn next(&mut self) -> Option<TrainTarget> {
        let fact_id = self.fact_ids[self.rng.gen_range(0..self.fact_ids.len())];
        let fact = &self.world.facts[fact_id];
        let competing = self.rng.gen::<f64>() < self.competing_fraction;
        let (forbidden, target) = if competing {
            // forbid the correct answer; supervise the next-best answer
            // outside the forbidden class
            let forbidden = fact.answers[0];
            let fc = vocab::answer_class(forbidden);
            let target = *fact
                .answers
                .iter()
                .find(|&&a| vocab::answer_class(a) != fc)
                .expect("facts carry answers in more than one class");
            (forbidden, target)
        } else if self.rng.gen::<bool>() {
            (fact.answers[1], fact.answers[0])
        } else {
            let f = self.fillers[self.rng.gen_range(0..self.fillers.len())];
            (f, fact.answers[0])
        };
        Some(TrainTarget {
            tokens: render_tokens(fact.subject, fact.relation, forbidden, None),
            target,
            competing,
        })
    }
}

/// Example stream over every fact of the world, deterministic in
/// `config.seed`.
pub fn build_corpus<'a>(world: &'a FactWorld, config: &TrainConfig) -> Result<CorpusStream<'a>> {
    build_corpus_over(world, (0..world.facts.len()).collect(), config)
}

/// Example stream restricted to a fact subset (for held-out splits).
pub fn build_corpus_over<'a>(
    world: &'a FactWorld,
    fact_ids: Vec<usize>,
    config: &TrainConfig,
) -> Result<CorpusStream<'a>> {
    config.validate()?;
    if fact_ids.is_empty() {
        return Err(FfckError::Input("corpus needs at least one fact".into()));
    }
    for &id in &fact_ids {
        world.fact(id)?;
    }
    let fillers = world.filler_tokens();
    if fillers.is_empty() {
        return Err(FfckError::Input("world has no filler tokens".into()));
    }
    Ok(CorpusStream {
        world,
        fact_ids,
        fillers,
        competing_fraction: config.competing_fraction,
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x434f_5250),
    })
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct HeadGrads {
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    w_v: Vec<f64>,
    w_o: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerGrads {
    heads: Vec<HeadGrads>,
    attn_gain: Vec<f64>,
    mlp_gain: Vec<f64>,
    w_gate: Vec<f64>,
    w_up: Vec<f64>,
    w_down: Vec<f64>,
}

/// Gradients for every tensor of a [`ModelBundle`], in canonical tensor
/// order.
#[derive(Debug, Clone)]
pub struct Grads {
    embedding: Vec<f64>,
    layers: Vec<LayerGrads>,
    final_gain: Vec<f64>,
    unembed: Vec<f64>,
}

impl Grads {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, dh, dm) = (config.d_model, config.d_head, config.d_mlp);
        Grads {
            embedding: vec![0.0; config.vocab_size * d],
            layers: (0..config.n_layers)
                .map(|_| LayerGrads {
                    heads: (0..config.n_heads)
                        .map(|_| HeadGrads {
                            w_q: vec![0.0; dh * d],
                            w_k: vec![0.0; dh * d],
                            w_v: vec![0.0; dh * d],
                            w_o: vec![0.0; d * dh],
                        })
                        .collect(),
                    attn_gain: vec![0.0; d],
                    mlp_gain: vec![0.0; d],
                    w_gate: vec![0.0; dm * d],
                    w_up: vec![0.0; dm * d],
                    w_down: vec![0.0; d * dm],
                })
                .collect(),
            final_gain: vec![0.0; d],
            unembed: vec![0.0; config.vocab_size * d],
        }
    }

    /// Gradient slices in canonical tensor order (matching
    /// [`ModelBundle::tensors`]), for external finite-difference checks.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embedding];
        for layer in &self.layers {
            for head in &layer.heads {
                out.push(&head.w_q);
                out.push(&head.w_k);
                out.push(&head.w_v);
                out.push(&head.w_o);
            }
            out.push(&layer.attn_gain);
            out.push(&layer.mlp_gain);
            out.push(&layer.w_gate);
            out.push(&layer.w_up);
            out.push(&layer.w_down);
        }
        out.push(&self.final_gain);
        out.push(&self.unembed);
        out
    }

    /// Mutable tensor views in canonical order (matching
    /// [`ModelBundle::tensors`]).
    fn flat_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.embedding];
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.w_q);
                out.push(&mut head.w_k);
                out.push(&mut head.w_v);
                out.push(&mut head.w_o);
            }
            out.push(&mut layer.attn_gain);
            out.push(&mut layer.mlp_gain);
            out.push(&mut layer.w_gate);
            out.push(&mut layer.w_up);
            out.push(&mut layer.w_down);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.unembed);
        out
    }

    fn add(&mut self, other: &mut Grads) {
        for (a, b) in self.flat_mut().into_iter().zip(other.flat_mut()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.flat_mut() {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Mutable parameter views of a bundle in canonical order, with a decoupled
/// weight-decay flag (norm gains are not decayed).
fn param_views(m: &mut ModelBundle) -> Vec<(&mut [f64], bool)> {
    let mut out: Vec<(&mut [f64], bool)> = vec![(m.embedding.as_mut_slice(), true)];
    for layer in m.layers.iter_mut() {
        for head in layer.heads.iter_mut() {
            out.push((head.w_q.as_mut_slice(), true));
            out.push((head.w_k.as_mut_slice(), true));
            out.push((head.w_v.as_mut_slice(), true));
            out.push((head.w_o.as_mut_slice(), true));
        }
        out.push((layer.attn_gain.as_mut_slice(), false));
        out.push((layer.mlp_gain.as_mut_slice(), false));
        out.push((layer.w_gate.as_mut_slice(), true));
        out.push((layer.w_up.as_mut_slice(), true));
        out.push((layer.w_down.as_mut_slice(), true));
    }
    out.push((m.final_gain.as_mut_slice(), false));
    out.push((m.unembed.as_mut_slice(), true));
    out
}

/// d silu(x) / dx = sigmoid(x) (1 + x (1 - sigmoid(x)))
fn dsilu(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Inverse rotary rotation (rotate every pair by the negative angle).
fn rope_unapply(x: &[f64], position: usize) -> Vec<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity(d);
    for pair in 0..d / 2 {
        let theta = rope_angle(position, pair, d);
        let (sin, cos) = theta.sin_cos();
        let a = x[2 * pair];
        let b = x[2 * pair + 1];
        out.push(a * cos + b * sin);
        out.push(-a * sin + b * cos);
    }
    out
}

/// Backward through `n = gain * x * rms_inverse(x)`: accumulates the gain
/// gradient and returns dL/dx given dL/dn.
fn rms_backward(dn: &[f64], x: &[f64], gain: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let inv = rms_inverse(x);
    let d = x.len() as f64;
    let mut s = 0.0;
    for i in 0..x.len() {
        s += dn[i] * gain[i] * x[i];
        dgain[i] += dn[i] * x[i] * inv;
    }
    let c = inv * inv * inv * s / d;
    x.iter()
        .enumerate()
        .map(|(i, &xi)| inv * gain[i] * dn[i] - c * xi)
        .collect()
}

/// g (rows x cols, row-major) += dout (rows) outer xin (cols)
fn acc_outer(g: &mut [f64], dout: &[f64], xin: &[f64]) {
    for (r, &dr) in dout.iter().enumerate() {
        let row = &mut g[r * xin.len()..(r + 1) * xin.len()];
        for (gv, &xv) in row.iter_mut().zip(xin.iter()) {
            *gv += dr * xv;
        }
    }
}

struct HeadCache {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
}

struct LayerCache {
    x: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    heads: Vec<HeadCache>,
    y: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    gate: Vec<Vec<f64>>,
    up: Vec<Vec<f64>>,
}

/// Cross-entropy at the last position plus full parameter gradients,
/// accumulated into `grads`.
pub fn loss_and_grad(model: &ModelBundle, example: &TrainTarget, grads: &mut Grads) -> Result<f64> {
    let config = model.config();
    let tokens = &example.tokens;
    if tokens.is_empty() {
        return Err(FfckError::Input("empty training example".into()));
    }
    if example.target as usize >= config.vocab_size {
        return Err(FfckError::Input(format!(
            "target token {} out of vocab",
            example.target
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(FfckError::Input(format!("token id {bad} out of vocab")));
    }
    let seq = tokens.len();
    let d = config.d_model;
    let last = seq - 1;
    let scale = score_scale(config.d_head);

    // --- forward with caches ---
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| model.embedding.row(t as usize).to_vec())
        .collect();
    let mut caches: Vec<LayerCache> = Vec::with_capacity(config.n_layers);
    for layer in &model.layers {
        let x = h.clone();
        let n: Vec<Vec<f64>> = x
            .iter()
            .map(|r| rms_normalize_unchecked(r, layer.attn_gain.as_slice()))
            .collect();
        let mut head_caches = Vec::with_capacity(config.n_heads);
        for head in &layer.heads {
            let q: Vec<Vec<f64>> = (0..seq)
                .map(|p| rope_apply_unchecked(&head.w_q.matvec(&n[p]), p))
                .collect();
            let k: Vec<Vec<f64>> = (0..seq)
                .map(|p| rope_apply_unchecked(&head.w_k.matvec(&n[p]), p))
                .collect();
            let v: Vec<Vec<f64>> = (0..seq).map(|p| head.w_v.matvec(&n[p])).collect();
            let mut a = Vec::with_capacity(seq);
            let mut z = Vec::with_capacity(seq);
            for p in 0..seq {
                let row = attention_row(&q[p], &k, p, scale);
                let mut zp = vec![0.0; config.d_head];
                for (j, w) in row.iter().enumerate().take(p + 1) {
                    for (zd, vd) in zp.iter_mut().zip(v[j].iter()) {
                        *zd += w * vd;
                    }
                }
                let out = head.w_o.matvec(&zp);
                for (hd, od) in h[p].iter_mut().zip(out.iter()) {
                    *hd += od;
                }
                a.push(row);
                z.push(zp);
            }
            head_caches.push(HeadCache { q, k, v, a, z });
        }
        let y = h.clone();
        let m: Vec<Vec<f64>> = y
            .iter()
            .map(|r| rms_normalize_unchecked(r, layer.mlp_gain.as_slice()))
            .collect();
        let gate: Vec<Vec<f64>> = m.iter().map(|r| layer.w_gate.matvec(r)).collect();
        let up: Vec<Vec<f64>> = m.iter().map(|r| layer.w_up.matvec(r)).collect();
        for p in 0..seq {
            let act: Vec<f64> = gate[p]
                .iter()
                .zip(up[p].iter())
                .map(|(g, u)| silu(*g) * u)
                .collect();
            let out = layer.w_down.matvec(&act);
            for (hd, od) in h[p].iter_mut().zip(out.iter()) {
                *hd += od;
            }
        }
        caches.push(LayerCache {
            x,
            n,
            heads: head_caches,
            y,
            m,
            gate,
            up,
        });
    }
    let fin = rms_normalize_unchecked(&h[last], model.final_gain.as_slice());
    let logits = model.unembed.matvec(&fin);

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[example.target as usize];

    // --- backward ---
    let probs = softmax_unchecked(&logits);
    let mut dlogits = probs;
    dlogits[example.target as usize] -= 1.0;

    acc_outer(&mut grads.unembed, &dlogits, &fin);
    let dfin = model.unembed.matvec_t(&dlogits);
    let mut dh: Vec<Vec<f64>> = vec![vec![0.0; d]; seq];
    dh[last] = rms_backward(
        &dfin,
        &h[last],
        model.final_gain.as_slice(),
        &mut grads.final_gain,
    );

    for (layer_idx, (layer, cache)) in model.layers.iter().zip(caches.iter()).enumerate().rev() {
        let lg = &mut grads.layers[layer_idx];
        // MLP block
        let mut dy: Vec<Vec<f64>> = Vec::with_capacity(seq);
        for p in 0..seq {
            let act: Vec<f64> = cache.gate[p]
                .iter()
                .zip(cache.up[p].iter())
                .map(|(g, u)| silu(*g) * u)
                .collect();
            acc_outer(&mut lg.w_down, &dh[p], &act);
            let dact = layer.w_down.matvec_t(&dh[p]);
            let dgate: Vec<f64> = dact
                .iter()
                .zip(cache.gate[p].iter().zip(cache.up[p].iter()))
                .map(|(da, (g, u))| da * u * dsilu(*g))
                .collect();
            let dup: Vec<f64> = dact
                .iter()
                .zip(cache.gate[p].iter())
                .map(|(da, g)| da * silu(*g))
                .collect();
            acc_outer(&mut lg.w_gate, &dgate, &cache.m[p]);
            acc_outer(&mut lg.w_up, &dup, &cache.m[p]);
            let mut dm = layer.w_gate.matvec_t(&dgate);
            for (a, b) in dm.iter_mut().zip(layer.w_up.matvec_t(&dup)) {
                *a += b;
            }
            let mut dyp = rms_backward(&dm, &cache.y[p], layer.mlp_gain.as_slice(), &mut lg.mlp_gain);
            for (a, b) in dyp.iter_mut().zip(dh[p].iter()) {
                *a += b;
            }
            dy.push(dyp);
        }
        // attention block
        let mut dn: Vec<Vec<f64>> = vec![vec![0.0; d]; seq];
        for (head_idx, (head, hc)) in layer.heads.iter().zip(cache.heads.iter()).enumerate() {
            let hg = &mut lg.heads[head_idx];
            let mut dq_roped: Vec<Vec<f64>> = vec![vec![0.0; config.d_head]; seq];
            let mut dk_roped: Vec<Vec<f64>> = vec![vec![0.0; config.d_head]; seq];
            let mut dv: Vec<Vec<f64>> = vec![vec![0.0; config.d_head]; seq];
            for p in 0..seq {
                acc_outer(&mut hg.w_o, &dy[p], &hc.z[p]);
                let dz = head.w_o.matvec_t(&dy[p]);
                let a = &hc.a[p];
                let da: Vec<f64> = (0..=p)
                    .map(|j| dz.iter().zip(hc.v[j].iter()).map(|(x, y)| x * y).sum())
                    .collect();
                let mean: f64 = (0..=p).map(|j| a[j] * da[j]).sum();
                for j in 0..=p {
                    let ds = a[j] * (da[j] - mean);
                    for i in 0..config.d_head {
                        dq_roped[p][i] += scale * ds * hc.k[j][i];
                        dk_roped[j][i] += scale * ds * hc.q[p][i];
                    }
                    for (dvd, dzd) in dv[j].iter_mut().zip(dz.iter()) {
                        *dvd += a[j] * dzd;
                    }
                }
            }
            for p in 0..seq {
                let dq = rope_unapply(&dq_roped[p], p);
                let dk = rope_unapply(&dk_roped[p], p);
                acc_outer(&mut hg.w_q, &dq, &cache.n[p]);
                acc_outer(&mut hg.w_k, &dk, &cache.n[p]);
                acc_outer(&mut hg.w_v, &dv[p], &cache.n[p]);
                let dnp = &mut dn[p];
                for (a, b) in dnp.iter_mut().zip(head.w_q.matvec_t(&dq)) {
                    *a += b;
                }
                for (a, b) in dnp.iter_mut().zip(head.w_k.matvec_t(&dk)) {
                    *a += b;
                }
                for (a, b) in dnp.iter_mut().zip(head.w_v.matvec_t(&dv[p])) {
                    *a += b;
                }
            }
        }
        for p in 0..seq {
            let mut dx = rms_backward(&dn[p], &cache.x[p], layer.attn_gain.as_slice(), &mut lg.attn_gain);
            for (a, b) in dx.iter_mut().zip(dy[p].iter()) {
                *a += b;
            }
            dh[p] = dx;
        }
    }
    for (p, &t) in tokens.iter().enumerate() {
        let row = &mut grads.embedding[t as usize * d..(t as usize + 1) * d];
        for (g, v) in row.iter_mut().zip(dh[p].iter()) {
            *g += v;
        }
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// optimizer and training loop
// ---------------------------------------------------------------------------

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    fn new(params: &[(&mut [f64], bool)]) -> Self {
        AdamW {
            m: params.iter().map(|(p, _)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(p, _)| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [(&mut [f64], bool)], grads: &mut Grads, lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let gs = grads.flat_mut();
        for (ti, (p, decay)) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[ti], &mut self.v[ti], &gs[ti]);
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut upd = lr * mhat / (vhat.sqrt() + ADAM_EPS);
                if *decay {
                    upd += lr * wd * p[i];
                }
                p[i] -= upd;
            }
        }
    }
}

/// Learning rate at `step`: linear warmup, then cosine decay to zero.
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    if step < config.warmup_steps {
        return config.learning_rate * (step + 1) as f64 / config.warmup_steps as f64;
    }
    let tail = (config.steps - config.warmup_steps).max(1) as f64;
    let frac = (step - config.warmup_steps) as f64 / tail;
    config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One loss-curve sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Fixed per-chunk example count; chunks are reduced in order, so gradient
/// accumulation is deterministic regardless of thread count.
const GRAD_CHUNK: usize = 4;

/// Train a copy of `model` on examples drawn from `corpus`. Returns the new
/// bundle and the loss curve; the input bundle is never mutated.
pub fn train(
    model: &ModelBundle,
    corpus: &mut dyn Iterator<Item = TrainTarget>,
    config: &TrainConfig,
) -> Result<(ModelBundle, Vec<LossPoint>)> {
    config.validate()?;
    if config.steps == 0 {
        return Ok((model.clone(), Vec::new()));
    }
    let mut work = model.clone();
    let mut opt = {
        let views = param_views(&mut work);
        AdamW::new(&views)
    };
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<TrainTarget> = corpus.take(config.batch_size).collect();
        if batch.len() < config.batch_size {
            return Err(FfckError::Input("corpus exhausted mid-batch".into()));
        }
        let chunk_results: Vec<Result<(f64, Grads)>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = Grads::zeros(work.config());
                let mut loss = 0.0;
                for ex in chunk {
                    loss += loss_and_grad(&work, ex, &mut g)?;
                }
                Ok((loss, g))
            })
            .collect();
        let mut grads = Grads::zeros(work.config());
        let mut loss_sum = 0.0;
        for r in chunk_results {
            let (l, mut g) = r?;
            loss_sum += l;
            grads.add(&mut g);
        }
        let loss = loss_sum / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(FfckError::Diverged(format!(
                "non-finite loss {loss} at step {step}"
            )));
        }
        grads.scale(1.0 / config.batch_size as f64);
        let lr = lr_at(config, step);
        let mut views = param_views(&mut work);
        opt.step(&mut views, &mut grads, lr, config.weight_decay);
        curve.push(LossPoint { step, loss, lr });
    }
    // rebuild to restore the f32-grid invariant of persisted weights
    let snapped = ModelBundle::new(
        work.config().clone(),
        work.embedding,
        work.layers,
        work.final_gain,
        work.unembed,
    )?;
    Ok((snapped, curve))
}

/// Loss curve as CSV: `step,loss,lr`.
pub fn write_loss_csv<W: Write>(w: &mut W, curve: &[LossPoint]) -> Result<()> {
    writeln!(w, "step,loss,lr").map_err(FfckError::from)?;
    for p in curve {
        writeln!(w, "{},{:.9},{:.9e}", p.step, p.loss, p.lr).map_err(FfckError::from)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Per-triple behavioral measurements on all three renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRow {
    pub fact_id: usize,
    /// Correct-class probability on the competing render.
    pub p_competing: f64,
    pub p_relevant_nc: f64,
    pub p_irrelevant_nc: f64,
    /// Competing log-odds minus the mean noncompeting log-odds (clamped).
    pub log_bayes_factor_nats: f64,
    /// Top answer on the competing render stayed out of the forbidden class.
    pub complied: bool,
    /// Top token was in the correct class on each noncompeting render.
    pub noncompeting_correct: [bool; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub rows: Vec<BehaviorRow>,
    pub mean_log_bayes_factor_nats: f64,
    pub noncompeting_accuracy: f64,
    pub compliance_rate: f64,
}

/// Behavioral report over `triples`: scatter data of competing vs
/// noncompeting correct-class probability, plus accuracy and compliance.
pub fn evaluate(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
) -> Result<BehaviorReport> {
    let rows: Vec<Result<BehaviorRow>> = triples
        .par_iter()
        .map(|triple| {
            let [p_c, p_r, p_i] = triple_probabilities(model, world, triple)?;
            let lo_c = log_odds(p_c).clamped_nats();
            let lo_nc = 0.5 * (log_odds(p_r).clamped_nats() + log_odds(p_i).clamped_nats());
            let correct_class = vocab::answer_class(triple.answer);
            let top_class = |kind: PromptKind| -> Result<Option<u32>> {
                let tokens = render_triple(world, triple, kind)?;
                let trace = forward(model, &tokens)?;
                let top = trace
                    .final_logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .expect("nonempty logits")
                    .0 as u32;
                Ok(vocab::answer_class(top))
            };
            let forbidden_class = vocab::answer_class(triple.competing_forbidden);
            let comp_top = top_class(PromptKind::Competing)?;
            Ok(BehaviorRow {
                fact_id: triple.fact_id,
                p_competing: p_c.value(),
                p_relevant_nc: p_r.value(),
                p_irrelevant_nc: p_i.value(),
                log_bayes_factor_nats: lo_c - lo_nc,
                complied: comp_top != forbidden_class || forbidden_class.is_none(),
                noncompeting_correct: [
                    top_class(PromptKind::RelevantNoncompeting)? == correct_class,
                    top_class(PromptKind::IrrelevantNoncompeting)? == correct_class,
                ],
            })
        })
        .collect();
    let rows: Vec<BehaviorRow> = rows.into_iter().collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let (mut lbf, mut acc, mut comp) = (0.0, 0.0, 0.0);
    for r in &rows {
        lbf += r.log_bayes_factor_nats;
        acc += (r.noncompeting_correct[0] as u32 + r.noncompeting_correct[1] as u32) as f64 / 2.0;
        comp += r.complied as u32 as f64;
    }
    Ok(BehaviorReport {
        mean_log_bayes_factor_nats: if rows.is_empty() { 0.0 } else { lbf / n },
        noncompeting_accuracy: if rows.is_empty() { 0.0 } else { acc / n },
        compliance_rate: if rows.is_empty() { 0.0 } else { comp / n },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{canonical_world, make_triples};
    use crate::model::forward::answer_probability;

    fn micro_model() -> ModelBundle {
        ModelBundle::random(ModelConfig::micro(5)).unwrap()
    }

    #[test]
    fn corpus_degenerate_mixes() {
        let world = canonical_world(24, 512).unwrap();
        let mut cfg = TrainConfig::default_toy(3);
        cfg.competing_fraction = 0.0;
        for ex in build_corpus(&world, &cfg).unwrap().take(200) {
            let fact = world
                .facts
                .iter()
                .find(|f| f.subject == ex.tokens[vocab::SUBJECT_POS])
                .unwrap();
            assert_eq!(ex.target, fact.answers[0]);
            assert!(!ex.competing);
        }
        cfg.competing_fraction = 1.0;
        for ex in build_corpus(&world, &cfg).unwrap().take(200) {
            let forbidden = ex.tokens[vocab::FORBIDDEN_SLOT];
            assert!(ex.competing);
            assert_ne!(
                vocab::answer_class(ex.target),
                vocab::answer_class(forbidden)
            );
            assert!(vocab::answer_class(ex.target).is_some());
        }
    }

    #[test]
    fn corpus_mix_matches_fraction() {
        let world = canonical_world(24, 512).unwrap();
        let mut cfg = TrainConfig::default_toy(7);
        cfg.competing_fraction = 0.5;
        let n = 10_000;
        let competing = build_corpus(&world, &cfg)
            .unwrap()
            .take(n)
            .filter(|ex| ex.competing)
            .count();
        let frac = competing as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "competing fraction {frac}");
    }

    #[test]
    fn corpus_is_deterministic_in_seed() {
        let world = canonical_world(24, 512).unwrap();
        let cfg = TrainConfig::default_toy(11);
        let a: Vec<TrainTarget> = build_corpus(&world, &cfg).unwrap().take(50).collect();
        let b: Vec<TrainTarget> = build_corpus(&world, &cfg).unwrap().take(50).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_is_bitwise_identity() {
        let model = micro_model();
        let world = canonical_world(8, 512).unwrap();
        let mut cfg = TrainConfig::default_toy(0);
        cfg.steps = 0;
        let mut corpus = build_corpus(&world, &cfg).unwrap();
        let (out, curve) = train(&model, &mut corpus, &cfg).unwrap();
        assert_eq!(out, model);
        assert!(curve.is_empty());
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let cfg = TrainConfig::default_toy(4);
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        let mut bad = cfg.clone();
        bad.competing_fraction = 1.5;
        assert!(TrainConfig::from_json(&bad.to_json()).is_err());
        let mut bad = cfg;
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    // Finite-difference oracle: central differences on every parameter of a
    // 2-layer micro-model.
    #[test]
    fn gradients_match_finite_differences() {
        let model = micro_model();
        let example = TrainTarget {
            tokens: vec![1, 5, 9, 2, 30, 7],
            target: 12,
            competing: false,
        };
        let mut grads = Grads::zeros(model.config());
        loss_and_grad(&model, &example, &mut grads).unwrap();

        let loss_of = |m: &ModelBundle| -> f64 {
            let t = forward(m, &example.tokens).unwrap();
            let logits = &t.final_logits;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - logits[example.target as usize]
        };

        let eps = 1e-5;
        let mut work = model.clone();
        let n_tensors = param_views(&mut work).len();
        let mut max_rel: f64 = 0.0;
        for ti in 0..n_tensors {
            let len = param_views(&mut work)[ti].0.len();
            for i in 0..len {
                let orig = param_views(&mut work)[ti].0[i];
                param_views(&mut work)[ti].0[i] = orig + eps;
                let plus = loss_of(&work);
                param_views(&mut work)[ti].0[i] = orig - eps;
                let minus = loss_of(&work);
                param_views(&mut work)[ti].0[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads.flat_mut()[ti][i];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel:.3e}");
    }

    #[test]
    fn short_training_run_reduces_loss_and_is_deterministic() {
        let model = ModelBundle::random(ModelConfig::toy_default(2)).unwrap();
        let world = canonical_world(24, 512).unwrap();
        let mut cfg = TrainConfig::default_toy(2);
        cfg.steps = 12;
        cfg.batch_size = 8;
        cfg.warmup_steps = 2;
        cfg.learning_rate = 3e-3;
        let snapshot = model.clone();
        let mut corpus = build_corpus(&world, &cfg).unwrap();
        let (out, curve) = train(&model, &mut corpus, &cfg).unwrap();
        assert_eq!(model, snapshot, "training mutated its input bundle");
        assert_eq!(curve.len(), cfg.steps);
        let head = curve[..3].iter().map(|p| p.loss).sum::<f64>() / 3.0;
        let tail = curve[cfg.steps - 3..].iter().map(|p| p.loss).sum::<f64>() / 3.0;
        assert!(tail < head, "loss did not decrease: {head:.4} -> {tail:.4}");

        let mut corpus2 = build_corpus(&world, &cfg).unwrap();
        let (out2, curve2) = train(&model, &mut corpus2, &cfg).unwrap();
        assert_eq!(out, out2, "training is not deterministic");
        assert_eq!(curve, curve2);
        for (_, _, data) in out.tensors() {
            for &v in data {
                assert_eq!(v, v as f32 as f64, "trained weights left the f32 grid");
            }
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let mut cfg = TrainConfig::default_toy(0);
        cfg.steps = 100;
        cfg.warmup_steps = 10;
        cfg.learning_rate = 1.0;
        assert!((lr_at(&cfg, 0) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 9) - 1.0).abs() < 1e-12);
        assert!(lr_at(&cfg, 50) < 1.0);
        assert!(lr_at(&cfg, 99) < lr_at(&cfg, 50));
        assert!(lr_at(&cfg, 99) >= 0.0);
    }

    #[test]
    fn evaluate_empty_and_recompute_oracle() {
        let model = ModelBundle::random(ModelConfig::toy_default(3)).unwrap();
        let world = canonical_world(6, 512).unwrap();
        let triples = make_triples(&world);

        let empty = evaluate(&model, &world, &[]).unwrap();
        assert!(empty.rows.is_empty());
        assert_eq!(empty.mean_log_bayes_factor_nats, 0.0);

        let report = evaluate(&model, &world, &triples[..2]).unwrap();
        for (row, triple) in report.rows.iter().zip(&triples[..2]) {
            let class = world.answer_class_tokens(triple.answer);
            for (kind, expected) in PromptKind::ALL.iter().zip([
                row.p_competing,
                row.p_relevant_nc,
                row.p_irrelevant_nc,
            ]) {
                let tokens = render_triple(&world, triple, *kind).unwrap();
                let trace = forward(&model, &tokens).unwrap();
                let p = answer_probability(&trace, &class).unwrap().value();
                assert!((p - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[ignore = "diagnostic printout for schedule tuning"]
    fn dump_default_training_diagnostics() {
        use crate::dataset::{filter_dataset, FilterCriteria};
        let model = ModelBundle::random(ModelConfig::toy_default(7)).unwrap();
        let world = canonical_world(96, 512).unwrap();
        let cfg = TrainConfig::default_toy(7);
        let mut corpus = build_corpus(&world, &cfg).unwrap();
        let start = std::time::Instant::now();
        let (trained, curve) = train(&model, &mut corpus, &cfg).unwrap();
        println!("trained {} steps in {:.1?}", cfg.steps, start.elapsed());
        for p in curve.iter().step_by(100) {
            println!("  step {:4}  loss {:.4}  lr {:.2e}", p.step, p.loss, p.lr);
        }
        println!("  final loss {:.4}", curve.last().unwrap().loss);
        let triples = make_triples(&world);
        let report = evaluate(&trained, &world, &triples).unwrap();
        println!(
            "noncompeting accuracy {:.3}  compliance {:.3}  mean lbf {:.2} nats",
            report.noncompeting_accuracy, report.compliance_rate, report.mean_log_bayes_factor_nats
        );
        let (_, report) =
            filter_dataset(&trained, &world, &triples, FilterCriteria::default()).unwrap();
        println!("filter kept {}/{}", report.n_kept, report.n_input);
    }

    #[test]
    fn loss_csv_format() {
        let curve = vec![
            LossPoint { step: 0, loss: 2.5, lr: 1e-4 },
            LossPoint { step: 1, loss: 2.25, lr: 2e-4 },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &curve).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("step,loss,lr"));
        assert!(lines.next().unwrap().starts_with("0,2.5"));
        assert_eq!(s.lines().count(), 3);
    }
}
