//! Per-head mechanism probes: attention-to-forbidden statistics, OV
//! suppression scores with top downweighted tokens, key/query enrichment
//! curves, and semantic/positional specificity checks.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::check_paired;
use crate::dataset::{render_triple, FactWorld, PromptKind, PromptTriple};
use crate::error::{FfckError, Result};
use crate::model::forward::{attention_row, forward, head_key, head_query, score_scale, ActivationTrace};
use crate::model::ModelBundle;
use crate::numerics::{log_odds, pearson, rms_normalize_unchecked, softmax_unchecked, Probability};
use crate::vocab;

/// Final-token attention mass of a head on the forbidden-slot position.
pub fn attention_to_forbidden(
    trace: &ActivationTrace,
    layer: usize,
    head: usize,
    forbidden_slot: usize,
) -> Result<Probability> {
    if layer >= trace.attention.len() || head >= trace.attention[layer].len() {
        return Err(FfckError::Input(format!("head L{layer}H{head} outside trace")));
    }
    if forbidden_slot >= trace.seq_len() {
        return Err(FfckError::Input(format!(
            "slot {forbidden_slot} outside sequence of length {}",
            trace.seq_len()
        )));
    }
    Probability::new(trace.final_attention_row(layer, head)[forbidden_slot].min(1.0))
}

pub const ATTENTION_HIST_BINS: usize = 20;

/// Normalized histogram over [0, 1]: densities integrate to 1.
fn attention_histogram(values: &[f64]) -> Vec<f64> {
    let mut counts = vec![0.0; ATTENTION_HIST_BINS];
    for &v in values {
        let bin = ((v * ATTENTION_HIST_BINS as f64) as usize).min(ATTENTION_HIST_BINS - 1);
        counts[bin] += 1.0;
    }
    let width = 1.0 / ATTENTION_HIST_BINS as f64;
    let n = values.len().max(1) as f64;
    counts.iter().map(|c| c / (n * width)).collect()
}

fn median(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    }
}

/// Attention-to-forbidden summary of one head on one prompt kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadKindStats {
    pub layer: usize,
    pub head: usize,
    pub kind: PromptKind,
    pub mean: f64,
    pub median: f64,
    /// Density histogram over [0, 1] with [`ATTENTION_HIST_BINS`] bins.
    pub histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// One row per (selected head, prompt kind), heads in argument order.
    pub per_head: Vec<HeadKindStats>,
    /// Mean competing-prompt attention of the selected heads.
    pub selected_mean: f64,
    /// Mean competing-prompt attention of every other head.
    pub rest_mean: f64,
    pub n_triples: usize,
}

/// Three-way attention statistics for the selected heads, plus the
/// selected-vs-rest mean comparison on competing prompts.
pub fn attention_stats(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
    heads: &[(usize, usize)],
) -> Result<AttentionStats> {
    let config = model.config();
    for &(l, h) in heads {
        if l >= config.n_layers || h >= config.n_heads {
            return Err(FfckError::Input(format!("head L{l}H{h} outside model")));
        }
    }
    // per triple: attention of every head on each kind
    let per_triple: Vec<Result<Vec<Vec<Vec<f64>>>>> = triples
        .par_iter()
        .map(|triple| {
            let mut by_kind = Vec::with_capacity(PromptKind::ALL.len());
            for kind in PromptKind::ALL {
                let trace = forward(model, &render_triple(world, triple, kind)?)?;
                let rows: Vec<Vec<f64>> = (0..config.n_layers)
                    .map(|l| {
                        (0..config.n_heads)
                            .map(|h| trace.final_attention_row(l, h)[vocab::FORBIDDEN_SLOT])
                            .collect()
                    })
                    .collect();
                by_kind.push(rows);
            }
            Ok(by_kind)
        })
        .collect();
    let per_triple: Vec<Vec<Vec<Vec<f64>>>> = per_triple.into_iter().collect::<Result<_>>()?;

    let mut per_head = Vec::with_capacity(heads.len() * PromptKind::ALL.len());
    for &(l, h) in heads {
        for (ki, kind) in PromptKind::ALL.iter().enumerate() {
            let mut values: Vec<f64> = per_triple.iter().map(|t| t[ki][l][h]).collect();
            let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
            let histogram = attention_histogram(&values);
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite attention"));
            per_head.push(HeadKindStats {
                layer: l,
                head: h,
                kind: *kind,
                mean,
                median: median(&values),
                histogram,
            });
        }
    }
    let selected: std::collections::BTreeSet<(usize, usize)> = heads.iter().copied().collect();
    let (mut sel_sum, mut sel_n, mut rest_sum, mut rest_n) = (0.0, 0usize, 0.0, 0usize);
    for t in &per_triple {
        for l in 0..config.n_layers {
            for h in 0..config.n_heads {
                let v = t[0][l][h]; // competing
                if selected.contains(&(l, h)) {
                    sel_sum += v;
                    sel_n += 1;
                } else {
                    rest_sum += v;
                    rest_n += 1;
                }
            }
        }
    }
    Ok(AttentionStats {
        per_head,
        selected_mean: if sel_n == 0 { 0.0 } else { sel_sum / sel_n as f64 },
        rest_mean: if rest_n == 0 { 0.0 } else { rest_sum / rest_n as f64 },
        n_triples: triples.len(),
    })
}

/// Logits of the OV probe: unembed the head's OV map applied to token `i`'s
/// normalized raw embedding. No final norm — the probe is the map
/// Logit ∘ Softmax ∘ Unembed ∘ OV alone.
fn ov_probe_logits(model: &ModelBundle, layer: usize, head: usize, token: u32) -> Vec<f64> {
    let lw = &model.layers[layer];
    let hw = &lw.heads[head];
    let normed = rms_normalize_unchecked(
        model.embedding.row(token as usize),
        lw.attn_gain.as_slice(),
    );
    let ov = hw.w_o.matvec(&hw.w_v.matvec(&normed));
    model.unembed.matvec(&ov)
}

fn logit_of(probs: &[f64], j: usize) -> f64 {
    log_odds(Probability::new(probs[j].min(1.0)).expect("softmax output")).clamped_nats()
}

/// R(i→j): log-odds of token `j` under the OV probe fed token `i`.
pub fn ov_response(model: &ModelBundle, layer: usize, head: usize, i: u32, j: u32) -> Result<f64> {
    let config = model.config();
    if layer >= config.n_layers || head >= config.n_heads {
        return Err(FfckError::Input(format!("head L{layer}H{head} outside model")));
    }
    for t in [i, j] {
        if t as usize >= config.vocab_size {
            return Err(FfckError::Input(format!("token {t} out of vocab")));
        }
    }
    let probs = softmax_unchecked(&ov_probe_logits(model, layer, head, i));
    Ok(logit_of(&probs, j as usize))
}

/// Pair enumeration strategy for the suppression-score expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PairSampler {
    /// All ordered pairs i ≠ j (used when vocab² ≤ 10⁶).
    Exhaustive,
    /// Uniform pairs with a recorded seed and count.
    Uniform { seed: u64, n_pairs: usize },
}

pub const EXHAUSTIVE_PAIR_LIMIT: usize = 1_000_000;
pub const OV_HIST_BINS: usize = 40;
pub const TOP_DOWNWEIGHTED: usize = 10;

/// Histogram of sampled R(i→i) − R(i→j) differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseHistogram {
    pub min: f64,
    pub max: f64,
    /// Densities over [`OV_HIST_BINS`] equal bins; integrates to 1.
    pub densities: Vec<f64>,
    pub n_samples: usize,
}

fn response_histogram(values: &[f64]) -> ResponseHistogram {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (min, max) = if values.is_empty() || min == max {
        (min.min(0.0), max.max(0.0) + 1.0)
    } else {
        (min, max)
    };
    let width = (max - min) / OV_HIST_BINS as f64;
    let mut counts = vec![0.0; OV_HIST_BINS];
    for &v in values {
        let bin = (((v - min) / width) as usize).min(OV_HIST_BINS - 1);
        counts[bin] += 1.0;
    }
    let n = values.len().max(1) as f64;
    ResponseHistogram {
        min,
        max,
        densities: counts.iter().map(|c| c / (n * width)).collect(),
        n_samples: values.len(),
    }
}

/// OV-circuit profile of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OVProfile {
    pub layer: usize,
    pub head: usize,
    /// E_{i≠j}[R(i→i) − R(i→j)]; negative = suppressive.
    pub suppression_score: f64,
    pub exhaustive: bool,
    pub n_pairs: usize,
    pub seed: Option<u64>,
    pub histogram: ResponseHistogram,
    /// Tokens with the most negative self-response, ascending by R(i→i).
    pub top_downweighted: Vec<(u32, f64)>,
}

/// Suppression score of one head (Eq.-5-style expectation over token pairs).
pub fn suppression_score(
    model: &ModelBundle,
    layer: usize,
    head: usize,
    sampler: PairSampler,
) -> Result<OVProfile> {
    let config = model.config();
    if layer >= config.n_layers || head >= config.n_heads {
        return Err(FfckError::Input(format!("head L{layer}H{head} outside model")));
    }
    let v = config.vocab_size;
    // per-token probe distributions and self-responses
    let probs: Vec<Vec<f64>> = (0..v as u32)
        .map(|i| softmax_unchecked(&ov_probe_logits(model, layer, head, i)))
        .collect();
    let self_resp: Vec<f64> = (0..v).map(|i| logit_of(&probs[i], i)).collect();

    let (score, hist_samples, exhaustive, n_pairs, seed) = match sampler {
        PairSampler::Exhaustive => {
            if v * v > EXHAUSTIVE_PAIR_LIMIT {
                return Err(FfckError::Input(format!(
                    "vocab {v} too large for exhaustive pair enumeration"
                )));
            }
            let mut sum = 0.0;
            let mut samples = Vec::with_capacity(v * (v - 1));
            for i in 0..v {
                for j in 0..v {
                    if i == j {
                        continue;
                    }
                    let d = self_resp[i] - logit_of(&probs[i], j);
                    sum += d;
                    samples.push(d);
                }
            }
            let n = v * (v - 1);
            (sum / n as f64, samples, true, n, None)
        }
        PairSampler::Uniform { seed, n_pairs } => {
            if n_pairs == 0 {
                return Err(FfckError::Input("sampler needs at least one pair".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sum = 0.0;
            let mut samples = Vec::with_capacity(n_pairs);
            for _ in 0..n_pairs {
                let i = rng.gen_range(0..v);
                let j = loop {
                    let j = rng.gen_range(0..v);
                    if j != i {
                        break j;
                    }
                };
                let d = self_resp[i] - logit_of(&probs[i], j);
                sum += d;
                samples.push(d);
            }
            (sum / n_pairs as f64, samples, false, n_pairs, Some(seed))
        }
    };
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        self_resp[a]
            .partial_cmp(&self_resp[b])
            .expect("finite responses")
            .then(a.cmp(&b))
    });
    let top_downweighted = order
        .iter()
        .take(TOP_DOWNWEIGHTED)
        .map(|&i| (i as u32, self_resp[i]))
        .collect();
    Ok(OVProfile {
        layer,
        head,
        suppression_score: score,
        exhaustive,
        n_pairs,
        seed,
        histogram: response_histogram(&hist_samples),
        top_downweighted,
    })
}

/// Profiles for every head of the model, exhaustive when the vocab allows.
pub fn all_suppression_scores(model: &ModelBundle) -> Result<Vec<OVProfile>> {
    let config = model.config();
    let sampler = if config.vocab_size * config.vocab_size <= EXHAUSTIVE_PAIR_LIMIT {
        PairSampler::Exhaustive
    } else {
        PairSampler::Uniform {
            seed: config.seed,
            n_pairs: 200_000,
        }
    };
    let heads: Vec<(usize, usize)> = (0..config.n_layers)
        .flat_map(|l| (0..config.n_heads).map(move |h| (l, h)))
        .collect();
    let profiles: Vec<Result<OVProfile>> = heads
        .par_iter()
        .map(|&(l, h)| suppression_score(model, l, h, sampler))
        .collect();
    profiles.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnrichmentMode {
    Key,
    Query,
}

impl EnrichmentMode {
    pub fn label(self) -> &'static str {
        match self {
            EnrichmentMode::Key => "key",
            EnrichmentMode::Query => "query",
        }
    }
}

/// Attention to the forbidden slot when one side of the head's QK circuit is
/// fed the partial residual of components from layers < `cutoff` (the other
/// side keeps its full input). `cutoff == layer` reproduces the baseline
/// bitwise; `cutoff == 0` feeds the raw embedding.
pub fn enrichment_point(
    model: &ModelBundle,
    trace: &ActivationTrace,
    layer: usize,
    head: usize,
    mode: EnrichmentMode,
    cutoff: usize,
) -> Result<Probability> {
    let config = model.config();
    if layer >= config.n_layers || head >= config.n_heads {
        return Err(FfckError::Input(format!("head L{layer}H{head} outside model")));
    }
    if cutoff > layer {
        return Err(FfckError::Input(format!(
            "cutoff {cutoff} above head layer {layer}"
        )));
    }
    let slot = vocab::FORBIDDEN_SLOT;
    let last = trace.last_pos();
    if slot >= trace.seq_len() {
        return Err(FfckError::Input("trace too short for the forbidden slot".into()));
    }
    let full = &trace.residual_by_layer[layer];
    let partial = &trace.residual_by_layer[cutoff];
    let mut keys: Vec<Vec<f64>> = (0..trace.seq_len())
        .map(|p| head_key(model, layer, head, full.row(p), p))
        .collect();
    let query = match mode {
        EnrichmentMode::Key => {
            keys[slot] = head_key(model, layer, head, partial.row(slot), slot);
            head_query(model, layer, head, full.row(last), last)
        }
        EnrichmentMode::Query => head_query(model, layer, head, partial.row(last), last),
    };
    let row = attention_row(&query, &keys, last, score_scale(config.d_head));
    Probability::new(row[slot].min(1.0))
}

/// Enrichment curve of one head over a triple set (competing renders):
/// median attention and median log-odds per cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentCurve {
    pub layer: usize,
    pub head: usize,
    pub mode: EnrichmentMode,
    pub cutoffs: Vec<usize>,
    pub median_attention: Vec<f64>,
    pub median_log_odds_nats: Vec<f64>,
    pub n_triples: usize,
}

pub fn enrichment_curve(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
    layer: usize,
    head: usize,
    mode: EnrichmentMode,
) -> Result<EnrichmentCurve> {
    if triples.is_empty() {
        return Err(FfckError::Input("enrichment curve needs a nonempty dataset".into()));
    }
    let per_triple: Vec<Result<Vec<f64>>> = triples
        .par_iter()
        .map(|triple| {
            let trace = forward(model, &render_triple(world, triple, PromptKind::Competing)?)?;
            (0..=layer)
                .map(|cutoff| {
                    Ok(enrichment_point(model, &trace, layer, head, mode, cutoff)?.value())
                })
                .collect()
        })
        .collect();
    let per_triple: Vec<Vec<f64>> = per_triple.into_iter().collect::<Result<_>>()?;
    let mut median_attention = Vec::with_capacity(layer + 1);
    let mut median_log_odds_nats = Vec::with_capacity(layer + 1);
    for c in 0..=layer {
        let mut vals: Vec<f64> = per_triple.iter().map(|t| t[c]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite attention"));
        let m = median(&vals);
        median_attention.push(m);
        median_log_odds_nats.push(
            log_odds(Probability::new(m).expect("median in range")).clamped_nats(),
        );
    }
    Ok(EnrichmentCurve {
        layer,
        head,
        mode,
        cutoffs: (0..=layer).collect(),
        median_attention,
        median_log_odds_nats,
        n_triples: triples.len(),
    })
}

/// Attention of the head's final-token query against keys taken from a
/// paired run at the forbidden slot: (baseline, crossed).
pub fn cross_run_attention(
    model: &ModelBundle,
    competing: &ActivationTrace,
    noncompeting: &ActivationTrace,
    layer: usize,
    head: usize,
) -> Result<(Probability, Probability)> {
    check_paired(competing, noncompeting)?;
    let config = model.config();
    if layer >= config.n_layers || head >= config.n_heads {
        return Err(FfckError::Input(format!("head L{layer}H{head} outside model")));
    }
    let slot = vocab::FORBIDDEN_SLOT;
    let last = competing.last_pos();
    let scale = score_scale(config.d_head);
    let resid = &competing.residual_by_layer[layer];
    let query = head_query(model, layer, head, resid.row(last), last);
    let keys: Vec<Vec<f64>> = (0..competing.seq_len())
        .map(|p| head_key(model, layer, head, resid.row(p), p))
        .collect();
    let baseline = attention_row(&query, &keys, last, scale)[slot];
    let other = &noncompeting.residual_by_layer[layer];
    let mut crossed_keys = keys;
    crossed_keys[slot] = head_key(model, layer, head, other.row(slot), slot);
    let crossed = attention_row(&query, &crossed_keys, last, scale)[slot];
    Ok((
        Probability::new(baseline.min(1.0))?,
        Probability::new(crossed.min(1.0))?,
    ))
}

/// Dataset-wide scatter of a paired-attention probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub layer: usize,
    pub head: usize,
    /// (baseline, probed) log-odds pairs, one per triple.
    pub pairs: Vec<(f64, f64)>,
    pub correlation: Option<f64>,
    pub n: usize,
}

fn scatter_of(layer: usize, head: usize, pairs: Vec<(f64, f64)>) -> ScatterReport {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    ScatterReport {
        layer,
        head,
        correlation: pearson(&xs, &ys),
        n: pairs.len(),
        pairs,
    }
}

/// Cross-run scatter: competing queries against relevant-noncompeting keys.
pub fn cross_run_scatter(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
    layer: usize,
    head: usize,
) -> Result<ScatterReport> {
    let pairs: Vec<Result<(f64, f64)>> = triples
        .par_iter()
        .map(|triple| {
            let competing = forward(model, &render_triple(world, triple, PromptKind::Competing)?)?;
            let nc = forward(
                model,
                &render_triple(world, triple, PromptKind::RelevantNoncompeting)?,
            )?;
            let (b, c) = cross_run_attention(model, &competing, &nc, layer, head)?;
            Ok((log_odds(b).clamped_nats(), log_odds(c).clamped_nats()))
        })
        .collect();
    Ok(scatter_of(layer, head, pairs.into_iter().collect::<Result<_>>()?))
}

/// Attention to the forbidden slot with the slot key's rotary position
/// replaced by a uniformly random valid position: (baseline, randomized).
pub fn positional_randomization(
    model: &ModelBundle,
    trace: &ActivationTrace,
    layer: usize,
    head: usize,
    seed: u64,
) -> Result<(Probability, Probability)> {
    let config = model.config();
    if layer >= config.n_layers || head >= config.n_heads {
        return Err(FfckError::Input(format!("head L{layer}H{head} outside model")));
    }
    let slot = vocab::FORBIDDEN_SLOT;
    let last = trace.last_pos();
    let scale = score_scale(config.d_head);
    let resid = &trace.residual_by_layer[layer];
    let query = head_query(model, layer, head, resid.row(last), last);
    let keys: Vec<Vec<f64>> = (0..trace.seq_len())
        .map(|p| head_key(model, layer, head, resid.row(p), p))
        .collect();
    let baseline = attention_row(&query, &keys, last, scale)[slot];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_pos = rng.gen_range(0..trace.seq_len());
    let mut keys_rand = keys;
    keys_rand[slot] = head_key(model, layer, head, resid.row(slot), random_pos);
    let randomized = attention_row(&query, &keys_rand, last, scale)[slot];
    Ok((
        Probability::new(baseline.min(1.0))?,
        Probability::new(randomized.min(1.0))?,
    ))
}

/// Positional-randomization scatter over competing renders; per-triple seeds
/// derive deterministically from `seed`.
pub fn positional_scatter(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
    layer: usize,
    head: usize,
    seed: u64,
) -> Result<ScatterReport> {
    let pairs: Vec<Result<(f64, f64)>> = triples
        .par_iter()
        .enumerate()
        .map(|(i, triple)| {
            let trace = forward(model, &render_triple(world, triple, PromptKind::Competing)?)?;
            let (b, r) =
                positional_randomization(model, &trace, layer, head, seed ^ (i as u64).wrapping_mul(0x9e37_79b9))?;
            Ok((log_odds(b).clamped_nats(), log_odds(r).clamped_nats()))
        })
        .collect();
    Ok(scatter_of(layer, head, pairs.into_iter().collect::<Result<_>>()?))
}

/// CSV: one row per (head, kind): `layer,head,kind,mean,median`.
pub fn write_attention_csv<W: Write>(w: &mut W, stats: &AttentionStats) -> Result<()> {
    writeln!(w, "layer,head,kind,mean,median")?;
    for row in &stats.per_head {
        writeln!(
            w,
            "{},{},{},{:.9},{:.9}",
            row.layer,
            row.head,
            row.kind.label(),
            row.mean,
            row.median
        )?;
    }
    Ok(())
}

/// CSV: `layer,head,mode,cutoff,median_attention,median_log_odds_nats`.
pub fn write_enrichment_csv<W: Write>(w: &mut W, curves: &[EnrichmentCurve]) -> Result<()> {
    writeln!(w, "layer,head,mode,cutoff,median_attention,median_log_odds_nats")?;
    for curve in curves {
        for (i, &c) in curve.cutoffs.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{:.9},{:.9}",
                curve.layer,
                curve.head,
                curve.mode.label(),
                c,
                curve.median_attention[i],
                curve.median_log_odds_nats[i]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{canonical_world, make_triples};
    use crate::model::plant::{plant_model, PlantedSpec, RECALL_HEAD};
    use crate::model::{ModelBundle, ModelConfig};

    fn planted() -> (ModelBundle, PlantedSpec) {
        let spec = PlantedSpec::toy_default();
        let model = plant_model(ModelConfig::toy_default(11), &spec).unwrap();
        (model, spec)
    }

    #[test]
    fn attention_mass_is_a_probability_and_rows_sum_to_one() {
        let (model, _) = planted();
        let world = canonical_world(4, 512).unwrap();
        let triples = make_triples(&world);
        let trace = forward(
            &model,
            &render_triple(&world, &triples[0], PromptKind::Competing).unwrap(),
        )
        .unwrap();
        let config = model.config();
        for l in 0..config.n_layers {
            for h in 0..config.n_heads {
                let p = attention_to_forbidden(&trace, l, h, vocab::FORBIDDEN_SLOT).unwrap();
                assert!((0.0..=1.0).contains(&p.value()));
                let sum: f64 = trace.final_attention_row(l, h).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        assert!(attention_to_forbidden(&trace, 99, 0, vocab::FORBIDDEN_SLOT).is_err());
        assert!(attention_to_forbidden(&trace, 0, 0, 99).is_err());
    }

    #[test]
    fn planted_attention_ordering_and_stats_shape() {
        let (model, spec) = planted();
        let world = canonical_world(16, 512).unwrap();
        let triples = make_triples(&world);
        let heads: Vec<(usize, usize)> = spec
            .suppressor_heads
            .iter()
            .map(|&(l, h, _)| (l, h))
            .collect();
        let stats = attention_stats(&model, &world, &triples, &heads).unwrap();
        assert_eq!(stats.per_head.len(), heads.len() * 3);
        for chunk in stats.per_head.chunks(3) {
            let by_kind: Vec<f64> = chunk.iter().map(|s| s.mean).collect();
            assert!(
                by_kind[0] > by_kind[1] + 0.05 && by_kind[1] > by_kind[2] + 0.05,
                "ordering violated for L{}H{}: {:?}",
                chunk[0].layer,
                chunk[0].head,
                by_kind
            );
            for s in chunk {
                let integral: f64 =
                    s.histogram.iter().sum::<f64>() / ATTENTION_HIST_BINS as f64;
                assert!((integral - 1.0).abs() < 1e-9, "histogram integral {integral}");
            }
        }
        // single triple, single head matches the pointwise op
        let one = attention_stats(&model, &world, &triples[..1], &heads[..1]).unwrap();
        let trace = forward(
            &model,
            &render_triple(&world, &triples[0], PromptKind::Competing).unwrap(),
        )
        .unwrap();
        let point = attention_to_forbidden(&trace, heads[0].0, heads[0].1, vocab::FORBIDDEN_SLOT)
            .unwrap()
            .value();
        assert_eq!(one.per_head[0].mean, point);
        assert_eq!(one.per_head[0].median, point);
        assert!(stats.selected_mean > stats.rest_mean + 0.5);
    }

    #[test]
    fn zero_ov_head_has_uniform_probe_and_zero_score() {
        let (mut model, _) = planted();
        let config = model.config().clone();
        // zero out one sink head's OV circuit
        let hw = &mut model.layers[7].heads[7];
        hw.w_v = crate::tensor::Matrix::zeros(config.d_head, config.d_model);
        hw.w_o = crate::tensor::Matrix::zeros(config.d_model, config.d_head);
        let uniform = log_odds(Probability::new(1.0 / config.vocab_size as f64).unwrap()).nats();
        let r = ov_response(&model, 7, 7, 3, 200).unwrap();
        assert!((r - uniform).abs() < 1e-9);
        let profile = suppression_score(&model, 7, 7, PairSampler::Exhaustive).unwrap();
        assert_eq!(profile.suppression_score, 0.0);
        assert!(profile.exhaustive);
    }

    #[test]
    fn planted_suppressor_ov_profile() {
        let (model, spec) = planted();
        let (l, h, _) = spec.suppressor_heads[0];
        // suppressors downweight an answer token's own class specifically
        let answer = vocab::class_primary(5);
        let self_resp = ov_response(&model, l, h, answer, answer).unwrap();
        for class in 0..vocab::MAX_ANSWER_CLASSES {
            if class == 5 {
                continue;
            }
            let other = ov_response(&model, l, h, answer, vocab::class_primary(class)).unwrap();
            assert!(
                self_resp < other,
                "R(ans->ans) {self_resp:.3} not below R(ans->{class}) {other:.3}"
            );
        }
        let profile = suppression_score(&model, l, h, PairSampler::Exhaustive).unwrap();
        assert!(
            profile.suppression_score < -1.0,
            "suppression score {:.3}",
            profile.suppression_score
        );
        let integral: f64 = profile.histogram.densities.iter().sum::<f64>()
            * (profile.histogram.max - profile.histogram.min)
            / OV_HIST_BINS as f64;
        assert!((integral - 1.0).abs() < 1e-9);
        // ascending self-responses
        for w in profile.top_downweighted.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn sampled_score_within_three_standard_errors_of_exhaustive() {
        let (model, spec) = planted();
        let (l, h, _) = spec.suppressor_heads[1];
        let exact = suppression_score(&model, l, h, PairSampler::Exhaustive).unwrap();
        let n_pairs = 20_000;
        let sampled =
            suppression_score(&model, l, h, PairSampler::Uniform { seed: 3, n_pairs }).unwrap();
        // standard error from the sampled histogram spread
        let mean = sampled.suppression_score;
        let width = (sampled.histogram.max - sampled.histogram.min) / OV_HIST_BINS as f64;
        let var: f64 = sampled
            .histogram
            .densities
            .iter()
            .enumerate()
            .map(|(b, d)| {
                let center = sampled.histogram.min + (b as f64 + 0.5) * width;
                d * width * (center - mean).powi(2)
            })
            .sum();
        let se = (var / n_pairs as f64).sqrt();
        assert!(
            (sampled.suppression_score - exact.suppression_score).abs() < 3.0 * se + 1e-6,
            "sampled {:.4} vs exact {:.4}, se {:.5}",
            sampled.suppression_score,
            exact.suppression_score,
            se
        );
        // determinism of the sampler
        let again =
            suppression_score(&model, l, h, PairSampler::Uniform { seed: 3, n_pairs }).unwrap();
        assert_eq!(sampled, again);
    }

    #[test]
    fn enrichment_baseline_is_bitwise_and_curve_jumps_at_copier_layer() {
        let (model, spec) = planted();
        let world = canonical_world(8, 512).unwrap();
        let triples = make_triples(&world);
        let trace = forward(
            &model,
            &render_triple(&world, &triples[0], PromptKind::Competing).unwrap(),
        )
        .unwrap();
        let (l, h, _) = spec.suppressor_heads[0];
        for mode in [EnrichmentMode::Key, EnrichmentMode::Query] {
            let baseline = enrichment_point(&model, &trace, l, h, mode, l).unwrap();
            let recorded = trace.final_attention_row(l, h)[vocab::FORBIDDEN_SLOT];
            assert_eq!(baseline.value(), recorded, "{} cutoff L==layer", mode.label());
        }
        assert!(enrichment_point(&model, &trace, l, h, EnrichmentMode::Key, l + 1).is_err());

        let curve =
            enrichment_curve(&model, &world, &triples, l, h, EnrichmentMode::Key).unwrap();
        let copier_layer = spec.copier_head.0;
        for (i, &c) in curve.cutoffs.iter().enumerate() {
            if c <= copier_layer {
                assert!(
                    curve.median_attention[i] < 0.5,
                    "cutoff {c}: attention {:.3} before the copier layer",
                    curve.median_attention[i]
                );
            } else {
                assert!(
                    curve.median_attention[i] > 0.5,
                    "cutoff {c}: attention {:.3} after the copier layer",
                    curve.median_attention[i]
                );
            }
        }
    }

    #[test]
    #[ignore = "diagnostic dump"]
    fn dump_cross_run_pairs() {
        let (model, spec) = planted();
        let world = canonical_world(16, 512).unwrap();
        let triples = make_triples(&world);
        let (l, h, _) = spec.suppressor_heads[0];
        let config = model.config();
        let scale = score_scale(config.d_head);
        for triple in &triples {
            let competing = forward(
                &model,
                &render_triple(&world, triple, PromptKind::Competing).unwrap(),
            )
            .unwrap();
            let nc = forward(
                &model,
                &render_triple(&world, triple, PromptKind::RelevantNoncompeting).unwrap(),
            )
            .unwrap();
            let last = competing.last_pos();
            let resid = &competing.residual_by_layer[l];
            let query = head_query(&model, l, h, resid.row(last), last);
            let keys: Vec<Vec<f64>> = (0..competing.seq_len())
                .map(|p| head_key(&model, l, h, resid.row(p), p))
                .collect();
            let slot = vocab::FORBIDDEN_SLOT;
            let dot =
                |q: &[f64], k: &[f64]| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            let s_base = dot(&query, &keys[slot]);
            let ck = head_key(&model, l, h, nc.residual_by_layer[l].row(slot), slot);
            let s_cross = dot(&query, &ck);
            let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut lse = f64::NEG_INFINITY;
            for (p, k) in keys.iter().enumerate() {
                if p != slot && p <= last {
                    let s = dot(&query, k);
                    lse = if lse.is_finite() {
                        lse.max(s) + (-(lse - s).abs()).exp().ln_1p()
                    } else {
                        s
                    };
                }
            }
            let part = |q: &[f64], k: &[f64], lo: usize, hi: usize| {
                q[lo..hi]
                    .iter()
                    .zip(&k[lo..hi])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            };
            println!(
                "s_base {s_base:7.3} (drive {:6.3} class {:6.3})  s_cross {s_cross:7.3} (drive {:6.3} class {:6.3})  lse_rest {lse:7.3}  |q| {qn:6.3}",
                part(&query, &keys[slot], 6, 8),
                part(&query, &keys[slot], 8, 16),
                part(&query, &ck, 6, 8),
                part(&query, &ck, 8, 16),
            );
        }
        let scatter = cross_run_scatter(&model, &world, &triples, l, h).unwrap();
        println!("corr {:?}", scatter.correlation);
    }

    #[test]
    fn cross_run_identity_and_planted_correlation() {
        let (model, spec) = planted();
        let world = canonical_world(16, 512).unwrap();
        let triples = make_triples(&world);
        let (l, h, _) = spec.suppressor_heads[0];
        let competing = forward(
            &model,
            &render_triple(&world, &triples[0], PromptKind::Competing).unwrap(),
        )
        .unwrap();
        let (b, c) = cross_run_attention(&model, &competing, &competing, l, h).unwrap();
        assert_eq!(b.value(), c.value());
        let recorded = trace_attention(&competing, l, h);
        assert_eq!(b.value(), recorded);

        let scatter = cross_run_scatter(&model, &world, &triples, l, h).unwrap();
        assert_eq!(scatter.n, triples.len());
        let corr = scatter.correlation.unwrap();
        assert!((-1.0..=1.0).contains(&corr));
        assert!(corr > 0.9, "cross-run correlation {corr:.3}");
    }

    fn trace_attention(trace: &ActivationTrace, l: usize, h: usize) -> f64 {
        trace.final_attention_row(l, h)[vocab::FORBIDDEN_SLOT]
    }

    #[test]
    fn positional_probe_distinguishes_content_and_position_keyed_heads() {
        let (model, spec) = planted();
        let world = canonical_world(16, 512).unwrap();
        let triples = make_triples(&world);
        let (l, h, _) = spec.suppressor_heads[0];
        let trace = forward(
            &model,
            &render_triple(&world, &triples[0], PromptKind::Competing).unwrap(),
        )
        .unwrap();
        // seed whose first draw is the original slot position reproduces the
        // baseline bitwise
        let slot_seed = (0..)
            .find(|&s| {
                ChaCha8Rng::seed_from_u64(s).gen_range(0..trace.seq_len()) == vocab::FORBIDDEN_SLOT
            })
            .unwrap();
        let (b, r) = positional_randomization(&model, &trace, l, h, slot_seed).unwrap();
        assert_eq!(b.value(), r.value());
        let (x, y) = positional_randomization(&model, &trace, l, h, 12).unwrap();
        let (x2, y2) = positional_randomization(&model, &trace, l, h, 12).unwrap();
        assert_eq!((x.value(), y.value()), (x2.value(), y2.value()));

        let content = positional_scatter(&model, &world, &triples, l, h, 5).unwrap();
        let corr = content.correlation.unwrap();
        assert!(corr > 0.9, "content-keyed correlation {corr:.3}");
        let (cl, ch) = spec.positional_control_head.unwrap();
        let control = positional_scatter(&model, &world, &triples, cl, ch, 5).unwrap();
        let ctl_corr = control.correlation.unwrap_or(0.0);
        assert!(ctl_corr < 0.3, "position-keyed correlation {ctl_corr:.3}");
    }

    #[test]
    fn recall_head_is_not_suppressive() {
        let (model, _) = planted();
        let profile =
            suppression_score(&model, RECALL_HEAD.0, RECALL_HEAD.1, PairSampler::Exhaustive)
                .unwrap();
        assert!(
            profile.suppression_score > -1.0,
            "recall head scored {:.3}",
            profile.suppression_score
        );
    }

    #[test]
    fn csv_emitters_have_expected_shape() {
        let (model, spec) = planted();
        let world = canonical_world(4, 512).unwrap();
        let triples = make_triples(&world);
        let heads = [(spec.suppressor_heads[0].0, spec.suppressor_heads[0].1)];
        let stats = attention_stats(&model, &world, &triples, &heads).unwrap();
        let mut buf = Vec::new();
        write_attention_csv(&mut buf, &stats).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("layer,head,kind,"));
        assert_eq!(s.lines().count(), 4);

        let curve = enrichment_curve(
            &model,
            &world,
            &triples,
            heads[0].0,
            heads[0].1,
            EnrichmentMode::Query,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_enrichment_csv(&mut buf, &[curve]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1 + heads[0].0 + 1);
    }
}
