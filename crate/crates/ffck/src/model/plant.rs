//! Hand-constructed suppression circuit with known ground truth.
//!
//! The planted model answers factual-recall prompts from a hard-wired
//! subject table and suppresses the forbidden answer class through a small,
//! fully understood head circuit:
//!
//! * a *recall* head (fixed at L0H0) copies the subject's ranked-answer
//!   preview to the final position,
//! * a *copier* head tags every answer-token position with its alias class,
//! * each *suppressor* head attends from the final position to tagged
//!   positions and writes a negative multiple of the tagged class's readout
//!   direction (plus a per-token identity code, which is what its OV circuit
//!   shows when probed on raw embeddings),
//! * an optional *positional control* head attends to the forbidden slot by
//!   rotary offset alone, as a contrast case for position-randomization
//!   probes.
//!
//! All remaining heads are attention sinks on BOS with small random OV
//! noise, and the MLPs are low-amplitude noise. Residual-stream blocks used
//! by the circuit are disjoint, so per-head contributions stay near-additive
//! through the final normalization (the ballast coordinate keeps its
//! denominator essentially constant).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FfckError, Result};
use crate::model::bundle::gaussian;
use crate::model::{HeadWeights, LayerWeights, ModelBundle, ModelConfig};
use crate::numerics::rope_angle;
use crate::tensor::{Matrix, Vector};
use crate::vocab;

/// Placement and strength of the planted circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    /// (layer, head, target_strength); at most three, each on its own
    /// residual block.
    pub suppressor_heads: Vec<(usize, usize, f64)>,
    pub copier_head: (usize, usize),
    /// Token the suppressors' attention should prefer in injection scans;
    /// its embedding tag is boosted relative to its alias partner.
    pub preferred_token: Option<u32>,
    /// Position-keyed head attending to the forbidden slot by rotary offset,
    /// used as the contrast case for positional-specificity probes.
    pub positional_control_head: Option<(usize, usize)>,
}

impl PlantedSpec {
    /// Default placement for the toy config: copier at L2H0, suppressors at
    /// L4H0 / L5H1 / L6H2, control at L1H1, preferred token = class 0's
    /// primary answer token.
    pub fn toy_default() -> Self {
        PlantedSpec {
            suppressor_heads: vec![(4, 0, 1.0), (5, 1, 1.0), (6, 2, 1.0)],
            copier_head: (2, 0),
            preferred_token: Some(vocab::class_primary(0)),
            positional_control_head: Some((1, 1)),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.suppressor_heads.is_empty() || self.suppressor_heads.len() > 3 {
            return Err(FfckError::Input(format!(
                "planted circuit supports 1..=3 suppressor heads, got {}",
                self.suppressor_heads.len()
            )));
        }
        let mut placed = vec![(RECALL_HEAD.0, RECALL_HEAD.1), self.copier_head];
        if let Some(ctl) = self.positional_control_head {
            placed.push(ctl);
        }
        for &(l, h, s) in &self.suppressor_heads {
            if s <= 0.0 || !s.is_finite() {
                return Err(FfckError::Input(format!(
                    "suppressor strength must be positive, got {s}"
                )));
            }
            if l <= self.copier_head.0 {
                return Err(FfckError::Input(format!(
                    "suppressor L{l}H{h} must sit above the copier layer {}",
                    self.copier_head.0
                )));
            }
            placed.push((l, h));
        }
        if self.copier_head.0 < 1 {
            return Err(FfckError::Input(
                "copier head must sit above the recall layer 0".into(),
            ));
        }
        if let Some((l, _)) = self.positional_control_head {
            if l < 1 || l > self.copier_head.0 {
                return Err(FfckError::Input(
                    "positional control head must sit between the recall and copier layers"
                        .into(),
                ));
            }
        }
        for &(l, h) in &placed {
            if l >= config.n_layers || h >= config.n_heads {
                return Err(FfckError::Input(format!(
                    "planted head L{l}H{h} outside {}x{} model",
                    config.n_layers, config.n_heads
                )));
            }
        }
        for i in 0..placed.len() {
            for j in i + 1..placed.len() {
                if placed[i] == placed[j] {
                    return Err(FfckError::Input(format!(
                        "planted head L{}H{} assigned twice",
                        placed[i].0, placed[i].1
                    )));
                }
            }
        }
        if let Some(t) = self.preferred_token {
            if vocab::answer_class(t).is_none() {
                return Err(FfckError::Input(format!(
                    "preferred token {t} is not an answer token"
                )));
            }
        }
        Ok(())
    }
}

/// The recall head is always planted at L0H0 (it only needs raw embeddings).
pub const RECALL_HEAD: (usize, usize) = (0, 0);

// Residual-stream block layout (d_model >= 100).
mod dims {
    /// Always-on coordinate, sized per token so its RMS-normalized value is
    /// exactly 1 (used as a position-agnostic key source).
    pub const CONST: usize = 0;
    /// Large coordinate on the QUERY token only; anchors the final-position
    /// query and dominates the final RMS denominator.
    pub const BALLAST: usize = 1;
    pub const BOS_MARK: usize = 2;
    /// Alias-class one-hot carried by answer-token embeddings.
    pub const A_EMB: usize = 4;
    /// Copier write target: class tag at answer-token positions.
    pub const T_TAG: usize = 20;
    /// Ranked-answer preview (subject embeddings; recall target at the final
    /// position).
    pub const U0: usize = 36;
    /// Per-suppressor class write targets, 8 dims each.
    pub const U_SUP: usize = 52;
    /// Per-token identity codes, three 8-dim sub-blocks (one per
    /// suppressor).
    pub const B_ID: usize = 76;
    /// Per-token random filler occupying the remaining dims. Keeps every
    /// position's RMS denominator bounded away from zero, so normalization
    /// cannot amplify stray writes at otherwise information-poor positions
    /// into spuriously large keys.
    pub const CHAFF: usize = 100;
    pub const MIN_D_MODEL: usize = 100;
    pub const N_CLASSES: usize = 16;
    pub const ID_DIMS: usize = 24;
}

// Tuned magnitudes. Frozen by the construction oracle test below; the
// derived analysis thresholds (behavior bands, attention gaps, suppression
// scores) all key off these.
mod consts {
    pub const BALLAST_GAIN: f64 = 24.0;
    pub const A_EMB_GAIN: f64 = 2.0;
    pub const PREF_BOOST: f64 = 1.15;
    pub const PREVIEW_GAIN: f64 = 4.0;
    pub const PREVIEW_DECAY: f64 = 0.6;
    /// Per-subject modulation of the preview magnitude; gives dataset-level
    /// variance to attention quantities so cross-run correlations are
    /// well-defined.
    pub const PREVIEW_JITTER: f64 = 0.15;
    pub const EMBED_NOISE: f64 = 1e-3;
    pub const UNEMBED_NOISE: f64 = 1e-3;

    // unembedding readout gains
    pub const U_PREVIEW: f64 = 8.0;
    pub const U_CLASS: f64 = 8.0;
    pub const U_ID: f64 = 2.0;

    // QK magnitudes
    pub const RECALL_QK: f64 = 1.44;
    pub const COPIER_QK: f64 = 7.9;
    pub const CONTROL_Q: f64 = 2.6;
    pub const CONTROL_K: f64 = 2.5;
    pub const SUP_QK: f64 = 0.53;
    /// Idx-over-category weighting of the suppressor QK class code; large so
    /// competing attention clearly beats relevant-noncompeting.
    pub const QK_KAPPA: f64 = 3.13;
    /// Suppressor drive path: a signed per-class query weighting dotted
    /// against the copier tag's presence (class-summed), adding a per-fact
    /// score offset at the forbidden slot that is shared by any run whose
    /// slot holds an answer token. Gives paired-attention probes real shared
    /// variance without touching the preview magnitudes.
    pub const SUP_DRIVE_Q: f64 = 0.81;
    pub const SUP_DRIVE_K: f64 = 1.0;
    pub const SINK_QK: f64 = 1.4;

    // OV magnitudes
    pub const RECALL_VO: f64 = 0.572;
    pub const COPIER_VO: f64 = 0.454;
    pub const SUP_CLASS_VO: f64 = 0.261;
    pub const SUP_ID_VO: f64 = 0.70;
    pub const SINK_NOISE: f64 = 0.005;
    pub const MLP_IN_NOISE: f64 = 0.05;
    pub const MLP_OUT_NOISE: f64 = 0.002;
}

/// Normalized Hadamard-4 column `m` (orthonormal, entries ±1/2).
fn h4_column(m: usize) -> [f64; 4] {
    const H: [[f64; 4]; 4] = [
        [1.0, 1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0, -1.0],
        [1.0, 1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0, 1.0],
    ];
    let mut out = [0.0; 4];
    for (r, row) in H.iter().enumerate() {
        out[r] = row[m] / 2.0;
    }
    out
}

/// 8-dim OV write code of a class: a Hadamard column in one of two halves.
/// Codes of classes in the same category are exactly orthogonal, so
/// suppressing one class never leaks onto its same-category alternatives.
fn code_ov(class: usize) -> [f64; 8] {
    let cat = class / 4;
    let idx = class % 4;
    let mut out = [0.0; 8];
    let col = h4_column(idx);
    for (r, v) in col.iter().enumerate() {
        out[(cat % 2) * 4 + r] = *v;
    }
    out
}

/// 8-dim QK code of a class: category one-hot plus kappa-weighted index
/// one-hot. Same-category overlap is what makes relevant-noncompeting
/// prompts draw intermediate attention.
fn code_qk(class: usize) -> [f64; 8] {
    let cat = class / 4;
    let idx = class % 4;
    let mut out = [0.0; 8];
    out[cat] = 1.0;
    out[4 + idx] = consts::QK_KAPPA;
    out
}

/// Write a rotary-offset QK pair: the query reads `q_src` on the cosine dims
/// of `pairs`, the key reads `k_src` pre-rotated so the score peaks when the
/// key sits `offset` positions before the query.
fn qk_offset_pair(
    w_q: &mut Matrix,
    w_k: &mut Matrix,
    q_srcs: &[(usize, f64)],
    k_src: usize,
    q_gain: f64,
    k_gain: f64,
    offset: i64,
    pairs: &[usize],
    d_head: usize,
) {
    for &pair in pairs {
        let theta = rope_angle(1, pair, d_head) * offset as f64;
        for &(src, w) in q_srcs {
            w_q.set(2 * pair, src, q_gain * w);
        }
        w_k.set(2 * pair, k_src, k_gain * theta.cos());
        w_k.set(2 * pair + 1, k_src, -k_gain * theta.sin());
    }
}

fn noise_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = gaussian(rng) * scale;
    }
    m
}

/// Attention-sink head: a flat query against a BOS-only key, plus OV noise.
fn sink_head(config: &ModelConfig, rng: &mut ChaCha8Rng) -> HeadWeights {
    let d_head = config.d_head;
    let d_model = config.d_model;
    let mut w_q = Matrix::zeros(d_head, d_model);
    let mut w_k = Matrix::zeros(d_head, d_model);
    // slowest rotary pair: effectively position-free
    w_q.set(d_head - 2, dims::CONST, consts::SINK_QK);
    w_k.set(d_head - 2, dims::BOS_MARK, consts::SINK_QK);
    HeadWeights {
        w_q,
        w_k,
        w_v: noise_matrix(d_head, d_model, consts::SINK_NOISE, rng),
        w_o: noise_matrix(d_model, d_head, consts::SINK_NOISE, rng),
    }
}

fn recall_head(config: &ModelConfig) -> HeadWeights {
    let d_head = config.d_head;
    let d_model = config.d_model;
    let mut w_q = Matrix::zeros(d_head, d_model);
    let mut w_k = Matrix::zeros(d_head, d_model);
    // final-position query (ballast-keyed) against constant keys, peaked at
    // the subject's offset before the query
    let offset = (vocab::FINAL_POS - vocab::SUBJECT_POS) as i64;
    qk_offset_pair(
        &mut w_q,
        &mut w_k,
        &[(dims::BALLAST, 1.0)],
        dims::CONST,
        consts::RECALL_QK,
        consts::RECALL_QK,
        -offset,
        &[0, 1],
        d_head,
    );
    let mut w_v = Matrix::zeros(d_head, d_model);
    let mut w_o = Matrix::zeros(d_model, d_head);
    for j in 0..dims::N_CLASSES {
        w_v.set(j, dims::U0 + j, consts::RECALL_VO);
        w_o.set(dims::U0 + j, j, consts::RECALL_VO);
    }
    HeadWeights { w_q, w_k, w_v, w_o }
}

fn copier_head(config: &ModelConfig) -> HeadWeights {
    let d_head = config.d_head;
    let d_model = config.d_model;
    let mut w_q = Matrix::zeros(d_head, d_model);
    let mut w_k = Matrix::zeros(d_head, d_model);
    // self-attention: constant query against constant keys at offset 0
    qk_offset_pair(
        &mut w_q,
        &mut w_k,
        &[(dims::CONST, 1.0)],
        dims::CONST,
        consts::COPIER_QK,
        consts::COPIER_QK,
        0,
        &[0, 1],
        d_head,
    );
    let mut w_v = Matrix::zeros(d_head, d_model);
    let mut w_o = Matrix::zeros(d_model, d_head);
    for j in 0..dims::N_CLASSES {
        w_v.set(j, dims::A_EMB + j, consts::COPIER_VO);
        w_o.set(dims::T_TAG + j, j, consts::COPIER_VO);
    }
    HeadWeights { w_q, w_k, w_v, w_o }
}

fn control_head(config: &ModelConfig, rng: &mut ChaCha8Rng) -> HeadWeights {
    let d_head = config.d_head;
    let d_model = config.d_model;
    let mut w_q = Matrix::zeros(d_head, d_model);
    let mut w_k = Matrix::zeros(d_head, d_model);
    // query scales with the preview magnitude (fact-dependent, giving the
    // probe a baseline with real variance); keys are constant, peaked at the
    // forbidden slot's offset before the final position
    let offset = (vocab::FINAL_POS - vocab::FORBIDDEN_SLOT) as i64;
    let q_srcs: Vec<(usize, f64)> = (0..dims::N_CLASSES).map(|c| (dims::U0 + c, 1.0)).collect();
    qk_offset_pair(
        &mut w_q,
        &mut w_k,
        &q_srcs,
        dims::CONST,
        consts::CONTROL_Q,
        consts::CONTROL_K,
        -offset,
        &[0, 1],
        d_head,
    );
    HeadWeights {
        w_q,
        w_k,
        w_v: noise_matrix(d_head, d_model, consts::SINK_NOISE, rng),
        w_o: noise_matrix(d_model, d_head, consts::SINK_NOISE, rng),
    }
}

fn suppressor_head(config: &ModelConfig, ordinal: usize, strength: f64) -> HeadWeights {
    let d_head = config.d_head;
    let d_model = config.d_model;
    let slow = d_head - 8; // slowest eight rotary dims carry the class codes
    let mut w_q = Matrix::zeros(d_head, d_model);
    let mut w_k = Matrix::zeros(d_head, d_model);
    for c in 0..dims::N_CLASSES {
        let code = code_qk(c);
        for (j, v) in code.iter().enumerate() {
            // query: expected-answer preview; key: copier's class tag
            w_q.set(slow + j, dims::U0 + c, consts::SUP_QK * v);
            w_k.set(slow + j, dims::T_TAG + c, consts::SUP_QK * v);
        }
        // drive path on a slow-ish rotary pair (rows 6/7): signed per-class
        // query weights against the class-summed tag presence
        let signed = (c as f64 - 4.0) / 8.0;
        w_q.set(slow - 2, dims::U0 + c, consts::SUP_DRIVE_Q * signed);
        w_k.set(slow - 2, dims::T_TAG + c, consts::SUP_DRIVE_K);
    }
    let mut w_v = Matrix::zeros(d_head, d_model);
    let mut w_o = Matrix::zeros(d_model, d_head);
    for c in 0..dims::N_CLASSES {
        let code = code_ov(c);
        for (j, v) in code.iter().enumerate() {
            // class path reads both the raw tag and the copier tag
            w_v.set(j, dims::A_EMB + c, consts::SUP_CLASS_VO * v);
            w_v.set(j, dims::T_TAG + c, consts::SUP_CLASS_VO * v);
        }
    }
    for j in 0..8 {
        let id_src = dims::B_ID + 8 * ordinal + j;
        w_v.set(8 + j, id_src, consts::SUP_ID_VO);
        w_o.set(id_src, 8 + j, -consts::SUP_ID_VO * strength);
        w_o.set(dims::U_SUP + 8 * ordinal + j, j, -consts::SUP_CLASS_VO * strength);
    }
    HeadWeights { w_q, w_k, w_v, w_o }
}

/// Per-token identity codes: ±1/√24 entries, shared within an alias class so
/// a suppressed answer's case variant is suppressed with it.
fn id_codes(vocab_size: usize, rng: &mut ChaCha8Rng) -> Vec<Option<[f64; 24]>> {
    let amp = 1.0 / (dims::ID_DIMS as f64).sqrt();
    let draw = |rng: &mut ChaCha8Rng| {
        let mut code = [0.0; 24];
        for v in &mut code {
            *v = if rng.gen::<bool>() { amp } else { -amp };
        }
        code
    };
    let class_codes: Vec<[f64; 24]> = (0..dims::N_CLASSES).map(|_| draw(rng)).collect();
    (0..vocab_size as u32)
        .map(|t| {
            if t < vocab::SUBJECT_BASE {
                None
            } else if let Some(c) = vocab::answer_class(t) {
                Some(class_codes[c as usize])
            } else {
                Some(draw(rng))
            }
        })
        .collect()
}

/// Construct the planted model. Deterministic in `config.seed`.
pub fn plant_model(config: ModelConfig, spec: &PlantedSpec) -> Result<ModelBundle> {
    config.validate()?;
    spec.validate(&config)?;
    if config.d_model < dims::MIN_D_MODEL {
        return Err(FfckError::Input(format!(
            "planted circuit needs d_model >= {}, got {}",
            dims::MIN_D_MODEL,
            config.d_model
        )));
    }
    if config.d_head < 16 {
        return Err(FfckError::Input(format!(
            "planted circuit needs d_head >= 16, got {}",
            config.d_head
        )));
    }
    if (config.vocab_size as u32) < vocab::MIN_VOCAB {
        return Err(FfckError::Input(format!(
            "planted circuit needs vocab >= {}, got {}",
            vocab::MIN_VOCAB,
            config.vocab_size
        )));
    }
    if config.max_seq < vocab::PROMPT_LEN {
        return Err(FfckError::Input(format!(
            "planted circuit needs max_seq >= {}, got {}",
            vocab::PROMPT_LEN,
            config.max_seq
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x504c_414e);
    let codes = id_codes(config.vocab_size, &mut rng);

    // --- embeddings ---
    let mut embedding = Matrix::zeros(config.vocab_size, config.d_model);
    for t in 0..config.vocab_size {
        let row = embedding.row_mut(t);
        for v in row.iter_mut() {
            *v = gaussian(&mut rng) * consts::EMBED_NOISE;
        }
        if t as u32 == vocab::BOS {
            row[dims::BOS_MARK] = 1.0;
        }
        if t as u32 == vocab::QUERY {
            row[dims::BALLAST] = consts::BALLAST_GAIN;
        }
        if let Some(c) = vocab::answer_class(t as u32) {
            let boost = if spec.preferred_token == Some(t as u32) {
                consts::PREF_BOOST
            } else {
                1.0
            };
            row[dims::A_EMB + c as usize] = consts::A_EMB_GAIN * boost;
        }
        if vocab::is_subject_token(t as u32) {
            let i = t as u32 - vocab::SUBJECT_BASE;
            let gain = consts::PREVIEW_GAIN
                * (1.0 + consts::PREVIEW_JITTER * ((i % 8) as f64) / 8.0);
            for (rank, &c) in vocab::canonical_classes(i).iter().enumerate() {
                row[dims::U0 + c as usize] = gain * consts::PREVIEW_DECAY.powi(rank as i32);
            }
        }
        if let Some(code) = &codes[t] {
            for (j, v) in code.iter().enumerate() {
                row[dims::B_ID + j] = *v;
            }
        }
        // unit-norm chaff: keeps every position's RMS bounded below, so no
        // position can amplify stray writes into spuriously large keys.
        // Answer tokens all carry the same total embedding energy — the
        // preferred one spends more of it on its class tag, the rest get
        // compensating chaff — so normalization cannot cancel the tag boost.
        let chaff_energy = if vocab::answer_class(t as u32).is_some()
            && spec.preferred_token != Some(t as u32)
        {
            1.0 + (consts::PREF_BOOST * consts::PREF_BOOST - 1.0)
                * consts::A_EMB_GAIN
                * consts::A_EMB_GAIN
        } else {
            1.0
        };
        let chaff = &mut row[dims::CHAFF..];
        for v in chaff.iter_mut() {
            *v = gaussian(&mut rng);
        }
        let norm = chaff.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in chaff.iter_mut() {
            *v *= chaff_energy.sqrt() / norm;
        }
        // size the constant coordinate so its RMS-normalized value is 1
        let rest: f64 = row.iter().skip(1).map(|v| v * v).sum();
        row[dims::CONST] = (rest / (config.d_model - 1) as f64).sqrt();
    }

    // --- unembedding ---
    let mut unembed = noise_matrix(config.vocab_size, config.d_model, consts::UNEMBED_NOISE, &mut rng);
    for t in 0..config.vocab_size {
        let row = unembed.row_mut(t);
        if let Some(c) = vocab::answer_class(t as u32) {
            row[dims::U0 + c as usize] += consts::U_PREVIEW;
            let code = code_ov(c as usize);
            for h in 0..3 {
                for (j, v) in code.iter().enumerate() {
                    row[dims::U_SUP + 8 * h + j] += consts::U_CLASS * v;
                }
            }
        }
        if let Some(code) = &codes[t] {
            for (j, v) in code.iter().enumerate() {
                row[dims::B_ID + j] += consts::U_ID * v;
            }
        }
    }

    // --- layers ---
    let mut layers: Vec<LayerWeights> = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let mut heads: Vec<HeadWeights> = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let at = (layer, head);
            let hw = if at == RECALL_HEAD {
                recall_head(&config)
            } else if at == spec.copier_head {
                copier_head(&config)
            } else if spec.positional_control_head == Some(at) {
                control_head(&config, &mut rng)
            } else if let Some(ord) = spec
                .suppressor_heads
                .iter()
                .position(|&(l, h, _)| (l, h) == at)
            {
                suppressor_head(&config, ord, spec.suppressor_heads[ord].2)
            } else {
                sink_head(&config, &mut rng)
            };
            heads.push(hw);
        }
        layers.push(LayerWeights {
            heads,
            attn_gain: Vector::from_vec_unchecked(vec![1.0; config.d_model]),
            mlp_gain: Vector::from_vec_unchecked(vec![1.0; config.d_model]),
            w_gate: noise_matrix(config.d_mlp, config.d_model, consts::MLP_IN_NOISE, &mut rng),
            w_up: noise_matrix(config.d_mlp, config.d_model, consts::MLP_IN_NOISE, &mut rng),
            w_down: noise_matrix(config.d_model, config.d_mlp, consts::MLP_OUT_NOISE, &mut rng),
        });
        let _ = layer;
    }

    ModelBundle::new(
        config.clone(),
        embedding,
        layers,
        Vector::from_vec_unchecked(vec![1.0; config.d_model]),
        unembed,
    )
}
