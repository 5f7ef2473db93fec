//! Forward pass with full activation capture and the residual-stream
//! decomposition into per-component last-token contributions.

use crate::error::{FfckError, Result};
use crate::model::{ComponentId, ModelBundle, ModelConfig};
use crate::numerics::{
    rms_normalize_unchecked, rope_apply_unchecked, softmax_unchecked, Probability,
};
use crate::tensor::{dot, Matrix, Vector};

/// Every activation of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub token_ids: Vec<u32>,
    /// `residual_by_layer[l]` is the residual stream holding the embedding
    /// plus all components of layers `< l`; index 0 is the raw embedding and
    /// index `n_layers` the pre-final-norm stream. Shape (seq, d_model) each.
    pub residual_by_layer: Vec<Matrix>,
    /// `attention[layer][head]` is the (seq, seq) pattern; row `p` holds the
    /// softmax over key positions `0..=p` and zeros above the diagonal.
    pub attention: Vec<Vec<Matrix>>,
    /// Last-token residual contribution of every component, indexed by
    /// [`ComponentId::index`].
    pub last_token_components: Vec<Vector>,
    pub final_logits: Vec<f64>,
}

impl ActivationTrace {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn last_pos(&self) -> usize {
        self.token_ids.len() - 1
    }

    pub fn component(&self, id: ComponentId, config: &ModelConfig) -> &Vector {
        &self.last_token_components[id.index(config)]
    }

    /// Final-token attention row of one head.
    pub fn final_attention_row(&self, layer: usize, head: usize) -> &[f64] {
        self.attention[layer][head].row(self.last_pos())
    }

    /// Pre-final-norm residual at the last position (the sum the component
    /// decomposition must reproduce).
    pub fn pre_norm_residual(&self) -> &[f64] {
        let last = self.last_pos();
        self.residual_by_layer
            .last()
            .expect("trace has residual snapshots")
            .row(last)
    }
}

/// Attention-score scale used everywhere (forward pass and probes).
pub fn score_scale(d_head: usize) -> f64 {
    1.0 / (d_head as f64).sqrt()
}

/// Causal softmax attention row for query position `pos`: scores over key
/// positions `0..=pos`, zeros above. Shared by the forward pass and every
/// head probe so recomputed rows match the trace bitwise.
pub fn attention_row(q_roped: &[f64], keys_roped: &[Vec<f64>], pos: usize, scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = keys_roped[..=pos]
        .iter()
        .map(|k| dot(q_roped, k) * scale)
        .collect();
    let mut row = softmax_unchecked(&scores);
    row.resize(keys_roped.len(), 0.0);
    row
}

/// Query vector of a head at `pos` given the residual stream feeding it.
pub fn head_query(model: &ModelBundle, layer: usize, head: usize, residual: &[f64], pos: usize) -> Vec<f64> {
    let lw = &model.layers[layer];
    let normed = rms_normalize_unchecked(residual, lw.attn_gain.as_slice());
    rope_apply_unchecked(&lw.heads[head].w_q.matvec(&normed), pos)
}

/// Key vector of a head at `pos` given the residual stream feeding it.
pub fn head_key(model: &ModelBundle, layer: usize, head: usize, residual: &[f64], pos: usize) -> Vec<f64> {
    let lw = &model.layers[layer];
    let normed = rms_normalize_unchecked(residual, lw.attn_gain.as_slice());
    rope_apply_unchecked(&lw.heads[head].w_k.matvec(&normed), pos)
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Run the model on `tokens`, capturing every head's attention pattern and
/// every component's last-token contribution.
pub fn forward(model: &ModelBundle, tokens: &[u32]) -> Result<ActivationTrace> {
    let config = model.config();
    if tokens.is_empty() {
        return Err(FfckError::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq {
        return Err(FfckError::Input(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            config.max_seq
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(FfckError::Input(format!(
            "token id {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }

    let seq = tokens.len();
    let d_model = config.d_model;
    let last = seq - 1;
    let scale = score_scale(config.d_head);

    // Residual stream, one row per position.
    let mut h = Matrix::zeros(seq, d_model);
    for (p, &t) in tokens.iter().enumerate() {
        h.row_mut(p).copy_from_slice(model.embedding.row(t as usize));
    }

    let mut components: Vec<Vector> = vec![Vector::zeros(d_model); config.n_components()];
    components[ComponentId::Embedding.index(config)] =
        Vector::from_vec_unchecked(h.row(last).to_vec());

    let mut residual_by_layer: Vec<Matrix> = Vec::with_capacity(config.n_layers + 1);
    let mut attention: Vec<Vec<Matrix>> = Vec::with_capacity(config.n_layers);

    for layer in 0..config.n_layers {
        residual_by_layer.push(h.clone());
        let lw = &model.layers[layer];

        // Normalized attention inputs.
        let normed: Vec<Vec<f64>> = (0..seq)
            .map(|p| rms_normalize_unchecked(h.row(p), lw.attn_gain.as_slice()))
            .collect();

        let mut layer_attn: Vec<Matrix> = Vec::with_capacity(config.n_heads);
        let mut head_outs: Vec<Matrix> = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let hw = &lw.heads[head];
            let qs: Vec<Vec<f64>> = (0..seq)
                .map(|p| rope_apply_unchecked(&hw.w_q.matvec(&normed[p]), p))
                .collect();
            let ks: Vec<Vec<f64>> = (0..seq)
                .map(|p| rope_apply_unchecked(&hw.w_k.matvec(&normed[p]), p))
                .collect();
            let vs: Vec<Vec<f64>> = (0..seq).map(|p| hw.w_v.matvec(&normed[p])).collect();

            let mut pattern = Matrix::zeros(seq, seq);
            let mut outs = Matrix::zeros(seq, d_model);
            for p in 0..seq {
                let row = attention_row(&qs[p], &ks, p, scale);
                let mut z = vec![0.0; config.d_head];
                for (j, w) in row.iter().enumerate().take(p + 1) {
                    for (zd, vd) in z.iter_mut().zip(vs[j].iter()) {
                        *zd += w * vd;
                    }
                }
                outs.row_mut(p).copy_from_slice(&hw.w_o.matvec(&z));
                pattern.row_mut(p).copy_from_slice(&row);
            }
            layer_attn.push(pattern);
            head_outs.push(outs);
        }

        for (head, outs) in head_outs.iter().enumerate() {
            for p in 0..seq {
                for (hd, od) in h.row_mut(p).iter_mut().zip(outs.row(p)) {
                    *hd += od;
                }
            }
            components[ComponentId::Head { layer, head }.index(config)] =
                Vector::from_vec_unchecked(outs.row(last).to_vec());
        }
        attention.push(layer_attn);

        // Gated MLP.
        let mut mlp_last = Vector::zeros(d_model);
        for p in 0..seq {
            let m_in = rms_normalize_unchecked(h.row(p), lw.mlp_gain.as_slice());
            let gate = lw.w_gate.matvec(&m_in);
            let up = lw.w_up.matvec(&m_in);
            let act: Vec<f64> = gate.iter().zip(up.iter()).map(|(g, u)| silu(*g) * u).collect();
            let out = lw.w_down.matvec(&act);
            if p == last {
                mlp_last = Vector::from_vec_unchecked(out.clone());
            }
            for (hd, od) in h.row_mut(p).iter_mut().zip(out.iter()) {
                *hd += od;
            }
        }
        components[ComponentId::Mlp { layer }.index(config)] = mlp_last;
    }
    residual_by_layer.push(h.clone());

    let final_normed = rms_normalize_unchecked(h.row(last), model.final_gain.as_slice());
    let final_logits = model.unembed.matvec(&final_normed);

    Ok(ActivationTrace {
        token_ids: tokens.to_vec(),
        residual_by_layer,
        attention,
        last_token_components: components,
        final_logits,
    })
}

/// Sum-of-softmax probability the model assigns to any token in
/// `answer_class` (class members deduplicated, summed in ascending id order).
pub fn answer_probability(trace: &ActivationTrace, answer_class: &[u32]) -> Result<Probability> {
    answer_probability_of_logits(&trace.final_logits, answer_class)
}

pub fn answer_probability_of_logits(logits: &[f64], answer_class: &[u32]) -> Result<Probability> {
    if answer_class.is_empty() {
        return Err(FfckError::Input("empty answer class".into()));
    }
    let probs = softmax_unchecked(logits);
    let mut class: Vec<u32> = answer_class.to_vec();
    class.sort_unstable();
    class.dedup();
    let mut p = 0.0;
    for t in class {
        let t = t as usize;
        if t >= logits.len() {
            return Err(FfckError::Input(format!("answer token {t} out of vocab")));
        }
        p += probs[t];
    }
    Probability::new(p.min(1.0))
}

/// Recombine last-token components into final logits, with selected
/// components overridden. `overrides` maps a canonical component index to the
/// replacement contribution. Components are summed in canonical order.
pub fn recombine(
    model: &ModelBundle,
    components: &[Vector],
    overrides: &[(usize, &Vector)],
) -> Result<Vec<f64>> {
    let config = model.config();
    if components.len() != config.n_components() {
        return Err(FfckError::dimension(
            config.n_components(),
            components.len(),
            "component set",
        ));
    }
    let mut table: Vec<Option<&Vector>> = vec![None; components.len()];
    for &(idx, v) in overrides {
        if idx >= components.len() {
            return Err(FfckError::Input(format!(
                "override component index {idx} out of range"
            )));
        }
        if v.len() != config.d_model {
            return Err(FfckError::dimension(config.d_model, v.len(), "override vector"));
        }
        table[idx] = Some(v);
    }
    let mut sum = Vector::zeros(config.d_model);
    for (idx, c) in components.iter().enumerate() {
        let v = table[idx].unwrap_or(c);
        if c.len() != config.d_model {
            return Err(FfckError::dimension(config.d_model, c.len(), "component vector"));
        }
        sum.add_assign(v);
    }
    let normed = rms_normalize_unchecked(sum.as_slice(), model.final_gain.as_slice());
    Ok(model.unembed.matvec(&normed))
}

/// Max abs difference between the component sum and the pre-final-norm
/// residual stream (the decomposition identity).
pub fn decomposition_gap(trace: &ActivationTrace) -> f64 {
    let mut sum = Vector::zeros(trace.last_token_components[0].len());
    for c in &trace.last_token_components {
        sum.add_assign(c);
    }
    sum.as_slice()
        .iter()
        .zip(trace.pre_norm_residual())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn micro_model() -> ModelBundle {
        ModelBundle::random(ModelConfig::micro(42)).unwrap()
    }

    #[test]
    fn single_token_prompt_has_full_component_count() {
        let m = micro_model();
        let t = forward(&m, &[3]).unwrap();
        assert_eq!(
            t.last_token_components.len(),
            m.config().n_components()
        );
        assert_eq!(t.residual_by_layer.len(), m.config().n_layers + 1);
    }

    #[test]
    fn decomposition_identity() {
        let m = micro_model();
        let t = forward(&m, &[1, 5, 9, 2, 30]).unwrap();
        assert!(decomposition_gap(&t) < 1e-5, "gap {}", decomposition_gap(&t));
        // recombine with no overrides reproduces final logits
        let logits = recombine(&m, &t.last_token_components, &[]).unwrap();
        for (a, b) in logits.iter().zip(t.final_logits.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn self_override_is_identity() {
        let m = micro_model();
        let t = forward(&m, &[7, 8, 9]).unwrap();
        let overrides: Vec<(usize, &Vector)> = t
            .last_token_components
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v))
            .collect();
        let logits = recombine(&m, &t.last_token_components, &overrides).unwrap();
        for (a, b) in logits.iter().zip(t.final_logits.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn full_override_reproduces_other_trace() {
        let m = micro_model();
        let a = forward(&m, &[7, 8, 9, 1]).unwrap();
        let b = forward(&m, &[7, 2, 9, 1]).unwrap();
        let overrides: Vec<(usize, &Vector)> = b
            .last_token_components
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v))
            .collect();
        let logits = recombine(&m, &a.last_token_components, &overrides).unwrap();
        for (x, y) in logits.iter().zip(b.final_logits.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = micro_model();
        let t = forward(&m, &[4, 4, 4, 4, 4, 4]).unwrap();
        for layer in &t.attention {
            for pattern in layer {
                for p in 0..t.seq_len() {
                    let s: f64 = pattern.row(p).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    for j in p + 1..t.seq_len() {
                        assert_eq!(pattern.get(p, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn answer_probability_basics() {
        let m = micro_model();
        let t = forward(&m, &[1, 2, 3]).unwrap();
        let vocab = m.config().vocab_size as u32;
        let all: Vec<u32> = (0..vocab).collect();
        let p = answer_probability(&t, &all).unwrap();
        assert!((p.value() - 1.0).abs() < 1e-12);
        // argmax singleton beats any other singleton
        let probs = softmax_unchecked(&t.final_logits);
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as u32;
        let p_max = answer_probability(&t, &[argmax]).unwrap().value();
        for t_id in 0..vocab {
            let p_t = answer_probability(&t, &[t_id]).unwrap().value();
            assert!(p_max >= p_t);
        }
        // class additivity
        let p_pair = answer_probability(&t, &[1, 2]).unwrap().value();
        let p1 = answer_probability(&t, &[1]).unwrap().value();
        let p2 = answer_probability(&t, &[2]).unwrap().value();
        assert!((p_pair - (p1 + p2)).abs() < 1e-12);
        assert!(answer_probability(&t, &[]).is_err());
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = micro_model();
        assert!(forward(&m, &[9999]).is_err());
        assert!(forward(&m, &[]).is_err());
        let long = vec![0u32; m.config().max_seq + 1];
        assert!(forward(&m, &long).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = micro_model();
        let a = forward(&m, &[1, 2, 3, 4]).unwrap();
        let b = forward(&m, &[1, 2, 3, 4]).unwrap();
        assert_eq!(a.final_logits, b.final_logits);
        assert_eq!(a.last_token_components.len(), b.last_token_components.len());
        for (x, y) in a
            .last_token_components
            .iter()
            .zip(b.last_token_components.iter())
        {
            assert_eq!(x, y);
        }
    }
}
