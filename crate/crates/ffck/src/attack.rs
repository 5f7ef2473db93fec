//! Automated distractor-injection attack: scan the vocabulary for tokens a
//! suppressor head preferentially attends to, inject the best candidate into
//! the preamble of an otherwise-clean noncompeting prompt, measure the induced
//! suppression of the correct answer, and reverse it by first-order patching
//! of the top-ranked components from the clean run.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::check_paired;
use crate::dataset::{render_tokens, render_triple, FactWorld, PromptKind, PromptTriple};
use crate::error::{FfckError, Result};
use crate::model::forward::{answer_probability, forward, recombine, answer_probability_of_logits};
use crate::model::{ComponentId, ModelBundle};
use crate::numerics::log_odds;
use crate::vocab;

/// A scanned distractor token for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackCandidate {
    pub layer: usize,
    pub head: usize,
    pub distractor: u32,
    /// Head's final-token attention mass on the injection window when the
    /// distractor fills it.
    pub preference: f64,
    pub injection_slot: [usize; 2],
}

/// Outcome of one attack evaluation (and, optionally, its patch reversal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub fact_id: usize,
    pub layer: usize,
    pub head: usize,
    pub distractor: u32,
    pub clean_probability: f64,
    pub attacked_probability: f64,
    pub delta_log_odds_nats: f64,
    pub top_before: u32,
    pub top_after: u32,
    pub flipped: bool,
    /// Recovered correct-class probability per patched-set size.
    pub reversal: Vec<ReversalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversalPoint {
    pub k: usize,
    pub recovered_probability: f64,
}

fn check_head(model: &ModelBundle, layer: usize, head: usize) -> Result<()> {
    let config = model.config();
    if layer >= config.n_layers || head >= config.n_heads {
        return Err(FfckError::Input(format!("head L{layer}H{head} outside model")));
    }
    Ok(())
}

fn top_token(logits: &[f64]) -> u32 {
    let mut best = 0usize;
    for (t, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = t;
        }
    }
    best as u32
}

/// Exhaustively scan the vocabulary for the tokens one head most attends to
/// when they fill the injection window of a noncompeting prompt. Ranked by
/// attention, ties broken by vocabulary order.
pub fn token_preference_scan(
    model: &ModelBundle,
    world: &FactWorld,
    fact_id: usize,
    layer: usize,
    head: usize,
) -> Result<Vec<AttackCandidate>> {
    check_head(model, layer, head)?;
    let fact = world.fact(fact_id)?;
    let forbidden = world
        .filler_tokens()
        .first()
        .copied()
        .ok_or_else(|| FfckError::Input("world has no filler tokens".into()))?;
    let mut candidates: Vec<AttackCandidate> = (0..world.vocab_size as u32)
        .into_par_iter()
        .map(|t| {
            let tokens = render_tokens(fact.subject, fact.relation, forbidden, Some(t));
            let trace = forward(model, &tokens)?;
            let row = trace.final_attention_row(layer, head);
            let preference: f64 = vocab::INJECTION_SLOT.iter().map(|&p| row[p]).sum();
            Ok(AttackCandidate {
                layer,
                head,
                distractor: t,
                preference,
                injection_slot: vocab::INJECTION_SLOT,
            })
        })
        .collect::<Result<_>>()?;
    candidates.sort_by(|a, b| {
        b.preference
            .partial_cmp(&a.preference)
            .expect("attention is finite")
            .then(a.distractor.cmp(&b.distractor))
    });
    Ok(candidates)
}

/// Noncompeting prompt with the distractor filling the preamble injection
/// window; differs from the clean prompt only there.
pub fn build_attack_prompt(
    world: &FactWorld,
    fact_id: usize,
    distractor: u32,
    irrelevant_forbidden: u32,
) -> Result<Vec<u32>> {
    let fact = world.fact(fact_id)?;
    for t in [distractor, irrelevant_forbidden] {
        if t as usize >= world.vocab_size {
            return Err(FfckError::Input(format!("token {t} out of vocab")));
        }
    }
    Ok(render_tokens(
        fact.subject,
        fact.relation,
        irrelevant_forbidden,
        Some(distractor),
    ))
}

fn check_noncompeting(world: &FactWorld, triple: &PromptTriple) -> Result<()> {
    if world
        .answer_class_tokens(triple.answer)
        .contains(&triple.irrelevant_forbidden)
    {
        return Err(FfckError::Input(format!(
            "fact {}: forbidden word {} competes with the answer; the attack \
             baseline must be noncompeting",
            triple.fact_id, triple.irrelevant_forbidden
        )));
    }
    Ok(())
}

/// Clean vs attacked correct-class probability for one candidate on one
/// fact's noncompeting prompt.
pub fn evaluate_attack(
    model: &ModelBundle,
    world: &FactWorld,
    triple: &PromptTriple,
    candidate: &AttackCandidate,
) -> Result<AttackResult> {
    check_head(model, candidate.layer, candidate.head)?;
    check_noncompeting(world, triple)?;
    let clean_tokens = render_triple(world, triple, PromptKind::IrrelevantNoncompeting)?;
    let attacked_tokens = build_attack_prompt(
        world,
        triple.fact_id,
        candidate.distractor,
        triple.irrelevant_forbidden,
    )?;
    let clean = forward(model, &clean_tokens)?;
    let attacked = forward(model, &attacked_tokens)?;
    let class = world.answer_class_tokens(triple.answer);
    let clean_probability = answer_probability(&clean, &class)?;
    let attacked_probability = answer_probability(&attacked, &class)?;
    let delta = log_odds(attacked_probability).clamped_nats()
        - log_odds(clean_probability).clamped_nats();
    let (clean_probability, attacked_probability) =
        (clean_probability.value(), attacked_probability.value());
    let top_before = top_token(&clean.final_logits);
    let top_after = top_token(&attacked.final_logits);
    Ok(AttackResult {
        fact_id: triple.fact_id,
        layer: candidate.layer,
        head: candidate.head,
        distractor: candidate.distractor,
        clean_probability,
        attacked_probability,
        delta_log_odds_nats: delta,
        top_before,
        top_after,
        flipped: top_before != top_after,
        reversal: Vec::new(),
    })
}

/// Patch the top-k ranked components of the clean run into the attacked
/// run's recombination for every requested k, recording the recovered
/// correct-class probability.
pub fn reverse_attack_by_patching(
    model: &ModelBundle,
    world: &FactWorld,
    triple: &PromptTriple,
    candidate: &AttackCandidate,
    ranking: &[ComponentId],
    k_values: &[usize],
) -> Result<AttackResult> {
    let config = model.config();
    let mut seen = vec![false; config.n_components()];
    for c in ranking {
        let idx = c.index(config);
        if idx >= seen.len() {
            return Err(FfckError::Input(format!("component {c} outside model")));
        }
        if seen[idx] {
            return Err(FfckError::Input(format!("component {c} ranked twice")));
        }
        seen[idx] = true;
    }
    let mut result = evaluate_attack(model, world, triple, candidate)?;
    let clean_tokens = render_triple(world, triple, PromptKind::IrrelevantNoncompeting)?;
    let attacked_tokens = build_attack_prompt(
        world,
        triple.fact_id,
        candidate.distractor,
        triple.irrelevant_forbidden,
    )?;
    let clean = forward(model, &clean_tokens)?;
    let attacked = forward(model, &attacked_tokens)?;
    let class = world.answer_class_tokens(triple.answer);
    check_paired(&attacked, &clean)?;
    for &k in k_values {
        if k > ranking.len() {
            return Err(FfckError::Input(format!(
                "patched-set size {k} exceeds ranking length {}",
                ranking.len()
            )));
        }
        let overrides: Vec<(usize, _)> = ranking[..k]
            .iter()
            .map(|c| {
                let idx = c.index(config);
                (idx, &clean.last_token_components[idx])
            })
            .collect();
        let logits = recombine(model, &attacked.last_token_components, &overrides)?;
        let recovered_probability = answer_probability_of_logits(&logits, &class)?;
        result.reversal.push(ReversalPoint {
            k,
            recovered_probability: recovered_probability.value(),
        });
    }
    Ok(result)
}

/// The same attack evaluated with `n` uniformly drawn distractor tokens;
/// the distributional view of how specific the attack is to its distractor.
pub fn random_distractor_deltas(
    model: &ModelBundle,
    world: &FactWorld,
    triple: &PromptTriple,
    layer: usize,
    head: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    check_head(model, layer, head)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<u32> = (0..n)
        .map(|_| rng.gen_range(0..world.vocab_size as u32))
        .collect();
    tokens
        .par_iter()
        .map(|&t| {
            let candidate = AttackCandidate {
                layer,
                head,
                distractor: t,
                preference: 0.0,
                injection_slot: vocab::INJECTION_SLOT,
            };
            evaluate_attack(model, world, triple, &candidate)
        })
        .collect()
}

/// One JSON object per attack result.
pub fn write_attack_jsonl<W: Write>(w: &mut W, results: &[AttackResult]) -> Result<()> {
    for r in results {
        let line = serde_json::to_string(r)
            .map_err(|e| FfckError::Input(format!("attack result serialization: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Summary CSV, one row per result.
pub fn write_attack_csv<W: Write>(w: &mut W, results: &[AttackResult]) -> Result<()> {
    writeln!(
        w,
        "layer,head,fact_id,distractor,clean_probability,attacked_probability,delta_log_odds_nats,flipped"
    )?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{:.9},{:.9},{:.9},{}",
            r.layer,
            r.head,
            r.fact_id,
            r.distractor,
            r.clean_probability,
            r.attacked_probability,
            r.delta_log_odds_nats,
            r.flipped
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::component_importance;
    use crate::dataset::{canonical_world, make_triples};
    use crate::model::plant::{plant_model, PlantedSpec};
    use crate::model::ModelConfig;
    use crate::tensor::Matrix;

    fn planted() -> (ModelBundle, PlantedSpec) {
        let spec = PlantedSpec::toy_default();
        let model = plant_model(ModelConfig::toy_default(11), &spec).unwrap();
        (model, spec)
    }

    /// Fact whose top answer is in the preferred token's alias class.
    fn preferred_fact(world: &FactWorld, spec: &PlantedSpec) -> usize {
        let class = vocab::answer_class(spec.preferred_token.unwrap()).unwrap();
        world
            .facts
            .iter()
            .position(|f| vocab::answer_class(f.answers[0]) == Some(class))
            .unwrap()
    }

    #[test]
    fn scan_recovers_preferred_token_deterministically() {
        let (model, spec) = planted();
        let world = canonical_world(12, 512).unwrap();
        let fact_id = preferred_fact(&world, &spec);
        let (l, h, _) = spec.suppressor_heads[0];
        let scan = token_preference_scan(&model, &world, fact_id, l, h).unwrap();
        assert_eq!(scan[0].distractor, spec.preferred_token.unwrap());
        assert_eq!(scan.len(), world.vocab_size);
        let mut seen: Vec<u32> = scan.iter().map(|c| c.distractor).collect();
        seen.sort_unstable();
        assert!(seen.iter().enumerate().all(|(i, &t)| t == i as u32));
        assert!(scan.iter().all(|c| c.preference.is_finite()));

        let again = token_preference_scan(&model, &world, fact_id, l, h).unwrap();
        assert_eq!(scan, again);
        assert!(token_preference_scan(&model, &world, fact_id, 99, 0).is_err());
    }

    #[test]
    fn degenerate_head_ranks_in_vocab_order() {
        let (mut model, _) = planted();
        let config = model.config().clone();
        // a flat-attention head: zero queries, every key position equal
        model.layers[3].heads[4].w_q = Matrix::zeros(config.d_head, config.d_model);
        let world = canonical_world(12, 512).unwrap();
        let scan = token_preference_scan(&model, &world, 0, 3, 4).unwrap();
        assert!(scan
            .windows(2)
            .all(|w| w[0].distractor < w[1].distractor));
    }

    #[test]
    fn attack_prompt_locality_and_pad_equivalence() {
        let (model, _) = planted();
        let world = canonical_world(12, 512).unwrap();
        let triples = make_triples(&world);
        let triple = &triples[0];
        let clean = render_triple(&world, triple, PromptKind::IrrelevantNoncompeting).unwrap();
        let attacked =
            build_attack_prompt(&world, triple.fact_id, 200, triple.irrelevant_forbidden).unwrap();
        assert_eq!(attacked.len(), clean.len());
        assert_eq!(attacked.len(), vocab::PROMPT_LEN);
        let diff: Vec<usize> = (0..clean.len()).filter(|&p| clean[p] != attacked[p]).collect();
        assert_eq!(diff, vocab::INJECTION_SLOT.to_vec());

        let padded =
            build_attack_prompt(&world, triple.fact_id, vocab::PAD, triple.irrelevant_forbidden)
                .unwrap();
        let class = world.answer_class_tokens(triple.answer);
        let p_clean = answer_probability(&forward(&model, &clean).unwrap(), &class).unwrap();
        let p_pad = answer_probability(&forward(&model, &padded).unwrap(), &class).unwrap();
        assert!(
            (p_clean.value() - p_pad.value()).abs() < 0.01,
            "padding distractor shifted probability by {}",
            (p_clean.value() - p_pad.value()).abs()
        );

        assert!(build_attack_prompt(&world, 999, 200, triple.irrelevant_forbidden).is_err());
        assert!(build_attack_prompt(&world, 0, 100_000, triple.irrelevant_forbidden).is_err());
    }

    #[test]
    fn preferred_distractor_attacks_and_random_ones_do_not() {
        let (model, spec) = planted();
        let world = canonical_world(12, 512).unwrap();
        let triples = make_triples(&world);
        let triple = &triples[preferred_fact(&world, &spec)];
        let (l, h, _) = spec.suppressor_heads[0];
        let candidate = AttackCandidate {
            layer: l,
            head: h,
            distractor: spec.preferred_token.unwrap(),
            preference: 1.0,
            injection_slot: vocab::INJECTION_SLOT,
        };
        let result = evaluate_attack(&model, &world, triple, &candidate).unwrap();
        assert!(
            result.delta_log_odds_nats <= -2.0,
            "attack shifted only {:.3} nats",
            result.delta_log_odds_nats
        );
        assert!(result.flipped);
        let answer_class = vocab::answer_class(triple.answer);
        assert_eq!(vocab::answer_class(result.top_before), answer_class);
        assert_ne!(vocab::answer_class(result.top_after), answer_class);

        let deltas = random_distractor_deltas(&model, &world, triple, l, h, 100, 11).unwrap();
        assert_eq!(deltas.len(), 100);
        let mut mags: Vec<f64> = deltas
            .iter()
            .map(|r| r.delta_log_odds_nats.abs())
            .collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = mags[mags.len() / 2];
        assert!(median < 0.5, "random-distractor median {median:.3}");
    }

    #[test]
    fn reversal_recovers_at_planted_count() {
        let (model, spec) = planted();
        let world = canonical_world(12, 512).unwrap();
        let triples = make_triples(&world);
        let triple = &triples[preferred_fact(&world, &spec)];
        let (l, h, _) = spec.suppressor_heads[0];
        let candidate = AttackCandidate {
            layer: l,
            head: h,
            distractor: spec.preferred_token.unwrap(),
            preference: 1.0,
            injection_slot: vocab::INJECTION_SLOT,
        };
        let table = component_importance(&model, &world, &triples).unwrap();
        let planted_count = spec.suppressor_heads.len();
        let total = model.config().n_components();
        let k_values: Vec<usize> = (0..=planted_count).chain([total]).collect();
        let result = reverse_attack_by_patching(
            &model,
            &world,
            triple,
            &candidate,
            &table.ranking,
            &k_values,
        )
        .unwrap();

        assert_eq!(result.reversal[0].recovered_probability, result.attacked_probability);
        let clean = result.clean_probability;
        let full = result.reversal.last().unwrap().recovered_probability;
        assert!((full - clean).abs() < 1e-6, "full patch off by {}", (full - clean).abs());
        for w in result.reversal[..=planted_count].windows(2) {
            assert!(
                w[1].recovered_probability >= w[0].recovered_probability,
                "reversal not monotone over the planted prefix"
            );
        }
        let recovered = result.reversal[planted_count].recovered_probability;
        assert!(recovered > 0.5, "k = planted count recovered only {recovered:.3}");

        // degenerate baseline and malformed rankings are rejected
        let mut competing = (*triple).clone();
        competing.irrelevant_forbidden = competing.answer;
        assert!(evaluate_attack(&model, &world, &competing, &candidate).is_err());
        let mut dup = table.ranking.clone();
        dup[1] = dup[0];
        assert!(reverse_attack_by_patching(&model, &world, triple, &candidate, &dup, &[1]).is_err());
        assert!(reverse_attack_by_patching(
            &model,
            &world,
            triple,
            &candidate,
            &table.ranking,
            &[total + 1]
        )
        .is_err());
    }

    #[test]
    fn report_writers_emit_one_row_per_result() {
        let (model, spec) = planted();
        let world = canonical_world(12, 512).unwrap();
        let triples = make_triples(&world);
        let triple = &triples[preferred_fact(&world, &spec)];
        let (l, h, _) = spec.suppressor_heads[0];
        let candidate = AttackCandidate {
            layer: l,
            head: h,
            distractor: spec.preferred_token.unwrap(),
            preference: 1.0,
            injection_slot: vocab::INJECTION_SLOT,
        };
        let result = evaluate_attack(&model, &world, triple, &candidate).unwrap();
        let results = vec![result.clone(), result];

        let mut jsonl = Vec::new();
        write_attack_jsonl(&mut jsonl, &results).unwrap();
        let text = String::from_utf8(jsonl).unwrap();
        assert_eq!(text.lines().count(), 2);
        for line in text.lines() {
            let parsed: AttackResult = serde_json::from_str(line).unwrap();
            assert_eq!(parsed, results[0]);
        }

        let mut csv = Vec::new();
        write_attack_csv(&mut csv, &results).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("layer,head,fact_id,distractor,"));
    }
}
