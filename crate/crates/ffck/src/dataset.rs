//! Synthetic forbidden-fact dataset: fact-world generation, the three-way
//! prompt rendering, behavioral filtering, and the incorrect-answer-origin
//! analysis.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FfckError, Result};
use crate::model::forward::{answer_probability, forward};
use crate::model::ModelBundle;
use crate::numerics::{log_odds, Probability};
use crate::vocab;

/// Sizes of a generated fact world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSizes {
    pub n_facts: usize,
    pub n_categories: u32,
    pub classes_per_category: u32,
    pub n_relations: u32,
}

impl Default for WorldSizes {
    fn default() -> Self {
        WorldSizes {
            n_facts: 96,
            n_categories: 4,
            classes_per_category: 4,
            n_relations: 8,
        }
    }
}

/// One fact: a subject/relation prefix and a ranked list of answer tokens
/// (class representatives, most preferred first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: u32,
    pub relation: u32,
    /// Ranked answers; distinct alias classes, all in one category.
    pub answers: Vec<u32>,
}

/// Generated fact world over the fixed vocabulary layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactWorld {
    pub seed: u64,
    pub sizes: WorldSizes,
    pub vocab_size: usize,
    pub facts: Vec<Fact>,
    /// answer token -> alias-class id
    pub alias_map: BTreeMap<u32, u32>,
}

impl FactWorld {
    pub fn fact(&self, fact_id: usize) -> Result<&Fact> {
        self.facts
            .get(fact_id)
            .ok_or_else(|| FfckError::Input(format!("unknown fact id {fact_id}")))
    }

    /// All alias-class members of the answer's class (the class-summed
    /// answer set used everywhere probabilities are evaluated).
    pub fn answer_class_tokens(&self, answer: u32) -> Vec<u32> {
        match vocab::answer_class(answer) {
            Some(class) => vocab::class_tokens(class).to_vec(),
            None => vec![answer],
        }
    }

    pub fn filler_tokens(&self) -> Vec<u32> {
        (vocab::FILLER_BASE..self.vocab_size as u32).collect()
    }
}

/// One fact rendered three ways; all renders share the fact prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTriple {
    pub fact_id: usize,
    pub prefix_tokens: Vec<u32>,
    pub answer: u32,
    pub competing_forbidden: u32,
    pub relevant_forbidden: u32,
    pub irrelevant_forbidden: u32,
    pub forbidden_slot_index: usize,
}

/// Which of the three renders of a triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Competing,
    RelevantNoncompeting,
    IrrelevantNoncompeting,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [
        PromptKind::Competing,
        PromptKind::RelevantNoncompeting,
        PromptKind::IrrelevantNoncompeting,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PromptKind::Competing => "competing",
            PromptKind::RelevantNoncompeting => "relevant_nc",
            PromptKind::IrrelevantNoncompeting => "irrelevant_nc",
        }
    }
}

impl PromptTriple {
    pub fn forbidden(&self, kind: PromptKind) -> u32 {
        match kind {
            PromptKind::Competing => self.competing_forbidden,
            PromptKind::RelevantNoncompeting => self.relevant_forbidden,
            PromptKind::IrrelevantNoncompeting => self.irrelevant_forbidden,
        }
    }
}

/// Deterministic world generation. Subjects are assigned one fact each;
/// every ranked answer list holds three distinct alias classes drawn from a
/// single category, so relevant vs irrelevant forbidden words are
/// well-defined.
pub fn generate_world(seed: u64, sizes: WorldSizes, vocab_size: usize) -> Result<FactWorld> {
    let n_classes = sizes.n_categories * sizes.classes_per_category;
    if n_classes > vocab::MAX_ANSWER_CLASSES {
        return Err(FfckError::Input(format!(
            "{n_classes} alias classes exceed the layout maximum {}",
            vocab::MAX_ANSWER_CLASSES
        )));
    }
    if sizes.n_facts > vocab::MAX_SUBJECTS as usize {
        return Err(FfckError::Input(format!(
            "{} facts exceed the subject region capacity {}",
            sizes.n_facts,
            vocab::MAX_SUBJECTS
        )));
    }
    if sizes.n_relations == 0 || sizes.n_relations > vocab::MAX_RELATIONS {
        return Err(FfckError::Input(format!(
            "n_relations {} outside 1..={}",
            sizes.n_relations,
            vocab::MAX_RELATIONS
        )));
    }
    if sizes.classes_per_category < 3 {
        return Err(FfckError::Input(
            "need at least 3 classes per category for a ranked list".into(),
        ));
    }
    if (vocab_size as u32) < vocab::MIN_VOCAB {
        return Err(FfckError::Input(format!(
            "vocab {vocab_size} below layout minimum {}",
            vocab::MIN_VOCAB
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut facts = Vec::with_capacity(sizes.n_facts);
    for fact_id in 0..sizes.n_facts {
        let subject = vocab::SUBJECT_BASE + fact_id as u32;
        let relation = vocab::RELATION_BASE + rng.gen_range(0..sizes.n_relations);
        let category = rng.gen_range(0..sizes.n_categories);
        let mut classes: Vec<u32> = (0..sizes.classes_per_category)
            .map(|i| category * sizes.classes_per_category + i)
            .collect();
        classes.shuffle(&mut rng);
        classes.truncate(3);
        let answers: Vec<u32> = classes.iter().map(|&c| vocab::class_primary(c)).collect();
        facts.push(Fact {
            subject,
            relation,
            answers,
        });
    }

    let mut alias_map = BTreeMap::new();
    for class in 0..n_classes {
        for t in vocab::class_tokens(class) {
            alias_map.insert(t, class);
        }
    }

    Ok(FactWorld {
        seed,
        sizes,
        vocab_size,
        facts,
        alias_map,
    })
}

/// The fixed fact world matching the planted circuit's hard-wired
/// subject-to-answer mapping ([`vocab::canonical_classes`]). Analyses of a
/// planted model must run on this world.
pub fn canonical_world(n_facts: usize, vocab_size: usize) -> Result<FactWorld> {
    let sizes = WorldSizes {
        n_facts,
        n_categories: 4,
        classes_per_category: 4,
        n_relations: 8,
    };
    // reuse generate_world's validation, then overwrite the fact table
    let mut world = generate_world(0, sizes, vocab_size)?;
    for (i, fact) in world.facts.iter_mut().enumerate() {
        let classes = vocab::canonical_classes(i as u32);
        fact.relation = vocab::RELATION_BASE + (i as u32 % sizes.n_relations);
        fact.answers = classes.iter().map(|&c| vocab::class_primary(c)).collect();
    }
    Ok(world)
}

/// The three-way triples of a world, with a deterministic irrelevant
/// forbidden word per fact.
pub fn make_triples(world: &FactWorld) -> Vec<PromptTriple> {
    let fillers = world.filler_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed.wrapping_add(0x7269));
    world
        .facts
        .iter()
        .enumerate()
        .map(|(fact_id, fact)| {
            let irrelevant = fillers[rng.gen_range(0..fillers.len())];
            PromptTriple {
                fact_id,
                prefix_tokens: vec![fact.subject, fact.relation],
                answer: fact.answers[0],
                competing_forbidden: fact.answers[0],
                relevant_forbidden: fact.answers[1],
                irrelevant_forbidden: irrelevant,
                forbidden_slot_index: vocab::FORBIDDEN_SLOT,
            }
        })
        .collect()
}

/// Render one prompt. The forbidden token lands at
/// [`vocab::FORBIDDEN_SLOT`]; the final position is the prediction site.
pub fn render_prompt(world: &FactWorld, fact_id: usize, forbidden: u32) -> Result<Vec<u32>> {
    let fact = world.fact(fact_id)?;
    if forbidden as usize >= world.vocab_size {
        return Err(FfckError::Input(format!(
            "forbidden token {forbidden} out of vocab"
        )));
    }
    Ok(render_tokens(fact.subject, fact.relation, forbidden, None))
}

/// Render with an optional distractor filling the injection window.
pub fn render_tokens(subject: u32, relation: u32, forbidden: u32, distractor: Option<u32>) -> Vec<u32> {
    let (inj1, inj2) = match distractor {
        Some(d) => (vocab::INJ_MARK, d),
        None => (vocab::PAD, vocab::PAD),
    };
    vec![
        vocab::BOS,
        vocab::SYS_A,
        inj1,
        inj2,
        vocab::SYS_B,
        vocab::FORBID_MARK,
        forbidden,
        vocab::SYS_C,
        subject,
        relation,
        vocab::QUERY,
    ]
}

pub fn render_triple(world: &FactWorld, triple: &PromptTriple, kind: PromptKind) -> Result<Vec<u32>> {
    render_prompt(world, triple.fact_id, triple.forbidden(kind))
}

/// Behavioral filter thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterCriteria {
    /// Minimum correct-class probability on both noncompeting renders.
    pub min_noncompeting_prob: f64,
    /// Competing odds must be at most min(noncompeting odds) / this factor.
    pub min_odds_reduction_factor: f64,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        FilterCriteria {
            min_noncompeting_prob: 0.5,
            min_odds_reduction_factor: 100.0,
        }
    }
}

impl FilterCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_noncompeting_prob) {
            return Err(FfckError::Input(format!(
                "min_noncompeting_prob {} outside (0,1) (0 allowed for the degenerate filter)",
                self.min_noncompeting_prob
            )));
        }
        if self.min_odds_reduction_factor < 1.0 {
            return Err(FfckError::Input(format!(
                "min_odds_reduction_factor {} must be >= 1",
                self.min_odds_reduction_factor
            )));
        }
        Ok(())
    }
}

/// Per-triple filter evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripleEvaluation {
    pub fact_id: usize,
    pub p_competing: f64,
    pub p_relevant_nc: f64,
    pub p_irrelevant_nc: f64,
    /// log-odds(competing) - min(log-odds(noncompeting)), clamped nats.
    pub log_odds_ratio_nats: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub criteria: FilterCriteria,
    pub n_input: usize,
    pub n_kept: usize,
    pub evaluations: Vec<TripleEvaluation>,
    /// Mean of the per-triple competing-vs-noncompeting log-odds ratio over
    /// kept triples (reported, not asserted).
    pub mean_log_odds_ratio_nats: f64,
    pub quantiles_log_odds_ratio: Vec<(f64, f64)>,
    pub empty_output: bool,
}

/// Probabilities of the answer class on all three renders of a triple.
pub fn triple_probabilities(
    model: &ModelBundle,
    world: &FactWorld,
    triple: &PromptTriple,
) -> Result<[Probability; 3]> {
    let class = world.answer_class_tokens(triple.answer);
    let mut out = [Probability::new(0.0)?; 3];
    for (i, kind) in PromptKind::ALL.iter().enumerate() {
        let tokens = render_triple(world, triple, *kind)?;
        let trace = forward(model, &tokens)?;
        out[i] = answer_probability(&trace, &class)?;
    }
    Ok(out)
}

/// Keep a triple iff the answer class clears `min_noncompeting_prob` on both
/// noncompeting renders and the competing odds are reduced by at least
/// `min_odds_reduction_factor` relative to the weaker noncompeting render.
pub fn filter_dataset(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
    criteria: FilterCriteria,
) -> Result<(Vec<PromptTriple>, FilterReport)> {
    criteria.validate()?;
    let mut evaluations: Vec<TripleEvaluation> = triples
        .par_iter()
        .map(|triple| -> Result<TripleEvaluation> {
            let [p_c, p_r, p_i] = triple_probabilities(model, world, triple)?;
            let lo_c = log_odds(p_c).clamped_nats();
            let lo_min_nc = log_odds(p_r).clamped_nats().min(log_odds(p_i).clamped_nats());
            let ratio = lo_c - lo_min_nc;
            let kept = p_r.value() > criteria.min_noncompeting_prob
                && p_i.value() > criteria.min_noncompeting_prob
                && ratio <= -criteria.min_odds_reduction_factor.ln();
            Ok(TripleEvaluation {
                fact_id: triple.fact_id,
                p_competing: p_c.value(),
                p_relevant_nc: p_r.value(),
                p_irrelevant_nc: p_i.value(),
                log_odds_ratio_nats: ratio,
                kept,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluations.sort_by_key(|e| e.fact_id);

    let kept_ids: Vec<usize> = evaluations
        .iter()
        .filter(|e| e.kept)
        .map(|e| e.fact_id)
        .collect();
    let mut kept: Vec<PromptTriple> = triples
        .iter()
        .filter(|t| kept_ids.binary_search(&t.fact_id).is_ok())
        .cloned()
        .collect();
    kept.sort_by_key(|t| t.fact_id);

    let kept_ratios: Vec<f64> = evaluations
        .iter()
        .filter(|e| e.kept)
        .map(|e| e.log_odds_ratio_nats)
        .collect();
    let mean = if kept_ratios.is_empty() {
        0.0
    } else {
        kept_ratios.iter().sum::<f64>() / kept_ratios.len() as f64
    };
    let quantiles = quantiles_of(&kept_ratios, &[0.1, 0.25, 0.5, 0.75, 0.9]);

    let n_kept = kept.len();
    let report = FilterReport {
        criteria,
        n_input: triples.len(),
        n_kept,
        evaluations,
        mean_log_odds_ratio_nats: mean,
        quantiles_log_odds_ratio: quantiles,
        empty_output: n_kept == 0,
    };
    Ok((kept, report))
}

fn quantiles_of(values: &[f64], qs: &[f64]) -> Vec<(f64, f64)> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    qs.iter()
        .map(|&q| {
            let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
            (q, sorted[idx])
        })
        .collect()
}

/// Where the competing run's top answer comes from relative to the
/// noncompeting ranking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OriginReport {
    pub fact_id: usize,
    /// Top-k tokens of the irrelevant-noncompeting run, most probable first.
    pub noncompeting_top: Vec<u32>,
    /// First noncompeting answer outside the correct answer's alias class.
    pub predicted_competing_top: Option<u32>,
    pub competing_top: u32,
    /// None when the alias class covered the whole top-k (undetermined).
    pub matched: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OriginSummary {
    pub n: usize,
    pub n_undetermined: usize,
    pub match_rate: f64,
    pub reports: Vec<OriginReport>,
}

pub fn incorrect_answer_origin(
    model: &ModelBundle,
    world: &FactWorld,
    triple: &PromptTriple,
    top_k: usize,
) -> Result<OriginReport> {
    let nc_tokens = render_triple(world, triple, PromptKind::IrrelevantNoncompeting)?;
    let c_tokens = render_triple(world, triple, PromptKind::Competing)?;
    let nc = forward(model, &nc_tokens)?;
    let c = forward(model, &c_tokens)?;

    let ranked = |logits: &[f64]| -> Vec<u32> {
        let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
        idx.sort_by(|&a, &b| {
            logits[b as usize]
                .partial_cmp(&logits[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx
    };
    let nc_rank = ranked(&nc.final_logits);
    let answer_class = vocab::answer_class(triple.answer);
    let top: Vec<u32> = nc_rank.iter().copied().take(top_k).collect();
    let predicted = top
        .iter()
        .copied()
        .find(|&t| vocab::answer_class(t) != answer_class || answer_class.is_none());
    let competing_top = ranked(&c.final_logits)[0];
    let matched = predicted.map(|p| p == competing_top);

    Ok(OriginReport {
        fact_id: triple.fact_id,
        noncompeting_top: top,
        predicted_competing_top: predicted,
        competing_top,
        matched,
    })
}

pub fn origin_summary(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
    top_k: usize,
) -> Result<OriginSummary> {
    let mut reports: Vec<OriginReport> = triples
        .par_iter()
        .map(|t| incorrect_answer_origin(model, world, t, top_k))
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by_key(|r| r.fact_id);
    let determined: Vec<bool> = reports.iter().filter_map(|r| r.matched).collect();
    let n_undetermined = reports.len() - determined.len();
    let match_rate = if determined.is_empty() {
        0.0
    } else {
        determined.iter().filter(|&&m| m).count() as f64 / determined.len() as f64
    };
    Ok(OriginSummary {
        n: reports.len(),
        n_undetermined,
        match_rate,
        reports,
    })
}

/// Write triples as JSON lines.
pub fn write_triples<W: Write>(w: &mut W, triples: &[PromptTriple]) -> Result<()> {
    for t in triples {
        let line = serde_json::to_string(t)
            .map_err(|e| FfckError::Format(format!("triple serialization: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_triples<R: BufRead>(r: R) -> Result<Vec<PromptTriple>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: PromptTriple = serde_json::from_str(&line)
            .map_err(|e| FfckError::Format(format!("triple line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelBundle, ModelConfig};

    fn world() -> FactWorld {
        generate_world(7, WorldSizes::default(), 512).unwrap()
    }

    #[test]
    fn world_is_deterministic_and_validated() {
        let a = world();
        let b = world();
        assert_eq!(a, b);
        let empty = generate_world(7, WorldSizes { n_facts: 0, ..Default::default() }, 512).unwrap();
        assert!(empty.facts.is_empty());
        // every fact has 3 distinct forbidden-word candidates of the right
        // categories
        let triples = make_triples(&a);
        for (fact, triple) in a.facts.iter().zip(triples.iter()) {
            let cls_comp = vocab::answer_class(triple.competing_forbidden).unwrap();
            let cls_rel = vocab::answer_class(triple.relevant_forbidden).unwrap();
            assert_ne!(cls_comp, cls_rel);
            assert_eq!(
                vocab::class_category(cls_comp, a.sizes.classes_per_category),
                vocab::class_category(cls_rel, a.sizes.classes_per_category),
            );
            assert!(vocab::answer_class(triple.irrelevant_forbidden).is_none());
            assert_eq!(triple.competing_forbidden, fact.answers[0]);
            let classes: std::collections::BTreeSet<u32> = fact
                .answers
                .iter()
                .map(|&t| vocab::answer_class(t).unwrap())
                .collect();
            assert_eq!(classes.len(), fact.answers.len());
        }
    }

    #[test]
    fn world_rejects_overflow() {
        let sizes = WorldSizes {
            n_facts: 1000,
            ..Default::default()
        };
        assert!(generate_world(0, sizes, 512).is_err());
        let sizes = WorldSizes {
            n_categories: 8,
            classes_per_category: 8,
            ..Default::default()
        };
        assert!(generate_world(0, sizes, 512).is_err());
    }

    #[test]
    fn render_structure() {
        let w = world();
        let triples = make_triples(&w);
        let t = &triples[0];
        let a = render_triple(&w, t, PromptKind::Competing).unwrap();
        let b = render_triple(&w, t, PromptKind::IrrelevantNoncompeting).unwrap();
        assert_eq!(a.len(), vocab::PROMPT_LEN);
        assert_eq!(b.len(), vocab::PROMPT_LEN);
        // two renders differing only in forbidden word differ exactly at the
        // slot
        let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diff, vec![vocab::FORBIDDEN_SLOT]);
        // slot metadata matches a token-level scan
        let scan = a
            .iter()
            .position(|&tok| tok == t.competing_forbidden)
            .unwrap();
        assert_eq!(scan, t.forbidden_slot_index);
        // determinism
        assert_eq!(a, render_triple(&w, t, PromptKind::Competing).unwrap());
        assert!(render_prompt(&w, 9999, 0).is_err());
    }

    #[test]
    fn degenerate_filter_keeps_odds_ordered_triples() {
        let model = ModelBundle::random(ModelConfig::toy_default(3)).unwrap();
        let w = world();
        let triples: Vec<PromptTriple> = make_triples(&w).into_iter().take(12).collect();
        let criteria = FilterCriteria {
            min_noncompeting_prob: 0.0,
            min_odds_reduction_factor: 1.0,
        };
        let (kept, report) = filter_dataset(&model, &w, &triples, criteria).unwrap();
        for e in &report.evaluations {
            assert_eq!(e.kept, e.log_odds_ratio_nats <= 0.0);
        }
        assert_eq!(kept.len(), report.evaluations.iter().filter(|e| e.kept).count());
    }

    #[test]
    fn random_model_yields_near_empty_filtered_set() {
        let model = ModelBundle::random(ModelConfig::toy_default(3)).unwrap();
        let w = world();
        let triples = make_triples(&w);
        let (kept, _) = filter_dataset(&model, &w, &triples, FilterCriteria::default()).unwrap();
        assert!(
            (kept.len() as f64) < 0.05 * triples.len() as f64,
            "random model kept {} of {}",
            kept.len(),
            triples.len()
        );
    }

    #[test]
    fn filter_is_idempotent() {
        let model = ModelBundle::random(ModelConfig::toy_default(4)).unwrap();
        let w = world();
        let triples: Vec<PromptTriple> = make_triples(&w).into_iter().take(16).collect();
        let criteria = FilterCriteria {
            min_noncompeting_prob: 0.001,
            min_odds_reduction_factor: 1.0,
        };
        let (once, _) = filter_dataset(&model, &w, &triples, criteria).unwrap();
        let (twice, _) = filter_dataset(&model, &w, &once, criteria).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn triples_roundtrip_jsonl() {
        let w = world();
        let triples = make_triples(&w);
        let mut buf = Vec::new();
        write_triples(&mut buf, &triples).unwrap();
        let back = read_triples(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(triples, back);
    }
}
