//! First-order patching and per-component importance: replace selected
//! components' last-token contributions with their values from a paired run
//! and measure the log-Bayes-factor shift of the correct-answer class, with
//! no re-execution of downstream layers.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{render_triple, FactWorld, PromptKind, PromptTriple};
use crate::error::{FfckError, Result};
use crate::model::forward::{answer_probability_of_logits, forward, recombine, ActivationTrace};
use crate::model::{ComponentId, ModelBundle};
use crate::numerics::{log_odds, LogOdds};
use crate::tensor::Vector;
use crate::vocab;

/// Paired traces must share the fact prefix: identical tokens everywhere but
/// the forbidden slot and the injection window.
pub(crate) fn check_paired(dest: &ActivationTrace, source: &ActivationTrace) -> Result<()> {
    if dest.token_ids.len() != source.token_ids.len() {
        return Err(FfckError::Input(format!(
            "paired traces have different lengths {} vs {}",
            dest.token_ids.len(),
            source.token_ids.len()
        )));
    }
    for (p, (a, b)) in dest.token_ids.iter().zip(source.token_ids.iter()).enumerate() {
        let mutable = p == vocab::FORBIDDEN_SLOT || vocab::INJECTION_SLOT.contains(&p);
        if a != b && !mutable {
            return Err(FfckError::Input(format!(
                "paired traces diverge at position {p} (token {a} vs {b}), outside the forbidden slot and injection window"
            )));
        }
    }
    Ok(())
}

/// Log-odds of `answer_class` after overriding the components in `s` of the
/// destination run with their source-run contributions (Eq.-style first-order
/// recombination).
pub fn first_order_patch(
    model: &ModelBundle,
    dest: &ActivationTrace,
    source: &ActivationTrace,
    s: &[ComponentId],
    answer_class: &[u32],
) -> Result<LogOdds> {
    check_paired(dest, source)?;
    let config = model.config();
    let mut overrides: Vec<(usize, &Vector)> = Vec::with_capacity(s.len());
    for c in s {
        let idx = c.index(config);
        if idx >= config.n_components() {
            return Err(FfckError::Input(format!("component {c} outside model")));
        }
        overrides.push((idx, &source.last_token_components[idx]));
    }
    let logits = recombine(model, &dest.last_token_components, &overrides)?;
    let p = answer_probability_of_logits(&logits, answer_class)?;
    Ok(log_odds(p))
}

/// Per-component importance statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub component: ComponentId,
    /// Mean clamped log Bayes factor of patching this single component from
    /// the competing run into the noncompeting run.
    pub mean_lbf_nats: f64,
    pub std_nats: f64,
    pub n: usize,
    /// 0 = most negative = most suppressive.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    /// Rows in canonical component order.
    pub rows: Vec<ImportanceRow>,
    /// Components sorted ascending by mean (ties broken by canonical order).
    pub ranking: Vec<ComponentId>,
    /// Count of per-prompt evaluations whose log-odds saturated (clamped).
    pub n_saturated: usize,
}

/// One paired evaluation: competing source run, irrelevant-noncompeting
/// destination run, per-component clamped LBFs.
struct PairEval {
    lbf_by_component: Vec<f64>,
    n_saturated: usize,
}

fn eval_pair(
    model: &ModelBundle,
    world: &FactWorld,
    triple: &PromptTriple,
) -> Result<PairEval> {
    let source = forward(model, &render_triple(world, triple, PromptKind::Competing)?)?;
    let dest = forward(
        model,
        &render_triple(world, triple, PromptKind::IrrelevantNoncompeting)?,
    )?;
    let class = world.answer_class_tokens(triple.answer);
    let baseline = first_order_patch(model, &dest, &source, &[], &class)?;
    let config = model.config();
    let mut lbf_by_component = Vec::with_capacity(config.n_components());
    let mut n_saturated = usize::from(baseline.is_saturated());
    for c in ComponentId::all(config) {
        let patched = first_order_patch(model, &dest, &source, &[c], &class)?;
        n_saturated += usize::from(patched.is_saturated());
        lbf_by_component.push(patched.clamped_nats() - baseline.clamped_nats());
    }
    Ok(PairEval {
        lbf_by_component,
        n_saturated,
    })
}

/// Eq.-2-style importance: for every component, the mean over paired
/// (competing, noncompeting) prompts of the single-component patch effect.
pub fn component_importance(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
) -> Result<ImportanceTable> {
    if triples.is_empty() {
        return Err(FfckError::Input("component importance needs a nonempty dataset".into()));
    }
    let evals: Vec<Result<PairEval>> = triples
        .par_iter()
        .map(|t| eval_pair(model, world, t))
        .collect();
    let evals: Vec<PairEval> = evals.into_iter().collect::<Result<_>>()?;

    let config = model.config();
    let n = triples.len();
    let n_components = config.n_components();
    let mut n_saturated = 0;
    let mut rows: Vec<ImportanceRow> = ComponentId::all(config)
        .into_iter()
        .map(|component| ImportanceRow {
            component,
            mean_lbf_nats: 0.0,
            std_nats: 0.0,
            n,
            rank: 0,
        })
        .collect();
    // ordered reduction over triples, then components
    for e in &evals {
        n_saturated += e.n_saturated;
        for (row, &v) in rows.iter_mut().zip(e.lbf_by_component.iter()) {
            row.mean_lbf_nats += v;
        }
    }
    for row in &mut rows {
        row.mean_lbf_nats /= n as f64;
    }
    for i in 0..n_components {
        let mean = rows[i].mean_lbf_nats;
        let ss: f64 = evals
            .iter()
            .map(|e| (e.lbf_by_component[i] - mean).powi(2))
            .sum();
        rows[i].std_nats = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..n_components).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .mean_lbf_nats
            .partial_cmp(&rows[b].mean_lbf_nats)
            .expect("finite means")
            .then(a.cmp(&b))
    });
    for (rank, &idx) in order.iter().enumerate() {
        rows[idx].rank = rank;
    }
    let ranking = order.iter().map(|&i| rows[i].component).collect();
    Ok(ImportanceTable {
        rows,
        ranking,
        n_saturated,
    })
}

/// Cumulative joint-patching curve over a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    /// `points[k]` = mean clamped LBF of jointly patching the top-k ranked
    /// components; `points[0]` is 0.
    pub points: Vec<f64>,
    /// Full-patch value (`points[total]`).
    pub reference: f64,
    /// Smallest k whose effect reaches 95% of the full-patch effect.
    pub k_star: usize,
}

fn check_ranking(model: &ModelBundle, ranking: &[ComponentId]) -> Result<()> {
    let config = model.config();
    let n = config.n_components();
    if ranking.len() != n {
        return Err(FfckError::Input(format!(
            "ranking covers {} of {} components",
            ranking.len(),
            n
        )));
    }
    let mut seen = vec![false; n];
    for c in ranking {
        let idx = c.index(config);
        if idx >= n || seen[idx] {
            return Err(FfckError::Input(format!(
                "ranking is not a permutation of the component set (at {c})"
            )));
        }
        seen[idx] = true;
    }
    Ok(())
}

pub fn cumulative_curve(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
    ranking: &[ComponentId],
) -> Result<CumulativeCurve> {
    check_ranking(model, ranking)?;
    if triples.is_empty() {
        return Err(FfckError::Input("cumulative curve needs a nonempty dataset".into()));
    }
    let n_components = ranking.len();
    let per_triple: Vec<Result<Vec<f64>>> = triples
        .par_iter()
        .map(|triple| {
            let source = forward(model, &render_triple(world, triple, PromptKind::Competing)?)?;
            let dest = forward(
                model,
                &render_triple(world, triple, PromptKind::IrrelevantNoncompeting)?,
            )?;
            let class = world.answer_class_tokens(triple.answer);
            let baseline = first_order_patch(model, &dest, &source, &[], &class)?.clamped_nats();
            let mut row = Vec::with_capacity(n_components + 1);
            row.push(0.0);
            for k in 1..=n_components {
                let lo = first_order_patch(model, &dest, &source, &ranking[..k], &class)?;
                row.push(lo.clamped_nats() - baseline);
            }
            Ok(row)
        })
        .collect();
    let per_triple: Vec<Vec<f64>> = per_triple.into_iter().collect::<Result<_>>()?;
    let mut points = vec![0.0; n_components + 1];
    for row in &per_triple {
        for (p, v) in points.iter_mut().zip(row.iter()) {
            *p += v;
        }
    }
    for p in &mut points {
        *p /= triples.len() as f64;
    }
    let reference = points[n_components];
    let k_star = if reference == 0.0 {
        0
    } else {
        (0..=n_components)
            .find(|&k| points[k] / reference >= 0.95)
            .unwrap_or(n_components)
    };
    Ok(CumulativeCurve {
        points,
        reference,
        k_star,
    })
}

/// Joint-patching vs summed-individual-LBF comparison per k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependencePoint {
    pub k: usize,
    pub joint_nats: f64,
    pub summed_nats: f64,
    pub gap_nats: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub points: Vec<IndependencePoint>,
}

/// Compare cumulative joint patching against the sum of single-component
/// importances along the table's ranking. Whether components act
/// super-additively is reported, not asserted.
pub fn independence_compare(
    model: &ModelBundle,
    world: &FactWorld,
    triples: &[PromptTriple],
    table: &ImportanceTable,
) -> Result<IndependenceReport> {
    let joint = cumulative_curve(model, world, triples, &table.ranking)?;
    let config = model.config();
    let mut summed = 0.0;
    let mut points = Vec::with_capacity(joint.points.len());
    points.push(IndependencePoint {
        k: 0,
        joint_nats: 0.0,
        summed_nats: 0.0,
        gap_nats: 0.0,
    });
    for (k, c) in table.ranking.iter().enumerate() {
        summed += table.rows[c.index(config)].mean_lbf_nats;
        let joint_nats = joint.points[k + 1];
        points.push(IndependencePoint {
            k: k + 1,
            joint_nats,
            summed_nats: summed,
            gap_nats: joint_nats - summed,
        });
    }
    Ok(IndependenceReport { points })
}

/// CSV: `component,layer,head_or_mlp,mean_lbf_nats,std_nats,rank`.
pub fn write_importance_csv<W: Write>(w: &mut W, table: &ImportanceTable) -> Result<()> {
    writeln!(w, "component,layer,head_or_mlp,mean_lbf_nats,std_nats,rank")?;
    for row in &table.rows {
        let (layer, kind) = match row.component {
            ComponentId::Embedding => (String::new(), String::new()),
            ComponentId::Head { layer, head } => (layer.to_string(), head.to_string()),
            ComponentId::Mlp { layer } => (layer.to_string(), "mlp".into()),
        };
        writeln!(
            w,
            "{},{},{},{:.9},{:.9},{}",
            row.component, layer, kind, row.mean_lbf_nats, row.std_nats, row.rank
        )?;
    }
    Ok(())
}

/// CSV: `k,mean_lbf_nats`.
pub fn write_cumulative_csv<W: Write>(w: &mut W, curve: &CumulativeCurve) -> Result<()> {
    writeln!(w, "k,mean_lbf_nats")?;
    for (k, p) in curve.points.iter().enumerate() {
        writeln!(w, "{k},{p:.9}")?;
    }
    Ok(())
}

/// CSV: `k,joint_nats,summed_nats,gap_nats`.
pub fn write_independence_csv<W: Write>(w: &mut W, report: &IndependenceReport) -> Result<()> {
    writeln!(w, "k,joint_nats,summed_nats,gap_nats")?;
    for p in &report.points {
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9}",
            p.k, p.joint_nats, p.summed_nats, p.gap_nats
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{canonical_world, make_triples};
    use crate::model::plant::{plant_model, PlantedSpec};
    use crate::model::ModelConfig;

    fn planted() -> (ModelBundle, PlantedSpec) {
        let spec = PlantedSpec::toy_default();
        let model = plant_model(ModelConfig::toy_default(11), &spec).unwrap();
        (model, spec)
    }

    fn paired_traces(
        model: &ModelBundle,
        world: &FactWorld,
        triple: &PromptTriple,
    ) -> (ActivationTrace, ActivationTrace, Vec<u32>) {
        let source = forward(model, &render_triple(world, triple, PromptKind::Competing).unwrap()).unwrap();
        let dest = forward(
            model,
            &render_triple(world, triple, PromptKind::IrrelevantNoncompeting).unwrap(),
        )
        .unwrap();
        let class = world.answer_class_tokens(triple.answer);
        (dest, source, class)
    }

    #[test]
    fn empty_set_is_identity_and_full_set_matches_source() {
        let model = ModelBundle::random(ModelConfig::toy_default(4)).unwrap();
        let world = canonical_world(6, 512).unwrap();
        let triples = make_triples(&world);
        for triple in &triples[..3] {
            let (dest, source, class) = paired_traces(&model, &world, triple);
            let empty = first_order_patch(&model, &dest, &source, &[], &class).unwrap();
            let own = answer_probability_of_logits(&dest.final_logits, &class).unwrap();
            assert_eq!(empty.nats(), log_odds(own).nats());

            let all = ComponentId::all(model.config());
            let full = first_order_patch(&model, &dest, &source, &all, &class).unwrap();
            let src = answer_probability_of_logits(&source.final_logits, &class).unwrap();
            assert!(
                (full.nats() - log_odds(src).nats()).abs() < 1e-6,
                "full override off by {}",
                (full.nats() - log_odds(src).nats()).abs()
            );
        }
    }

    #[test]
    fn rejects_unpaired_traces_and_bad_ranking() {
        let model = ModelBundle::random(ModelConfig::toy_default(4)).unwrap();
        let world = canonical_world(6, 512).unwrap();
        let triples = make_triples(&world);
        let (dest, _, class) = paired_traces(&model, &world, &triples[0]);
        let (other, _, _) = paired_traces(&model, &world, &triples[3]);
        // different fact prefix (subject differs at a non-mutable position)
        assert!(first_order_patch(&model, &dest, &other, &[], &class).is_err());
        let mut ranking = ComponentId::all(model.config());
        ranking.pop();
        assert!(cumulative_curve(&model, &world, &triples, &ranking).is_err());
        let mut dup = ComponentId::all(model.config());
        dup[1] = dup[2];
        assert!(cumulative_curve(&model, &world, &triples, &dup).is_err());
        assert!(component_importance(&model, &world, &[]).is_err());
    }

    #[test]
    fn single_planted_suppressor_drops_at_least_two_nats() {
        let (model, spec) = planted();
        let world = canonical_world(12, 512).unwrap();
        let triples = make_triples(&world);
        let (dest, source, class) = paired_traces(&model, &world, &triples[0]);
        let baseline = first_order_patch(&model, &dest, &source, &[], &class)
            .unwrap()
            .clamped_nats();
        for &(layer, head, _) in &spec.suppressor_heads {
            let lo = first_order_patch(
                &model,
                &dest,
                &source,
                &[ComponentId::Head { layer, head }],
                &class,
            )
            .unwrap()
            .clamped_nats();
            assert!(
                lo - baseline <= -2.0,
                "L{layer}H{head} dropped only {:.3} nats",
                lo - baseline
            );
        }
    }

    #[test]
    fn unchanged_component_has_zero_importance() {
        let model = ModelBundle::random(ModelConfig::toy_default(4)).unwrap();
        let world = canonical_world(6, 512).unwrap();
        let triples = make_triples(&world);
        let (dest, source, class) = paired_traces(&model, &world, &triples[0]);
        // the final-position token is shared, so the embedding component is
        // identical across the pair and patching it is a no-op
        let baseline = first_order_patch(&model, &dest, &source, &[], &class).unwrap();
        let patched =
            first_order_patch(&model, &dest, &source, &[ComponentId::Embedding], &class).unwrap();
        assert_eq!(baseline.nats(), patched.nats());
    }

    #[test]
    fn planted_recovery_ranking_curve_and_independence() {
        let (model, spec) = planted();
        let world = canonical_world(16, 512).unwrap();
        let triples = make_triples(&world);
        let table = component_importance(&model, &world, &triples).unwrap();
        let planted_heads: Vec<ComponentId> = spec
            .suppressor_heads
            .iter()
            .map(|&(layer, head, _)| ComponentId::Head { layer, head })
            .collect();
        for c in &planted_heads {
            let rank = table.rows[c.index(model.config())].rank;
            assert!(rank < 3, "{c} ranked {rank}");
        }

        let curve = cumulative_curve(&model, &world, &triples, &table.ranking).unwrap();
        assert_eq!(curve.points[0], 0.0);
        assert_eq!(curve.reference, *curve.points.last().unwrap());
        assert!(curve.k_star <= 4, "k* = {}", curve.k_star);
        // each planted head strictly suppresses: monotone over the top ranks
        for k in 0..planted_heads.len() {
            assert!(
                curve.points[k + 1] < curve.points[k],
                "cumulative effect rose at k={}",
                k + 1
            );
        }
        // sum of single-component importances vs full-patch effect
        let summed: f64 = table.rows.iter().map(|r| r.mean_lbf_nats).sum();
        assert!(
            (summed - curve.reference).abs() <= 0.25 * curve.reference.abs(),
            "summed {summed:.3} vs full {:.3}",
            curve.reference
        );

        let indep = independence_compare(&model, &world, &triples, &table).unwrap();
        assert_eq!(indep.points[1].joint_nats, indep.points[1].summed_nats);
        for p in &indep.points[..=planted_heads.len()] {
            assert!(
                p.gap_nats.abs() < 0.1,
                "independence gap {:.4} at k={}",
                p.gap_nats,
                p.k
            );
        }
    }

    #[test]
    fn importance_is_stable_across_thread_counts() {
        let (model, _) = planted();
        let world = canonical_world(4, 512).unwrap();
        let triples = make_triples(&world);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| component_importance(&model, &world, &triples).unwrap());
        let parallel = component_importance(&model, &world, &triples).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn csv_emitters_have_expected_shape() {
        let (model, _) = planted();
        let world = canonical_world(3, 512).unwrap();
        let triples = make_triples(&world);
        let table = component_importance(&model, &world, &triples).unwrap();
        let mut buf = Vec::new();
        write_importance_csv(&mut buf, &table).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("component,layer,head_or_mlp,"));
        assert_eq!(s.lines().count(), 1 + model.config().n_components());
        assert!(s.lines().any(|l| l.starts_with("embed,,,")));
        assert!(s.lines().any(|l| l.starts_with("L4H0,4,0,")));
        assert!(s.lines().any(|l| l.starts_with("L0MLP,0,mlp,")));

        let curve = cumulative_curve(&model, &world, &triples, &table.ranking).unwrap();
        let mut buf = Vec::new();
        write_cumulative_csv(&mut buf, &curve).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            2 + model.config().n_components()
        );
        let indep = independence_compare(&model, &world, &triples, &table).unwrap();
        let mut buf = Vec::new();
        write_independence_csv(&mut buf, &indep).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("k,joint_nats,"));
    }
}
