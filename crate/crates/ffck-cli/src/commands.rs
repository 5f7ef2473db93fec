//! One function per subcommand. Every command reads its inputs, runs the
//! corresponding library analysis, and emits plot-ready artifacts plus a
//! manifest into `--out`; no command mutates an input file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ffck::attack::{
    evaluate_attack, random_distractor_deltas, reverse_attack_by_patching, token_preference_scan,
    write_attack_csv, write_attack_jsonl, AttackCandidate, AttackResult,
};
use ffck::attribution::{
    component_importance, cumulative_curve, independence_compare, write_cumulative_csv,
    write_importance_csv, write_independence_csv, ImportanceTable,
};
use ffck::dataset::{
    canonical_world, filter_dataset, generate_world, make_triples, origin_summary, read_triples,
    write_triples, FactWorld, FilterCriteria, PromptTriple, WorldSizes,
};
use ffck::headlab::{
    all_suppression_scores, attention_stats, cross_run_scatter, enrichment_curve,
    positional_scatter, write_attention_csv, write_enrichment_csv, EnrichmentCurve,
    EnrichmentMode, ScatterReport,
};
use ffck::model::{
    plant_model, read_checkpoint, write_checkpoint, ComponentId, ModelBundle, ModelConfig,
    PlantedSpec,
};
use ffck::trainer::{build_corpus, evaluate, train, write_loss_csv, TrainConfig};
use ffck::FfckError;

use crate::manifest::{combined_hash, sha256_hex, Emitter};
use crate::Common;

/// Error split mirroring the exit-code contract: input errors exit 1,
/// internal errors exit 2.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl From<FfckError> for CliError {
    fn from(e: FfckError) -> Self {
        match e {
            FfckError::Input(_) | FfckError::Format(_) => CliError::Input(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

// ---------------------------------------------------------------------------
// shared input plumbing
// ---------------------------------------------------------------------------

fn require<'a, T>(opt: &'a Option<T>, flag: &str, sub: &str) -> CliResult<&'a T> {
    opt.as_ref()
        .ok_or_else(|| CliError::Input(format!("`ffck {sub}` requires {flag}")))
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

/// Effective config: the given file, or the serialized default. The returned
/// bytes feed the manifest's config hash either way.
fn config_with_default<T: serde::de::DeserializeOwned + Serialize>(
    common: &Common,
    default: T,
) -> CliResult<(T, Vec<u8>)> {
    match &common.config {
        Some(path) => {
            let bytes = read_input(path)?;
            let value: T = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Input(format!("bad config {}: {e}", path.display())))?;
            Ok((value, bytes))
        }
        None => {
            let bytes = serde_json::to_vec_pretty(&default)
                .map_err(|e| CliError::Internal(format!("config serialization: {e}")))?;
            Ok((default, bytes))
        }
    }
}

fn no_config(common: &Common, sub: &str) -> CliResult<()> {
    if common.config.is_some() {
        return Err(CliError::Input(format!("`ffck {sub}` does not take --config")));
    }
    Ok(())
}

fn load_world(dir: &Path) -> CliResult<(FactWorld, Vec<u8>)> {
    let path = dir.join("world.json");
    if !path.exists() {
        return Err(CliError::Input(format!(
            "no world.json in {}; run `ffck gen-world` first",
            dir.display()
        )));
    }
    let bytes = read_input(&path)?;
    let world: FactWorld = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Input(format!("bad world file {}: {e}", path.display())))?;
    Ok((world, bytes))
}

#[derive(Clone, Copy, PartialEq)]
enum TripleSource {
    /// filtered.jsonl when present, triples.jsonl otherwise.
    Preferred,
    /// triples.jsonl only (pre-filter commands).
    RawOnly,
    /// filtered.jsonl only (attribution commands).
    FilteredOnly,
}

struct Dataset {
    world: FactWorld,
    world_bytes: Vec<u8>,
    triples: Vec<PromptTriple>,
    hash: String,
}

fn load_dataset(common: &Common, sub: &str, source: TripleSource) -> CliResult<Dataset> {
    let dir = require(&common.dataset, "--dataset", sub)?;
    let (world, world_bytes) = load_world(dir)?;
    let filtered = dir.join("filtered.jsonl");
    let raw = dir.join("triples.jsonl");
    let triples_path = match source {
        TripleSource::RawOnly => {
            if !raw.exists() {
                return Err(CliError::Input(format!(
                    "no triples.jsonl in {}; run `ffck render-data` first",
                    dir.display()
                )));
            }
            raw
        }
        TripleSource::FilteredOnly => {
            if !filtered.exists() {
                return Err(CliError::Input(format!(
                    "no filtered dataset (filtered.jsonl) in {}; run `ffck filter` and point \
                     --dataset at its output directory",
                    dir.display()
                )));
            }
            filtered
        }
        TripleSource::Preferred => {
            if filtered.exists() {
                filtered
            } else if raw.exists() {
                raw
            } else {
                return Err(CliError::Input(format!(
                    "no triples.jsonl or filtered.jsonl in {}; run `ffck render-data` first",
                    dir.display()
                )));
            }
        }
    };
    let triples_bytes = read_input(&triples_path)?;
    let triples = read_triples(triples_bytes.as_slice())?;
    let name = triples_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let hash = combined_hash(&[("world.json", &world_bytes), (&name, &triples_bytes)]);
    Ok(Dataset {
        world,
        world_bytes,
        triples,
        hash,
    })
}

fn load_model(common: &Common, sub: &str) -> CliResult<(ModelBundle, String, PathBuf)> {
    let path = require(&common.checkpoint, "--checkpoint", sub)?;
    let bytes = read_input(path)?;
    let model = read_checkpoint(&mut bytes.as_slice())?;
    Ok((model, sha256_hex(&bytes), path.clone()))
}

fn checkpoint_bytes(model: &ModelBundle) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    write_checkpoint(model, &mut out)?;
    Ok(out)
}

/// Planted-circuit sidecar written by `plant` next to its checkpoint; its
/// presence tells the head-level commands which heads to analyze.
fn planted_sidecar(checkpoint: &Path) -> CliResult<Option<PlantedSpec>> {
    let path = checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("planted_spec.json");
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read_input(&path)?;
    let spec: PlantedSpec = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Input(format!("bad planted spec {}: {e}", path.display())))?;
    Ok(Some(spec))
}

/// Heads to probe: the planted suppressors when a sidecar is present, the
/// top-3 heads of the importance ranking otherwise.
fn analysis_heads(
    model: &ModelBundle,
    ds: &Dataset,
    sidecar: Option<&PlantedSpec>,
) -> CliResult<Vec<(usize, usize)>> {
    if let Some(spec) = sidecar {
        return Ok(spec.suppressor_heads.iter().map(|&(l, h, _)| (l, h)).collect());
    }
    let table = component_importance(model, &ds.world, &ds.triples)?;
    Ok(table
        .ranking
        .iter()
        .filter_map(|c| match *c {
            ComponentId::Head { layer, head } => Some((layer, head)),
            _ => None,
        })
        .take(3)
        .collect())
}

/// Triples whose irrelevant forbidden word really is noncompeting; only
/// those admit a clean attack baseline.
fn attackable<'a>(world: &FactWorld, triples: &'a [PromptTriple]) -> Vec<&'a PromptTriple> {
    triples
        .iter()
        .filter(|t| !world.answer_class_tokens(t.answer).contains(&t.irrelevant_forbidden))
        .collect()
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// data production commands
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorldConfig {
    /// Use the fixed subject-to-answer rule that planted circuits encode in
    /// their embeddings. Canonical worlds ignore the seed and every size
    /// field except `n_facts`; seeded random worlds suit trained models only.
    #[serde(default = "default_true")]
    canonical: bool,
    #[serde(default)]
    sizes: WorldSizes,
    #[serde(default = "default_vocab")]
    vocab_size: usize,
}

fn default_vocab() -> usize {
    512
}

fn default_true() -> bool {
    true
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            canonical: true,
            sizes: WorldSizes::default(),
            vocab_size: default_vocab(),
        }
    }
}

pub fn gen_world(common: &Common) -> CliResult<()> {
    let out = require(&common.out, "--out", "gen-world")?;
    let (cfg, cfg_bytes) = config_with_default(common, WorldConfig::default())?;
    let seed = common.seed.unwrap_or(0);
    let world = if cfg.canonical {
        canonical_world(cfg.sizes.n_facts, cfg.vocab_size)?
    } else {
        generate_world(seed, cfg.sizes, cfg.vocab_size)?
    };
    let mut em = Emitter::new("gen-world", out)?;
    em.set_seed(Some(seed));
    em.set_config_bytes(&cfg_bytes);
    em.write_json("world.json", &world)?;
    em.finish()
}

pub fn render_data(common: &Common) -> CliResult<()> {
    no_config(common, "render-data")?;
    let out = require(&common.out, "--out", "render-data")?;
    let dir = require(&common.dataset, "--dataset", "render-data")?;
    let (world, world_bytes) = load_world(dir)?;
    let triples = make_triples(&world);
    let mut body = Vec::new();
    write_triples(&mut body, &triples)?;
    let mut em = Emitter::new("render-data", out)?;
    em.set_dataset_hash(combined_hash(&[("world.json", &world_bytes)]));
    // keep output directories self-contained dataset directories
    if !same_dir(dir, out) {
        em.write_bytes("world.json", &world_bytes)?;
    }
    em.write_bytes("triples.jsonl", &body)?;
    em.finish()
}

pub fn train_cmd(common: &Common) -> CliResult<()> {
    let out = require(&common.out, "--out", "train")?;
    let ds = {
        let dir = require(&common.dataset, "--dataset", "train")?;
        load_world(dir)?
    };
    let seed = common.seed.unwrap_or(0);
    let (tcfg, tcfg_bytes) = config_with_default(common, TrainConfig::default_toy(seed))?;
    tcfg.validate()?;
    let init = ModelBundle::random(ModelConfig::toy_default(seed))?;
    let mut corpus = build_corpus(&ds.0, &tcfg)?;
    let (model, curve) = train(&init, &mut corpus, &tcfg)?;
    let mut loss_csv = Vec::new();
    write_loss_csv(&mut loss_csv, &curve)?;
    let mut em = Emitter::new("train", out)?;
    em.set_seed(Some(seed));
    em.set_config_bytes(&tcfg_bytes);
    em.set_dataset_hash(combined_hash(&[("world.json", &ds.1)]));
    em.write_bytes("model.ckpt", &checkpoint_bytes(&model)?)?;
    em.write_bytes("loss.csv", &loss_csv)?;
    em.write_json("train_config.json", &tcfg)?;
    em.finish()
}

pub fn plant(common: &Common) -> CliResult<()> {
    let out = require(&common.out, "--out", "plant")?;
    let (spec, spec_bytes) = config_with_default(common, PlantedSpec::toy_default())?;
    let seed = common.seed.unwrap_or(0);
    let model = plant_model(ModelConfig::toy_default(seed), &spec)?;
    let mut em = Emitter::new("plant", out)?;
    em.set_seed(Some(seed));
    em.set_config_bytes(&spec_bytes);
    em.write_bytes("model.ckpt", &checkpoint_bytes(&model)?)?;
    em.write_json("planted_spec.json", &spec)?;
    em.finish()
}

pub fn filter(common: &Common) -> CliResult<()> {
    let out = require(&common.out, "--out", "filter")?;
    let (model, ckpt_hash, _) = load_model(common, "filter")?;
    let ds = load_dataset(common, "filter", TripleSource::RawOnly)?;
    let (criteria, cfg_bytes) = config_with_default(common, FilterCriteria::default())?;
    let (kept, report) = filter_dataset(&model, &ds.world, &ds.triples, criteria)?;
    let mut body = Vec::new();
    write_triples(&mut body, &kept)?;
    let mut em = Emitter::new("filter", out)?;
    em.set_config_bytes(&cfg_bytes);
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash.clone());
    let in_dir = common.dataset.as_ref().expect("checked above");
    if !same_dir(in_dir, out) {
        em.write_bytes("world.json", &ds.world_bytes)?;
    }
    em.write_bytes("filtered.jsonl", &body)?;
    em.write_json("filter_report.json", &report)?;
    em.finish()
}

// ---------------------------------------------------------------------------
// analysis commands
// ---------------------------------------------------------------------------

pub fn evaluate_cmd(common: &Common) -> CliResult<()> {
    no_config(common, "evaluate")?;
    let out = require(&common.out, "--out", "evaluate")?;
    let (model, ckpt_hash, _) = load_model(common, "evaluate")?;
    let ds = load_dataset(common, "evaluate", TripleSource::Preferred)?;
    let mut em = Emitter::new("evaluate", out)?;
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash.clone());
    if ds.triples.is_empty() {
        // nothing to report: manifest-only output, still a valid report
        return em.finish();
    }
    let behavior = evaluate(&model, &ds.world, &ds.triples)?;
    let mut csv = Vec::new();
    {
        use std::io::Write as _;
        writeln!(
            csv,
            "fact_id,p_competing,p_relevant_nc,p_irrelevant_nc,log_bayes_factor_nats,complied"
        )
        .map_err(|e| CliError::Internal(e.to_string()))?;
        for row in &behavior.rows {
            writeln!(
                csv,
                "{},{:.9},{:.9},{:.9},{:.9},{}",
                row.fact_id,
                row.p_competing,
                row.p_relevant_nc,
                row.p_irrelevant_nc,
                row.log_bayes_factor_nats,
                row.complied
            )
            .map_err(|e| CliError::Internal(e.to_string()))?;
        }
    }
    let origin = origin_summary(&model, &ds.world, &ds.triples, 5)?;
    em.write_json("behavior.json", &behavior)?;
    em.write_bytes("behavior.csv", &csv)?;
    em.write_json("origin.json", &origin)?;
    em.finish()
}

fn importance_of(model: &ModelBundle, ds: &Dataset) -> CliResult<ImportanceTable> {
    Ok(component_importance(model, &ds.world, &ds.triples)?)
}

pub fn rank(common: &Common) -> CliResult<()> {
    no_config(common, "rank")?;
    let out = require(&common.out, "--out", "rank")?;
    let (model, ckpt_hash, _) = load_model(common, "rank")?;
    let ds = load_dataset(common, "rank", TripleSource::FilteredOnly)?;
    let table = importance_of(&model, &ds)?;
    let mut csv = Vec::new();
    write_importance_csv(&mut csv, &table)?;
    let mut em = Emitter::new("rank", out)?;
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash);
    em.write_bytes("importance.csv", &csv)?;
    em.write_json("importance.json", &table)?;
    em.finish()
}

pub fn patch_curve(common: &Common) -> CliResult<()> {
    no_config(common, "patch-curve")?;
    let out = require(&common.out, "--out", "patch-curve")?;
    let (model, ckpt_hash, _) = load_model(common, "patch-curve")?;
    let ds = load_dataset(common, "patch-curve", TripleSource::FilteredOnly)?;
    let table = importance_of(&model, &ds)?;
    let curve = cumulative_curve(&model, &ds.world, &ds.triples, &table.ranking)?;
    let mut csv = Vec::new();
    write_cumulative_csv(&mut csv, &curve)?;
    let mut em = Emitter::new("patch-curve", out)?;
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash);
    em.write_bytes("cumulative.csv", &csv)?;
    em.write_json("cumulative.json", &curve)?;
    em.finish()
}

pub fn independence(common: &Common) -> CliResult<()> {
    no_config(common, "independence")?;
    let out = require(&common.out, "--out", "independence")?;
    let (model, ckpt_hash, _) = load_model(common, "independence")?;
    let ds = load_dataset(common, "independence", TripleSource::FilteredOnly)?;
    let table = importance_of(&model, &ds)?;
    let report = independence_compare(&model, &ds.world, &ds.triples, &table)?;
    let mut csv = Vec::new();
    write_independence_csv(&mut csv, &report)?;
    let mut em = Emitter::new("independence", out)?;
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash);
    em.write_bytes("independence.csv", &csv)?;
    em.write_json("independence.json", &report)?;
    em.finish()
}

fn write_scatter_csv(rows: &[ScatterReport]) -> CliResult<Vec<u8>> {
    use std::io::Write as _;
    let mut csv = Vec::new();
    writeln!(csv, "layer,head,baseline_nats,probed_nats")
        .map_err(|e| CliError::Internal(e.to_string()))?;
    for r in rows {
        for &(b, p) in &r.pairs {
            writeln!(csv, "{},{},{:.9},{:.9}", r.layer, r.head, b, p)
                .map_err(|e| CliError::Internal(e.to_string()))?;
        }
    }
    Ok(csv)
}

pub fn heads(common: &Common) -> CliResult<()> {
    no_config(common, "heads")?;
    let out = require(&common.out, "--out", "heads")?;
    let (model, ckpt_hash, ckpt_path) = load_model(common, "heads")?;
    let ds = load_dataset(common, "heads", TripleSource::Preferred)?;
    let sidecar = planted_sidecar(&ckpt_path)?;
    let selected = analysis_heads(&model, &ds, sidecar.as_ref())?;
    let seed = common.seed.unwrap_or(0);

    let stats = attention_stats(&model, &ds.world, &ds.triples, &selected)?;
    let mut attention_csv = Vec::new();
    write_attention_csv(&mut attention_csv, &stats)?;

    let profiles = all_suppression_scores(&model)?;
    let mut suppression_csv = Vec::new();
    {
        use std::io::Write as _;
        writeln!(suppression_csv, "layer,head,suppression_score,exhaustive,n_pairs")
            .map_err(|e| CliError::Internal(e.to_string()))?;
        for p in &profiles {
            writeln!(
                suppression_csv,
                "{},{},{:.9},{},{}",
                p.layer, p.head, p.suppression_score, p.exhaustive, p.n_pairs
            )
            .map_err(|e| CliError::Internal(e.to_string()))?;
        }
    }

    let mut cross_run = Vec::new();
    let mut positional = Vec::new();
    for &(l, h) in &selected {
        cross_run.push(cross_run_scatter(&model, &ds.world, &ds.triples, l, h)?);
        positional.push(positional_scatter(&model, &ds.world, &ds.triples, l, h, seed)?);
    }

    #[derive(Serialize)]
    struct Scatters {
        selected_heads: Vec<(usize, usize)>,
        cross_run: Vec<ScatterReport>,
        positional: Vec<ScatterReport>,
    }

    let mut em = Emitter::new("heads", out)?;
    em.set_seed(Some(seed));
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash);
    em.write_bytes("attention.csv", &attention_csv)?;
    em.write_json("attention.json", &stats)?;
    em.write_bytes("suppression.csv", &suppression_csv)?;
    em.write_json("ov_profiles.json", &profiles)?;
    em.write_bytes("cross_run.csv", &write_scatter_csv(&cross_run)?)?;
    em.write_bytes("positional.csv", &write_scatter_csv(&positional)?)?;
    em.write_json(
        "scatters.json",
        &Scatters {
            selected_heads: selected,
            cross_run,
            positional,
        },
    )?;
    em.finish()
}

pub fn enrich(common: &Common) -> CliResult<()> {
    no_config(common, "enrich")?;
    let out = require(&common.out, "--out", "enrich")?;
    let (model, ckpt_hash, ckpt_path) = load_model(common, "enrich")?;
    let ds = load_dataset(common, "enrich", TripleSource::Preferred)?;
    let sidecar = planted_sidecar(&ckpt_path)?;
    let mut selected = analysis_heads(&model, &ds, sidecar.as_ref())?;
    if let Some(spec) = &sidecar {
        selected.push(spec.copier_head);
    }
    let mut curves: Vec<EnrichmentCurve> = Vec::new();
    for &(l, h) in &selected {
        for mode in [EnrichmentMode::Key, EnrichmentMode::Query] {
            curves.push(enrichment_curve(&model, &ds.world, &ds.triples, l, h, mode)?);
        }
    }
    let mut csv = Vec::new();
    write_enrichment_csv(&mut csv, &curves)?;
    let mut em = Emitter::new("enrich", out)?;
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash);
    em.write_bytes("enrichment.csv", &csv)?;
    em.write_json("enrichment.json", &curves)?;
    em.finish()
}

/// Scan head plus best candidate for this model/dataset pair: the first
/// planted suppressor when a sidecar exists, the top-ranked head otherwise.
fn attack_candidate(
    model: &ModelBundle,
    ds: &Dataset,
    sidecar: Option<&PlantedSpec>,
    fact_id: usize,
) -> CliResult<(Vec<AttackCandidate>, AttackCandidate)> {
    let (layer, head) = *analysis_heads(model, ds, sidecar)?
        .first()
        .ok_or_else(|| CliError::Internal("no attention heads in model".into()))?;
    let scan = token_preference_scan(model, &ds.world, fact_id, layer, head)?;
    let best = scan
        .first()
        .cloned()
        .ok_or_else(|| CliError::Internal("empty preference scan".into()))?;
    Ok((scan, best))
}

fn write_scan_csv(scan: &[AttackCandidate]) -> CliResult<Vec<u8>> {
    use std::io::Write as _;
    let mut csv = Vec::new();
    writeln!(csv, "rank,token,preference").map_err(|e| CliError::Internal(e.to_string()))?;
    for (i, c) in scan.iter().enumerate() {
        writeln!(csv, "{},{},{:.9}", i, c.distractor, c.preference)
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    Ok(csv)
}

pub fn attack(common: &Common) -> CliResult<()> {
    no_config(common, "attack")?;
    let out = require(&common.out, "--out", "attack")?;
    let (model, ckpt_hash, ckpt_path) = load_model(common, "attack")?;
    let ds = load_dataset(common, "attack", TripleSource::Preferred)?;
    let sidecar = planted_sidecar(&ckpt_path)?;
    let seed = common.seed.unwrap_or(0);
    let eligible = attackable(&ds.world, &ds.triples);
    let first = eligible
        .first()
        .ok_or_else(|| CliError::Input("dataset has no attackable (noncompeting) triples".into()))?;
    let (scan, candidate) = attack_candidate(&model, &ds, sidecar.as_ref(), first.fact_id)?;

    let mut results: Vec<AttackResult> = Vec::with_capacity(eligible.len());
    for t in &eligible {
        results.push(evaluate_attack(&model, &ds.world, t, &candidate)?);
    }
    let random = random_distractor_deltas(
        &model,
        &ds.world,
        first,
        candidate.layer,
        candidate.head,
        64,
        seed,
    )?;

    let mut jsonl = Vec::new();
    write_attack_jsonl(&mut jsonl, &results)?;
    let mut csv = Vec::new();
    write_attack_csv(&mut csv, &results)?;
    let mut random_csv = Vec::new();
    write_attack_csv(&mut random_csv, &random)?;

    let mut em = Emitter::new("attack", out)?;
    em.set_seed(Some(seed));
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash);
    em.write_bytes("scan.csv", &write_scan_csv(&scan)?)?;
    em.write_json("candidate.json", &candidate)?;
    em.write_bytes("attack.jsonl", &jsonl)?;
    em.write_bytes("attack.csv", &csv)?;
    em.write_bytes("random_attacks.csv", &random_csv)?;
    em.finish()
}

pub fn reverse_attack(common: &Common) -> CliResult<()> {
    no_config(common, "reverse-attack")?;
    let out = require(&common.out, "--out", "reverse-attack")?;
    let (model, ckpt_hash, ckpt_path) = load_model(common, "reverse-attack")?;
    let ds = load_dataset(common, "reverse-attack", TripleSource::Preferred)?;
    let sidecar = planted_sidecar(&ckpt_path)?;
    let eligible = attackable(&ds.world, &ds.triples);
    let first = eligible
        .first()
        .ok_or_else(|| CliError::Input("dataset has no attackable (noncompeting) triples".into()))?;
    let (_, candidate) = attack_candidate(&model, &ds, sidecar.as_ref(), first.fact_id)?;
    let table = importance_of(&model, &ds)?;
    let n = table.ranking.len();
    let mut ks: Vec<usize> = (0..=8.min(n)).collect();
    if *ks.last().expect("nonempty") != n {
        ks.push(n);
    }

    let mut results: Vec<AttackResult> = Vec::new();
    for t in eligible.iter().take(8) {
        results.push(reverse_attack_by_patching(
            &model,
            &ds.world,
            t,
            &candidate,
            &table.ranking,
            &ks,
        )?);
    }

    let mut jsonl = Vec::new();
    write_attack_jsonl(&mut jsonl, &results)?;
    let mut csv = Vec::new();
    {
        use std::io::Write as _;
        writeln!(csv, "fact_id,k,recovered_probability")
            .map_err(|e| CliError::Internal(e.to_string()))?;
        for r in &results {
            for p in &r.reversal {
                writeln!(csv, "{},{},{:.9}", r.fact_id, p.k, p.recovered_probability)
                    .map_err(|e| CliError::Internal(e.to_string()))?;
            }
        }
    }

    let mut em = Emitter::new("reverse-attack", out)?;
    em.set_checkpoint_hash(ckpt_hash);
    em.set_dataset_hash(ds.hash);
    em.write_json("candidate.json", &candidate)?;
    em.write_bytes("reversal.jsonl", &jsonl)?;
    em.write_bytes("reversal.csv", &csv)?;
    em.finish()
}

// ---------------------------------------------------------------------------
// full pipeline
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct IndexEntry {
    analysis: &'static str,
    path: &'static str,
}

fn sub_common(
    seed: u64,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: PathBuf,
) -> Common {
    Common {
        config: None,
        seed: Some(seed),
        checkpoint,
        dataset,
        out: Some(out),
        threads: None,
    }
}

/// Recursively hash every regular file under `dir` (relative paths, sorted),
/// skipping manifests: they carry per-run wall-clock readings.
fn walk_hashes(
    root: &Path,
    dir: &Path,
    out: &mut std::collections::BTreeMap<String, String>,
) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Internal(format!("cannot list {}: {e}", dir.display())))?
        .map(|r| r.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Internal(format!("cannot list {}: {e}", dir.display())))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk_hashes(root, &path, out)?;
        } else if path.file_name().map(|n| n != "manifest.json").unwrap_or(false) {
            let rel = path
                .strip_prefix(root)
                .map_err(|e| CliError::Internal(e.to_string()))?
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            let bytes = fs::read(&path)
                .map_err(|e| CliError::Internal(format!("cannot read {}: {e}", path.display())))?;
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(())
}

/// Full pipeline into one directory: shared dataset, then a planted branch
/// (every analysis against the known circuit) and a trained branch (the same
/// analyses against a from-scratch model).
pub fn report(common: &Common) -> CliResult<()> {
    no_config(common, "report")?;
    let out = require(&common.out, "--out", "report")?;
    let seed = common.seed.unwrap_or(0);
    let mut em = Emitter::new("report", out)?;
    em.set_seed(Some(seed));
    let root = out.clone();

    // shared dataset
    let data = root.join("dataset");
    gen_world(&sub_common(seed, None, None, data.clone()))?;
    render_data(&sub_common(seed, Some(data.clone()), None, data.clone()))?;

    // planted branch: analyses against the known ground-truth circuit
    let planted = root.join("planted");
    plant(&sub_common(seed, None, None, planted.clone()))?;
    let pckpt = planted.join("model.ckpt");
    let pfiltered = planted.join("filter");
    filter(&sub_common(seed, Some(data.clone()), Some(pckpt.clone()), pfiltered.clone()))?;
    let pstep = |name: &str| {
        sub_common(seed, Some(pfiltered.clone()), Some(pckpt.clone()), planted.join(name))
    };
    evaluate_cmd(&pstep("evaluate"))?;
    rank(&pstep("rank"))?;
    patch_curve(&pstep("patch-curve"))?;
    independence(&pstep("independence"))?;
    heads(&pstep("heads"))?;
    enrich(&pstep("enrich"))?;
    attack(&pstep("attack"))?;
    reverse_attack(&pstep("reverse-attack"))?;

    // trained branch: the same pipeline on a model trained from scratch
    let trained = root.join("trained");
    train_cmd(&sub_common(seed, Some(data.clone()), None, trained.clone()))?;
    let tckpt = trained.join("model.ckpt");
    let tfiltered = trained.join("filter");
    filter(&sub_common(seed, Some(data), Some(tckpt.clone()), tfiltered.clone()))?;
    let tstep = |name: &str| {
        sub_common(seed, Some(tfiltered.clone()), Some(tckpt.clone()), trained.join(name))
    };
    evaluate_cmd(&tstep("evaluate"))?;
    rank(&tstep("rank"))?;
    patch_curve(&tstep("patch-curve"))?;
    independence(&tstep("independence"))?;
    heads(&tstep("heads"))?;
    attack(&tstep("attack"))?;

    // index naming which artifact carries which analysis
    let index: Vec<IndexEntry> = vec![
        IndexEntry { analysis: "behavioral scatter, planted model", path: "planted/evaluate/behavior.csv" },
        IndexEntry { analysis: "behavioral scatter, trained model", path: "trained/evaluate/behavior.csv" },
        IndexEntry { analysis: "behavioral filter report, trained model", path: "trained/filter/filter_report.json" },
        IndexEntry { analysis: "incorrect-answer origin, trained model", path: "trained/evaluate/origin.json" },
        IndexEntry { analysis: "component importance ranking, planted model", path: "planted/rank/importance.csv" },
        IndexEntry { analysis: "component importance ranking, trained model", path: "trained/rank/importance.csv" },
        IndexEntry { analysis: "cumulative patching curve, planted model", path: "planted/patch-curve/cumulative.csv" },
        IndexEntry { analysis: "cumulative patching curve, trained model", path: "trained/patch-curve/cumulative.csv" },
        IndexEntry { analysis: "joint vs summed patching effects, planted model", path: "planted/independence/independence.csv" },
        IndexEntry { analysis: "joint vs summed patching effects, trained model", path: "trained/independence/independence.csv" },
        IndexEntry { analysis: "attention by prompt kind, planted model", path: "planted/heads/attention.csv" },
        IndexEntry { analysis: "attention by prompt kind, trained model", path: "trained/heads/attention.csv" },
        IndexEntry { analysis: "OV suppression scores, planted model", path: "planted/heads/suppression.csv" },
        IndexEntry { analysis: "OV suppression scores, trained model", path: "trained/heads/suppression.csv" },
        IndexEntry { analysis: "cross-run attention scatter, planted model", path: "planted/heads/cross_run.csv" },
        IndexEntry { analysis: "positional-randomization scatter, planted model", path: "planted/heads/positional.csv" },
        IndexEntry { analysis: "key/query enrichment curves, planted model", path: "planted/enrich/enrichment.csv" },
        IndexEntry { analysis: "token-preference scan, planted model", path: "planted/attack/scan.csv" },
        IndexEntry { analysis: "distractor-injection attack, planted model", path: "planted/attack/attack.csv" },
        IndexEntry { analysis: "distractor-injection attack, trained model", path: "trained/attack/attack.csv" },
        IndexEntry { analysis: "attack reversal by patching, planted model", path: "planted/reverse-attack/reversal.csv" },
    ];
    em.write_json("figure_index.json", &index)?;

    let mut hashes = std::collections::BTreeMap::new();
    walk_hashes(&root, &root, &mut hashes)?;
    for (name, hash) in hashes {
        em.record_output(&name, hash);
    }
    em.finish()
}
