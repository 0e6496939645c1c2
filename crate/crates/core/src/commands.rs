//! Subcommand implementations shared by the binary and the tests.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{gate_predictions, gated_in, run_ablation, score, AblationTable, MatchMode, Predictions, ScoreReport};
use crate::gate::{agreement_table, load_gate_records, AgreementTable, VerdictTriple, VotePolicy};
use crate::model::{load_gold, Ontology};
use crate::pipeline::{Pipeline, RunOutput, StageName};

fn load_ontology(path: Option<&Path>) -> Result<Ontology> {
    path.map_or_else(|| Ok(Ontology::shipped()), Ontology::load)
}

/// Runs the pipeline up to `until` (the full pipeline when `StageName::Final`).
pub fn cmd_run(config: &Path, until: StageName, resume: bool) -> Result<RunOutput> {
    let pipeline = Pipeline::new(PipelineConfig::load(config)?)?;
    pipeline.run(until, resume)
}

pub fn cmd_build_index(config: &Path) -> Result<(PathBuf, usize)> {
    Pipeline::new(PipelineConfig::load(config)?)?.build_index()
}

/// Scores a predictions file (gold-shaped) against a gold file. Writes JSON to `out` if given.
pub fn cmd_score(predictions: &Path, gold: &Path, ontology: Option<&Path>, mode: MatchMode, out: Option<&Path>) -> Result<ScoreReport> {
    let ontology = load_ontology(ontology)?;
    let gold = load_gold(gold, &ontology)?;
    let preds: Predictions = load_gold(predictions, &ontology)?
        .into_iter()
        .map(|r| (r.segment.id, r.gold_events))
        .collect();
    let report = score(&preds, &gold, mode)?;
    if let Some(out) = out {
        let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
        fs::write(out, text).map_err(|e| Error::io(out, e))?;
    }
    Ok(report)
}

pub fn cmd_agreement(verdicts: &Path) -> Result<AgreementTable> {
    let records = load_gate_records(verdicts)?;
    Ok(agreement_table(records.iter().map(|r| r.triple()).collect::<Vec<_>>().iter()))
}

/// Extracts once per config with the gate disabled (artifacts under
/// `<output_dir>/ablation`, resumed when present), then scores each policy by
/// filtering those predictions with the gate verdicts.
pub fn cmd_ablate(configs: &[PathBuf], policies: &[VotePolicy]) -> Result<AblationTable> {
    if configs.is_empty() {
        return Err(Error::Config("ablate needs at least one config".into()));
    }
    let mut table = AblationTable::new(policies.to_vec());
    for path in configs {
        let mut cfg = PipelineConfig::load(path)?;
        cfg.gate.policy = VotePolicy::None;
        cfg.paths.output_dir = cfg.paths.output_dir.join("ablation");
        let label = cfg.label().to_string();
        let mode = cfg.scoring.mode;
        let pipeline = Pipeline::new(cfg)?;
        let out = pipeline.run(StageName::Final, true)?;
        let predictions = out.predictions.unwrap_or_default();
        let verdicts: HashMap<String, VerdictTriple> = out.gate.iter().map(|g| (g.id.clone(), g.triple())).collect();
        let by_policy: BTreeMap<VotePolicy, Predictions> = policies
            .iter()
            .map(|&p| (p, gate_predictions(&predictions, &verdicts, p)))
            .collect();
        let row = run_ablation(&label, pipeline.segments(), &verdicts, &by_policy, policies, mode)?;

        let ids: Vec<&str> = pipeline.segments().iter().map(|s| s.segment.id.as_str()).collect();
        let set = |p: VotePolicy| gated_in(ids.iter().copied(), &verdicts, p);
        let (three, two, one) = (set(VotePolicy::All), set(VotePolicy::AtLeast(2)), set(VotePolicy::AtLeast(1)));
        let nested = three.iter().all(|id| two.contains(id)) && two.iter().all(|id| one.contains(id));
        table.notes.push(format!(
            "{label}: three ({}) ⊆ two+ ({}) ⊆ one+ ({}): {}; new provider calls: {}",
            three.len(),
            two.len(),
            one.len(),
            if nested { "holds" } else { "VIOLATED" },
            out.stats.total_provider_calls()
        ));
        table.rows.push(row);
    }
    Ok(table)
}
