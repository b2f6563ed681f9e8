//! The end-to-end commands: tree-build, compile, reflect, export, score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{
    assign_splits, draw_construction_sample, load_corpus, segment_sentences, split_counts, Report, Split,
};
use crate::error::{Error, Result};
use crate::export::{export_records, Composition, ExportManifest};
use crate::io::{read_jsonl, write_json, write_jsonl};
use crate::kg::KnowledgeGraph;
use crate::metrics::{Labeler, ObservationLabels, UncertainPolicy};
use crate::reasoning::{compile_all, CompileOptions, CompileOutcome, ReasoningSample};
use crate::reflection::{augment_all, ReflectionSample};
use crate::tree::{attach_classification, classify_sentences, subgroup, summarize_topics, PerceptionTree, TreeStats};
use crate::{CeScores, NlgScores};

pub const TREE_FILE: &str = "tree.json";
pub const TREE_AUDIT_FILE: &str = "tree_audit.jsonl";
pub const TREE_MANIFEST_FILE: &str = "tree_manifest.json";
pub const REASONING_FILE: &str = "reasoning.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const COMPILE_MANIFEST_FILE: &str = "compile_manifest.json";
pub const REFLECTION_FILE: &str = "reflection.jsonl";
pub const REFLECT_MANIFEST_FILE: &str = "reflect_manifest.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const EXPORT_MANIFEST_FILE: &str = "export_manifest.json";

/// Both corpora with splits applied.
#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub iu_xray: Vec<Report>,
    pub mimic_cxr: Vec<Report>,
}

pub fn load_corpora(cfg: &Config) -> Result<Corpora> {
    let load = |path: &Option<PathBuf>, spec: Option<crate::corpus::SplitSpec>| -> Result<Vec<Report>> {
        let Some(path) = path else { return Ok(Vec::new()) };
        let reports = load_corpus(path)?;
        match spec {
            Some(spec) => assign_splits(&reports, &spec),
            None => Ok(reports),
        }
    };
    Ok(Corpora {
        iu_xray: load(&cfg.corpus.iu_xray, cfg.split_spec_iu()?)?,
        mimic_cxr: load(&cfg.corpus.mimic_cxr, cfg.split_spec_mimic()?)?,
    })
}

/// The reports every construction stage works on.
pub fn construction_sample(cfg: &Config, corpora: &Corpora) -> Result<Vec<Report>> {
    let train = |c: &[Report]| split_counts(c).get(&Split::Train).copied().unwrap_or(0);
    let n_iu = cfg.sample.n_iu.unwrap_or_else(|| train(&corpora.iu_xray));
    let n_mimic = cfg.sample.n_mimic.unwrap_or_else(|| train(&corpora.mimic_cxr));
    let sample = draw_construction_sample(&corpora.iu_xray, &corpora.mimic_cxr, n_iu, n_mimic, cfg.seed)?;
    if sample.is_empty() {
        return Err(Error::Config(
            "construction sample is empty; no train reports selected".into(),
        ));
    }
    Ok(sample)
}

fn prepare_output(cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))
}

fn gateway_for(cfg: &Config, reports: &[Report]) -> Result<crate::agent::Gateway> {
    cfg.gateway(reports.iter().map(|r| (r.id.as_str(), r.report_text.as_str())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeBuildSummary {
    pub reports: usize,
    pub sentences: usize,
    pub classified: usize,
    pub unclassified: usize,
    pub nodes: usize,
    pub per_layer: BTreeMap<u8, usize>,
    pub version: u64,
}

/// Prunes the graph to the organ scope, files every sample sentence under
/// a leaf, and summarizes each leaf's subgroups into topic nodes.
pub fn cmd_tree_build(cfg: &Config) -> Result<TreeBuildSummary> {
    let kg = KnowledgeGraph::load(&cfg.corpus.kg)?;
    let corpora = load_corpora(cfg)?;
    let reports = construction_sample(cfg, &corpora)?;
    let agent = gateway_for(cfg, &reports)?;
    let t0 = if cfg.tree.keep_organs.is_empty() {
        kg.prune_all_organs()?
    } else {
        kg.prune(&cfg.tree.keep_organs)?
    };
    let sentences: Vec<_> = reports
        .iter()
        .flat_map(|r| segment_sentences(&r.id, &r.report_text))
        .collect();
    let classification = classify_sentences(&sentences, &t0, &agent)?;
    let attached = attach_classification(&t0, &classification)?;
    let groups = subgroup(&classification.assignment, cfg.tree.k, cfg.tree_seed())?;
    let tree = summarize_topics(&attached, &groups, &agent)?;
    tree.validate()?;

    prepare_output(cfg)?;
    tree.save(&cfg.out(TREE_FILE))?;
    write_jsonl(&cfg.out(TREE_AUDIT_FILE), &classification.audit)?;
    let TreeStats { nodes, per_layer, .. } = tree.stats();
    let summary = TreeBuildSummary {
        reports: reports.len(),
        sentences: sentences.len(),
        classified: sentences.len() - classification.unclassified.len(),
        unclassified: classification.unclassified.len(),
        nodes,
        per_layer,
        version: tree.version,
    };
    write_json(&cfg.out(TREE_MANIFEST_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectStage {
    Gate,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub report_id: String,
    pub stage: RejectStage,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_scores: Option<NlgScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileManifest {
    pub attempted: usize,
    pub passed: usize,
    pub failed: usize,
    pub aborted: usize,
    pub threshold: f64,
    pub seed: u64,
    pub tree_version: u64,
}

fn check_curated(cfg: &Config, tree: &PerceptionTree) -> Result<()> {
    if tree.layer(2).next().is_none() {
        return Err(Error::Schema("tree has no organ layer".into()));
    }
    if cfg.curation.require_approval && !tree.nodes.iter().any(|n| n.approved) {
        return Err(Error::Config(
            "curation.require_approval is set but no node of the tree has been approved".into(),
        ));
    }
    Ok(())
}

/// Builds and verifies one reasoning sample per sampled report.
pub fn cmd_compile(cfg: &Config, tree_path: &Path) -> Result<CompileManifest> {
    cfg.check_threshold(cfg.gate.threshold)?;
    let tree = PerceptionTree::load(tree_path)?;
    check_curated(cfg, &tree)?;
    let corpora = load_corpora(cfg)?;
    let reports = construction_sample(cfg, &corpora)?;
    let agent = gateway_for(cfg, &reports)?;
    let options = CompileOptions {
        seed: cfg.seed,
        threshold: cfg.gate.threshold,
        attach_images_for_regeneration: cfg.agent.attach_images_for_regeneration,
    };
    let outcomes = compile_all(&agent, &reports, &tree, &options);

    let mut passed = Vec::new();
    let mut rejects = Vec::new();
    let (mut failed, mut aborted) = (0, 0);
    for outcome in outcomes {
        match outcome {
            CompileOutcome::Passed(s) => passed.push(s),
            CompileOutcome::Failed(s) => {
                failed += 1;
                rejects.push(RejectRecord {
                    report_id: s.report_id,
                    stage: RejectStage::Gate,
                    reason: s.reject_reason.unwrap_or_default(),
                    gate_scores: s.gate_scores,
                });
            }
            CompileOutcome::Aborted { report_id, reason } => {
                aborted += 1;
                rejects.push(RejectRecord {
                    report_id,
                    stage: RejectStage::Aborted,
                    reason,
                    gate_scores: None,
                });
            }
        }
    }
    let manifest = CompileManifest {
        attempted: reports.len(),
        passed: passed.len(),
        failed,
        aborted,
        threshold: cfg.gate.threshold,
        seed: cfg.seed,
        tree_version: tree.version,
    };
    debug_assert_eq!(manifest.attempted, manifest.passed + manifest.failed + manifest.aborted);
    prepare_output(cfg)?;
    write_jsonl(&cfg.out(REASONING_FILE), &passed)?;
    write_jsonl(&cfg.out(REJECTS_FILE), &rejects)?;
    write_json(&cfg.out(COMPILE_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub report_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectManifest {
    pub inputs: usize,
    pub outputs: usize,
    pub skipped: Vec<Skip>,
    pub seed: u64,
}

/// One reflection sample per verified input; the rest are skipped with a
/// logged reason.
pub fn cmd_reflect(cfg: &Config, reasoning_path: &Path) -> Result<ReflectManifest> {
    let samples: Vec<ReasoningSample> = read_jsonl(reasoning_path)?;
    let lookup: Vec<(String, String)> = samples
        .iter()
        .map(|s| (s.report_id.clone(), s.final_report.clone()))
        .collect();
    let agent = cfg.gateway(lookup.iter().map(|(a, b)| (a.as_str(), b.as_str())))?;
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (s, r) in samples.iter().zip(augment_all(&agent, &samples, cfg.seed)) {
        match r {
            Ok(r) => out.push(r),
            Err(e) => {
                log::warn!("skipping {}: {e}", s.report_id);
                skipped.push(Skip {
                    report_id: s.report_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let manifest = ReflectManifest {
        inputs: samples.len(),
        outputs: out.len(),
        skipped,
        seed: cfg.seed,
    };
    prepare_output(cfg)?;
    write_jsonl(&cfg.out(REFLECTION_FILE), &out)?;
    write_json(&cfg.out(REFLECT_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Writes the training JSONL for the configured composition.
pub fn cmd_export(cfg: &Config, reasoning_path: &Path, reflection_path: Option<&Path>) -> Result<ExportManifest> {
    let reasoning: Vec<ReasoningSample> = read_jsonl(reasoning_path)?;
    let reflection: Vec<ReflectionSample> = match (cfg.export.composition, reflection_path) {
        (Composition::ReasoningOnly, _) => Vec::new(),
        (Composition::ReasoningPlusReflection, Some(p)) => read_jsonl(p)?,
        (Composition::ReasoningPlusReflection, None) => {
            return Err(Error::Config(
                "reasoning_plus_reflection export needs a reflection file".into(),
            ))
        }
    };
    let (records, manifest) = export_records(&reasoning, &reflection, cfg.export.composition)?;
    prepare_output(cfg)?;
    write_jsonl(&cfg.out(TRAIN_FILE), &records)?;
    write_json(&cfg.out(EXPORT_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// One line of a predictions or references file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLine {
    pub id: String,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerReportScore {
    pub id: String,
    pub bleu_1: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub predicted_labels: ObservationLabels,
    pub reference_labels: ObservationLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub reports: usize,
    pub labeler: String,
    pub uncertain: UncertainPolicy,
    pub nlg: NlgScores,
    pub ce: CeScores,
    pub per_report: Vec<PerReportScore>,
}

fn index_lines(lines: &[ReportLine], what: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for l in lines {
        if map.insert(l.id.clone(), l.report.clone()).is_some() {
            return Err(Error::Schema(format!("{what} lists id {} more than once", l.id)));
        }
    }
    Ok(map)
}

/// Scores `predictions` against `references`, aligned by id in reference
/// order. `uncertain` decides how uncertain labels count for CE.
pub fn score_reports(
    predictions: &[ReportLine],
    references: &[ReportLine],
    labeler: &Labeler,
    uncertain: UncertainPolicy,
) -> Result<ScoreReport> {
    let pred = index_lines(predictions, "predictions")?;
    let refs = index_lines(references, "references")?;
    let pred_ids: HashSet<&String> = pred.keys().collect();
    let ref_ids: HashSet<&String> = refs.keys().collect();
    let mut offenders: Vec<String> = pred_ids.symmetric_difference(&ref_ids).map(|s| s.to_string()).collect();
    if !offenders.is_empty() {
        offenders.sort();
        let total = offenders.len();
        offenders.truncate(5);
        return Err(Error::Schema(format!(
            "prediction and reference ids differ ({total} unmatched): {}",
            offenders.join(", ")
        )));
    }
    let ids: Vec<&str> = references.iter().map(|l| l.id.as_str()).collect();
    let hyps: Vec<&str> = ids.iter().map(|id| pred[*id].as_str()).collect();
    let gold: Vec<&str> = ids.iter().map(|id| refs[*id].as_str()).collect();
    let nlg = NlgScores::score_texts(&hyps, &gold)?;
    let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let pred_labels = labeler.label_all(&owned(&hyps))?;
    let gold_labels = labeler.label_all(&owned(&gold))?;
    if pred_labels.len() != ids.len() || gold_labels.len() != ids.len() {
        return Err(Error::Schema(
            "labeler returned the wrong number of label vectors".into(),
        ));
    }
    let ce = crate::metrics::ce_scores_with(&pred_labels, &gold_labels, uncertain)?;
    let per_report = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = NlgScores::score_texts(&hyps[i..=i], &gold[i..=i])?;
            Ok(PerReportScore {
                id: id.to_string(),
                bleu_1: s.bleu_1,
                bleu_4: s.bleu_4,
                meteor: s.meteor,
                rouge_l: s.rouge_l,
                predicted_labels: pred_labels[i],
                reference_labels: gold_labels[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreReport {
        reports: ids.len(),
        labeler: match labeler {
            Labeler::Keyword => "keyword".into(),
            Labeler::Service(url) => url.clone(),
        },
        uncertain,
        nlg,
        ce,
        per_report,
    })
}

pub fn cmd_score(
    predictions: &Path,
    references: &Path,
    labeler: &Labeler,
    uncertain: UncertainPolicy,
    out: &Path,
) -> Result<ScoreReport> {
    let p: Vec<ReportLine> = read_jsonl(predictions)?;
    let r: Vec<ReportLine> = read_jsonl(references)?;
    let report = score_reports(&p, &r, labeler, uncertain)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_json(out, &report)?;
    Ok(report)
}
