//! Four-part reasoning samples (knowledge injection, perception
//! description, fine-grained findings, final report) and the round-trip
//! verification gate.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{fills, Gateway, RoleName};
use crate::corpus::{normalize_whitespace, Report};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tree::PerceptionTree;
use crate::NlgScores;

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.3;

/// Thinking sentences that open the organ walk-through, the findings list
/// and the final report, in that order.
pub const CONNECTOR_POOLS: [[&str; 10]; 3] = [
    [
        "Let me examine each organ systematically.",
        "I will go through the image one structure at a time.",
        "First, I will review each organ and what to look for.",
        "Let me work through the anatomy in order before drawing conclusions.",
        "I will start by checking every organ against its diagnostic criteria.",
        "Let me look at each region of the image carefully.",
        "To begin, I will assess the organs one by one.",
        "I should inspect each structure in turn and recall how its conditions appear.",
        "Let me start with a structured review of the image.",
        "I will first recall the relevant criteria and then describe each organ.",
    ],
    [
        "Now let me state each relevant finding.",
        "Based on these observations, here are the findings for each condition.",
        "Next, I will summarize what is and is not present.",
        "Putting the observations together, the individual findings are:",
        "Let me now write a sentence for each condition I checked.",
        "From this review, I can list the findings one by one.",
        "Having examined every organ, I will record the findings.",
        "Now I will turn these observations into report sentences.",
        "Let me translate what I saw into individual findings.",
        "With the review complete, the findings are as follows.",
    ],
    [
        "Finally, I will write the report.",
        "Now I can compose the final report.",
        "Summarizing everything above, the report reads:",
        "Let me combine these findings into the final report.",
        "With all findings established, here is the report.",
        "I will now write the final radiology report.",
        "Bringing it all together, the final report is:",
        "Based on the reasoning above, the report is as follows.",
        "Let me conclude with the complete report.",
        "Here is the final report for this study.",
    ],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    Pending,
    Passed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub condition_label: String,
    pub knowledge_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganBlock {
    pub organ_label: String,
    pub knowledge_items: Vec<KnowledgeItem>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub condition_label: String,
    pub present: bool,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningSample {
    pub report_id: String,
    pub image_refs: Vec<String>,
    pub transcript: String,
    pub blocks: Vec<OrganBlock>,
    pub fine_grained: Vec<Finding>,
    pub final_report: String,
    pub connectors: Vec<String>,
    pub verified: Verification,
    #[serde(default)]
    pub gate_scores: Option<NlgScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<String>,
}

/// A corruption to splice into the rendered transcript.
pub(crate) struct Splice<'a> {
    pub organ: usize,
    pub wrong_description: &'a str,
    pub reflection_1: &'a str,
    pub reflection_2: &'a str,
}

pub fn render_knowledge(items: &[KnowledgeItem]) -> String {
    items
        .iter()
        .map(|i| format!("To assess {}: {}", i.condition_label, i.knowledge_text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn organ_section(block: &OrganBlock, splice: Option<&Splice<'_>>) -> String {
    let mut lines = vec![format!("Focusing on the {}.", block.organ_label)];
    if !block.knowledge_items.is_empty() {
        lines.push(render_knowledge(&block.knowledge_items));
    }
    if let Some(s) = splice {
        lines.push(s.wrong_description.to_string());
        lines.push(s.reflection_1.to_string());
    }
    lines.push(block.description.clone());
    lines.join("\n")
}

fn reasoning_paragraphs(
    blocks: &[OrganBlock],
    fine_grained: &[Finding],
    connectors: &[String],
    splice: Option<&Splice<'_>>,
) -> Vec<String> {
    let mut paras = vec![connectors[0].clone()];
    for (i, b) in blocks.iter().enumerate() {
        paras.push(organ_section(b, splice.filter(|s| s.organ == i)));
    }
    let mut findings = vec![connectors[1].clone()];
    findings.extend(fine_grained.iter().map(|f| f.sentence.clone()));
    paras.push(findings.join("\n"));
    paras
}

pub(crate) fn render_transcript(
    blocks: &[OrganBlock],
    fine_grained: &[Finding],
    connectors: &[String],
    final_report: &str,
    splice: Option<&Splice<'_>>,
) -> String {
    let mut paras = reasoning_paragraphs(blocks, fine_grained, connectors, splice);
    if let Some(s) = splice {
        paras.push(s.reflection_2.to_string());
    }
    paras.push(format!("{}\n{}", connectors[2], final_report));
    paras.join("\n\n")
}

impl ReasoningSample {
    /// Transcript without the final-report section; what the regeneration
    /// agent sees.
    pub fn reasoning_text(&self) -> String {
        reasoning_paragraphs(&self.blocks, &self.fine_grained, &self.connectors, None).join("\n\n")
    }

    pub fn render(&self) -> String {
        render_transcript(
            &self.blocks,
            &self.fine_grained,
            &self.connectors,
            &self.final_report,
            None,
        )
    }
}

fn organ_node<'a>(tree: &'a PerceptionTree, organ_label: &str) -> Result<&'a crate::tree::TreeNode> {
    tree.layer(2)
        .find(|n| n.label.eq_ignore_ascii_case(organ_label))
        .ok_or_else(|| Error::Schema(format!("organ {organ_label:?} is not in layer 2 of the tree")))
}

/// Layer-3 conditions under the organ, with their diagnostic knowledge.
pub fn build_knowledge_block(tree: &PerceptionTree, organ_label: &str) -> Result<Vec<KnowledgeItem>> {
    let organ = organ_node(tree, organ_label)?;
    tree.children(&organ.id)
        .map(|c| {
            let text = c
                .knowledge_text
                .as_deref()
                .filter(|t| !t.trim().is_empty())
                .ok_or_else(|| Error::Schema(format!("condition node {} has no knowledge_text", c.id)))?;
            Ok(KnowledgeItem {
                condition_label: c.label.clone(),
                knowledge_text: text.trim().to_string(),
            })
        })
        .collect()
}

pub fn describe_organ(
    agent: &Gateway,
    report: &Report,
    organ_label: &str,
    knowledge_items: &[KnowledgeItem],
) -> Result<String> {
    let knowledge = if knowledge_items.is_empty() {
        "(no specific conditions listed)".to_string()
    } else {
        render_knowledge(knowledge_items)
    };
    let f = fills([
        ("report_id", report.id.clone()),
        ("ground_truth", report.report_text.clone()),
        ("organ", organ_label.to_string()),
        ("knowledge", knowledge),
    ]);
    let reply = agent.call(RoleName::DescribeOrgan, f, &report.image_refs)?;
    let text = normalize_whitespace(&reply.text);
    if text.is_empty() {
        return Err(Error::Quality(format!("empty organ description for {organ_label}")));
    }
    Ok(text)
}

/// Distinct layer-3 labels in tree order.
pub fn condition_labels(tree: &PerceptionTree) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for organ in tree.layer(2) {
        for c in tree.children(&organ.id) {
            if !out.iter().any(|l| l.eq_ignore_ascii_case(&c.label)) {
                out.push(c.label.clone());
            }
        }
    }
    out
}

/// Parses `LABEL<TAB>yes|no<TAB>sentence` lines against the known labels.
/// Returns the parsed verdicts and the number of dropped lines.
pub fn parse_judgments(reply: &str, labels: &[String]) -> (HashMap<usize, (bool, String)>, usize) {
    let mut verdicts = HashMap::new();
    let mut dropped = 0;
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let parts: Vec<&str> = line.splitn(3, '\t').map(str::trim).collect();
        let parsed = match parts.as_slice() {
            [label, flag, sentence] if !sentence.is_empty() => {
                let present = match flag.to_ascii_lowercase().as_str() {
                    "yes" => Some(true),
                    "no" => Some(false),
                    _ => None,
                };
                let idx = labels.iter().position(|l| l.eq_ignore_ascii_case(label));
                present.zip(idx).map(|(p, i)| (i, p, normalize_whitespace(sentence)))
            }
            _ => None,
        };
        match parsed {
            Some((i, p, s)) => {
                verdicts.entry(i).or_insert((p, s));
            }
            None => {
                log::debug!("dropping unparseable judgment line {line:?}");
                dropped += 1;
            }
        }
    }
    (verdicts, dropped)
}

/// One verdict per layer-3 condition of the tree, in tree order. Conditions
/// the agent skipped default to absent.
pub fn judge_conditions(agent: &Gateway, report: &Report, tree: &PerceptionTree) -> Result<Vec<Finding>> {
    let labels = condition_labels(tree);
    let f = fills([
        ("report_id", report.id.clone()),
        ("ground_truth", report.report_text.clone()),
        ("conditions", labels.join("\n")),
    ]);
    let reply = agent.call(RoleName::JudgeConditions, f, &report.image_refs)?;
    let (verdicts, dropped) = parse_judgments(&reply.text, &labels);
    if dropped > 0 {
        log::warn!("report {}: dropped {dropped} unparseable judgment line(s)", report.id);
    }
    if verdicts.is_empty() {
        return Err(Error::Quality(format!(
            "report {}: no parseable condition judgments",
            report.id
        )));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let (present, sentence) = verdicts
                .get(&i)
                .cloned()
                .unwrap_or_else(|| (false, format!("No evidence of {label}.")));
            Finding {
                condition_label: label.clone(),
                present,
                sentence,
            }
        })
        .collect())
}

/// Seeded pick of one connector per slot for a report.
pub fn pick_connectors(seed: u64, report_id: &str) -> Vec<String> {
    let mut rng = rng_for(seed, "connectors", report_id);
    CONNECTOR_POOLS
        .iter()
        .map(|pool| pool[rng.random_range(0..pool.len())].to_string())
        .collect()
}

pub fn assemble_sample(
    report: &Report,
    tree: &PerceptionTree,
    organ_blocks: Vec<OrganBlock>,
    findings: Vec<Finding>,
    connectors: Vec<String>,
) -> Result<ReasoningSample> {
    if connectors.len() != 3 {
        return Err(Error::Internal(format!(
            "expected 3 connectors, got {}",
            connectors.len()
        )));
    }
    let organs: Vec<&str> = tree.layer(2).map(|n| n.label.as_str()).collect();
    for organ in &organs {
        if !organ_blocks.iter().any(|b| b.organ_label.eq_ignore_ascii_case(organ)) {
            return Err(Error::Schema(format!(
                "report {}: no organ block for {organ}",
                report.id
            )));
        }
    }
    let mut blocks = organ_blocks;
    blocks.sort_by_key(|b| organs.iter().position(|o| o.eq_ignore_ascii_case(&b.organ_label)));
    let (mut fine_grained, negatives): (Vec<Finding>, Vec<Finding>) = findings.into_iter().partition(|f| f.present);
    fine_grained.extend(negatives);
    let final_report = report.report_text.clone();
    let transcript = render_transcript(&blocks, &fine_grained, &connectors, &final_report, None);
    Ok(ReasoningSample {
        report_id: report.id.clone(),
        image_refs: report.image_refs.clone(),
        transcript,
        blocks,
        fine_grained,
        final_report,
        connectors,
        verified: Verification::Pending,
        gate_scores: None,
        reject_reason: None,
    })
}

/// Has an agent rewrite the report from the reasoning alone and passes the
/// sample iff BLEU-1 against the ground truth reaches `threshold`.
pub fn verify_sample(
    agent: &Gateway,
    mut sample: ReasoningSample,
    threshold: f64,
    attach_images: bool,
) -> ReasoningSample {
    let f = fills([
        ("report_id", sample.report_id.clone()),
        ("reasoning", sample.reasoning_text()),
    ]);
    let images: &[String] = if attach_images { &sample.image_refs } else { &[] };
    match agent.call(RoleName::RegenerateReport, f, images) {
        Ok(reply) => {
            let scores = NlgScores::score_texts(&[reply.text.as_str()], &[sample.final_report.as_str()])
                .expect("one aligned pair");
            sample.verified = if scores.bleu_1 >= threshold {
                Verification::Passed
            } else {
                Verification::Failed
            };
            if sample.verified == Verification::Failed {
                sample.reject_reason = Some(format!("BLEU-1 {:.4} below threshold {threshold}", scores.bleu_1));
            }
            sample.gate_scores = Some(scores);
        }
        Err(e) => {
            sample.verified = Verification::Failed;
            sample.reject_reason = Some(format!("regeneration failed: {e}"));
        }
    }
    sample
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompileOutcome {
    Passed(ReasoningSample),
    Failed(ReasoningSample),
    Aborted { report_id: String, reason: String },
}

#[derive(Debug, Clone, Copy)]
pub struct CompileOptions {
    pub seed: u64,
    pub threshold: f64,
    pub attach_images_for_regeneration: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            seed: 0,
            threshold: DEFAULT_GATE_THRESHOLD,
            attach_images_for_regeneration: false,
        }
    }
}

fn build_sample(agent: &Gateway, report: &Report, tree: &PerceptionTree, seed: u64) -> Result<ReasoningSample> {
    let mut blocks = Vec::new();
    for organ in tree.layer(2) {
        let knowledge_items = build_knowledge_block(tree, &organ.label)?;
        let description = describe_organ(agent, report, &organ.label, &knowledge_items)?;
        blocks.push(OrganBlock {
            organ_label: organ.label.clone(),
            knowledge_items,
            description,
        });
    }
    let findings = judge_conditions(agent, report, tree)?;
    assemble_sample(report, tree, blocks, findings, pick_connectors(seed, &report.id))
}

pub fn compile_report(
    agent: &Gateway,
    report: &Report,
    tree: &PerceptionTree,
    options: &CompileOptions,
) -> CompileOutcome {
    match build_sample(agent, report, tree, options.seed) {
        Ok(sample) => {
            let sample = verify_sample(agent, sample, options.threshold, options.attach_images_for_regeneration);
            match sample.verified {
                Verification::Passed => CompileOutcome::Passed(sample),
                _ => CompileOutcome::Failed(sample),
            }
        }
        Err(e) => {
            log::warn!("aborting report {}: {e}", report.id);
            CompileOutcome::Aborted {
                report_id: report.id.clone(),
                reason: e.to_string(),
            }
        }
    }
}

/// Compiles reports concurrently; outcomes keep input order.
pub fn compile_all(
    agent: &Gateway,
    reports: &[Report],
    tree: &PerceptionTree,
    options: &CompileOptions,
) -> Vec<CompileOutcome> {
    reports
        .par_iter()
        .map(|r| compile_report(agent, r, tree, options))
        .collect()
}
