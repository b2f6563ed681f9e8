//! Self-correction samples: one organ description is replaced by a wrong
//! one, followed by a sentence catching the error and the correct text.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{fills, Gateway, RoleName};
use crate::corpus::normalize_whitespace;
use crate::error::{Error, Result};
use crate::reasoning::{render_transcript, ReasoningSample, Splice, Verification};
use crate::seed::rng_for;

/// Spoken right after the wrong description.
pub const REFLECTION_POOL_1: [&str; 6] = [
    "Wait, let me double-check that.",
    "Hmm, on closer inspection that does not look right.",
    "Let me re-examine this region before moving on.",
    "That seems inconsistent with the image; let me look again.",
    "I should verify this observation more carefully.",
    "Actually, I need to reconsider what I just described.",
];

/// Spoken before the final report.
pub const REFLECTION_POOL_2: [&str; 6] = [
    "I corrected an earlier mistake, so the report reflects the revised observation.",
    "Having fixed my earlier misreading, I can now write the report.",
    "After correcting that error, the findings above are consistent.",
    "With the earlier description revised, everything now agrees with the image.",
    "The corrected observation is the one that goes into the report.",
    "Now that the mistake is resolved, the report can be finalized.",
];

const NORMAL_CUES: [&str; 6] = ["normal", "no", "unremarkable", "clear", "without", "intact"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionSample {
    #[serde(flatten)]
    pub base: ReasoningSample,
    pub corrupted_organ: String,
    pub wrong_description: String,
    pub reflection_1: String,
    pub reflection_2: String,
    pub reflection_transcript: String,
}

/// Seeded choice of the organ block to corrupt.
pub fn pick_corruption_target(sample: &ReasoningSample, seed: u64) -> Result<usize> {
    if sample.blocks.is_empty() {
        return Err(Error::Schema(format!(
            "sample {} has no organ blocks",
            sample.report_id
        )));
    }
    let mut rng = rng_for(seed, "reflect", &sample.report_id);
    Ok(rng.random_range(0..sample.blocks.len()))
}

fn canonical(text: &str) -> String {
    normalize_whitespace(text).to_lowercase()
}

fn looks_normal(text: &str) -> bool {
    crate::corpus::tokenize(text)
        .iter()
        .any(|t| NORMAL_CUES.contains(&t.as_str()))
}

fn abnormal_variant(organ: &str) -> String {
    let finding = match organ.to_ascii_lowercase().as_str() {
        "heart" => "is markedly enlarged",
        "lungs" | "lung" => "show a dense consolidation in the right lower zone",
        "pleura" => "shows a large effusion with blunting of the costophrenic angle",
        "mediastinum" => "is widened",
        "bones" => "show an acute displaced rib fracture",
        "airways" => "show diffuse bronchial wall thickening",
        "devices" => "include a malpositioned catheter",
        _ => "shows a new acute abnormality",
    };
    format!("The {organ} {finding}.")
}

/// Fallback used when the agent returns the description unchanged twice.
pub fn fallback_corruption(organ: &str, original: &str) -> String {
    if looks_normal(original) {
        abnormal_variant(organ)
    } else {
        format!("No abnormality of the {organ} is seen.")
    }
}

/// Asks the agent for a plausible but wrong description; the result always
/// differs from `original` after whitespace and case normalization.
pub fn corrupt_description(agent: &Gateway, organ: &str, original: &str, images: &[String]) -> Result<String> {
    let target = canonical(original);
    for retry_note in [
        "",
        "Your previous answer repeated the original; the new description must differ from it.",
    ] {
        let f = fills([
            ("organ", organ.to_string()),
            ("description", original.to_string()),
            ("retry_note", retry_note.to_string()),
        ]);
        let reply = normalize_whitespace(&agent.call(RoleName::CorruptDescription, f, images)?.text);
        if !reply.is_empty() && canonical(&reply) != target {
            return Ok(reply);
        }
    }
    log::warn!("corruption agent repeated the {organ} description; using fallback");
    let fallback = fallback_corruption(organ, original);
    if canonical(&fallback) == target {
        return Ok(format!("The {organ} appears abnormal."));
    }
    Ok(fallback)
}

fn pick(pool: &[&str], rng: &mut impl Rng) -> String {
    pool[rng.random_range(0..pool.len())].to_string()
}

pub fn build_reflection_sample(agent: &Gateway, sample: &ReasoningSample, seed: u64) -> Result<ReflectionSample> {
    if sample.verified != Verification::Passed {
        return Err(Error::Schema(format!(
            "sample {} has not passed verification and cannot be augmented",
            sample.report_id
        )));
    }
    let organ = pick_corruption_target(sample, seed)?;
    let block = &sample.blocks[organ];
    let wrong = corrupt_description(agent, &block.organ_label, &block.description, &sample.image_refs)?;
    let mut rng = rng_for(seed, "reflection-sentences", &sample.report_id);
    let reflection_1 = pick(&REFLECTION_POOL_1, &mut rng);
    let reflection_2 = pick(&REFLECTION_POOL_2, &mut rng);
    let transcript = render_transcript(
        &sample.blocks,
        &sample.fine_grained,
        &sample.connectors,
        &sample.final_report,
        Some(&Splice {
            organ,
            wrong_description: &wrong,
            reflection_1: &reflection_1,
            reflection_2: &reflection_2,
        }),
    );
    Ok(ReflectionSample {
        base: sample.clone(),
        corrupted_organ: block.organ_label.clone(),
        wrong_description: wrong,
        reflection_1,
        reflection_2,
        reflection_transcript: transcript,
    })
}

/// Augments every passed sample; input order is kept and failures are
/// reported per sample.
pub fn augment_all(agent: &Gateway, samples: &[ReasoningSample], seed: u64) -> Vec<Result<ReflectionSample>> {
    samples
        .par_iter()
        .map(|s| build_reflection_sample(agent, s, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{MockBackend, MockRule};
    use crate::reasoning::{Finding, KnowledgeItem, OrganBlock};

    fn sample() -> ReasoningSample {
        let blocks = vec![
            OrganBlock {
                organ_label: "heart".into(),
                knowledge_items: vec![KnowledgeItem {
                    condition_label: "cardiomegaly".into(),
                    knowledge_text: "ratio above one half".into(),
                }],
                description: "The heart is normal in size.".into(),
            },
            OrganBlock {
                organ_label: "bones".into(),
                knowledge_items: vec![],
                description: "Old healed rib fracture.".into(),
            },
        ];
        let fine_grained = vec![Finding {
            condition_label: "fracture".into(),
            present: true,
            sentence: "Healed rib fracture.".into(),
        }];
        let connectors: Vec<String> = vec!["C0.".into(), "C1.".into(), "C2.".into()];
        let final_report = "Normal heart. Healed rib fracture.".to_string();
        ReasoningSample {
            report_id: "r9".into(),
            image_refs: vec![],
            transcript: render_transcript(&blocks, &fine_grained, &connectors, &final_report, None),
            blocks,
            fine_grained,
            final_report,
            connectors,
            verified: Verification::Passed,
            gate_scores: None,
            reject_reason: None,
        }
    }

    #[test]
    fn ordering_and_structure() {
        let s = sample();
        let gw = Gateway::new(MockBackend::standard());
        for seed in 0..10 {
            let r = build_reflection_sample(&gw, &s, seed).unwrap();
            let t = &r.reflection_transcript;
            let organ = s
                .blocks
                .iter()
                .position(|b| b.organ_label == r.corrupted_organ)
                .unwrap();
            let correct = &s.blocks[organ].description;
            let w = t.find(&r.wrong_description).unwrap();
            let r1 = t.find(&r.reflection_1).unwrap();
            let c = w + t[w..].find(correct.as_str()).unwrap();
            assert!(w < r1 && r1 < c);
            let r2 = t.find(&r.reflection_2).unwrap();
            let fin = t.rfind(&s.final_report).unwrap();
            assert!(r2 < fin);
            assert!(t.ends_with(&s.final_report));
            assert_ne!(canonical(&r.wrong_description), canonical(correct));
            assert_eq!(r.base.transcript, s.transcript);
        }
    }

    #[test]
    fn target_is_seeded() {
        let s = sample();
        assert_eq!(
            pick_corruption_target(&s, 3).unwrap(),
            pick_corruption_target(&s, 3).unwrap()
        );
        let hits: std::collections::BTreeSet<usize> = (0..40).map(|k| pick_corruption_target(&s, k).unwrap()).collect();
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn repeated_reply_falls_back() {
        let s = sample();
        let gw =
            Gateway::new(MockBackend::new().rule(RoleName::CorruptDescription, MockRule::Echo("description".into())));
        let normal = corrupt_description(&gw, "heart", &s.blocks[0].description, &[]).unwrap();
        assert_eq!(normal, "The heart is markedly enlarged.");
        let abnormal = corrupt_description(&gw, "lungs", "Dense consolidation at the base.", &[]).unwrap();
        assert_eq!(abnormal, "No abnormality of the lungs is seen.");
    }

    #[test]
    fn only_passed_samples() {
        let mut s = sample();
        s.verified = Verification::Failed;
        let gw = Gateway::new(MockBackend::standard());
        assert!(build_reflection_sample(&gw, &s, 0).is_err());
    }

    #[test]
    fn json_flattens_base() {
        let gw = Gateway::new(MockBackend::standard());
        let r = build_reflection_sample(&gw, &sample(), 1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["report_id"], "r9");
        assert!(v["reflection_transcript"].is_string());
        assert_eq!(serde_json::from_value::<ReflectionSample>(v).unwrap(), r);
    }
}
