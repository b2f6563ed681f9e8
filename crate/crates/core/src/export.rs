//! Conversation-format training records.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::reasoning::{ReasoningSample, Verification};
use crate::reflection::ReflectionSample;

pub const IMAGE_TOKEN: &str = "<image>";
pub const INSTRUCTION: &str = "Generate the radiology report for this chest X-ray study. \
Review each organ and the conditions relevant to it before writing the final report.";
pub const REFLECTION_SUFFIX: &str = "#reflection";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    #[default]
    ReasoningOnly,
    ReasoningPlusReflection,
}

impl Composition {
    pub fn as_str(self) -> &'static str {
        match self {
            Composition::ReasoningOnly => "reasoning_only",
            Composition::ReasoningPlusReflection => "reasoning_plus_reflection",
        }
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reasoning_only" => Ok(Composition::ReasoningOnly),
            "reasoning_plus_reflection" => Ok(Composition::ReasoningPlusReflection),
            other => Err(Error::Config(format!(
                "unknown composition {other:?} (expected reasoning_only or reasoning_plus_reflection)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionMeta {
    pub corrupted_organ: String,
    pub wrong_description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub images: Vec<String>,
    pub conversations: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHints {
    pub learning_rate: f64,
    pub epochs: u32,
    pub adapter: String,
}

impl Default for TrainingHints {
    fn default() -> Self {
        TrainingHints {
            learning_rate: 1e-5,
            epochs: 3,
            adapter: "lora".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub composition: Composition,
    pub reasoning_inputs: usize,
    pub reflection_inputs: usize,
    pub records: usize,
    /// Records per reasoning input: 1 for reasoning_only, 2 when every
    /// sample also has a reflection variant.
    pub records_per_sample: f64,
    /// Not used by the exporter; carried along for the external trainer.
    pub training: TrainingHints,
}

pub fn user_prompt(n_images: usize) -> String {
    let mut parts = vec![IMAGE_TOKEN; n_images];
    parts.push(INSTRUCTION);
    parts.join("\n")
}

fn record(
    id: String,
    images: &[String],
    transcript: &str,
    reflection: Option<ReflectionMeta>,
) -> Result<TrainingRecord> {
    if images.is_empty() {
        return Err(Error::Schema(format!("sample {id} has no images")));
    }
    Ok(TrainingRecord {
        conversations: vec![
            Message {
                role: "user".into(),
                content: user_prompt(images.len()),
            },
            Message {
                role: "assistant".into(),
                content: transcript.to_string(),
            },
        ],
        id,
        images: images.to_vec(),
        reflection,
    })
}

pub fn reasoning_record(sample: &ReasoningSample) -> Result<TrainingRecord> {
    if sample.verified != Verification::Passed {
        return Err(Error::Schema(format!("sample {} is not verified", sample.report_id)));
    }
    record(sample.report_id.clone(), &sample.image_refs, &sample.transcript, None)
}

pub fn reflection_record(sample: &ReflectionSample) -> Result<TrainingRecord> {
    record(
        format!("{}{REFLECTION_SUFFIX}", sample.base.report_id),
        &sample.base.image_refs,
        &sample.reflection_transcript,
        Some(ReflectionMeta {
            corrupted_organ: sample.corrupted_organ.clone(),
            wrong_description: sample.wrong_description.clone(),
        }),
    )
}

/// Reasoning records in input order; with reflection, each base record is
/// followed by its reflection variant when one exists.
pub fn export_records(
    reasoning: &[ReasoningSample],
    reflection: &[ReflectionSample],
    composition: Composition,
) -> Result<(Vec<TrainingRecord>, ExportManifest)> {
    let mut records = Vec::with_capacity(reasoning.len() * 2);
    let mut by_id = std::collections::HashMap::new();
    if composition == Composition::ReasoningPlusReflection {
        for r in reflection {
            if by_id.insert(r.base.report_id.as_str(), r).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate reflection sample {}",
                    r.base.report_id
                )));
            }
        }
    }
    for s in reasoning {
        records.push(reasoning_record(s)?);
        if let Some(r) = by_id.remove(s.report_id.as_str()) {
            records.push(reflection_record(r)?);
        }
    }
    if let Some(orphan) = by_id.keys().min() {
        return Err(Error::Schema(format!(
            "reflection sample {orphan} has no matching reasoning sample"
        )));
    }
    let manifest = ExportManifest {
        composition,
        reasoning_inputs: reasoning.len(),
        reflection_inputs: if composition == Composition::ReasoningOnly {
            0
        } else {
            reflection.len()
        },
        records: records.len(),
        records_per_sample: if reasoning.is_empty() {
            0.0
        } else {
            records.len() as f64 / reasoning.len() as f64
        },
        training: TrainingHints::default(),
    };
    Ok((records, manifest))
}

/// Checks one exported line against the conversation schema.
pub fn validate_record(v: &Value) -> std::result::Result<(), String> {
    let obj = v.as_object().ok_or("record is not an object")?;
    for key in obj.keys() {
        if !["id", "images", "conversations", "reflection"].contains(&key.as_str()) {
            return Err(format!("unexpected field {key:?}"));
        }
    }
    match obj.get("id").and_then(Value::as_str) {
        Some(id) if !id.is_empty() => {}
        _ => return Err("id must be a non-empty string".into()),
    }
    let images = obj
        .get("images")
        .and_then(Value::as_array)
        .ok_or("images must be an array")?;
    if images.is_empty() || images.iter().any(|i| !i.as_str().is_some_and(|s| !s.is_empty())) {
        return Err("images must be a non-empty array of paths".into());
    }
    let conv = obj
        .get("conversations")
        .and_then(Value::as_array)
        .ok_or("conversations must be an array")?;
    if conv.len() != 2 {
        return Err(format!("expected 2 conversation turns, got {}", conv.len()));
    }
    for (turn, role) in conv.iter().zip(["user", "assistant"]) {
        let t = turn.as_object().ok_or("conversation turn is not an object")?;
        if t.len() != 2 || t.get("role").and_then(Value::as_str) != Some(role) {
            return Err(format!("turn must be {{role: {role:?}, content}}"));
        }
        if !t
            .get("content")
            .and_then(Value::as_str)
            .is_some_and(|c| !c.trim().is_empty())
        {
            return Err(format!("{role} content must be non-empty text"));
        }
    }
    let user = conv[0]["content"].as_str().unwrap_or_default();
    if user.matches(IMAGE_TOKEN).count() != images.len() {
        return Err("image placeholder count differs from the number of images".into());
    }
    if let Some(r) = obj.get("reflection") {
        let meta: ReflectionMeta =
            serde_json::from_value(r.clone()).map_err(|e| format!("invalid reflection field: {e}"))?;
        if meta.corrupted_organ.is_empty() {
            return Err("reflection.corrupted_organ is empty".into());
        }
    }
    Ok(())
}
