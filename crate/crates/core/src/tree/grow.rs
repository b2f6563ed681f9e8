use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::PerceptionTree;
use crate::agent::{fills, Gateway, RoleName};
use crate::corpus::{normalize_whitespace, Sentence};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Name of the bucket holding sentences no leaf accepted.
pub const UNCLASSIFIED: &str = "unclassified";
pub const MAX_TOPIC_WORDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassifyAudit {
    pub report_id: String,
    pub index: usize,
    pub reply: Option<String>,
    pub leaf_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Classification {
    /// Leaf id → sentences, each list in input order.
    pub assignment: BTreeMap<String, Vec<Sentence>>,
    pub unclassified: Vec<Sentence>,
    pub audit: Vec<ClassifyAudit>,
}

fn clean_reply(reply: &str) -> String {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    line.trim_start_matches("- ")
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*'))
        .trim_end_matches('.')
        .trim()
        .to_lowercase()
}

struct LeafIndex {
    by_path: HashMap<String, String>,
    by_label: HashMap<String, Option<String>>,
    listing: String,
}

impl LeafIndex {
    fn new(tree: &PerceptionTree) -> Self {
        let mut by_path = HashMap::new();
        let mut by_label: HashMap<String, Option<String>> = HashMap::new();
        let mut lines = Vec::new();
        for leaf in tree.leaves() {
            let path = tree.path_label(&leaf.id);
            by_path.insert(path.to_lowercase(), leaf.id.clone());
            by_label
                .entry(leaf.label.to_lowercase())
                .and_modify(|slot| *slot = None)
                .or_insert_with(|| Some(leaf.id.clone()));
            lines.push(path);
        }
        LeafIndex {
            by_path,
            by_label,
            listing: lines.join("\n"),
        }
    }

    /// Full path labels match; bare labels match only when unambiguous.
    fn resolve(&self, reply: &str) -> Option<String> {
        let key = clean_reply(reply);
        self.by_path
            .get(&key)
            .cloned()
            .or_else(|| self.by_label.get(&key).cloned().flatten())
    }
}

/// Asks the classify agent to file each sentence under one leaf.
/// Replies naming no leaf, and transport failures, send the sentence to
/// the unclassified bucket; more than half unclassified is an error.
pub fn classify_sentences(sentences: &[Sentence], tree: &PerceptionTree, agent: &Gateway) -> Result<Classification> {
    let index = LeafIndex::new(tree);
    if index.by_path.is_empty() {
        return Err(Error::Schema("tree has no leaves".into()));
    }
    let audit: Vec<ClassifyAudit> = sentences
        .par_iter()
        .map(|s| {
            let f = fills([("sentence", s.text.clone()), ("labels", index.listing.clone())]);
            let (reply, error) = match agent.call(RoleName::Classify, f, &[]) {
                Ok(r) => (Some(r.text), None),
                Err(e) => {
                    log::warn!("classifying {}#{}: {e}", s.report_id, s.index);
                    (None, Some(e.to_string()))
                }
            };
            ClassifyAudit {
                report_id: s.report_id.clone(),
                index: s.index,
                leaf_id: reply.as_deref().and_then(|r| index.resolve(r)),
                reply,
                error,
            }
        })
        .collect();
    let mut out = Classification::default();
    for (s, a) in sentences.iter().zip(&audit) {
        match &a.leaf_id {
            Some(leaf) => out.assignment.entry(leaf.clone()).or_default().push(s.clone()),
            None => out.unclassified.push(s.clone()),
        }
    }
    out.audit = audit;
    if !sentences.is_empty() && out.unclassified.len() * 2 > sentences.len() {
        return Err(Error::Quality(format!(
            "tree/corpus mismatch: {} of {} sentences unclassified",
            out.unclassified.len(),
            sentences.len()
        )));
    }
    Ok(out)
}

/// Places classified sentences on their leaves and the rest in the
/// unclassified bucket.
pub fn attach_classification(tree: &PerceptionTree, classification: &Classification) -> Result<PerceptionTree> {
    let mut next = tree.clone();
    for (leaf, sentences) in &classification.assignment {
        next.node_mut(leaf)
            .ok_or_else(|| Error::Schema(format!("assignment names unknown leaf {leaf}")))?
            .sentences
            .extend(sentences.iter().cloned());
    }
    next.unclassified.extend(classification.unclassified.iter().cloned());
    Ok(next)
}

fn dedup_key(text: &str) -> String {
    normalize_whitespace(text).to_lowercase()
}

/// Splits each leaf's sentences into `k` groups. Distinct normalized texts
/// are sorted, shuffled by a per-leaf seeded stream, and dealt round-robin;
/// duplicates follow their text into the same group.
pub fn subgroup(
    assignment: &BTreeMap<String, Vec<Sentence>>,
    k: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<Vec<Sentence>>>> {
    if k == 0 {
        return Err(Error::Config("subgroup count k must be at least 1".into()));
    }
    let mut out = BTreeMap::new();
    for (leaf, sentences) in assignment {
        let mut keys: Vec<String> = sentences
            .iter()
            .map(|s| dedup_key(&s.text))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        keys.sort();
        keys.shuffle(&mut rng_for(seed, "subgroup", leaf));
        let group_of: HashMap<&str, usize> = keys.iter().enumerate().map(|(i, k2)| (k2.as_str(), i % k)).collect();
        let mut groups = vec![Vec::new(); k];
        for s in sentences {
            groups[group_of[dedup_key(&s.text).as_str()]].push(s.clone());
        }
        out.insert(leaf.clone(), groups);
    }
    Ok(out)
}

fn topic_label(reply: &str) -> Option<String> {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = line.trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*'));
    let words: Vec<&str> = line.split_whitespace().take(MAX_TOPIC_WORDS).collect();
    (!words.is_empty()).then(|| words.join(" "))
}

/// Adds one topic node per non-empty group under its layer-3 leaf, moving
/// the group's sentences onto it. A group whose summary fails keeps its
/// sentences on the parent. The version advances by one.
pub fn summarize_topics(
    tree: &PerceptionTree,
    groups: &BTreeMap<String, Vec<Vec<Sentence>>>,
    agent: &Gateway,
) -> Result<PerceptionTree> {
    if tree.layer(4).next().is_some() {
        return Err(Error::Schema("topics were already summarized for this tree".into()));
    }
    let mut jobs = Vec::new();
    for leaf in tree.leaves() {
        if leaf.layer != 3 {
            continue;
        }
        for (j, group) in groups.get(&leaf.id).into_iter().flatten().enumerate() {
            if !group.is_empty() {
                jobs.push((leaf.id.clone(), j, group));
            }
        }
    }
    let labels: Vec<Option<String>> = jobs
        .par_iter()
        .map(|(leaf_id, j, group)| {
            let listing = group
                .iter()
                .map(|s| format!("- {}", s.text))
                .collect::<Vec<_>>()
                .join("\n");
            let f = fills([("leaf", tree.path_label(leaf_id)), ("sentences", listing)]);
            match agent.call(RoleName::Summarize, f, &[]) {
                Ok(r) => {
                    let label = topic_label(&r.text);
                    if label.is_none() {
                        log::warn!("empty topic label for {leaf_id} group {j}");
                    }
                    label
                }
                Err(e) => {
                    log::warn!("summarizing {leaf_id} group {j}: {e}");
                    None
                }
            }
        })
        .collect();
    let mut next = tree.clone();
    for ((leaf_id, j, group), label) in jobs.iter().zip(labels) {
        let Some(label) = label else { continue };
        let topic_id = format!("{leaf_id}/topic-{j}");
        next.push_child(leaf_id, &topic_id, label, None)?;
        let moved: HashSet<(&str, usize)> = group.iter().map(|s| (s.report_id.as_str(), s.index)).collect();
        let leaf = next.node_mut(leaf_id).expect("leaf exists");
        leaf.sentences
            .retain(|s| !moved.contains(&(s.report_id.as_str(), s.index)));
        next.node_mut(&topic_id).expect("just added").sentences = (*group).clone();
    }
    next.version += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::super::tests::sentence;
    use super::*;
    use crate::agent::{BackendError, MockBackend};

    fn heart_tree() -> PerceptionTree {
        let mut t = PerceptionTree::with_root("root", "chest");
        t.push_child("root", "heart", "heart", None).unwrap();
        t.push_child("root", "lungs", "lungs", None).unwrap();
        t.push_child("lungs", "lungs/edema", "edema", Some("k".into())).unwrap();
        t
    }

    #[test]
    fn scripted_classification() {
        let tree = heart_tree();
        let mock = MockBackend::new().script(RoleName::Classify, |r| {
            Ok(if r.fill("sentence").contains("heart") {
                "heart".into()
            } else {
                "spleen".into()
            })
        });
        let gw = Gateway::new(mock);
        let s = vec![
            sentence("r1", 0, "The heart is enlarged."),
            sentence("r1", 1, "Spleen."),
        ];
        let c = classify_sentences(&s, &tree, &gw).unwrap();
        assert_eq!(c.assignment["heart"], vec![s[0].clone()]);
        assert_eq!(c.unclassified, vec![s[1].clone()]);
        assert!(classify_sentences(&[], &tree, &gw).unwrap().assignment.is_empty());
    }

    #[test]
    fn path_and_ambiguity() {
        let mut tree = heart_tree();
        tree.push_child("heart", "heart/edema", "edema", Some("k".into()))
            .unwrap();
        let idx = LeafIndex::new(&tree);
        assert_eq!(idx.resolve("Lungs / Edema."), Some("lungs/edema".into()));
        assert_eq!(idx.resolve("edema"), None);
        assert_eq!(idx.resolve("\"heart / edema\""), Some("heart/edema".into()));
    }

    #[test]
    fn majority_unclassified_is_an_error() {
        let gw =
            Gateway::new(MockBackend::new().rule(RoleName::Classify, crate::agent::MockRule::Fixed("none".into())));
        let s = vec![sentence("r1", 0, "x")];
        let err = classify_sentences(&s, &heart_tree(), &gw).unwrap_err();
        assert!(matches!(err, Error::Quality(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn transport_failure_goes_unclassified() {
        let mock = MockBackend::new().script(RoleName::Classify, |r| {
            if r.fill("sentence") == "bad" {
                Err(BackendError::Fatal {
                    status: Some(400),
                    message: "nope".into(),
                })
            } else {
                Ok("heart".into())
            }
        });
        let s = vec![sentence("r", 0, "ok"), sentence("r", 1, "ok2"), sentence("r", 2, "bad")];
        let c = classify_sentences(&s, &heart_tree(), &Gateway::new(mock)).unwrap();
        assert_eq!(c.unclassified.len(), 1);
        assert!(c.audit[2].error.is_some());
    }

    fn assignment(n: usize) -> BTreeMap<String, Vec<Sentence>> {
        let s = (0..n).map(|i| sentence("r", i, &format!("sentence {i}"))).collect();
        BTreeMap::from([("leaf".to_string(), s)])
    }

    #[test]
    fn subgroup_sizes() {
        let g = subgroup(&assignment(10), 1, 0).unwrap();
        assert_eq!(g["leaf"][0].len(), 10);
        let g = subgroup(&assignment(5), 5, 0).unwrap();
        assert!(g["leaf"].iter().all(|grp| grp.len() == 1));
        let g = subgroup(&assignment(7), 3, 42).unwrap();
        assert_eq!(g["leaf"].iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 2]);
        let g = subgroup(&assignment(2), 4, 0).unwrap();
        assert_eq!(g["leaf"].iter().filter(|grp| grp.is_empty()).count(), 2);
        assert!(subgroup(&assignment(2), 0, 0).is_err());
    }

    #[test]
    fn subgroup_keeps_duplicates_together() {
        let mut a = assignment(3);
        a.get_mut("leaf").unwrap().push(sentence("q", 0, "Sentence  1"));
        let g = subgroup(&a, 3, 7).unwrap();
        let total: usize = g["leaf"].iter().map(Vec::len).sum();
        assert_eq!(total, 4);
        assert!(g["leaf"].iter().any(|grp| grp.len() == 2));
    }

    #[test]
    fn summarize_adds_topics_in_order() {
        let tree = heart_tree();
        let groups = BTreeMap::from([(
            "lungs/edema".to_string(),
            vec![vec![sentence("r", 0, "a")], vec![sentence("r", 1, "b")]],
        )]);
        let mock = MockBackend::new().script(RoleName::Summarize, |r| {
            Ok(if r.fill("sentences").contains("- a") {
                "size assessment".into()
            } else {
                "contour".into()
            })
        });
        let next = summarize_topics(&tree, &groups, &Gateway::new(mock)).unwrap();
        let kids: Vec<_> = next.children("lungs/edema").map(|n| n.label.clone()).collect();
        assert_eq!(kids, vec!["size assessment", "contour"]);
        assert_eq!(next.version, tree.version + 1);
        next.validate().unwrap();
        assert!(summarize_topics(&next, &groups, &Gateway::new(MockBackend::new())).is_err());
    }

    #[test]
    fn summarize_truncates_and_tolerates_failures() {
        let mut tree = heart_tree();
        tree.node_mut("lungs/edema").unwrap().sentences = vec![sentence("r", 0, "a"), sentence("r", 1, "b")];
        let groups = BTreeMap::from([(
            "lungs/edema".to_string(),
            vec![vec![sentence("r", 0, "a")], vec![sentence("r", 1, "b")]],
        )]);
        let mock = MockBackend::new().script(RoleName::Summarize, |r| {
            if r.fill("sentences").contains("- a") {
                Ok("one two three four five six seven eight nine ten eleven twelve".into())
            } else {
                Err(BackendError::Fatal {
                    status: None,
                    message: "down".into(),
                })
            }
        });
        let next = summarize_topics(&tree, &groups, &Gateway::new(mock)).unwrap();
        let topic = next.children("lungs/edema").next().unwrap();
        assert_eq!(topic.label, "one two three four five six seven eight");
        assert_eq!(next.node("lungs/edema").unwrap().sentences, vec![sentence("r", 1, "b")]);
        next.validate().unwrap();
    }

    #[test]
    fn empty_groups_only_bump_version() {
        let tree = heart_tree();
        let groups = BTreeMap::from([("lungs/edema".to_string(), vec![vec![], vec![]])]);
        let next = summarize_topics(&tree, &groups, &Gateway::new(MockBackend::new())).unwrap();
        assert_eq!(next.nodes, tree.nodes);
        assert_eq!(next.version, tree.version + 1);
    }
}
