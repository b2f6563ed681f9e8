//! The layered perception tree (root → organs → conditions → topics), its
//! canonical JSON form, manual edits, and the agent-driven growth steps.

mod edit;
mod grow;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;

pub use edit::{EditKind, TreeEdit};
pub use grow::{
    attach_classification, classify_sentences, subgroup, summarize_topics, Classification, ClassifyAudit,
    MAX_TOPIC_WORDS, UNCLASSIFIED,
};

pub const MAX_LAYER: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("the root node cannot be pruned")]
    PruneRoot,
    #[error("nodes {0} and {1} do not share a parent and layer")]
    CrossParentMerge(String, String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("invalid tree at {pointer}: {message}")]
    Invalid { pointer: String, message: String },
}

impl From<TreeError> for crate::Error {
    fn from(e: TreeError) -> Self {
        crate::Error::Schema(e.to_string())
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: String,
    pub label: String,
    pub layer: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sentences: Vec<Sentence>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub approved: bool,
}

/// Nodes are stored in a flat list; sibling order is list order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionTree {
    pub version: u64,
    pub root_id: String,
    pub nodes: Vec<TreeNode>,
    #[serde(default)]
    pub unclassified: Vec<Sentence>,
    #[serde(default)]
    pub edit_log: Vec<TreeEdit>,
}

impl PerceptionTree {
    /// A tree holding only its root.
    pub fn with_root(id: impl Into<String>, label: impl Into<String>) -> Self {
        let id = id.into();
        PerceptionTree {
            version: 0,
            root_id: id.clone(),
            nodes: vec![TreeNode {
                id,
                label: label.into(),
                layer: 1,
                knowledge_text: None,
                parent_id: None,
                sentences: Vec::new(),
                approved: false,
            }],
            unclassified: Vec::new(),
            edit_log: Vec::new(),
        }
    }

    pub(crate) fn push_child(
        &mut self,
        parent_id: &str,
        id: impl Into<String>,
        label: impl Into<String>,
        knowledge_text: Option<String>,
    ) -> Result<(), TreeError> {
        let parent = self
            .node(parent_id)
            .ok_or_else(|| TreeError::UnknownNode(parent_id.to_string()))?;
        let layer = parent.layer + 1;
        let id = id.into();
        if layer > MAX_LAYER {
            return Err(TreeError::InvalidEdit(format!("node {id} would be at layer {layer}")));
        }
        if self.node(&id).is_some() {
            return Err(TreeError::InvalidEdit(format!("duplicate node id {id}")));
        }
        self.nodes.push(TreeNode {
            id,
            label: label.into(),
            layer,
            knowledge_text,
            parent_id: Some(parent_id.to_string()),
            sentences: Vec::new(),
            approved: false,
        });
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&TreeNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub(crate) fn node_mut(&mut self, id: &str) -> Option<&mut TreeNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn root(&self) -> &TreeNode {
        self.node(&self.root_id).expect("validated tree has its root")
    }

    pub fn children<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a TreeNode> + 'a {
        self.nodes.iter().filter(move |n| n.parent_id.as_deref() == Some(id))
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        self.children(id).next().is_none()
    }

    /// Leaves in list order.
    pub fn leaves(&self) -> Vec<&TreeNode> {
        let parents: HashSet<&str> = self.nodes.iter().filter_map(|n| n.parent_id.as_deref()).collect();
        self.nodes.iter().filter(|n| !parents.contains(n.id.as_str())).collect()
    }

    pub fn layer(&self, layer: u8) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(move |n| n.layer == layer)
    }

    pub fn depth(&self) -> u8 {
        self.nodes.iter().map(|n| n.layer).max().unwrap_or(0)
    }

    /// Labels from layer 2 down to `id`, joined by `" / "`.
    pub fn path_label(&self, id: &str) -> String {
        let mut parts = Vec::new();
        let mut cur = self.node(id);
        while let Some(n) = cur {
            if n.layer < 2 {
                break;
            }
            parts.push(n.label.as_str());
            cur = n.parent_id.as_deref().and_then(|p| self.node(p));
        }
        parts.reverse();
        parts.join(" / ")
    }

    /// Ids of `id` and all its descendants, in list order.
    pub fn subtree_ids(&self, id: &str) -> Vec<String> {
        let mut keep: HashSet<String> = HashSet::from([id.to_string()]);
        // parents precede children in list order only for generated trees,
        // so iterate to a fixed point
        loop {
            let before = keep.len();
            for n in &self.nodes {
                if n.parent_id.as_ref().is_some_and(|p| keep.contains(p)) {
                    keep.insert(n.id.clone());
                }
            }
            if keep.len() == before {
                break;
            }
        }
        self.nodes
            .iter()
            .filter(|n| keep.contains(&n.id))
            .map(|n| n.id.clone())
            .collect()
    }

    /// Every sentence held by a node or the unclassified bucket.
    pub fn all_sentences(&self) -> Vec<&Sentence> {
        self.nodes
            .iter()
            .flat_map(|n| &n.sentences)
            .chain(&self.unclassified)
            .collect()
    }

    /// Checks structural invariants; errors carry a JSON pointer.
    pub fn validate(&self) -> Result<(), TreeError> {
        let invalid = |pointer: String, message: String| TreeError::Invalid { pointer, message };
        let mut by_id: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if by_id.insert(n.id.as_str(), i).is_some() {
                return Err(invalid(format!("/nodes/{i}/id"), format!("duplicate node id {}", n.id)));
            }
        }
        let root = *by_id
            .get(self.root_id.as_str())
            .ok_or_else(|| invalid("/root_id".into(), format!("root {} is not a node", self.root_id)))?;
        let parents: HashSet<&str> = self.nodes.iter().filter_map(|n| n.parent_id.as_deref()).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if i == root {
                if n.parent_id.is_some() || n.layer != 1 {
                    return Err(invalid(
                        format!("/nodes/{i}"),
                        "root must be at layer 1 with no parent".into(),
                    ));
                }
            } else {
                let pid = n
                    .parent_id
                    .as_deref()
                    .ok_or_else(|| invalid(format!("/nodes/{i}/parent_id"), format!("node {} has no parent", n.id)))?;
                let &p = by_id
                    .get(pid)
                    .ok_or_else(|| invalid(format!("/nodes/{i}/parent_id"), format!("unknown parent {pid}")))?;
                if n.layer != self.nodes[p].layer + 1 {
                    return Err(invalid(
                        format!("/nodes/{i}/layer"),
                        format!(
                            "node {} is at layer {} under a layer-{} parent",
                            n.id, n.layer, self.nodes[p].layer
                        ),
                    ));
                }
            }
            if n.layer == 0 || n.layer > MAX_LAYER {
                return Err(invalid(
                    format!("/nodes/{i}/layer"),
                    format!("layer {} out of range", n.layer),
                ));
            }
            // residual sentences may stay on a condition whose topic
            // summary failed; anywhere else they belong to leaves only
            if !n.sentences.is_empty() && parents.contains(n.id.as_str()) && n.layer != 3 {
                return Err(invalid(
                    format!("/nodes/{i}/sentences"),
                    format!("interior node {} holds sentences", n.id),
                ));
            }
        }
        let mut seen = HashSet::new();
        for s in self.all_sentences() {
            if !seen.insert((&s.report_id, s.index)) {
                return Err(invalid(
                    "/nodes".into(),
                    format!("sentence {}#{} appears more than once", s.report_id, s.index),
                ));
            }
        }
        Ok(())
    }

    /// Canonical pretty JSON with a trailing newline; equal trees produce
    /// identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("tree serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let tree: PerceptionTree = serde_path_to_error::deserialize(de).map_err(|e| TreeError::Invalid {
            pointer: json_pointer(&e.path().to_string()),
            message: e.inner().to_string(),
        })?;
        tree.validate()?;
        Ok(tree)
    }

    pub fn load(path: &std::path::Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| crate::Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &std::path::Path) -> crate::Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    /// Applies `edit`, returning the new version. On error `self` is untouched.
    pub fn apply_edit(&self, edit: &TreeEdit) -> Result<PerceptionTree, TreeError> {
        let mut next = self.clone();
        edit::apply(&mut next, edit)?;
        next.version += 1;
        next.edit_log.push(edit.clone());
        Ok(next)
    }

    /// Re-applies an edit log on top of `base`.
    pub fn replay(base: &PerceptionTree, edits: &[TreeEdit]) -> Result<PerceptionTree, TreeError> {
        edits.iter().try_fold(base.clone(), |t, e| t.apply_edit(e))
    }

    /// Counts of nodes per layer and of held sentences.
    pub fn stats(&self) -> TreeStats {
        let mut per_layer = BTreeMap::new();
        for n in &self.nodes {
            *per_layer.entry(n.layer).or_insert(0) += 1;
        }
        TreeStats {
            nodes: self.nodes.len(),
            per_layer,
            sentences: self.nodes.iter().map(|n| n.sentences.len()).sum(),
            unclassified: self.unclassified.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeStats {
    pub nodes: usize,
    pub per_layer: BTreeMap<u8, usize>,
    pub sentences: usize,
    pub unclassified: usize,
}

/// `nodes[3].layer` → `/nodes/3/layer`.
fn json_pointer(path: &str) -> String {
    if path == "." {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        while let Some(open) = rest.find('[') {
            let name = &rest[..open];
            if !name.is_empty() {
                out.push('/');
                out.push_str(name);
            }
            let close = rest[open..].find(']').map_or(rest.len(), |c| open + c);
            out.push('/');
            out.push_str(&rest[open + 1..close]);
            rest = rest.get(close + 1..).unwrap_or("");
        }
        if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sentence(report: &str, index: usize, text: &str) -> Sentence {
        Sentence {
            report_id: report.into(),
            index,
            text: text.into(),
        }
    }

    /// root → heart → cardiomegaly → {size, contour}; root → lungs → edema
    pub(crate) fn small_tree() -> PerceptionTree {
        let mut t = PerceptionTree::with_root("root", "chest");
        t.push_child("root", "heart", "heart", None).unwrap();
        t.push_child(
            "heart",
            "heart/cardiomegaly",
            "cardiomegaly",
            Some("Compare heart width.".into()),
        )
        .unwrap();
        t.push_child("heart/cardiomegaly", "heart/cardiomegaly/t0", "size", None)
            .unwrap();
        t.push_child("heart/cardiomegaly", "heart/cardiomegaly/t1", "contour", None)
            .unwrap();
        t.push_child("root", "lungs", "lungs", None).unwrap();
        t.push_child("lungs", "lungs/edema", "edema", Some("Look for Kerley lines.".into()))
            .unwrap();
        t.node_mut("heart/cardiomegaly/t0").unwrap().sentences =
            vec![sentence("r1", 0, "a"), sentence("r1", 1, "b"), sentence("r2", 0, "c")];
        t.node_mut("heart/cardiomegaly/t1").unwrap().sentences = vec![sentence("r2", 1, "d"), sentence("r3", 0, "e")];
        t
    }

    #[test]
    fn round_trip_and_canonical_bytes() {
        let t = small_tree();
        let json = t.to_json();
        assert_eq!(PerceptionTree::from_json(&json).unwrap(), t);
        assert_eq!(json, t.to_json());
        assert!(json.contains("\"root_id\": \"root\""));
    }

    #[test]
    fn layer_gap_is_rejected_with_pointer() {
        let mut t = small_tree();
        t.nodes[2].layer = 4;
        let err = PerceptionTree::from_json(&t.to_json()).unwrap_err();
        match err {
            TreeError::Invalid { pointer, .. } => assert_eq!(pointer, "/nodes/2/layer"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_pointer() {
        let bad = r#"{"version":1,"root_id":"r","nodes":[{"id":"r","label":"x","layer":"one"}]}"#;
        match PerceptionTree::from_json(bad).unwrap_err() {
            TreeError::Invalid { pointer, .. } => assert_eq!(pointer, "/nodes/0/layer"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn queries() {
        let t = small_tree();
        assert_eq!(t.depth(), 4);
        assert_eq!(t.path_label("heart/cardiomegaly/t1"), "heart / cardiomegaly / contour");
        let leaves: Vec<_> = t.leaves().iter().map(|n| n.id.clone()).collect();
        assert_eq!(
            leaves,
            vec!["heart/cardiomegaly/t0", "heart/cardiomegaly/t1", "lungs/edema"]
        );
        assert_eq!(t.subtree_ids("heart").len(), 4);
        assert_eq!(t.stats().sentences, 5);
    }

    #[test]
    fn pointer_conversion() {
        assert_eq!(json_pointer("nodes[3].layer"), "/nodes/3/layer");
        assert_eq!(json_pointer("edit_log[0].target_ids[1]"), "/edit_log/0/target_ids/1");
        assert_eq!(json_pointer("."), "");
    }
}
