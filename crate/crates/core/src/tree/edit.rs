use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{PerceptionTree, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    PruneNode,
    MergeNodes,
    RenameNode,
    SetKnowledgeText,
    ApproveNode,
}

/// One manual curation step. Edits are logged append-only and can be
/// replayed over the tree they were made against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEdit {
    pub kind: EditKind,
    pub target_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    pub author: String,
    pub timestamp: DateTime<Utc>,
}

impl TreeEdit {
    pub fn new(
        kind: EditKind,
        target_ids: &[&str],
        payload: Option<&str>,
        author: &str,
        timestamp: DateTime<Utc>,
    ) -> Self {
        TreeEdit {
            kind,
            target_ids: target_ids.iter().map(|s| s.to_string()).collect(),
            payload: payload.map(str::to_string),
            author: author.to_string(),
            timestamp,
        }
    }
}

fn single_target(edit: &TreeEdit) -> Result<&str, TreeError> {
    match edit.target_ids.as_slice() {
        [id] => Ok(id),
        _ => Err(TreeError::InvalidEdit(format!(
            "{:?} takes exactly one target",
            edit.kind
        ))),
    }
}

fn require(tree: &PerceptionTree, id: &str) -> Result<(), TreeError> {
    tree.node(id)
        .map(|_| ())
        .ok_or_else(|| TreeError::UnknownNode(id.to_string()))
}

pub(super) fn apply(tree: &mut PerceptionTree, edit: &TreeEdit) -> Result<(), TreeError> {
    match edit.kind {
        EditKind::PruneNode => {
            let id = single_target(edit)?;
            require(tree, id)?;
            if id == tree.root_id {
                return Err(TreeError::PruneRoot);
            }
            let doomed = tree.subtree_ids(id);
            let mut kept = Vec::with_capacity(tree.nodes.len());
            for node in std::mem::take(&mut tree.nodes) {
                if doomed.contains(&node.id) {
                    tree.unclassified.extend(node.sentences);
                } else {
                    kept.push(node);
                }
            }
            tree.nodes = kept;
        }
        EditKind::MergeNodes => {
            let [keep, gone] = edit.target_ids.as_slice() else {
                return Err(TreeError::InvalidEdit("merge_nodes takes exactly two targets".into()));
            };
            require(tree, keep)?;
            require(tree, gone)?;
            if keep == gone {
                return Err(TreeError::InvalidEdit("cannot merge a node with itself".into()));
            }
            let (a, b) = (tree.node(keep).unwrap(), tree.node(gone).unwrap());
            if a.parent_id != b.parent_id || a.layer != b.layer || a.parent_id.is_none() {
                return Err(TreeError::CrossParentMerge(keep.clone(), gone.clone()));
            }
            let removed = tree
                .nodes
                .remove(tree.nodes.iter().position(|n| &n.id == gone).unwrap());
            for n in tree.nodes.iter_mut() {
                if n.parent_id.as_ref() == Some(gone) {
                    n.parent_id = Some(keep.clone());
                }
            }
            let has_children = !tree.is_leaf(keep);
            let survivor = tree.node_mut(keep).unwrap();
            survivor.sentences.extend(removed.sentences);
            if survivor.knowledge_text.is_none() {
                survivor.knowledge_text = removed.knowledge_text;
            }
            if has_children && !survivor.sentences.is_empty() && survivor.layer != 3 {
                return Err(TreeError::InvalidEdit(format!(
                    "merging {gone} into {keep} would leave sentences on an interior node"
                )));
            }
        }
        EditKind::RenameNode => {
            let id = single_target(edit)?;
            let label = edit.payload.as_deref().map(str::trim).unwrap_or("");
            if label.is_empty() {
                return Err(TreeError::InvalidEdit("rename needs a non-empty label".into()));
            }
            tree.node_mut(id)
                .ok_or_else(|| TreeError::UnknownNode(id.to_string()))?
                .label = label.to_string();
        }
        EditKind::SetKnowledgeText => {
            let id = single_target(edit)?;
            let text = edit.payload.as_deref().map(str::trim).filter(|t| !t.is_empty());
            tree.node_mut(id)
                .ok_or_else(|| TreeError::UnknownNode(id.to_string()))?
                .knowledge_text = text.map(str::to_string);
        }
        EditKind::ApproveNode => {
            let id = single_target(edit)?;
            tree.node_mut(id)
                .ok_or_else(|| TreeError::UnknownNode(id.to_string()))?
                .approved = true;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_tree;
    use super::*;
    use chrono::TimeZone;

    fn edit(kind: EditKind, targets: &[&str], payload: Option<&str>) -> TreeEdit {
        TreeEdit::new(
            kind,
            targets,
            payload,
            "tester",
            Utc.with_ymd_and_hms(2025, 1, 2, 3, 4, 5).unwrap(),
        )
    }

    #[test]
    fn prune_moves_sentences_to_unclassified() {
        let t = small_tree();
        let next = t
            .apply_edit(&edit(EditKind::PruneNode, &["heart/cardiomegaly/t0"], None))
            .unwrap();
        assert!(next.node("heart/cardiomegaly/t0").is_none());
        assert_eq!(next.unclassified.len(), 3);
        assert_eq!(next.version, t.version + 1);
        assert_eq!(next.edit_log.len(), 1);
        next.validate().unwrap();
    }

    #[test]
    fn prune_subtree() {
        let next = small_tree()
            .apply_edit(&edit(EditKind::PruneNode, &["heart"], None))
            .unwrap();
        assert_eq!(next.nodes.len(), 3);
        assert_eq!(next.unclassified.len(), 5);
    }

    #[test]
    fn merge_siblings_unions_sentences() {
        let next = small_tree()
            .apply_edit(&edit(
                EditKind::MergeNodes,
                &["heart/cardiomegaly/t0", "heart/cardiomegaly/t1"],
                None,
            ))
            .unwrap();
        assert_eq!(next.node("heart/cardiomegaly/t0").unwrap().sentences.len(), 5);
        assert!(next.node("heart/cardiomegaly/t1").is_none());
    }

    #[test]
    fn merge_reparents_children() {
        let next = small_tree()
            .apply_edit(&edit(EditKind::MergeNodes, &["lungs", "heart"], None))
            .unwrap();
        assert_eq!(next.children("lungs").count(), 2);
        next.validate().unwrap();
    }

    #[test]
    fn root_rules() {
        let t = small_tree();
        let renamed = t
            .apply_edit(&edit(EditKind::RenameNode, &["root"], Some("thorax")))
            .unwrap();
        assert_eq!(renamed.root().label, "thorax");
        assert_eq!(
            t.apply_edit(&edit(EditKind::PruneNode, &["root"], None)),
            Err(TreeError::PruneRoot)
        );
    }

    #[test]
    fn rejected_edits() {
        let t = small_tree();
        assert_eq!(
            t.apply_edit(&edit(EditKind::PruneNode, &["ghost"], None)),
            Err(TreeError::UnknownNode("ghost".into()))
        );
        assert!(matches!(
            t.apply_edit(&edit(
                EditKind::MergeNodes,
                &["heart/cardiomegaly/t0", "lungs/edema"],
                None
            )),
            Err(TreeError::CrossParentMerge(..))
        ));
        assert!(t
            .apply_edit(&edit(EditKind::RenameNode, &["heart"], Some("  ")))
            .is_err());
        assert!(t
            .apply_edit(&edit(EditKind::ApproveNode, &["heart", "lungs"], None))
            .is_err());
    }

    #[test]
    fn field_edits_and_replay() {
        let t = small_tree();
        let edits = vec![
            edit(EditKind::SetKnowledgeText, &["lungs/edema"], Some("Check the hila.")),
            edit(EditKind::ApproveNode, &["heart"], None),
            edit(EditKind::PruneNode, &["heart/cardiomegaly/t1"], None),
        ];
        let mut cur = t.clone();
        for e in &edits {
            cur = cur.apply_edit(e).unwrap();
        }
        assert_eq!(
            cur.node("lungs/edema").unwrap().knowledge_text.as_deref(),
            Some("Check the hila.")
        );
        assert!(cur.node("heart").unwrap().approved);
        assert_eq!(PerceptionTree::replay(&t, &cur.edit_log).unwrap(), cur);
        let json = serde_json::to_string(&edits[1]).unwrap();
        assert!(json.contains("\"kind\":\"approve_node\""));
    }
}
