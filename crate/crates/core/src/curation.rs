//! Server-side state for manual tree curation: optimistic versioning and
//! write-through persistence of the tree and its edit log.
//!
//! Next to `tree.json` the store keeps `tree.base.json` (the tree as first
//! served) and `tree.edits.jsonl` (every accepted edit since). Replaying the
//! log over the base must reproduce the tree file; `open` refuses to serve
//! when it does not.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::tree::{PerceptionTree, TreeEdit};

/// Body of `POST /edits`: the edit plus the version it was made against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSubmission {
    pub base_version: u64,
    #[serde(flatten)]
    pub edit: TreeEdit,
}

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("edit is based on version {base_version} but the tree is at version {current_version}")]
    Conflict { base_version: u64, current_version: u64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Persist(#[from] Error),
}

pub struct CurationStore {
    tree_path: PathBuf,
    base_path: PathBuf,
    edits_path: PathBuf,
    state: Mutex<State>,
}

struct State {
    base: PerceptionTree,
    current: PerceptionTree,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("tree");
    path.with_file_name(format!("{stem}.{suffix}"))
}

impl CurationStore {
    pub fn open(tree_path: &Path) -> Result<Self> {
        let current = PerceptionTree::load(tree_path)?;
        let base_path = sibling(tree_path, "base.json");
        let edits_path = sibling(tree_path, "edits.jsonl");
        let base = if base_path.exists() {
            let base = PerceptionTree::load(&base_path)?;
            let edits: Vec<TreeEdit> = if edits_path.exists() {
                read_jsonl(&edits_path)?
            } else {
                Vec::new()
            };
            let replayed = PerceptionTree::replay(&base, &edits)?;
            if replayed != current {
                return Err(Error::Schema(format!(
                    "{} does not match its base tree replayed with {} logged edit(s)",
                    tree_path.display(),
                    edits.len()
                )));
            }
            base
        } else {
            current.save(&base_path)?;
            write_jsonl::<TreeEdit>(&edits_path, &[])?;
            current.clone()
        };
        Ok(CurationStore {
            tree_path: tree_path.to_path_buf(),
            base_path,
            edits_path,
            state: Mutex::new(State { base, current }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn tree(&self) -> PerceptionTree {
        self.lock().current.clone()
    }

    pub fn base(&self) -> PerceptionTree {
        self.lock().base.clone()
    }

    pub fn version(&self) -> u64 {
        self.lock().current.version
    }

    /// Sentences held by a node, or `None` for an unknown id.
    pub fn sentences(&self, node_id: &str) -> Option<Vec<Sentence>> {
        self.lock().current.node(node_id).map(|n| n.sentences.clone())
    }

    /// Edits accepted since the base tree, oldest first.
    pub fn edits(&self) -> Vec<TreeEdit> {
        let s = self.lock();
        s.current.edit_log[s.base.edit_log.len()..].to_vec()
    }

    pub fn paths(&self) -> (&Path, &Path, &Path) {
        (&self.tree_path, &self.base_path, &self.edits_path)
    }

    /// Applies an edit if it was made against the current version, then
    /// writes the tree and the edit log before acknowledging.
    pub fn submit(&self, submission: &EditSubmission) -> std::result::Result<PerceptionTree, SubmitError> {
        let mut s = self.lock();
        if submission.base_version != s.current.version {
            return Err(SubmitError::Conflict {
                base_version: submission.base_version,
                current_version: s.current.version,
            });
        }
        let next = s
            .current
            .apply_edit(&submission.edit)
            .map_err(|e| SubmitError::Invalid(e.to_string()))?;
        next.validate().map_err(|e| SubmitError::Invalid(e.to_string()))?;
        write_jsonl(&self.edits_path, &next.edit_log[s.base.edit_log.len()..])?;
        next.save(&self.tree_path)?;
        s.current = next.clone();
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::chest_fixture;
    use crate::tree::EditKind;
    use chrono::TimeZone;

    fn edit(kind: EditKind, targets: &[&str], payload: Option<&str>) -> TreeEdit {
        TreeEdit::new(
            kind,
            targets,
            payload,
            "tester",
            chrono::Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        )
    }

    fn store() -> (tempfile::TempDir, CurationStore) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        chest_fixture().prune_all_organs().unwrap().save(&path).unwrap();
        let store = CurationStore::open(&path).unwrap();
        (dir, store)
    }

    #[test]
    fn versioning_and_persistence() {
        let (dir, store) = store();
        let v = store.version();
        let prune = EditSubmission {
            base_version: v,
            edit: edit(EditKind::PruneNode, &["bones"], None),
        };
        let t = store.submit(&prune).unwrap();
        assert_eq!(t.version, v + 1);
        assert!(matches!(
            store.submit(&prune),
            Err(SubmitError::Conflict { current_version, .. }) if current_version == v + 1
        ));
        let bad = EditSubmission {
            base_version: v + 1,
            edit: edit(EditKind::RenameNode, &["heart"], Some(" ")),
        };
        assert!(matches!(store.submit(&bad), Err(SubmitError::Invalid(_))));
        assert_eq!(store.version(), v + 1);

        let on_disk = PerceptionTree::load(&dir.path().join("tree.json")).unwrap();
        assert_eq!(on_disk, store.tree());
        let logged: Vec<TreeEdit> = read_jsonl(&dir.path().join("tree.edits.jsonl")).unwrap();
        assert_eq!(logged, store.edits());
        assert_eq!(PerceptionTree::replay(&store.base(), &logged).unwrap(), store.tree());

        let reopened = CurationStore::open(&dir.path().join("tree.json")).unwrap();
        assert_eq!(reopened.tree(), store.tree());
        assert_eq!(reopened.edits().len(), 1);
    }

    #[test]
    fn diverged_tree_is_refused() {
        let (dir, store) = store();
        let mut t = store.tree();
        t.version += 5;
        t.save(&dir.path().join("tree.json")).unwrap();
        assert!(CurationStore::open(&dir.path().join("tree.json")).is_err());
    }

    #[test]
    fn submission_json_is_flat() {
        let s = EditSubmission {
            base_version: 3,
            edit: edit(EditKind::ApproveNode, &["heart"], None),
        };
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["base_version"], 3);
        assert_eq!(v["kind"], "approve_node");
        assert_eq!(serde_json::from_value::<EditSubmission>(v).unwrap(), s);
    }
}
