//! Radiology knowledge graph and its pruning into the initial perception
//! tree.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::PerceptionTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    Organ,
    Condition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: String,
    pub label: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_text: Option<String>,
}

/// Validated, acyclic graph with a single root. Node and edge order follow
/// the source file and fix sibling order in derived trees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    edges: Vec<(String, String)>,
}

impl KnowledgeGraph {
    pub fn new(nodes: Vec<KgNode>, edges: Vec<(String, String)>) -> Result<Self> {
        let kg = KnowledgeGraph { nodes, edges };
        kg.validate()?;
        Ok(kg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: KnowledgeGraph =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("knowledge graph: {e}")))?;
        raw.validate()?;
        Ok(raw)
    }

    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Option<&KgNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn root(&self) -> &KgNode {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Root)
            .expect("validated graph has a root")
    }

    pub fn children<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a KgNode> + 'a {
        self.edges
            .iter()
            .filter(move |(p, _)| p == id)
            .filter_map(|(_, c)| self.node(c))
    }

    pub fn organs(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Organ)
    }

    fn validate(&self) -> Result<()> {
        let schema = |m: String| Err(Error::Schema(m));
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return schema(format!("duplicate node id {}", n.id));
            }
        }
        for (p, c) in &self.edges {
            for end in [p, c] {
                if !ids.contains(end.as_str()) {
                    return schema(format!("edge {p} -> {c} references missing node {end}"));
                }
            }
        }
        let roots: Vec<&str> = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Root)
            .map(|n| n.id.as_str())
            .collect();
        match roots.len() {
            0 => return schema("no root".into()),
            1 => {}
            _ => return schema(format!("multiple roots: {}", roots.join(", "))),
        }
        if let Some(cycle) = self.find_cycle() {
            return schema(format!("cycle through {}", cycle.join(" -> ")));
        }
        let kind: HashMap<&str, NodeKind> = self.nodes.iter().map(|n| (n.id.as_str(), n.kind)).collect();
        for n in self.nodes.iter().filter(|n| n.kind == NodeKind::Condition) {
            let has_organ = self
                .edges
                .iter()
                .any(|(p, c)| c == &n.id && kind[p.as_str()] == NodeKind::Organ);
            if !has_organ {
                return schema(format!("condition {} has no organ parent", n.id));
            }
        }
        Ok(())
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        // Kahn's algorithm; whatever survives sits on or behind a cycle
        let mut indegree: HashMap<&str, usize> = self.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
        for (_, c) in &self.edges {
            *indegree.get_mut(c.as_str()).unwrap() += 1;
        }
        let mut queue: VecDeque<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut removed = 0;
        while let Some(n) = queue.pop_front() {
            removed += 1;
            for (p, c) in &self.edges {
                if p == n {
                    let d = indegree.get_mut(c.as_str()).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        queue.push_back(c);
                    }
                }
            }
        }
        if removed == self.nodes.len() {
            return None;
        }
        let mut stuck: Vec<String> = indegree
            .into_iter()
            .filter(|(_, d)| *d > 0)
            .map(|(n, _)| n.to_string())
            .collect();
        stuck.sort();
        Some(stuck)
    }

    /// Condition nodes reachable from `organ_id`, breadth-first, each once.
    pub fn conditions_under<'a>(&'a self, organ_id: &'a str) -> Vec<&'a KgNode> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut queue = VecDeque::from([organ_id]);
        while let Some(id) = queue.pop_front() {
            for child in self.children(id) {
                if seen.insert(child.id.as_str()) {
                    if child.kind == NodeKind::Condition {
                        out.push(child);
                    }
                    queue.push_back(&child.id);
                }
            }
        }
        out
    }

    /// Initial perception tree: root, the kept organs (graph order), and the
    /// conditions reachable from each. A condition shared by several kept
    /// organs is copied under each, with id `<organ id>/<condition id>`.
    pub fn prune<S: AsRef<str>>(&self, keep_organs: &[S]) -> Result<PerceptionTree> {
        if keep_organs.is_empty() {
            return Err(Error::Config("keep_organs is empty".into()));
        }
        let wanted: BTreeSet<String> = keep_organs.iter().map(|s| s.as_ref().trim().to_lowercase()).collect();
        let organs: Vec<&KgNode> = self
            .organs()
            .filter(|o| wanted.contains(&o.label.to_lowercase()))
            .collect();
        let matched: HashSet<String> = organs.iter().map(|o| o.label.to_lowercase()).collect();
        let unmatched: Vec<&str> = wanted
            .iter()
            .filter(|w| !matched.contains(*w))
            .map(String::as_str)
            .collect();
        if !unmatched.is_empty() {
            return Err(Error::Config(format!(
                "keep_organs has labels matching no organ: {}",
                unmatched.join(", ")
            )));
        }
        let root = self.root();
        let mut tree = PerceptionTree::with_root(&root.id, &root.label);
        for organ in organs {
            tree.push_child(&root.id, &organ.id, &organ.label, organ.knowledge_text.clone())?;
            for cond in self.conditions_under(&organ.id) {
                tree.push_child(
                    &organ.id,
                    format!("{}/{}", organ.id, cond.id),
                    &cond.label,
                    cond.knowledge_text.clone(),
                )?;
            }
        }
        Ok(tree)
    }

    pub fn prune_all_organs(&self) -> Result<PerceptionTree> {
        let labels: Vec<&str> = self.organs().map(|o| o.label.as_str()).collect();
        self.prune(&labels)
    }
}

/// Bundled 20-node chest X-ray graph used when no graph is configured.
pub const CHEST_FIXTURE: &str = include_str!("../fixtures/chest_kg.json");

pub fn chest_fixture() -> KnowledgeGraph {
    KnowledgeGraph::from_json(CHEST_FIXTURE).expect("bundled graph is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, kind: NodeKind) -> KgNode {
        KgNode {
            id: id.into(),
            label: id.into(),
            kind,
            knowledge_text: None,
        }
    }

    fn edge(p: &str, c: &str) -> (String, String) {
        (p.into(), c.into())
    }

    #[test]
    fn fixture_shape() {
        let kg = chest_fixture();
        let count = |k| kg.nodes().iter().filter(|n| n.kind == k).count();
        assert_eq!(
            (
                count(NodeKind::Root),
                count(NodeKind::Organ),
                count(NodeKind::Condition)
            ),
            (1, 7, 12)
        );
    }

    #[test]
    fn invariants() {
        let err = KnowledgeGraph::new(vec![], vec![]).unwrap_err().to_string();
        assert!(err.contains("no root"), "{err}");
        let err = KnowledgeGraph::new(vec![node("r", NodeKind::Root)], vec![edge("r", "ghost")])
            .unwrap_err()
            .to_string();
        assert!(err.contains("ghost"), "{err}");
        let err = KnowledgeGraph::new(vec![node("a", NodeKind::Root), node("b", NodeKind::Root)], vec![])
            .unwrap_err()
            .to_string();
        assert!(err.contains("multiple roots: a, b"), "{err}");
        let nodes = vec![
            node("r", NodeKind::Root),
            node("o", NodeKind::Organ),
            node("c", NodeKind::Condition),
        ];
        let err = KnowledgeGraph::new(nodes.clone(), vec![edge("r", "o"), edge("o", "c"), edge("c", "o")])
            .unwrap_err()
            .to_string();
        assert!(err.contains("cycle"), "{err}");
        let err = KnowledgeGraph::new(nodes, vec![edge("r", "o"), edge("r", "c")])
            .unwrap_err()
            .to_string();
        assert!(err.contains("no organ parent"), "{err}");
    }

    #[test]
    fn prune_single_organ() {
        let kg = chest_fixture();
        let t = kg.prune(&["Heart"]).unwrap();
        let organs: Vec<_> = t.layer(2).map(|n| n.label.as_str()).collect();
        assert_eq!(organs, vec!["heart"]);
        let expected: Vec<_> = kg.conditions_under("heart").iter().map(|c| c.label.clone()).collect();
        let got: Vec<_> = t.layer(3).map(|n| n.label.clone()).collect();
        assert_eq!(got, expected);
        assert!(t.layer(3).all(|n| n.knowledge_text.is_some()));
    }

    #[test]
    fn prune_unknown_organ() {
        let err = chest_fixture().prune(&["pancreas", "heart"]).unwrap_err().to_string();
        assert!(err.contains("pancreas"), "{err}");
        assert!(chest_fixture().prune::<&str>(&[]).is_err());
    }
}
