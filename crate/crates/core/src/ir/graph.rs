//! Dataflow analyses over a [`GraphModel`]: deterministic topological order,
//! immediate dominators with the model input as entry, and the subgraph
//! bounded by a node and one of its dominators.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::model::GraphModel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("cycle detected")]
    Cycle,
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("{dom} does not dominate {node}")]
    NotDominator { node: String, dom: String },
}

/// A point in the graph that can bound a region: the model input or a node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Anchor {
    Input,
    Node(String),
}

impl Anchor {
    pub const INPUT_TAG: &'static str = "model-input";

    pub fn node_id(&self) -> Option<&str> {
        match self {
            Anchor::Input => None,
            Anchor::Node(id) => Some(id),
        }
    }
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Anchor::Input => f.write_str(Self::INPUT_TAG),
            Anchor::Node(id) => f.write_str(id),
        }
    }
}

impl Serialize for Anchor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Anchor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == Self::INPUT_TAG {
            Anchor::Input
        } else {
            Anchor::Node(s)
        })
    }
}

/// Nodes lying on paths from a dominator to a root node, in BFS order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub root_id: String,
    pub dominator: Anchor,
    /// Includes the dominator (when it is a node) and the root.
    pub node_ids: Vec<String>,
}

/// Adjacency over node indices; index `len()` is the virtual entry (model input).
#[derive(Debug, Clone)]
pub struct GraphIndex {
    ids: Vec<String>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl GraphIndex {
    pub fn new(model: &GraphModel) -> Self {
        let n = model.nodes.len();
        let entry = n;
        let producer: HashMap<&str, usize> = model
            .nodes
            .iter()
            .enumerate()
            .flat_map(|(i, node)| node.outputs.iter().map(move |o| (o.as_str(), i)))
            .collect();
        let mut succ = vec![Vec::new(); n + 1];
        let mut pred = vec![Vec::new(); n + 1];
        for (i, node) in model.nodes.iter().enumerate() {
            for input in &node.inputs {
                let src = if input == &model.input.name {
                    Some(entry)
                } else {
                    producer.get(input.as_str()).copied()
                };
                if let Some(src) = src {
                    if !pred[i].contains(&src) {
                        pred[i].push(src);
                        succ[src].push(i);
                    }
                }
            }
        }
        for s in &mut succ {
            s.sort_unstable();
        }
        for p in &mut pred {
            p.sort_unstable();
        }
        Self {
            ids: model.nodes.iter().map(|n| n.id.clone()).collect(),
            succ,
            pred,
        }
    }

    pub fn entry(&self) -> usize {
        self.ids.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn successors(&self, idx: usize) -> &[usize] {
        &self.succ[idx]
    }

    pub fn predecessors(&self, idx: usize) -> &[usize] {
        &self.pred[idx]
    }

    fn anchor_index(&self, anchor: &Anchor) -> Result<usize, GraphError> {
        match anchor {
            Anchor::Input => Ok(self.entry()),
            Anchor::Node(id) => self
                .index_of(id)
                .ok_or_else(|| GraphError::UnknownNode(id.clone())),
        }
    }

    pub fn anchor(&self, idx: usize) -> Anchor {
        if idx == self.entry() {
            Anchor::Input
        } else {
            Anchor::Node(self.ids[idx].clone())
        }
    }

    /// Kahn's algorithm with declaration order breaking ties.
    pub fn topo_indices(&self) -> Option<Vec<usize>> {
        let n = self.len();
        let mut indeg: Vec<usize> = (0..n)
            .map(|i| self.pred[i].iter().filter(|&&p| p != n).count())
            .collect();
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &s in &self.succ[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.push(Reverse(s));
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    fn reachable(&self, start: usize, forward: bool) -> Vec<bool> {
        let mut seen = vec![false; self.len() + 1];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let next = if forward {
                &self.succ[i]
            } else {
                &self.pred[i]
            };
            for &j in next {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen
    }
}

pub(crate) fn kahn_order(model: &GraphModel) -> Option<Vec<usize>> {
    GraphIndex::new(model).topo_indices()
}

/// Node ids in dependency order; ties resolved by declaration order.
pub fn topo_order(model: &GraphModel) -> Result<Vec<String>, GraphError> {
    let index = GraphIndex::new(model);
    let order = index.topo_indices().ok_or(GraphError::Cycle)?;
    Ok(order.into_iter().map(|i| index.id(i).to_string()).collect())
}

/// Immediate-dominator tree rooted at the model input.
#[derive(Debug, Clone)]
pub struct Dominators {
    index: GraphIndex,
    /// `idom[i]` for node `i`; the entry maps to itself. `None` = unreachable.
    idom: Vec<Option<usize>>,
}

impl Dominators {
    /// Iterative dataflow solution over reverse postorder.
    pub fn compute(model: &GraphModel) -> Result<Self, GraphError> {
        let index = GraphIndex::new(model);
        if index.topo_indices().is_none() {
            return Err(GraphError::Cycle);
        }
        let entry = index.entry();
        let total = index.len() + 1;

        // Postorder from the entry.
        let mut post = Vec::with_capacity(total);
        let mut visited = vec![false; total];
        let mut stack = vec![(entry, 0usize)];
        visited[entry] = true;
        while let Some((node, child)) = stack.pop() {
            if let Some(&next) = index.succ[node].get(child) {
                stack.push((node, child + 1));
                if !visited[next] {
                    visited[next] = true;
                    stack.push((next, 0));
                }
            } else {
                post.push(node);
            }
        }
        let mut post_num = vec![usize::MAX; total];
        for (i, &n) in post.iter().enumerate() {
            post_num[n] = i;
        }

        let mut idom: Vec<Option<usize>> = vec![None; total];
        idom[entry] = Some(entry);
        let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
            while a != b {
                while post_num[a] < post_num[b] {
                    a = idom[a].expect("processed");
                }
                while post_num[b] < post_num[a] {
                    b = idom[b].expect("processed");
                }
            }
            a
        };
        let mut changed = true;
        while changed {
            changed = false;
            for &n in post.iter().rev() {
                if n == entry {
                    continue;
                }
                let mut new_idom: Option<usize> = None;
                for &p in &index.pred[n] {
                    if idom[p].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
                if new_idom.is_some() && idom[n] != new_idom {
                    idom[n] = new_idom;
                    changed = true;
                }
            }
        }
        Ok(Self { index, idom })
    }

    pub fn index(&self) -> &GraphIndex {
        &self.index
    }

    /// Immediate dominator of node `id`.
    pub fn idom(&self, id: &str) -> Result<Anchor, GraphError> {
        let i = self
            .index
            .index_of(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
        let d = self.idom[i].ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
        Ok(self.index.anchor(d))
    }

    /// Strict dominators of `id`, nearest first, ending with the input.
    pub fn chain(&self, id: &str) -> Result<Vec<Anchor>, GraphError> {
        let mut i = self
            .index
            .index_of(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
        let entry = self.index.entry();
        let mut out = Vec::new();
        while i != entry {
            i = self.idom[i].ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
            out.push(self.index.anchor(i));
        }
        Ok(out)
    }

    pub fn dominates(&self, dom: &Anchor, id: &str) -> Result<bool, GraphError> {
        let d = self.index.anchor_index(dom)?;
        let mut i = self
            .index
            .index_of(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
        loop {
            if i == d {
                return Ok(true);
            }
            match self.idom[i] {
                Some(next) if next != i => i = next,
                _ => return Ok(false),
            }
        }
    }

    /// Every node on some `dom -> id` path, in BFS order from `dom`.
    pub fn subgraph(&self, id: &str, dom: &Anchor) -> Result<Subgraph, GraphError> {
        if !self.dominates(dom, id)? {
            return Err(GraphError::NotDominator {
                node: id.to_string(),
                dom: dom.to_string(),
            });
        }
        let start = self.index.anchor_index(dom)?;
        let root = self.index.index_of(id).expect("checked by dominates");
        let fwd = self.index.reachable(start, true);
        let back = self.index.reachable(root, false);
        let on_path = |i: usize| fwd[i] && back[i];

        let mut seen = vec![false; self.index.len() + 1];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut node_ids = Vec::new();
        while let Some(i) = queue.pop_front() {
            if i != self.index.entry() {
                node_ids.push(self.index.id(i).to_string());
            }
            if i == root {
                continue;
            }
            for &s in self.index.successors(i) {
                if !seen[s] && on_path(s) {
                    seen[s] = true;
                    queue.push_back(s);
                }
            }
        }
        Ok(Subgraph {
            root_id: id.to_string(),
            dominator: dom.clone(),
            node_ids,
        })
    }
}

pub fn immediate_dominator(model: &GraphModel, node_id: &str) -> Result<Anchor, GraphError> {
    Dominators::compute(model)?.idom(node_id)
}

pub fn subgraph_between(
    model: &GraphModel,
    node_id: &str,
    dom: &Anchor,
) -> Result<Subgraph, GraphError> {
    Dominators::compute(model)?.subgraph(node_id, dom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::model::{InputSpec, Layout, NodeDef, Op, PreprocessingConfig};

    fn model(nodes: Vec<NodeDef>, output: &str) -> GraphModel {
        GraphModel {
            name: "t".into(),
            input: InputSpec {
                name: "x".into(),
                shape: vec![1, 1, 2, 2],
                layout: Layout::Nchw,
            },
            output_name: output.into(),
            nodes,
            preproc: PreprocessingConfig::imagenet(Layout::Nchw),
        }
    }

    fn chain() -> GraphModel {
        model(
            vec![
                NodeDef::new("a", Op::Relu, &["x"], "va"),
                NodeDef::new("b", Op::Relu, &["va"], "vb"),
                NodeDef::new("c", Op::Relu, &["vb"], "vc"),
            ],
            "vc",
        )
    }

    fn diamond() -> GraphModel {
        model(
            vec![
                NodeDef::new("a", Op::Relu, &["x"], "va"),
                NodeDef::new("b", Op::Relu, &["va"], "vb"),
                NodeDef::new("c", Op::Relu, &["va"], "vc"),
                NodeDef::new("d", Op::Add, &["vb", "vc"], "vd"),
            ],
            "vd",
        )
    }

    #[test]
    fn topo_chain_and_diamond() {
        assert_eq!(topo_order(&chain()).unwrap(), ["a", "b", "c"]);
        assert_eq!(topo_order(&diamond()).unwrap(), ["a", "b", "c", "d"]);
    }

    #[test]
    fn topo_ignores_declaration_when_dependencies_require() {
        let mut m = chain();
        m.nodes.reverse();
        assert_eq!(topo_order(&m).unwrap(), ["a", "b", "c"]);
    }

    #[test]
    fn idom_basic_cases() {
        assert_eq!(
            immediate_dominator(&chain(), "c").unwrap(),
            Anchor::Node("b".into())
        );
        assert_eq!(
            immediate_dominator(&diamond(), "d").unwrap(),
            Anchor::Node("a".into())
        );
        assert_eq!(immediate_dominator(&chain(), "a").unwrap(), Anchor::Input);
        assert!(matches!(
            immediate_dominator(&chain(), "zz"),
            Err(GraphError::UnknownNode(_))
        ));
    }

    #[test]
    fn subgraph_examples() {
        let s = subgraph_between(&chain(), "c", &Anchor::Node("b".into())).unwrap();
        assert_eq!(s.node_ids, ["b", "c"]);
        let s = subgraph_between(&diamond(), "d", &Anchor::Node("a".into())).unwrap();
        assert_eq!(s.node_ids, ["a", "b", "c", "d"]);
        let s = subgraph_between(&diamond(), "d", &Anchor::Input).unwrap();
        assert_eq!(s.node_ids, ["a", "b", "c", "d"]);
    }

    #[test]
    fn subgraph_rejects_non_dominator() {
        let err = subgraph_between(&diamond(), "d", &Anchor::Node("b".into())).unwrap_err();
        assert!(matches!(err, GraphError::NotDominator { .. }));
    }

    #[test]
    fn anchor_serializes_as_string() {
        assert_eq!(
            serde_json::to_string(&Anchor::Input).unwrap(),
            "\"model-input\""
        );
        let a: Anchor = serde_json::from_str("\"conv1\"").unwrap();
        assert_eq!(a, Anchor::Node("conv1".into()));
    }
}
