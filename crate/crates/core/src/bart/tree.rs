//! Regression trees used by the sum-of-trees model.
//!
//! [`RegTree`] is the compact, immutable form stored for each retained
//! posterior draw. [`WorkTree`] is the sampler's mutable form, which also
//! tracks the training rows that fall in every node.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RegNode {
    Leaf { value: f64 },
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
}

/// Binary regression tree in depth-first order (root at index 0). Rows go
/// left when `x[feature] <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTree {
    pub nodes: Vec<RegNode>,
}

impl RegTree {
    pub fn stump(value: f64) -> Self {
        Self {
            nodes: vec![RegNode::Leaf { value }],
        }
    }

    #[inline]
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut k = 0usize;
        loop {
            match self.nodes[k] {
                RegNode::Leaf { value } => return value,
                RegNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if row[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &RegTree, k: usize) -> usize {
            match t.nodes[k] {
                RegNode::Leaf { .. } => 0,
                RegNode::Split { left, right, .. } => {
                    1 + walk(t, left as usize).max(walk(t, right as usize))
                }
            }
        }
        walk(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, RegNode::Leaf { .. }))
            .count()
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            RegNode::Leaf { value } => Some(*value),
            _ => None,
        })
    }

    /// Split structure without leaf values, in depth-first order.
    pub fn topology(&self) -> Vec<Option<(u32, u64)>> {
        self.nodes
            .iter()
            .map(|n| match n {
                RegNode::Leaf { .. } => None,
                RegNode::Split {
                    feature, threshold, ..
                } => Some((*feature, threshold.to_bits())),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum WorkKind {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WorkNode {
    pub parent: Option<usize>,
    pub depth: usize,
    pub kind: WorkKind,
    pub rows: Vec<u32>,
}

/// Arena tree with row membership per node. Pruned slots are recycled.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WorkTree {
    pub nodes: Vec<WorkNode>,
    free: Vec<usize>,
}

impl WorkTree {
    pub fn stump(n: usize, value: f64) -> Self {
        Self {
            nodes: vec![WorkNode {
                parent: None,
                depth: 0,
                kind: WorkKind::Leaf { value },
                rows: (0..n as u32).collect(),
            }],
            free: Vec::new(),
        }
    }

    fn live(&self) -> impl Iterator<Item = usize> + '_ {
        // Walk from the root so recycled slots are never visited.
        let mut stack = vec![0usize];
        std::iter::from_fn(move || {
            let k = stack.pop()?;
            if let WorkKind::Split { left, right, .. } = self.nodes[k].kind {
                stack.push(right);
                stack.push(left);
            }
            Some(k)
        })
    }

    pub fn is_leaf(&self, k: usize) -> bool {
        matches!(self.nodes[k].kind, WorkKind::Leaf { .. })
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.live().filter(|&k| self.is_leaf(k)).collect()
    }

    pub fn internal(&self) -> Vec<usize> {
        self.live().filter(|&k| !self.is_leaf(k)).collect()
    }

    /// Internal nodes whose children are both leaves.
    pub fn prunable(&self) -> Vec<usize> {
        self.live()
            .filter(|&k| match self.nodes[k].kind {
                WorkKind::Split { left, right, .. } => self.is_leaf(left) && self.is_leaf(right),
                _ => false,
            })
            .collect()
    }

    fn alloc(&mut self, node: WorkNode) -> usize {
        match self.free.pop() {
            Some(k) => {
                self.nodes[k] = node;
                k
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        }
    }

    /// Turn leaf `k` into a split with two zero-valued leaf children.
    pub fn grow(&mut self, k: usize, feature: usize, threshold: f64, col: &[f64]) -> (usize, usize) {
        debug_assert!(self.is_leaf(k));
        let depth = self.nodes[k].depth;
        let (l_rows, r_rows): (Vec<u32>, Vec<u32>) = self.nodes[k]
            .rows
            .iter()
            .partition(|&&i| col[i as usize] <= threshold);
        let left = self.alloc(WorkNode {
            parent: Some(k),
            depth: depth + 1,
            kind: WorkKind::Leaf { value: 0.0 },
            rows: l_rows,
        });
        let right = self.alloc(WorkNode {
            parent: Some(k),
            depth: depth + 1,
            kind: WorkKind::Leaf { value: 0.0 },
            rows: r_rows,
        });
        self.nodes[k].kind = WorkKind::Split {
            feature,
            threshold,
            left,
            right,
        };
        (left, right)
    }

    /// Collapse split `k` (whose children must be leaves) into a leaf.
    pub fn prune(&mut self, k: usize) {
        let WorkKind::Split { left, right, .. } = self.nodes[k].kind else {
            panic!("prune on a leaf");
        };
        debug_assert!(self.is_leaf(left) && self.is_leaf(right));
        self.nodes[k].kind = WorkKind::Leaf { value: 0.0 };
        for c in [left, right] {
            self.nodes[c].rows = Vec::new();
            self.free.push(c);
        }
    }

    /// Replace the rule at split `k` and re-route rows through its subtree.
    /// Returns false if some node in the subtree ends up empty.
    pub fn change(&mut self, k: usize, feature: usize, threshold: f64, cols: &[Vec<f64>]) -> bool {
        let WorkKind::Split { left, right, .. } = self.nodes[k].kind else {
            panic!("change on a leaf");
        };
        self.nodes[k].kind = WorkKind::Split {
            feature,
            threshold,
            left,
            right,
        };
        self.reroute(k, cols)
    }

    fn reroute(&mut self, k: usize, cols: &[Vec<f64>]) -> bool {
        let WorkKind::Split {
            feature,
            threshold,
            left,
            right,
        } = self.nodes[k].kind
        else {
            return true;
        };
        let col = &cols[feature];
        let (l, r): (Vec<u32>, Vec<u32>) = self.nodes[k]
            .rows
            .iter()
            .partition(|&&i| col[i as usize] <= threshold);
        if l.is_empty() || r.is_empty() {
            return false;
        }
        self.nodes[left].rows = l;
        self.nodes[right].rows = r;
        self.reroute(left, cols) && self.reroute(right, cols)
    }

    pub fn to_reg(&self) -> RegTree {
        fn emit(t: &WorkTree, k: usize, out: &mut Vec<RegNode>) -> u32 {
            let id = out.len();
            match t.nodes[k].kind {
                WorkKind::Leaf { value } => out.push(RegNode::Leaf { value }),
                WorkKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    out.push(RegNode::Leaf { value: 0.0 });
                    let l = emit(t, left, out);
                    let r = emit(t, right, out);
                    out[id] = RegNode::Split {
                        feature: feature as u32,
                        threshold,
                        left: l,
                        right: r,
                    };
                }
            }
            id as u32
        }
        let mut nodes = Vec::new();
        emit(self, 0, &mut nodes);
        RegTree { nodes }
    }
}
