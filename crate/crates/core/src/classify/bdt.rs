//! CART decision tree grown by Gini impurity reduction.

use serde::{Deserialize, Serialize};

use super::{ClassifyError, Features};
use crate::model::State;
use crate::sampling::SampleSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        pos: usize,
        neg: usize,
    },
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bdt {
    pub features: Features,
    /// Node arena; the root is node 0.
    pub nodes: Vec<Node>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Grow<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

/// Best split of `idx` as `(feature, threshold, weighted impurity)`;
/// earlier features and lower thresholds win ties.
pub fn best_split(x: &[Vec<f64>], y: &[bool], idx: &[usize], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = idx.len();
    let total_pos = idx.iter().filter(|&&i| y[i]).count();
    let parent = gini(total_pos, n);
    let d = x.first().map_or(0, |r| r.len());
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = idx.to_vec();
    for f in 0..d {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let mut left_pos = 0;
        for k in 0..n - 1 {
            if y[order[k]] {
                left_pos += 1;
            }
            let (a, b) = (x[order[k]][f], x[order[k + 1]][f]);
            let nl = k + 1;
            if a == b || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let imp = (nl as f64 * gini(left_pos, nl)
                + (n - nl) as f64 * gini(total_pos - left_pos, n - nl))
                / n as f64;
            if imp < parent && best.is_none_or(|(_, _, bi)| imp < bi) {
                best = Some((f, 0.5 * (a + b), imp));
            }
        }
    }
    best
}

impl Grow<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let neg = idx.len() - pos;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { pos, neg });
        if pos == 0 || neg == 0 || depth >= self.max_depth || idx.len() < 2 * self.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold, _)) = best_split(self.x, self.y, &idx, self.min_leaf.max(1)) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl Bdt {
    pub fn fit(features: Features, data: &SampleSet, max_depth: usize, min_leaf: usize) -> Result<Bdt, ClassifyError> {
        if data.is_empty() {
            return Err(ClassifyError::Empty);
        }
        let x: Vec<Vec<f64>> = data.samples.iter().map(|s| features.extract(&s.state)).collect();
        let y: Vec<bool> = data.samples.iter().map(|s| s.label.is_positive()).collect();
        let mut g = Grow {
            x: &x,
            y: &y,
            max_depth,
            min_leaf,
            nodes: Vec::new(),
        };
        g.grow((0..x.len()).collect(), 0);
        Ok(Bdt {
            features,
            nodes: g.nodes,
        })
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf(&self, x: &[f64]) -> (usize, usize) {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { pos, neg } => return (pos, neg),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// Positive fraction at the leaf; a tied leaf scores exactly 0.5 and so
    /// classifies positive.
    pub fn score(&self, s: &State) -> f64 {
        let (pos, neg) = self.leaf(&self.features.extract(s));
        pos as f64 / (pos + neg).max(1) as f64
    }
}
