//! Histogram-binned regression trees grown leaf-wise on second-order
//! statistics. Split thresholds are stored as raw feature values, so a
//! finished tree routes real-valued inputs (recursive forecasts included)
//! without the bin mapper.

use std::collections::BinaryHeap;

use crate::features::LagMatrix;

/// `feature < 0` marks a leaf carrying `weight`; interior nodes route
/// `x[feature] <= threshold` to `left`, otherwise `right`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub feature: i32,
    pub threshold: f64,
    pub left: i32,
    pub right: i32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.feature < 0 {
                return node.weight;
            }
            idx = if features[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature < 0).count()
    }
}

/// Per-feature histogram bins. `upper[f]` holds ascending inclusive upper
/// bounds; the last edge is +∞ so every value (including forecast feedback
/// beyond the training range) lands in a bin.
pub(crate) struct BinnedDesign {
    /// Column-major bin indices, one Vec per feature.
    pub bins: Vec<Vec<u8>>,
    pub upper: Vec<Vec<f64>>,
}

impl BinnedDesign {
    pub fn build(matrix: &LagMatrix, max_bins: usize) -> BinnedDesign {
        let max_bins = max_bins.clamp(2, 255);
        let n = matrix.n_rows();
        let p = matrix.n_lags;
        let mut bins = Vec::with_capacity(p);
        let mut upper = Vec::with_capacity(p);
        let mut col = vec![0.0f64; n];
        for f in 0..p {
            for (r, slot) in col.iter_mut().enumerate() {
                *slot = matrix.features[r * p + f];
            }
            let edges = quantile_edges(&col, max_bins);
            let mut binned = Vec::with_capacity(n);
            for (r, slot) in col.iter().enumerate() {
                let _ = r;
                let b = edges.partition_point(|e| e < slot);
                binned.push(b as u8);
            }
            bins.push(binned);
            upper.push(edges);
        }
        BinnedDesign { bins, upper }
    }
}

/// Ascending inclusive upper bounds; final edge +∞. Boundaries sit midway
/// between adjacent distinct values so continuous inputs (recursive
/// forecast feedback) route to the nearer training value.
fn quantile_edges(col: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = col.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = sorted.clone();
    distinct.dedup();
    let m = distinct.len();
    let n = sorted.len();
    // positions into `distinct` whose upper boundary becomes a bin edge
    let cut_positions: Vec<usize> = if m <= max_bins {
        (0..m.saturating_sub(1)).collect()
    } else {
        let mut pos = Vec::new();
        for i in 1..max_bins {
            let idx = (i * n / max_bins).min(n - 1);
            let p = distinct.partition_point(|d| d < &sorted[idx]);
            if p + 1 < m && pos.last() != Some(&p) {
                pos.push(p);
            }
        }
        pos
    };
    let mut edges: Vec<f64> =
        cut_positions.iter().map(|&p| 0.5 * (distinct[p] + distinct[p + 1])).collect();
    edges.push(f64::INFINITY);
    edges
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub max_leaves: usize,
    pub min_data_in_leaf: usize,
    pub l2_leaf_reg: f64,
}

struct Hist {
    g: Vec<f64>,
    h: Vec<f64>,
    count: Vec<u32>,
}

impl Hist {
    fn new(slots: usize) -> Hist {
        Hist { g: vec![0.0; slots], h: vec![0.0; slots], count: vec![0; slots] }
    }

    fn subtract_from(&self, parent: &Hist) -> Hist {
        Hist {
            g: parent.g.iter().zip(&self.g).map(|(a, b)| a - b).collect(),
            h: parent.h.iter().zip(&self.h).map(|(a, b)| a - b).collect(),
            count: parent.count.iter().zip(&self.count).map(|(a, b)| a - b).collect(),
        }
    }
}

struct NodeState {
    rows: Vec<u32>,
    g: f64,
    h: f64,
    hist: Hist,
}

#[derive(Debug, Clone, Copy)]
struct Split {
    active_idx: usize,
    bin: u8,
    gain: f64,
    left_g: f64,
    left_h: f64,
    left_count: u32,
}

struct Candidate {
    gain: f64,
    seq: u64,
    node: usize,
    split: Split,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.gain == other.gain && self.seq == other.seq
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // max-heap on gain; earlier nodes win ties for determinism
        self.gain.total_cmp(&other.gain).then(other.seq.cmp(&self.seq))
    }
}

/// One grown tree plus the per-row leaf routing for the training design.
pub(crate) struct GrownTree {
    pub tree: Tree,
}

pub(crate) fn grow_tree(
    design: &BinnedDesign,
    grads: &[f64],
    hess: &[f64],
    sample_rows: &[u32],
    active_features: &[usize],
    params: GrowParams,
) -> GrownTree {
    let max_bins = design.upper.iter().map(|e| e.len()).max().unwrap_or(1);
    let slots = active_features.len() * max_bins;
    let lambda = params.l2_leaf_reg;

    let build_hist = |rows: &[u32]| -> Hist {
        let mut hist = Hist::new(slots);
        for (ai, &f) in active_features.iter().enumerate() {
            let col = &design.bins[f];
            let base = ai * max_bins;
            for &r in rows {
                let idx = base + col[r as usize] as usize;
                hist.g[idx] += grads[r as usize];
                hist.h[idx] += hess[r as usize];
                hist.count[idx] += 1;
            }
        }
        hist
    };

    let best_split = |state: &NodeState| -> Option<Split> {
        let total_gain_term = state.g * state.g / (state.h + lambda);
        let mut best: Option<Split> = None;
        for (ai, &f) in active_features.iter().enumerate() {
            let n_bins = design.upper[f].len();
            let base = ai * max_bins;
            let (mut gl, mut hl, mut cl) = (0.0f64, 0.0f64, 0u32);
            // the last bin cannot be a split point: its right side is empty
            for b in 0..n_bins.saturating_sub(1) {
                gl += state.hist.g[base + b];
                hl += state.hist.h[base + b];
                cl += state.hist.count[base + b];
                let cr = state.rows.len() as u32 - cl;
                if (cl as usize) < params.min_data_in_leaf {
                    continue;
                }
                if (cr as usize) < params.min_data_in_leaf {
                    break;
                }
                let gr = state.g - gl;
                let hr = state.h - hl;
                let gain =
                    gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - total_gain_term;
                if gain > 1e-12 && best.map_or(true, |s| gain > s.gain) {
                    best = Some(Split {
                        active_idx: ai,
                        bin: b as u8,
                        gain,
                        left_g: gl,
                        left_h: hl,
                        left_count: cl,
                    });
                }
            }
        }
        best
    };

    let root_rows: Vec<u32> = sample_rows.to_vec();
    let root_g: f64 = root_rows.iter().map(|&r| grads[r as usize]).sum();
    let root_h: f64 = root_rows.iter().map(|&r| hess[r as usize]).sum();
    let root = NodeState { g: root_g, h: root_h, hist: build_hist(&root_rows), rows: root_rows };

    // nodes grow in place; leaves carry (g, h) until finalized
    let mut nodes: Vec<TreeNode> = vec![TreeNode {
        feature: -1,
        threshold: 0.0,
        left: -1,
        right: -1,
        weight: -root.g / (root.h + lambda),
    }];
    let mut states: Vec<Option<NodeState>> = vec![Some(root)];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    if let Some(split) = best_split(states[0].as_ref().unwrap()) {
        heap.push(Candidate { gain: split.gain, seq, node: 0, split });
    }

    let mut n_leaves = 1usize;
    while n_leaves < params.max_leaves {
        let Some(cand) = heap.pop() else { break };
        let state = states[cand.node].take().expect("node already split");
        let split = cand.split;
        let feature = active_features[split.active_idx];

        let mut left_rows = Vec::with_capacity(split.left_count as usize);
        let mut right_rows = Vec::with_capacity(state.rows.len() - split.left_count as usize);
        let col = &design.bins[feature];
        for &r in &state.rows {
            if col[r as usize] <= split.bin {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }

        let (small_hist, small_is_left) = if left_rows.len() <= right_rows.len() {
            (build_hist(&left_rows), true)
        } else {
            (build_hist(&right_rows), false)
        };
        let other_hist = small_hist.subtract_from(&state.hist);
        let (left_hist, right_hist) =
            if small_is_left { (small_hist, other_hist) } else { (other_hist, small_hist) };

        let left_state = NodeState {
            rows: left_rows,
            g: split.left_g,
            h: split.left_h,
            hist: left_hist,
        };
        let right_state = NodeState {
            rows: right_rows,
            g: state.g - split.left_g,
            h: state.h - split.left_h,
            hist: right_hist,
        };

        let left_id = nodes.len() as i32;
        let right_id = left_id + 1;
        nodes[cand.node] = TreeNode {
            feature: feature as i32,
            threshold: design.upper[feature][split.bin as usize],
            left: left_id,
            right: right_id,
            weight: 0.0,
        };
        for child in [&left_state, &right_state] {
            nodes.push(TreeNode {
                feature: -1,
                threshold: 0.0,
                left: -1,
                right: -1,
                weight: -child.g / (child.h + lambda),
            });
        }
        n_leaves += 1;

        for (state, id) in [(left_state, left_id), (right_state, right_id)] {
            seq += 1;
            if let Some(split) = best_split(&state) {
                heap.push(Candidate { gain: split.gain, seq, node: id as usize, split });
            }
            states.push(Some(state));
            debug_assert_eq!(states.len() - 1, id as usize);
        }
    }

    GrownTree { tree: Tree { nodes } }
}
