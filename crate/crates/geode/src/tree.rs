//! Binary clustering tree of dyadic cells over the sample.
//!
//! Nodes are addressed by `(s, h)` with scale `s ∈ {0..L}` and position
//! `h ∈ {1..2^s}`; the children of `(s, h)` are `(s+1, 2h−1)` and
//! `(s+1, 2h)`. At every scale the cells of that scale, together with the
//! leaves that stopped above it, partition the sample. Splitting is
//! recursive 2-means with farthest-point initialisation, which keeps the
//! construction deterministic for a given data set.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{GeodeError, Result};

/// One dyadic cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    /// Scale `s` (root is 0).
    pub scale: usize,
    /// Position `h` within the scale, 1-based.
    pub pos: usize,
    /// Sorted indices of the training observations in this cell.
    pub indices: Vec<usize>,
    /// Parent node id (`None` for the root).
    pub parent: Option<usize>,
    /// `(left, right)` child ids when the cell was split.
    pub children: Option<(usize, usize)>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// A binary clustering tree. Nodes are stored in breadth-first order
/// (ascending scale, then ascending position), so node id 0 is the root.
/// The tree may be ragged: a cell that cannot split stays a leaf at its
/// scale, and weight computations force stopping there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterTree {
    depth: usize,
    nodes: Vec<TreeNode>,
    by_scale: Vec<Vec<usize>>,
}

impl ClusterTree {
    /// Deepest scale present in the tree.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Node ids at a given scale, ascending in position.
    pub fn scale_nodes(&self, scale: usize) -> &[usize] {
        &self.by_scale[scale]
    }

    /// Node id for `(s, h)` if that cell exists.
    pub fn id_of(&self, scale: usize, pos: usize) -> Option<usize> {
        if scale >= self.by_scale.len() {
            return None;
        }
        self.by_scale[scale]
            .binary_search_by_key(&pos, |&id| self.nodes[id].pos)
            .ok()
            .map(|k| self.by_scale[scale][k])
    }

    /// The ancestor of `id` at scale `scale` (or `id` itself); `None` when
    /// `scale` exceeds the node's own scale.
    pub fn ancestor_at(&self, id: usize, scale: usize) -> Option<usize> {
        let mut cur = id;
        if self.nodes[cur].scale < scale {
            return None;
        }
        while self.nodes[cur].scale > scale {
            cur = self.nodes[cur].parent?;
        }
        Some(cur)
    }

    /// Leaf ids, ascending by id.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&id| self.nodes[id].is_leaf())
            .collect()
    }

    /// The leaf whose cell contains observation `i`.
    pub fn leaf_of(&self, i: usize) -> usize {
        let mut cur = 0;
        loop {
            match self.nodes[cur].children {
                None => return cur,
                Some((l, r)) => {
                    if self.nodes[l].indices.binary_search(&i).is_ok() {
                        cur = l;
                    } else {
                        debug_assert!(self.nodes[r].indices.binary_search(&i).is_ok());
                        cur = r;
                    }
                }
            }
        }
    }

    /// Checks the structural invariants: per-scale partition (counting
    /// leaves that stopped above the scale), child nesting, the dyadic
    /// child-position rule, and sorted index sets.
    pub fn validate(&self, n: usize) -> Result<()> {
        let fail = |msg: String| Err(GeodeError::InvalidTree(msg));
        if self.nodes.is_empty() || self.nodes[0].scale != 0 || self.nodes[0].pos != 1 {
            return fail("tree has no root".into());
        }
        for s in 0..=self.depth {
            let mut seen = vec![false; n];
            let mut total = 0;
            for (id, node) in self.nodes.iter().enumerate() {
                let covers = node.scale == s || (node.scale < s && node.is_leaf());
                if !covers {
                    continue;
                }
                let _ = id;
                for &i in &node.indices {
                    if i >= n || seen[i] {
                        return fail(format!("scale {s} does not partition the sample"));
                    }
                    seen[i] = true;
                    total += 1;
                }
            }
            if total != n {
                return fail(format!("scale {s} covers {total} of {n} observations"));
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.indices.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("node {id} has unsorted indices"));
            }
            if let Some((l, r)) = node.children {
                let (ln, rn) = (&self.nodes[l], &self.nodes[r]);
                if ln.scale != node.scale + 1
                    || rn.scale != node.scale + 1
                    || ln.pos != 2 * node.pos - 1
                    || rn.pos != 2 * node.pos
                {
                    return fail(format!("node {id} violates the dyadic child rule"));
                }
                if ln.parent != Some(id) || rn.parent != Some(id) {
                    return fail(format!("node {id} has inconsistent parent links"));
                }
                let mut merged: Vec<usize> =
                    ln.indices.iter().chain(rn.indices.iter()).copied().collect();
                merged.sort_unstable();
                if merged != node.indices {
                    return fail(format!("children of node {id} do not partition the cell"));
                }
            }
        }
        Ok(())
    }
}

/// Builds the clustering tree by recursive 2-means on mean-completed data.
///
/// A cell is not split when it has reached `max_depth`, when either side of
/// the best split would fall below `min_cell_size`, or when its points are
/// all identical (a warning is logged for the degenerate case).
pub fn build_tree(data: &DataSet, max_depth: usize, min_cell_size: usize) -> Result<ClusterTree> {
    if data.is_empty() {
        return Err(GeodeError::EmptyData);
    }
    let min_cell_size = min_cell_size.max(1);
    let filled = data.completed();
    let n = data.len();

    let mut nodes = vec![TreeNode {
        scale: 0,
        pos: 1,
        indices: (0..n).collect(),
        parent: None,
        children: None,
    }];
    let mut frontier = vec![0usize];
    let mut depth = 0;

    for scale in 0..max_depth {
        let mut next = Vec::new();
        for id in frontier {
            let cell = nodes[id].indices.clone();
            if cell.len() < 2 * min_cell_size {
                continue;
            }
            let split = match two_means(&filled, &cell) {
                Some(s) => s,
                None => {
                    warn!(
                        "cell ({}, {}) is degenerate (all points identical); kept as a leaf",
                        nodes[id].scale, nodes[id].pos
                    );
                    continue;
                }
            };
            let (left, right) = split;
            if left.len() < min_cell_size || right.len() < min_cell_size {
                continue;
            }
            let pos = nodes[id].pos;
            for (side, cell_indices) in [(0usize, left), (1usize, right)] {
                let child_id = nodes.len();
                nodes.push(TreeNode {
                    scale: scale + 1,
                    pos: 2 * pos - 1 + side,
                    indices: cell_indices,
                    parent: Some(id),
                    children: None,
                });
                next.push(child_id);
            }
            let k = nodes.len();
            nodes[id].children = Some((k - 2, k - 1));
            depth = scale + 1;
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    // Re-number into breadth-first order so ids ascend by (scale, pos).
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|&id| (nodes[id].scale, nodes[id].pos));
    let mut remap = vec![0usize; nodes.len()];
    for (new_id, &old_id) in order.iter().enumerate() {
        remap[old_id] = new_id;
    }
    let mut renumbered: Vec<TreeNode> = order
        .iter()
        .map(|&old_id| nodes[old_id].clone())
        .collect();
    for node in &mut renumbered {
        node.parent = node.parent.map(|p| remap[p]);
        node.children = node.children.map(|(l, r)| (remap[l], remap[r]));
    }

    let mut by_scale = vec![Vec::new(); depth + 1];
    for (id, node) in renumbered.iter().enumerate() {
        by_scale[node.scale].push(id);
    }

    let tree = ClusterTree {
        depth,
        nodes: renumbered,
        by_scale,
    };
    debug_assert!(tree.validate(n).is_ok());
    Ok(tree)
}

/// Deterministic 2-means split of `cell`. Initial centres are the point
/// farthest from the cell mean and the point farthest from that one (lowest
/// index wins ties); Lloyd iterations then run to a fixed point. Returns
/// `None` when the cell carries no spread.
fn two_means(filled: &DMatrix<f64>, cell: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
    let dim = filled.nrows();
    let nc = cell.len() as f64;
    let mut mean = nalgebra::DVector::<f64>::zeros(dim);
    for &i in cell {
        mean += filled.column(i);
    }
    mean /= nc;

    let farthest_from = |target: nalgebra::DVectorView<f64>| -> (usize, f64) {
        let mut best = (cell[0], -1.0);
        for &i in cell {
            let d = (filled.column(i) - target).norm_squared();
            if d > best.1 {
                best = (i, d);
            }
        }
        best
    };

    let (c1_idx, spread) = farthest_from(mean.as_view());
    if spread <= 0.0 {
        return None;
    }
    let (c2_idx, _) = farthest_from(filled.column(c1_idx));
    let mut centers = [
        filled.column(c1_idx).into_owned(),
        filled.column(c2_idx).into_owned(),
    ];

    let mut assign = vec![0u8; cell.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (k, &i) in cell.iter().enumerate() {
            let d0 = (filled.column(i) - &centers[0]).norm_squared();
            let d1 = (filled.column(i) - &centers[1]).norm_squared();
            let side = u8::from(d1 < d0); // ties go to the lower centre index
            if assign[k] != side {
                assign[k] = side;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = [
            nalgebra::DVector::<f64>::zeros(dim),
            nalgebra::DVector::<f64>::zeros(dim),
        ];
        let mut counts = [0usize; 2];
        for (k, &i) in cell.iter().enumerate() {
            sums[assign[k] as usize] += filled.column(i);
            counts[assign[k] as usize] += 1;
        }
        if counts[0] == 0 || counts[1] == 0 {
            return None;
        }
        for side in 0..2 {
            centers[side] = &sums[side] / counts[side] as f64;
        }
    }

    let left: Vec<usize> = cell
        .iter()
        .zip(&assign)
        .filter(|(_, &a)| a == 0)
        .map(|(&i, _)| i)
        .collect();
    let right: Vec<usize> = cell
        .iter()
        .zip(&assign)
        .filter(|(_, &a)| a == 1)
        .map(|(&i, _)| i)
        .collect();
    if left.is_empty() || right.is_empty() {
        return None;
    }
    Some((left, right))
}
