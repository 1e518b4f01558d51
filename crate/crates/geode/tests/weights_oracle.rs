//! Stick-breaking weights against a path-enumeration oracle.
//!
//! The production code computes all node weights in one breadth-first pass.
//! The oracle here recomputes each node's weight independently by walking
//! its root path and multiplying stop/continue and left/right factors in
//! the same order — the two must agree bit-for-bit, and the weights must
//! sum to 1 within 1e−12 because the stick factors telescope.

use geode::gibbs::compute_weights;
use geode::tree::build_tree;
use geode::{ClusterTree, DataSet, StickState};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Weight of one node from its root path alone.
fn path_weight(tree: &ClusterTree, stick: &StickState, id: usize) -> f64 {
    let node = tree.node(id);
    // Ancestor ids from the root down to the node itself.
    let mut path = Vec::with_capacity(node.scale + 1);
    for r in 0..=node.scale {
        // Position of the scale-r ancestor of (s, h): ⌈h / 2^(s−r)⌉.
        let h = node.pos;
        let shift = node.scale - r;
        let pos = h.div_ceil(1 << shift);
        path.push(tree.id_of(r, pos).expect("ancestor exists"));
    }
    let mut prefix = 1.0;
    for step in 0..node.scale {
        let anc = path[step];
        let child = path[step + 1];
        let t = if tree.node(child).pos % 2 == 0 {
            stick.right[anc]
        } else {
            1.0 - stick.right[anc]
        };
        // Multiplication order must match the production pass exactly.
        prefix = (prefix * (1.0 - stick.stop[anc])) * t;
    }
    let stop = if node.is_leaf() { 1.0 } else { stick.stop[id] };
    prefix * stop
}

fn random_tree(seed: u64) -> ClusterTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(16..=256);
    let dim = rng.gen_range(2..=6);
    let depth = rng.gen_range(1..=6);
    // Hierarchically clustered columns so splits go deep; ragged leaves
    // appear naturally where cells drop below the minimum size.
    let m = DMatrix::from_fn(dim, n, |r, c| {
        let mut x = rng.sample::<f64, _>(StandardNormal) * 0.3;
        if r == 0 {
            x += if c % 2 == 0 { 8.0 } else { -8.0 };
        }
        if r == 1 && dim > 1 {
            x += if (c / 2) % 2 == 0 { 4.0 } else { -4.0 };
        }
        if r == 2 && dim > 2 {
            x += if (c / 4) % 2 == 0 { 2.0 } else { -2.0 };
        }
        x
    });
    let data = DataSet::complete(m).unwrap();
    build_tree(&data, depth, 2).unwrap()
}

#[test]
fn weights_match_path_enumeration_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut max_depth_seen = 0;
    let mut ragged_seen = false;
    for rep in 0..100 {
        let tree = random_tree(rep);
        max_depth_seen = max_depth_seen.max(tree.depth());
        let n_nodes = tree.node_count();
        ragged_seen |= (0..n_nodes)
            .any(|id| tree.node(id).is_leaf() && tree.node(id).scale < tree.depth());
        let stick = StickState {
            stop: (0..n_nodes).map(|_| rng.gen()).collect(),
            right: (0..n_nodes).map(|_| rng.gen()).collect(),
            weights: vec![0.0; n_nodes],
        };
        let fast = compute_weights(&stick, &tree);
        for id in 0..n_nodes {
            let oracle = path_weight(&tree, &stick, id);
            assert_eq!(
                fast[id].to_bits(),
                oracle.to_bits(),
                "tree {rep}, node {id}: {} vs {}",
                fast[id],
                oracle
            );
        }
        let total: f64 = fast.iter().sum();
        assert!(
            (total - 1.0).abs() < 1e-12,
            "tree {rep}: weights sum to {total}"
        );
    }
    // The corpus must actually exercise deep and ragged trees.
    assert!(max_depth_seen >= 4, "deepest tree only {max_depth_seen}");
    assert!(ragged_seen, "no ragged leaves in the corpus");
}

#[test]
fn forced_stop_at_ragged_leaf_absorbs_subtree_mass() {
    // A tree whose root has one splittable and one unsplittable side: the
    // ragged leaf must absorb exactly the reach times 1.
    let mut cols = Vec::new();
    // 8 points at +10 in a spread-out cloud (splittable), 2 points at −10
    // packed tight (their cell stops: below min_cell_size for children).
    for k in 0..8 {
        cols.push(10.0 + k as f64);
        cols.push(k as f64 * 3.0);
    }
    cols.push(-10.0);
    cols.push(0.0);
    cols.push(-10.1);
    cols.push(0.0);
    let data = DataSet::complete(DMatrix::from_vec(2, 10, cols)).unwrap();
    let tree = build_tree(&data, 3, 2).unwrap();
    let ragged: Vec<usize> = (0..tree.node_count())
        .filter(|&id| tree.node(id).is_leaf() && tree.node(id).scale < tree.depth())
        .collect();
    assert!(!ragged.is_empty(), "expected a ragged leaf");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n_nodes = tree.node_count();
    let stick = StickState {
        stop: (0..n_nodes).map(|_| rng.gen()).collect(),
        right: (0..n_nodes).map(|_| rng.gen()).collect(),
        weights: vec![0.0; n_nodes],
    };
    let w = compute_weights(&stick, &tree);
    for &id in &ragged {
        assert_eq!(w[id].to_bits(), path_weight(&tree, &stick, id).to_bits());
        assert!(w[id] > 0.0);
    }
    let total: f64 = w.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}
