mod common;

use cllmr_core::backbone::{
    init_embeddings, predict_score, propagate, propagate_backward, propagate_sequential,
    EmbeddingTable,
};
use cllmr_core::dataio::{
    build_normalized_adjacency, Interaction, InteractionDataset, NormalizedAdjacency, SplitTag,
};
use cllmr_core::seeds;
use ndarray::{arr2, Array2};
use rand::Rng;

fn tiny_dataset(n_users: usize, n_items: usize, edges: &[(u32, u32)]) -> InteractionDataset {
    InteractionDataset {
        n_users,
        n_items,
        interactions: edges
            .iter()
            .map(|&(user, item)| Interaction { user, item, rating: 5.0, timestamp: None })
            .collect(),
        split_tag: SplitTag::Train,
        user_ids: (0..n_users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..n_items).map(|i| format!("i{i}")).collect(),
    }
}

fn single_edge_adjacency() -> NormalizedAdjacency {
    build_normalized_adjacency(&tiny_dataset(1, 1, &[(0, 0)])).unwrap()
}

fn random_matrix(rows: usize, cols: usize, seed: u64, tag: &str) -> Array2<f64> {
    let mut rng = seeds::rng(seed, tag);
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() - 0.5)
}

#[test]
fn one_hop_average_splits_a_single_edge_evenly() {
    let adj = single_edge_adjacency();
    let base = arr2(&[[1.0], [0.0]]);
    let p1 = propagate(&adj, &base, 1);
    assert!((p1[[0, 0]] - 0.5).abs() < 1e-12);
    assert!((p1[[1, 0]] - 0.5).abs() < 1e-12);
}

#[test]
fn two_hop_average_weights_the_source_two_thirds() {
    let adj = single_edge_adjacency();
    let base = arr2(&[[1.0], [0.0]]);
    let p2 = propagate(&adj, &base, 2);
    assert!((p2[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
    assert!((p2[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn zero_layers_returns_the_base_table() {
    let ds = tiny_dataset(3, 2, &[(0, 0), (1, 1), (2, 0)]);
    let adj = build_normalized_adjacency(&ds).unwrap();
    let base = random_matrix(5, 4, 1, "base");
    assert_eq!(propagate(&adj, &base, 0), base);
}

#[test]
fn propagation_is_linear_in_the_base_table() {
    let ds = tiny_dataset(4, 3, &[(0, 0), (1, 1), (2, 2), (3, 0), (1, 0)]);
    let adj = build_normalized_adjacency(&ds).unwrap();
    let x = random_matrix(7, 3, 2, "x");
    let y = random_matrix(7, 3, 3, "y");
    let combined = propagate(&adj, &(&x * 2.5 + &y * (-1.25)), 2);
    let separate = propagate(&adj, &x, 2) * 2.5 + propagate(&adj, &y, 2) * (-1.25);
    for (a, b) in combined.iter().zip(separate.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn relabeling_nodes_permutes_the_propagated_rows() {
    let edges = [(0u32, 0u32), (0, 1), (1, 1), (2, 0)];
    let ds = tiny_dataset(3, 2, &edges);
    let adj = build_normalized_adjacency(&ds).unwrap();

    // Swap users 0 and 2, swap items 0 and 1.
    let user_map = [2u32, 1, 0];
    let item_map = [1u32, 0];
    let permuted_edges: Vec<(u32, u32)> = edges
        .iter()
        .map(|&(u, i)| (user_map[u as usize], item_map[i as usize]))
        .collect();
    let ds_p = tiny_dataset(3, 2, &permuted_edges);
    let adj_p = build_normalized_adjacency(&ds_p).unwrap();

    let base = random_matrix(5, 3, 4, "base");
    let mut base_p = Array2::zeros((5, 3));
    for u in 0..3 {
        for d in 0..3 {
            base_p[[user_map[u] as usize, d]] = base[[u, d]];
        }
    }
    for i in 0..2 {
        for d in 0..3 {
            base_p[[3 + item_map[i] as usize, d]] = base[[3 + i, d]];
        }
    }

    let out = propagate(&adj, &base, 2);
    let out_p = propagate(&adj_p, &base_p, 2);
    for u in 0..3 {
        for d in 0..3 {
            assert!((out[[u, d]] - out_p[[user_map[u] as usize, d]]).abs() < 1e-12);
        }
    }
    for i in 0..2 {
        for d in 0..3 {
            assert!((out[[3 + i, d]] - out_p[[3 + item_map[i] as usize, d]]).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_map_matches_finite_differences() {
    let ds = tiny_dataset(3, 3, &[(0, 0), (1, 1), (2, 2), (0, 2)]);
    let adj = build_normalized_adjacency(&ds).unwrap();
    let mut base = random_matrix(6, 2, 5, "base");
    let probe = random_matrix(6, 2, 6, "probe");

    let grad = propagate_backward(&adj, &probe, 2);
    let h = 1e-7;
    for i in 0..6 {
        for j in 0..2 {
            let orig = base[[i, j]];
            base[[i, j]] = orig + h;
            let up = (&probe * &propagate(&adj, &base, 2)).sum();
            base[[i, j]] = orig - h;
            let down = (&probe * &propagate(&adj, &base, 2)).sum();
            base[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((grad[[i, j]] - numeric).abs() < 1e-6);
        }
    }
}

#[test]
fn parallel_and_sequential_propagation_agree_bitwise() {
    let ds = tiny_dataset(20, 15, &[(0, 0), (3, 2), (7, 7), (19, 14), (5, 5), (0, 14), (11, 3)]);
    let adj = build_normalized_adjacency(&ds).unwrap();
    let base = random_matrix(35, 8, 7, "base");
    let par = propagate(&adj, &base, 3);
    let seq = propagate_sequential(&adj, &base, 3);
    assert_eq!(par, seq);
}

#[test]
fn initial_embeddings_have_the_requested_spread() {
    let table = init_embeddings(1500, 500, 32, 0.1, 9);
    assert_eq!(table.mat.dim(), (2000, 32));
    let n = (2000 * 32) as f64;
    let mean = table.mat.sum() / n;
    let var = table.mat.mapv(|x| (x - mean) * (x - mean)).sum() / n;
    assert!((var - 0.01).abs() / 0.01 < 0.05, "sample variance {var}");
}

#[test]
fn embedding_init_is_seed_deterministic() {
    let a = init_embeddings(10, 5, 4, 0.1, 42);
    let b = init_embeddings(10, 5, 4, 0.1, 42);
    let c = init_embeddings(10, 5, 4, 0.1, 43);
    assert_eq!(a.mat, b.mat);
    assert_ne!(a.mat, c.mat);
}

#[test]
fn scores_are_dot_products_of_user_and_item_rows() {
    let mat = arr2(&[[1.0, 2.0], [0.5, -1.0], [3.0, 1.0]]);
    let table = EmbeddingTable::from_mat(mat, 1);
    assert!((predict_score(&table, 0, 0) - (0.5 - 2.0)).abs() < 1e-12);
    assert!((predict_score(&table, 0, 1) - (3.0 + 2.0)).abs() < 1e-12);
    assert_eq!(table.n_items(), 2);
    assert_eq!(table.item_row(0)[0], 0.5);
}
