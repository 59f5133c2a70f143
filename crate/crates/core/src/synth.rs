//! Bundled synthetic dataset with planted block structure.
//!
//! Users and items both carry a block label (`node % blocks`) and 80%
//! of each user's interactions land inside their own block, so a
//! recommender that picks up the structure beats one that cannot. The
//! matching metadata and review texts reuse per-block vocabulary,
//! which keeps generated profiles, and therefore their embeddings,
//! clustered by block as well. Everything here is a pure function of
//! its arguments.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataio::{Interaction, InteractionDataset, SplitTag};
use crate::seeds;

/// Interaction set with planted block structure. Ratings run 3 to 5 so
/// no row falls below the usual positive-feedback thresholds.
pub fn dataset(
    n_users: usize,
    n_items: usize,
    blocks: usize,
    per_user: usize,
    seed: u64,
) -> InteractionDataset {
    assert!(blocks > 0, "need at least one block");
    let mut rng = seeds::rng(seed, "synthetic");
    let mut interactions = Vec::new();
    let want = per_user.min(n_items);
    for u in 0..n_users {
        let b = u % blocks;
        let block_count = (n_items - b).div_ceil(blocks);
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < want {
            let item = if rng.gen::<f64>() < 0.8 && block_count > 0 {
                b + blocks * rng.gen_range(0..block_count)
            } else {
                rng.gen_range(0..n_items)
            };
            chosen.insert(item);
        }
        for item in chosen {
            interactions.push(Interaction {
                user: u as u32,
                item: item as u32,
                rating: 3.0 + rng.gen_range(0..3) as f64,
                timestamp: None,
            });
        }
    }
    InteractionDataset {
        n_users,
        n_items,
        interactions,
        split_tag: SplitTag::Full,
        user_ids: (0..n_users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..n_items).map(|i| format!("i{i}")).collect(),
    }
}

/// Deterministic stand-in for text embeddings: a block indicator plus
/// small per-node noise, so nodes of one block stay close together.
pub fn block_texts(rows: usize, blocks: usize, dim: usize, seed: u64, tag: &str) -> Array2<f64> {
    assert!(dim >= blocks);
    let mut rng = seeds::rng(seed, tag);
    let mut out =
        Array2::from_shape_fn((rows, dim), |_| 0.05 * rng.sample::<f64, _>(StandardNormal));
    for r in 0..rows {
        out[[r, r % blocks]] += 1.0;
    }
    out
}

/// Prompt metadata for one synthetic item, themed by its block.
pub fn item_meta(item: u32, blocks: usize) -> BTreeMap<String, String> {
    let b = item as usize % blocks.max(1);
    BTreeMap::from([
        ("title".to_string(), format!("Synthetic item {item}")),
        (
            "description".to_string(),
            format!(
                "A block {b} piece built around theme{b}, craft{b} and motif{b}, \
                 aimed at readers who collect everything in series {b}."
            ),
        ),
    ])
}

/// A short deterministic review of `item` by `user`.
pub fn review(user: u32, item: u32, blocks: usize) -> String {
    let b = item as usize % blocks.max(1);
    if user % 2 == 0 {
        format!("Classic theme{b} fare, exactly what series {b} regulars expect.")
    } else {
        format!("The motif{b} touches carry it; craft{b} devotees will approve.")
    }
}
