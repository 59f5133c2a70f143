//! Turning profile texts into fixed-width vectors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;

use super::{NodeKind, ProfileError, ProfileText};
use crate::{cemb, seeds};

/// Where the vectors come from.
#[derive(Debug, Clone)]
pub enum Embedder {
    /// Deterministic stand-in: hash each token of the combined profile
    /// text to a vector with entries in `[-1, 1]`, then average over
    /// tokens.
    HashMock { dim: usize },
    /// Vectors precomputed by an external embedding model, stored as a
    /// CEMB file keyed by node id.
    FileImport { path: PathBuf },
}

/// Default width of the mock embeddings. Deliberately wider than the
/// model dimension so the encoder genuinely reduces.
pub const HASH_MOCK_DIM: usize = 64;

impl Embedder {
    pub fn hash_mock() -> Self {
        Embedder::HashMock { dim: HASH_MOCK_DIM }
    }
}

/// Text embeddings for one node family.
#[derive(Debug, Clone, PartialEq)]
pub struct SideEmbeddingTable {
    pub kind: NodeKind,
    pub dim: usize,
    pub vectors: BTreeMap<u32, Vec<f64>>,
}

impl SideEmbeddingTable {
    /// Dense matrix with row index equal to node id. Every node in
    /// `0..n_nodes` must have exactly one vector.
    pub fn to_matrix(&self, n_nodes: usize) -> Result<Array2<f64>, ProfileError> {
        if let Some((&id, _)) = self.vectors.iter().find(|(&id, _)| id as usize >= n_nodes) {
            return Err(ProfileError::StrayNode { id, n_nodes });
        }
        let missing: Vec<u32> =
            (0..n_nodes as u32).filter(|id| !self.vectors.contains_key(id)).collect();
        if !missing.is_empty() {
            return Err(ProfileError::Coverage {
                found: self.vectors.len(),
                wanted: n_nodes,
                missing,
            });
        }
        let mut mat = Array2::zeros((n_nodes, self.dim));
        for (&id, vector) in &self.vectors {
            for (c, &x) in vector.iter().enumerate() {
                mat[[id as usize, c]] = x;
            }
        }
        Ok(mat)
    }
}

/// Hash-derived vector for one token, entries uniform in `[-1, 1]`.
fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = seeds::rng(dim as u64, token);
    (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

fn hash_embed(text: &str, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for token in text.split_whitespace() {
        for (acc, x) in sum.iter_mut().zip(token_vector(token, dim)) {
            *acc += x;
        }
        count += 1;
    }
    if count > 0 {
        for x in &mut sum {
            *x = (*x / count as f64).clamp(-1.0, 1.0);
        }
    }
    sum
}

/// Builds the embedding table for one family of profiles.
///
/// All profiles must share a kind, and each node id may appear only
/// once. The file importer additionally requires its file to cover
/// every profiled node.
pub fn embed_profiles(
    profiles: &[ProfileText],
    embedder: &Embedder,
) -> Result<SideEmbeddingTable, ProfileError> {
    let kind = profiles.first().ok_or(ProfileError::EmptyProfiles)?.kind;
    if profiles.iter().any(|p| p.kind != kind) {
        return Err(ProfileError::MixedKinds);
    }

    let mut vectors = BTreeMap::new();
    let dim = match embedder {
        Embedder::HashMock { dim } => {
            for profile in profiles {
                let vector = hash_embed(&profile.combined(), *dim);
                if vectors.insert(profile.node_id, vector).is_some() {
                    return Err(ProfileError::DuplicateNode { id: profile.node_id });
                }
            }
            *dim
        }
        Embedder::FileImport { path } => {
            let (imported, dim) = read_import(path)?;
            let missing: Vec<u32> = profiles
                .iter()
                .map(|p| p.node_id)
                .filter(|id| !imported.contains_key(id))
                .collect();
            if !missing.is_empty() {
                return Err(ProfileError::Coverage {
                    found: profiles.len() - missing.len(),
                    wanted: profiles.len(),
                    missing,
                });
            }
            for profile in profiles {
                let vector = imported[&profile.node_id].clone();
                if vectors.insert(profile.node_id, vector).is_some() {
                    return Err(ProfileError::DuplicateNode { id: profile.node_id });
                }
            }
            dim
        }
    };
    Ok(SideEmbeddingTable { kind, dim, vectors })
}

fn read_import(path: &Path) -> Result<(BTreeMap<u32, Vec<f64>>, usize), ProfileError> {
    let (_, dim, records) = cemb::read_vectors(path)?;
    let mut imported = BTreeMap::new();
    for (id, vector) in records {
        if imported.insert(id, vector).is_some() {
            return Err(ProfileError::DuplicateNode { id });
        }
    }
    Ok((imported, dim))
}
