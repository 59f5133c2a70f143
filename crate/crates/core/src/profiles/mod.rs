//! Prompt construction, profile generation, and text-embedding ingest.
//!
//! A profile is a short two-part text (`summarisation` plus
//! `reasoning`) describing one user or one item. Prompts follow fixed
//! per-dataset templates; the provider filling them in is pluggable, so
//! a deterministic offline mock and a generic HTTP endpoint are
//! interchangeable. Embeddings arrive either from a hash-based mock or
//! from a CEMB vector file produced by an external embedding model.

pub mod embed;
pub mod prompts;
pub mod provider;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cemb::CembError;
use crate::par;

pub use embed::{embed_profiles, Embedder, SideEmbeddingTable};
pub use prompts::{build_item_prompt, build_user_prompt, InteractedItem};
pub use provider::{HttpConfig, HttpProvider, MockProvider, ProfileProvider, ProfileResponse};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{dataset} metadata is missing the required key '{key}'")]
    MissingKey { dataset: Dataset, key: &'static str },
    #[error("a user prompt needs at least one interacted item")]
    EmptyItemList,
    #[error("cannot embed an empty profile list")]
    EmptyProfiles,
    #[error("profile list mixes user and item entries")]
    MixedKinds,
    #[error("node {id} appears more than once")]
    DuplicateNode { id: u32 },
    #[error("environment variable {var} is not set")]
    MissingEnv { var: &'static str },
    #[error("environment variable {var} has unusable value '{value}'")]
    BadEnv { var: &'static str, value: String },
    #[error("provider gave up after {attempts} attempts: {message}")]
    Provider { attempts: u32, message: String },
    #[error("provider response is malformed: {message}")]
    Format { message: String },
    #[error("embedding file covers {found} of {wanted} nodes; missing ids {missing:?}")]
    Coverage { found: usize, wanted: usize, missing: Vec<u32> },
    #[error("table holds node {id} but the dataset has only {n_nodes} nodes")]
    StrayNode { id: u32, n_nodes: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Table(#[from] CembError),
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Which side of the interaction graph a prompt, profile, or embedding
/// table describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Item,
}

/// Named prompt template family. `custom` uses generic wording for
/// datasets the fixed templates do not cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    /// Book reviews; items are books.
    Amazon,
    /// Items are video games.
    Yelp,
    /// Items are businesses.
    Steam,
    Custom,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::Amazon => "amazon",
            Dataset::Yelp => "yelp",
            Dataset::Steam => "steam",
            Dataset::Custom => "custom",
        }
    }
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "amazon" => Ok(Dataset::Amazon),
            "yelp" => Ok(Dataset::Yelp),
            "steam" => Ok(Dataset::Steam),
            "custom" => Ok(Dataset::Custom),
            other => Err(format!("unknown dataset '{other}'")),
        }
    }
}

/// A fully rendered instruction ready to send to a provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub kind: NodeKind,
    pub dataset: Dataset,
    pub body: String,
}

/// One node's generated side information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileText {
    #[serde(rename = "id")]
    pub node_id: u32,
    pub kind: NodeKind,
    pub summarisation: String,
    pub reasoning: String,
}

impl ProfileText {
    /// The text handed to the embedder: both parts joined by a space.
    pub fn combined(&self) -> String {
        format!("{} {}", self.summarisation, self.reasoning)
    }
}

/// Fills one prompt and tags the result with its node id.
pub fn generate_profile(
    provider: &dyn ProfileProvider,
    node_id: u32,
    prompt: &PromptText,
) -> Result<ProfileText, ProfileError> {
    let response = provider.generate(prompt)?;
    Ok(ProfileText {
        node_id,
        kind: prompt.kind,
        summarisation: response.summarisation,
        reasoning: response.reasoning,
    })
}

/// Fills every prompt, possibly concurrently, and merges the results in
/// input order. A node id appearing twice is rejected rather than
/// overwritten.
pub fn generate_profiles(
    provider: &dyn ProfileProvider,
    prompts: &[(u32, PromptText)],
) -> Result<Vec<ProfileText>, ProfileError> {
    let results = par::map_indexed(prompts.len(), |i| {
        let (node_id, prompt) = &prompts[i];
        generate_profile(provider, *node_id, prompt)
    });
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(results.len());
    for result in results {
        let profile = result?;
        if !seen.insert(profile.node_id) {
            return Err(ProfileError::DuplicateNode { id: profile.node_id });
        }
        out.push(profile);
    }
    Ok(out)
}

/// Writes profiles as JSON lines, one object per node.
pub fn write_profiles(path: &Path, profiles: &[ProfileText]) -> Result<(), ProfileError> {
    let io_err = |source| ProfileError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for profile in profiles {
        let line = serde_json::to_string(profile)
            .expect("profile serialization cannot fail");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a JSON-lines profile store, skipping blank lines.
pub fn read_profiles(path: &Path) -> Result<Vec<ProfileText>, ProfileError> {
    let io_err = |source| ProfileError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let profile = serde_json::from_str(&line).map_err(|source| ProfileError::Json {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        out.push(profile);
    }
    Ok(out)
}
