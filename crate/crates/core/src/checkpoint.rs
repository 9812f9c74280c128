//! Versioned JSON checkpoints with a kind tag, written atomically.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::write_atomic;

pub const FORMAT: &str = "m2s-add-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Binauralizer,
    Detector,
}

/// A state type stored in checkpoints of one kind.
pub trait Checkpointable: Serialize + DeserializeOwned {
    const KIND: Kind;
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: Kind,
    seed: u64,
    state: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: Kind,
    seed: u64,
}

/// Writes `state` with its kind, format version and the run seed.
pub fn save<T: Checkpointable>(path: &Path, seed: u64, state: &T) -> Result<()> {
    let env = Envelope {
        format: FORMAT.to_string(),
        version: FORMAT_VERSION,
        kind: T::KIND,
        seed,
        state,
    };
    write_atomic(path, &serde_json::to_vec(&env)?)
}

/// Reads a checkpoint, rejecting foreign files, other versions and other kinds.
/// Returns the recorded seed with the state.
pub fn load<T: Checkpointable>(path: &Path) -> Result<(u64, T)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: not a checkpoint ({e})", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("{}: unknown format {:?}", path.display(), header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (this build reads {FORMAT_VERSION})",
            path.display(),
            header.version
        )));
    }
    if header.kind != T::KIND {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {:?} checkpoint, expected {:?}",
            path.display(),
            header.kind,
            T::KIND
        )));
    }
    let env: Envelope<T> = serde_json::from_slice(&bytes)?;
    Ok((header.seed, env.state))
}
