//! Versioned JSON records. Checkpoints on disk and client summaries on the
//! simulated uplink share one envelope, so a record written by either path
//! reads back through the same code.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::em::SparsityPolicy;
use crate::error::{Error, Result};
use crate::model::{NetHyper, NetParams};

pub const FORMAT: &str = "tdamp";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    payload: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

pub fn encode<T: Serialize>(kind: &str, payload: &T) -> Result<String> {
    let env = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        payload,
    };
    Ok(serde_json::to_string(&env)?)
}

/// Parses a record written by [`encode`] with the same `kind`.
pub fn decode<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let h: Header = serde_json::from_str(text)?;
    if h.format != FORMAT {
        return Err(Error::Record(format!("unknown format {:?}", h.format)));
    }
    if h.version != VERSION {
        return Err(Error::Record(format!(
            "unsupported version {} (expected {VERSION})",
            h.version
        )));
    }
    if h.kind != kind {
        return Err(Error::Record(format!(
            "expected a {kind} record, found {}",
            h.kind
        )));
    }
    let env: Envelope<T> = serde_json::from_str(text)?;
    Ok(env.payload)
}

/// Training state after `iteration` EM iterations or federated rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub hyper: NetHyper,
    pub posterior: NetParams,
    pub policy: SparsityPolicy,
    /// Fitted on the training split; maps raw data into model space.
    pub normalizer: Option<Normalizer>,
    /// Echo of the run configuration.
    pub run: serde_json::Value,
}

impl Checkpoint {
    pub const KIND: &'static str = "checkpoint";

    /// Writes through a sibling temporary file so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, encode(Self::KIND, self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Self = decode(Self::KIND, &text).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })?;
        ck.hyper.validate()?;
        if !ck.posterior.same_shape(&ck.hyper.params) {
            return Err(Error::Format {
                path: path.into(),
                msg: "posterior and hyperparameter shapes differ".into(),
            });
        }
        Ok(ck)
    }
}
