//! Content-addressed stage artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_file, write_file_atomic};
use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stage inputs hashed into a lookup key.
pub fn stage_key(stage: &str, material: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(material).expect("JSON values serialize"));
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub stage: String,
    pub hash: String,
    pub file: String,
}

/// `objects/<sha256>.<ext>` holds bytes; `stages/<stage>-<key>.json` maps a
/// stage's inputs to the object it produced.
#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["objects", "stages"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, hash: &str, ext: &str) -> PathBuf {
        self.root.join("objects").join(format!("{hash}.{ext}"))
    }

    fn stage_path(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}-{key}.json"))
    }

    pub fn put(&self, stage: &str, key: &str, ext: &str, bytes: &[u8]) -> Result<ArtifactRef> {
        let hash = sha256_hex(bytes);
        let path = self.object_path(&hash, ext);
        if !path.exists() {
            write_file_atomic(&path, bytes)?;
        }
        let r = ArtifactRef {
            stage: stage.into(),
            hash,
            file: path.file_name().expect("object file name").to_string_lossy().into_owned(),
        };
        write_file_atomic(&self.stage_path(stage, key), &serde_json::to_vec_pretty(&r)?)?;
        Ok(r)
    }

    /// Bytes previously stored for `(stage, key)`, verified against their hash.
    pub fn lookup(&self, stage: &str, key: &str) -> Result<Option<(ArtifactRef, Vec<u8>)>> {
        let index = self.stage_path(stage, key);
        if !index.exists() {
            return Ok(None);
        }
        let r: ArtifactRef = serde_json::from_slice(&read_file(&index)?)?;
        let path = self.root.join("objects").join(&r.file);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let bytes = read_file(&path)?;
        let actual = sha256_hex(&bytes);
        if actual != r.hash {
            return Err(Error::Corrupt {
                what: "artifact",
                reason: format!("{} hashes to {actual}, index says {}", path.display(), r.hash),
            });
        }
        Ok(Some((r, bytes)))
    }
}
