//! Content-addressed storage for datasets and models referenced by the log.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{parse_dataset, Dataset, DatasetError};
use crate::schema::Schema;
use crate::tree::{TreeError, TreeModel};

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact {0} not found")]
    Missing(String),
    #[error("artifact {expected} has content hash {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset artifact unreadable: {0}")]
    Dataset(#[from] DatasetError),
    #[error("model artifact unreadable: {0}")]
    Model(#[from] TreeError),
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: &Path) -> Result<ArtifactStore, ArtifactError> {
        for sub in ["datasets", "models"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|source| ArtifactError::Io { path: p.display().to_string(), source })?;
        }
        Ok(ArtifactStore { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dataset_path(&self, hash: &str) -> PathBuf {
        self.root.join("datasets").join(format!("{hash}.csv"))
    }

    fn model_path(&self, hash: &str) -> PathBuf {
        self.root.join("models").join(format!("{hash}.json"))
    }

    fn write(path: &Path, contents: &str) -> Result<(), ArtifactError> {
        if path.exists() {
            return Ok(());
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, contents)
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|source| ArtifactError::Io { path: path.display().to_string(), source })
    }

    pub fn put_dataset(&self, ds: &Dataset) -> Result<String, ArtifactError> {
        Self::write(&self.dataset_path(&ds.content_hash), &ds.canonical())?;
        Ok(ds.content_hash.clone())
    }

    pub fn put_model(&self, model: &TreeModel) -> Result<String, ArtifactError> {
        Self::write(&self.model_path(&model.model_hash), &model.to_json())?;
        Ok(model.model_hash.clone())
    }

    pub fn has_dataset(&self, hash: &str) -> bool {
        self.dataset_path(hash).exists()
    }

    pub fn has_model(&self, hash: &str) -> bool {
        self.model_path(hash).exists()
    }

    /// Loads a dataset and checks that its content still has `hash`.
    pub fn get_dataset(&self, hash: &str, schema: &Schema) -> Result<Dataset, ArtifactError> {
        let path = self.dataset_path(hash);
        if !path.exists() {
            return Err(ArtifactError::Missing(hash.to_string()));
        }
        let text = fs::read_to_string(&path).map_err(|source| ArtifactError::Io { path: path.display().to_string(), source })?;
        let ds = parse_dataset(&text, schema)?;
        if ds.content_hash != hash {
            return Err(ArtifactError::HashMismatch { expected: hash.to_string(), actual: ds.content_hash });
        }
        Ok(ds)
    }

    /// Loads a model and checks both its embedded and its addressed hash.
    pub fn get_model(&self, hash: &str) -> Result<TreeModel, ArtifactError> {
        let path = self.model_path(hash);
        if !path.exists() {
            return Err(ArtifactError::Missing(hash.to_string()));
        }
        let text = fs::read_to_string(&path).map_err(|source| ArtifactError::Io { path: path.display().to_string(), source })?;
        let model = match TreeModel::from_json(&text) {
            Ok(m) => m,
            Err(TreeError::HashMismatch { actual, .. }) => {
                return Err(ArtifactError::HashMismatch { expected: hash.to_string(), actual })
            }
            Err(e) => return Err(e.into()),
        };
        if model.model_hash != hash {
            return Err(ArtifactError::HashMismatch { expected: hash.to_string(), actual: model.model_hash });
        }
        Ok(model)
    }
}
