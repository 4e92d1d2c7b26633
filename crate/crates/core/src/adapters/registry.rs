//! Model registry: a manifest of descriptors plus a checksum-verified
//! download cache for remote weights.
//!
//! Manifest format (TOML):
//!
//! ```toml
//! [[model]]
//! id = "marker-detector"
//! task = "detection"
//! tile_size = 512
//! input_format = "rgb"
//! source = { kind = "builtin_mock", name = "marker" }
//!
//! [[model]]
//! id = "remote-detector"
//! task = "detection"
//! tile_size = 512
//! input_format = "rgb"
//! source = { kind = "remote", url = "http://host/weights.bin", sha256 = "<hex>" }
//! ```
//!
//! Remote files land in `<cache>/<sha256>` and are reused on later runs.
//! Model files are loaded as graphs; this build understands the JSON mock
//! graph format (`{"format": "scopeloop-mock-graph", "mock": "<name>"}`) and
//! reports every other graph as unsupported.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{mock, Backend, ModelDescriptor, ModelSource};
use crate::scalar::Scalar;

pub const CACHE_DIR_ENV: &str = "SCOPELOOP_CACHE_DIR";
pub const MOCK_GRAPH_FORMAT: &str = "scopeloop-mock-graph";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("checksum mismatch for {path}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("download of {url} failed: {reason}")]
    DownloadFailure { url: String, reason: String },
    #[error("unsupported model graph {path}: {reason}")]
    UnsupportedGraph { path: PathBuf, reason: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    #[serde(default, rename = "model")]
    models: Vec<ModelDescriptor>,
}

pub const BUILTIN_MANIFEST: &str = r#"
[[model]]
id = "quadrant-classifier"
task = "classification"
tile_size = 1024
input_format = "rgb"
source = { kind = "builtin_mock", name = "quadrant" }

[[model]]
id = "constant-classifier"
task = "classification"
tile_size = 1024
input_format = "rgb"
source = { kind = "builtin_mock", name = "constant" }

[[model]]
id = "marker-detector"
task = "detection"
tile_size = 512
input_format = "rgb"
source = { kind = "builtin_mock", name = "marker" }

[[model]]
id = "seeded-detector"
task = "detection"
tile_size = 512
input_format = "rgb"
source = { kind = "builtin_mock", name = "seeded" }

[[model]]
id = "marker-segmenter"
task = "segmentation"
tile_size = 1024
input_format = "bgr"
source = { kind = "builtin_mock", name = "marker" }
"#;

/// Platform cache root + `scopeloop/models`, unless overridden by env.
pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_DIR_ENV) {
        return PathBuf::from(dir);
    }
    dirs::cache_dir()
        .unwrap_or_else(std::env::temp_dir)
        .join("scopeloop")
        .join("models")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct ModelRegistry {
    models: Vec<ModelDescriptor>,
    cache_dir: PathBuf,
}

impl ModelRegistry {
    pub fn new(models: Vec<ModelDescriptor>, cache_dir: PathBuf) -> Result<Self, RegistryError> {
        for m in &models {
            m.validate().map_err(RegistryError::InvalidDescriptor)?;
        }
        for (i, m) in models.iter().enumerate() {
            if models[..i].iter().any(|o| o.id == m.id) {
                return Err(RegistryError::Manifest(format!("duplicate model id {:?}", m.id)));
            }
        }
        Ok(ModelRegistry { models, cache_dir })
    }

    pub fn from_manifest_str(text: &str, cache_dir: PathBuf) -> Result<Self, RegistryError> {
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| RegistryError::Manifest(e.to_string()))?;
        Self::new(manifest.models, cache_dir)
    }

    pub fn from_manifest_file(path: &Path, cache_dir: PathBuf) -> Result<Self, RegistryError> {
        Self::from_manifest_str(&std::fs::read_to_string(path)?, cache_dir)
    }

    /// The shipped mock models with the default cache directory.
    pub fn builtin() -> Self {
        Self::from_manifest_str(BUILTIN_MANIFEST, default_cache_dir()).expect("builtin manifest")
    }

    pub fn to_manifest_string(&self) -> String {
        toml::to_string(&Manifest {
            models: self.models.clone(),
        })
        .expect("descriptors serialize")
    }

    pub fn models(&self) -> &[ModelDescriptor] {
        &self.models
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    pub fn add(&mut self, desc: ModelDescriptor) -> Result<(), RegistryError> {
        desc.validate().map_err(RegistryError::InvalidDescriptor)?;
        self.models.retain(|m| m.id != desc.id);
        self.models.push(desc);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&ModelDescriptor, RegistryError> {
        self.models
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| RegistryError::UnknownModel(id.to_string()))
    }

    pub fn resolve_id<S: Scalar>(&self, id: &str) -> Result<Arc<dyn Backend<S>>, RegistryError> {
        let desc = self.get(id)?.clone();
        self.resolve(&desc)
    }

    /// Loads a backend for `desc`, downloading remote weights at most once.
    pub fn resolve<S: Scalar>(
        &self,
        desc: &ModelDescriptor,
    ) -> Result<Arc<dyn Backend<S>>, RegistryError> {
        desc.validate().map_err(RegistryError::InvalidDescriptor)?;
        match &desc.source {
            ModelSource::BuiltinMock { .. } => {
                mock::build(desc).map_err(RegistryError::InvalidDescriptor)
            }
            ModelSource::LocalFile { path } => load_graph(path, desc),
            ModelSource::Remote { url, sha256 } => {
                let path = self.fetch(url, sha256)?;
                load_graph(&path, desc)
            }
        }
    }

    /// Cached path for a remote file, downloading when missing or corrupt.
    ///
    /// A corrupt cache entry is evicted and downloaded again once; if the
    /// fresh download also fails verification the error is returned.
    pub fn fetch(&self, url: &str, sha256: &str) -> Result<PathBuf, RegistryError> {
        let expected = sha256.to_ascii_lowercase();
        if expected.len() != 64 || !expected.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(RegistryError::InvalidDescriptor(format!(
                "sha256 {sha256:?} is not 64 hex digits"
            )));
        }
        let path = self.cache_dir.join(&expected);
        if path.exists() {
            let actual = sha256_hex(&std::fs::read(&path)?);
            if actual == expected {
                return Ok(path);
            }
            log::warn!(
                "evicting corrupt cache entry {} (sha256 {actual})",
                path.display()
            );
            std::fs::remove_file(&path)?;
        }
        std::fs::create_dir_all(&self.cache_dir)?;
        let bytes = download(url)?;
        let actual = sha256_hex(&bytes);
        if actual != expected {
            return Err(RegistryError::ChecksumMismatch {
                path,
                expected,
                actual,
            });
        }
        let tmp = self.cache_dir.join(format!(".{expected}.partial"));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

fn download(url: &str) -> Result<Vec<u8>, RegistryError> {
    let fail = |reason: String| RegistryError::DownloadFailure {
        url: url.to_string(),
        reason,
    };
    let resp = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
    let mut bytes = Vec::new();
    resp.into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| fail(e.to_string()))?;
    Ok(bytes)
}

#[derive(Deserialize)]
struct MockGraph {
    format: String,
    mock: String,
    #[serde(default)]
    delay_ms: u64,
}

/// Loads a model file. Only mock graphs are executable in this build.
pub fn load_graph<S: Scalar>(
    path: &Path,
    desc: &ModelDescriptor,
) -> Result<Arc<dyn Backend<S>>, RegistryError> {
    let bytes = std::fs::read(path)?;
    let unsupported = |reason: &str| RegistryError::UnsupportedGraph {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let graph: MockGraph = serde_json::from_slice(&bytes)
        .map_err(|_| unsupported("no graph runtime available for this file format"))?;
    if graph.format != MOCK_GRAPH_FORMAT {
        return Err(unsupported(&format!("unknown graph format {:?}", graph.format)));
    }
    let mut as_mock = desc.clone();
    as_mock.source = ModelSource::BuiltinMock {
        name: graph.mock,
        delay_ms: graph.delay_ms,
    };
    let inner = mock::build::<S>(&as_mock).map_err(|e| unsupported(&e))?;
    Ok(Arc::new(Described {
        desc: desc.clone(),
        inner,
    }))
}

/// Keeps the caller's descriptor (with its real source) on a loaded backend.
struct Described<S> {
    desc: ModelDescriptor,
    inner: Arc<dyn Backend<S>>,
}

impl<S: Scalar> Backend<S> for Described<S> {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn reentrant(&self) -> bool {
        self.inner.reentrant()
    }

    fn classify(
        &self,
        tile: &crate::frame::Frame,
    ) -> Result<super::SoftmaxVector<S>, super::AdapterError> {
        self.inner.classify(tile)
    }

    fn detect(
        &self,
        tile: &crate::frame::Frame,
    ) -> Result<Vec<super::Detection<S>>, super::AdapterError> {
        self.inner.detect(tile)
    }

    fn segment(
        &self,
        tile: &crate::frame::Frame,
    ) -> Result<Vec<super::InstanceMask>, super::AdapterError> {
        self.inner.segment(tile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Task;
    use crate::frame::PixelFormat;

    #[test]
    fn builtin_manifest_matches_model_conventions() {
        let r = ModelRegistry::from_manifest_str(BUILTIN_MANIFEST, PathBuf::from("/nonexistent"))
            .unwrap();
        for m in r.models() {
            let (tile, fmt) = match m.task {
                Task::Classification => (1024, PixelFormat::Rgb),
                Task::Detection => (512, PixelFormat::Rgb),
                Task::Segmentation => (1024, PixelFormat::Bgr),
            };
            assert_eq!((m.tile_size, m.input_format), (tile, fmt), "{}", m.id);
        }
        // builtin mocks never touch the cache dir
        for m in r.models() {
            r.resolve::<f64>(m).unwrap();
        }
        assert!(!Path::new("/nonexistent").exists());
    }

    #[test]
    fn manifest_round_trips() {
        let r = ModelRegistry::from_manifest_str(BUILTIN_MANIFEST, PathBuf::new()).unwrap();
        let again =
            ModelRegistry::from_manifest_str(&r.to_manifest_string(), PathBuf::new()).unwrap();
        assert_eq!(r.models(), again.models());
    }

    #[test]
    fn duplicate_ids_and_bad_descriptors_are_rejected() {
        let first = BUILTIN_MANIFEST.split("[[model]]").nth(1).unwrap();
        let dup = format!("{BUILTIN_MANIFEST}\n[[model]]{first}");
        assert!(ModelRegistry::from_manifest_str(&dup, PathBuf::new()).is_err());
        let bad = BUILTIN_MANIFEST.replacen("tile_size = 1024", "tile_size = 0", 1);
        assert!(matches!(
            ModelRegistry::from_manifest_str(&bad, PathBuf::new()),
            Err(RegistryError::InvalidDescriptor(_))
        ));
        assert!(matches!(
            ModelRegistry::builtin().resolve_id::<f64>("nope"),
            Err(RegistryError::UnknownModel(_))
        ));
    }

    #[test]
    fn local_mock_graph_loads_and_foreign_graphs_do_not() {
        let dir = tempfile::tempdir().unwrap();
        let graph = dir.path().join("m.json");
        std::fs::write(&graph, r#"{"format":"scopeloop-mock-graph","mock":"marker"}"#).unwrap();
        let onnx = dir.path().join("m.onnx");
        std::fs::write(&onnx, [0x08, 0x07, 0x12, 0x00]).unwrap();
        let desc = |path: PathBuf| ModelDescriptor {
            id: "local".into(),
            task: Task::Detection,
            tile_size: 512,
            input_format: PixelFormat::Rgb,
            source: ModelSource::LocalFile { path },
        };
        let b = ModelRegistry::builtin().resolve::<f64>(&desc(graph.clone())).unwrap();
        assert_eq!(b.descriptor().source, ModelSource::LocalFile { path: graph });
        assert!(matches!(
            ModelRegistry::builtin().resolve::<f64>(&desc(onnx)),
            Err(RegistryError::UnsupportedGraph { .. })
        ));
    }

    #[test]
    fn malformed_sha_is_rejected_before_network() {
        let r = ModelRegistry::new(vec![], PathBuf::from("/nonexistent")).unwrap();
        assert!(matches!(
            r.fetch("http://127.0.0.1:1/x", "abc"),
            Err(RegistryError::InvalidDescriptor(_))
        ));
    }
}
