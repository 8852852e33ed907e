use std::collections::BTreeMap;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use lru::LruCache;
use serde::Serialize;
use sha2::{Digest, Sha256};

use climprobe::attribution::{Heatmap, Method};
use climprobe::data::{make_samples, DatasetIndex, FieldSeries, SampleWindow};
use climprobe::trainer::Checkpoint;
use climprobe::{CoreError, LandMask, Model64};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// `(lead, checkpoint path)`.
    pub ckpts: Vec<(usize, PathBuf)>,
    /// Dataset index written by `prepare`.
    pub data: PathBuf,
    /// Root of precomputed group reports.
    pub reports: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    pub ui: Option<PathBuf>,
    pub cache_capacity: usize,
    pub budget: Duration,
}

impl ServiceConfig {
    pub fn new(data: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            ckpts: Vec::new(),
            data: data.into(),
            reports: None,
            ui: None,
            cache_capacity: 256,
            budget: Duration::from_secs(60),
        }
    }
}

/// Parse a `lead=path` checkpoint flag.
pub fn parse_ckpt_flag(s: &str) -> Result<(usize, PathBuf), String> {
    let (lead, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected lead=path, got `{s}`"))?;
    let lead = lead
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&l| l > 0)
        .ok_or_else(|| format!("bad lead `{lead}` in `{s}`"))?;
    Ok((lead, PathBuf::from(path)))
}

#[derive(Debug)]
pub enum LoadError {
    Io(PathBuf, std::io::Error),
    Core(PathBuf, CoreError),
    Incompatible(String),
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            LoadError::Core(p, e) => write!(f, "{}: {e}", p.display()),
            LoadError::Incompatible(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for LoadError {}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, LoadError> {
    fs::read(path).map_err(|e| LoadError::Io(path.to_path_buf(), e))
}

/// Content digests of everything the service answers from. Paths are left
/// out so the hash depends only on the data.
#[derive(Clone, Debug, Serialize)]
pub struct ServiceManifest {
    pub checkpoints: BTreeMap<usize, String>,
    pub data_index: String,
    pub series: String,
    pub reports: bool,
}

impl ServiceManifest {
    pub fn of(config: &ServiceConfig) -> Result<Self, LoadError> {
        if config.ckpts.is_empty() {
            return Err(LoadError::Incompatible("no checkpoints given".into()));
        }
        let mut checkpoints = BTreeMap::new();
        for (lead, path) in &config.ckpts {
            if checkpoints.insert(*lead, sha256(&read(path)?)).is_some() {
                return Err(LoadError::Incompatible(format!(
                    "lead {lead} given more than once"
                )));
            }
        }
        let index_bytes = read(&config.data)?;
        let index: DatasetIndex = serde_json::from_slice(&index_bytes)
            .map_err(|e| LoadError::Core(config.data.clone(), CoreError::from(e)))?;
        let series_path = index.series_path(&config.data);
        Ok(ServiceManifest {
            checkpoints,
            data_index: sha256(&index_bytes),
            series: sha256(&read(&series_path)?),
            reports: config.reports.is_some(),
        })
    }

    pub fn hash(&self) -> String {
        sha256(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributionKey {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    pub method: Method,
    pub lead: usize,
    pub baseline: String,
}

/// Immutable state behind every endpoint. The attribution cache is the only
/// synchronized member and never changes response values.
pub struct Session {
    pub manifest_hash: String,
    pub series: FieldSeries,
    pub index: DatasetIndex,
    pub mask: LandMask,
    pub reports: Option<PathBuf>,
    models: BTreeMap<usize, Model64>,
    samples: BTreeMap<usize, Vec<SampleWindow>>,
    cache: Mutex<LruCache<AttributionKey, Arc<Heatmap<f64>>>>,
}

impl Session {
    pub fn load(config: &ServiceConfig, manifest_hash: String) -> Result<Self, LoadError> {
        let index = DatasetIndex::load(&config.data)
            .map_err(|e| LoadError::Core(config.data.clone(), e))?;
        let series_path = index.series_path(&config.data);
        let series = index
            .load_series(&config.data)
            .map_err(|e| LoadError::Core(series_path, e))?;
        let mask = series.mask_or_ocean();
        let mut models = BTreeMap::new();
        let mut samples = BTreeMap::new();
        for (lead, path) in &config.ckpts {
            let ck = Checkpoint::from_bytes(&read(path)?)
                .map_err(|e| LoadError::Core(path.clone(), e))?;
            let arch = ck.model.arch();
            if ck.lead != *lead {
                return Err(LoadError::Incompatible(format!(
                    "{} was trained for lead {}, not {lead}",
                    path.display(),
                    ck.lead
                )));
            }
            if arch.grid != series.grid() || arch.input_months != index.input_months {
                return Err(LoadError::Incompatible(format!(
                    "{} expects {} months on {:?}, dataset has {} months on {:?}",
                    path.display(),
                    arch.input_months,
                    arch.grid,
                    index.input_months,
                    series.grid()
                )));
            }
            let windows = make_samples(&series, *lead, index.input_months)
                .map_err(|e| LoadError::Core(config.data.clone(), e))?;
            samples.insert(*lead, windows);
            models.insert(*lead, ck.model.cast::<f64>());
        }
        let cap = NonZeroUsize::new(config.cache_capacity.max(1)).expect("nonzero");
        Ok(Session {
            manifest_hash,
            series,
            index,
            mask,
            reports: config.reports.clone(),
            models,
            samples,
            cache: Mutex::new(LruCache::new(cap)),
        })
    }

    pub fn leads(&self) -> Vec<usize> {
        self.models.keys().copied().collect()
    }

    pub fn model(&self, lead: usize) -> Option<&Model64> {
        self.models.get(&lead)
    }

    /// Windows of `lead` in chronological order; a sample id indexes this list.
    pub fn samples(&self, lead: usize) -> Option<&[SampleWindow]> {
        self.samples.get(&lead).map(Vec::as_slice)
    }

    pub fn months(&self) -> usize {
        self.index.input_months
    }

    /// Pool for `windows:<k>` baselines: the lead's training windows.
    pub fn baseline_pool(&self, lead: usize) -> &[SampleWindow] {
        self.index
            .lead(lead)
            .map(|l| l.train.as_slice())
            .unwrap_or(&[])
    }

    pub fn cached(&self, key: &AttributionKey) -> Option<Arc<Heatmap<f64>>> {
        self.cache.lock().expect("cache lock").get(key).cloned()
    }

    pub fn store(&self, key: AttributionKey, h: Arc<Heatmap<f64>>) {
        self.cache.lock().expect("cache lock").put(key, h);
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}
