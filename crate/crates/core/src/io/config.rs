//! Flat `key = value` configuration files and run manifests.
//!
//! Keys (all optional):
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `aggregation` | `max` or `avg` | `max` |
//! | `avg_k` | k for `avg` | 5 |
//! | `assignment` | `stable` or `argmax` | `stable` |
//! | `delta` | score threshold | 0 |
//! | `appearance` | appearance bonus on/off | false |
//! | `beta` | weight-adapter input scale | 10 |
//! | `alpha` | CLIP-adapter blend ratio | 0.6 |
//! | `temperature`, `learning_rate`, `batch_size`, `epochs`, `dropout` | training | per adapter kind |
//! | `seed` | generator and training seed | 0 |
//! | `num_instances`, `templates_per_instance`, `dim`, `sigma`, `distractors`, `confusable_fraction`, `nuisance_fraction`, `scenes`, `instances_per_scene`, `grid_size`, `image_size` | synthetic data | see `SynthConfig` |
//!
//! Manifests add `templates`, `queries` and `params` paths, resolved
//! relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapter::{AdapterKind, ClipAdapterConfig, WeightAdapterConfig, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{NidsError, Result};
use crate::eval::synth::SynthConfig;
use crate::matcher::{Aggregation, AssignmentMode, MatcherConfig, DEFAULT_AVG_K};
use crate::trainer::{TrainConfig, DEFAULT_TEMPERATURE};

/// Parses `key = value` lines; `#` starts a comment line. Keys must be unique.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(NidsError::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(NidsError::Parse { line: i + 1, msg: "empty key".into() });
        }
        if out.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(NidsError::Parse { line: i + 1, msg: format!("duplicate key {k:?}") });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub matcher: MatcherConfig,
    pub beta: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            matcher: MatcherConfig::default(),
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
            temperature: DEFAULT_TEMPERATURE,
            learning_rate: None,
            batch_size: None,
            epochs: None,
            dropout: 0.5,
            seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, line: usize, v: &str) -> Result<T> {
    v.parse().map_err(|_| NidsError::Parse { line, msg: format!("bad value {v:?} for {key}") })
}

fn boolean(key: &str, line: usize, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(NidsError::Parse { line, msg: format!("bad boolean {v:?} for {key}") }),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(parse_kv(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn from_map(map: BTreeMap<String, (usize, String)>) -> Result<Self> {
        let mut c = Config::default();
        let mut avg = false;
        let mut avg_k = DEFAULT_AVG_K;
        for (key, (line, v)) in &map {
            let (line, v) = (*line, v.as_str());
            let s = &mut c.synth;
            match key.as_str() {
                "aggregation" => {
                    avg = match v {
                        "max" => false,
                        "avg" | "avg_top_k" => true,
                        _ => {
                            return Err(NidsError::Parse {
                                line,
                                msg: format!("aggregation must be max or avg, got {v:?}"),
                            })
                        }
                    }
                }
                "avg_k" => avg_k = value(key, line, v)?,
                "assignment" => {
                    c.matcher.assignment = match v {
                        "stable" => AssignmentMode::Stable,
                        "argmax" => AssignmentMode::Argmax,
                        _ => {
                            return Err(NidsError::Parse {
                                line,
                                msg: format!("assignment must be stable or argmax, got {v:?}"),
                            })
                        }
                    }
                }
                "delta" => c.matcher.delta = value(key, line, v)?,
                "appearance" => c.matcher.use_appearance_bonus = boolean(key, line, v)?,
                "beta" => c.beta = value(key, line, v)?,
                "alpha" => c.alpha = value(key, line, v)?,
                "temperature" => c.temperature = value(key, line, v)?,
                "learning_rate" => c.learning_rate = Some(value(key, line, v)?),
                "batch_size" => c.batch_size = Some(value(key, line, v)?),
                "epochs" => c.epochs = Some(value(key, line, v)?),
                "dropout" => c.dropout = value(key, line, v)?,
                "seed" => c.seed = value(key, line, v)?,
                "num_instances" => s.num_instances = value(key, line, v)?,
                "templates_per_instance" => s.templates_per_instance = value(key, line, v)?,
                "dim" => s.dim = value(key, line, v)?,
                "sigma" => s.sigma = value(key, line, v)?,
                "distractors" => s.distractors = value(key, line, v)?,
                "confusable_fraction" => s.confusable_fraction = value(key, line, v)?,
                "nuisance_fraction" => s.nuisance_fraction = value(key, line, v)?,
                "scenes" => s.scenes = value(key, line, v)?,
                "instances_per_scene" => s.instances_per_scene = value(key, line, v)?,
                "grid_size" => s.grid_size = value(key, line, v)?,
                "image_size" => s.image_size = value(key, line, v)?,
                _ => return Err(NidsError::Parse { line, msg: format!("unknown key {key:?}") }),
            }
        }
        c.matcher.aggregation = if avg { Aggregation::AvgTopK(avg_k) } else { Aggregation::Max };
        c.synth.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.matcher.validate()?;
        WeightAdapterConfig::new(self.beta, 4)?;
        ClipAdapterConfig::new(self.alpha, 4)?;
        self.train_config(AdapterKind::Weight).validate()?;
        self.train_config(AdapterKind::Clip).validate()?;
        self.synth.validate()
    }

    /// Adapter scale for `kind`: beta for the weight adapter, alpha for CLIP.
    pub fn scale(&self, kind: AdapterKind) -> f64 {
        match kind {
            AdapterKind::Weight => self.beta,
            AdapterKind::Clip => self.alpha,
        }
    }

    pub fn train_config(&self, kind: AdapterKind) -> TrainConfig {
        let d = TrainConfig::for_kind(kind);
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            temperature: self.temperature,
            dropout_rate: self.dropout,
            seed: self.seed,
        }
    }
}

/// Everything needed to reproduce one matching run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub templates: PathBuf,
    pub queries: PathBuf,
    pub params: Option<PathBuf>,
    pub config: Config,
}

impl RunManifest {
    /// Parses a manifest; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut map = parse_kv(text)?;
        let mut path = |key: &str| map.remove(key).map(|(_, v)| base.join(v));
        let templates = path("templates");
        let queries = path("queries");
        let params = path("params");
        let (Some(templates), Some(queries)) = (templates, queries) else {
            return Err(NidsError::InvalidConfig("manifest needs templates and queries".into()));
        };
        Ok(Self { templates, queries, params, config: Config::from_map(map)? })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&std::fs::read_to_string(path)?, base)?;
        for p in [Some(&m.templates), Some(&m.queries), m.params.as_ref()].into_iter().flatten() {
            if !p.is_file() {
                return Err(NidsError::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} does not exist", p.display()),
                )));
            }
        }
        Ok(m)
    }
}
