//! Flat `key = value` run configuration.
//!
//! A run is described by one text file plus command-line overrides. Every
//! key must be known; `dataset`, `epochs`, `batch_size` and `learning_rate`
//! are required and everything else has a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{load_idx, split, synth_generate, Dataset, SynthFactorSpec};
use crate::error::{Error, Result};
use crate::model::{parse_cov_mode, parse_likelihood, parse_list, ModelConfig};
use crate::trainer::{stream, TrainConfig};

pub const REQUIRED_KEYS: [&str; 4] = ["dataset", "epochs", "batch_size", "learning_rate"];

/// Known optional keys and their defaults.
pub const DEFAULTS: [(&str, &str); 28] = [
    ("data_dir", ""),
    ("mnist_subset", "10000"),
    ("synth_shapes", "4"),
    ("synth_intensities", "3"),
    ("synth_positions", "0"),
    ("synth_side", "16"),
    ("synth_noise", "0.1"),
    ("synth_per_combo", "50"),
    ("train_frac", "0.8"),
    ("seed", "0"),
    ("z_dims", "2,2"),
    ("clusters", "8,6"),
    ("widths", "64,32"),
    ("architecture", "ladder"),
    ("likelihood", "bernoulli"),
    ("sigma", "1"),
    ("cov_mode", "diag"),
    ("pi_trainable", "true"),
    ("fade_in_batches", "500"),
    ("activation", "relu"),
    ("progressive", "true"),
    ("epochs_per_step", "0"),
    ("prior_init", "sampled"),
    ("log_every", "0"),
    ("checkpoint_every", "0"),
    ("facet_labels", "auto"),
    ("probe_seeds", "3"),
    ("out_dir", "runs/latest"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn is_known(key: &str) -> bool {
    REQUIRED_KEYS.contains(&key) || DEFAULTS.iter().any(|(k, _)| *k == key)
}

fn parse_pair(line: &str, origin: &str) -> Result<(String, String)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("{origin}: expected key=value, got '{line}'")))?;
    let (k, v) = (k.trim(), v.trim());
    if !is_known(k) {
        return Err(Error::Config(format!("{origin}: unknown key '{k}'")));
    }
    Ok((k.to_string(), v.to_string()))
}

impl RunConfig {
    /// Parses file text, then applies `overrides` (`key=value`) in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = parse_pair(line, &format!("line {}", n + 1))?;
            values.insert(k, v);
        }
        for o in overrides {
            let (k, v) = parse_pair(o, "override")?;
            values.insert(k, v);
        }
        for key in REQUIRED_KEYS {
            if !values.contains_key(key) {
                return Err(Error::Config(format!("missing required key '{key}'")));
            }
        }
        for (k, v) in DEFAULTS {
            values.entry(k.to_string()).or_insert_with(|| v.to_string());
        }
        let cfg = Self { values };
        cfg.train_config()?;
        cfg.model_config(1)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("'{key}' has invalid value '{}'", self.get(key))))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!(
                "'{key}' must be true or false, got '{v}'"
            ))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.num("epochs")?,
            batch_size: self.num("batch_size")?,
            learning_rate: self.num("learning_rate")?,
            seed: self.seed()?,
            progressive: self.flag("progressive")?,
            epochs_per_step: self.num("epochs_per_step")?,
            log_every: self.num("log_every")?,
            checkpoint_every: self.num("checkpoint_every")?,
            prior_init: self.get("prior_init").parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            input_dim,
            z_dims: parse_list(self.get("z_dims"))?,
            clusters: parse_list(self.get("clusters"))?,
            widths: parse_list(self.get("widths"))?,
            architecture: self.get("architecture").parse()?,
            likelihood: parse_likelihood(self.get("likelihood"), Some(self.get("sigma")))?,
            cov_mode: parse_cov_mode(self.get("cov_mode"))?,
            pi_trainable: self.flag("pi_trainable")?,
            fade_in_batches: self.num("fade_in_batches")?,
            activation: self.get("activation").parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Directory holding MNIST IDX files: `data_dir`, else `$MFC_DATA_DIR`.
    pub fn data_dir(&self) -> Option<PathBuf> {
        match self.get("data_dir") {
            "" => std::env::var_os("MFC_DATA_DIR").map(PathBuf::from),
            d => Some(PathBuf::from(d)),
        }
    }

    pub fn synth_spec(&self) -> Result<SynthFactorSpec> {
        let mut factors = vec![
            ("shape".to_string(), self.num("synth_shapes")?),
            ("intensity".to_string(), self.num("synth_intensities")?),
        ];
        let positions: usize = self.num("synth_positions")?;
        if positions > 0 {
            factors.push(("position".to_string(), positions));
        }
        Ok(SynthFactorSpec {
            factors,
            image_side: self.num("synth_side")?,
            noise_sigma: self.num("synth_noise")?,
            samples_per_combo: self.num("synth_per_combo")?,
        })
    }

    /// Loads (or generates) the dataset and splits it into train and test.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let seed = self.seed()?;
        let full = match self.get("dataset") {
            "synthetic" => synth_generate(&self.synth_spec()?, &mut stream(seed, 0))?,
            "mnist" => {
                let dir = self.data_dir().ok_or_else(|| {
                    Error::Config(
                        "mnist needs data_dir or the MFC_DATA_DIR environment variable".into(),
                    )
                })?;
                let data = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    Some(&dir.join("train-labels-idx1-ubyte")),
                )?;
                match self.num::<usize>("mnist_subset")? {
                    0 => data,
                    n => data.take(n),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset '{other}' (expected synthetic or mnist)"
                )))
            }
        };
        split(&full, self.num("train_frac")?, seed)
    }

    /// Label column per facet. `auto` maps MNIST digits to every facet and,
    /// for synthetic data, intensity to the shallowest facet and shape to the
    /// deepest; `-` leaves a facet unlabelled.
    pub fn facet_labels(&self, num_facets: usize) -> Result<Vec<Option<String>>> {
        let spec = self.get("facet_labels");
        if spec == "auto" {
            return Ok(match (self.get("dataset"), num_facets) {
                ("mnist", j) => vec![Some("label".to_string()); j],
                (_, 1) => vec![Some("shape".to_string())],
                (_, 2) => vec![Some("intensity".to_string()), Some("shape".to_string())],
                (_, j) => {
                    let mut v = vec![None; j];
                    v[0] = Some("intensity".to_string());
                    v[j - 1] = Some("shape".to_string());
                    v
                }
            });
        }
        let names: Vec<Option<String>> = spec
            .split(',')
            .map(|s| s.trim())
            .map(|s| (s != "-" && !s.is_empty()).then(|| s.to_string()))
            .collect();
        if names.len() != num_facets {
            return Err(Error::Config(format!(
                "facet_labels lists {} entries for {num_facets} facets",
                names.len()
            )));
        }
        Ok(names)
    }

    /// Resolved configuration as sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
