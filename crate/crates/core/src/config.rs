//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Every recognised key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("workers", "0"),
    // artifacts
    ("dataset", "dataset.emb"),
    ("partitions_dir", "partitions"),
    ("tasks", "tasks.txt"),
    ("checkpoint", "model.cmp"),
    ("init_checkpoint", ""),
    ("train_log", "train_log.csv"),
    ("report", "report.csv"),
    ("cluster_partition", ""),
    // synthesis
    ("num_classes", "40"),
    ("per_class", "100"),
    ("d_in", "128"),
    ("d_z", "4"),
    ("noise", "0.7"),
    ("emb_noise", "0.1"),
    ("center_scale", "1.0"),
    ("split", "class"),
    ("split_classes", "30,0,10"),
    ("split_fractions", "0.8,0.1,0.1"),
    ("pca_dims", "0"),
    ("pca_fit", "meta-train"),
    // partitions
    ("method", "kmeans"),
    ("partitions", "10"),
    ("k", "30"),
    ("scaling", "random"),
    ("kmeans_init", "random"),
    ("kmeans_max_iter", "300"),
    ("margin", "0.0"),
    ("hyperplane_pool", "1000"),
    ("retry_cap", "100"),
    // tasks
    ("way", "5"),
    ("shots", "1"),
    ("queries", "5"),
    ("num_tasks", "500"),
    ("task_split", "meta-test"),
    ("repr", "raw"),
    ("mix_ratio", "1.0"),
    // meta-training
    ("learner", "maml"),
    ("outer_lr", "0.001"),
    ("inner_lr", "0.05"),
    ("task_batch_size", "8"),
    ("inner_steps", "5"),
    ("adapt_steps", "50"),
    ("iterations", "2000"),
    ("train_queries", "5"),
    ("first_order", "false"),
    ("hidden", "64,64"),
    ("val_every", "0"),
    // evaluation
    ("eval_learner", "maml"),
    ("knn_k", "0"),
    ("linear_l2", "0.001"),
    ("linear_max_iter", "2000"),
    ("mlp_hidden", "128"),
    ("mlp_dropout", "0.5"),
    ("mlp_lr", "0.01"),
    ("mlp_steps", "200"),
];

const PATH_KEYS: &[&str] = &[
    "dataset",
    "partitions_dir",
    "tasks",
    "checkpoint",
    "init_checkpoint",
    "train_log",
    "report",
    "cluster_partition",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `--key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for a in args {
            let a = a.as_ref();
            let body = a
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("override `{a}` must look like --key=value")))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{a}` must look like --key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn str(&self, key: &str) -> &str {
        debug_assert!(known(key), "{key}");
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("cannot parse `{key}` = `{raw}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.str(key);
        if raw.is_empty() {
            return Ok(vec![]);
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse `{key}` = `{raw}`")))
            })
            .collect()
    }

    /// Path-valued key resolved against the config directory; `None` when empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.str(key);
        if raw.is_empty() {
            return None;
        }
        let p = Path::new(raw);
        Some(if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) })
    }

    /// Checks that every value parses as its key's type.
    pub fn validate(&self) -> Result<()> {
        for (k, _) in KEYS {
            if PATH_KEYS.contains(k) {
                continue;
            }
            let v = self.str(k);
            let ok = match *k {
                "seed" | "workers" | "num_classes" | "per_class" | "d_in" | "d_z" | "pca_dims" | "partitions" | "k"
                | "kmeans_max_iter" | "hyperplane_pool" | "retry_cap" | "way" | "shots" | "queries" | "num_tasks"
                | "task_batch_size" | "inner_steps" | "adapt_steps" | "iterations" | "train_queries" | "val_every"
                | "knn_k" | "linear_max_iter" | "mlp_hidden" | "mlp_steps" => v.parse::<u64>().is_ok(),
                "noise" | "emb_noise" | "center_scale" | "margin" | "mix_ratio" | "outer_lr" | "inner_lr"
                | "linear_l2" | "mlp_dropout" | "mlp_lr" => v.parse::<f64>().map_or(false, f64::is_finite),
                "first_order" => v.parse::<bool>().is_ok(),
                "hidden" | "split_classes" => self.list::<usize>(k).is_ok(),
                "split_fractions" => self.list::<f64>(k).is_ok(),
                _ => true,
            };
            if !ok {
                return Err(Error::Config(format!("invalid value `{v}` for `{k}`")));
            }
        }
        Ok(())
    }

    /// The full effective configuration, one `key=value` per entry, sorted by key.
    pub fn echo(&self) -> Vec<String> {
        let mut out = vec![format!("version={VERSION}")];
        out.extend(self.values.iter().map(|(k, v)| format!("config {k}={v}")));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut c = RunConfig::parse("seed = 4 # comment\n\nway=3\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 4);
        c.apply_overrides(&["--way=7"]).unwrap();
        assert_eq!(c.get::<usize>("way").unwrap(), 7);
        assert_eq!(c.list::<usize>("hidden").unwrap(), vec![64, 64]);
        assert!(c.echo().contains(&"config way=7".to_string()));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::parse("bogus=1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("seed").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["seed=1"]).is_err());
        c.set("noise", "abc").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn paths_resolve_against_base() {
        let c = RunConfig::parse("dataset=d.emb").unwrap().with_base_dir("/tmp/x");
        assert_eq!(c.path("dataset").unwrap(), PathBuf::from("/tmp/x/d.emb"));
        assert!(c.path("init_checkpoint").is_none());
    }
}
