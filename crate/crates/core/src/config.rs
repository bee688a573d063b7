//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Everything a run needs besides the input files themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub normalization: Normalization,
    pub data_train: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub out: PathBuf,
    /// Rows drawn (stratified) from the training file before the validation
    /// carve-out; `None` uses the whole file.
    pub subset: Option<usize>,
    /// Validation rows carved from the training pool; `None` means
    /// `val_fraction` of it.
    pub val_size: Option<usize>,
    pub val_fraction: f64,
    /// Rows drawn (stratified) from the test file; `None` uses all of it.
    pub test_subset: Option<usize>,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            normalization: Normalization::PerFeature,
            data_train: None,
            data_test: None,
            out: PathBuf::from("run"),
            subset: None,
            val_size: None,
            val_fraction: 0.1,
            test_subset: None,
            split_seed: 0,
        }
    }
}

fn opt_usize(key: &str, v: &str) -> std::result::Result<Option<usize>, String> {
    if v == "none" {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (v != "none").then(|| PathBuf::from(v))
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// The small verification model with dropout off.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig {
                dropout: 0.0,
                ..ModelConfig::tiny()
            },
            ..Self::default()
        }
    }

    /// Seeds model init, shuffling/dropout and data splits from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.split_seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        match key {
            "normalization" => self.normalization = value.parse()?,
            "data_train" => self.data_train = opt_path(value),
            "data_test" => self.data_test = opt_path(value),
            "out" => self.out = PathBuf::from(value),
            "subset" => self.subset = opt_usize(key, value)?,
            "val_size" => self.val_size = opt_usize(key, value)?,
            "val_fraction" => {
                self.val_fraction = value.parse().map_err(|_| format!("{key}: cannot parse '{value}'"))?
            }
            "test_subset" => self.test_subset = opt_usize(key, value)?,
            "split_seed" => {
                self.split_seed = value.parse().map_err(|_| format!("{key}: cannot parse '{value}'"))?
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Applies every line of `text` on top of `self`, collecting all problems.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                None => errs.push(format!("line {}: expected 'key = value'", i + 1)),
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim()) {
                        errs.push(format!("line {}: {e}", i + 1));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn from_file(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = base;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Checks every section and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.model.validate(), self.train.validate()] {
            match r {
                Err(Error::Config(v)) => errs.extend(v),
                Err(e) => errs.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            errs.push(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.model.input_len != crate::data::BEAT_LEN {
            errs.push(format!("input_len must be {} for beat records", crate::data::BEAT_LEN));
        }
        if self.model.n_classes != crate::data::NUM_CLASSES {
            errs.push(format!("n_classes must be {}", crate::data::NUM_CLASSES));
        }
        if let Some(n) = self.subset {
            if n < 10 {
                errs.push(format!("subset must be at least 10, got {n}"));
            }
            if let Some(v) = self.val_size {
                if v >= n {
                    errs.push(format!("val_size {v} must be smaller than subset {n}"));
                }
            }
        }
        if matches!(self.val_size, Some(0)) {
            errs.push("val_size must be positive".into());
        }
        if matches!(self.test_subset, Some(n) if n < 5) {
            errs.push("test_subset must be at least 5".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        kv.extend([
            ("normalization", self.normalization.as_str().to_string()),
            ("data_train", show_path(&self.data_train)),
            ("data_test", show_path(&self.data_test)),
            ("out", self.out.display().to_string()),
            ("subset", show_opt(&self.subset)),
            ("val_size", show_opt(&self.val_size)),
            ("val_fraction", self.val_fraction.to_string()),
            ("test_subset", show_opt(&self.test_subset)),
            ("split_seed", self.split_seed.to_string()),
        ]);
        kv
    }

    /// Text that `apply_text` turns back into exactly this config.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in self.to_kv() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::tiny();
        cfg.set_seed(9);
        cfg.subset = Some(300);
        cfg.data_train = Some("a/train.csv".into());
        cfg.train.class_weights = Some(vec![1.0, 2.0, 1.0, 3.0, 1.0]);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\n\nepochs = 3   # short run\n d_model=32\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.d_model, 32);
    }

    #[test]
    fn all_parse_errors_listed() {
        let mut cfg = RunConfig::default();
        match cfg.apply_text("epochs = x\nbogus = 1\nno equals here\nheads = 2\n") {
            Err(Error::Config(v)) => {
                assert_eq!(v.len(), 3, "{v:?}");
                assert!(v[0].starts_with("line 1") && v[1].contains("bogus") && v[2].starts_with("line 3"));
            }
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn all_violations_listed() {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 0;
        cfg.train.batch_size = 0;
        cfg.val_fraction = 1.5;
        cfg.subset = Some(100);
        cfg.val_size = Some(100);
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn seed_sets_every_stream() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(42);
        assert_eq!((cfg.model.seed, cfg.train.seed, cfg.split_seed), (42, 42, 42));
    }
}
