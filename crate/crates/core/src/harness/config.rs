//! Training configuration and its text format.
//!
//! ```text
//! # comment
//! [model]
//! preset = Nano          # or a full spec: name, channels, stage1..stage4,
//!                        # num_classes, resolution (these also override a preset)
//! [optim]
//! lr = 0.001
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! weight_decay = 0.05
//! [train]
//! batch_size = 32
//! steps = 2000
//! seed = 0
//! [data]
//! seed = 0
//! n_samples = 2000
//! resolution = 32        # defaults to the model resolution
//! [output]
//! checkpoint = model.vcmb
//! log = train.csv
//! ```
//!
//! Blank lines and lines starting with `#` are ignored; a `#` preceded by
//! whitespace starts a trailing comment. Relative output paths are resolved
//! against the directory of the config file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::dataset::DatasetConfig;
use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub data: DatasetConfig,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainConfig {
    /// Nano model on the toy dataset with the default optimizer settings.
    pub fn nano(steps: usize, seed: u64, out_dir: &Path) -> Self {
        Self {
            model: ModelSpec::nano(),
            optim: AdamWConfig::default(),
            batch_size: 32,
            steps,
            seed,
            data: DatasetConfig {
                seed,
                n_samples: 2000,
                resolution: 32,
            },
            checkpoint: out_dir.join("model.vcmb"),
            log: out_dir.join("train.csv"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if let Err(Error::InvalidSpec(errs)) = self.model.validate() {
            v.extend(errs.into_iter().map(|e| format!("model: {e}")));
        }
        v.extend(self.optim.violations());
        if self.batch_size == 0 {
            v.push("train.batch_size must be >= 1".into());
        }
        if self.steps == 0 {
            v.push("train.steps must be >= 1".into());
        }
        if self.data.n_samples < self.batch_size {
            v.push(format!(
                "data.n_samples ({}) must be >= train.batch_size ({})",
                self.data.n_samples, self.batch_size
            ));
        }
        if self.data.resolution == 0 || self.data.resolution % 32 != 0 {
            v.push(format!(
                "data.resolution ({}) must be a positive multiple of 32",
                self.data.resolution
            ));
        }
        if self.model.num_classes != super::dataset::NUM_CLASSES {
            v.push(format!(
                "model.num_classes ({}) must equal the dataset's {} classes",
                self.model.num_classes,
                super::dataset::NUM_CLASSES
            ));
        }
        for (k, p) in [("checkpoint", &self.checkpoint), ("log", &self.log)] {
            if p.as_os_str().is_empty() {
                v.push(format!("output.{k} must not be empty"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(v))
        }
    }

    /// Parses config text; `origin` names the file in errors and anchors
    /// relative output paths.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Config {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut section = String::new();
        let mut model_pairs: Vec<(String, String, usize)> = Vec::new();
        let mut optim = AdamWConfig::default();
        let (mut batch_size, mut steps, mut seed) = (32usize, 1000usize, 0u64);
        let mut data_seed = None;
        let mut n_samples = 2000usize;
        let mut resolution = None;
        let mut checkpoint = PathBuf::from("model.vcmb");
        let mut log = PathBuf::from("train.csv");

        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["model", "optim", "train", "data", "output"].contains(&section.as_str()) {
                    return Err(err(ln, format!("unknown section [{section}]")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(ln, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            fn num<T: FromStr>(v: &str, k: &str, ln: usize, err: &dyn Fn(usize, String) -> Error) -> Result<T> {
                v.parse().map_err(|_| err(ln, format!("invalid value `{v}` for `{k}`")))
            }
            match (section.as_str(), k) {
                ("model", _) => model_pairs.push((k.to_string(), v.to_string(), ln)),
                ("optim", "lr") => optim.lr = num(v, k, ln, &err)?,
                ("optim", "beta1") => optim.beta1 = num(v, k, ln, &err)?,
                ("optim", "beta2") => optim.beta2 = num(v, k, ln, &err)?,
                ("optim", "eps") => optim.eps = num(v, k, ln, &err)?,
                ("optim", "weight_decay") => optim.weight_decay = num(v, k, ln, &err)?,
                ("train", "batch_size") => batch_size = num(v, k, ln, &err)?,
                ("train", "steps") => steps = num(v, k, ln, &err)?,
                ("train", "seed") => seed = num(v, k, ln, &err)?,
                ("data", "seed") => data_seed = Some(num(v, k, ln, &err)?),
                ("data", "n_samples") => n_samples = num(v, k, ln, &err)?,
                ("data", "resolution") => resolution = Some(num(v, k, ln, &err)?),
                ("output", "checkpoint") => checkpoint = PathBuf::from(v),
                ("output", "log") => log = PathBuf::from(v),
                ("", _) => return Err(err(ln, format!("key `{k}` appears before any section"))),
                (s, _) => return Err(err(ln, format!("unknown key `{k}` in [{s}]"))),
            }
        }

        let first_line = model_pairs.first().map_or(0, |p| p.2);
        let model = if model_pairs.is_empty() {
            ModelSpec::nano()
        } else {
            ModelSpec::from_pairs(model_pairs.iter().map(|(k, v, _)| (k.as_str(), v.as_str())))
                .map_err(|e| err(first_line, e.to_string()))?
        };
        let base = origin.parent().unwrap_or(Path::new(""));
        let anchor = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
        let cfg = Self {
            data: DatasetConfig {
                seed: data_seed.unwrap_or(seed),
                n_samples,
                resolution: resolution.unwrap_or(model.input_resolution),
            },
            model,
            optim,
            batch_size,
            steps,
            seed,
            checkpoint: anchor(checkpoint),
            log: anchor(log),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// Config text that parses back to `self` (with paths written as given).
    pub fn to_text(&self) -> String {
        let mut s = String::from("[model]\n");
        s += &self.model.to_text();
        s += &format!(
            "\n[optim]\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\n",
            self.optim.lr, self.optim.beta1, self.optim.beta2, self.optim.eps, self.optim.weight_decay
        );
        s += &format!(
            "\n[train]\nbatch_size = {}\nsteps = {}\nseed = {}\n",
            self.batch_size, self.steps, self.seed
        );
        s += &format!(
            "\n[data]\nseed = {}\nn_samples = {}\nresolution = {}\n",
            self.data.seed, self.data.n_samples, self.data.resolution
        );
        s += &format!(
            "\n[output]\ncheckpoint = {}\nlog = {}\n",
            self.checkpoint.display(),
            self.log.display()
        );
        s
    }
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    match line.find(" #").or_else(|| line.find("\t#")) {
        Some(i) => &line[..i],
        None => line,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let text = "# run\n[model]\npreset = Nano\n\n[optim]\nlr = 0.002  # faster\n[train]\nsteps = 5\nbatch_size = 4\n[data]\nn_samples = 8\n[output]\nlog = out/log.csv\n";
        let c = TrainConfig::parse(text, Path::new("/tmp/x/run.cfg")).unwrap();
        assert_eq!(c.optim.lr, 0.002);
        assert_eq!(c.steps, 5);
        assert_eq!(c.data.resolution, 32);
        assert_eq!(c.log, PathBuf::from("/tmp/x/out/log.csv"));
        assert_eq!(c.model, ModelSpec::nano());
    }

    #[test]
    fn roundtrip_text() {
        let c = TrainConfig::nano(10, 3, Path::new("/o"));
        assert_eq!(TrainConfig::parse(&c.to_text(), Path::new("/x/c.cfg")).unwrap(), c);
    }

    #[test]
    fn errors_name_line() {
        match TrainConfig::parse("[train]\nsteps = abc\n", Path::new("c.cfg")) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            TrainConfig::parse("[optim]\nlr = -1\n", Path::new("c.cfg")),
            Err(Error::InvalidSpec(_))
        ));
        assert!(TrainConfig::parse("[bogus]\n", Path::new("c.cfg")).is_err());
    }
}
