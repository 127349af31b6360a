//! INI run configuration: every pipeline knob in one file, with flag overrides.
//!
//! Sections and keys:
//!
//! ```ini
//! [phantom]  shape, spacing, background, bone, nerve, nerve_radius,
//!            bone_size, bone_count, nerve_count, nerve_segments, cases, seed
//! [model]    in_channels, out_channels, levels, base_channels, convs_per_level, growth
//! [train]    lr, batch_size, patch, stride, total_epochs, iterations_per_epoch,
//!            validation_interval, validation_cases, switch_epoch, early_weights,
//!            late_weights, reduction, augment_validation, seed
//! [augment]  noise_sigma, flip_prob, jitter_mm
//! [split]    test_fraction, folds, fold, seed
//! [paths]    data, out
//! ```
//!
//! Triples are written `d,h,w`; bands are `mean,sigma`; ranges are `min,max`.
//! When `switch_epoch` is absent it is placed at 40% of `total_epochs`.

use std::path::PathBuf;
use std::str::FromStr;

use ctseg::objective::{ClassWeights, Reduction, WeightSchedule};
use ctseg::phantom::{Band, PhantomConfig};
use ctseg::pipeline::{SplitSpec, TrainConfig};
use ctseg::volgrid::Spacing;
use ini::Ini;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub cases: usize,
    pub train: TrainConfig,
    /// Explicit weight switch epoch; `None` scales it to the run length.
    pub switch_epoch: Option<usize>,
    pub split: SplitSpec,
    pub fold: usize,
    pub split_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom: PhantomConfig::default(),
            cases: 50,
            train: TrainConfig::default(),
            switch_epoch: None,
            split: SplitSpec::default(),
            fold: 0,
            split_seed: 0,
            data_dir: None,
            out_dir: None,
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    (
        "phantom",
        &[
            "shape",
            "spacing",
            "background",
            "bone",
            "nerve",
            "nerve_radius",
            "bone_size",
            "bone_count",
            "nerve_count",
            "nerve_segments",
            "cases",
            "seed",
        ],
    ),
    ("model", &["in_channels", "out_channels", "levels", "base_channels", "convs_per_level", "growth"]),
    (
        "train",
        &[
            "lr",
            "batch_size",
            "patch",
            "stride",
            "total_epochs",
            "iterations_per_epoch",
            "validation_interval",
            "validation_cases",
            "switch_epoch",
            "early_weights",
            "late_weights",
            "reduction",
            "augment_validation",
            "seed",
        ],
    ),
    ("augment", &["noise_sigma", "flip_prob", "jitter_mm"]),
    ("split", &["test_fraction", "folds", "fold", "seed"]),
    ("paths", &["data", "out"]),
];

fn bad(section: &str, key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("[{section}] {key} = {value:?}: {why}"))
}

fn scalar<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| bad(section, key, v, e))
}

fn list<T: FromStr, const N: usize>(section: &str, key: &str, v: &str) -> Result<[T; N], CliError>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != N {
        return Err(bad(section, key, v, format!("expected {N} comma-separated values")));
    }
    let vals = parts
        .iter()
        .map(|p| scalar::<T>(section, key, p))
        .collect::<Result<Vec<T>, _>>()?;
    vals.try_into().map_err(|_| bad(section, key, v, "wrong arity"))
}

fn join<T: std::fmt::Display>(vals: &[T]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn weights(section: &str, key: &str, v: &str) -> Result<ClassWeights, CliError> {
    let [a, b, c] = list::<f64, 3>(section, key, v)?;
    ClassWeights::new(a, b, c).map_err(|e| bad(section, key, v, e))
}

impl RunConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), CliError> {
        let p = &mut self.phantom;
        let t = &mut self.train;
        match (section, key) {
            ("phantom", "shape") => p.shape = list(section, key, v)?,
            ("phantom", "spacing") => p.spacing = Spacing::from_array(list(section, key, v)?),
            ("phantom", "background" | "bone" | "nerve") => {
                let [mean, sigma] = list::<f32, 2>(section, key, v)?;
                let band = Band { mean, sigma };
                match key {
                    "background" => p.background = band,
                    "bone" => p.bone = band,
                    _ => p.nerve = band,
                }
            }
            ("phantom", "nerve_radius") => p.nerve_radius = list::<f32, 2>(section, key, v)?.into(),
            ("phantom", "bone_size") => p.bone_size = list::<usize, 2>(section, key, v)?.into(),
            ("phantom", "bone_count") => p.bone_count = list::<usize, 2>(section, key, v)?.into(),
            ("phantom", "nerve_count") => p.nerve_count = list::<usize, 2>(section, key, v)?.into(),
            ("phantom", "nerve_segments") => p.nerve_segments = scalar(section, key, v)?,
            ("phantom", "cases") => self.cases = scalar(section, key, v)?,
            ("phantom", "seed") => p.seed = scalar(section, key, v)?,
            ("model", "in_channels") => t.model.in_channels = scalar(section, key, v)?,
            ("model", "out_channels") => t.model.out_channels = scalar(section, key, v)?,
            ("model", "levels") => t.model.levels = scalar(section, key, v)?,
            ("model", "base_channels") => t.model.base_channels = scalar(section, key, v)?,
            ("model", "convs_per_level") => t.model.convs_per_level = scalar(section, key, v)?,
            ("model", "growth") => t.model.growth = scalar(section, key, v)?,
            ("train", "lr") => t.lr = scalar(section, key, v)?,
            ("train", "batch_size") => t.batch_size = scalar(section, key, v)?,
            ("train", "patch") => t.patch = list(section, key, v)?,
            ("train", "stride") => t.stride = list(section, key, v)?,
            ("train", "total_epochs") => t.total_epochs = scalar(section, key, v)?,
            ("train", "iterations_per_epoch") => t.iterations_per_epoch = scalar(section, key, v)?,
            ("train", "validation_interval") => t.validation_interval = scalar(section, key, v)?,
            ("train", "validation_cases") => t.validation_cases = scalar(section, key, v)?,
            ("train", "switch_epoch") => self.switch_epoch = Some(scalar(section, key, v)?),
            ("train", "early_weights") => t.schedule.early = weights(section, key, v)?,
            ("train", "late_weights") => t.schedule.late = weights(section, key, v)?,
            ("train", "reduction") => {
                t.reduction = match v.trim() {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => return Err(bad(section, key, v, "expected `sum` or `mean`")),
                }
            }
            ("train", "augment_validation") => t.augment_validation = scalar(section, key, v)?,
            ("train", "seed") => t.seed = scalar(section, key, v)?,
            ("augment", "noise_sigma") => t.augment.noise_sigma = scalar(section, key, v)?,
            ("augment", "flip_prob") => t.augment.flip_prob = scalar(section, key, v)?,
            ("augment", "jitter_mm") => t.augment.jitter_mm = scalar(section, key, v)?,
            ("split", "test_fraction") => self.split.test_fraction = scalar(section, key, v)?,
            ("split", "folds") => self.split.folds = scalar(section, key, v)?,
            ("split", "fold") => self.fold = scalar(section, key, v)?,
            ("split", "seed") => self.split_seed = scalar(section, key, v)?,
            ("paths", "data") => self.data_dir = Some(PathBuf::from(v.trim())),
            ("paths", "out") => self.out_dir = Some(PathBuf::from(v.trim())),
            _ => return Err(CliError::Config(format!("unknown setting [{section}] {key}"))),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn set_dotted(&mut self, assignment: &str) -> Result<(), CliError> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not section.key=value")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not section.key=value")))?;
        self.set(section.trim(), key.trim(), value)
    }

    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(format!("config syntax: {e}")))?;
        let mut cfg = RunConfig::default();
        for (section, props) in &ini {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(CliError::Config(format!("setting {k:?} outside any section")));
                }
                continue;
            };
            if !KEYS.iter().any(|(s, _)| *s == section) {
                return Err(CliError::Config(format!("unknown section [{section}]")));
            }
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Every setting as `(section, key, value)`, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let p = &self.phantom;
        let t = &self.train;
        let s = &t.schedule;
        let w = |c: &ClassWeights| join(&c.as_array());
        let mut out = vec![
            ("phantom", "shape", join(&p.shape)),
            ("phantom", "spacing", join(&p.spacing.as_array())),
            ("phantom", "background", join(&[p.background.mean, p.background.sigma])),
            ("phantom", "bone", join(&[p.bone.mean, p.bone.sigma])),
            ("phantom", "nerve", join(&[p.nerve.mean, p.nerve.sigma])),
            ("phantom", "nerve_radius", join(&[p.nerve_radius.0, p.nerve_radius.1])),
            ("phantom", "bone_size", join(&[p.bone_size.0, p.bone_size.1])),
            ("phantom", "bone_count", join(&[p.bone_count.0, p.bone_count.1])),
            ("phantom", "nerve_count", join(&[p.nerve_count.0, p.nerve_count.1])),
            ("phantom", "nerve_segments", p.nerve_segments.to_string()),
            ("phantom", "cases", self.cases.to_string()),
            ("phantom", "seed", p.seed.to_string()),
            ("model", "in_channels", t.model.in_channels.to_string()),
            ("model", "out_channels", t.model.out_channels.to_string()),
            ("model", "levels", t.model.levels.to_string()),
            ("model", "base_channels", t.model.base_channels.to_string()),
            ("model", "convs_per_level", t.model.convs_per_level.to_string()),
            ("model", "growth", t.model.growth.to_string()),
            ("train", "lr", t.lr.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "patch", join(&t.patch)),
            ("train", "stride", join(&t.stride)),
            ("train", "total_epochs", t.total_epochs.to_string()),
            ("train", "iterations_per_epoch", t.iterations_per_epoch.to_string()),
            ("train", "validation_interval", t.validation_interval.to_string()),
            ("train", "validation_cases", t.validation_cases.to_string()),
        ];
        if let Some(e) = self.switch_epoch {
            out.push(("train", "switch_epoch", e.to_string()));
        }
        out.extend([
            ("train", "early_weights", w(&s.early)),
            ("train", "late_weights", w(&s.late)),
            (
                "train",
                "reduction",
                match t.reduction {
                    Reduction::Sum => "sum".into(),
                    Reduction::Mean => "mean".into(),
                },
            ),
            ("train", "augment_validation", t.augment_validation.to_string()),
            ("train", "seed", t.seed.to_string()),
            ("augment", "noise_sigma", t.augment.noise_sigma.to_string()),
            ("augment", "flip_prob", t.augment.flip_prob.to_string()),
            ("augment", "jitter_mm", t.augment.jitter_mm.to_string()),
            ("split", "test_fraction", self.split.test_fraction.to_string()),
            ("split", "folds", self.split.folds.to_string()),
            ("split", "fold", self.fold.to_string()),
            ("split", "seed", self.split_seed.to_string()),
        ]);
        if let Some(d) = &self.data_dir {
            out.push(("paths", "data", d.display().to_string()));
        }
        if let Some(d) = &self.out_dir {
            out.push(("paths", "out", d.display().to_string()));
        }
        out
    }

    pub fn dump(&self) -> String {
        let mut ini = Ini::new();
        for (section, key, value) in self.entries() {
            ini.with_section(Some(section)).set(key, value);
        }
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is UTF-8")
    }

    /// The training configuration with the weight schedule sized to the run.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut t = self.train.clone();
        let scaled = WeightSchedule::scaled_to(t.total_epochs).map_err(|e| CliError::Config(e.to_string()))?;
        t.schedule = WeightSchedule {
            switch_epoch: self.switch_epoch.unwrap_or(scaled.switch_epoch),
            total_epochs: t.total_epochs,
            ..t.schedule
        };
        t.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(t)
    }

    pub fn phantom_config(&self) -> Result<PhantomConfig, CliError> {
        self.phantom.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.cases == 0 {
            return Err(CliError::Config("[phantom] cases must be >= 1".into()));
        }
        Ok(self.phantom)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.phantom_config()?;
        self.train_config()?;
        if self.fold >= self.split.folds {
            return Err(CliError::Config(format!(
                "[split] fold {} outside 0..{}",
                self.fold, self.split.folds
            )));
        }
        Ok(())
    }
}
