//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use medpt::attention::RpeSet;
use medpt::bench::BenchMode;
use medpt::dataio::{CloudFormat, ShapeKind};
use medpt::mgr::MgrMode;
use medpt::network::{ModelConfig, Task, TrainConfig};

/// A rejected config line or override. `line` is 0 for `--set` overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.msg)
        } else {
            write!(f, "line {}: {}", self.line, self.msg)
        }
    }
}

/// Architecture fields; `None` keeps the value of the task's preset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelOverrides {
    pub num_classes: Option<usize>,
    pub in_features: Option<usize>,
    pub k: Option<usize>,
    pub sample_sizes: Option<Vec<usize>>,
    pub c_k: Option<usize>,
    pub c_v: Option<usize>,
    pub c_h: Option<usize>,
    pub heads: Option<usize>,
    pub depth: Option<usize>,
    pub mgr: Option<MgrMode>,
    pub rpe: Option<RpeSet>,
    pub head_widths: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub test_batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_min: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub augment: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub shapes: Vec<ShapeKind>,
    pub per_class: usize,
    pub count: usize,
    pub n_points: usize,
    pub noise: f64,
    pub format: CloudFormat,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelOverrides,
    pub train: TrainOverrides,
    pub n_list: Vec<usize>,
    pub bench_mode: BenchMode,
    pub runs: usize,
    pub gradcheck_eps: f64,
    pub gradcheck_tol: f64,
    pub gradcheck_points: usize,
    pub gradcheck_clouds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Classify,
            seed: 0,
            shapes: vec![ShapeKind::Sphere, ShapeKind::Torus],
            per_class: 100,
            count: 100,
            n_points: 256,
            noise: 0.01,
            format: CloudFormat::Binary,
            data: None,
            checkpoint: None,
            model: ModelOverrides::default(),
            train: TrainOverrides::default(),
            n_list: vec![256, 512, 1024, 2048],
            bench_mode: BenchMode::Lambda,
            runs: 3,
            gradcheck_eps: 1e-6,
            gradcheck_tol: 1e-5,
            gradcheck_points: 32,
            gradcheck_clouds: 2,
        }
    }
}

/// Every accepted key.
#[cfg(test)]
pub const KEYS: &[&str] = &[
    "task",
    "seed",
    "shapes",
    "per_class",
    "count",
    "n_points",
    "noise",
    "format",
    "data",
    "checkpoint",
    "num_classes",
    "in_features",
    "k",
    "sample_sizes",
    "c_k",
    "c_v",
    "c_h",
    "heads",
    "depth",
    "mgr",
    "rpe",
    "head_widths",
    "epochs",
    "batch_size",
    "test_batch_size",
    "learning_rate",
    "lr_min",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "augment",
    "n_list",
    "mode",
    "runs",
    "gradcheck_eps",
    "gradcheck_tol",
    "gradcheck_points",
    "gradcheck_clouds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("bad value `{value}` for `{key}`: {e}"))
}

/// Comma-separated list; `none` or an empty value is the empty list.
fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    if items.is_empty() {
        return "none".into();
    }
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a config file: UTF-8 `key = value` lines, `#` comment lines
    /// and blank lines. Keys may appear once.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| ConfigError { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            cfg.set(key, value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let err = |msg: String| ConfigError { line: 0, msg };
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| err(format!("override `{pair}` is not `key=value`")))?;
        self.set(key.trim(), value.trim()).map_err(err)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "task" => self.task = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "shapes" => self.shapes = parse_list(key, value)?,
            "per_class" => self.per_class = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "n_points" => self.n_points = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "format" => self.format = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "num_classes" => m.num_classes = Some(parse(key, value)?),
            "in_features" => m.in_features = Some(parse(key, value)?),
            "k" => m.k = Some(parse(key, value)?),
            "sample_sizes" => m.sample_sizes = Some(parse_list(key, value)?),
            "c_k" => m.c_k = Some(parse(key, value)?),
            "c_v" => m.c_v = Some(parse(key, value)?),
            "c_h" => m.c_h = Some(parse(key, value)?),
            "heads" => m.heads = Some(parse(key, value)?),
            "depth" => m.depth = Some(parse(key, value)?),
            "mgr" => m.mgr = Some(parse(key, value)?),
            "rpe" => m.rpe = Some(parse(key, value)?),
            "head_widths" => m.head_widths = Some(parse_list(key, value)?),
            "epochs" => t.epochs = Some(parse(key, value)?),
            "batch_size" => t.batch_size = Some(parse(key, value)?),
            "test_batch_size" => t.test_batch_size = Some(parse(key, value)?),
            "learning_rate" => t.learning_rate = Some(parse(key, value)?),
            "lr_min" => t.lr_min = Some(parse(key, value)?),
            "beta1" => t.beta1 = Some(parse(key, value)?),
            "beta2" => t.beta2 = Some(parse(key, value)?),
            "adam_eps" => t.adam_eps = Some(parse(key, value)?),
            "weight_decay" => t.weight_decay = Some(parse(key, value)?),
            "augment" => t.augment = Some(parse(key, value)?),
            "n_list" => self.n_list = parse_list(key, value)?,
            "mode" => self.bench_mode = parse(key, value)?,
            "runs" => self.runs = parse(key, value)?,
            "gradcheck_eps" => self.gradcheck_eps = parse(key, value)?,
            "gradcheck_tol" => self.gradcheck_tol = parse(key, value)?,
            "gradcheck_points" => self.gradcheck_points = parse(key, value)?,
            "gradcheck_clouds" => self.gradcheck_clouds = parse(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// The architecture preset for the task with every override applied.
    pub fn model_config(&self, base: ModelConfig) -> ModelConfig {
        let o = &self.model;
        let mut c = base;
        c.task = self.task;
        c.num_classes = o.num_classes.unwrap_or(c.num_classes);
        c.in_features = o.in_features.unwrap_or(c.in_features);
        c.k = o.k.unwrap_or(c.k);
        c.sample_sizes = o.sample_sizes.clone().unwrap_or(c.sample_sizes);
        c.c_k = o.c_k.unwrap_or(c.c_k);
        c.c_v = o.c_v.unwrap_or(c.c_v);
        c.c_h = o.c_h.unwrap_or(c.c_h);
        c.heads = o.heads.unwrap_or(c.heads);
        c.depth = o.depth.unwrap_or(c.depth);
        c.mgr_mode = o.mgr.unwrap_or(c.mgr_mode);
        c.rpe = o.rpe.unwrap_or(c.rpe);
        c.head_widths = o.head_widths.clone().unwrap_or(c.head_widths);
        c
    }

    /// Preset of the configured task.
    pub fn model_preset(&self) -> ModelConfig {
        match self.task {
            Task::Classify => ModelConfig::default(),
            Task::Segment => ModelConfig::segmentation(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.train;
        let mut c = match self.task {
            Task::Classify => TrainConfig::default(),
            Task::Segment => TrainConfig::segmentation(),
        };
        c.epochs = o.epochs.unwrap_or(c.epochs);
        c.batch_size = o.batch_size.unwrap_or(c.batch_size);
        c.test_batch_size = o.test_batch_size.unwrap_or(c.test_batch_size);
        c.learning_rate = o.learning_rate.unwrap_or(c.learning_rate);
        c.lr_min = o.lr_min.unwrap_or(c.lr_min);
        c.adam.beta1 = o.beta1.unwrap_or(c.adam.beta1);
        c.adam.beta2 = o.beta2.unwrap_or(c.adam.beta2);
        c.adam.eps = o.adam_eps.unwrap_or(c.adam.eps);
        c.adam.weight_decay = o.weight_decay.unwrap_or(c.adam.weight_decay);
        c.augment = o.augment.unwrap_or(c.augment);
        c.seed = self.seed;
        c
    }

    /// Fully resolved config for a trained model, readable by [`RunConfig::parse`].
    pub fn resolved_text(&self, model: &ModelConfig, train: &TrainConfig) -> String {
        let mut out = String::from("# resolved settings of a training run\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("task", model.task.to_string());
        kv("seed", self.seed.to_string());
        kv("num_classes", model.num_classes.to_string());
        kv("in_features", model.in_features.to_string());
        kv("k", model.k.to_string());
        kv("sample_sizes", join(&model.sample_sizes));
        kv("c_k", model.c_k.to_string());
        kv("c_v", model.c_v.to_string());
        kv("c_h", model.c_h.to_string());
        kv("heads", model.heads.to_string());
        kv("depth", model.depth.to_string());
        kv("mgr", model.mgr_mode.to_string());
        kv("rpe", model.rpe.to_string());
        kv("head_widths", join(&model.head_widths));
        kv("epochs", train.epochs.to_string());
        kv("batch_size", train.batch_size.to_string());
        kv("test_batch_size", train.test_batch_size.to_string());
        kv("learning_rate", format!("{:?}", train.learning_rate));
        kv("lr_min", format!("{:?}", train.lr_min));
        kv("beta1", format!("{:?}", train.adam.beta1));
        kv("beta2", format!("{:?}", train.adam.beta2));
        kv("adam_eps", format!("{:?}", train.adam.eps));
        kv("weight_decay", format!("{:?}", train.adam.weight_decay));
        kv("augment", train.augment.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = RunConfig::parse("# run\n\ntask = segment\nseed=7\nsample_sizes = none\nrpe = qk\nshapes = cube, cylinder\n").unwrap();
        assert_eq!(c.task, Task::Segment);
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.sample_sizes, Some(vec![]));
        assert_eq!(c.model.rpe, Some(RpeSet { query: true, key: true, value: false }));
        assert_eq!(c.shapes, vec![ShapeKind::Cube, ShapeKind::Cylinder]);
    }

    #[test]
    fn unknown_key_names_the_token_and_line() {
        let e = RunConfig::parse("seed = 1\nlearnig_rate = 0.1\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.msg.contains("learnig_rate"), "{e}");
    }

    #[test]
    fn values_are_type_checked() {
        assert_eq!(RunConfig::parse("epochs = ten").unwrap_err().line, 1);
        assert!(RunConfig::parse("augment = maybe").is_err());
        assert!(RunConfig::parse("mgr = triple").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn overrides_win_and_presets_follow_the_task() {
        let mut c = RunConfig::parse("task = segment\nepochs = 3").unwrap();
        c.apply_override("epochs=5").unwrap();
        assert_eq!(c.train_config().epochs, 5);
        assert_eq!(c.train_config().batch_size, TrainConfig::segmentation().batch_size);
        assert_eq!(c.model_config(c.model_preset()).c_v, ModelConfig::segmentation().c_v);
        assert!(c.apply_override("bogus=1").is_err());
        assert!(c.apply_override("epochs").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::parse("task = classify\nrpe = v\nmgr = off\nhead_widths = 8,4\nlearning_rate = 0.003").unwrap();
        c.seed = 12;
        let (m, t) = (c.model_config(c.model_preset()), c.train_config());
        let back = RunConfig::parse(&c.resolved_text(&m, &t)).unwrap();
        assert_eq!(back.model_config(ModelConfig::default()), m);
        assert_eq!(back.train_config(), t);
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let samples = [
            ("task", "classify"),
            ("shapes", "sphere"),
            ("format", "text"),
            ("data", "d"),
            ("checkpoint", "c"),
            ("sample_sizes", "8"),
            ("head_widths", "8"),
            ("n_list", "16,32"),
            ("mgr", "off"),
            ("rpe", "qkv"),
            ("mode", "naive"),
            ("augment", "true"),
        ];
        for key in KEYS {
            let v = samples.iter().find(|(k, _)| k == key).map_or("1", |(_, v)| v);
            RunConfig::default().set(key, v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
