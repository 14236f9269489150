//! Strict TOML experiment configs.
//!
//! Sections: `[model]`, `[stream]`, `[pretrain]`, `[[methods]]`, `[run]`,
//! `[prune]`, `[input]`, `[output]`. Unknown keys anywhere are errors, and
//! every error names its section and key.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::data::{StreamShape, StreamSpec};
use crate::error::{ConfigError, Error, Result};
use crate::harness::{MethodBase, MethodConfig, OptimConfig, PretrainConfig, Protocol, RunConfig};
use crate::model::{ModelSpec, NUM_BLOCKS};
use crate::prune::PruningPlan;

const SECTIONS: [&str; 8] = ["model", "stream", "pretrain", "methods", "run", "prune", "input", "output"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    /// Pretrained checkpoint; `run` pretrains from scratch without one.
    pub checkpoint: Option<PathBuf>,
    /// Records CSV consumed by `curve` and `report`.
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMethod {
    base: String,
    name: Option<String>,
    plan: Option<PruningPlan>,
    first_trainable_block: Option<usize>,
    keep_blocks: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    protocol: Protocol,
    budget_grid: Vec<usize>,
    #[serde(default)]
    eval_every: usize,
    seeds: Vec<u64>,
    /// Names of the methods to run; all when absent.
    methods: Option<Vec<String>>,
    threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub stream_shape: StreamShape,
    pub stream: StreamSpec,
    pub pretrain: PretrainConfig,
    pub methods: Vec<MethodConfig>,
    pub run: Option<RunConfig>,
    pub threads: Option<usize>,
    pub prune: Option<PruningPlan>,
    pub input: InputPaths,
    pub output: OutputPaths,
}

fn backticked(msg: &str, prefix: &str) -> Option<String> {
    let rest = &msg[msg.find(prefix)? + prefix.len()..];
    Some(rest[..rest.find('`')?].to_string())
}

fn classify(section: &str, err: serde_path_to_error::Error<toml::de::Error>) -> ConfigError {
    let key = err.path().to_string();
    let msg = err.inner().message().to_string();
    let section = section.to_string();
    if let Some(key) = backticked(&msg, "unknown field `") {
        ConfigError::UnknownKey { section, key }
    } else if let Some(key) = backticked(&msg, "missing field `") {
        ConfigError::MissingKey { section, key }
    } else {
        ConfigError::TypeMismatch { section, key, reason: msg }
    }
}

fn deserialize<T: DeserializeOwned>(value: &toml::Value, section: &str) -> std::result::Result<T, ConfigError> {
    serde_path_to_error::deserialize(value.clone()).map_err(|e| classify(section, e))
}

fn section<T: DeserializeOwned + Default>(table: &toml::Table, name: &str) -> std::result::Result<T, ConfigError> {
    match table.get(name) {
        None => Ok(T::default()),
        Some(v) => deserialize(v, name),
    }
}

fn invalid(section: &str, key: &str, reason: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        section: section.into(),
        key: key.into(),
        reason: reason.to_string(),
    }
}

fn check_plan(plan: &PruningPlan, section: &str, prefix: &str) -> std::result::Result<(), ConfigError> {
    if !(0.0..1.0).contains(&plan.target) {
        return Err(invalid(section, &format!("{prefix}target"), format!("{} is outside [0, 1)", plan.target)));
    }
    if !(plan.tolerance > 0.0) {
        return Err(invalid(section, &format!("{prefix}tolerance"), "must be positive"));
    }
    Ok(())
}

fn check_optim(o: &OptimConfig, section: &str) -> std::result::Result<(), ConfigError> {
    if !(o.lr > 0.0 && o.lr.is_finite()) {
        return Err(invalid(section, "lr", format!("{} must be positive", o.lr)));
    }
    if !(0.0..1.0).contains(&o.momentum) {
        return Err(invalid(section, "momentum", format!("{} is outside [0, 1)", o.momentum)));
    }
    if o.batch_size == 0 {
        return Err(invalid(section, "batch_size", "must be at least 1"));
    }
    Ok(())
}

fn method(raw: RawMethod, section: &str) -> std::result::Result<MethodConfig, ConfigError> {
    let need = |v: Option<usize>, key: &str| {
        v.ok_or_else(|| ConfigError::MissingKey {
            section: section.into(),
            key: key.into(),
        })
    };
    let base = match raw.base.as_str() {
        "dense_finetune" => MethodBase::DenseFinetune,
        "pruned" => {
            let plan = raw.plan.ok_or_else(|| ConfigError::MissingKey {
                section: section.into(),
                key: "plan".into(),
            })?;
            check_plan(&plan, section, "plan.")?;
            MethodBase::Pruned(plan)
        }
        "ft_block" => {
            let x = need(raw.first_trainable_block, "first_trainable_block")?;
            if x > NUM_BLOCKS {
                return Err(invalid(section, "first_trainable_block", format!("{x} is outside 0..=4")));
            }
            MethodBase::FtBlock(x)
        }
        "block_0toX_ft_all" => {
            let x = need(raw.keep_blocks, "keep_blocks")?;
            if !(1..=NUM_BLOCKS).contains(&x) {
                return Err(invalid(section, "keep_blocks", format!("{x} is outside 1..=4")));
            }
            MethodBase::Truncate(x)
        }
        "adp1x1" => MethodBase::Adapters,
        other => {
            return Err(invalid(
                section,
                "base",
                format!("`{other}` is not one of dense_finetune, pruned, ft_block, block_0toX_ft_all, adp1x1"),
            ))
        }
    };
    let stray = [
        ("plan", raw.plan.is_some() && !matches!(base, MethodBase::Pruned(_))),
        ("first_trainable_block", raw.first_trainable_block.is_some() && !matches!(base, MethodBase::FtBlock(_))),
        ("keep_blocks", raw.keep_blocks.is_some() && !matches!(base, MethodBase::Truncate(_))),
    ];
    if let Some((key, _)) = stray.iter().find(|(_, s)| *s) {
        return Err(invalid(section, key, format!("does not apply to base `{}`", raw.base)));
    }
    let d = OptimConfig::default();
    let optim = OptimConfig {
        lr: raw.lr.unwrap_or(d.lr),
        momentum: raw.momentum.unwrap_or(d.momentum),
        batch_size: raw.batch_size.unwrap_or(d.batch_size),
    };
    check_optim(&optim, section)?;
    Ok(MethodConfig {
        name: raw.name.unwrap_or_else(|| base.default_name()),
        base,
        optim,
    })
}

/// Parses and validates a config document. Relative input paths resolve
/// against `base_dir` and must exist.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    if let Some(key) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(ConfigError::UnknownKey {
            section: "top level".into(),
            key: key.clone(),
        }
        .into());
    }

    let mut model: ModelSpec = section(&table, "model")?;
    let shape: StreamShape = section(&table, "stream")?;
    let pretrain: PretrainConfig = section(&table, "pretrain")?;
    let mut input: InputPaths = section(&table, "input")?;
    let mut output: OutputPaths = section(&table, "output")?;
    if output.dir.is_relative() {
        output.dir = base_dir.join(&output.dir);
    }

    check_optim(&pretrain.optim, "pretrain")?;
    if shape.image_size != model.input_size {
        return Err(invalid(
            "model",
            "input_size",
            format!("{} does not match stream image_size {}", model.input_size, shape.image_size),
        )
        .into());
    }
    if model.input_channels != 1 {
        return Err(invalid("model", "input_channels", "synthetic streams are single-channel").into());
    }
    model.head_classes = shape.pretrain_classes;
    model.validate().map_err(|e| invalid("model", "blocks", e))?;
    let stream = shape.build().map_err(|e| invalid("stream", "", e))?;

    let mut methods = Vec::new();
    if let Some(v) = table.get("methods") {
        let list = v.as_array().ok_or_else(|| ConfigError::TypeMismatch {
            section: "methods".into(),
            key: ".".into(),
            reason: "expected an array of tables ([[methods]])".into(),
        })?;
        let mut names = BTreeSet::new();
        for (i, item) in list.iter().enumerate() {
            let name = format!("methods[{i}]");
            let raw: RawMethod = deserialize(item, &name)?;
            let m = method(raw, &name)?;
            if !names.insert(m.name.clone()) {
                return Err(invalid(&name, "name", format!("duplicate method name `{}`", m.name)).into());
            }
            methods.push(m);
        }
    }

    let prune = match table.get("prune") {
        None => None,
        Some(v) => {
            let plan: PruningPlan = deserialize(v, "prune")?;
            check_plan(&plan, "prune", "")?;
            Some(plan)
        }
    };

    let (run, threads) = match table.get("run") {
        None => (None, None),
        Some(v) => {
            let raw: RawRun = deserialize(v, "run")?;
            if raw.budget_grid.is_empty() || !raw.budget_grid.windows(2).all(|w| w[0] < w[1]) {
                return Err(invalid("run", "budget_grid", "must be non-empty and strictly increasing").into());
            }
            if raw.seeds.is_empty() {
                return Err(invalid("run", "seeds", "at least one seed is required").into());
            }
            if let Some(selected) = &raw.methods {
                for name in selected {
                    if !methods.iter().any(|m| &m.name == name) {
                        return Err(ConfigError::BadReference {
                            section: "run".into(),
                            key: "methods".into(),
                            what: "method".into(),
                            name: name.clone(),
                        }
                        .into());
                    }
                }
                methods.retain(|m| selected.contains(&m.name));
            }
            if raw.threads == Some(0) {
                return Err(invalid("run", "threads", "must be at least 1").into());
            }
            let run = RunConfig {
                protocol: raw.protocol,
                budget_grid: raw.budget_grid,
                eval_every: raw.eval_every,
                seeds: raw.seeds,
            };
            (Some(run), raw.threads)
        }
    };

    for (key, path) in [("checkpoint", &mut input.checkpoint), ("records", &mut input.records)] {
        if let Some(p) = path {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
            if !p.exists() {
                return Err(ConfigError::MissingFile {
                    section: "input".into(),
                    key: key.into(),
                    path: p.display().to_string(),
                }
                .into());
            }
        }
    }

    Ok(ExperimentConfig {
        model,
        stream_shape: shape,
        stream,
        pretrain,
        methods,
        run,
        threads,
        prune,
        input,
        output,
    })
}

impl ExperimentConfig {
    /// Replaces every seed in the config: the stream, pretraining, the
    /// prune plan and the run's seed list.
    pub fn override_seed(&mut self, seed: u64) -> Result<()> {
        self.stream_shape.seed = seed;
        self.stream = self.stream_shape.build()?;
        self.pretrain.seed = seed;
        if let Some(plan) = &mut self.prune {
            plan.seed = seed;
        }
        if let Some(run) = &mut self.run {
            run.seeds = vec![seed];
        }
        Ok(())
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[stream]
n_object = 2
n_nonobject = 1

[[methods]]
base = "dense_finetune"

[[methods]]
base = "pruned"
plan = { granularity = "filter", signal = "magnitude", target = 0.5 }

[run]
protocol = "transfer"
budget_grid = [10, 20]
seeds = [0, 1]
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config_str(text, Path::new("."))
    }

    fn config_err(text: &str) -> ConfigError {
        match parse(text) {
            Err(Error::Config(e)) => e,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.methods.len(), 2);
        assert_eq!(c.methods[1].name, "pruned_filter_magnitude_0.5");
        assert_eq!(c.stream.downstream.len(), 3);
        assert_eq!(c.model.head_classes, 20);
        assert_eq!(c.run.unwrap().seeds, vec![0, 1]);
        assert!(parse("").is_ok());
    }

    #[test]
    fn misspelled_key_named() {
        let e = config_err(&MINIMAL.replace("budget_grid", "budget_gird"));
        assert_eq!(e, ConfigError::UnknownKey { section: "run".into(), key: "budget_gird".into() });
        let e = config_err(&MINIMAL.replace("signal =", "sigal ="));
        assert!(matches!(e, ConfigError::UnknownKey { ref section, ref key } if section == "methods[1]" && key == "sigal"), "{e:?}");
        let e = config_err("[modle]\n");
        assert!(matches!(e, ConfigError::UnknownKey { ref key, .. } if key == "modle"));
    }

    #[test]
    fn error_kinds_are_distinct() {
        let e = config_err(&MINIMAL.replace("seeds = [0, 1]", ""));
        assert_eq!(e, ConfigError::MissingKey { section: "run".into(), key: "seeds".into() });
        let e = config_err(&MINIMAL.replace("seeds = [0, 1]", "seeds = \"zero\""));
        assert!(
            matches!(e, ConfigError::TypeMismatch { ref section, ref key, .. } if section == "run" && key == "seeds"),
            "{e:?}"
        );
        let e = config_err(&MINIMAL.replace("target = 0.5", "target = -0.2"));
        assert!(
            matches!(e, ConfigError::Invalid { ref section, ref key, .. } if section == "methods[1]" && key == "plan.target"),
            "{e:?}"
        );
        let e = config_err(&format!("{MINIMAL}methods = [\"nope\"]\n"));
        assert!(matches!(e, ConfigError::BadReference { ref name, .. } if name == "nope"), "{e:?}");
        let e = config_err("[input]\ncheckpoint = \"does/not/exist.ckpt\"\n");
        assert!(matches!(e, ConfigError::MissingFile { ref key, .. } if key == "checkpoint"), "{e:?}");
        let e = config_err("[[methods]]\nbase = \"ft_block\"\n");
        assert_eq!(e, ConfigError::MissingKey { section: "methods[0]".into(), key: "first_trainable_block".into() });
        assert!(matches!(config_err("[run\n"), ConfigError::Syntax(_)));
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut c = parse(&format!("{MINIMAL}\n[prune]\ngranularity = \"channel\"\nsignal = \"random\"\ntarget = 0.3\n")).unwrap();
        let before = c.stream.clone();
        c.override_seed(7).unwrap();
        assert_eq!(c.pretrain.seed, 7);
        assert_eq!(c.prune.unwrap().seed, 7);
        assert_eq!(c.run.unwrap().seeds, vec![7]);
        assert_eq!(c.stream.seed, 7);
        assert_ne!(c.stream, before);
    }

    #[test]
    fn pretrain_section() {
        let c = parse("[pretrain]\nsteps = 5\nlr = 0.1\nbatch_size = 4\n").unwrap();
        assert_eq!((c.pretrain.steps, c.pretrain.optim.lr, c.pretrain.optim.batch_size), (5, 0.1, 4));
        let e = config_err("[pretrain]\nstepz = 5\n");
        assert!(matches!(e, ConfigError::UnknownKey { ref key, .. } if key == "stepz"), "{e:?}");
    }

    #[test]
    fn model_section_is_validated() {
        let e = config_err("[model]\ninput_size = 28\n");
        assert!(matches!(e, ConfigError::Invalid { ref key, .. } if key == "input_size"));
        let text = "[model]\nblocks = [{ in_channels = 8, mid_channels = 8, out_channels = 8, downsample = false }]\n";
        assert!(matches!(config_err(text), ConfigError::Invalid { ref section, .. } if section == "model"));
    }

    #[test]
    fn method_choices() {
        let text = r#"
[[methods]]
base = "ft_block"
first_trainable_block = 2
[[methods]]
base = "block_0toX_ft_all"
keep_blocks = 3
lr = 0.05
[[methods]]
base = "adp1x1"
name = "adapters"
"#;
        let c = parse(text).unwrap();
        let names: Vec<&str> = c.methods.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["ft_block_2to3", "block_0to3_ft_all", "adapters"]);
        assert_eq!(c.methods[1].optim.lr, 0.05);
        let e = config_err("[[methods]]\nbase = \"adp1x1\"\nkeep_blocks = 2\n");
        assert!(matches!(e, ConfigError::Invalid { ref key, .. } if key == "keep_blocks"));
    }
}
