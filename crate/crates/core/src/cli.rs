//! Command-line driver: generation, ingestion, training, evaluation, exports.
//!
//! Settings resolve as flag > config file > default. The config file is TOML
//! with optional `seed`, `[synth]`, `[model]`, `[train]` and `[eval]` tables;
//! `--set section.key=value` edits single keys. Every command that writes
//! output stores the resolved config as `config.toml` in `--out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{build_dataset, FcmDataset, Split};
use crate::error::{Error, Result};
use crate::gradsuite::{all_cases, run_suite, suite_table, Case, SuiteConfig};
use crate::metrics::{
    cross_lab_eval, evaluate, masked_feature_eval, pca_features_export, runs_table, summarize_runs, RunSummary,
};
use crate::models::{build_from_spec, Architecture, Model, ModelConfig, ModelSpec};
use crate::synth::{generate_dataset, write_dataset, SynthConfig};
use crate::training::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "cytoset", version, about = "Set and graph models for flow cytometry event classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML config file; flags take precedence over its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data splits, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. `train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (CSV samples plus manifest).
    Synth {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        events: Option<usize>,
        #[arg(long)]
        blast_fraction: Option<f64>,
        #[arg(long)]
        shift_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Load a manifest (FCS or CSV samples) and write canonical CSVs.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one architecture; writes the log, report and best checkpoint.
    Train {
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Markers removed from node inputs (kept in the graph).
        #[arg(long, value_delimiter = ',')]
        mask: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val, test or all.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate one checkpoint on several datasets without retraining.
    CrossEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and test architectures with markers removed from node inputs.
    MaskEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        arch: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        mask: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and test every architecture; one consolidated table.
    Zoo {
        #[arg(long)]
        data: PathBuf,
        /// Subset of architectures; all when absent.
        #[arg(long, value_delimiter = ',')]
        arch: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Two-component PCA of a model's pre-head activations on one sample.
    PcaExport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample id; the first sample when absent.
        #[arg(long)]
        sample: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the gradient-check suite over every op kind and layer.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Split evaluated by `eval` and `pca-export` (`all` for every sample).
    pub split: String,
    /// Split evaluated by `cross-eval`.
    pub cross_split: String,
    /// Seeds for `zoo` and `mask-eval`; the run seed alone when empty.
    pub seeds: Vec<u64>,
    pub gradcheck_instances: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            cross_split: "all".into(),
            seeds: vec![],
            gradcheck_instances: crate::gradsuite::INSTANCES,
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub samples: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            samples: 40,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, else a string.
fn parse_override(text: &str) -> Result<toml::Value> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut out = value;
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(Error::Config(format!("override `{text}` has an empty key")));
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), out);
        out = toml::Value::Table(t);
    }
    Ok(out)
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve_config(file: Option<&Path>, overrides: &[String], flags: &[String]) -> Result<RunConfig> {
    let mut value = toml::Value::try_from(RunConfig::default())
        .map_err(|e| Error::Config(format!("cannot serialize defaults: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(parsed));
    }
    for o in overrides.iter().chain(flags) {
        merge(&mut value, parse_override(o)?);
    }
    let cfg: RunConfig = value.try_into().map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.synth.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn flag<T: ToString>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={}", v.to_string()))
}

fn quoted(key: &str, v: &Option<String>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={}", toml::Value::String(v.clone())))
}

impl Common {
    fn resolve(&self, mut flags: Vec<Option<String>>) -> Result<RunConfig> {
        if let Some(s) = self.seed {
            for key in ["seed", "model.seed", "train.seed", "synth.seed"] {
                flags.push(Some(format!("{key}={s}")));
            }
        }
        let flags: Vec<String> = flags.into_iter().flatten().collect();
        resolve_config(self.config.as_deref(), &self.overrides, &flags)
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if matches!(e, Error::Config(_) | Error::InvalidArgument(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// As [`run`], with explicit output streams.
pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{text}");
            return EXIT_OK;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml()?)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Data(format!("cannot serialize: {e}")))
}

fn parse_split(text: &str) -> Result<Option<Split>> {
    if text.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    text.parse::<Split>()
        .map(Some)
        .map_err(|_| Error::Config(format!("unknown split `{text}`; use train, val, test or all")))
}

fn parse_arch(text: &str) -> Result<Architecture> {
    text.parse::<Architecture>()
        .map_err(|_| Error::Config(format!("unknown architecture `{text}`")))
}

fn load_data(path: &Path, seed: u64) -> Result<FcmDataset> {
    build_dataset(path, seed)
}

fn load_model(dir: &Path) -> Result<Model> {
    let dir = if dir.join(crate::training::BEST_DIR).join(crate::models::MODEL_FILE).exists() {
        dir.join(crate::training::BEST_DIR)
    } else {
        dir.to_path_buf()
    };
    Model::load(&dir)
}

fn seeds_of(cfg: &RunConfig) -> Vec<u64> {
    if cfg.eval.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.eval.seeds.clone()
    }
}

fn seeds_flag(seeds: &[u64]) -> Option<String> {
    (!seeds.is_empty()).then(|| {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        format!("eval.seeds=[{}]", list.join(","))
    })
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let say = |out: &mut dyn Write, text: &str| -> Result<()> {
        out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
    };
    match command {
        Command::Synth {
            samples,
            events,
            blast_fraction,
            shift_scale,
            out: dir,
            common,
        } => {
            let cfg = common.resolve(vec![
                flag("samples", &samples),
                flag("synth.n_events", &events),
                flag("synth.blast_fraction", &blast_fraction),
                flag("synth.population_shift_scale", &shift_scale),
            ])?;
            let dataset = generate_dataset(&cfg.synth, cfg.samples, cfg.seed)?;
            let manifest = write_dataset(&dataset, &dir)?;
            save_config(&dir, &cfg)?;
            let (tr, va, te) = dataset.split_counts();
            say(
                out,
                &format!(
                    "wrote {} samples ({tr} train / {va} val / {te} test) to {}\n",
                    dataset.len(),
                    manifest.display()
                ),
            )?;
        }
        Command::Ingest { data, out: dir, common } => {
            let cfg = common.resolve(vec![])?;
            let dataset = load_data(&data, cfg.seed)?;
            let manifest = write_dataset(&dataset, &dir)?;
            save_config(&dir, &cfg)?;
            say(out, &format!("wrote {} canonical samples to {}\n", dataset.len(), manifest.display()))?;
        }
        Command::Train {
            arch,
            data,
            epochs,
            mask,
            out: dir,
            common,
        } => {
            let cfg = common.resolve(vec![quoted("model.architecture", &arch), flag("train.epochs", &epochs)])?;
            let dataset = load_data(&data, cfg.seed)?;
            let spec = ModelSpec::new(cfg.model.clone(), dataset.markers.clone(), mask)?;
            let mut model = build_from_spec(spec)?;
            save_config(&dir, &cfg)?;
            let report = train(&mut model, &dataset, &cfg.train, Some(&dir))?;
            write_file(&dir.join("report.json"), &to_json(&report)?)?;
            let test = evaluate(&mut model, &dataset, Some(Split::Test))?;
            write_file(&dir.join("test_metrics.json"), &test.to_json()?)?;
            say(
                out,
                &format!(
                    "{}: best epoch {} with validation F1 {:.4}\n{}",
                    model.architecture(),
                    report.best_epoch,
                    report.best_val_f1,
                    test.to_table()
                ),
            )?;
        }
        Command::Eval {
            model,
            data,
            split,
            out: dir,
            common,
        } => {
            let cfg = common.resolve(vec![quoted("eval.split", &split)])?;
            let split = parse_split(&cfg.eval.split)?;
            let mut m = load_model(&model)?;
            let dataset = load_data(&data, cfg.seed)?;
            let report = evaluate(&mut m, &dataset, split)?;
            save_config(&dir, &cfg)?;
            write_file(&dir.join("metrics.json"), &report.to_json()?)?;
            write_file(&dir.join("metrics.txt"), &report.to_table())?;
            say(out, &report.to_table())?;
        }
        Command::CrossEval {
            model,
            data,
            split,
            out: dir,
            common,
        } => {
            let cfg = common.resolve(vec![quoted("eval.cross_split", &split)])?;
            let split = parse_split(&cfg.eval.cross_split)?;
            let mut m = load_model(&model)?;
            let sets = data
                .iter()
                .map(|p| load_data(p, cfg.seed))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FcmDataset> = sets.iter().collect();
            let reports = cross_lab_eval(&mut m, &refs, split)?;
            let rows: Vec<RunSummary> = reports
                .iter()
                .map(|r| summarize_runs(r.dataset.clone(), std::slice::from_ref(r)))
                .collect();
            let table = runs_table(&rows);
            save_config(&dir, &cfg)?;
            write_file(&dir.join("cross_eval.json"), &to_json(&reports)?)?;
            write_file(&dir.join("cross_eval.txt"), &table)?;
            say(out, &table)?;
        }
        Command::MaskEval {
            data,
            arch,
            mask,
            seeds,
            epochs,
            out: dir,
            common,
        } => {
            let cfg = common.resolve(vec![seeds_flag(&seeds), flag("train.epochs", &epochs)])?;
            let archs = arch.iter().map(|a| parse_arch(a)).collect::<Result<Vec<_>>>()?;
            let dataset = load_data(&data, cfg.seed)?;
            save_config(&dir, &cfg)?;
            let runs = masked_feature_eval(&archs, &cfg.model, &dataset, &mask, &cfg.train, &seeds_of(&cfg))?;
            let table = write_runs(&dir, "mask_eval", &runs)?;
            say(out, &table)?;
        }
        Command::Zoo {
            data,
            arch,
            seeds,
            epochs,
            out: dir,
            common,
        } => {
            let cfg = common.resolve(vec![seeds_flag(&seeds), flag("train.epochs", &epochs)])?;
            let archs = if arch.is_empty() {
                Architecture::ALL.to_vec()
            } else {
                arch.iter().map(|a| parse_arch(a)).collect::<Result<Vec<_>>>()?
            };
            let dataset = load_data(&data, cfg.seed)?;
            save_config(&dir, &cfg)?;
            let runs = masked_feature_eval(&archs, &cfg.model, &dataset, &[], &cfg.train, &seeds_of(&cfg))?;
            let table = write_runs(&dir, "zoo", &runs)?;
            say(out, &table)?;
        }
        Command::PcaExport {
            model,
            data,
            sample,
            out: dir,
            common,
        } => {
            let cfg = common.resolve(vec![])?;
            let mut m = load_model(&model)?;
            let dataset = load_data(&data, cfg.seed)?;
            let idx = match &sample {
                Some(id) => dataset
                    .samples
                    .iter()
                    .position(|s| &s.id == id)
                    .ok_or_else(|| Error::Data(format!("no sample `{id}` in {}", data.display())))?,
                None => 0,
            };
            let s = &dataset.samples[idx];
            let labels = s
                .labels
                .clone()
                .ok_or_else(|| Error::Data(format!("sample `{}` has no labels", s.id)))?;
            let stats = m.spec.standardization.clone().unwrap_or_else(|| dataset.standardization.clone());
            let events = stats.apply(&s.events)?;
            let projection = pca_features_export(&mut m, &events, &labels)?;
            save_config(&dir, &cfg)?;
            let path = dir.join("pca.csv");
            write_file(&path, &projection.to_csv()?)?;
            say(
                out,
                &format!(
                    "sample {}: {} events, component variances {:.4e} {:.4e}, wrote {}\n",
                    s.id,
                    projection.coords.len(),
                    projection.variances[0],
                    projection.variances[1],
                    path.display()
                ),
            )?;
        }
        Command::Gradcheck {
            instances,
            out: dir,
            common,
        } => {
            let cfg = common.resolve(vec![flag("eval.gradcheck_instances", &instances)])?;
            let suite = SuiteConfig {
                instances: cfg.eval.gradcheck_instances,
                seed: cfg.seed,
                ..SuiteConfig::default()
            };
            if let Some(dir) = &dir {
                save_config(dir, &cfg)?;
            }
            return gradcheck(&all_cases(), &suite, dir.as_deref(), out, err);
        }
    }
    Ok(EXIT_OK)
}

fn write_runs(dir: &Path, stem: &str, runs: &[(Architecture, Vec<crate::metrics::MetricsReport>)]) -> Result<String> {
    let rows: Vec<RunSummary> = runs.iter().map(|(a, r)| summarize_runs(a.name(), r)).collect();
    let table = runs_table(&rows);
    let reports: Vec<_> = runs.iter().flat_map(|(_, r)| r.iter()).collect();
    write_file(&dir.join(format!("{stem}.json")), &to_json(&reports)?)?;
    write_file(&dir.join(format!("{stem}.txt")), &table)?;
    Ok(table)
}

/// Runs `cases`, prints the table, and names every failing case on `err`.
/// Exits with [`EXIT_NUMERICAL`] when any case fails.
pub fn gradcheck(
    cases: &[Case],
    cfg: &SuiteConfig,
    dir: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let results = run_suite(cases, cfg);
    let table = suite_table(&results);
    out.write_all(table.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    if let Some(dir) = dir {
        write_file(&dir.join("gradcheck.txt"), &table)?;
        write_file(&dir.join("gradcheck.json"), &to_json(&results)?)?;
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        let detail = r.error.clone().unwrap_or_else(|| format!("max relative error {:.3e} at {}", r.max_rel_error, r.worst));
        let _ = writeln!(err, "gradient check failed for `{}`: {detail}", r.name);
    }
    Ok(if failed.is_empty() { EXIT_OK } else { EXIT_NUMERICAL })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[train]\nepochs = 7\nlr = 0.01\n[model]\nheads = 2\n").unwrap();
        let cfg = resolve_config(Some(&file), &["train.lr=0.005".into()], &["train.epochs=9".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.lr, 0.005);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn overrides_parse_literals_and_strings() {
        let cfg = resolve_config(None, &["model.architecture=gin-st-fps".into(), "synth.blast_offset_sigma=[3.0, 5.0]".into()], &[])
            .unwrap();
        assert_eq!(cfg.model.architecture, Architecture::GinStFps);
        assert_eq!(cfg.synth.blast_offset_sigma, [3.0, 5.0]);
        assert!(resolve_config(None, &["train.nope=1".into()], &[]).is_err());
        assert!(resolve_config(None, &["noequals".into()], &[]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = resolve_config(None, &["seed=5".into()], &[]).unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
