//! `promptst` command-line entry point.

mod failure;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use promptst::checkpoint::Checkpoint;
use promptst::config::RunConfig;
use promptst::data::{
    load_grid_csv, save_grid_csv, split, synthesize, GridSeries, SynthSpec, WindowSet,
};
use promptst::experiments::{
    exp_ablation, exp_overall, exp_sweep, exp_transfer, ExperimentOptions, ExperimentReport,
    Prepared,
};
use promptst::metrics::{evaluate, MetricsReport};
use promptst::model::ModelConfig;
use promptst::prompt::{trainable_params, PromptKind, PromptVariant};
use promptst::train::{fine_tune, pretrain, prompt_tune, TrainedModel};

use failure::Failure;

#[derive(Parser)]
#[command(
    name = "promptst",
    version,
    about = "Spatio-temporal prompt tuning for multi-attribute grid forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-attribute STGRID file.
    Gen(GenArgs),
    /// Train the backbone and head jointly on every attribute.
    Pretrain(PretrainArgs),
    /// Tune a pretrained checkpoint on one attribute.
    Tune(TuneArgs),
    /// Score a checkpoint on one split of a data file.
    Eval(EvalArgs),
    /// Print the trainable-parameter count of a tuning variant.
    CountParams(CountArgs),
    /// Single-Train, Full-Train, Fine-Tune and PromptST on every attribute.
    ExpOverall(ExpArgs),
    /// Tune a backbone pretrained on other attributes.
    ExpTransfer(TransferArgs),
    /// The five prompt variants on a shared backbone.
    ExpAblation(ExpArgs),
    /// PromptST with n_st from 0 to 4.
    ExpSweep(ExpArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    #[arg(long, default_value_t = 6)]
    attrs: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of attributes sharing one spatial and daily pattern.
    #[arg(long, default_value_t = 0.5)]
    shared_frac: f64,
    #[arg(long, default_value_t = 60)]
    interval: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    St,
    Tiny,
    Shallow,
    Add,
    None,
}

impl From<Variant> for PromptKind {
    fn from(v: Variant) -> Self {
        match v {
            Variant::St => PromptKind::StFull,
            Variant::Tiny => PromptKind::Tiny,
            Variant::Shallow => PromptKind::Shallow,
            Variant::Add => PromptKind::Add,
            Variant::None => PromptKind::None,
        }
    }
}

#[derive(Args)]
struct PromptFlags {
    /// Prompt variant; the config's variant when omitted.
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    #[arg(long)]
    n_st: Option<usize>,
    #[arg(long)]
    n_ti: Option<usize>,
}

impl PromptFlags {
    fn resolve(&self, run: &RunConfig) -> PromptVariant {
        let mut variant = run.prompt.variant();
        if let Some(v) = self.variant {
            variant.kind = v.into();
        }
        variant.n_st = self.n_st.unwrap_or(variant.n_st);
        variant.n_ti = self.n_ti.unwrap_or(variant.n_ti);
        variant
    }
}

#[derive(Args)]
struct TuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    from: PathBuf,
    /// Data file holding the target attribute.
    #[arg(long)]
    data: PathBuf,
    /// Target attribute, by index or name.
    #[arg(long)]
    attr: String,
    #[command(flatten)]
    prompt: PromptFlags,
    /// Fine-tune every parameter instead of prompt tuning.
    #[arg(long, conflicts_with_all = ["variant", "n_st", "n_ti"])]
    full: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Write the metrics report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    prompt: PromptFlags,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid regions N.
    #[arg(long, default_value_t = 64)]
    regions: usize,
}

#[derive(Args)]
struct ExpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// First seed; the config's seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict tuning to these attributes, by index or name.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Pretrain on this file instead of the other half of the attributes.
    #[arg(long)]
    source: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            eprintln!(
                "{}",
                Failure::Usage(message.trim_start_matches("error: ").to_string())
            );
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            f.code()
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CountParams(a) => count_params(a),
        Command::ExpOverall(a) => experiment(a, |s, run, opts, p| exp_overall(s, run, opts, p)),
        Command::ExpAblation(a) => experiment(a, |s, run, opts, p| exp_ablation(s, run, opts, p)),
        Command::ExpSweep(a) => experiment(a, |s, run, opts, p| exp_sweep(s, run, opts, p)),
        Command::ExpTransfer(a) => {
            let source = a.source.as_deref().map(load_grid_csv).transpose()?;
            experiment(a.exp, |s, run, opts, p| {
                exp_transfer(s, source.as_ref(), run, opts, p)
            })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| Failure::Mismatch(format!("{}: {}", path.display(), e.message())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Resolves an attribute given as an index or a name.
fn attribute_index(names: &[String], key: &str) -> Result<usize, Failure> {
    let found = match key.parse::<usize>() {
        Ok(i) if i < names.len() => Some(i),
        Ok(_) => None,
        Err(_) => names.iter().position(|n| n == key),
    };
    found.ok_or_else(|| {
        Failure::Usage(format!(
            "unknown attribute {key:?}; data has {}",
            names.join(", ")
        ))
    })
}

fn summary(what: &str, model: &TrainedModel) -> String {
    let val = model
        .outcome
        .best_val_loss
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.5}"));
    format!(
        "{what}: {} epochs, {} steps, best val loss {val}, {} trainable parameters",
        model.outcome.epochs_run, model.outcome.steps, model.trainable_count
    )
}

fn gen(a: GenArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&a.shared_frac) {
        return Err(Failure::Usage(format!(
            "--shared-frac {} is outside [0, 1]",
            a.shared_frac
        )));
    }
    let spec = SynthSpec {
        shared_frac: a.shared_frac,
        interval_minutes: a.interval,
        ..SynthSpec::new(a.rows, a.cols, a.attrs, a.steps, a.seed)
    };
    let series = synthesize(&spec)?;
    save_grid_csv(&series, &a.out)?;
    println!(
        "wrote {}: {}x{} grid, {} attributes, {} timesteps",
        a.out.display(),
        a.rows,
        a.cols,
        a.attrs,
        a.steps
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), Failure> {
    let run = load_config(a.config.as_deref())?;
    let series = load_grid_csv(&a.data)?;
    let data = Prepared::new(&series, run.model.input_len, run.model.horizon)?;
    let config = data.model_config(&run);
    let model = pretrain(
        &config,
        &data.train,
        Some(&data.val),
        &run.pretrain_config(a.seed.unwrap_or(run.seed)),
    )?;
    Checkpoint::from_trained(&model, &data.normalizer, &data.names).save(&a.out)?;
    println!("{} -> {}", summary("pretrain", &model), a.out.display());
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> Result<(), Failure> {
    let run = load_config(a.config.as_deref())?;
    let base = Checkpoint::load(&a.from)?;
    let series = load_grid_csv(&a.data)?;
    if series.regions() != base.config.regions {
        return Err(Failure::Mismatch(format!(
            "data has {} regions, checkpoint expects {}",
            series.regions(),
            base.config.regions
        )));
    }
    let target = attribute_index(&series.attribute_names, &a.attr)?;
    let data = Prepared::new(&series, base.config.input_len, base.config.horizon)?;
    let config = ModelConfig {
        attributes: data.attributes(),
        ..base.config.clone()
    };
    let seed = a.seed.unwrap_or(run.seed);
    let (model, what) = if a.full {
        let cfg = run.fine_tune_config(target, seed);
        (
            fine_tune(&config, &base.params, &data.train, Some(&data.val), &cfg)?,
            "fine-tune".to_string(),
        )
    } else {
        let variant = a.prompt.resolve(&run);
        let cfg = run.prompt_tune_config(variant, target, seed);
        let what = format!("prompt-tune {}", variant.kind);
        (
            prompt_tune(&config, &base.params, &data.train, Some(&data.val), &cfg)?,
            what,
        )
    };
    Checkpoint::from_trained(&model, &data.normalizer, &data.names).save(&a.out)?;
    println!(
        "{} on {} -> {}",
        summary(&what, &model),
        data.names[target],
        a.out.display()
    );
    Ok(())
}

fn split_windows(
    ckpt: &Checkpoint,
    series: &GridSeries,
    which: SplitName,
) -> Result<WindowSet, Failure> {
    let c = &ckpt.config;
    if series.regions() != c.regions {
        return Err(Failure::Mismatch(format!(
            "data has {} regions, checkpoint expects {}",
            series.regions(),
            c.regions
        )));
    }
    let indices = match ckpt.provenance.target_attribute {
        Some(t) if c.attributes == 1 => vec![t],
        _ => (0..series.attributes()).collect(),
    };
    if indices.len() != c.attributes || indices.iter().any(|&i| i >= series.attributes()) {
        return Err(Failure::Mismatch(format!(
            "data has {} attributes, checkpoint expects {}",
            series.attributes(),
            c.attributes
        )));
    }
    let picked = series.select_attributes(&indices)?;
    if picked.attribute_names != ckpt.attribute_names {
        return Err(Failure::Mismatch(format!(
            "data attributes {:?} do not match checkpoint attributes {:?}",
            picked.attribute_names, ckpt.attribute_names
        )));
    }
    let splits = split(&picked, c.input_len, c.horizon)?;
    let part = match which {
        SplitName::Train => splits.train,
        SplitName::Val => splits.val,
        SplitName::Test => splits.test,
    };
    Ok(WindowSet::from_series(
        &ckpt.normalizer.apply(&part),
        c.input_len,
        c.horizon,
    ))
}

fn metrics_table(report: &MetricsReport) -> String {
    let mut out = format!(
        "{:<16} {:>12} {:>12} {:>12} {:>12}\n",
        "attribute", "RMSE", "MAE", "RMSE (norm)", "MAE (norm)"
    );
    for row in report
        .attributes
        .iter()
        .chain(std::iter::once(&report.average))
    {
        out += &format!(
            "{:<16} {:>12.4} {:>12.4} {:>12.5} {:>12.5}\n",
            row.name, row.rmse, row.mae, row.rmse_normalized, row.mae_normalized
        );
    }
    out
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.from)?;
    let series = load_grid_csv(&a.data)?;
    let windows = split_windows(&ckpt, &series, a.split)?;
    let report = evaluate(&ckpt, &windows)?;
    print!("{}", metrics_table(&report));
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn count_params(a: CountArgs) -> Result<(), Failure> {
    let run = load_config(a.config.as_deref())?;
    let config = run.model.build(a.regions, 1);
    config
        .validate()
        .map_err(|e| Failure::Mismatch(e.to_string()))?;
    println!("{}", trainable_params(&a.prompt.resolve(&run), &config));
    Ok(())
}

fn experiment<F>(a: ExpArgs, driver: F) -> Result<(), Failure>
where
    F: FnOnce(
        &GridSeries,
        &RunConfig,
        &ExperimentOptions,
        &mut dyn FnMut(&str),
    ) -> promptst::Result<ExperimentReport>,
{
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let run = load_config(a.config.as_deref())?;
    let series = load_grid_csv(&a.data)?;
    let mut opts = ExperimentOptions::new(a.seed.unwrap_or(run.seed), a.seeds);
    if let Some(keys) = &a.targets {
        let targets = keys
            .iter()
            .map(|k| attribute_index(&series.attribute_names, k))
            .collect::<Result<Vec<_>, _>>()?;
        opts.targets = Some(targets);
    }
    let report = driver(&series, &run, &opts, &mut |line| eprintln!("{line}"))?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    report.write(&a.out, &report.experiment)?;
    print!("{}", report.table());
    Ok(())
}
