//! Multi-seed experiment drivers and their comparison tables.
//!
//! Every driver splits and normalizes the data, runs each method once per
//! seed, evaluates on the test split and reports per-attribute mean and
//! sample standard deviation across seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{config_hash, RunConfig};
use crate::data::{split, GridSeries, Normalizer, WindowSet};
use crate::error::{ConfigError, DataError, Error};
use crate::metrics::{attribute_metrics, AttributeMetrics};
use crate::model::ModelConfig;
use crate::prompt::{PromptKind, PromptVariant};
use crate::train::{fine_tune, pretrain, prompt_tune, single_train, TrainedModel};

/// A series cut into normalized train, validation and test windows.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub names: Vec<String>,
    pub normalizer: Normalizer,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl Prepared {
    pub fn new(series: &GridSeries, input_len: usize, horizon: usize) -> Result<Self, Error> {
        let splits = split(series, input_len, horizon)?;
        let normalizer = Normalizer::fit(&splits.train)?;
        let windows =
            |s: &GridSeries| WindowSet::from_series(&normalizer.apply(s), input_len, horizon);
        Ok(Self {
            names: series.attribute_names.clone(),
            train: windows(&splits.train),
            val: windows(&splits.val),
            test: windows(&splits.test),
            normalizer,
        })
    }

    pub fn regions(&self) -> usize {
        self.train.regions
    }

    pub fn attributes(&self) -> usize {
        self.names.len()
    }

    /// Keeps only the listed attributes, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, Error> {
        Ok(Self {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            normalizer: self.normalizer.select(indices),
            train: self.train.select_attributes(indices)?,
            val: self.val.select_attributes(indices)?,
            test: self.test.select_attributes(indices)?,
        })
    }

    pub fn model_config(&self, run: &RunConfig) -> ModelConfig {
        run.model.build(self.regions(), self.attributes())
    }

    /// Test metrics of a model trained on every attribute.
    pub fn test_all(&self, model: &TrainedModel) -> Result<Vec<AttributeMetrics>, Error> {
        attribute_metrics(
            &model.config,
            &model.params,
            model.prompts.as_ref(),
            &self.normalizer,
            &self.names,
            &self.test,
        )
    }

    /// Test metrics of a model trained on attribute `target` alone.
    pub fn test_one(&self, model: &TrainedModel, target: usize) -> Result<AttributeMetrics, Error> {
        let mut rows = attribute_metrics(
            &model.config,
            &model.params,
            model.prompts.as_ref(),
            &self.normalizer.select(&[target]),
            &self.names[target..=target],
            &self.test.select_attributes(&[target])?,
        )?;
        Ok(rows.remove(0))
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stats {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / n as f64
        };
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// Dataset or sub-experiment label; empty when there is only one.
    pub group: String,
    pub method: String,
    pub attribute: String,
    pub trainable_count: usize,
    pub rmse: Stats,
    pub mae: Stats,
    pub rmse_normalized: Stats,
    pub mae_normalized: Stats,
    /// RMSE + MAE on the normalized scale, the training objective.
    pub loss: Stats,
}

/// How often `method` is at least as good as `baseline` across attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub group: String,
    pub method: String,
    pub baseline: String,
    pub metric: String,
    pub wins: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub run: RunConfig,
    pub model: ModelConfig,
    pub attributes: Vec<String>,
    pub rows: Vec<Row>,
    pub comparisons: Vec<Comparison>,
}

impl ExperimentReport {
    pub fn row(&self, group: &str, method: &str, attribute: &str) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.method == method && r.attribute == attribute)
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let pm = |s: &Stats| format!("{:.4} ± {:.4}", s.mean, s.std);
        let header = [
            "group",
            "method",
            "attribute",
            "trainable",
            "MAE",
            "RMSE",
            "loss",
        ]
        .map(String::from);
        let mut lines = vec![header.to_vec()];
        for r in &self.rows {
            lines.push(vec![
                r.group.clone(),
                r.method.clone(),
                r.attribute.clone(),
                r.trainable_count.to_string(),
                pm(&r.mae),
                pm(&r.rmse),
                pm(&r.loss),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                lines
                    .iter()
                    .map(|l| l[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = format!(
            "{} | seeds {:?} | config {}\n",
            self.experiment,
            self.seeds,
            &self.config_hash[..12.min(self.config_hash.len())]
        );
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if c >= 3 {
                        format!("{}{cell}", " ".repeat(pad))
                    } else {
                        format!("{cell}{}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(rule));
                out.push('\n');
            }
        }
        for c in &self.comparisons {
            let group = if c.group.is_empty() {
                String::new()
            } else {
                format!("[{}] ", c.group)
            };
            let _ = writeln!(
                out,
                "{group}{} <= {} on {}: {} of {} attributes",
                c.method, c.baseline, c.metric, c.wins, c.total
            );
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(), DataError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DataError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json_path, json + "\n").map_err(io(&json_path))?;
        let txt_path = dir.join(format!("{stem}.txt"));
        fs::write(&txt_path, self.table()).map_err(io(&txt_path))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentOptions {
    pub seeds: Vec<u64>,
    /// Attributes to tune and report; all when `None`.
    pub targets: Option<Vec<usize>>,
}

impl ExperimentOptions {
    pub fn new(first_seed: u64, count: usize) -> Self {
        Self {
            seeds: (0..count as u64).map(|i| first_seed + i).collect(),
            targets: None,
        }
    }

    fn targets(&self, attributes: usize) -> Result<Vec<usize>, Error> {
        let targets = self
            .targets
            .clone()
            .unwrap_or_else(|| (0..attributes).collect());
        if let Some(&bad) = targets.iter().find(|&&t| t >= attributes) {
            return Err(DataError::AttributeIndex {
                index: bad,
                count: attributes,
            }
            .into());
        }
        Ok(targets)
    }
}

/// Per-seed results gathered in insertion order.
#[derive(Default)]
struct Collector {
    entries: Vec<(String, String, String, usize, Vec<AttributeMetrics>)>,
}

impl Collector {
    fn push(&mut self, group: &str, method: &str, trainable: usize, m: AttributeMetrics) {
        let found = self
            .entries
            .iter_mut()
            .find(|(g, me, a, _, _)| g == group && me == method && *a == m.name);
        match found {
            Some(entry) => entry.4.push(m),
            None => self.entries.push((
                group.into(),
                method.into(),
                m.name.clone(),
                trainable,
                vec![m],
            )),
        }
    }

    fn rows(&self) -> Vec<Row> {
        let mut rows = Vec::new();
        let mut groups: Vec<(&str, &str)> = Vec::new();
        for (g, m, _, _, _) in &self.entries {
            if !groups.contains(&(g.as_str(), m.as_str())) {
                groups.push((g, m));
            }
        }
        let stats = |ms: &[&AttributeMetrics], f: fn(&AttributeMetrics) -> f64| {
            Stats::from_values(ms.iter().map(|m| f(m)).collect())
        };
        let row = |group: &str,
                   method: &str,
                   attribute: &str,
                   trainable: usize,
                   ms: &[&AttributeMetrics]| Row {
            group: group.into(),
            method: method.into(),
            attribute: attribute.into(),
            trainable_count: trainable,
            rmse: stats(ms, |m| m.rmse),
            mae: stats(ms, |m| m.mae),
            rmse_normalized: stats(ms, |m| m.rmse_normalized),
            mae_normalized: stats(ms, |m| m.mae_normalized),
            loss: stats(ms, |m| m.rmse_normalized + m.mae_normalized),
        };
        for (group, method) in groups {
            let mine: Vec<_> = self
                .entries
                .iter()
                .filter(|(g, m, _, _, _)| g == group && m == method)
                .collect();
            for (_, _, attr, trainable, ms) in &mine {
                rows.push(row(
                    group,
                    method,
                    attr,
                    *trainable,
                    &ms.iter().collect::<Vec<_>>(),
                ));
            }
            // Per seed, the mean over attributes; then mean ± std over seeds.
            let seeds = mine.iter().map(|e| e.4.len()).min().unwrap_or(0);
            let per_seed: Vec<AttributeMetrics> = (0..seeds)
                .map(|s| {
                    crate::metrics::average(
                        &mine.iter().map(|e| e.4[s].clone()).collect::<Vec<_>>(),
                    )
                })
                .collect();
            let trainable = mine.first().map_or(0, |e| e.3);
            rows.push(row(
                group,
                method,
                "average",
                trainable,
                &per_seed.iter().collect::<Vec<_>>(),
            ));
        }
        rows
    }
}

type Metric = fn(&Row) -> f64;

fn compare(rows: &[Row], group: &str, method: &str, baseline: &str) -> Vec<Comparison> {
    let pick = |m: &str| -> Vec<&Row> {
        rows.iter()
            .filter(|r| r.group == group && r.method == m && r.attribute != "average")
            .collect()
    };
    let (ours, theirs) = (pick(method), pick(baseline));
    let metrics: [(&str, Metric); 3] = [
        ("MAE", |r| r.mae.mean),
        ("RMSE", |r| r.rmse.mean),
        ("loss", |r| r.loss.mean),
    ];
    metrics
        .iter()
        .map(|(name, f)| {
            let paired: Vec<_> = ours
                .iter()
                .filter_map(|o| {
                    theirs
                        .iter()
                        .find(|t| t.attribute == o.attribute)
                        .map(|t| (o, t))
                })
                .collect();
            Comparison {
                group: group.into(),
                method: method.into(),
                baseline: baseline.into(),
                metric: (*name).into(),
                wins: paired.iter().filter(|(o, t)| f(o) <= f(t)).count(),
                total: paired.len(),
            }
        })
        .collect()
}

fn report(
    experiment: &str,
    run: &RunConfig,
    opts: &ExperimentOptions,
    model: ModelConfig,
    names: Vec<String>,
    collector: &Collector,
    comparisons: &[(&str, &str, &str)],
) -> ExperimentReport {
    let rows = collector.rows();
    let comparisons = comparisons
        .iter()
        .flat_map(|(g, m, b)| compare(&rows, g, m, b))
        .collect();
    ExperimentReport {
        experiment: experiment.into(),
        seeds: opts.seeds.clone(),
        config_hash: config_hash(&(experiment, run, &model, &opts.seeds, &opts.targets)),
        run: run.clone(),
        model,
        attributes: names,
        rows,
        comparisons,
    }
}

fn log_run(progress: &mut dyn FnMut(&str), seed: u64, what: &str, model: &TrainedModel) {
    progress(&format!(
        "seed {seed}: {what}: {} epochs, {} steps, best val {}",
        model.outcome.epochs_run,
        model.outcome.steps,
        model
            .outcome
            .best_val_loss
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.5}"))
    ));
}

pub const SINGLE: &str = "Single-Train";
pub const FULL: &str = "Full-Train";
pub const FINE_TUNE: &str = "Fine-Tune";
pub const PROMPT_ST: &str = "PromptST";
pub const PROMPT_ST_IN_DOMAIN: &str = "PromptST (in-domain)";

/// Single-Train, Full-Train, Fine-Tune and spatio-temporal prompt tuning.
pub fn exp_overall(
    series: &GridSeries,
    run: &RunConfig,
    opts: &ExperimentOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport, Error> {
    let data = Prepared::new(series, run.model.input_len, run.model.horizon)?;
    let config = data.model_config(run);
    let targets = opts.targets(data.attributes())?;
    let variant = run.prompt.with_kind(PromptKind::StFull);
    let mut out = Collector::default();
    for &seed in &opts.seeds {
        let full = pretrain(
            &config,
            &data.train,
            Some(&data.val),
            &run.pretrain_config(seed),
        )?;
        log_run(progress, seed, FULL, &full);
        let all = data.test_all(&full)?;
        for &t in &targets {
            out.push("", FULL, full.trainable_count, all[t].clone());
        }
        for &t in &targets {
            let single = single_train(
                &config,
                &data.train,
                Some(&data.val),
                &run.single_config(t, seed),
            )?;
            log_run(
                progress,
                seed,
                &format!("{SINGLE} {}", data.names[t]),
                &single,
            );
            out.push(
                "",
                SINGLE,
                single.trainable_count,
                data.test_one(&single, t)?,
            );
            let fine = fine_tune(
                &config,
                &full.params,
                &data.train,
                Some(&data.val),
                &run.fine_tune_config(t, seed),
            )?;
            log_run(
                progress,
                seed,
                &format!("{FINE_TUNE} {}", data.names[t]),
                &fine,
            );
            out.push(
                "",
                FINE_TUNE,
                fine.trainable_count,
                data.test_one(&fine, t)?,
            );
            let cfg = run.prompt_tune_config(variant, t, seed);
            let tuned = prompt_tune(&config, &full.params, &data.train, Some(&data.val), &cfg)?;
            log_run(
                progress,
                seed,
                &format!("{PROMPT_ST} {}", data.names[t]),
                &tuned,
            );
            out.push(
                "",
                PROMPT_ST,
                tuned.trainable_count,
                data.test_one(&tuned, t)?,
            );
        }
    }
    Ok(report(
        "overall",
        run,
        opts,
        config,
        data.names.clone(),
        &out,
        &[
            ("", FINE_TUNE, FULL),
            ("", PROMPT_ST, FULL),
            ("", PROMPT_ST, FINE_TUNE),
        ],
    ))
}

/// Display name of a prompt variant in ablation tables.
pub fn variant_label(kind: PromptKind) -> &'static str {
    match kind {
        PromptKind::StFull => PROMPT_ST,
        PromptKind::Tiny => "Tiny",
        PromptKind::Shallow => "Shallow",
        PromptKind::Add => "Add",
        PromptKind::None => "w/o prompt",
    }
}

fn prompt_grid(
    experiment: &str,
    series: &GridSeries,
    run: &RunConfig,
    opts: &ExperimentOptions,
    variants: &[(String, PromptVariant)],
    comparisons: &[(&str, &str, &str)],
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport, Error> {
    let data = Prepared::new(series, run.model.input_len, run.model.horizon)?;
    let config = data.model_config(run);
    let targets = opts.targets(data.attributes())?;
    let mut out = Collector::default();
    for &seed in &opts.seeds {
        let full = pretrain(
            &config,
            &data.train,
            Some(&data.val),
            &run.pretrain_config(seed),
        )?;
        log_run(progress, seed, FULL, &full);
        for &t in &targets {
            for (label, variant) in variants {
                let cfg = run.prompt_tune_config(*variant, t, seed);
                let tuned = prompt_tune(&config, &full.params, &data.train, Some(&data.val), &cfg)?;
                log_run(
                    progress,
                    seed,
                    &format!("{label} {}", data.names[t]),
                    &tuned,
                );
                out.push("", label, tuned.trainable_count, data.test_one(&tuned, t)?);
            }
        }
    }
    Ok(report(
        experiment,
        run,
        opts,
        config,
        data.names.clone(),
        &out,
        comparisons,
    ))
}

/// The five prompt variants on one pretrained backbone per seed.
pub fn exp_ablation(
    series: &GridSeries,
    run: &RunConfig,
    opts: &ExperimentOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport, Error> {
    let variants: Vec<_> = PromptKind::ALL
        .iter()
        .map(|&k| (variant_label(k).to_string(), run.prompt.with_kind(k)))
        .collect();
    let none = variant_label(PromptKind::None);
    prompt_grid(
        "ablation",
        series,
        run,
        opts,
        &variants,
        &[
            ("", PROMPT_ST, none),
            ("", "Tiny", none),
            ("", "Shallow", none),
            ("", "Add", none),
        ],
        progress,
    )
}

pub fn sweep_label(n_st: usize) -> String {
    format!("n_st={n_st}")
}

/// Spatio-temporal prompt tuning with `n_st` from 0 to 4.
pub fn exp_sweep(
    series: &GridSeries,
    run: &RunConfig,
    opts: &ExperimentOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport, Error> {
    let variants: Vec<_> = (0..=4)
        .map(|n| {
            (
                sweep_label(n),
                PromptVariant {
                    n_st: n,
                    ..run.prompt.with_kind(PromptKind::StFull)
                },
            )
        })
        .collect();
    let zero = sweep_label(0);
    let comparisons: Vec<(String, String)> =
        (1..=4).map(|n| (sweep_label(n), zero.clone())).collect();
    let comparisons: Vec<_> = comparisons
        .iter()
        .map(|(m, b)| ("", m.as_str(), b.as_str()))
        .collect();
    prompt_grid(
        "sweep",
        series,
        run,
        opts,
        &variants,
        &comparisons,
        progress,
    )
}

/// Tuning on attributes the backbone never saw.
///
/// With a `source`, the backbone is pretrained on it and tuned on every
/// attribute of `target`. Without one, the target's attributes are cut into
/// halves A (first ⌈C/2⌉) and B, and each half serves once as the target
/// with the other as the source. Within each group the rows are: Single-Train,
/// Full-Train and in-domain prompt tuning on the target itself, then
/// Fine-Tune and prompt tuning from the source backbone.
pub fn exp_transfer(
    target: &GridSeries,
    source: Option<&GridSeries>,
    run: &RunConfig,
    opts: &ExperimentOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport, Error> {
    let (t_len, h) = (run.model.input_len, run.model.horizon);
    let whole = Prepared::new(target, t_len, h)?;
    let pairs: Vec<(String, Prepared, Prepared)> = match source {
        Some(src) => {
            let src = Prepared::new(src, t_len, h)?;
            if src.regions() != whole.regions() {
                return Err(ConfigError::Mismatch(format!(
                    "source has {} regions, target has {}",
                    src.regions(),
                    whole.regions()
                ))
                .into());
            }
            vec![("target".into(), whole.clone(), src)]
        }
        None => {
            let c = whole.attributes();
            if c < 2 {
                return Err(DataError::Invalid(
                    "transfer without a source needs at least 2 attributes".into(),
                )
                .into());
            }
            let half = c.div_ceil(2);
            let a: Vec<usize> = (0..half).collect();
            let b: Vec<usize> = (half..c).collect();
            let (pa, pb) = (whole.select(&a)?, whole.select(&b)?);
            vec![("A".into(), pa.clone(), pb.clone()), ("B".into(), pb, pa)]
        }
    };

    let mut out = Collector::default();
    for &seed in &opts.seeds {
        for (group, tgt, src) in &pairs {
            let targets = opts.targets(tgt.attributes())?;
            let tgt_config = tgt.model_config(run);
            let src_config = src.model_config(run);
            let variant = run.prompt.with_kind(PromptKind::StFull);

            let full = pretrain(
                &tgt_config,
                &tgt.train,
                Some(&tgt.val),
                &run.pretrain_config(seed),
            )?;
            log_run(progress, seed, &format!("[{group}] {FULL}"), &full);
            let all = tgt.test_all(&full)?;
            let source_full = pretrain(
                &src_config,
                &src.train,
                Some(&src.val),
                &run.pretrain_config(seed),
            )?;
            log_run(
                progress,
                seed,
                &format!("[{group}] source {FULL}"),
                &source_full,
            );
            for &t in &targets {
                let name = &tgt.names[t];
                let single = single_train(
                    &tgt_config,
                    &tgt.train,
                    Some(&tgt.val),
                    &run.single_config(t, seed),
                )?;
                log_run(
                    progress,
                    seed,
                    &format!("[{group}] {SINGLE} {name}"),
                    &single,
                );
                out.push(
                    group,
                    SINGLE,
                    single.trainable_count,
                    tgt.test_one(&single, t)?,
                );
                out.push(group, FULL, full.trainable_count, all[t].clone());

                let cfg = run.prompt_tune_config(variant, t, seed);
                let own = prompt_tune(&tgt_config, &full.params, &tgt.train, Some(&tgt.val), &cfg)?;
                log_run(
                    progress,
                    seed,
                    &format!("[{group}] {PROMPT_ST_IN_DOMAIN} {name}"),
                    &own,
                );
                out.push(
                    group,
                    PROMPT_ST_IN_DOMAIN,
                    own.trainable_count,
                    tgt.test_one(&own, t)?,
                );

                let fcfg = run.fine_tune_config(t, seed);
                let fine = fine_tune(
                    &src_config,
                    &source_full.params,
                    &tgt.train,
                    Some(&tgt.val),
                    &fcfg,
                )?;
                log_run(
                    progress,
                    seed,
                    &format!("[{group}] {FINE_TUNE} {name}"),
                    &fine,
                );
                out.push(
                    group,
                    FINE_TUNE,
                    fine.trainable_count,
                    tgt.test_one(&fine, t)?,
                );

                let moved = prompt_tune(
                    &src_config,
                    &source_full.params,
                    &tgt.train,
                    Some(&tgt.val),
                    &cfg,
                )?;
                log_run(
                    progress,
                    seed,
                    &format!("[{group}] {PROMPT_ST} {name}"),
                    &moved,
                );
                out.push(
                    group,
                    PROMPT_ST,
                    moved.trainable_count,
                    tgt.test_one(&moved, t)?,
                );
            }
        }
    }
    let groups: Vec<String> = pairs.iter().map(|(g, _, _)| g.clone()).collect();
    let comparisons: Vec<_> = groups
        .iter()
        .map(|g| (g.as_str(), PROMPT_ST, FINE_TUNE))
        .collect();
    let model = whole.model_config(run);
    Ok(report(
        "transfer",
        run,
        opts,
        model,
        whole.names.clone(),
        &out,
        &comparisons,
    ))
}
