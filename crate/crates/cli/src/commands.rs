use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hfcr::checkpoint::{load_into, save_checkpoint};
use hfcr::data::{Dataset, DatasetSplit};
use hfcr::hffp::Arrangement;
use hfcr::model::HfcrModel;
use hfcr::trainer::{evaluate, train as run_training, EvalReport};

use crate::config::{read_config_file, resolve_output, DataSource, RunConfig};
use crate::plot::{self, ABLATION_HEADER, EVAL_HEADER, TRAIN_LOG_HEADER};
use crate::{AblateArgs, CliError, ConfigArgs, EvalArgs, GradcheckArgs, PlotArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LAST_CHECKPOINT_FILE: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const RUN_LOG_FILE: &str = "run_log.txt";
pub const SPEC_FILE: &str = "synthetic_spec.txt";
pub const EVAL_FILE: &str = "eval_report.csv";

/// Applies config file, named flags and `--set` overrides, in that order.
pub fn build_config(args: &ConfigArgs, base: RunConfig) -> Result<RunConfig, CliError> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_kv(&text)?;
    }
    if let Some(d) = &args.data {
        if d == "synthetic" {
            cfg.set("data.source", "synthetic")?;
        } else {
            cfg.set("data.path", d)?;
        }
    }
    let pairs = [
        ("--hffp", "model.hffp", &args.hffp),
        ("--hfrp", "model.hfrp", &args.hfrp),
        ("--channel", "model.channel", &args.channel),
        ("--spatial", "model.spatial", &args.spatial),
        ("--arrangement", "model.arrangement", &args.arrangement),
    ];
    for (flag, key, value) in pairs {
        if let Some(v) = value {
            cfg.set(key, v)
                .map_err(|e| CliError::config(format!("{flag}: {}", e.message)))?;
        }
    }
    if let Some(w) = args.way {
        cfg.set("train.way", &w.to_string())?;
        cfg.set("eval.way", &w.to_string())?;
    }
    if let Some(k) = args.shot {
        cfg.set("train.shot", &k.to_string())?;
        cfg.set("eval.shot", &k.to_string())?;
    }
    if let Some(e) = args.epochs {
        cfg.set("train.epochs", &e.to_string())?;
    }
    if let Some(s) = args.seed {
        cfg.set("train.seed", &s.to_string())?;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub episodes: usize,
}

pub fn train(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let cfg = build_config(&args.cfg, RunConfig::default())?;
    cfg.validate()?;
    let (data, split) = cfg.load_data()?;
    let out = cfg.resolved_output_dir();
    create_dir(&out)?;
    write(&out.join(CONFIG_FILE), cfg.to_kv())?;
    if cfg.data.source == DataSource::Synthetic {
        write(&out.join(SPEC_FILE), cfg.synthetic_spec()?.to_kv())?;
    }
    train_in(&cfg, &data, &split, &out)
}

/// Trains with an already validated config and writes the run artifacts.
pub fn train_in(cfg: &RunConfig, data: &Dataset, split: &DatasetSplit, out: &Path) -> Result<TrainSummary, CliError> {
    let tc = cfg.train_config();
    let mc = cfg.model_config();
    let (model, store) = HfcrModel::<f32>::new(mc.clone(), tc.seed)?;
    let mut notes = String::new();
    let _ = writeln!(notes, "mode = {}", mc.scoring_mode().name());
    let _ = writeln!(
        notes,
        "episodes = {}-way {}-shot, {} queries per class (desk scale)",
        tc.train_way, tc.train_shot, tc.train_queries
    );
    let _ = writeln!(notes, "trainable scalars = {}", store.trainable_count());

    let outcome = run_training(&model, store, data, split, &tc, |_| {})?;
    let mut log = String::from(TRAIN_LOG_HEADER);
    log.push('\n');
    for r in &outcome.log {
        let _ = writeln!(log, "{},{},{},{}", r.epoch, r.episode, r.loss, r.lr);
    }
    write(&out.join(TRAIN_LOG_FILE), log)?;
    let mut val = String::from("epoch,mean,ci95\n");
    for v in &outcome.validations {
        let _ = writeln!(val, "{},{},{}", v.epoch, v.mean, v.ci95);
    }
    write(&out.join(VALIDATION_FILE), val)?;
    save_checkpoint(&outcome.best, &out.join(CHECKPOINT_FILE))?;
    save_checkpoint(&outcome.last, &out.join(LAST_CHECKPOINT_FILE))?;
    let best_val = outcome
        .best_epoch
        .and_then(|e| outcome.validations.iter().find(|v| v.epoch == e))
        .map(|v| v.mean);
    match (outcome.best_epoch, best_val) {
        (Some(e), Some(v)) => {
            let _ = writeln!(notes, "best epoch = {e}, validation accuracy = {v:.2}");
        }
        _ => {
            let _ = writeln!(notes, "no epochs run; checkpoint holds the initialization");
        }
    }
    write(&out.join(RUN_LOG_FILE), &notes)?;
    eprint!("{notes}");
    Ok(TrainSummary {
        out_dir: out.to_path_buf(),
        best_epoch: outcome.best_epoch,
        best_val,
        episodes: outcome.log.len(),
    })
}

fn checkpoint_paths(arg: &Path) -> (PathBuf, PathBuf) {
    let arg = resolve_output(arg);
    if arg.is_dir() {
        (arg.join(CHECKPOINT_FILE), arg.clone())
    } else {
        let dir = arg.parent().map(Path::to_path_buf).unwrap_or_default();
        (arg, dir)
    }
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let (ckpt, run_dir) = checkpoint_paths(&args.checkpoint);
    let snapshot = run_dir.join(CONFIG_FILE);
    let base = if snapshot.is_file() {
        read_config_file(&snapshot)?
    } else {
        RunConfig::default()
    };
    let mut cfg = build_config(&args.cfg, base)?;
    if let Some(e) = args.episodes {
        cfg.set("eval.episodes", &e.to_string())?;
    }
    if let Some(q) = args.queries {
        cfg.set("eval.queries", &q.to_string())?;
    }
    if let Some(s) = args.eval_seed {
        cfg.set("eval.seed", &s.to_string())?;
    }
    cfg.validate()?;
    let out = match &args.cfg.out {
        Some(o) => resolve_output(o),
        None => run_dir,
    };
    let report = eval_checkpoint(&cfg, &ckpt)?;
    create_dir(&out)?;
    write(&out.join(EVAL_FILE), eval_record(&cfg, &report))?;
    println!("{report}");
    Ok(report)
}

pub fn eval_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<EvalReport, CliError> {
    let (data, split) = cfg.load_data()?;
    let (model, mut store) = HfcrModel::<f32>::new(cfg.model_config(), cfg.train.seed)?;
    load_into(ckpt, &mut store)?;
    Ok(evaluate(&model, &store, &data, &split.novel, &cfg.eval)?)
}

pub fn eval_record(cfg: &RunConfig, r: &EvalReport) -> String {
    format!(
        "{EVAL_HEADER}\n{},{},{},{},{},{},{},{:08x}\n",
        r.mean, r.ci95, r.episodes, cfg.eval.way, cfg.eval.shot, cfg.eval.queries, cfg.eval.seed, r.digest
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Components,
    Features,
    Arrangement,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Components, Axis::Features, Axis::Arrangement];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Features => "features",
            Axis::Arrangement => "arrangement",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Axis>, CliError> {
        match s {
            "components" => Ok(vec![Axis::Components]),
            "features" => Ok(vec![Axis::Features]),
            "arrangement" => Ok(vec![Axis::Arrangement]),
            "all" => Ok(Axis::ALL.to_vec()),
            _ => Err(CliError::config(format!(
                "unknown ablation axis `{s}` (expected components, features, arrangement or all)"
            ))),
        }
    }

    /// Row names and the config of each variant.
    pub fn variants(self, base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        let full = |c: &mut RunConfig| {
            c.model.hffp = true;
            c.model.hfrp = true;
            c.model.branches.channel = true;
            c.model.branches.spatial = true;
            c.model.arrangement = Arrangement::Parallel;
        };
        match self {
            Axis::Components => vec![
                (
                    "protonet",
                    with(&|c| {
                        full(c);
                        c.model.hffp = false;
                        c.model.hfrp = false;
                    }),
                ),
                (
                    "hfrp-only",
                    with(&|c| {
                        full(c);
                        c.model.hffp = false;
                    }),
                ),
                ("full", with(&full)),
            ],
            Axis::Features => vec![
                (
                    "spatial-only",
                    with(&|c| {
                        full(c);
                        c.model.branches.channel = false;
                    }),
                ),
                (
                    "channel-only",
                    with(&|c| {
                        full(c);
                        c.model.branches.spatial = false;
                    }),
                ),
                ("hybrid", with(&full)),
            ],
            Axis::Arrangement => vec![
                (
                    "cfo→sfo",
                    with(&|c| {
                        full(c);
                        c.model.arrangement = Arrangement::CfoThenSfo;
                    }),
                ),
                (
                    "sfo→cfo",
                    with(&|c| {
                        full(c);
                        c.model.arrangement = Arrangement::SfoThenCfo;
                    }),
                ),
                ("parallel", with(&full)),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub variant: &'static str,
    pub report: EvalReport,
}

/// Trains and evaluates one variant; returns the novel-class report.
pub fn run_variant(cfg: &RunConfig, data: &Dataset, split: &DatasetSplit) -> Result<EvalReport, CliError> {
    let (model, store) = HfcrModel::<f32>::new(cfg.model_config(), cfg.train.seed)?;
    let outcome = run_training(&model, store, data, split, &cfg.train_config(), |_| {})?;
    Ok(evaluate(&model, &outcome.best, data, &split.novel, &cfg.eval)?)
}

/// Runs every variant of the given axes under identical seeds and budget.
/// Variants with identical configs (e.g. `full`, `hybrid`, `parallel`) are
/// trained once.
pub fn run_ablation(
    base: &RunConfig,
    axes: &[Axis],
    parallel: usize,
    data: &Dataset,
    split: &DatasetSplit,
) -> Result<Vec<AblationRow>, CliError> {
    let mut jobs: Vec<(Axis, &'static str, RunConfig)> = Vec::new();
    for &axis in axes {
        for (name, cfg) in axis.variants(base) {
            cfg.validate()?;
            jobs.push((axis, name, cfg));
        }
    }
    let mut unique: Vec<(String, RunConfig)> = Vec::new();
    for (_, _, cfg) in &jobs {
        let key = cfg.to_kv();
        if !unique.iter().any(|(k, _)| *k == key) {
            unique.push((key, cfg.clone()));
        }
    }
    let workers = parallel.clamp(1, unique.len().max(1));
    let mut results: Vec<Option<Result<EvalReport, CliError>>> = (0..unique.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let unique = &unique;
                scope.spawn(move || {
                    (w..unique.len())
                        .step_by(workers)
                        .map(|i| (i, run_variant(&unique[i].1, data, split)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut reports = Vec::with_capacity(unique.len());
    for (r, (key, _)) in results.into_iter().zip(&unique) {
        let report = r.expect("every variant ran").map_err(|e| {
            let (axis, variant, _) = jobs.iter().find(|j| j.2.to_kv() == *key).expect("job of variant");
            CliError {
                code: e.code,
                message: format!("{} variant `{variant}`: {}", axis.name(), e.message),
            }
        })?;
        reports.push(report);
    }
    Ok(jobs
        .into_iter()
        .map(|(axis, variant, cfg)| {
            let key = cfg.to_kv();
            let i = unique.iter().position(|(k, _)| *k == key).expect("deduplicated");
            AblationRow {
                axis,
                variant,
                report: reports[i].clone(),
            }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.axis.name(),
            r.variant,
            r.report.mean,
            r.report.ci95,
            r.report.episodes
        );
    }
    s
}

pub fn ablate(args: &AblateArgs) -> Result<Vec<AblationRow>, CliError> {
    let axes = Axis::parse_list(&args.axis)?;
    let mut cfg = build_config(&args.cfg, RunConfig::default())?;
    if let Some(b) = args.budget {
        cfg.set("train.epochs", &b.to_string())?;
    }
    if let Some(e) = args.episodes {
        cfg.set("eval.episodes", &e.to_string())?;
    }
    if cfg.train.epochs == 0 || cfg.train.episodes_per_epoch == 0 {
        return Err(CliError::config(
            "budget too small to complete any variant: need at least one epoch of at least one episode",
        ));
    }
    cfg.validate()?;
    let (data, split) = cfg.load_data()?;
    let out = cfg.resolved_output_dir();
    create_dir(&out)?;
    write(&out.join(CONFIG_FILE), cfg.to_kv())?;
    let rows = run_ablation(&cfg, &axes, args.parallel, &data, &split)?;
    for &axis in &axes {
        let subset: Vec<AblationRow> = rows.iter().filter(|r| r.axis == axis).cloned().collect();
        let csv = ablation_csv(&subset);
        let name = format!("ablation_{}", axis.name());
        let rendered = plot::render(&name, &csv)?;
        write(&out.join(format!("{name}.csv")), &csv)?;
        write(&out.join(format!("{name}.txt")), &rendered.table)?;
        print!("{}", rendered.table);
    }
    Ok(rows)
}

/// Renders every input; nothing is written unless all inputs parse.
pub fn plot(args: &PlotArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut rendered = Vec::with_capacity(args.inputs.len());
    for input in &args.inputs {
        let text = std::fs::read_to_string(input)
            .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", input.display())))?;
        let base = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "plot".into());
        // same-named inputs from different runs get numbered outputs
        let mut stem = base.clone();
        let mut n = 1;
        while rendered.iter().any(|(s, _)| *s == stem) {
            n += 1;
            stem = format!("{base}_{n}");
        }
        let r = plot::render(&base, &text).map_err(|e| CliError::runtime(format!("{}: {e}", input.display())))?;
        rendered.push((stem, r));
    }
    let out = resolve_output(&args.out);
    create_dir(&out)?;
    let mut written = Vec::new();
    for (stem, r) in rendered {
        let svg = out.join(format!("{stem}.svg"));
        let txt = out.join(format!("{stem}.txt"));
        write(&svg, &r.svg)?;
        write(&txt, &r.table)?;
        written.push(svg);
        written.push(txt);
    }
    Ok(written)
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let reports = crate::gradcheck::run_suite(args.eps, 0)?;
    let mut worst = 0.0f64;
    for (name, r) in &reports {
        println!("{name:<32} {:>5} {:.3e}", r.checked, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} over {} parameters", reports.len());
    if worst < args.tolerance {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient check failed: {worst:.3e} >= {:.1e}",
            args.tolerance
        )))
    }
}
