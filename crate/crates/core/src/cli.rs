//! The `tagood` command line: simulate, build-vocab, train, score, eval,
//! ablate, and rerun from a `run.meta`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgMatches, Command};
use thiserror::Error;

use crate::centers::load_centers;
use crate::config::{read_run_meta, ConfigError, RunConfig, KEYS, RUN_META_FILE};
use crate::decompose::{count_tag_frequencies, select_ind_tags, IndVocab};
use crate::error::Error;
use crate::metrics::{evaluate, format_report, ReportRow};
use crate::net::load_params;
use crate::score::{mean_center_baseline, read_scores, score_dataset, write_scores, Detector, Metric, ScoredSample};
use crate::sim::{generate_dataset, GROUND_TRUTH_FILE};
use crate::store::{ManifestEntry, Split, Store, StoreError, MANIFEST_FILE, VOCAB_FILE};
use crate::train::{decompose_split, train, TrainConfig, CENTERS_FILE, PARAMS_FILE, REPORT_FILE};

pub const IND_VOCAB_FILE: &str = "ind_vocab.tsv";
pub const EVAL_REPORT_FILE: &str = "report.csv";
pub const EVAL_SAMPLES_FILE: &str = "samples.csv";

pub const COMMANDS: [&str; 6] = ["simulate", "build-vocab", "train", "score", "eval", "ablate"];

#[derive(Debug, Error)]
pub enum CliError {
    /// `--help` or `--version` text; not a failure.
    #[error("{0}")]
    Info(String),
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Run(#[from] Error),
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    /// 2 configuration, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => 0,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Run(e) if e.is_data_error() => 3,
            CliError::Run(_) => 4,
        }
    }
}

fn command() -> Command {
    let with_keys = |cmd: Command| {
        let cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("key = value config file"));
        KEYS.iter().fold(cmd, |cmd, k| {
            cmd.arg(Arg::new(k.name).long(k.name).value_name("VALUE").action(ArgAction::Append).help(k.help))
        })
    };
    let about = [
        "Generate a synthetic store with ground truth",
        "Pick the most frequent tag of every IND class",
        "Train the projection network and class centers",
        "Score the test splits",
        "AUROC / FPR95 report over score files",
        "Run tag_score, mean_cs, ce_only and full, then report",
    ];
    let mut cmd = Command::new("tagood")
        .about("OOD detection from tagging-model attention and learned class centers")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS.into_iter().zip(about) {
        cmd = cmd.subcommand(with_keys(Command::new(name).about(about)));
    }
    cmd.subcommand(
        Command::new("rerun")
            .about("Repeat a run from its run.meta")
            .arg(Arg::new("meta").required(true).value_name("RUN_META")),
    )
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut flags = Vec::new();
    for k in KEYS {
        if let Some(values) = m.get_many::<String>(k.name) {
            flags.extend(values.map(|v| (k.name.to_string(), v.clone())));
        }
    }
    Ok(match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(Path::new(path), &flags)?,
        None => RunConfig::resolve(&Default::default(), &flags)?,
    })
}

/// Parses `args` (including the program name) and executes the command.
/// Returns the artifact paths written.
pub fn run_with<I, T>(args: I) -> Result<Vec<PathBuf>, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            CliError::Info(e.to_string())
        }
        _ => CliError::Usage(e.to_string()),
    })?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if name == "rerun" {
        let meta = Path::new(sub.get_one::<String>("meta").expect("required"));
        let (command, cfg) = read_run_meta(meta)?;
        return dispatch(&command, &cfg);
    }
    dispatch(name, &resolve(sub)?)
}

/// Entry point for the binary: prints `OUT <path>` lines on stdout and a
/// diagnostic on stderr, returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run_with(args) {
        Ok(paths) => {
            let mut stdout = std::io::stdout().lock();
            for p in paths {
                let _ = writeln!(stdout, "OUT {}", p.display());
            }
            0
        }
        Err(CliError::Info(msg)) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("tagood: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &str, cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let out = cfg.path("out")?;
    let mut written = match command {
        "simulate" => simulate(cfg, &out)?,
        "build-vocab" => build_vocab(cfg, &out)?,
        "train" => train_cmd(cfg, &out)?,
        "score" => score_cmd(cfg, &out)?,
        "eval" => eval_cmd(cfg, &out)?,
        "ablate" => ablate(cfg, &out)?,
        other => return Err(CliError::Usage(format!("unknown command {other:?}"))),
    };
    let meta = out.join(RUN_META_FILE);
    fs::write(&meta, cfg.to_meta(command)).map_err(|e| StoreError::io(&meta, e))?;
    written.push(meta);
    Ok(written)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let world = cfg.world()?;
    generate_dataset(&world, out).map_err(Error::from)?;
    Ok(vec![out.join(MANIFEST_FILE), out.join(VOCAB_FILE), out.join(GROUND_TRUTH_FILE)])
}

fn build_vocab(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let store = Store::open(&cfg.path("store")?)?;
    let freq = count_tag_frequencies(&store).map_err(Error::from)?;
    let vocab = select_ind_tags(&freq).map_err(Error::from)?;
    create_dir(out)?;
    let path = out.join(IND_VOCAB_FILE);
    vocab.save(&path).map_err(Error::from)?;
    Ok(vec![path])
}

fn load_vocab(cfg: &RunConfig) -> Result<IndVocab, CliError> {
    Ok(IndVocab::load(&cfg.path("vocab")?).map_err(Error::from)?)
}

fn train_into(store: &Store, vocab: &IndVocab, tc: &TrainConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    train(store, vocab, tc, Some(dir))?;
    Ok(vec![dir.join(PARAMS_FILE), dir.join(CENTERS_FILE), dir.join(REPORT_FILE)])
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let tc = cfg.train()?;
    let store = Store::open(&cfg.path("store")?)?;
    train_into(&store, &load_vocab(cfg)?, &tc, out)
}

fn test_entries(store: &Store) -> Vec<&ManifestEntry> {
    store.manifest.entries.iter().filter(|e| e.split != Split::Train).collect()
}

fn metrics_of(cfg: &RunConfig) -> Result<Vec<Metric>, CliError> {
    match cfg.raw("metric") {
        "all" => Ok(vec![Metric::Cosine, Metric::Euclidean, Metric::Kl, Metric::TagScore, Metric::MeanCs]),
        _ => Ok(vec![cfg.get("metric")?]),
    }
}

/// Scores the test splits with one detector per metric; `variant` names the
/// output file (`<variant>.csv`), defaulting to the metric.
fn score_metric(
    cfg: &RunConfig,
    store: &Store,
    vocab: &IndVocab,
    metric: Metric,
    model: Option<(&Path, &Path)>,
    out_file: &Path,
) -> Result<PathBuf, CliError> {
    let dcfg = cfg.score_decomposition()?;
    let entries = test_entries(store);
    let scores = match metric {
        Metric::TagScore => score_dataset(store, &entries, vocab, &Detector::TagScore, &dcfg)?,
        Metric::MeanCs => {
            // class means of raw train objects, cut at the training threshold
            let (train, _) = decompose_split(store, Split::Train, vocab, &cfg.train()?.decomposition())?;
            let centers = mean_center_baseline(&train, vocab.num_classes())?;
            score_dataset(store, &entries, vocab, &Detector::RawMeanCenters { centers: &centers }, &dcfg)?
        }
        _ => {
            let (params_path, centers_path) = match model {
                Some(m) => (m.0.to_path_buf(), m.1.to_path_buf()),
                None => (cfg.path("params")?, cfg.path("centers")?),
            };
            let params = load_params(&params_path).map_err(Error::from)?;
            let centers = load_centers(&centers_path).map_err(Error::from)?;
            score_dataset(store, &entries, vocab, &Detector::Projected { params: &params, centers: &centers, metric }, &dcfg)?
        }
    };
    write_scores(&scores, out_file)?;
    Ok(out_file.to_path_buf())
}

fn score_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let store = Store::open(&cfg.path("store")?)?;
    let vocab = load_vocab(cfg)?;
    create_dir(out)?;
    metrics_of(cfg)?
        .into_iter()
        .map(|m| score_metric(cfg, &store, &vocab, m, None, &out.join(format!("{}.csv", m.as_str()))))
        .collect()
}

/// One evaluated score file.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub samples: Vec<ScoredSample>,
}

/// Checks that every variant scored the same records with the same splits.
pub fn check_aligned(variants: &[Variant]) -> Result<(), Error> {
    let Some(first) = variants.first() else { return Ok(()) };
    let key = |v: &Variant| {
        let mut k: Vec<(String, Split)> = v.samples.iter().map(|s| (s.record_id.clone(), s.split)).collect();
        k.sort();
        k
    };
    let reference = key(first);
    for v in &variants[1..] {
        if key(v) != reference {
            return Err(Error::Data(format!(
                "score files {} and {} cover different records or splits",
                first.name, v.name
            )));
        }
    }
    Ok(())
}

pub fn report_rows(variants: &[Variant]) -> Result<Vec<ReportRow>, Error> {
    check_aligned(variants)?;
    variants
        .iter()
        .map(|v| {
            let pick = |ind: bool| v.samples.iter().filter(|s| s.split.is_ind() == ind).map(|s| s.score).collect::<Vec<_>>();
            let metric = v.samples.first().map_or("-".to_string(), |s| s.metric.to_string());
            Ok(ReportRow { variant: v.name.clone(), metric, result: evaluate(&pick(true), &pick(false))? })
        })
        .collect()
}

/// `variant,id,split,score,is_ind` for external plotting.
pub fn format_sample_export(variants: &[Variant]) -> String {
    let mut out = String::from("variant,id,split,score,is_ind\n");
    for v in variants {
        for s in &v.samples {
            out += &format!("{},{},{},{},{}\n", v.name, s.record_id, s.split, s.score, s.split.is_ind() as u8);
        }
    }
    out
}

fn write_eval(variants: &[Variant], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = report_rows(variants)?;
    create_dir(out)?;
    let report = out.join(EVAL_REPORT_FILE);
    fs::write(&report, format_report(&rows)).map_err(|e| StoreError::io(&report, e))?;
    let samples = out.join(EVAL_SAMPLES_FILE);
    fs::write(&samples, format_sample_export(variants)).map_err(|e| StoreError::io(&samples, e))?;
    Ok(vec![report, samples])
}

fn eval_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let files: Vec<&str> = cfg.raw("scores").split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if files.is_empty() {
        return Err(CliError::Usage("no score files given (set `scores`)".into()));
    }
    let mut variants = Vec::new();
    for f in files {
        let path = Path::new(f);
        let name = path.file_stem().map_or_else(|| f.to_string(), |s| s.to_string_lossy().into_owned());
        variants.push(Variant { name, samples: read_scores(path)? });
    }
    write_eval(&variants, out)
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let store = Store::open(&cfg.path("store")?)?;
    create_dir(out)?;
    let mut written = Vec::new();
    // without a given vocabulary, build the greedy one from the store
    let vocab = if cfg.raw("vocab").is_empty() {
        let vocab = select_ind_tags(&count_tag_frequencies(&store).map_err(Error::from)?).map_err(Error::from)?;
        let path = out.join(IND_VOCAB_FILE);
        vocab.save(&path).map_err(Error::from)?;
        written.push(path);
        vocab
    } else {
        load_vocab(cfg)?
    };
    let full = cfg.train()?;
    let ce_only = TrainConfig { beta: 0.0, ..full.clone() };
    let mut score_files = vec![
        score_metric(cfg, &store, &vocab, Metric::TagScore, None, &out.join("tag_score.csv"))?,
        score_metric(cfg, &store, &vocab, Metric::MeanCs, None, &out.join("mean_cs.csv"))?,
    ];
    for (name, tc) in [("ce_only", &ce_only), ("full", &full)] {
        let dir = out.join(name);
        written.extend(train_into(&store, &vocab, tc, &dir)?);
        let model = (dir.join(PARAMS_FILE), dir.join(CENTERS_FILE));
        let file = out.join(format!("{name}.csv"));
        score_files.push(score_metric(cfg, &store, &vocab, Metric::Cosine, Some((&model.0, &model.1)), &file)?);
    }
    let variants = score_files
        .iter()
        .map(|p| {
            let name = p.file_stem().expect("named file").to_string_lossy().into_owned();
            Ok(Variant { name, samples: read_scores(p)? })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    written.extend(score_files);
    written.extend(write_eval(&variants, out)?);
    Ok(written)
}
