use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use floc_core::cgsr::{remote_health, PromptMode, RefinerKind};
use floc_core::config::{Overrides, RunConfig};
use floc_core::data::DatasetLayout;
use floc_core::eval::{robustness_sweep, write_report, Degradation, EvalReport};
use floc_core::imgproc::read_png;
use floc_core::model::{read_checkpoint, write_checkpoint, Model};
use floc_core::pipeline::{
    ablate_prompt_modes, ablate_training, corpus_accuracy, load_train_split, load_val_split, localize_split, score_split,
    synth_splits, train_model, write_localizations, Localizer, TrainingAblation,
};
use floc_core::{Error, Result};

const MODEL_FILE: &str = "model.floc";
const TRAIN_LOG_FILE: &str = "train_log.json";

#[derive(Parser, Debug)]
#[command(name = "floc", version, about = "Weakly supervised image forgery localization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Inference sizes, comma separated.
    #[arg(long, global = true, value_name = "a,b,c", value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    #[arg(long, global = true, value_parser = ["none", "region", "remote"])]
    refiner: Option<String>,
    #[arg(long, global = true, value_name = "URL")]
    remote_url: Option<String>,
    #[arg(long, global = true, value_parser = ["null", "point", "box", "box+point"])]
    prompt_mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Dataset root holding `train/` and `val/`, or a single split.
    #[arg(long, global = true, value_name = "DIR", default_value = "data")]
    data: PathBuf,
    /// Trained model; defaults to `<out>/model.floc`.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the image-level labels of the training split.
    Train,
    /// Localize every PNG under a file or directory.
    Infer {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Score the validation split and write the report.
    Eval,
    /// Compare model or prompt variants.
    Ablate {
        #[arg(value_parser = ["cabl", "depth", "operator", "prompt"])]
        what: String,
    },
    /// P-F1 under increasing JPEG compression or Gaussian blur.
    Robustness {
        #[arg(value_parser = ["jpeg", "blur"])]
        kind: String,
        /// Levels to sweep instead of the defaults.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<u32>>,
    },
    /// Write a synthetic corpus to `<out>/train` and `<out>/val`.
    Synth,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let overrides = Overrides {
            seed: self.seed,
            scales: self.scales.clone(),
            refiner: self.refiner.as_deref().map(str::parse::<RefinerKind>).transpose()?,
            remote_url: self.remote_url.clone(),
            prompt_mode: self.prompt_mode.as_deref().map(str::parse::<PromptMode>).transpose()?,
        };
        let cfg = base.with_overrides(&overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(MODEL_FILE))
    }

    fn load_model(&self) -> Result<Model<f32>> {
        read_checkpoint(self.checkpoint())
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let io = |e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(input).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG images under {}", input.display())));
    }
    Ok(files)
}

fn warn_if_remote_down(cfg: &RunConfig) {
    if let (RefinerKind::Remote, Some(url)) = (cfg.refiner, &cfg.remote_url) {
        if !remote_health(url, Duration::from_secs(cfg.remote_timeout_secs)) {
            eprintln!("warning: refiner at {url} is not healthy; coarse masks will be used");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = c.run_config()?;
    match &cli.command {
        Command::Synth => {
            let (train, val) = synth_splits(&cfg, &c.out)?;
            println!("wrote {} and {}", train.root.display(), val.root.display());
        }
        Command::Train => {
            let data = load_train_split(&c.data)?;
            create_dir(&c.out)?;
            let (model, log) = train_model(&cfg, cfg.model_config(), &data, |e| {
                eprintln!("epoch {:>3}  lr {:.2e}  loss {:.4}  acc {:.3}", e.epoch + 1, e.lr, e.mean_loss, e.accuracy);
            })?;
            write_checkpoint(c.out.join(MODEL_FILE), &model)?;
            let log_path = c.out.join(TRAIN_LOG_FILE);
            let text = serde_json::to_string_pretty(&log)? + "\n";
            fs::write(&log_path, text).map_err(|e| Error::Io { path: log_path, source: e })?;
            println!("accuracy {:.4}", corpus_accuracy(&model, &data)?);
        }
        Command::Infer { input } => {
            let model = c.load_model()?;
            warn_if_remote_down(&cfg);
            let loc = Localizer::from_config(&model, &cfg)?;
            let files = png_inputs(input)?;
            let mut stdout = std::io::stdout().lock();
            let mut names = Vec::with_capacity(files.len());
            let mut locs = Vec::with_capacity(files.len());
            for f in &files {
                let l = loc.localize(&read_png(f)?)?;
                let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if let Some(err) = &l.refine_error {
                    eprintln!("warning: {name}: {err}");
                }
                // a closed pipe must not abort the run before the masks are written
                let _ = writeln!(stdout, "{name}\t{:.6}", l.score);
                names.push(name);
                locs.push(l);
            }
            write_localizations(&c.out, &names, &locs, &cfg.scales)?;
        }
        Command::Eval => {
            let model = c.load_model()?;
            warn_if_remote_down(&cfg);
            let val = load_val_split(&c.data)?;
            let loc = Localizer::from_config(&model, &cfg)?;
            let results = localize_split(&loc, &val)?;
            let names: Vec<String> = val.iter().map(|s| s.name.clone()).collect();
            write_localizations(&c.out, &names, &results.localizations, &cfg.scales)?;
            let scores = score_split(&split_name(&c.data), &val, &results)?;
            println!(
                "{}: images {}  P-F1 {:.4}  I-AUC {}  accuracy {:.4}",
                scores.name,
                scores.images,
                scores.p_f1,
                scores.i_auc.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                scores.accuracy
            );
            let report = EvalReport {
                datasets: vec![scores],
                ..EvalReport::default()
            };
            write_report(&c.out, &report)?;
        }
        Command::Ablate { what } => {
            let val = load_val_split(&c.data)?;
            let table = if what == "prompt" {
                let model = c.load_model()?;
                warn_if_remote_down(&cfg);
                ablate_prompt_modes(&Localizer::from_config(&model, &cfg)?, &val)?
            } else {
                let kind: TrainingAblation = what.parse()?;
                let train = load_train_split(&c.data)?;
                ablate_training(&cfg, kind, &train, &val, |setting, e| {
                    eprintln!("[{setting}] epoch {:>3}  loss {:.4}", e.epoch + 1, e.mean_loss);
                })?
            };
            for row in &table.rows {
                println!("{:<14} P-F1 {:.4}", row.setting, row.p_f1);
            }
            let report = EvalReport {
                ablations: vec![table],
                ..EvalReport::default()
            };
            write_report(&c.out, &report)?;
        }
        Command::Robustness { kind, levels } => {
            let kind: Degradation = kind.parse()?;
            let levels = levels.clone().unwrap_or_else(|| kind.default_levels().to_vec());
            let model = c.load_model()?;
            warn_if_remote_down(&cfg);
            let val = load_val_split(&c.data)?;
            let curve = robustness_sweep(&Localizer::from_config(&model, &cfg)?, &val, kind, &levels)?;
            for p in &curve.points {
                println!("{kind} {:>3}  P-F1 {:.4}", p.level, p.p_f1);
            }
            let report = EvalReport {
                curves: vec![curve],
                ..EvalReport::default()
            };
            write_report(&c.out, &report)?;
        }
    }
    Ok(())
}

/// `val` when the data root has a `val/` split, else the root's own name.
fn split_name(data: &Path) -> String {
    if data.join("val").is_dir() {
        return "val".into();
    }
    DatasetLayout::new(data)
        .root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
