//! `egs`: dataset synthesis, training, embedding export, retrieval
//! evaluation, and the property self-check gate.

use clap::{Parser, Subcommand, ValueEnum};
use egs_core::backbone::FeatureField;
use egs_core::data::{
    generate_synthetic, load_image, resample_area, scan_dataset, Split, SyntheticSceneSpec,
};
use egs_core::model::{EgsModel, ModelConfig};
use egs_core::retrieval::{
    evaluate_pair, read_embeddings, write_embeddings, GalleryIndex, MetricsReport, View,
};
use egs_core::selfcheck::{run_all, Fault};
use egs_core::tensor::Tensor;
use egs_core::train::{
    format_log_line, load_checkpoint, save_checkpoint, TrainConfig, Trainer,
};
use egs_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Whole-run configuration: one JSON document, unknown keys rejected,
/// every field defaulted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Config {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Parser)]
#[command(name = "egs", version, about = "Cross-view geo-localization workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ViewArg {
    Drone,
    Satellite,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> View {
        match v {
            ViewArg::Drone => View::Drone,
            ViewArg::Satellite => View::Satellite,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    BrokenRotation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic cross-view dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        variants: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        tint: f64,
        /// Overwrite into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on the train split of a dataset tree.
    Train {
        /// JSON config; defaults apply to every omitted field.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; --config, if also given, replaces
        /// the embedded schedule (the model shape stays fixed).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Export embeddings for one view of one split.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        view: ViewArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank queries against a gallery and report retrieval metrics.
    Eval {
        #[arg(long)]
        query_emb: PathBuf,
        #[arg(long)]
        gallery_emb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the named property checks; nonzero exit on any failure.
    Selfcheck {
        /// Deliberately break a stimulus path (harness sensitivity probe).
        #[arg(long, value_enum, hide = true)]
        fault: Option<FaultArg>,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("EGS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() {
    init_threads();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            classes,
            side,
            seed,
            variants,
            noise,
            tint,
            force,
        } => cmd_synth(&out, classes, side, seed, variants, noise, tint, force),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(config.as_deref(), &data, &out, resume.as_deref()),
        Command::Embed {
            ckpt,
            data,
            view,
            split,
            out,
        } => cmd_embed(&ckpt, &data, view.into(), split.into(), &out),
        Command::Eval {
            query_emb,
            gallery_emb,
            out,
        } => cmd_eval(&query_emb, &gallery_emb, &out),
        Command::Selfcheck { fault } => cmd_selfcheck(match fault {
            None => Fault::None,
            Some(FaultArg::BrokenRotation) => Fault::BrokenRotation,
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    classes: usize,
    side: usize,
    seed: u64,
    variants: usize,
    noise: f64,
    tint: f64,
    force: bool,
) -> Result<()> {
    if out.exists() {
        let occupied = std::fs::read_dir(out)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    let spec = SyntheticSceneSpec {
        classes,
        side,
        variants,
        noise,
        tint,
        seed,
        ..Default::default()
    };
    let manifest = generate_synthetic(&spec, out)?;
    println!(
        "wrote {} paired classes ({} drone variants each) under {}",
        manifest.len(),
        variants,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let manifest = scan_dataset(data, Split::Train)?;
    for w in &manifest.warnings {
        eprintln!("warning: {}", w);
    }

    let mut trainer = match resume {
        Some(ckpt) => {
            let mut t = load_checkpoint(ckpt)?.into_trainer(&manifest)?;
            if config.is_some() {
                // Model shape stays with the checkpoint; the schedule
                // (epochs, lr, ...) follows the freshly given config.
                t.set_schedule(load_config(config)?.train)?;
            }
            t
        }
        None => {
            let cfg = load_config(config)?;
            cfg.model.validate()?;
            cfg.train.validate()?;
            let model = EgsModel::new(cfg.model, cfg.train.seed)?;
            Trainer::new(model, cfg.train, &manifest)?
        }
    };

    std::fs::create_dir_all(out)?;
    let echo = Config {
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
    };
    let echo_bytes = serde_json::to_vec_pretty(&echo)
        .map_err(|e| Error::Format(format!("config echo: {}", e)))?;
    write_atomic(&out.join("config.json"), &echo_bytes)?;

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("loss.csv"))?;

    let spe = trainer.steps_per_epoch();
    let total = trainer.total_steps();
    if trainer.step >= total {
        println!("nothing to do: step {} of {}", trainer.step, total);
        return Ok(());
    }

    let mut last_epoch_loss = f64::NAN;
    while trainer.step < total {
        let record = trainer.train_step()?;
        writeln!(log, "{}", format_log_line(&record))?;
        last_epoch_loss = record.loss.total;
        let next = record.step + 1;
        if next % spe == 0 || next == total {
            let path = out.join(format!("ckpt_{}.egsc", next));
            save_checkpoint(&path, &trainer)?;
            if next % spe == 0 {
                println!(
                    "epoch {}/{} step {} loss {:.6}",
                    next / spe,
                    total / spe,
                    next,
                    last_epoch_loss
                );
            }
        }
    }
    println!("finished at step {} (loss {:.6})", trainer.step, last_epoch_loss);
    Ok(())
}

fn cmd_embed(ckpt: &Path, data: &Path, view: View, split: Split, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt)?.into_model()?;
    let manifest = scan_dataset(data, split)?;
    for w in &manifest.warnings {
        eprintln!("warning: {}", w);
    }
    if manifest.is_empty() {
        return Err(Error::Data(format!(
            "no paired classes under {} ({})",
            data.display(),
            split.dir_name()
        )));
    }

    let side = model.config.image_side;
    let mut ids: Vec<u64> = Vec::new();
    let mut paths: Vec<&PathBuf> = Vec::new();
    for entry in &manifest.classes {
        let files = match view {
            View::Drone => &entry.drone,
            View::Satellite => &entry.satellite,
        };
        for p in files {
            ids.push(entry.id);
            paths.push(p);
        }
    }

    let dim = model.config.descriptor_dim();
    let mut values: Vec<f32> = Vec::with_capacity(ids.len() * dim);
    for chunk in paths.chunks(8) {
        let mut images = Vec::with_capacity(chunk.len());
        for p in chunk {
            let img = load_image(p)?;
            let s = img.shape();
            let sized = if s[1] == side && s[2] == side {
                img
            } else {
                resample_area(&img, side, side)?
            };
            images.push(FeatureField::from_image(sized)?);
        }
        let emb = model.embed(&images)?;
        values.extend_from_slice(emb.values());
    }
    let embeddings = Tensor::new(vec![ids.len(), dim], values)?;
    write_embeddings(out, &ids, &embeddings)?;
    println!(
        "wrote {} embeddings of dim {} to {}",
        ids.len(),
        dim,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalInputs {
    query: String,
    gallery: String,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    inputs: EvalInputs,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

fn cmd_eval(query_emb: &Path, gallery_emb: &Path, out: &Path) -> Result<()> {
    let (qids, q) = read_embeddings(query_emb)?;
    let (gids, g) = read_embeddings(gallery_emb)?;
    let queries = GalleryIndex::with_uniform_view(q, qids, View::Drone)?;
    let gallery = GalleryIndex::with_uniform_view(g, gids, View::Satellite)?;
    let report = evaluate_pair(&queries, &gallery)?;

    let output = EvalOutput {
        inputs: EvalInputs {
            query: query_emb.display().to_string(),
            gallery: gallery_emb.display().to_string(),
        },
        report: &report,
    };
    let bytes = serde_json::to_vec_pretty(&output)
        .map_err(|e| Error::Format(format!("metrics report: {}", e)))?;
    write_atomic(out, &bytes)?;

    println!(
        "queries {} gallery {} | AP {:.4} R@1 {:.4} R@5 {:.4} R@10 {:.4} R@1% {:.4}",
        report.queries,
        report.gallery_size,
        report.mean.ap,
        report.mean.r1,
        report.mean.r5,
        report.mean.r10,
        report.mean.r1pct
    );
    Ok(())
}

fn cmd_selfcheck(fault: Fault) -> Result<()> {
    let outcomes = run_all(fault);
    let mut failures = 0;
    for o in &outcomes {
        if o.passed {
            println!("PASS {}", o.name);
        } else {
            println!("FAIL {}: {}", o.name, o.detail);
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Eval(format!(
            "{} of {} checks failed",
            failures,
            outcomes.len()
        )));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}
