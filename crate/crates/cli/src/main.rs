//! Command line for the anomalous sound detection toolkit: corpus synthesis,
//! two-stage training, statistics fitting, scoring, AUC evaluation, and
//! embedding visualization.
//!
//! Exit codes: 0 on success, 1 on runtime failure (one `error: ...` line on
//! stderr), 2 on usage errors.

mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asdkit_core::audio::{AudioClip, Condition, MachineType};
use asdkit_core::checkpoint::Checkpoint;
use asdkit_core::config::{EncoderConfig, FrontendConfig, PipelineConfig};
use asdkit_core::eval::{build_report, ScoreColumn};
use asdkit_core::manifest::{load_manifest, DatasetManifest, ManifestLayout, Split};
use asdkit_core::model::Model;
use asdkit_core::scorer::{fit_scorer, read_score_csv, score_clip, write_score_csv, ScoreRow};
use asdkit_core::synth::{synth_corpus, SynthSpec};
use asdkit_core::trainer::{load_train_data, TrainSession};
use asdkit_core::tsne::{tsne, TsneConfig};

#[derive(Parser)]
#[command(
    name = "asdkit",
    version,
    about = "Anomalous sound detection: train on normals, score deviations"
)]
struct Cli {
    /// Frontend settings file (flat TOML; see `asdkit train --help`).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed override for synthesis, training, and visualization.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Checkpoint file; written by `train`, read by everything downstream.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus with train/test splits.
    Synth(SynthArgs),
    /// Train one machine type's model, stage 1 then stage 2.
    Train(TrainArgs),
    /// Fit normal statistics, score standardization, and the combination.
    FitStats(FitStatsArgs),
    /// Score the test split and write the score CSV.
    Score(ScoreArgs),
    /// Turn score CSVs into per-ID, per-type, and overall AUC tables.
    Eval(EvalArgs),
    /// Project test-clip embeddings to 2-D scatter plots, one per type.
    Viz(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Machine IDs per machine type (1-4).
    #[arg(long, default_value_t = 4, value_name = "N")]
    ids_per_type: usize,
    /// Training normals per machine ID.
    #[arg(long, default_value_t = 8, value_name = "N")]
    train_per_id: usize,
    /// Held-out test normals per machine ID.
    #[arg(long, default_value_t = 4, value_name = "N")]
    test_normal_per_id: usize,
    /// Test anomalies per machine ID.
    #[arg(long, default_value_t = 4, value_name = "N")]
    test_anomaly_per_id: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 2.0, value_name = "SEC")]
    clip_seconds: f64,
    /// Signal-to-noise ratio of the additive floor, in dB.
    #[arg(long, default_value_t = 20.0, value_name = "DB")]
    snr_db: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus root: either a manifest.csv or a <type>/id_XX/... tree.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Machine type this model treats as normal.
    #[arg(long, value_name = "NAME")]
    machine_type: String,
    /// Run only the current stage, then checkpoint and stop.
    #[arg(long)]
    single_stage: bool,
    #[arg(long, default_value_t = 80, value_name = "N")]
    stage1_epochs: usize,
    #[arg(long, default_value_t = 40, value_name = "N")]
    stage2_epochs: usize,
    #[arg(long, default_value_t = 28, value_name = "N")]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3, value_name = "F")]
    learning_rate: f64,
    /// Maximum global gradient norm; 0 disables clipping.
    #[arg(long, default_value_t = 0.0, value_name = "F")]
    grad_clip: f64,
    /// Use the small test architecture instead of the full encoder.
    #[arg(long)]
    tiny_encoder: bool,
}

#[derive(Args)]
struct FitStatsArgs {
    /// Corpus root providing the training normals.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Labeled corpus whose test split picks the score combination.
    #[arg(long, value_name = "DIR")]
    validation: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Corpus root whose test split is scored.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Score CSV output path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus root providing the labels.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Score CSV; repeat to combine per-type files.
    #[arg(long, value_name = "PATH", required = true)]
    scores: Vec<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    /// Corpus root whose test split is embedded.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory; one tsne_<type>.png per machine type.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 30.0, value_name = "F")]
    perplexity: f64,
    #[arg(long, default_value_t = 1000, value_name = "N")]
    iterations: usize,
}

/// Runtime failures print one line and exit 1; usage failures exit 2.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(2)
        }
    }
}

/// Collapses multi-line messages (e.g. TOML parse errors) so failures stay
/// machine-parsable: exactly one `error: ...` line.
fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Synth(args) => cmd_synth(&cli, args),
        Command::Train(args) => cmd_train(&cli, args),
        Command::FitStats(args) => cmd_fit_stats(&cli, args),
        Command::Score(args) => cmd_score(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Viz(args) => cmd_viz(&cli, args),
    }
}

// =========================================================================
// shared plumbing
// =========================================================================

/// The frontend settings file: flat keys, all optional, defaults otherwise.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FrontendFile {
    sample_rate: Option<u32>,
    fft_size: Option<usize>,
    hop: Option<usize>,
    n_mels: Option<usize>,
    fmin: Option<f64>,
    fmax: Option<f64>,
    log_floor: Option<f64>,
}

fn load_frontend(path: Option<&Path>) -> Result<FrontendConfig, Failure> {
    let mut cfg = FrontendConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        let file: FrontendFile = toml::from_str(&text)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        cfg.sample_rate = file.sample_rate.unwrap_or(cfg.sample_rate);
        cfg.fft_size = file.fft_size.unwrap_or(cfg.fft_size);
        cfg.hop_size = file.hop.unwrap_or(cfg.hop_size);
        cfg.mel_bins = file.n_mels.unwrap_or(cfg.mel_bins);
        cfg.fmin = file.fmin.unwrap_or(cfg.fmin);
        cfg.fmax = file.fmax.unwrap_or(cfg.fmax);
        cfg.log_floor = file.log_floor.unwrap_or(cfg.log_floor);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(cli: &Cli) -> Result<&Path, Failure> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| Failure::Usage("this command needs --checkpoint <PATH>".into()))
}

/// Loads a corpus from either layout: a manifest.csv if present, otherwise
/// a directory scan.
fn load_corpus(root: &Path) -> Result<DatasetManifest, Failure> {
    let layout = if root.join("manifest.csv").is_file() {
        ManifestLayout::FlatCsv
    } else {
        ManifestLayout::Mimii
    };
    Ok(load_manifest(root, layout)?)
}

/// Test-split entries of one machine type, with decoded audio.
fn load_test_clips(
    manifest: &DatasetManifest,
    machine_type: &MachineType,
) -> Result<Vec<(asdkit_core::manifest::ManifestEntry, AudioClip<f64>)>, Failure> {
    let clips = manifest.load_clips::<f64>(Split::Test, Some(machine_type))?;
    if clips.is_empty() {
        return Err(Failure::Runtime(format!(
            "no test clips for machine type {machine_type}"
        )));
    }
    Ok(clips)
}

// =========================================================================
// subcommands
// =========================================================================

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> CmdResult {
    if !(1..=4).contains(&args.ids_per_type) {
        return Err(Failure::Usage("--ids-per-type must be between 1 and 4".into()));
    }
    let mut spec = SynthSpec {
        clip_seconds: args.clip_seconds,
        train_per_id: args.train_per_id,
        test_normal_per_id: args.test_normal_per_id,
        test_anomaly_per_id: args.test_anomaly_per_id,
        noise_snr_db: args.snr_db,
        ..SynthSpec::default()
    };
    for machine in spec.machines.iter_mut() {
        machine.fundamentals_hz.truncate(args.ids_per_type);
    }
    let manifest = synth_corpus(&spec, cli.seed.unwrap_or(0), &args.out)?;
    let train = manifest.entries.iter().filter(|e| e.split == Split::Train).count();
    println!(
        "wrote {} clips ({} train, {} test) under {}",
        manifest.entries.len(),
        train,
        manifest.entries.len() - train,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> CmdResult {
    let ckpt_path = checkpoint_path(cli)?;
    // Validate the settings file before touching the (possibly large) corpus.
    let frontend = load_frontend(cli.config.as_deref())?;
    let manifest = load_corpus(&args.data)?;
    let target = MachineType(args.machine_type.clone());
    let data = load_train_data::<f64>(&manifest, &target)?;

    let mut session = if ckpt_path.is_file() {
        eprintln!("resuming from {}", ckpt_path.display());
        TrainSession::resume(Checkpoint::<f64>::load(ckpt_path)?)?
    } else {
        let mut config = PipelineConfig::default();
        config.frontend = frontend;
        config.encoder =
            if args.tiny_encoder { EncoderConfig::tiny() } else { EncoderConfig::default() };
        config.encoder.input_dim = config.frontend.mel_bins;
        config.train.stage1_epochs = args.stage1_epochs;
        config.train.stage2_epochs = args.stage2_epochs;
        config.train.batch_size = args.batch_size;
        config.train.learning_rate = args.learning_rate;
        config.train.grad_clip = (args.grad_clip > 0.0).then_some(args.grad_clip);
        if let Some(seed) = cli.seed {
            config.train.seed = seed;
        }

        let mut ids: Vec<u32> = manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Train && e.machine_type == target)
            .map(|e| e.machine_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let model = Model::<f64>::init(&config, target, ids, config.train.seed)?;
        TrainSession::start(model)
    };

    println!("epoch,stage,l_type,l_id,l_aug,total");
    if args.single_stage {
        let total = match session.stage {
            asdkit_core::heads::Stage::One => session.model.config.train.stage1_epochs,
            asdkit_core::heads::Stage::Two => session.model.config.train.stage2_epochs,
        } as u64;
        let remaining = total.saturating_sub(session.epochs_done);
        for _ in 0..remaining {
            for log in session.run_epochs(&data, 1)? {
                println!("{log}");
            }
            session.to_checkpoint(None).save(ckpt_path)?;
        }
        if session.stage == asdkit_core::heads::Stage::One {
            session.advance_stage();
        }
        session.to_checkpoint(None).save(ckpt_path)?;
    } else {
        session.train_full(&data, Some(ckpt_path), |log| println!("{log}"))?;
    }
    eprintln!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn cmd_fit_stats(cli: &Cli, args: &FitStatsArgs) -> CmdResult {
    let ckpt_path = checkpoint_path(cli)?;
    let mut ckpt = Checkpoint::<f64>::load(ckpt_path)?;
    let manifest = load_corpus(&args.data)?;
    let target = ckpt.model.target_type.clone();

    let data = load_train_data::<f64>(&manifest, &target)?;
    let normals: Vec<(u32, AudioClip<f64>)> =
        data.normals.into_iter().map(|item| (item.machine_id, item.clip)).collect();

    let validation: Vec<(u32, AudioClip<f64>, bool)> = match &args.validation {
        None => Vec::new(),
        Some(root) => load_test_clips(&load_corpus(root)?, &target)?
            .into_iter()
            .map(|(entry, clip)| {
                (entry.machine_id, clip, entry.condition == Condition::Anomaly)
            })
            .collect(),
    };

    let state = fit_scorer(&ckpt.model, &normals, &validation)?;
    let members: Vec<&str> =
        state.combination.members.iter().map(|k| k.name()).collect();
    println!(
        "fitted statistics for {} machine IDs; combination: {}",
        state.stats.by_id.len(),
        members.join("+")
    );
    ckpt.scorer = Some(state);
    ckpt.save(ckpt_path)?;
    Ok(())
}

fn cmd_score(cli: &Cli, args: &ScoreArgs) -> CmdResult {
    let ckpt_path = checkpoint_path(cli)?;
    let ckpt = Checkpoint::<f64>::load(ckpt_path)?;
    let state = ckpt.scorer.as_ref().ok_or_else(|| {
        Failure::Runtime(format!(
            "{} holds no fitted statistics; run fit-stats first",
            ckpt_path.display()
        ))
    })?;
    let manifest = load_corpus(&args.data)?;
    let target = &ckpt.model.target_type;

    let mut rows = Vec::new();
    for (entry, clip) in load_test_clips(&manifest, target)? {
        let (raw, combined) = score_clip(&ckpt.model, state, &clip, entry.machine_id)?;
        // Paths go into the CSV relative to the corpus root so the file can
        // travel with the corpus.
        let path = entry
            .path
            .strip_prefix(&args.data)
            .unwrap_or(&entry.path)
            .to_string_lossy()
            .into_owned();
        rows.push(ScoreRow {
            path,
            machine_type: target.0.clone(),
            machine_id: entry.machine_id,
            a_out: raw.out,
            a_arc: raw.arc,
            a_maha: raw.maha,
            combined,
        });
    }
    if let Some(dir) = args.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_score_csv(&args.out, &rows)?;
    println!("wrote {} scores to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_eval(_cli: &Cli, args: &EvalArgs) -> CmdResult {
    let manifest = load_corpus(&args.data)?;
    let mut rows = Vec::new();
    for path in &args.scores {
        for mut row in read_score_csv(path)? {
            // Score files store corpus-relative paths; resolve them against
            // the corpus root to match the manifest.
            let p = Path::new(&row.path);
            if p.is_relative() {
                row.path = args.data.join(p).to_string_lossy().into_owned();
            }
            rows.push(row);
        }
    }
    let report = build_report(&rows, &manifest, &ScoreColumn::ALL)?;
    print!("{}", report.render());
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent() {
            std::fs::create_dir_all(dir)?;
        }
        report.write_csv(out)?;
        eprintln!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_viz(cli: &Cli, args: &VizArgs) -> CmdResult {
    let ckpt_path = checkpoint_path(cli)?;
    let ckpt = Checkpoint::<f64>::load(ckpt_path)?;
    let manifest = load_corpus(&args.data)?;
    let seed = cli.seed.unwrap_or(0);

    let mut types: Vec<MachineType> =
        manifest.entries.iter().map(|e| e.machine_type.clone()).collect();
    types.sort_by(|a, b| a.0.cmp(&b.0));
    types.dedup();

    std::fs::create_dir_all(&args.out)?;
    for machine_type in &types {
        let clips = load_test_clips(&manifest, machine_type)?;
        let mut embeddings = Vec::with_capacity(clips.len());
        for (_, clip) in &clips {
            embeddings.push(ckpt.model.embed_clip(clip)?);
        }
        let cfg = TsneConfig {
            perplexity: args.perplexity,
            iterations: args.iterations,
            seed,
            ..TsneConfig::default()
        };
        let result = tsne(&embeddings, &cfg)?;
        if let Some(warning) = &result.warning {
            eprintln!("warning: {}: {warning}", machine_type.0);
        }

        let points: Vec<plot::ScatterPoint> = clips
            .iter()
            .zip(&result.coords)
            .map(|((entry, _), &[x, y])| plot::ScatterPoint {
                x,
                y,
                machine_id: entry.machine_id,
                anomalous: entry.condition == Condition::Anomaly,
            })
            .collect();

        let mut legend = String::new();
        let mut ids: Vec<u32> = clips.iter().map(|(e, _)| e.machine_id).collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let _ = write!(legend, "id_{id:02} ");
        }
        let out = args.out.join(format!("tsne_{}.png", machine_type.0));
        plot::render_scatter(
            &points,
            &out,
            &[
                ("perplexity", format!("{}", result.perplexity)),
                ("seed", format!("{seed}")),
                ("iterations", format!("{}", args.iterations)),
                ("machine_ids", legend.trim_end().to_string()),
            ],
        )?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
