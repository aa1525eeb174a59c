//! Command-line front end over the library pipeline.
//!
//! Every subcommand maps onto one public library entry point; nothing in here
//! computes anything itself. Errors print to stderr and become the process
//! exit code through `Error::exit_code`, so scripts can tell configuration
//! mistakes (2), shape violations (3), bad inputs and checkpoints (4), and
//! training divergence (5) apart.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;

use weightmark::attacks::{apply_attack, standard_kinds, AttackOutcome, AttackSpec};
use weightmark::evaluation::{evaluate_instance, report_stem, write_robustness_report};
use weightmark::pipeline::{
    finetune, ingest_audio, load_config, load_finetuned, load_instance, mint, pretrain,
    synthetic_dataset, verify_merge, Dataset, FinetuneSystem, TrainingConfig, MERGE_TOL,
    PROBE_COUNT,
};
use weightmark::watermark::{bit_accuracy, Watermark};
use weightmark::wav::{read_wav, write_wav, WavData};
use weightmark::{Error, Result};

#[derive(Parser)]
#[command(
    name = "weightmark",
    version,
    about = "Audio watermarking that lives in generator weights: train payload-conditioned \
             adapters around a frozen model, mint per-payload instances, and measure how \
             well the payload survives signal-level attacks."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Adversarially train the base generator from scratch
    Pretrain(PretrainArgs),
    /// Fine-tune payload-conditioned adapters around a pretrained checkpoint
    Train(TrainArgs),
    /// Fold one payload into the weights and save a standalone instance
    Mint(MintArgs),
    /// Decode the payload carried by a WAV file
    Extract(ExtractArgs),
    /// Apply one attack from the standard battery to a WAV file
    Attack(AttackArgs),
    /// Run the robustness protocol for a minted instance and write reports
    Evaluate(EvaluateArgs),
    /// Check that merged weights reproduce the conditioned adapter output
    VerifyMerge(VerifyMergeArgs),
}

/// Flags shared by both training phases.
#[derive(Args)]
struct RunArgs {
    /// Training configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint directory
    #[arg(long)]
    out: PathBuf,
    /// Override the config's RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's iteration count
    #[arg(long)]
    iterations: Option<u64>,
    /// Generate this many synthetic clips instead of reading WAV files
    #[arg(long, value_name = "N", conflicts_with = "inputs")]
    synthetic: Option<usize>,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
    /// Training WAV files (all at the config's sample rate)
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained checkpoint directory
    #[arg(long)]
    pretrained: PathBuf,
    /// Override gradient projection: on trains watermark-first with the
    /// perceptual gradient projected off it, off trains unmodified
    #[arg(long, value_name = "on|off")]
    wgopo: Option<Toggle>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct MintArgs {
    /// Fine-tuned adapter checkpoint directory
    #[arg(long)]
    adapters: PathBuf,
    /// Payload as a bitstring, e.g. 10110010
    #[arg(long)]
    watermark: String,
    /// Output instance directory
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExtractArgs {
    /// Fine-tuned adapter checkpoint directory (holds the decoder)
    #[arg(long)]
    adapters: PathBuf,
    /// WAV file to decode
    #[arg(long)]
    audio: PathBuf,
    /// Expected payload; prints bit accuracy against it
    #[arg(long)]
    expected: Option<String>,
}

#[derive(Args)]
struct AttackArgs {
    /// Input WAV file
    #[arg(long, required_unless_present = "list")]
    audio: Option<PathBuf>,
    /// Output WAV file
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
    /// Attack name from the standard battery; see --list
    #[arg(long, required_unless_present = "list")]
    name: Option<String>,
    /// RNG seed for stochastic attacks
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the battery's attack names and parameters
    #[arg(long, exclusive = true)]
    list: bool,
    /// Overwrite an existing output file
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Minted instance directory
    #[arg(long)]
    instance: PathBuf,
    /// Fine-tuned adapter checkpoint directory (decoder and pretrained base)
    #[arg(long)]
    adapters: PathBuf,
    /// Directory for the CSV and text reports
    #[arg(long)]
    out: PathBuf,
    /// RNG seed for stochastic attacks
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generate this many one-second synthetic clips instead of reading WAVs
    #[arg(long, value_name = "N", conflicts_with = "inputs")]
    synthetic: Option<usize>,
    /// Overwrite existing report files
    #[arg(long)]
    force: bool,
    /// Evaluation WAV files, used whole
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct VerifyMergeArgs {
    /// Fine-tuned adapter checkpoint directory
    #[arg(long)]
    adapters: PathBuf,
    /// Payload as a bitstring
    #[arg(long)]
    watermark: String,
    /// Number of random probe inputs
    #[arg(long, default_value_t = PROBE_COUNT)]
    probes: usize,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Mint(a) => cmd_mint(a),
        Cmd::Extract(a) => cmd_extract(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::VerifyMerge(a) => cmd_verify_merge(a),
    }
}

/// Refuse to write into a directory that already has contents, unless forced.
fn claim_out_dir(path: &Path, force: bool) -> Result<()> {
    if !force && path.is_dir() && path.read_dir()?.next().is_some() {
        return Err(Error::Config(format!(
            "output directory {} is not empty; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_run_config(run: &RunArgs) -> Result<TrainingConfig> {
    let mut cfg = load_config(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = run.iterations {
        cfg.max_iterations = iters;
    }
    Ok(cfg)
}

fn run_dataset(run: &RunArgs, cfg: &TrainingConfig) -> Result<Dataset> {
    match run.synthetic {
        Some(n) => {
            // One-second clips, or longer when a segment would not fit.
            let len = cfg.segment_length.max(cfg.mel.sample_rate as usize);
            Ok(synthetic_dataset(n, len, cfg.mel.sample_rate, cfg.seed))
        }
        None => ingest_audio(&run.inputs, cfg.segment_length, cfg.seed),
    }
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = load_run_config(&args.run)?;
    claim_out_dir(&args.run.out, args.run.force)?;
    let data = run_dataset(&args.run, &cfg)?;
    let report = pretrain(&cfg, &data, &args.run.out)?;
    println!("pretrained {} iterations on {} clips", report.iterations, data.len());
    if let (Some(first), Some(last)) = (report.first_mel_loss, report.final_mel_loss) {
        println!("mel loss: {first:.4e} -> {last:.4e}");
    }
    println!("checkpoint: {}", args.run.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(&args.run)?;
    if let Some(toggle) = args.wgopo {
        cfg.wgopo_enabled = matches!(toggle, Toggle::On);
    }
    claim_out_dir(&args.run.out, args.run.force)?;
    let data = run_dataset(&args.run, &cfg)?;
    let report = finetune(&cfg, &data, &args.pretrained, &args.run.out)?;
    println!("fine-tuned {} iterations on {} clips", report.iterations, data.len());
    println!(
        "projection fired {} times ({})",
        report.projection_fired,
        if cfg.wgopo_enabled { "enabled" } else { "disabled" }
    );
    if let Some(acc) = report.final_batch_acc {
        println!("final batch bit accuracy: {acc:.4}");
    }
    println!("checkpoint: {}", args.run.out.display());
    Ok(())
}

fn cmd_mint(args: MintArgs) -> Result<()> {
    let w = Watermark::parse(&args.watermark)?;
    claim_out_dir(&args.out, args.force)?;
    let report = mint(&args.adapters, &w, &args.out)?;
    println!("watermark: {w}");
    println!("instance hash: {}", report.instance_hash);
    println!(
        "max merge diff over {PROBE_COUNT} probes: {:.3e} (tolerance {MERGE_TOL:.0e})",
        report.max_merge_diff
    );
    println!("instance: {}", args.out.display());
    Ok(())
}

/// Read a WAV and require the sample rate the system was trained at.
fn read_audio_at(path: &Path, expected_sr: u32) -> Result<WavData> {
    let wav = read_wav(path)?;
    if wav.sample_rate != expected_sr {
        return Err(Error::Config(format!(
            "{} is {} Hz but the checkpoint expects {} Hz",
            path.display(),
            wav.sample_rate,
            expected_sr
        )));
    }
    Ok(wav)
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let sys: FinetuneSystem = load_finetuned(&args.adapters)?;
    let wav = read_audio_at(&args.audio, sys.cfg.mel.sample_rate)?;
    let wave = Array3::from_shape_vec((1, 1, wav.samples.len()), wav.samples)
        .expect("mono wave shape");
    let (probs, decoded) = sys.extract(&wave)?;
    for (i, p) in probs.row(0).iter().enumerate() {
        println!("bit {i}: p(1) = {p:.4}");
    }
    println!("decoded: {}", decoded[0]);
    if let Some(text) = &args.expected {
        let expected = Watermark::parse(text)?;
        let acc = bit_accuracy(&decoded[0], &expected)?;
        println!("bit accuracy vs expected: {acc:.4}");
    }
    Ok(())
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    if args.list {
        for kind in standard_kinds() {
            println!("{:<10}{}", kind.name(), kind.params());
        }
        return Ok(());
    }
    // clap enforces these three whenever --list is absent.
    let name = args.name.as_deref().expect("--name required");
    let audio = args.audio.as_deref().expect("--audio required");
    let out = args.out.as_deref().expect("--out required");
    let kind = standard_kinds()
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            let known: Vec<&str> = standard_kinds().iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown attack {name:?}; one of: {}", known.join(", ")))
        })?;
    if out.exists() && !args.force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    let wav = read_wav(audio)?;
    let spec = AttackSpec { kind, seed: args.seed };
    match apply_attack(&wav.samples, wav.sample_rate, &spec)? {
        AttackOutcome::Applied(samples) => {
            write_wav(out, &WavData { sample_rate: wav.sample_rate, samples })?;
            println!("{} ({}) -> {}", spec.kind.name(), spec.kind.params(), out.display());
            Ok(())
        }
        AttackOutcome::Skipped(reason) => {
            Err(Error::Ingestion(format!("attack unavailable: {reason}")))
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let reference = load_finetuned(&args.adapters)?;
    let config_hash = inst.cfg.hash();
    let stem = report_stem(&inst.watermark, &config_hash);
    let csv_target = args.out.join(format!("{stem}.csv"));
    if csv_target.exists() && !args.force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            csv_target.display()
        )));
    }

    let sr = inst.cfg.mel.sample_rate;
    let dataset = match args.synthetic {
        Some(n) => synthetic_dataset(n, sr as usize, sr, args.seed),
        None => {
            let mut clips = Vec::with_capacity(args.inputs.len());
            for path in &args.inputs {
                clips.push(read_audio_at(path, sr)?.samples);
            }
            Dataset { sample_rate: sr, clips }
        }
    };

    let report = evaluate_instance(&inst, &reference, &dataset, args.seed)?;
    let (csv, txt) = write_robustness_report(&args.out, &report, &config_hash)?;
    println!("clips: {}", report.clips);
    println!("clean bit accuracy: {:.4}", report.clean_acc);
    println!("mel distance vs pretrained: {:.4e}", report.mel_distance);
    println!("stft distance vs pretrained: {:.4e}", report.stft_distance);
    for row in &report.rows {
        if row.skipped {
            println!("{:<10}skipped", row.name);
        } else {
            println!("{:<10}acc {:.4}", row.name, row.acc);
        }
    }
    println!("report: {}", csv.display());
    println!("summary: {}", txt.display());
    Ok(())
}

fn cmd_verify_merge(args: VerifyMergeArgs) -> Result<()> {
    let w = Watermark::parse(&args.watermark)?;
    let diff = verify_merge(&args.adapters, &w, args.probes)?;
    println!("max merge diff over {} probes: {diff:.3e}", args.probes);
    if diff > MERGE_TOL {
        return Err(Error::Structural(format!(
            "merged weights deviate from the conditioned path by {diff:.3e}, tolerance {MERGE_TOL:.0e}"
        )));
    }
    println!("within tolerance {MERGE_TOL:.0e}");
    Ok(())
}
