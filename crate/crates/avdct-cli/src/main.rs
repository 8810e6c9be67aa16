//! Command-line surface for the codec: training, offline encode/decode,
//! evaluation, the edge/fog streaming pair and the link simulator.

use avdct_core::{
    compute_metrics, fognet, load_recording, save_recording, segment_frames, standardize_recording,
    train, Checkpoint, CodecError, DecoderParams, EncoderParams, Frame, KlDirection, LossConfig,
    MetricsRecord, ModelConfig, Recording, RecordingFormat, SessionConfig, SessionMode,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "avdct",
    version,
    about = "Multi-channel variational transform codec"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec on a directory of recordings and save a checkpoint.
    Train(TrainArgs),
    /// Compress a recording into a bitstream file.
    Encode(EncodeArgs),
    /// Reconstruct a recording from a bitstream file.
    Decode(DecodeArgs),
    /// Compute rate/distortion metrics for a reconstruction.
    Eval(EvalArgs),
    /// Stream a recording to a fog gateway (or through a loopback).
    Edge(EdgeArgs),
    /// Receive a stream from an edge gateway and reconstruct it.
    Fog(FogArgs),
    /// Model transfer time for a list of frame sizes.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KlArg {
    Forward,
    Reverse,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training recordings (.csv, or binary with .manifest).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.6)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    block_len: usize,
    #[arg(long, default_value_t = 3)]
    subbands: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, value_enum, default_value_t = KlArg::Forward)]
    kl: KlArg,
    /// Quantizer exponent recorded in the checkpoint and used by the
    /// zero-fraction monitor.
    #[arg(long, default_value_t = 2)]
    tau: i8,
    /// Quantizer divisor recorded in the checkpoint and used by the
    /// zero-fraction monitor.
    #[arg(long, default_value_t = 1.2)]
    omega: f64,
    /// Write the per-epoch history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Standardize each recording per channel before training.
    #[arg(long, default_value_t = false)]
    standardize: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the checkpoint's quantizer exponent.
    #[arg(long)]
    tau: Option<i8>,
    /// Override the checkpoint's quantizer divisor.
    #[arg(long)]
    omega: Option<f64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    reconstructed: PathBuf,
    /// Bitstream whose frame bytes define the compressed size.
    #[arg(long)]
    compressed: PathBuf,
    /// Append one metrics row (with header if new) to this CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Bytes of storage per original sample for the compression ratio.
    #[arg(long, default_value_t = 8)]
    bytes_per_sample: u64,
}

#[derive(Args)]
struct EdgeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Stream to a listening fog gateway at host:port.
    #[arg(long, conflicts_with = "loopback")]
    connect: Option<String>,
    /// Run both gateways in process.
    #[arg(long, default_value_t = false)]
    loopback: bool,
    /// Write the loopback reconstruction here.
    #[arg(long, requires = "loopback")]
    out: Option<PathBuf>,
    #[arg(long)]
    tau: Option<i8>,
    #[arg(long)]
    omega: Option<f64>,
}

#[derive(Args)]
struct FogArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Listen address, host:port.
    #[arg(long)]
    listen: String,
    #[arg(long)]
    out: PathBuf,
    /// Original recording; when given, metrics are reported.
    #[arg(long)]
    original: Option<PathBuf>,
    /// Append the metrics row to this CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    bytes_per_sample: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// File of frame sizes in bytes, one per line (commas also accepted).
    #[arg(long)]
    sizes: PathBuf,
    /// Link bandwidth in bytes per second.
    #[arg(long)]
    bandwidth: f64,
    /// Per-frame latency in seconds.
    #[arg(long)]
    latency: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Edge(args) => cmd_edge(args),
        Command::Fog(args) => cmd_fog(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &CodecError) -> u8 {
    match err {
        CodecError::Configuration(_)
        | CodecError::InvalidInput(_)
        | CodecError::InvalidParameter(_)
        | CodecError::Checkpoint(_) => 2,
        CodecError::Ingestion(_) | CodecError::Io(_) => 3,
        CodecError::Protocol(_)
        | CodecError::Bitstream(_)
        | CodecError::QuantizationOverflow(_) => 4,
        CodecError::Divergence(_) => 5,
    }
}

fn load_auto(path: &Path) -> Result<Recording, CodecError> {
    load_recording(path, RecordingFormat::from_path(path))
}

fn save_auto(path: &Path, rec: &Recording) -> Result<(), CodecError> {
    save_recording(path, rec, RecordingFormat::from_path(path))
}

fn cmd_train(args: TrainArgs) -> Result<(), CodecError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&args.data)
        .map_err(|e| CodecError::Ingestion(format!("{}: {e}", args.data.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && !p
                    .extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("manifest"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CodecError::Ingestion(format!(
            "no recordings found in {}",
            args.data.display()
        )));
    }

    let mut frames: Vec<Frame> = Vec::new();
    let mut channels = None;
    for path in &paths {
        let mut rec = load_auto(path)?;
        if args.standardize {
            rec = standardize_recording(&rec);
        }
        match channels {
            None => channels = Some(rec.channel_count()),
            Some(c) if c != rec.channel_count() => {
                return Err(CodecError::Ingestion(format!(
                    "{} has {} channels, previous recordings have {c}",
                    path.display(),
                    rec.channel_count()
                )))
            }
            _ => {}
        }
        frames.extend(segment_frames(&rec, args.block_len)?);
    }
    let channels = channels.expect("at least one recording");
    if frames.is_empty() {
        return Err(CodecError::Ingestion(format!(
            "recordings are shorter than one block of {}",
            args.block_len
        )));
    }

    let model = ModelConfig::new(channels, args.block_len, args.subbands, args.heads)?;
    let cfg = LossConfig {
        lambda: args.lambda,
        epsilon: args.epsilon,
        rho: args.rho,
        kl_direction: match args.kl {
            KlArg::Forward => KlDirection::Forward,
            KlArg::Reverse => KlDirection::Reverse,
        },
        max_epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        monitor_tau: args.tau,
        monitor_omega: args.omega,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut enc = EncoderParams::identity(&model);
    let mut dec = DecoderParams::init(&model, &mut rng)?;
    println!(
        "training on {} frames ({} channels x {} samples) for up to {} epochs",
        frames.len(),
        channels,
        args.block_len,
        args.epochs
    );
    let history = train(&frames, &mut enc, &mut dec, &cfg, args.seed)?;
    if let Some(last) = history.epochs.last() {
        println!(
            "stopped after epoch {} (loss {:.6e}, zero fraction {:.4}{})",
            last.epoch,
            last.loss,
            last.zero_fraction,
            if history.stopped_by_rho {
                ", target sparsity reached"
            } else {
                ""
            }
        );
    }

    let ckpt = Checkpoint {
        model,
        lambda: args.lambda,
        epsilon: args.epsilon,
        rho: args.rho,
        tau: args.tau,
        omega: args.omega,
        encoder: enc,
        decoder: dec,
    };
    ckpt.save(&args.out)?;
    println!("checkpoint written to {}", args.out.display());

    if let Some(path) = args.history {
        let mut file = fs::File::create(&path)?;
        history.write_csv(&mut file)?;
        println!("history written to {}", path.display());
    }
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<(), CodecError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let rec = load_auto(&args.input)?;
    let tau = args.tau.unwrap_or(ckpt.tau);
    let omega = args.omega.unwrap_or(ckpt.omega);
    let file = fs::File::create(&args.out)?;
    let mut sink = BufWriter::new(file);
    let report = fognet::stream_frames(&rec, &ckpt.encoder, &ckpt.model, tau, omega, &mut sink)?;
    println!(
        "encoded {} frames, {} frame bytes (tau {}, omega {})",
        report.frames, report.bytes, tau, omega
    );
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<(), CodecError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let file = fs::File::open(&args.input)?;
    let mut source = BufReader::new(file);
    let (frames, _, report) = fognet::receive_frames(&mut source, &ckpt.decoder, &ckpt.model)?;
    let rec = fognet::assemble_reconstruction(&frames, 0.0)?;
    save_auto(&args.out, &rec)?;
    println!(
        "decoded {} frames into {} ({} channels x {} samples)",
        report.frames,
        args.out.display(),
        rec.channel_count(),
        rec.samples()
    );
    Ok(())
}

/// Sum of serialized frame lengths in a bitstream file: header and payload
/// bytes only, excluding the transport prefixes and the end marker.
fn compressed_frame_bytes(path: &Path) -> Result<u64, CodecError> {
    let file = fs::File::open(path)?;
    let mut source = BufReader::new(file);
    let mut total: u64 = 0;
    loop {
        let mut len_buf = [0u8; 4];
        source
            .read_exact(&mut len_buf)
            .map_err(|e| CodecError::Protocol(format!("bitstream ended without marker: {e}")))?;
        let len = u32::from_le_bytes(len_buf);
        if len == 0 {
            break;
        }
        let mut skipped = vec![0u8; len as usize];
        source
            .read_exact(&mut skipped)
            .map_err(|e| CodecError::Protocol(format!("truncated bitstream: {e}")))?;
        total += len as u64;
    }
    Ok(total)
}

fn write_metrics_csv(path: &Path, id: &str, metrics: &MetricsRecord) -> Result<(), CodecError> {
    let existed = path.exists();
    let mut file = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)?;
    if !existed {
        writeln!(file, "{}", MetricsRecord::csv_header())?;
    }
    writeln!(file, "{}", metrics.csv_row(id))?;
    Ok(())
}

fn report_metrics(m: &MetricsRecord) {
    println!(
        "CR {:.4}  PRD {:.4}  PRDN {:.4}  QS {:.4}  ({} raw bytes, {} compressed bytes)",
        m.cr, m.prd, m.prdn, m.qs, m.raw_bytes, m.compressed_bytes
    );
}

/// Trim the original to the reconstruction's length: segmentation drops any
/// trailing partial block, so the reconstruction is a prefix.
fn truncate_like(original: &Recording, reconstructed: &Recording) -> Result<Recording, CodecError> {
    if reconstructed.samples() > original.samples()
        || reconstructed.channel_count() != original.channel_count()
    {
        return Err(CodecError::InvalidInput(format!(
            "reconstruction is {}x{}, original is {}x{}",
            reconstructed.channel_count(),
            reconstructed.samples(),
            original.channel_count(),
            original.samples()
        )));
    }
    if reconstructed.samples() == original.samples() {
        return Ok(original.clone());
    }
    let keep = reconstructed.samples();
    Recording::new(
        original.channel_names.clone(),
        original
            .channels
            .iter()
            .map(|ch| ch[..keep].to_vec())
            .collect(),
        original.sample_rate,
    )
}

fn cmd_eval(args: EvalArgs) -> Result<(), CodecError> {
    let original = load_auto(&args.original)?;
    let reconstructed = load_auto(&args.reconstructed)?;
    let truncated = truncate_like(&original, &reconstructed)?;
    let compressed = compressed_frame_bytes(&args.compressed)?;
    let raw = truncated.total_samples() as u64 * args.bytes_per_sample;
    let metrics = compute_metrics(&truncated, &reconstructed, raw, compressed)?;
    report_metrics(&metrics);
    if let Some(csv) = args.csv {
        let id = args
            .original
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("recording")
            .to_string();
        write_metrics_csv(&csv, &id, &metrics)?;
    }
    Ok(())
}

fn cmd_edge(args: EdgeArgs) -> Result<(), CodecError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let rec = load_auto(&args.input)?;
    let tau = args.tau.unwrap_or(ckpt.tau);
    let omega = args.omega.unwrap_or(ckpt.omega);

    if args.loopback {
        let session = SessionConfig {
            mode: SessionMode::Loopback,
            tau,
            omega,
            checkpoint: Some(args.ckpt.clone()),
        };
        let (reconstruction, report) =
            fognet::loopback_session(&rec, &ckpt.encoder, &ckpt.decoder, &ckpt.model, &session)?;
        println!(
            "loopback: {} frames, {} frame bytes",
            report.frames, report.bytes
        );
        if reconstruction.samples() > 0 {
            let truncated = truncate_like(&rec, &reconstruction)?;
            let raw = truncated.total_samples() as u64 * 8;
            let metrics = compute_metrics(&truncated, &reconstruction, raw, report.bytes.max(1))?;
            report_metrics(&metrics);
        }
        if let Some(out) = args.out {
            save_auto(&out, &reconstruction)?;
            println!("reconstruction written to {}", out.display());
        }
        return Ok(());
    }

    let endpoint = args.connect.ok_or_else(|| {
        CodecError::Configuration("edge needs either --connect or --loopback".into())
    })?;
    let session = SessionConfig {
        mode: SessionMode::TcpClient { endpoint },
        tau,
        omega,
        checkpoint: Some(args.ckpt.clone()),
    };
    let report = fognet::edge_stream(&rec, &ckpt.encoder, &ckpt.model, &session)?;
    println!(
        "streamed {} frames, {} frame bytes",
        report.frames, report.bytes
    );
    Ok(())
}

fn cmd_fog(args: FogArgs) -> Result<(), CodecError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let session = SessionConfig {
        mode: SessionMode::TcpServer {
            endpoint: args.listen.clone(),
        },
        tau: ckpt.tau,
        omega: ckpt.omega,
        checkpoint: Some(args.ckpt.clone()),
    };
    println!("listening on {}", args.listen);
    let (reconstruction, report) = fognet::fog_receive(&ckpt.decoder, &ckpt.model, &session, 0.0)?;
    save_auto(&args.out, &reconstruction)?;
    println!(
        "received {} frames ({} frame bytes), wrote {}",
        report.frames,
        report.bytes,
        args.out.display()
    );
    if let Some(original_path) = args.original {
        let original = load_auto(&original_path)?;
        let truncated = truncate_like(&original, &reconstruction)?;
        let raw = truncated.total_samples() as u64 * args.bytes_per_sample;
        let metrics = compute_metrics(&truncated, &reconstruction, raw, report.bytes.max(1))?;
        report_metrics(&metrics);
        if let Some(csv) = args.csv {
            let id = original_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("recording")
                .to_string();
            write_metrics_csv(&csv, &id, &metrics)?;
        }
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CodecError> {
    let text = fs::read_to_string(&args.sizes)
        .map_err(|e| CodecError::Ingestion(format!("{}: {e}", args.sizes.display())))?;
    let mut sizes = Vec::new();
    for token in text.split(|c: char| c == ',' || c.is_whitespace()) {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        let size: u32 = token.parse().map_err(|_| {
            CodecError::Ingestion(format!("`{token}` is not a frame size in bytes"))
        })?;
        sizes.push(size);
    }
    let report = fognet::simulate_link(&sizes, args.bandwidth, args.latency)?;
    println!(
        "{} frames, {} bytes, {:.6} s modeled transfer time{}",
        report.frames,
        report.bytes,
        report.simulated_seconds.unwrap_or(0.0),
        report
            .effective_throughput
            .map(|t| format!(", {t:.1} B/s effective"))
            .unwrap_or_default()
    );
    Ok(())
}
