//! `hftc`: encode, decode, train, analyze and bench.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hft_codec::checkpoint::Checkpoint;
use hft_codec::codec::{bench_csv, decode_file, encode_file, list_images, run_bench};
use hft_codec::complexity::{comparison_csv, run_analyze};
use hft_codec::hft::HftConfig;
use hft_codec::image_io::load_image;
use hft_codec::model::CodecModel;
use hft_codec::trainer::{train, TrainConfig, LAMBDA_GRID};
use hft_codec::Error;

const THREADS_VAR: &str = "LOC_LIC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "hftc", version, about = "Learned image codec with a hierarchical feature transform")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress an image (binary PPM, or PNG with the `png` feature).
    Encode {
        #[arg(short, long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Decompress a bitstream to an image (`.ppm`, or `.png` with the feature).
    Decode {
        #[arg(short, long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Train a model on a directory of images and save a checkpoint.
    Train {
        /// Architecture: a JSON config file, or one of `reference`, `toy`, `tiny`.
        #[arg(long)]
        arch: String,
        /// Training config JSON (lambda, steps, batch, crop, lr, seed, quant).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Seed of the weight initialization.
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        /// Rate point index stored in the checkpoint; defaults to the
        /// position of `lambda` in the standard grid.
        #[arg(long)]
        lambda_index: Option<u8>,
        /// Per-step CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Static kMAC/pixel comparison of architecture specs.
    Analyze {
        #[arg(required = true)]
        specs: Vec<PathBuf>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Write the comparison CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write every model's per-layer CSV here.
        #[arg(long)]
        layers_csv: Option<PathBuf>,
    },
    /// Mean bpp, PSNR and MS-SSIM of each checkpoint over an image directory.
    Bench {
        #[arg(long)]
        images: PathBuf,
        /// CSV output file; standard output when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e)
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("{THREADS_VAR}: {e}")))
}

fn load_arch(arch: &str) -> Result<HftConfig, Failure> {
    match arch {
        "reference" => Ok(HftConfig::reference()),
        "toy" => Ok(HftConfig::toy()),
        "tiny" => Ok(HftConfig::tiny()),
        path => {
            let text = std::fs::read_to_string(path)?;
            HftConfig::from_json(&text).map_err(|e| Failure::Data(Error::Format(format!("{path}: {e}"))))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Encode { checkpoint, input, output } => {
            let s = encode_file(&checkpoint, &input, &output)?;
            println!(
                "width={} height={} bpp={:.6} payload_bits={} z_bits={} y_bits={} file_bytes={} estimated_bits={:.1}",
                s.width,
                s.height,
                s.bpp(),
                s.payload_bits(),
                s.z_payload_bits,
                s.y_payload_bits,
                s.file_bits / 8,
                s.estimated_bits
            );
        }
        Command::Decode { checkpoint, input, output } => {
            decode_file(&checkpoint, &input, &output)?;
        }
        Command::Train { arch, config, images, output, init_seed, lambda_index, log } => {
            let arch = load_arch(&arch)?;
            let text = std::fs::read_to_string(&config)?;
            let cfg: TrainConfig = serde_json::from_str(&text)
                .map_err(|e| Failure::Data(Error::Format(format!("{}: {e}", config.display()))))?;
            let lambda_index = match lambda_index {
                Some(i) => i,
                None => LAMBDA_GRID.iter().position(|&l| l == cfg.lambda).map_or(u8::MAX, |i| i as u8),
            };
            let data = list_images(&images)?.iter().map(|p| load_image(p)).collect::<Result<Vec<_>, _>>()?;
            let mut model = CodecModel::init(arch, init_seed)?;
            let mut log_file = log.map(|p| File::create(p).map(BufWriter::new)).transpose()?;
            let history = train(&mut model, &data, &cfg, log_file.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(mut w) = log_file {
                w.flush()?;
            }
            model.params.round_to_f32();
            Checkpoint::new(model, lambda_index, cfg.lambda).save(&output)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!("steps={} loss_first={:.6} loss_last={:.6} bpp_last={:.6}", history.len(), first.total, last.total, last.bpp());
            }
        }
        Command::Analyze { specs, height, width, csv, layers_csv } => {
            let analysis = run_analyze(&specs, height, width)?;
            print!("{}", analysis.to_text());
            if let Some(p) = csv {
                write_text(&p, &comparison_csv(&analysis.rows))?;
            }
            if let Some(p) = layers_csv {
                let mut text = String::new();
                for (i, r) in analysis.reports.iter().enumerate() {
                    let csv = r.to_csv();
                    // keep a single header line
                    text.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |(_, rest)| rest) });
                }
                write_text(&p, &text)?;
            }
        }
        Command::Bench { images, output, checkpoints } => {
            let rows = run_bench(&checkpoints, &images)?;
            let text = bench_csv(&rows);
            match output {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
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
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
