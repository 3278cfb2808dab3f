//! `vts` command-line entry point: phantom generation, one-shot
//! degradation, training, tiled inference and evaluation reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vts_core::degrade::{degrade, stream_rng, DegradeParams};
use vts_core::evalkit::{run_eval, EvalConfig};
use vts_core::inference::run_inference;
use vts_core::manifest::{load_manifest, Manifest, ManifestEntry, Split};
use vts_core::phantom::{generate_phantom, BodyPart, PhantomSpec};
use vts_core::train::{train_loop, TrainConfig};
use vts_core::volume::{denormalize, normalize_hu, ValueDomain};
use vts_core::{Result, VtsError};

#[derive(Parser)]
#[command(
    name = "vts",
    version,
    about = "Virtual thin slice: CT slice-interval super-resolution toolkit"
)]
struct Cli {
    /// Root random seed threaded through all stochastic stages.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic CT phantom volumes plus a manifest.
    Phantom(PhantomArgs),
    /// Deterministically degrade one thin volume to thick-slice quality.
    Degrade(DegradeArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Convert a thick-slice volume to 1 mm virtual thin slices.
    Infer(InferArgs),
    /// Evaluate reconstruction methods on the test split of a manifest.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Number of volumes to generate.
    #[arg(long)]
    count: usize,
    /// head | chest | abdomen | leg | all (cycles through the four).
    #[arg(long)]
    part: String,
    /// Volume dims as Z,Y,X (each >= 32).
    #[arg(long, default_value = "64,64,64")]
    dims: String,
    /// Split recorded in the manifest.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Slice decimation factor (4 or 8).
    #[arg(long)]
    factor: usize,
    /// Z blur stdev in voxels.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Additive noise stdev in normalized units.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file mirroring the training configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, losses.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 160)]
    tile: usize,
    /// Tile margin in voxels, or "auto" for the receptive-field default.
    #[arg(long, default_value = "auto")]
    margin: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest (test split is evaluated).
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated method list.
    #[arg(long, default_value = "input,tricubic")]
    methods: String,
    /// Directory holding <method>.ckpt for learned methods.
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 64)]
    tile: usize,
    /// Skip the per-case montage PNGs.
    #[arg(long)]
    no_montage: bool,
}

fn num_workers() -> usize {
    std::env::var("VTS_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn log_manifest(manifest: &Manifest) {
    let counts = manifest.body_part_counts();
    let mut parts: Vec<String> = BodyPart::ALL
        .iter()
        .filter_map(|p| counts.get(p).map(|n| format!("{}:{n}", p.name())))
        .collect();
    if parts.is_empty() {
        parts.push("none".into());
    }
    eprintln!(
        "manifest: {} entries ({})",
        manifest.entries.len(),
        parts.join(", ")
    );
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| VtsError::InvalidInput(format!("bad --dims {s:?}, expected Z,Y,X")))?;
    if parts.len() != 3 {
        return Err(VtsError::InvalidInput(format!(
            "bad --dims {s:?}, expected three comma-separated sizes"
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(VtsError::InvalidInput(format!(
            "unknown split {other:?}, expected train|val|test"
        ))),
    }
}

fn cmd_phantom(a: &PhantomArgs, seed: u64) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    let split = parse_split(&a.split)?;
    let parts: Vec<BodyPart> = if a.part == "all" {
        BodyPart::ALL.to_vec()
    } else {
        vec![BodyPart::parse(&a.part)?]
    };
    std::fs::create_dir_all(&a.out).map_err(|e| VtsError::io(&a.out, e))?;
    let mut entries = Vec::new();
    for i in 0..a.count {
        let part = parts[i % parts.len()];
        let spec = PhantomSpec::new(dims, seed.wrapping_add(i as u64), part);
        let vol = generate_phantom(&spec)?;
        let name = format!("phantom_{}_{i:03}.vvol", part.name());
        let path = a.out.join(&name);
        vts_core::io::save_vvol_default(&vol, &path)?;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            body_part: part,
            split,
        });
    }
    let manifest = Manifest { entries };
    let mpath = a.out.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| VtsError::io(&mpath, e))?;
    eprintln!("wrote {} volumes and {}", a.count, mpath.display());
    Ok(())
}

fn cmd_degrade(a: &DegradeArgs, seed: u64) -> Result<()> {
    let vol = vts_core::io::load_vvol(&a.input)?;
    let (norm, was_hu) = match vol.domain {
        ValueDomain::Hu => (normalize_hu(&vol)?, true),
        ValueDomain::Normalized => (vol, false),
    };
    let params = DegradeParams::deterministic(a.factor, a.sigma, a.noise);
    let mut rng = stream_rng(seed, 2, 0);
    let out = degrade(&norm, &params, &mut rng)?;
    let out = if was_hu { denormalize(&out)? } else { out };
    vts_core::io::save_vvol_default(&out, &a.out)
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| VtsError::io(&a.config, e))?;
    let mut cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| VtsError::Data(format!("{}: {e}", a.config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = load_manifest(&a.data)?;
    log_manifest(&manifest);
    eprintln!("workers: {}", num_workers());
    let final_ckpt = train_loop(&manifest, &cfg, &a.out, a.resume.as_deref())?;
    eprintln!("final checkpoint: {}", final_ckpt.display());
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let margin = match a.margin.as_str() {
        "auto" => None,
        s => Some(s.parse().map_err(|_| {
            VtsError::InvalidInput(format!("bad --margin {s:?}, expected a number or \"auto\""))
        })?),
    };
    run_inference(&a.input, &a.ckpt, &a.out, a.tile, margin)
}

fn cmd_eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    log_manifest(&manifest);
    eprintln!("workers: {}", num_workers());
    let cfg = EvalConfig {
        methods: a.methods.split(',').map(|s| s.trim().to_string()).collect(),
        ckpt_dir: a.ckpt_dir.clone(),
        params: DegradeParams::deterministic(a.factor, a.sigma, a.noise),
        seed,
        tile: a.tile,
        montages: !a.no_montage,
    };
    let records = run_eval(&manifest, &cfg, &a.out)?;
    for r in &records {
        println!(
            "{:<14} psnr {:>8.3} dB  ssim {:.4}  (n={})",
            r.method, r.psnr_db, r.ssim, r.n_volumes
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, seed),
        Command::Degrade(a) => cmd_degrade(a, seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are successes; everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
