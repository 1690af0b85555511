use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wdiff::gradcheck;
use wdiff::io::checkpoint::Checkpoint;
use wdiff::io::image::images_from_batch;
use wdiff::io::toy::{make_toy, ToyKind};
use wdiff::io::{create_dir, raw, Dataset, RgbImage, RunConfig};
use wdiff::metrics::{stats_distance, subband_stats, SubbandStats};
use wdiff::sample::{batch_item, export_wavelet_grid, sample, wavelet_view, SampleRequest};
use wdiff::train::{model_from_checkpoint, Trainer};
use wdiff::unet::group_counts;
use wdiff::wavelet::{dwt, iwt};
use wdiff::Tensor;

/// Checkpoint file written by `train` inside its output directory.
const CHECKPOINT_FILE: &str = "checkpoint.wdck";
const LOG_FILE: &str = "train.log";
const MANIFEST_FILE: &str = "trajectory.txt";

#[derive(Parser)]
#[command(name = "wdiff", version, about = "Wavelet-domain denoising diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of images.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Haar-transform a PPM image into a raw 5D tensor.
    Dwt(TransformArgs),
    /// Inverse-transform a raw 5D tensor into a PPM image.
    Idwt(TransformArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print per-subband statistics of an image directory.
    Stats(StatsArgs),
    /// Print a checkpoint's config, schedule and parameter table.
    Inspect(InspectArgs),
    /// Generate a synthetic dataset.
    MakeToy(MakeToyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint (up to the config's iterations).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Defaults to the checkpoint's sampling config.
    #[arg(long)]
    count: Option<usize>,
    /// Reverse steps; defaults to the sampling config, else the full schedule.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Capture every M-th state as a mosaic and preview (0 = off).
    #[arg(long)]
    traj_stride: Option<usize>,
    /// Sample with the raw weights instead of the EMA shadow.
    #[arg(long)]
    no_ema: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a single op (default: all).
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = gradcheck::MIN_INSTANCES)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "source")]
struct StatsSource {
    /// Training images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generated images.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    source: StatsSource,
    /// Also print the subband distance to this directory's statistics.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long)]
    kind: ToyKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Dwt(a) => dwt_cmd(a),
        Command::Idwt(a) => idwt_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Stats(a) => stats(a),
        Command::Inspect(a) => inspect(a),
        Command::MakeToy(a) => make_toy_cmd(a),
    }
}

/// Writes every record to both the log file and stdout.
struct Tee<A, B>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let config = RunConfig::load(&a.config)?;
    let data = Dataset::load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?, Some(config))?,
        None => Trainer::new(config)?,
    };
    create_dir(&a.out)?;
    let log_path = a.out.join(LOG_FILE);
    let file = File::options()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = Tee(BufWriter::new(file), io::stdout().lock());
    let ckpt = a.out.join(CHECKPOINT_FILE);
    eprintln!(
        "training {} ({} parameters) on {} images from step {}",
        trainer.config().model.variant,
        trainer.model().param_count(),
        data.len(),
        trainer.step()
    );
    trainer.fit(&data, &mut log, Some(&ckpt))?;
    log.flush()?;
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let config = RunConfig::from_json(&ck.config)?;
    let defaults = &config.sampling;
    let req = SampleRequest {
        count: a.count.unwrap_or(defaults.count),
        image_size: config.model.image_size,
        steps: a.steps.or(defaults.steps),
        seed: a.seed.unwrap_or(defaults.seed),
        traj_stride: a.traj_stride.unwrap_or(defaults.traj_stride),
        use_ema: !a.no_ema && defaults.use_ema,
    };
    let (_, model) = model_from_checkpoint(&ck, req.use_ema)?;
    let schedule = config.schedule.build()?;
    let out = sample(&model, &schedule, &req)?;
    create_dir(&a.out)?;
    for (i, img) in images_from_batch(&out.images)?.iter().enumerate() {
        img.write_ppm(&a.out.join(format!("sample_{i:04}.ppm")))?;
    }
    if !out.trajectory.is_empty() {
        let layout = config.model.layout();
        let mut manifest = String::from("# index t grid preview\n");
        for (k, snap) in out.trajectory.iter().enumerate() {
            let grid_name = format!("traj_{k:04}_t{:04}_grid.ppm", snap.t);
            let preview_name = format!("traj_{k:04}_t{:04}_preview.ppm", snap.t);
            let stacks = wavelet_view(layout, &snap.state)?;
            export_wavelet_grid(&batch_item(&stacks, 0)?)?.write_ppm(&a.out.join(&grid_name))?;
            let preview = batch_item(&snap.preview(layout)?, 0)?;
            RgbImage::from_tensor(&preview)?.write_ppm(&a.out.join(&preview_name))?;
            manifest.push_str(&format!("{k} {} {grid_name} {preview_name}\n", snap.t));
        }
        let path = a.out.join(MANIFEST_FILE);
        std::fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} samples to {}", req.count, a.out.display());
    Ok(())
}

fn dwt_cmd(a: TransformArgs) -> Result<()> {
    let img = RgbImage::read_ppm(&a.input)?;
    let x = img.to_tensor::<f32>();
    let s = x.shape().to_vec();
    let stack = dwt(&x.reshape(&[1, s[0], s[1], s[2]])?)?;
    raw::write(&a.out, &stack)?;
    Ok(())
}

fn idwt_cmd(a: TransformArgs) -> Result<()> {
    let stack: Tensor<f32> = raw::read(&a.input)?;
    let stack = match stack.rank() {
        4 => {
            let s = stack.shape().to_vec();
            stack.reshape(&[1, s[0], s[1], s[2], s[3]])?
        }
        _ => stack,
    };
    if stack.shape()[0] != 1 {
        bail!("{} holds {} stacks; expected one", a.input.display(), stack.shape()[0]);
    }
    RgbImage::from_tensor(&iwt(&stack)?)?.write_ppm(&a.out)?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let reports = match &a.op {
        Some(op) => vec![gradcheck::check_op(op, a.instances, a.seed)?],
        None => gradcheck::check_all(a.instances, a.seed)?,
    };
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} {:>3} instances {:>6} coords  max rel err {:.3e}  {verdict}",
            r.op, r.instances, r.checked, r.max_rel_err
        );
        if !r.passed() {
            failed.push(r.op.clone());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn dir_stats(dir: &Path) -> Result<SubbandStats> {
    let data = Dataset::load(dir)?;
    Ok(subband_stats(&dwt(data.images())?)?)
}

fn stats(a: StatsArgs) -> Result<()> {
    let dir = a.source.data.or(a.source.samples).expect("clap enforces one source");
    let st = dir_stats(&dir)?;
    print!("{st}");
    if let Some(reference) = &a.reference {
        println!("distance {:.6}", stats_distance(&st, &dir_stats(reference)?));
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let config = RunConfig::from_json(&ck.config)?;
    println!("config:\n{}", config.to_json());
    let s = config.schedule.build()?;
    println!(
        "schedule: T = {}, beta {:.6e} .. {:.6e}, sigma {:?}, alpha_bar_T = {:.6e}",
        s.timesteps(),
        s.beta(1),
        s.beta(s.timesteps()),
        s.sigma_mode(),
        s.alpha_bar(s.timesteps())
    );
    if let Some(state) = &ck.state {
        println!("step: {}", state.step);
    }
    let (_, model) = model_from_checkpoint(&ck, false)?;
    println!("parameters:");
    for (name, t) in model.params().iter() {
        println!("  {name:<48} {:<20} {}", format!("{:?}", t.shape()), t.numel());
    }
    println!("groups:");
    for (group, n) in group_counts(model.params().iter().map(|(n, t)| (n, t.numel())), 1) {
        println!("  {group:<48} {n}");
    }
    println!("total parameters: {}", model.param_count());
    Ok(())
}

fn make_toy_cmd(a: MakeToyArgs) -> Result<()> {
    let images = make_toy(a.kind, a.n, a.size, a.seed)?;
    Dataset::write_ppm_dir(&images, &a.out)?;
    eprintln!("wrote {} {:?} images to {}", a.n, a.kind, a.out.display());
    Ok(())
}
