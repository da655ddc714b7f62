use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mipanet::checkpoint;
use mipanet::data::{load_sample, synth_generate, DatasetManifest, Split};
use mipanet::nn::{set_corrupt_backward, Module};
use mipanet::train::{evaluate, train, TrainOptions};
use mipanet::visualize::colorize;
use mipanet::{selftest, Error, MipaConfig, MipaNet, Result, Tensor};

#[derive(Parser)]
#[command(name = "mipanet", version, about = "RGB-D semantic segmentation: synthesize, train, evaluate, infer, self-test")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic depth-disambiguated dataset.
    Synth(SynthArgs),
    /// Train with SGD, validating every epoch and keeping the best checkpoint.
    Train(TrainArgs),
    /// Print the metrics document of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Render the prediction for one sample as `<id>_pred.ppm`.
    Infer(InferArgs),
    /// Finite-difference check of every differentiable component.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Image side in pixels; a multiple of 16.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelFlags {
    /// `key = value` file with model and training settings; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Residual blocks per stage, e.g. `2,2,2,2`.
    #[arg(long)]
    stage_depths: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    /// One pooling-attention module for both modalities.
    #[arg(long)]
    pam_shared: Option<bool>,
    /// Levels fused by multi-modal interaction, `4` or `3,4`.
    #[arg(long)]
    mim_layers: Option<String>,
    /// Replace pooling attention by element-wise sum fusion.
    #[arg(long)]
    disable_pam: bool,
    /// Replace multi-modal interaction by element-wise sum fusion.
    #[arg(long)]
    disable_mim: bool,
    /// Zero the depth input.
    #[arg(long)]
    rgb_only: bool,
    /// `bilinear` or `nearest`.
    #[arg(long)]
    decoder_resize: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; the training set when omitted.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Checkpoint directory for the best validation mIoU.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Train on the unmodified samples.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the document to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    id: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test fixture: inject a fault into a backward pass.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn model_config(flags: &ModelFlags, opts: &mut TrainOptions) -> Result<MipaConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            MipaConfig::from_text_with(&text, |k, v| opts.set(k, v))?
        }
        None => MipaConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
    set("base_channels", flags.base_channels.map(|v| v.to_string()))?;
    set("stage_depths", flags.stage_depths.clone())?;
    set("heads", flags.heads.map(|v| v.to_string()))?;
    set("pam_shared", flags.pam_shared.map(|v| v.to_string()))?;
    set("mim_layers", flags.mim_layers.clone())?;
    set("decoder_resize", flags.decoder_resize.clone())?;
    cfg.use_pam &= !flags.disable_pam;
    cfg.use_mim &= !flags.disable_mim;
    cfg.rgb_only |= flags.rgb_only;
    Ok(cfg)
}

fn check_classes(net: &MipaNet<f32>, m: &DatasetManifest) -> Result<()> {
    if net.cfg.num_classes != m.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes but {} declares {}",
            net.cfg.num_classes,
            m.root.display(),
            m.num_classes
        )));
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let m = synth_generate(a.seed, a.count, a.size, a.split, &a.out)?;
    println!("{}", a.out.join(mipanet::data::MANIFEST).display());
    eprintln!("wrote {} {} samples of {}x{}", m.ids.len(), a.split, a.size, a.size);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut opts = TrainOptions { seed: a.seed, checkpoint: Some(a.ckpt.clone()), ..Default::default() };
    let mut cfg = model_config(&a.model, &mut opts)?;
    if let Some(v) = a.epochs {
        opts.epochs = v;
    }
    if let Some(v) = a.batch_size {
        opts.batch_size = v;
    }
    if let Some(v) = a.lr {
        opts.lr = v;
    }
    if let Some(v) = a.momentum {
        opts.momentum = v;
    }
    if let Some(v) = a.weight_decay {
        opts.weight_decay = v;
    }
    opts.augment &= !a.no_augment;

    let train_m = DatasetManifest::load(&a.data)?;
    let val_m = match &a.val_data {
        Some(p) => DatasetManifest::load(p)?,
        None => train_m.clone(),
    };
    if train_m.num_classes != val_m.num_classes {
        return Err(Error::Config(format!(
            "training data has {} classes, validation data {}",
            train_m.num_classes, val_m.num_classes
        )));
    }
    cfg.num_classes = train_m.num_classes;
    let mut net = MipaNet::<f32>::new(&cfg, a.seed)?;
    let (train_set, val_set) = (train_m.load_all()?, val_m.load_all()?);
    eprintln!(
        "training {} parameters on {} samples, validating on {}",
        net.num_parameters(),
        train_set.len(),
        val_set.len()
    );
    let summary = train(&mut net, &train_set, &val_set, &opts, |log| println!("{log}"))?;
    println!(
        "best_epoch={} best_miou={} checkpoint={}",
        summary.best_epoch,
        summary.best.miou,
        a.ckpt.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let net = checkpoint::load(&a.ckpt)?;
    let m = DatasetManifest::load(&a.data)?;
    check_classes(&net, &m)?;
    let report = evaluate(&net, &m.load_all()?, a.batch_size)?;
    let doc = report.to_document();
    print!("{doc}");
    if let Some(p) = &a.out {
        fs::write(p, &doc).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let net = checkpoint::load(&a.ckpt)?;
    let k = net.cfg.num_classes;
    if let Ok(m) = DatasetManifest::load(&a.data) {
        check_classes(&net, &m)?;
    }
    let s = load_sample(&a.data, &a.id)?;
    let (h, w) = (s.height, s.width);
    let rgb = Tensor::from_vec(s.rgb, &[1, 3, h, w])?;
    let depth = Tensor::from_vec(s.depth, &[1, 1, h, w])?;
    let pred = net.predict(&rgb, &depth)?.remove(0);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join(format!("{}_pred.ppm", a.id));
    colorize(&pred, k).save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<bool> {
    match a.corrupt.as_deref() {
        None => {}
        Some("conv2d") => set_corrupt_backward(true),
        Some(other) => return Err(Error::InvalidArgument(format!("no fault fixture for {other:?}"))),
    }
    println!("threshold={:e}", selftest::THRESHOLD);
    let results = selftest::run(a.seed, |r| println!("{r}"));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    println!("components={} failed={}", results.len(), failed.len());
    if !failed.is_empty() {
        eprintln!("selftest failed: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Infer(a) => cmd_infer(a).map(|_| true),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

