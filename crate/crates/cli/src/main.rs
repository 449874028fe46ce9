use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rvqgen::backbone::{BackboneConfig, Model};
use rvqgen::eval::{evaluate, generate_dataset};
use rvqgen::io::{
    atomic_write, backbone_from_kv, inspect, load_codebook, parse_kv, read_file, save_codebook, token_dump,
    train_from_kv, Checkpoint, Dataset, KvReader,
};
use rvqgen::masking::Schedule;
use rvqgen::rvq::{fit_codebook, FitConfig, UpdateRule};
use rvqgen::sampler::{SamplerConfig, Selection};
use rvqgen::synth::{synthesize, truth_path, Family, SynthConfig, Truth};
use rvqgen::trainer::{TokenDataset, TrainConfig, TrainState, Trainer};
use rvqgen::{Error, Result};

#[derive(Parser)]
#[command(name = "rvqgen", version, about = "Masked residual-token generation on vector sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic mixture dataset and its `.truth` sidecar.
    Synth(SynthArgs),
    /// Fit residual codebooks on a dataset.
    FitRvq(FitArgs),
    /// Train the masked-token model.
    Train(TrainArgs),
    /// Generate records from a checkpoint.
    Sample(SampleArgs),
    /// Compare a generated set with a reference.
    Eval(EvalArgs),
    /// Print the header of any artifact.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "grid")]
    family: Family,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    len: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Modes in total (per class for `classes`).
    #[arg(long, default_value_t = 9)]
    modes: usize,
    #[arg(long, default_value_t = 0)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    #[arg(long, default_value_t = 0.0)]
    mode_std: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, env = "RVQGEN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Codewords per depth (1024 in large-scale image setups).
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Soft assignment width; nearest-codeword updates when omitted.
    #[arg(long)]
    soft_sigma: Option<f64>,
    #[arg(long, env = "RVQGEN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Codebook file; ignored when resuming.
    #[arg(long, required_unless_present = "resume")]
    codebook: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint with its stored configs.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// key=value file with `model.*` and `train.*` keys; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics log; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    schedule: Option<Schedule>,
    #[arg(long)]
    label_dropout: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Comma-separated steps for the finite-difference gradient audit.
    #[arg(long)]
    audit_steps: Option<String>,
    #[arg(long, env = "RVQGEN_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Token dump; defaults to `<out>.tokens`.
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Class to condition on; unconditional when omitted.
    #[arg(long)]
    label: Option<usize>,
    /// paper-28, paper-48, paper-63 or paper-64.
    #[arg(long)]
    preset: Option<String>,
    /// key=value file with `sample.*` keys; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    schedule: Option<Schedule>,
    #[arg(long)]
    selection: Option<Selection>,
    /// Gumbel scale on confidence scores.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    cfg_start: Option<f64>,
    #[arg(long)]
    cfg_end: Option<f64>,
    /// Sample with the raw weights instead of the moving average.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 256)]
    chunk: usize,
    #[arg(long, env = "RVQGEN_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    generated: PathBuf,
    /// Reference dataset.
    #[arg(long, required_unless_present = "truth")]
    reference: Option<PathBuf>,
    /// Ground-truth sidecar; draws the reference from it when no reference
    /// file is given and reports mode occupancy.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    reference_count: usize,
    /// Codebook for reconstruction error and usage entropy on the reference.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Also report the distance between the two reference halves.
    #[arg(long)]
    baseline: bool,
    #[arg(long, env = "RVQGEN_SEED", default_value_t = 0)]
    seed: u64,
    /// Leave wall time out of the report.
    #[arg(long)]
    no_timing: bool,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        family: a.family,
        count: a.count,
        len: a.len,
        dim: a.dim,
        modes: a.modes,
        classes: a.classes,
        spacing: a.spacing,
        mode_std: a.mode_std,
        noise: a.noise,
        seed: a.seed,
    };
    let (data, truth, _) = synthesize(&cfg)?;
    data.save(&a.out)?;
    truth.save(&truth_path(&a.out))?;
    println!(
        "wrote {} records of {}x{} ({} family, {} modes) to {}",
        data.count(),
        data.len,
        data.dim,
        cfg.family,
        truth.centers.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let start = Instant::now();
    let cfg = FitConfig {
        depth: a.depth,
        vocab: a.vocab,
        update: a.soft_sigma.map_or(UpdateRule::Nearest, |sigma| UpdateRule::Probabilistic { sigma }),
        epochs: a.epochs,
        seed: a.seed,
    };
    let latents = data.latents();
    let (book, report) = fit_codebook(&latents, &cfg)?;
    save_codebook(&book, &a.out)?;
    let entropy = book.usage_entropy(&latents)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for j in 0..book.depth() {
        println!(
            "depth={} mse={:.6e} sigma={:.6e} usage_entropy={:.4}",
            j + 1,
            report.mse_by_depth[j + 1],
            book.sigma()[j],
            entropy[j]
        );
    }
    println!("reseeded={} fit_seconds={:.2}", report.reseeded, start.elapsed().as_secs_f64());
    Ok(())
}

fn read_kv(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    match path {
        Some(p) => parse_kv(&String::from_utf8_lossy(&read_file(p)?)),
        None => Ok(BTreeMap::new()),
    }
}

fn parse_steps(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|_| Error::invalid(format!("bad step `{t}`"))))
        .collect()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let (mut train, book, state) = match &a.resume {
        Some(path) => {
            let c = Checkpoint::load(path)?;
            (c.train, c.book, c.state)
        }
        None => {
            let map = read_kv(a.config.as_deref())?;
            let kv = KvReader::new(&map);
            let mut model = backbone_from_kv(&kv, BackboneConfig::default())?;
            let train = train_from_kv(&kv, TrainConfig::default())?;
            kv.finish("")?;
            let book = load_codebook(a.codebook.as_deref().expect("clap requires a codebook"))?;
            model.layers = a.layers.unwrap_or(model.layers);
            model.width = a.width.unwrap_or(model.width);
            model.heads = a.heads.unwrap_or(model.heads);
            model.components = a.components.unwrap_or(model.components);
            model.rank = a.rank.unwrap_or(model.rank);
            model.len = data.len;
            model.dim = data.dim;
            model.depth = book.depth();
            model.vocab = book.vocab();
            model.num_classes = data.num_classes;
            let seed = a.seed.unwrap_or(train.seed);
            let state = TrainState::new(Model::init(model, seed)?);
            (train, book, state)
        }
    };
    if a.resume.is_none() {
        train.seed = a.seed.unwrap_or(train.seed);
        train.batch_size = a.batch_size.unwrap_or(train.batch_size);
        train.lr = a.lr.unwrap_or(train.lr);
        train.warmup = a.warmup.unwrap_or(train.warmup);
        train.weight_decay = a.weight_decay.unwrap_or(train.weight_decay);
        train.ema_decay = a.ema_decay.unwrap_or(train.ema_decay);
        train.schedule = a.schedule.unwrap_or(train.schedule);
        train.label_dropout = a.label_dropout.unwrap_or(train.label_dropout);
    }
    train.steps = a.steps.unwrap_or(train.steps);
    train.checkpoint_every = a.checkpoint_every.unwrap_or(train.checkpoint_every);
    if let Some(s) = &a.audit_steps {
        train.audit_steps = parse_steps(s)?;
    }
    let tokens = TokenDataset::encode(&book, &data.latents(), &data.classes())?;
    // a zero-step run only writes the initial state, but shapes are still checked
    let probe = TrainConfig {
        steps: train.steps.max(1),
        ..train.clone()
    };
    let mut trainer = Trainer::new(probe, book, tokens, state)?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log"));
    let mut log = String::new();
    let start = Instant::now();
    let every = train.checkpoint_every;
    let (book_ref, train_ref, out) = (trainer.book.clone(), train.clone(), a.out.clone());
    let result = trainer.train_until(train.steps, |report, state| {
        log += &format!("{report}\n");
        if every > 0 && state.step.is_multiple_of(every) && state.step < train_ref.steps {
            let ck = Checkpoint {
                train: train_ref.clone(),
                book: book_ref.clone(),
                state: state.clone(),
            };
            ck.save(&with_suffix(&out, &format!(".step{}", state.step)))?;
        }
        Ok(())
    });
    atomic_write(&log_path, log.as_bytes())?;
    result?;
    let ck = Checkpoint {
        train,
        book: trainer.book,
        state: trainer.state,
    };
    ck.save(&a.out)?;
    println!(
        "step={} params={} train_seconds={:.2} checkpoint={} log={}",
        ck.state.step,
        ck.state.model.param_count(),
        start.elapsed().as_secs_f64(),
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn sampler_config(a: &SampleArgs) -> Result<SamplerConfig> {
    let mut cfg = match &a.preset {
        Some(name) => SamplerConfig::preset(name)?,
        None => SamplerConfig::default(),
    };
    let map = read_kv(a.config.as_deref())?;
    let kv = KvReader::new(&map);
    cfg = SamplerConfig {
        steps: kv.get("sample.steps", cfg.steps)?,
        schedule: kv.get("sample.schedule", cfg.schedule)?,
        selection: kv.get("sample.selection", cfg.selection)?,
        temperature: kv.get("sample.temperature", cfg.temperature)?,
        top_p: kv.get("sample.top_p", cfg.top_p)?,
        pi_temperature: kv.get("sample.pi_temperature", cfg.pi_temperature)?,
        cfg_start: kv.get("sample.cfg_start", cfg.cfg_start)?,
        cfg_end: kv.get("sample.cfg_end", cfg.cfg_end)?,
        seed: kv.get("sample.seed", cfg.seed)?,
    };
    kv.finish("")?;
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.schedule = a.schedule.unwrap_or(cfg.schedule);
    cfg.selection = a.selection.unwrap_or(cfg.selection);
    cfg.temperature = a.temperature.unwrap_or(cfg.temperature);
    cfg.top_p = a.top_p.unwrap_or(cfg.top_p);
    cfg.cfg_start = a.cfg_start.unwrap_or(cfg.cfg_start);
    cfg.cfg_end = a.cfg_end.unwrap_or(cfg.cfg_end);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let cfg = sampler_config(&a)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = if a.raw { ck.state.model.clone() } else { ck.state.ema_model() };
    let classes = model.config.num_classes;
    if let Some(l) = a.label {
        if l >= classes {
            return Err(Error::invalid(format!(
                "label {l} out of range: the model has {classes} classes"
            )));
        }
    }
    if a.count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let start = Instant::now();
    let out = generate_dataset(&model, &ck.book, &vec![a.label; a.count], &cfg, a.chunk)?;
    let tokens = a.tokens.clone().unwrap_or_else(|| with_suffix(&a.out, ".tokens"));
    out.data.save(&a.out)?;
    atomic_write(&tokens, token_dump(&out.grids).as_bytes())?;
    println!(
        "generated={} steps={} forward_passes={} wall_seconds={:.3}",
        out.data.count(),
        cfg.steps,
        out.forward_passes,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    let generated = Dataset::load(&a.generated)?;
    let truth = a.truth.as_deref().map(Truth::load).transpose()?;
    let reference = match (&a.reference, &truth) {
        (Some(p), _) => Dataset::load(p)?,
        (None, Some(t)) => t.sample(a.reference_count, &mut ChaCha8Rng::seed_from_u64(a.seed))?.0,
        (None, None) => unreachable!("clap requires a reference or truth"),
    };
    if (generated.len, generated.dim) != (reference.len, reference.dim) {
        return Err(Error::invalid(format!(
            "generated records are {}x{}, reference records are {}x{}",
            generated.len, generated.dim, reference.len, reference.dim
        )));
    }
    let book = a.codebook.as_deref().map(load_codebook).transpose()?;
    let mut report = evaluate(&generated, &reference, book.as_ref(), a.baseline)?;
    if let Some(t) = &truth {
        report.mode_occupancy = Some(t.occupancy(&generated));
    }
    print!("{}", report.to_kv(!a.no_timing));
    let vocab = book.as_ref().map_or(usize::MAX, |b| b.vocab());
    match report.check(vocab) {
        Ok(()) => Ok(true),
        Err(e) => {
            eprintln!("invariant failed: {e}");
            Ok(false)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::FitRvq(a) => cmd_fit(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Sample(a) => cmd_sample(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect { path } => {
            print!("{}", inspect(&path)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
