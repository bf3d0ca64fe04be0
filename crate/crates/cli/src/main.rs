use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fcdsn::checkpoint::Model;
use fcdsn::config::RunConfig;
use fcdsn::io::{self, load_dataset, ImageBuffer, Scene, Split};
use fcdsn::metrics::{EvalReport, InvalidPolicy};
use fcdsn::net::SimilarityMode;
use fcdsn::pipeline::{self, Ablation, TrainOptions};
use fcdsn::selftest::{self, SuiteOptions};
use fcdsn::synthetic::{generate_pair, SceneSpec};
use fcdsn::{Error, Result};

#[derive(Parser)]
#[command(name = "fcdsn", version, about = "Fully convolutional stereo matching with learned depth completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the feature extractor and similarity network jointly.
    TrainSim(TrainSim),
    /// Train the completion network on holes of the consistency-checked maps.
    TrainDc(TrainDc),
    /// Disparity maps for one stereo pair.
    Infer(Infer),
    /// n-point errors over a dataset split.
    Eval(Eval),
    /// Evaluate a grid of similarity / deformable / completion switches.
    Ablate(Ablate),
    /// Parameter counts of a configuration or checkpoint.
    Params(Params),
    /// Run the ten acceptance checks; exits non-zero if any fails.
    Selftest(Selftest),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(Selftest),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set d_max=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {:?}", o)))?;
            c.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root (scene folders, optional eval.txt).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use this many generated scenes instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum SimilarityArg {
    Trained,
    Cosine,
}

impl From<SimilarityArg> for SimilarityMode {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::Trained => SimilarityMode::Trained,
            SimilarityArg::Cosine => SimilarityMode::Cosine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainSim {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SimilarityArg::Trained)]
    similarity: SimilarityArg,
    /// Per-step loss log (default: `<out>.loss.log`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDc {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint with a trained stereo network; its weights stay frozen.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long, value_enum, default_value_t = SimilarityArg::Trained)]
    similarity: SimilarityArg,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    dconv: Switch,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    dc: Switch,
}

impl AblationArgs {
    fn ablation(&self) -> Ablation {
        Ablation {
            similarity: self.similarity.into(),
            deformable: self.dconv == Switch::On,
            completion: self.dc == Switch::On,
        }
    }
}

#[derive(Args)]
struct Infer {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// Output directory for PFM, 16-bit PNG and preview images.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    ablation: AblationArgs,
    /// Score only predicted pixels instead of counting holes as errors.
    #[arg(long)]
    exclude_invalid: bool,
    /// Also write `name<TAB>value` metrics here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Similarity modes to try.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [SimilarityArg::Trained, SimilarityArg::Cosine])]
    similarity: Vec<SimilarityArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Switch::On, Switch::Off])]
    dconv: Vec<Switch>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Switch::On, Switch::Off])]
    dc: Vec<Switch>,
}

#[derive(Args)]
struct Params {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Count a checkpoint instead of a configuration.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct Selftest {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainSim(a) => train_sim(a),
        Command::TrainDc(a) => train_dc(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Params(a) => params(a),
        Command::Selftest(a) => return selftest(a.seed, false),
        Command::Gradcheck(a) => return selftest(a.seed, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

fn log_config(c: &RunConfig) {
    log::info!("seed {}", c.seed);
    for line in c.to_text().lines() {
        log::info!("config {}", line);
    }
}

fn scenes(data: &DataArgs, cfg: &RunConfig) -> Result<Vec<Scene>> {
    if let Some(n) = data.synthetic {
        let spec = SceneSpec {
            d_max: cfg.d_max,
            ..SceneSpec::default()
        };
        // eval scenes come from a different stream than training scenes
        let salt = match data.split {
            SplitArg::Train => 0,
            SplitArg::Eval => 1,
            SplitArg::All => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (salt << 32));
        return (0..n)
            .map(|i| {
                let p = generate_pair(&spec, &mut rng)?;
                Ok(Scene {
                    name: format!("synthetic-{:03}", i),
                    left: p.left,
                    right: p.right,
                    gt: Some(p.gt),
                    mask: vec![true; spec.width * spec.height],
                })
            })
            .collect();
    }
    let root = data
        .data
        .as_ref()
        .or(cfg.dataset_root.as_ref())
        .ok_or_else(|| Error::InvalidArgument("give --data, --synthetic or dataset_root".into()))?;
    let split = match data.split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
        SplitArg::All => Split::All,
    };
    let s = load_dataset(root, split)?;
    log::info!("{} scenes from {}", s.len(), root.display());
    Ok(s)
}

/// Append-only `step<TAB>loss` lines.
fn loss_log(explicit: &Option<PathBuf>, out: &Path) -> Result<File> {
    let path = explicit.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.log");
        PathBuf::from(p)
    });
    log::info!("loss log {}", path.display());
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

fn progress(file: &mut File, steps: usize) -> impl FnMut(usize, Option<f64>) + '_ {
    let every = (steps / 20).max(1);
    let mut window = Vec::new();
    move |step, loss| {
        match loss {
            Some(l) => {
                let _ = writeln!(file, "{}\t{:.6}", step, l);
                window.push(l);
            }
            None => {
                let _ = writeln!(file, "{}\tskipped", step);
            }
        }
        if step % every == 0 || step == steps {
            let mean = window.iter().sum::<f64>() / window.len().max(1) as f64;
            log::info!("step {}/{} loss {:.5}", step, steps, mean);
            window.clear();
        }
    }
}

fn train_sim(a: TrainSim) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    log_config(&cfg);
    let mut model = match &a.init {
        Some(p) => Model::load(p)?,
        None => Model::new(&cfg.net, cfg.seed),
    };
    let scenes = scenes(&a.data, &cfg)?;
    let samples = pipeline::stereo_samples(&scenes)?;
    let opts = TrainOptions {
        steps: cfg.stereo_steps,
        batch: cfg.stereo_batch,
        lr: cfg.stereo_lr,
        seed: cfg.seed,
    };
    let mut file = loss_log(&a.log, &a.out)?;
    pipeline::train_stereo(
        &mut model,
        &samples,
        a.similarity.into(),
        cfg.stereo_patch,
        &opts,
        progress(&mut file, opts.steps),
    )?;
    model.dataset = dataset_tag(&a.data, &cfg);
    model.save(&a.out)?;
    log::info!("saved {}", a.out.display());
    Ok(())
}

fn dataset_tag(data: &DataArgs, cfg: &RunConfig) -> String {
    match (data.synthetic, &data.data, &cfg.dataset_root) {
        (Some(n), _, _) => format!("synthetic:{}", n),
        (_, Some(p), _) | (_, None, Some(p)) => p.display().to_string(),
        _ => String::new(),
    }
}

fn train_dc(a: TrainDc) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    log_config(&cfg);
    let mut model = Model::load(&a.model)?;
    let scenes = scenes(&a.data, &cfg)?;
    let (samples, discarded) = pipeline::completion_samples(&model, &scenes, cfg.d_max, cfg.tau, cfg.half_width)?;
    log::info!("{} labelled holes, {} discarded", samples.len(), discarded);
    let opts = TrainOptions {
        steps: cfg.dc_steps,
        batch: cfg.dc_batch,
        lr: cfg.dc_lr,
        seed: cfg.seed,
    };
    let mut file = loss_log(&a.log, &a.out)?;
    pipeline::train_completion(&mut model, &samples, &opts, progress(&mut file, opts.steps))?;
    model.save(&a.out)?;
    log::info!("saved {}", a.out.display());
    Ok(())
}

fn load_pair(left: &Path, right: &Path) -> Result<(fcdsn::Tensor<f32>, fcdsn::Tensor<f32>)> {
    let l = io::read_image(left)?;
    let r = io::read_image(right)?;
    if (l.width, l.height) != (r.width, r.height) {
        return Err(Error::InvalidArgument("left and right images differ in size".into()));
    }
    Ok((l.to_rgb_tensor(), r.to_rgb_tensor()))
}

fn infer(a: Infer) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let model = Model::load(&a.model)?;
    let (left, right) = load_pair(&a.left, &a.right)?;
    let out = pipeline::run_pair(&model, &left, &right, cfg.d_max, cfg.tau, &a.ablation.ablation())?;
    std::fs::create_dir_all(&a.out)?;
    let mut maps = vec![("left", &out.left), ("right", &out.right), ("consistent", &out.consistent)];
    if let Some(f) = &out.filled {
        maps.push(("filled", f));
    }
    for (name, map) in maps {
        io::write_pfm(&ImageBuffer::from_disparity(map), a.out.join(format!("{}.pfm", name)))?;
        io::write_disparity_png16(map, a.out.join(format!("{}.png", name)))?;
        io::write_disparity_preview(map, cfg.d_max as f32, a.out.join(format!("{}_preview.png", name)))?;
        log::info!("{}: density {:.3}", name, map.density());
    }
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn policy(exclude: bool) -> InvalidPolicy {
    if exclude {
        InvalidPolicy::Exclude
    } else {
        InvalidPolicy::CountAsError
    }
}

fn eval(a: Eval) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let model = Model::load(&a.model)?;
    let scenes = scenes(&a.data, &cfg)?;
    let pol = policy(a.exclude_invalid);
    let per_scene = pipeline::evaluate_scenes(&model, &scenes, cfg.d_max, cfg.tau, &a.ablation.ablation(), pol)?;
    for (name, r) in &per_scene {
        println!("{}\n{}", name, r.to_table());
    }
    let reports: Vec<EvalReport> = per_scene.into_iter().map(|(_, r)| r).collect();
    let pooled = pipeline::pool_reports(&reports)
        .ok_or_else(|| Error::InvalidArgument("no scene with ground truth to evaluate".into()))?;
    println!("all scenes ({} holes as errors)", if a.exclude_invalid { "excluding" } else { "counting" });
    println!("{}", pooled.to_table());
    print!("{}", pooled.to_key_values());
    if let Some(p) = a.metrics {
        std::fs::write(p, pooled.to_key_values())?;
    }
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let model = Model::load(&a.model)?;
    let scenes = scenes(&a.data, &cfg)?;
    println!("{:<9} {:<6} {:<4} {:>8} {:>8} {:>8} {:>8} {:>8}", "similar", "dconv", "dc", "4-PE", "2-PE", "1-PE", "0.5-PE", "density");
    for &s in &a.similarity {
        for &d in &a.dconv {
            for &c in &a.dc {
                let ablation = Ablation {
                    similarity: s.into(),
                    deformable: d == Switch::On,
                    completion: c == Switch::On,
                };
                let per_scene = pipeline::evaluate_scenes(
                    &model,
                    &scenes,
                    cfg.d_max,
                    cfg.tau,
                    &ablation,
                    InvalidPolicy::CountAsError,
                )?;
                let reports: Vec<EvalReport> = per_scene.into_iter().map(|(_, r)| r).collect();
                let Some(p) = pipeline::pool_reports(&reports) else {
                    return Err(Error::InvalidArgument("no scene with ground truth to evaluate".into()));
                };
                let pe = |n| p.error_at(n).unwrap_or(f64::NAN);
                println!(
                    "{:<9} {:<6} {:<4} {:>7.2}% {:>7.2}% {:>7.2}% {:>7.2}% {:>7.1}%",
                    if s == SimilarityArg::Trained { "trained" } else { "cosine" },
                    if d == Switch::On { "on" } else { "off" },
                    if c == Switch::On { "on" } else { "off" },
                    pe(4.0),
                    pe(2.0),
                    pe(1.0),
                    pe(0.5),
                    100.0 * p.density
                );
            }
        }
    }
    Ok(())
}

fn params(a: Params) -> Result<()> {
    let model = match &a.model {
        Some(p) => Model::load(p)?,
        None => Model::new(&a.cfg.resolve()?.net, 0),
    };
    let c = model.param_counts();
    println!("features\t{}", c.features);
    println!("similarity\t{}", c.similarity);
    println!("completion\t{}", c.completion);
    println!("total\t{}", c.total());
    println!("max_rank\t{}", model.max_param_rank());
    Ok(())
}

fn selftest(seed: u64, gradients_only: bool) -> ExitCode {
    let reports = if gradients_only {
        let r = selftest::gradient_correctness(seed);
        println!("{}", r.line());
        vec![r]
    } else {
        let opts = SuiteOptions {
            seed,
            ..SuiteOptions::default()
        };
        selftest::run_suite(&opts, |r| println!("{}", r.line()))
    };
    if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
