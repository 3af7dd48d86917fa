mod check;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dcsat::attack::{evaluate_model, samples_csv};
use dcsat::data::{load_mnist_idx, Dataset, LatentSet};
use dcsat::exec::Exec;
use dcsat::fsio::write_atomic;
use dcsat::training::{
    ablation_sweep, finetune_dcsat, parse_kv, records_csv, resolve_eps, train_autoencoder,
    train_dcs_baseline, AblationInputs, AblationRecord, AeConfig, CellMetrics, Method, SensedSplit,
    TrainConfig,
};
use dcsat::{make_sampler, DenseNet, SamplingMatrix};

use manifest::RunManifest;

/// Bad flags, unreadable inputs or invalid configuration: exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("{}: no such file or directory", path.display())))
    }
}

#[derive(Parser)]
#[command(name = "dcsat", version, about = "Adversarially robust generators for deep compressed sensing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the autoencoder whose decoder is the warm-start generator.
    TrainAe(TrainAeArgs),
    /// Fine-tune the warm start at one (λ, SR) and evaluate it under attack.
    Finetune(FinetuneArgs),
    /// λ × SR sweep of DCS and DCSAT from one warm start.
    Ablate(AblateArgs),
    /// Attack a generator on held-out latent codes.
    Attack(AttackArgs),
    /// Run the solver, Jacobian and bound self-tests.
    Check(CheckArgs),
}

#[derive(Args)]
struct Common {
    /// Directory with the four MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    data: PathBuf,
    /// Training images to load.
    #[arg(long, default_value_t = 2000)]
    limit: usize,
    /// Test images to load.
    #[arg(long, default_value_t = 500)]
    test_limit: usize,
    /// `key = value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainAeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dcs,
    Dcsat,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `train-ae`.
    #[arg(long)]
    warm_start: PathBuf,
    #[arg(long, value_enum, default_value = "dcsat")]
    mode: Mode,
    #[arg(long)]
    lambda: Option<f64>,
    /// Radius, or `auto` to calibrate it on the training split.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    sr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    warm_start: PathBuf,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', default_value = "2e3,2e4,2e5")]
    lambdas: Vec<f64>,
    /// Comma-separated sampling rates.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.6")]
    srs: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Generator checkpoint to attack.
    #[arg(long)]
    generator: PathBuf,
    /// Mask file written by `finetune`.
    #[arg(long)]
    mask: PathBuf,
    /// Latent codes of the test images.
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    /// Projected-gradient restarts per trust-region instance.
    #[arg(long, default_value_t = 16)]
    restarts: usize,
    #[arg(long, default_value_t = 50)]
    nets: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Deliberately corrupt every solver answer (the suite must then fail).
    #[arg(long)]
    perturb_solution: bool,
}

/// Defaults, then the config file, then `--set` overrides, then flags.
fn resolve_config(common: &Common, manifest: &mut RunManifest) -> Result<(TrainConfig, AeConfig)> {
    let mut train = TrainConfig::default();
    let mut ae = AeConfig::default();
    let mut apply = |k: &str, v: &str| -> Result<()> {
        let hit_train = train.set(k, v).map_err(|e| usage(e.to_string()))?;
        let hit_ae = ae.set(k, v).map_err(|e| usage(e.to_string()))?;
        if hit_train || hit_ae {
            Ok(())
        } else {
            Err(usage(format!("unknown configuration key `{k}`")))
        }
    };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(require(path)?)
            .with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in parse_kv(&text, path).map_err(|e| usage(e.to_string()))? {
            apply(&k, &v)?;
        }
        manifest.input(path);
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        apply(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        apply("seed", &s.to_string())?;
    }
    Ok((train, ae))
}

fn load_data(common: &Common, manifest: &mut RunManifest) -> Result<(Dataset, Dataset)> {
    let dir = require(&common.data)?;
    let file = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        require(&p)?;
        Ok(p)
    };
    let (tr_x, tr_y) = (file("train-images-idx3-ubyte")?, file("train-labels-idx1-ubyte")?);
    let (te_x, te_y) = (file("t10k-images-idx3-ubyte")?, file("t10k-labels-idx1-ubyte")?);
    let train = load_mnist_idx(&tr_x, Some(&tr_y), Some(common.limit))?;
    let test = load_mnist_idx(&te_x, Some(&te_y), Some(common.test_limit))?;
    for p in [&tr_x, &tr_y, &te_x, &te_y] {
        manifest.input(p);
    }
    Ok((train, test))
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn emit(manifest: &mut RunManifest, path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)?;
    manifest.output(path);
    Ok(())
}

struct WarmStart {
    generator: DenseNet,
    train_latents: LatentSet,
    test_latents: LatentSet,
}

fn load_warm_start(dir: &Path, manifest: &mut RunManifest) -> Result<WarmStart> {
    let mut path = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        require(&p)?;
        manifest.input(&p);
        Ok(p)
    };
    Ok(WarmStart {
        generator: DenseNet::load(&path("generator.txt")?)?,
        train_latents: LatentSet::load(&path("latents_train.txt")?)?,
        test_latents: LatentSet::load(&path("latents_test.txt")?)?,
    })
}

fn exec(cli: &Cli) -> Exec {
    if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn cmd_train_ae(args: &TrainAeArgs, _exec: Exec) -> Result<()> {
    let mut manifest = RunManifest::start("train-ae");
    let (_, mut cfg) = resolve_config(&args.common, &mut manifest)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    manifest.config(cfg.to_pairs());
    let (train, test) = load_data(&args.common, &mut manifest)?;
    let out = &args.common.out;
    create_out(out)?;

    let start = Instant::now();
    let ae = train_autoencoder(&train, Some(&test), &cfg)?;
    manifest.timing("total", start.elapsed().as_secs_f64());
    for (e, s) in ae.history.seconds.iter().enumerate().skip(1) {
        manifest.timing(format!("epoch {e}"), *s);
    }
    emit(&mut manifest, &out.join("encoder.txt"), ae.encoder.to_text().as_bytes())?;
    emit(&mut manifest, &out.join("generator.txt"), ae.generator.to_text().as_bytes())?;
    emit(&mut manifest, &out.join("latents_train.txt"), ae.encode(&train)?.to_text().as_bytes())?;
    emit(&mut manifest, &out.join("latents_test.txt"), ae.encode(&test)?.to_text().as_bytes())?;
    emit(&mut manifest, &out.join("ae_history.csv"), &ae.history.to_csv()?)?;
    manifest.finish(out)?;
    let h = &ae.history;
    println!(
        "train-ae: {} epochs, reconstruction loss {:.4} -> {:.4} (test {:.4})",
        cfg.epochs,
        h.train[0],
        h.train.last().unwrap(),
        h.test.last().unwrap()
    );
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs, exec: Exec) -> Result<bool> {
    let mut manifest = RunManifest::start("finetune");
    let (mut cfg, _) = resolve_config(&args.common, &mut manifest)?;
    let mut flag = |k: &str, v: Option<String>| -> Result<()> {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(|e| usage(e.to_string()))?;
        }
        Ok(())
    };
    flag("lambda", args.lambda.map(|v| v.to_string()))?;
    flag("eps", args.eps.clone())?;
    flag("sr", args.sr.map(|v| v.to_string()))?;
    flag("epochs", args.epochs.map(|v| v.to_string()))?;
    let warm = load_warm_start(&args.warm_start, &mut manifest)?;
    let (train, test) = load_data(&args.common, &mut manifest)?;
    let out = &args.common.out;
    create_out(out)?;

    let phi = make_sampler(train.dim(), cfg.sr, cfg.seed)?;
    let train_y = train.sensed(&phi)?;
    let test_y = test.sensed(&phi)?;
    let tr = SensedSplit::new(&warm.train_latents, &train_y)?;
    let te = SensedSplit::new(&warm.test_latents, &test_y)?;
    let eps = resolve_eps(&warm.generator, &phi, tr, &cfg, exec)?;
    cfg.eps = Some(eps);
    manifest.config(cfg.to_pairs());
    emit(&mut manifest, &out.join("mask.txt"), phi.to_text().as_bytes())?;

    let (method, lambda) = match args.mode {
        Mode::Dcs => (Method::Dcs, None),
        Mode::Dcsat => (Method::Dcsat, Some(cfg.lambda)),
    };
    let start = Instant::now();
    let trained = match args.mode {
        Mode::Dcs => train_dcs_baseline(&warm.generator, &phi, tr, Some(te), &cfg, exec),
        Mode::Dcsat => finetune_dcsat(&warm.generator, &phi, tr, Some(te), &cfg, exec),
    };
    manifest.timing("training", start.elapsed().as_secs_f64());
    let mut record = AblationRecord {
        method,
        lambda,
        sr: cfg.sr,
        seed: cfg.seed,
        eps,
        metrics: None,
        failure: None,
    };
    let ok = match trained {
        Ok((net, history)) => {
            for (e, s) in history.seconds.iter().enumerate().skip(1) {
                manifest.timing(format!("epoch {e}"), *s);
            }
            emit(&mut manifest, &out.join("finetuned.txt"), net.to_text().as_bytes())?;
            emit(&mut manifest, &out.join("history.csv"), &history.to_csv()?)?;
            let start = Instant::now();
            let ev = evaluate_model(&net, &phi, te.latents, te.targets, eps, cfg.n_queries, cfg.seed, exec)?;
            manifest.timing("evaluation", start.elapsed().as_secs_f64());
            emit(&mut manifest, &out.join("samples.csv"), &samples_csv(&ev.samples)?)?;
            record.metrics = Some(CellMetrics {
                adv_risk: ev.adv_risk,
                fit_loss: ev.fit_loss,
                total: ev.total,
                linearized_adv_risk: ev.linearized_risk,
            });
            println!(
                "finetune: eps {eps:.4}, adv_risk {:.4}, fit_loss {:.4}, total {:.4}",
                ev.adv_risk, ev.fit_loss, ev.total
            );
            true
        }
        Err(dcsat::Error::Diverged { epoch, reason }) => {
            eprintln!("finetune: training failed at epoch {epoch}: {reason}");
            record.failure = Some(reason);
            false
        }
        Err(e) => return Err(e.into()),
    };
    emit(&mut manifest, &out.join("evaluation.csv"), &records_csv(&[record])?)?;
    manifest.finish(out)?;
    Ok(ok)
}

fn cmd_ablate(args: &AblateArgs, exec: Exec) -> Result<()> {
    if args.lambdas.is_empty() {
        return Err(usage("--lambdas must list at least one value"));
    }
    if args.srs.is_empty() {
        return Err(usage("--srs must list at least one value"));
    }
    let mut manifest = RunManifest::start("ablate");
    let (mut cfg, _) = resolve_config(&args.common, &mut manifest)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    manifest.config(cfg.to_pairs());
    manifest.config([("lambdas", list(&args.lambdas)), ("srs", list(&args.srs))]);
    let warm = load_warm_start(&args.warm_start, &mut manifest)?;
    let (train, test) = load_data(&args.common, &mut manifest)?;
    let out = &args.common.out;
    create_out(out)?;

    let inputs = AblationInputs {
        generator: &warm.generator,
        train: &train,
        train_latents: &warm.train_latents,
        test: &test,
        test_latents: &warm.test_latents,
    };
    let start = Instant::now();
    let records = ablation_sweep(&args.lambdas, &args.srs, &cfg, &inputs, exec)?;
    manifest.timing("total", start.elapsed().as_secs_f64());
    emit(&mut manifest, &out.join("ablation.csv"), &records_csv(&records)?)?;
    manifest.finish(out)?;
    print!("{}", String::from_utf8(records_csv(&records)?)?);
    Ok(())
}

fn cmd_attack(args: &AttackArgs, exec: Exec) -> Result<()> {
    let mut manifest = RunManifest::start("attack");
    let (cfg, _) = resolve_config(&args.common, &mut manifest)?;
    let queries = args.queries.unwrap_or(cfg.n_queries);
    manifest.config(cfg.to_pairs());
    manifest.config([("attack_eps", args.eps.to_string()), ("queries", queries.to_string())]);
    let net = DenseNet::load(require(&args.generator)?)?;
    let phi = SamplingMatrix::load(require(&args.mask)?)?;
    let latents = LatentSet::load(require(&args.latents)?)?;
    for p in [&args.generator, &args.mask, &args.latents] {
        manifest.input(p);
    }
    let (_, test) = load_data(&args.common, &mut manifest)?;
    if latents.count() != test.count() {
        return Err(usage(format!(
            "{} holds {} codes but {} test images were loaded",
            args.latents.display(),
            latents.count(),
            test.count()
        )));
    }
    let out = &args.common.out;
    create_out(out)?;
    let ys = test.sensed(&phi)?;
    let start = Instant::now();
    let ev = evaluate_model(&net, &phi, &latents, &ys, args.eps, queries, cfg.seed, exec)?;
    manifest.timing("total", start.elapsed().as_secs_f64());
    emit(&mut manifest, &out.join("attack.csv"), &samples_csv(&ev.samples)?)?;
    manifest.finish(out)?;
    println!(
        "attack: adv_risk {:.6}, fit_loss {:.6}, total {:.6}, linearized {:.6}",
        ev.adv_risk, ev.fit_loss, ev.total, ev.linearized_risk
    );
    Ok(())
}

fn cmd_check(args: &CheckArgs, exec: Exec) -> bool {
    let report = check::run(&check::CheckOptions {
        instances: args.instances,
        restarts: args.restarts,
        nets: args.nets,
        seed: args.seed,
        perturb_solution: args.perturb_solution,
        exec,
    });
    for l in &report.lines {
        println!("{l}");
    }
    for f in report.failures.iter().take(20) {
        eprintln!("  {f}");
    }
    if report.failures.len() > 20 {
        eprintln!("  ... {} more", report.failures.len() - 20);
    }
    report.failures.is_empty()
}

fn run(cli: &Cli) -> Result<bool> {
    let exec = exec(cli);
    match &cli.command {
        Command::TrainAe(a) => cmd_train_ae(a, exec).map(|_| true),
        Command::Finetune(a) => cmd_finetune(a, exec),
        Command::Ablate(a) => cmd_ablate(a, exec).map(|_| true),
        Command::Attack(a) => cmd_attack(a, exec).map(|_| true),
        Command::Check(a) => Ok(cmd_check(a, exec)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
