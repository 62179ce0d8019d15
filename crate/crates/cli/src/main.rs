use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use depthcrf::checkpoint::Checkpoint;
use depthcrf::complexity::complexity_table;
use depthcrf::data::{
    gen_synthetic_scene, load_manifest_file, load_ppm, save_pfm, save_pgm, save_ppm, write_manifest, DepthSample,
    ManifestEntry, SceneSpec,
};
use depthcrf::gradsuite::run_suite;
use depthcrf::metrics::{MetricAccumulator, CSV_HEADER};
use depthcrf::model::init_params;
use depthcrf::train::{effective_mask, evaluation_samples, predict_sample, scene_seed, training_samples, EpochLog, Precision, Trainer};
use depthcrf::{Error, ModelConfig, Params, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "depthcrf", version, about = "Monocular depth: train, infer, evaluate, verify gradients, count MACs")]
struct Cli {
    /// Flat key=value config file; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the init, data and shuffle seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to continue training from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Worker threads; more than one runs the images of a batch in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    device_threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write checkpoint.ckpt and train_log.csv to the output directory.
    Train,
    /// Predict depth for a PPM image; writes PFM and a PGM preview.
    Infer { checkpoint: PathBuf, image: PathBuf, output: PathBuf },
    /// Metrics of a checkpoint on a manifest (default: the configured evaluation scenes).
    Eval {
        checkpoint: PathBuf,
        manifest: Option<PathBuf>,
        /// Score the ground truth against itself instead of the model.
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference check of every primitive and composite path.
    Gradcheck,
    /// Attention MAC counts at 64², 128² and 256², parameter count and latency.
    Bench {
        /// Forward passes timed for latency.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Render synthetic scenes to PPM/PFM files plus a manifest.
    GenData {
        /// Number of scenes (default: the configured training scene count).
        #[arg(long)]
        count: Option<usize>,
        /// Image side (default: the configured training size).
        #[arg(long)]
        size: Option<usize>,
        /// Use the evaluation split's scene seeds.
        #[arg(long)]
        eval: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 1,
        Error::Format { .. } | Error::Io(_) | Error::Dimension { .. } | Error::Evaluation(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn load_config(cli: &Cli) -> Result<ModelConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn precision() -> Precision {
    Precision::from_env()
}

fn train(cli: &Cli) -> Result<()> {
    let mut trainer = match &cli.resume {
        Some(path) => {
            if cli.config.is_some() || cli.seed.is_some() {
                return Err(Error::Config("--resume uses the checkpoint's config; drop --config and --seed".into()));
            }
            let ck = Checkpoint::load(path)?;
            let (train, eval) = (training_samples(&ck.config)?, evaluation_samples(&ck.config)?);
            Trainer::resume(ck, train, eval)?
        }
        None => {
            let cfg = load_config(cli)?;
            let (train, eval) = (training_samples(&cfg)?, evaluation_samples(&cfg)?);
            Trainer::new(cfg, train, eval)?
        }
    };
    trainer.parallel = cli.device_threads > 1;
    trainer.precision = precision();
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("config.txt"), trainer.cfg.to_text())?;
    let log_path = cli.out.join("train_log.csv");
    let mut log = if cli.resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{}", EpochLog::csv_header())?;
        f
    };
    let ckpt_path = cli.out.join("checkpoint.ckpt");
    eprintln!(
        "training {} parameters for {} steps on {} scenes",
        trainer.params.scalar_count(),
        trainer.total_steps(),
        trainer.train.len()
    );
    let start = Instant::now();
    trainer.run(|t, entry| {
        writeln!(log, "{}", entry.csv_row())?;
        t.checkpoint().save(&ckpt_path)?;
        let eval = entry.eval.map(|m| format!(" abs_rel {:.4} d1 {:.4}", m.abs_rel, m.d1)).unwrap_or_default();
        eprintln!(
            "epoch {} step {} loss {:.4}{eval} ({:.1}s)",
            entry.epoch,
            entry.step,
            entry.train_loss,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    trainer.checkpoint().save(&ckpt_path)?;
    println!("{}", ckpt_path.display());
    Ok(())
}

fn infer(checkpoint: &Path, image: &Path, output: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    check_weights(&ck)?;
    let rgb = load_ppm(image)?;
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Config(format!("image is {h}×{w}; the model needs sides that are multiples of 32")));
    }
    let sample = DepthSample { rgb, depth: Tensor::zeros([1, h, w]), mask: vec![false; h * w] };
    let pred = predict_sample(&ck.config, &ck.params, &sample, precision())?;
    let depth = Tensor::new([1, h, w], pred.into_data())?;
    save_pfm(output, &depth)?;
    save_pgm(output.with_extension("pgm"), &depth, ck.config.max_depth as f32)?;
    println!("{}", output.display());
    Ok(())
}

/// The checkpoint's weights must be exactly the set its config builds.
fn check_weights(ck: &Checkpoint) -> Result<()> {
    let expected: Params<f32> = init_params(&ck.config)?;
    let same = expected.len() == ck.params.len()
        && expected.iter().zip(ck.params.iter()).all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
    if same {
        Ok(())
    } else {
        Err(Error::Config("checkpoint weights do not match its config".into()))
    }
}

fn eval(checkpoint: &Path, manifest: Option<&Path>, oracle: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    check_weights(&ck)?;
    let cfg = &ck.config;
    let samples = match manifest {
        Some(m) => load_manifest_file(m)?,
        None => evaluation_samples(cfg)?,
    };
    let mut acc = MetricAccumulator::default();
    for s in &samples {
        let g: Vec<f64> = s.depth.data().iter().map(|&v| v as f64).collect();
        let p: Vec<f64> = if oracle {
            g.clone()
        } else {
            predict_sample(cfg, &ck.params, s, precision())?.data().iter().map(|&v| v as f64).collect()
        };
        acc.add(&p, &g, &effective_mask(s.depth.data(), &s.mask, cfg), (cfg.min_depth, cfg.max_depth))?;
    }
    let report = acc.report()?;
    println!("{CSV_HEADER}");
    println!("{}", report.csv_row());
    eprintln!("{report}");
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let start = Instant::now();
    println!("{:<28} {:>12} {:>10} {:>8} {:>8}  result", "case", "max_rel_err", "tolerance", "coords", "seconds");
    let outcomes = run_suite();
    for o in &outcomes {
        let verdict = match &o.failure {
            Some(msg) => format!("ERROR {msg}"),
            None if o.passed() => "pass".into(),
            None => "FAIL".into(),
        };
        println!("{:<28} {:>12.3e} {:>10.0e} {:>8} {:>8.2}  {verdict}", o.name, o.error, o.tolerance, o.checked, o.seconds);
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("{} cases, {failed} failed, {:.1}s", outcomes.len(), start.elapsed().as_secs_f64());
    Ok(failed == 0)
}

fn bench(cli: &Cli, repeats: usize) -> Result<()> {
    let cfg = load_config(cli)?;
    let params: Params<f32> = init_params(&cfg)?;
    let rows = complexity_table(&cfg, &[64, 128, 256])?;
    println!("side,tokens,windowed_macs,dense_macs,model_attention_macs,model_total_macs");
    for r in &rows {
        println!("{},{},{},{},{},{}", r.side, r.tokens, r.windowed, r.dense, r.model_attention, r.model_total);
    }
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        println!(
            "{}->{}: windowed x{:.3}, dense x{:.3}, model attention x{:.3}",
            a.side,
            b.side,
            b.windowed as f64 / a.windowed as f64,
            b.dense as f64 / a.dense as f64,
            b.model_attention as f64 / a.model_attention as f64
        );
    }
    println!("parameters {}", params.scalar_count());
    let side = cfg.train_size;
    let sample = gen_synthetic_scene(&SceneSpec::from_config(&cfg, 0, side))?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        predict_sample(&cfg, &params, &sample, precision())?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    println!("latency {side}x{side} median {:.2} ms over {} runs", times[times.len() / 2], times.len());
    Ok(())
}

fn gen_data(cli: &Cli, count: Option<usize>, size: Option<usize>, eval: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let n = count.unwrap_or(if eval { cfg.eval_scenes } else { cfg.train_scenes });
    let side = size.unwrap_or(if eval { cfg.eval_size } else { cfg.train_size });
    fs::create_dir_all(&cli.out)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let spec = SceneSpec::from_config(&cfg, scene_seed(cfg.data_seed, eval, i), side);
        let s = gen_synthetic_scene(&spec)?;
        let (rgb, depth) = (PathBuf::from(format!("scene_{i:04}.ppm")), PathBuf::from(format!("scene_{i:04}.pfm")));
        save_ppm(cli.out.join(&rgb), &s.rgb)?;
        save_pfm(cli.out.join(&depth), &s.depth)?;
        entries.push(ManifestEntry::Files { rgb, depth });
    }
    let manifest = cli.out.join("manifest.txt");
    fs::write(&manifest, write_manifest(&entries))?;
    println!("{}", manifest.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    if cli.device_threads == 0 {
        return Err(Error::Config("--device-threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.device_threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Train => train(cli)?,
        Command::Infer { checkpoint, image, output } => infer(checkpoint, image, output)?,
        Command::Eval { checkpoint, manifest, oracle } => eval(checkpoint, manifest.as_deref(), *oracle)?,
        Command::Gradcheck => return gradcheck(),
        Command::Bench { repeats } => bench(cli, *repeats)?,
        Command::GenData { count, size, eval } => gen_data(cli, *count, *size, *eval)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
