use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use artnet::architectures::{analyze, calibrate, kv_report, text_report, ArchSpec, Conventions, CALIBRATED, REFERENCE_CLASSES};
use artnet::bench::{self, BenchBlock, BenchConfig, DEFAULT_REPEATS};
use artnet::checkpoint::Checkpoint;
use artnet::config::{RunConfig, SCHEMA};
use artnet::data::{generate, Dataset};
use artnet::training::{evaluate, train, Split, TrainState};
use artnet::verify::{self, VerifyOptions};
use artnet::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "artnet",
    version,
    about = "Appearance-and-relation video networks on synthetic motion data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr=0.05` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes final.ckpt, best.ckpt and train.log into --out
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; without it the smoothed training loss drives the schedule
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint, keeping its iteration counter
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Multi-clip, multi-crop evaluation of a checkpoint
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        crops: Option<usize>,
    },
    /// Shape trace, parameter and FLOP counts
    Analyze {
        #[arg(long, required_unless_present = "calibrate")]
        arch: Option<String>,
        /// Input extents TxHxW
        #[arg(long, default_value = "16x112x112")]
        input: String,
        /// `calibrated` or `macs|mults-adds,with-bias|no-bias|as-built,bn|no-bn`
        #[arg(long, default_value = "calibrated")]
        convention: String,
        #[arg(long, default_value_t = REFERENCE_CLASSES)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Rank every counting convention against the published counts
        #[arg(long)]
        calibrate: bool,
    },
    /// Identity, gradient, shape and count checks
    Verify {
        /// More identity trials and gradient-check seeds
        #[arg(long)]
        strict: bool,
        /// Perturb the energy identity to confirm the suite can fail
        #[arg(long, hide = true)]
        inject_energy_fault: bool,
    },
    /// Time one unit's forward and forward+backward passes
    Bench {
        #[arg(long, default_value = "smart")]
        block: String,
        /// Input CxTxHxW
        #[arg(long, default_value = "16x4x28x28")]
        shape: String,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        /// Also time this block and report the time and FLOP ratios
        #[arg(long)]
        baseline: Option<String>,
    },
    /// List every config key with its default value
    Keys,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Kv,
}

fn resolve_config(args: &ConfigArgs, flags: Vec<(&'static str, Option<String>)>) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?),
        None => None,
    };
    let mut overrides: Vec<(&str, String)> = Vec::new();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        overrides.push((k.trim(), v.to_string()));
    }
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
    RunConfig::resolve(text.as_deref(), &overrides)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn parse_thw(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad input '{s}', expected TxHxW")))
        })
        .collect::<Result<_>>()?;
    dims.try_into()
        .map_err(|_| Error::Config(format!("bad input '{s}', expected TxHxW")))
}

fn cmd_generate(cfg: RunConfig, out: &Path) -> Result<()> {
    let data = generate(&cfg.task, cfg.n)?;
    data.save(out)?;
    let bytes = fs::metadata(out)?.len();
    let hist: Vec<String> = data.class_histogram().iter().map(usize::to_string).collect();
    println!(
        "wrote={} count={} classes={} task={} bytes={bytes} histogram={}",
        out.display(),
        data.len(),
        data.spec.classes,
        data.spec.task.as_str(),
        hist.join(",")
    );
    Ok(())
}

fn cmd_train(cfg: RunConfig, data_path: &Path, val_path: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let data = load_dataset(data_path)?;
    let val = val_path.map(load_dataset).transpose()?;
    let tc = cfg.train_config(&data.spec)?;
    let (mut model, mut state) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let model = ck.to_model()?;
            if model.spec.name != cfg.arch {
                eprintln!(
                    "note: resuming architecture {} from checkpoint (config names {})",
                    model.spec.name, cfg.arch
                );
            }
            let state = ck.train_state(&model, &tc);
            (model, state)
        }
        None => {
            let spec = ArchSpec::from_name(&cfg.arch, data.spec.classes, cfg.tiny_channels, data.spec.channels)?;
            let model = artnet::architectures::Model::new(spec, tc.seed)?;
            let state = TrainState::new(&model, &tc);
            (model, state)
        }
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("run.conf"), cfg.to_text())?;
    let mut log = fs::File::create(out.join("train.log"))?;
    let log_every = cfg.log_every.max(1);
    let mut best = f64::INFINITY;
    let mut stopped = false;
    println!(
        "arch={} params={} start_iter={}",
        model.spec.name,
        model.store.num_scalars(),
        state.iteration
    );

    // Train in eval_every-sized chunks so the model can be snapshotted at each validation.
    while state.iteration < tc.max_iters && !stopped {
        let mut chunk = tc.clone();
        chunk.max_iters = ((state.iteration / tc.eval_every + 1) * tc.eval_every).min(tc.max_iters);
        let mut io_err = None;
        let outcome = train(&mut model, &data, val.as_ref(), &chunk, &mut state, |rec| {
            if let Err(e) = writeln!(log, "{rec}") {
                io_err.get_or_insert(e);
            }
            if rec.split == Split::Val || rec.iter % log_every == 0 {
                println!("{rec}");
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        stopped = outcome.stopped_early;
        if let Some(v) = outcome.log.iter().rev().find(|r| r.split == Split::Val) {
            if v.loss < best {
                best = v.loss;
                Checkpoint::from_model(&model, CALIBRATED, Some(&state)).save(&out.join("best.ckpt"))?;
            }
        }
    }
    let final_path = out.join("final.ckpt");
    Checkpoint::from_model(&model, CALIBRATED, Some(&state)).save(&final_path)?;
    if !out.join("best.ckpt").exists() {
        fs::copy(&final_path, out.join("best.ckpt"))?;
    }
    println!(
        "final_iter={} best_val_loss={best:.6} stopped_early={stopped} out={}",
        state.iteration,
        out.display()
    );
    Ok(())
}

fn cmd_eval(cfg: RunConfig, checkpoint: &Path, data_path: &Path) -> Result<()> {
    let mut model = Checkpoint::load(checkpoint)?.to_model()?;
    let data = load_dataset(data_path)?;
    let ec = cfg.eval_config(&data.spec)?;
    let r = evaluate(&mut model, &data, &ec)?;
    println!(
        "arch={} videos={} volumes={} clips={} crops={} top1={:.4} top5={:.4} avg={:.4}",
        model.spec.name, r.videos, r.volumes, ec.clips, ec.crops, r.top1, r.top5, r.avg
    );
    Ok(())
}

fn cmd_analyze(arch: &str, input: &str, convention: &str, classes: usize, format: Format) -> Result<()> {
    let thw = parse_thw(input)?;
    let conventions: Conventions = convention.parse()?;
    let spec = ArchSpec::named(arch.parse()?, classes)?;
    let stats = analyze(&spec, thw, conventions)?;
    match format {
        Format::Text => print!("{}", text_report(&stats)),
        Format::Kv => print!("{}", kv_report(&stats)),
    }
    Ok(())
}

fn cmd_calibrate() -> Result<()> {
    for row in calibrate()? {
        let pinned = if row.conventions == CALIBRATED { " pinned=true" } else { "" };
        println!("convention={} max_deviation={:.4}{pinned}", row.conventions, row.max_deviation);
    }
    Ok(())
}

fn cmd_bench(block: &str, shape: &str, repeats: usize, baseline: Option<&str>) -> Result<bool> {
    let shape = bench::parse_shape(shape)?;
    let block: BenchBlock = block.parse()?;
    let result = bench::run(&BenchConfig::new(block, shape, repeats))?;
    println!("{result}");
    if let Some(b) = baseline {
        let base = bench::run(&BenchConfig::new(b.parse()?, shape, repeats))?;
        println!("{base}");
        let check = bench::ratio_gate(&base, &result);
        println!("{check}");
        if check.enforced && !check.within_band {
            return Ok(false);
        }
    }
    Ok(true)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate {
            cfg,
            task,
            classes,
            n,
            seed,
            out,
        } => {
            let rc = resolve_config(
                &cfg,
                vec![
                    ("task", task),
                    ("classes", classes.map(|v| v.to_string())),
                    ("n", n.map(|v| v.to_string())),
                    ("data_seed", seed.map(|v| v.to_string())),
                ],
            )?;
            cmd_generate(rc, &out)?;
        }
        Command::Train {
            cfg,
            arch,
            data,
            val,
            segments,
            out,
            resume,
        } => {
            let rc = resolve_config(&cfg, vec![("arch", arch), ("segments", segments.map(|v| v.to_string()))])?;
            cmd_train(rc, &data, val.as_deref(), &out, resume.as_deref())?;
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            clips,
            crops,
        } => {
            let rc = resolve_config(
                &cfg,
                vec![("clips", clips.map(|v| v.to_string())), ("crops", crops.map(|v| v.to_string()))],
            )?;
            cmd_eval(rc, &checkpoint, &data)?;
        }
        Command::Analyze {
            arch,
            input,
            convention,
            classes,
            format,
            calibrate,
        } => {
            if calibrate {
                cmd_calibrate()?;
            }
            if let Some(a) = arch {
                cmd_analyze(&a, &input, &convention, classes, format)?;
            }
        }
        Command::Verify {
            strict,
            inject_energy_fault,
        } => {
            let report = verify::run(VerifyOptions {
                inject_energy_fault,
                strict,
            });
            print!("{report}");
            return Ok(ExitCode::from(report.exit_code() as u8));
        }
        Command::Bench {
            block,
            shape,
            repeats,
            baseline,
        } => {
            if !cmd_bench(&block, &shape, repeats, baseline.as_deref())? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Keys => {
            let d = RunConfig::default();
            for k in SCHEMA {
                println!("{} = {}  # {}", k.name, d.get(k.name).unwrap_or_default(), k.help);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
