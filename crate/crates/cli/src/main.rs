use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jasr::config::Config;
use jasr::decode::{nbest_text, Lattice, Mode};
use jasr::eval::{decode_set, evaluate_suite, EvalReport};
use jasr::pipeline::{synthesize, train_data, Dataset};
use jasr::trainer::{run_training, thread_pool, Checkpoint, Experiment};
use jasr::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "jasr", version, about = "Cascaded streaming transducer with joint semi-supervised training")]
struct Cli {
    /// Config file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize corpora and test partitions into the data directory.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one experiment, optionally continuing from a checkpoint.
    Train {
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Defaults to `<run_dir>/<experiment>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write n-best lists and lattices for test partitions.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One partition (VS, NOISY, RPN, R_LM, C_LM); all when omitted.
        #[arg(long)]
        set: Option<String>,
        #[arg(long)]
        causal: bool,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every partition and write `report.csv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A previous `report.csv` to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        causal: bool,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretty-print a lattice file.
    InspectLattice {
        file: PathBuf,
        /// Show wordpiece strings instead of ids.
        #[arg(long)]
        wordpieces: Option<PathBuf>,
    },
    /// Run the built-in oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::usage("`--threads` must be at least 1"));
        }
        cfg.threads = n;
        cfg.train.threads = n;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_model(cfg: &Config, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_compatible(&cfg.model)?;
    Ok(ckpt)
}

fn mode(causal: bool, cfg: &Config) -> Mode {
    if causal {
        Mode::Causal
    } else {
        cfg.decode_mode
    }
}

fn beam(requested: Option<usize>, cfg: &Config) -> Result<usize> {
    match requested {
        Some(0) => Err(Error::usage("`--beam` must be at least 1")),
        Some(b) => Ok(b),
        None => Ok(cfg.beam_width),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Selftest { seed } = cli.command {
        let mut ok = true;
        for r in selftest::run_all(seed) {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            ok &= r.passed;
        }
        return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) });
    }
    if let Command::InspectLattice { file, wordpieces } = &cli.command {
        let lattice = Lattice::read(file)?;
        let text = match wordpieces {
            Some(p) => {
                let wp = read_wordpieces(p)?;
                lattice.pretty(|id| wp.unit(id).unwrap_or("?").to_string())
            }
            None => lattice.pretty(|id| id.to_string()),
        };
        print!("{text}");
        return Ok(ExitCode::SUCCESS);
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out } => {
            let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
            let ds = synthesize(&cfg)?;
            ds.save(&dir, cfg.model.frontend.feature_dim, cfg.corpus.frame_step_ms)?;
            cfg.echo_into(&dir)?;
            eprintln!(
                "wrote {} supervised, {} audio-only, {} text-only utterances to {}",
                ds.supervised.len(),
                ds.unsup_audio.len(),
                ds.unsup_text.len(),
                dir.display()
            );
            for (name, set) in ds.partitions.sets() {
                eprintln!("  {name}: {} utterances", set.len());
            }
        }
        Command::Train {
            experiment,
            init,
            steps,
            out,
        } => {
            if let Some(e) = experiment {
                cfg.experiment = e.parse::<Experiment>()?;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let dir = out.unwrap_or_else(|| cfg.run_dir.join(cfg.experiment.label()));
            let ds = Dataset::load(&cfg.data_dir)?;
            let data = train_data(&cfg, &ds)?;
            let init = init.map(|p| load_model(&cfg, &p)).transpose()?;
            cfg.echo_into(&dir)?;
            let every = (cfg.train.steps / 20).max(1);
            let outcome = run_training(
                cfg.experiment,
                &cfg.model,
                &cfg.train,
                &data,
                init.as_ref(),
                cfg.seed,
                Some(&dir),
                |r| {
                    if r.step % every == 0 {
                        eprintln!("step {} loss {:.4}", r.step, r.total);
                    }
                },
            )?;
            eprintln!(
                "{} finished at step {}; checkpoint in {}",
                cfg.experiment,
                outcome.checkpoint.step,
                dir.display()
            );
        }
        Command::Decode {
            checkpoint,
            set,
            causal,
            beam: b,
            out,
        } => {
            let m = mode(causal, &cfg);
            let b = beam(b, &cfg)?;
            let ckpt = load_model(&cfg, &checkpoint)?;
            let ds = Dataset::load(&cfg.data_dir)?;
            let dir = out.unwrap_or_else(|| cfg.run_dir.join(format!("decode-{}", m.name())));
            cfg.echo_into(&dir)?;
            let pool = thread_pool(cfg.threads)?;
            let sets = ds.partitions.sets();
            let chosen: Vec<_> = match &set {
                Some(s) => {
                    let hit: Vec<_> = sets.iter().filter(|(n, _)| n.eq_ignore_ascii_case(s)).collect();
                    if hit.is_empty() {
                        let names: Vec<_> = sets.iter().map(|(n, _)| *n).collect();
                        return Err(Error::usage(format!("unknown set `{s}` (expected one of {})", names.join(", "))));
                    }
                    hit
                }
                None => sets.iter().collect(),
            };
            for (name, examples) in chosen {
                let results = decode_set(&ckpt.store, &cfg.model, &ds.wordpieces, examples, m, b, &pool)?;
                let sub = dir.join(name);
                for r in &results {
                    let nbest = nbest_text(&r.decode.nbest, |ids| ds.wordpieces.decode(ids).join(" "));
                    write(&sub.join(format!("{}.nbest", r.id)), &nbest)?;
                    r.decode.lattice.write(&sub.join(format!("{}.lattice", r.id)))?;
                }
                eprintln!("{name}: {} utterances -> {}", results.len(), sub.display());
            }
        }
        Command::Eval {
            checkpoint,
            baseline,
            causal,
            beam: b,
            out,
        } => {
            let m = mode(causal, &cfg);
            let b = beam(b, &cfg)?;
            let base = baseline.map(|p| EvalReport::read_csv(&p)).transpose()?;
            let ckpt = load_model(&cfg, &checkpoint)?;
            let ds = Dataset::load(&cfg.data_dir)?;
            let dir = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(format!("eval-{}", m.name())));
            cfg.echo_into(&dir)?;
            let pool = thread_pool(cfg.threads)?;
            let report = evaluate_suite(&ckpt.store, &cfg.model, &ds.wordpieces, &ds.partitions, m, b, &pool)?;
            report.write_csv(&dir.join("report.csv"))?;
            let table = report.table(base.as_ref())?;
            write(&dir.join("table.txt"), &table)?;
            print!("{table}");
        }
        Command::InspectLattice { .. } | Command::Selftest { .. } => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn read_wordpieces(path: &Path) -> Result<jasr::data::WordpieceModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    jasr::data::WordpieceModel::from_text(&text, &path.display().to_string())
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
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("jasr: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
