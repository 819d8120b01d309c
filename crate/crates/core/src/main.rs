use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use switchctl::error::Error;
use switchctl::experiments::{
    config_bounds, emit_outputs, load_config, remark1_config, run_batch, run_experiment, run_remark, ExperimentConfig,
    Fixture, RunResult,
};
use switchctl::synthesis::InteriorPoint;

#[derive(Parser)]
#[command(name = "switchctl", version, about = "Data-driven control of switched linear systems")]
struct Cli {
    /// Write every solved SDP instance as JSON under <out>/sdp.
    #[arg(long, global = true)]
    dump_sdp: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, or several in parallel with --batch.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Output directory. With --batch each run writes to <out>/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root seed; replaces every seed set in the file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: bool,
    },
    /// Print the analytic bound report of a configuration.
    Bounds { config: PathBuf },
    /// Run a bundled fixture.
    Repro {
        fixture: FixtureArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureArg {
    Flight,
    Engine,
    Remark1,
}

impl From<FixtureArg> for Fixture {
    fn from(f: FixtureArg) -> Self {
        match f {
            FixtureArg::Flight => Fixture::Flight,
            FixtureArg::Engine => Fixture::Engine,
            FixtureArg::Remark1 => Fixture::Remark1,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::WarmStart(_) => 3,
        _ => 1,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn default_out(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output
        .dir
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new("out").join(&cfg.name))
}

fn report(run: &RunResult, dir: &Path) -> Result<(), Error> {
    let files = emit_outputs(run, dir)?;
    let sup = run.log.states().iter().map(|x| x.norm()).fold(0.0, f64::max);
    println!("{}: {} steps, sup |x| = {sup:.4}, output in {}", run.config.name, run.config.horizon, dir.display());
    if let Some(r) = &run.isps {
        println!("  isps verdict: {}", r.verdict);
    }
    if let Some(e) = &run.bounds_error {
        println!("  bounds unavailable: {e}");
    }
    for w in &run.warnings {
        println!("  warning: {w}");
    }
    log::info!("wrote {}", files.csv.display());
    Ok(())
}

fn run_cmd(configs: &[PathBuf], out: Option<PathBuf>, seed: Option<u64>, batch: bool, dump: bool) -> Result<(), Error> {
    if configs.len() > 1 && !batch {
        return Err(Error::Config {
            path: "configs".into(),
            message: "several configurations need --batch".into(),
        });
    }
    let mut cfgs = Vec::with_capacity(configs.len());
    for p in configs {
        let mut c = load_config(p)?;
        if let Some(s) = seed {
            c = c.with_seed(s);
        }
        c.output.dump_sdp |= dump;
        cfgs.push(c);
    }
    let dir_for = |c: &ExperimentConfig| match (&out, batch) {
        (Some(d), true) => d.join(&c.name),
        (Some(d), false) => d.clone(),
        (None, _) => default_out(c),
    };
    if batch {
        let mut first_err = None;
        for (c, r) in cfgs.iter().zip(run_batch(&cfgs)) {
            match r.and_then(|run| report(&run, &dir_for(c))) {
                Ok(()) => {}
                Err(e) => {
                    eprintln!("{}: {e}", c.name);
                    first_err.get_or_insert(e);
                }
            }
        }
        return first_err.map_or(Ok(()), Err);
    }
    let run = run_experiment(&cfgs[0])?;
    report(&run, &dir_for(&cfgs[0]))
}

fn repro_cmd(f: Fixture, out: Option<PathBuf>, dump: bool) -> Result<(), Error> {
    let dir = out.unwrap_or_else(|| Path::new("out").join(f.name()));
    match f {
        Fixture::Remark1 => {
            let rep = run_remark(&remark1_config(), &InteriorPoint::default())?;
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(switchctl::experiments::output::SUMMARY_NAME);
            std::fs::write(&path, serde_json::to_string_pretty(&rep)?)?;
            for w in &rep.windows {
                println!(
                    "{}: rank {} sigma_min {:.3e} status {:?} rank margin {:.3e}",
                    w.label, w.rank, w.sigma_min, w.status, w.rank_margin
                );
            }
            println!("summary in {}", path.display());
            Ok(())
        }
        Fixture::Flight | Fixture::Engine => {
            let mut cfg = switchctl::experiments::parse_config(f.source())?;
            cfg.output.dump_sdp |= dump;
            let run = run_experiment(&cfg)?;
            report(&run, &dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run {
            configs,
            out,
            seed,
            batch,
        } => run_cmd(&configs, out, seed, batch, cli.dump_sdp),
        Command::Bounds { config } => load_config(&config)
            .and_then(|c| config_bounds(&c, &InteriorPoint::default()))
            .map(|b| print!("{}", b.table())),
        Command::Repro { fixture, out } => repro_cmd(fixture.into(), out, cli.dump_sdp),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
