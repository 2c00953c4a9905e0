use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pmemsim::config::{defaults_echo, RunConfig};
use pmemsim::experiments::{self, guideline_check, run_experiment, ExperimentId, Row};
use pmemsim::workload::parse_trace;
use pmemsim::{oracle, Result, SimError};

#[derive(Parser)]
#[command(name = "pmemsim", version, about = "Persistent-memory hierarchy simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Configuration file (defaults apply to anything it leaves out).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run experiments, or the configured workload when no experiment is given.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Experiment id (e.g. E6 or E6_XPBUFFER_INFER), or `all`. Repeatable.
        #[arg(long)]
        experiment: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads for grid points (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Replay a device-level trace through the reference model and print counters.
    OracleReplay {
        trace: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// List the experiment catalog.
    ListExperiments,
    /// Print every configuration key with its default value.
    DumpConfigDefaults,
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| SimError::Io(format!("{}: {e}", p.display())))?)?,
        None => RunConfig::default(),
    };
    c.apply_overrides(args.overrides.iter().map(String::as_str))?;
    c.validate()?;
    Ok(c)
}

fn parse_ids(names: &[String]) -> Result<Vec<ExperimentId>> {
    let mut ids = Vec::new();
    for n in names {
        if n.eq_ignore_ascii_case("all") {
            ids.extend(ExperimentId::ALL);
            continue;
        }
        let id = ExperimentId::parse(n)
            .or_else(|| ExperimentId::ALL.into_iter().find(|e| e.as_str().split('_').next().unwrap().eq_ignore_ascii_case(n)))
            .ok_or_else(|| SimError::validation("--experiment", format!("unknown experiment `{n}`")))?;
        ids.push(id);
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
}

fn cmd_run(cfg: RunConfig, names: &[String], out: &Path, jobs: usize) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| SimError::Io(format!("{}: {e}", out.display())))?;
    let echo = cfg.echo();
    write(&out.join("config.ini"), &echo)?;
    let mut manifest = String::from("experiment,config_sha256,seed,rows,file\n");
    let mut all_rows: Vec<Row> = Vec::new();
    if names.is_empty() {
        let rep = experiments::run_spec_sampled(cfg.sim(), &cfg.workload, cfg.seed, cfg.settings.sample_every)?;
        let row = experiments::workload_row(&cfg.workload, cfg.seed, &rep);
        write(&out.join("workload.csv"), &experiments::to_csv(std::slice::from_ref(&row)))?;
        manifest.push_str(&experiments::manifest_entry("WORKLOAD", &echo, cfg.seed, 1, "workload.csv"));
        all_rows.push(row);
    } else {
        for id in parse_ids(names)? {
            eprintln!("running {} ({} points)", id.as_str(), experiments::grid(id, &cfg.settings).len());
            let res = run_experiment(id, &cfg.settings, cfg.seed, jobs)?;
            write(&out.join(id.csv_name()), &res.csv())?;
            manifest.push_str(&experiments::manifest_entry(id.as_str(), &echo, cfg.seed, res.rows.len(), &id.csv_name()));
            all_rows.extend(res.rows);
        }
    }
    let mut findings = String::from("guideline,status,run_id,detail\n");
    for f in guideline_check(&all_rows) {
        findings.push_str(&f.to_line());
        findings.push('\n');
    }
    write(&out.join("findings.csv"), &findings)?;
    write(&out.join("manifest.csv"), &manifest)
}

fn cmd_oracle(cfg: RunConfig, trace: &Path) -> Result<()> {
    let f = fs::File::open(trace).map_err(|e| SimError::Io(format!("{}: {e}", trace.display())))?;
    let recs = parse_trace(std::io::BufReader::new(f))?;
    let counters = oracle::replay(&recs, &cfg.sim().topology, cfg.xp())?;
    println!("slot,imc_read_bytes,imc_write_bytes,media_read_bytes,media_write_bytes,ewr");
    for (slot, c) in counters {
        let ewr = c.ewr().map(|e| format!("{e:.4}")).unwrap_or_default();
        println!("{slot},{},{},{},{},{ewr}", c.imc_read_bytes, c.imc_write_bytes, c.media_read_bytes, c.media_write_bytes);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { cfg, experiment, seed, out, jobs } => load_config(&cfg).and_then(|mut c| {
            if let Some(s) = seed {
                c.seed = s;
            }
            cmd_run(c, &experiment, &out, jobs)
        }),
        Cmd::OracleReplay { trace, cfg } => load_config(&cfg).and_then(|c| cmd_oracle(c, &trace)),
        Cmd::ListExperiments => {
            let set = RunConfig::default().settings;
            println!("id,csv,points,description");
            for id in ExperimentId::ALL {
                println!("{},{},{},{}", id.as_str(), id.csv_name(), experiments::grid(id, &set).len(), id.description());
            }
            Ok(())
        }
        Cmd::DumpConfigDefaults => {
            print!("{}", defaults_echo());
            Ok(())
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
