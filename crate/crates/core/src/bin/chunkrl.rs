use chunkrl::harness::{
    bars_svg, bench, bench_table_csv, curve_svg, run_suite, simulate_placement, standard_plans,
    HarnessError, Manifest, RunConfig, Suite, Tolerances,
};
use chunkrl::placement::{derive_mode, throughput, CostModel};
use chunkrl::policy::PolicyNet;
use clap::{Args, Parser, Subcommand};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "chunkrl",
    version,
    about = "Train chunked token policies and simulate component placement"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// YAML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set algorithm.gamma=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the training loop and write metrics, plots and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Exit with 1 unless the success threshold is reached.
        #[arg(long)]
        require_success: bool,
    },
    /// Throughput of the standard plan set under the 1to1 and 15to1 presets.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Benchmark only the plan from the configuration.
        #[arg(long)]
        config_plan_only: bool,
    },
    /// One epoch of the configured plan; writes the interval trace.
    SimulatePlacement {
        #[command(flatten)]
        common: Common,
    },
    /// Brute-force reference checks.
    Oracle {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Replaces the tolerance of every selected check.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/oracle")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, HarnessError> {
    RunConfig::load(common.config.as_deref(), &common.sets)
}

fn prepare(out: &Path, command: &str, cfg: Option<&RunConfig>) -> Result<(), HarnessError> {
    fs::create_dir_all(out)?;
    Manifest::new(command, cfg).write(out)?;
    if let Some(cfg) = cfg {
        fs::write(out.join("config.yaml"), cfg.to_yaml())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8, HarnessError> {
    match cli.cmd {
        Cmd::Train {
            common,
            require_success,
        } => {
            let cfg = load(&common)?;
            prepare(&common.out, "train", Some(&cfg))?;
            let mut sink = BufWriter::new(File::create(common.out.join("metrics.jsonl"))?);
            let outcome = chunkrl::harness::train(&cfg, &mut sink)?;
            outcome.policy.save(BufWriter::new(File::create(
                common.out.join("policy.ckpt"),
            )?))?;
            let curve: Vec<f64> = outcome.records.iter().map(|r| r.success_rate).collect();
            fs::write(
                common.out.join("success.svg"),
                curve_svg("success_once", &[("eval".into(), curve)], 1.0),
            )?;
            let last = outcome.records.last().map_or(0.0, |r| r.success_rate);
            let skipped = outcome.records.iter().filter(|r| r.skipped).count();
            println!(
                "epochs {} final success {last:.3} solved_at {:?} skipped {skipped}",
                outcome.records.len(),
                outcome.solved_at
            );
            Ok(if require_success && outcome.solved_at.is_none() {
                1
            } else {
                0
            })
        }
        Cmd::Bench {
            common,
            config_plan_only,
        } => {
            let cfg = load(&common)?;
            prepare(&common.out, "bench", Some(&cfg))?;
            let policy = PolicyNet::new(cfg.architecture(), cfg.seed)?;
            let plans = if config_plan_only {
                vec![("config".to_string(), cfg.plan()?)]
            } else {
                standard_plans()
            };
            let presets: Vec<(String, CostModel)> = if config_plan_only {
                vec![(cfg.cost.preset.clone(), cfg.cost()?)]
            } else {
                ["1to1", "15to1"]
                    .iter()
                    .map(|p| Ok((p.to_string(), CostModel::preset(p)?)))
                    .collect::<Result<_, HarnessError>>()?
            };
            let rows = bench(&plans, &presets, &policy, &cfg.bench_spec())?;
            let csv = bench_table_csv(&rows);
            print!("{csv}");
            fs::write(common.out.join("bench.csv"), &csv)?;
            for (preset, _) in &presets {
                let bars: Vec<(String, f64)> = rows
                    .iter()
                    .filter(|r| &r.preset == preset)
                    .map(|r| (r.plan.clone(), r.throughput))
                    .collect();
                fs::write(
                    common.out.join(format!("throughput_{preset}.svg")),
                    bars_svg(&format!("throughput, preset {preset}"), &bars),
                )?;
            }
            Ok(0)
        }
        Cmd::SimulatePlacement { common } => {
            let cfg = load(&common)?;
            prepare(&common.out, "simulate-placement", Some(&cfg))?;
            let plan = cfg.plan()?;
            let policy = PolicyNet::new(cfg.architecture(), cfg.seed)?;
            let trace = simulate_placement(
                &plan,
                cfg.rollout.backend,
                &cfg.cost()?,
                &policy,
                &cfg.bench_spec(),
            )?;
            trace.export(BufWriter::new(File::create(
                common.out.join("trace.jsonl"),
            )?))?;
            println!(
                "mode {} frames {} rollout {:.4} epoch {:.4} throughput {:.4}",
                derive_mode(&plan)?,
                trace.frames,
                trace.rollout_end,
                trace.makespan(),
                throughput(&trace)?
            );
            Ok(0)
        }
        Cmd::Oracle {
            suite,
            tolerance,
            seed,
            out,
        } => {
            prepare(&out, "oracle", None)?;
            let mut tol = Tolerances::default();
            if let Some(t) = tolerance {
                tol = Tolerances {
                    gae: t,
                    grad: t,
                    makespan: t,
                    sampling_z: t,
                };
            }
            let checks = run_suite(suite, &tol, seed);
            let mut lines = String::new();
            for c in &checks {
                let line = serde_json::to_string(c).expect("serializable");
                println!("{line}");
                lines.push_str(&line);
                lines.push('\n');
            }
            fs::write(out.join("oracle.jsonl"), lines)?;
            Ok(if checks.iter().all(|c| c.passed) {
                0
            } else {
                1
            })
        }
    }
}
