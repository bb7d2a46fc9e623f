//! `m3` command line: one subcommand per pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use m3_core::harness::{self, Common, HarnessConfig, Paths, SeedModels};
use m3_core::io;
use m3_core::planner::trace_text;

#[derive(Parser)]
#[command(
    name = "m3",
    about = "Memory-related multi-task planning on a symbolic household world"
)]
struct Cli {
    /// TOML config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Restrict model training and evaluation to one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the knowledge graph.
    Explore,
    /// Sample tasks from the graph and split them.
    GenDataset,
    /// Train the action predictive model.
    TrainApm,
    /// Train the effect feature extractor.
    TrainEffect,
    /// Average training effect features per action.
    BuildMemory,
    /// Plan one test task and print its plan and trace.
    Plan {
        /// Task id in the dataset.
        #[arg(long)]
        task: usize,
    },
    /// Success rates of the configured planner.
    Evaluate,
    /// The ablation grid.
    Ablate,
    /// Area coverage over reduction dimensions and pool sizes.
    AnalyzeDims,
    /// Success per single pool configuration.
    AnalyzePool,
    /// Every missing or stale stage up to memory, then all reports.
    Run,
    /// Print the effective config.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let paths = Paths::new(&cli.out);
    match &cli.cmd {
        Cmd::ShowConfig => print!("{}", cfg.to_toml()),
        Cmd::Explore => {
            let world = harness::load_world(&cfg.world)?;
            let kg = harness::stage_explore(&cfg, &world, &paths)?;
            println!(
                "{} nodes, {} edges -> {}",
                kg.node_count(),
                kg.edges.len(),
                paths.kg().display()
            );
        }
        Cmd::GenDataset => {
            let world = harness::load_world(&cfg.world)?;
            let kg = m3_core::explorer::KnowledgeGraph::load(&paths.kg(), &world)?;
            let (ds, sp) = harness::stage_dataset(&cfg, &world, &kg, &paths)?;
            println!(
                "{} samples ({} train, {} val, {} test)",
                ds.samples.len(),
                sp.train.len(),
                sp.val.len(),
                sp.test.len()
            );
        }
        Cmd::TrainApm => {
            let c = Common::load(&cfg, &paths)?;
            for &s in &cfg.seeds {
                harness::stage_train_apm(&cfg, &c, s, &paths)?;
                println!("seed {s}: {}", paths.apm(s).display());
            }
        }
        Cmd::TrainEffect => {
            let c = Common::load(&cfg, &paths)?;
            for &s in &cfg.seeds {
                harness::stage_train_effect(&cfg, &c, s, &paths)?;
                println!("seed {s}: {}", paths.effect(s).display());
            }
        }
        Cmd::BuildMemory => {
            let c = Common::load(&cfg, &paths)?;
            for &s in &cfg.seeds {
                let ex = m3_core::effectmem::EffectExtractor::load(&paths.effect(s), &c.world)?;
                let mem = harness::stage_memory(&cfg, &c, &ex, s, &paths)?;
                println!(
                    "seed {s}: {} rows -> {}",
                    mem.len(),
                    paths.memory(s).display()
                );
            }
        }
        Cmd::Plan { task } => {
            let c = Common::load(&cfg, &paths)?;
            let Some(idx) = c
                .split
                .test
                .iter()
                .position(|&i| c.ds.samples[i].id == *task)
            else {
                bail!("task {task} is not in the test split");
            };
            let seed = cfg.seeds[0];
            let models = SeedModels::load(&c, &paths, seed)?;
            let mut ev = harness::SeedEval::new(&c, &models, &cfg.decomposer)?;
            let res = ev.plan(idx, &harness::default_spec(&cfg))?;
            println!(
                "success: {} via {}",
                res.success,
                res.provenance.map_or("-".to_string(), |p| p.to_string())
            );
            for a in &res.plan {
                println!("  {a}");
            }
            let out = paths.traces(seed).join(format!("task{task}.txt"));
            io::write_artifact(&out, &trace_text(*task, &res)).context("writing trace")?;
        }
        Cmd::Evaluate => {
            let reports = harness::stage_evaluate(&cfg, &paths)?;
            print!("{}", harness::summary_csv(&[("m3".into(), reports)]));
        }
        Cmd::Ablate => {
            let rows = harness::stage_ablate(&cfg, &paths)?;
            print!("{}", harness::summary_csv(&rows));
        }
        Cmd::AnalyzeDims => {
            let rows = harness::stage_analyze_dims(&cfg, &paths)?;
            for ((d, k), c) in harness::mean_coverage(&rows) {
                println!(
                    "dim {:>4} K {k:>3}: {c:.4}",
                    d.map_or("none".into(), |d| d.to_string())
                );
            }
        }
        Cmd::AnalyzePool => {
            let rows = harness::stage_analyze_pool(&cfg, &paths)?;
            for r in &rows {
                println!(
                    "({:>2},{:>2}) {:.4}",
                    r.pool_size,
                    r.select_count,
                    harness::mean_average(&r.reports)
                );
            }
        }
        Cmd::Run => {
            harness::run_pipeline(&cfg, &paths)?;
            let reports = harness::stage_evaluate(&cfg, &paths)?;
            print!("{}", harness::summary_csv(&[("m3".into(), reports)]));
            let rows = harness::stage_ablate(&cfg, &paths)?;
            print!("{}", harness::summary_csv(&rows));
            harness::stage_analyze_dims(&cfg, &paths)?;
            harness::stage_analyze_pool(&cfg, &paths)?;
        }
    }
    Ok(())
}
