use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lgmoe::harness::{self, ExperimentConfig};
use lgmoe::matching::{brute_force_assignment, hungarian, CostMatrix};
use lgmoe::numkernel::Tensor;
use lgmoe::scenegen::{read_corpus, write_corpus, SceneGenerator};
use lgmoe::Error;

#[derive(Parser)]
#[command(name = "lgmoe", version, about = "Language-guided MoE mechanism lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration, writing reports to `--out`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the model and the data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an ablation sweep, e.g. `--toggles table4` or `--toggles "moe;moe+guided_router"`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "table4")]
        toggles: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the training corpus of a configuration as an `SCN v1` file.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes; defaults to `train.train_scenes`.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Finite-difference check of every differentiable op and loss composite.
    CheckGrads {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Quick end-to-end consistency checks.
    Selftest,
}

enum Failure {
    Config(String),
    Runtime(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Unknown { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Config(e.to_string()),
        other => other.into(),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seeds.model = s;
                cfg.seeds.data = s;
            }
            let report = harness::run_experiment(&cfg)?;
            harness::emit_reports(&report, &out)?;
            let m = &report.metrics;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!("params {}  matched {}", report.param_count, m.matched);
            println!("overall accuracy {}", fmt(m.overall_accuracy));
            for (g, gm) in &m.groups {
                println!("  {g:<6} accuracy {} ({} objects)", fmt(gm.accuracy), gm.count);
            }
            for r in &m.routing {
                println!("layer {} mean purity {}", r.layer, fmt(r.mean_purity));
            }
            println!("reports written to {}", out.display());
        }
        Command::Ablate { config, toggles, out } => {
            let cfg = load(&config)?;
            let rows = harness::parse_toggles(&toggles)?;
            let report = harness::ablation_run(&cfg, &rows)?;
            harness::emit_ablation(&report, &out)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:+.4}"));
            for row in &report.rows {
                println!(
                    "{:<36} overall {}  few {}  Δoverall {}  Δfew {}",
                    row.name,
                    fmt(row.summary.overall),
                    fmt(row.summary.few),
                    fmt(row.delta.overall),
                    fmt(row.delta.few)
                );
            }
        }
        Command::GenCorpus { config, out, scenes } => {
            let cfg = load(&config)?;
            let n = scenes.unwrap_or(cfg.train.train_scenes);
            let corpus = SceneGenerator::new(&cfg.scene)?.corpus(n, cfg.seeds.train_base())?;
            write_corpus(&out, &cfg.scene, &corpus.scenes)?;
            let (_, back) = read_corpus(&out)?;
            if back != corpus.scenes {
                return Err(Failure::Runtime("corpus did not survive a round trip".into()));
            }
            println!("{n} scenes, {} objects -> {}", corpus.stats.objects, out.display());
        }
        Command::CheckGrads { seeds } => {
            let results = harness::run_grad_checks(seeds)?;
            let mut failed = 0;
            let mut names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
            names.dedup();
            for name in names {
                let rs: Vec<_> = results.iter().filter(|r| r.name == name).collect();
                let ok = rs.iter().all(|r| r.passed);
                let worst = rs.iter().fold(0.0f64, |m, r| m.max(r.max_rel_error));
                failed += usize::from(!ok);
                println!("{} {name:<24} max rel error {worst:.2e} over {} seeds", if ok { "PASS" } else { "FAIL" }, rs.len());
            }
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} gradient checks failed")));
            }
        }
        Command::Selftest => selftest()?,
    }
    Ok(())
}

fn selftest() -> Result<(), Failure> {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    let grads = harness::run_grad_checks(2)?;
    check("gradients", grads.iter().all(|r| r.passed));

    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut agree = true;
    for i in 0..100 {
        let (k, g) = (1 + i % 6, 1 + (i / 6) % 5);
        let data = (0..k * g).map(|_| next() * 10.0).collect();
        let cost = CostMatrix::from_costs(Tensor::matrix(k, g, data)?)?;
        let a = hungarian(&cost);
        let b = brute_force_assignment(&cost)?;
        agree &= (a.total_cost(&cost) - b.total_cost(&cost)).abs() < 1e-9;
    }
    check("hungarian vs brute force", agree);

    let cfg = ExperimentConfig::default();
    let gen = SceneGenerator::new(&cfg.scene)?;
    check("scene determinism", gen.generate(5)? == gen.generate(5)?);

    let mut tiny = ExperimentConfig::default();
    tiny.scene.obs_dim = 12;
    tiny.scene.embeddings.dim = 8;
    tiny.model.routed_hidden = 8;
    tiny.model.shared_hidden = 8;
    tiny.train.steps = 3;
    tiny.train.batch_size = 2;
    tiny.train.train_scenes = 4;
    tiny.train.eval_scenes = 4;
    let a = harness::run_experiment(&tiny)?;
    let b = harness::run_experiment(&tiny)?;
    let same = same_outputs(&a, &b);
    check("run determinism", same);

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("selftest failed: {}", failures.join(", "))))
    }
}

fn same_outputs(a: &harness::RunReport, b: &harness::RunReport) -> bool {
    a.metrics == b.metrics && a.trace == b.trace
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("invalid config: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}
