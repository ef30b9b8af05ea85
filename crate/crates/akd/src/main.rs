use std::path::{Path, PathBuf};

use akd::checkpoint::load_generator;
use akd::config::{Defense, ExperimentConfig};
use akd::dataset::load_dataset;
use akd::experiment::{compare_defenses, run_tradeoff_sweep, write_scores_csv, ExperimentReport, Knob, Runner};
use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "akd", version, about = "Membership-inference experiments on image-translation GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Per-seed progress on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep sigma (gauss or dp_sgd) or the defense itself.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `sigma` or `defense`.
        #[arg(long)]
        knob: String,
        /// Sigma values, or defense names (`none`, `akd`, `dmp`, `gauss:0.1`, `dp_sgd:0.5`).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Rank several configs that share dataset and teacher settings.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
    },
    /// Attack a saved generator on a saved dataset.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        n_draws: usize,
        /// Also write `scores.csv` and `roc.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a stored report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn parse_defense(name: &str, base: &ExperimentConfig) -> anyhow::Result<Defense> {
    let distill = base.defense.distill().unwrap_or_default();
    let dp = match &base.defense {
        Defense::DpSgd(dp) => *dp,
        _ => akd_core::dpsgd::DpConfig { clip_norm: 1.0, sigma: 0.0, applies_to: Default::default() },
    };
    let (head, arg) = match name.split_once(':') {
        Some((h, a)) => (h, Some(a.parse::<f64>().with_context(|| format!("bad number in `{name}`"))?)),
        None => (name, None),
    };
    Ok(match (head, arg) {
        ("none", None) => Defense::None,
        ("akd", None) => Defense::Akd(akd_core::distill::DistillConfig { mode: Default::default(), ..distill }),
        ("dmp", None) => {
            Defense::Dmp(akd_core::distill::DistillConfig { mode: akd_core::distill::DistillMode::Dmp, ..distill })
        }
        ("gauss", Some(sigma)) => Defense::Gauss { sigma },
        ("dp_sgd", Some(sigma)) => Defense::DpSgd(akd_core::dpsgd::DpConfig { sigma, ..dp }),
        _ => bail!("unknown defense `{name}`"),
    })
}

fn read_report(dir: &Path) -> anyhow::Result<ExperimentReport> {
    let path = if dir.is_dir() { dir.join("report.json") } else { dir.to_path_buf() };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut runner = Runner::new();
    runner.verbose = cli.verbose;
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = runner.run(&cfg, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
            if report.n_failed > 0 {
                eprintln!("{} of {} seeds failed", report.n_failed, report.seeds.len());
            }
        }
        Command::Sweep { config, knob, values, out } => {
            let base = ExperimentConfig::load(&config)?;
            let knob = match knob.as_str() {
                "sigma" => Knob::Sigma(
                    values
                        .iter()
                        .map(|v| v.parse::<f64>().with_context(|| format!("bad sigma `{v}`")))
                        .collect::<anyhow::Result<_>>()?,
                ),
                "defense" => Knob::Defense(values.iter().map(|v| parse_defense(v, &base)).collect::<anyhow::Result<_>>()?),
                other => bail!("unknown knob `{other}`, expected `sigma` or `defense`"),
            };
            let points = run_tradeoff_sweep(&mut runner, &base, &knob, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&points)?);
        }
        Command::Compare { configs } => {
            let cfgs = configs.iter().map(|p| ExperimentConfig::load(p)).collect::<akd::Result<Vec<_>>>()?;
            let table = compare_defenses(&mut runner, &cfgs)?;
            println!("{}", serde_json::to_string_pretty(&table)?);
        }
        Command::Attack { checkpoint, dataset, seed, n_draws, out } => {
            let g = load_generator(&checkpoint)?;
            let splits = load_dataset(&dataset)?;
            let set = akd_core::data::build_attack_set(&splits, seed)?;
            let records = akd_core::mia::attack_scores_with(&g, &set, seed, n_draws)?;
            let roc = akd_core::mia::auc_roc(&records)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_scores_csv(&dir.join("scores.csv"), &records)?;
                std::fs::write(dir.join("roc.json"), serde_json::to_string(&roc)?)?;
            }
            println!("{}", serde_json::json!({ "auc": roc.auc, "n_members": set.members.len(), "n_nonmembers": set.nonmembers.len() }));
        }
        Command::Report { input, format } => {
            let report = read_report(&input)?;
            match format {
                Format::Json => println!("{}", report.to_json()?),
                Format::Csv => print!("{}", report.to_csv()?),
            }
        }
    }
    Ok(())
}
