use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use iod_sim::attacks::{run_suite, Suite};
use iod_sim::bundled;
use iod_sim::config::ScenarioConfig;
use iod_sim::report::run_simulation;
use iod_sim::stats::{puf_suite, rffi_suite};
use iod_sim::vectors::reference_vectors;

#[derive(Parser)]
#[command(name = "iod-sim", version, about = "RFF-PUF drone key-exchange simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report.
    Run {
        /// Scenario JSON file, or the name of a bundled scenario.
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: PathBuf,
        /// JSON-lines transcript of every frame on the air.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Gate every D2G MAKE frame at the GSS through RFFI.
        #[arg(long)]
        continuous_rffi: bool,
    },
    /// Run a canned attack battery.
    Attacks {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// PUF or RFFI statistics.
    Stats {
        #[arg(long, value_enum)]
        suite: StatsArg,
        /// Population config; defaults to the bundled one for the suite.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write reference vectors for reimplementations.
    Vectors {
        #[arg(long)]
        emit: PathBuf,
    },
    /// List the bundled scenarios.
    Configs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Replay,
    Mitm,
    Impersonation,
    Dos,
    Capture,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::Replay => Suite::Replay,
            SuiteArg::Mitm => Suite::Mitm,
            SuiteArg::Impersonation => Suite::Impersonation,
            SuiteArg::Dos => Suite::Dos,
            SuiteArg::Capture => Suite::Capture,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsArg {
    Puf,
    Rffi,
}

type Fallible<T> = Result<T, String>;

/// `--seed`, then `IOD_SIM_SEED`, then the config, then 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Fallible<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var("IOD_SIM_SEED") {
        return v
            .trim()
            .parse()
            .map_err(|_| format!("IOD_SIM_SEED is not an unsigned integer: {v:?}"));
    }
    Ok(config.unwrap_or(0))
}

fn load_config(spec: &str) -> Fallible<ScenarioConfig> {
    let path = Path::new(spec);
    if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| format!("{spec}: {e}"))?;
        return ScenarioConfig::from_json(&text).map_err(|e| format!("{spec}: {e}"));
    }
    match bundled::load(spec) {
        Some(r) => r.map_err(|e| format!("bundled {spec}: {e}")),
        None => Err(format!("{spec}: no such file or bundled scenario")),
    }
}

fn write(path: &Path, text: &str) -> Fallible<()> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn failure_list(items: &[String]) -> String {
    serde_json::to_string_pretty(&serde_json::json!({ "failures": items })).expect("strings serialize")
}

fn run(cli: Cli) -> Fallible<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            report,
            transcript,
            continuous_rffi,
        } => {
            let mut cfg = load_config(&config)?;
            if continuous_rffi {
                cfg.continuous_rffi = true;
            }
            let seed = resolve_seed(seed, cfg.seed)?;
            let out = run_simulation(&cfg, seed).map_err(|e| e.to_string())?;
            write(&report, &out.report.to_json())?;
            if let Some(t) = transcript {
                write(&t, &out.transcript)?;
            }
            print!("{}", out.report.cost.to_text());
            let failures: Vec<String> = out
                .report
                .failures()
                .iter()
                .map(|c| format!("{}: {}", c.name, c.detail))
                .collect();
            println!(
                "\n{}: {}",
                cfg.name,
                if failures.is_empty() { "pass" } else { "FAIL" }
            );
            if !failures.is_empty() {
                eprintln!("{}", failure_list(&failures));
            }
            Ok(failures.is_empty())
        }
        Command::Attacks { suite, seed, report } => {
            let seed = resolve_seed(seed, None)?;
            let reports = run_suite(suite.into(), seed).map_err(|e| e.to_string())?;
            for r in &reports {
                println!("{}", r.summary());
            }
            if let Some(p) = report {
                let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
                write(&p, &(json + "\n"))?;
            }
            let failures: Vec<String> = reports.iter().flat_map(|r| r.failures.clone()).collect();
            if !failures.is_empty() {
                eprintln!("{}", failure_list(&failures));
            }
            Ok(failures.is_empty())
        }
        Command::Stats {
            suite,
            config,
            seed,
            report,
        } => {
            let default = match suite {
                StatsArg::Puf => "puf-stats",
                StatsArg::Rffi => "rffi-stats",
            };
            let cfg = load_config(config.as_deref().unwrap_or(default))?;
            let seed = resolve_seed(seed, cfg.seed)?;
            let (json, passed) = match suite {
                StatsArg::Puf => {
                    let r = puf_suite(&cfg, seed).map_err(|e| e.to_string())?;
                    println!(
                        "PUF: {} pairs x {} challenges, uniqueness {:.4}, reliability {:.4} (noiseless), uniformity {:.4}",
                        r.pairs, r.noiseless.n_challenges, r.noiseless.uniqueness, r.noiseless.reliability,
                        r.noiseless.uniformity
                    );
                    if let Some(n) = &r.noisy {
                        println!("     sigma {}: reliability {:.4}", n.noise_sigma, n.reliability);
                    }
                    (serde_json::to_string_pretty(&r), r.passed)
                }
                StatsArg::Rffi => {
                    let r = rffi_suite(&cfg, seed).map_err(|e| e.to_string())?;
                    println!(
                        "RFFI: {} known, {} rogue, AUC {:.4}, false rejection {:.4}, rogue acceptance {:.4}",
                        r.known, r.rogue, r.auc, r.false_rejection, r.rogue_acceptance
                    );
                    (serde_json::to_string_pretty(&r), r.passed)
                }
            };
            if let Some(p) = report {
                write(&p, &(json.expect("stats serialize") + "\n"))?;
            }
            println!("{}", if passed { "pass" } else { "FAIL" });
            Ok(passed)
        }
        Command::Vectors { emit } => {
            let v = reference_vectors().map_err(|e| e.to_string())?;
            write(&emit, &v.to_json())?;
            println!("sha256 {}", v.sha256());
            Ok(true)
        }
        Command::Configs => {
            for (name, _) in bundled::CONFIGS {
                println!("{name}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", failure_list(&[e]));
            ExitCode::from(2)
        }
    }
}
