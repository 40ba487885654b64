use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dd_iss::experiment::{self, ExperimentConfig, ExperimentError};
use dd_iss::synth::CertificateKind;

#[derive(Parser)]
#[command(name = "dd-iss", version, about = "Data-driven ISS controller synthesis pipeline")]
struct Cli {
    /// Experiment config (JSON); the built-in benchmark when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as JSON.
    Config,
    /// Simulate the system and write the dataset.
    Collect,
    /// Fit the matrix-ellipsoid model to the dataset.
    Overapprox,
    /// Solve one program, or `all`.
    Synth { program: String },
    /// Verify certificates (every certificate on disk when none is named).
    Verify { programs: Vec<String> },
    /// Summarize every stage output in one table.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::benchmark(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn programs(names: &[String]) -> Result<Vec<CertificateKind>, ExperimentError> {
    if names.is_empty() || names.iter().any(|n| n == "all") {
        return Ok(CertificateKind::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| {
            CertificateKind::from_program(n).ok_or_else(|| {
                let known: Vec<_> = CertificateKind::ALL.iter().map(|k| k.program()).collect();
                ExperimentError::Config(format!("unknown program {n:?}; expected one of {}", known.join(", ")))
            })
        })
        .collect()
}

fn run(cli: &Cli) -> Result<u8, ExperimentError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Config => println!("{}", cfg.to_json()),
        Command::Collect => {
            let (ds, meta) = experiment::collect(&cfg)?;
            println!(
                "wrote {} ({} samples, multi-trajectory {}, sha256 {})",
                cfg.paths().dataset_csv().display(),
                ds.len(),
                meta.multi_trajectory,
                meta.csv_sha256
            );
        }
        Command::Overapprox => {
            let file = experiment::overapproximate(&cfg, |rank| {
                let smin = rank.singular_values.last().copied().unwrap_or(0.0);
                println!(
                    "rank check: [Z0; W0] is {}x{}, full row rank {}, smallest singular value {smin:.3e}",
                    rank.rows, rank.samples, rank.full_row_rank
                );
                if !rank.full_row_rank {
                    eprintln!("warning: data is not rich enough; the ellipsoid may be unbounded in some directions");
                }
            })?;
            println!("log det Abar = {:.6}, solved in {:.2} s", file.model.log_det, file.solve_time);
            if let Some(m) = &file.membership {
                println!("true system in ellipsoid: {} (max eig {:.3e})", m.member, m.max_eig);
            }
            println!("wrote {}", cfg.paths().model().display());
        }
        Command::Synth { program } => {
            let mut code = 0;
            for kind in programs(std::slice::from_ref(program))? {
                match experiment::synthesize(&cfg, kind) {
                    Ok(file) => {
                        let cert = file.certificate.as_ref().expect("feasible run carries a certificate");
                        println!("{} feasible in {:.2} s", kind.program(), file.wall_time);
                        print!("{}", cert.summary());
                        let s = &cert.stats;
                        println!(
                            "decision variables {}, Gram variables {}, scalar constraints {}, SOS constraints {}, matrix SOS sizes {:?}, SDPs {}",
                            s.decision_variables, s.gram_variables, s.scalar_constraints, s.sos_constraints, s.matrix_constraints, s.sdp_solves
                        );
                    }
                    Err(e @ ExperimentError::Synth(dd_iss::synth::SynthError::Infeasible(_))) => {
                        if let ExperimentError::Synth(dd_iss::synth::SynthError::Infeasible(inf)) = &e {
                            eprintln!("{}: {e}", kind.program());
                            for (name, w) in inf.diagnostics.iter().take(5) {
                                eprintln!("  dual weight {w:.3e} on {name}");
                            }
                        }
                        code = 2;
                    }
                    Err(e) => return Err(e),
                }
            }
            return Ok(code);
        }
        Command::Verify { programs: names } => {
            let explicit = !names.is_empty();
            let mut failed = false;
            let mut any = false;
            for kind in programs(names)? {
                if !explicit {
                    match experiment::load_certificate(&cfg, kind) {
                        Ok(f) if f.certificate.is_some() => {}
                        Ok(_) | Err(ExperimentError::Missing(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
                let v = experiment::verify_program(&cfg, kind)?;
                any = true;
                failed |= !v.pass;
                println!(
                    "{} {}: sos {} trace min margin {:.3e} samples {:.3e} sandwich ({:.3e}, {:.3e}){}{}",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.program,
                    v.sos_pass,
                    v.trace.min_margin,
                    v.samples.worst_margin.min(v.samples.worst_adversarial),
                    v.sandwich.lower,
                    v.sandwich.upper,
                    v.frozen.as_ref().map_or(String::new(), |f| format!(" 0-GAS {}", f.pass)),
                    v.pd.as_ref().map_or(String::new(), |p| format!(" pd/ru {} ({:?})", p.pass, p.method)),
                );
            }
            if !any {
                return Err(ExperimentError::Missing(format!("certificates in {}", cfg.out_dir.display())));
            }
            return Ok(if failed { 3 } else { 0 });
        }
        Command::Report => {
            let (_, text) = experiment::report(&cfg)?;
            print!("{text}");
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
