use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use vitrine_core::audit::{run_audit, AuditThresholds, EngineSubject, SyntheticShopSpec};
use vitrine_core::events::IngestMode;
use vitrine_core::http::FrameResponse;
use vitrine_core::hybrid::catalog_to_jsonl;
use vitrine_core::rules::{
    check_rules, compile_rules_document, parse_rules_document, protective_rules,
};
use vitrine_core::service::{Service, ServiceConfig};
use vitrine_core::transparency::{validate_scarcity_claim, ClaimVerdict, ScarcityClaim};
use vitrine_core::Timestamp;

#[derive(Parser)]
#[command(name = "vitrine", version, about = "Transparent recommendation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Service configuration file (JSON).
    #[arg(long, short, default_value = "vitrine.json")]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Append events from a JSON Lines file (or `-` for stdin) to the log.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArg,
        file: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<IngestMode>,
    },
    /// Train the indicator model and store it.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Training cut-off; defaults to now.
        #[arg(long)]
        as_of: Option<Timestamp>,
    },
    /// Serve one frame as JSON.
    Recommend {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        user: String,
        /// Request context entries, e.g. `item=item-0001` or `cart=a,b`.
        #[arg(long = "context", value_parser = parse_kv)]
        context: Vec<(String, String)>,
        #[arg(long)]
        at: Option<Timestamp>,
    },
    /// Print a frame's disclosure as text, or its static criteria sheet without --user.
    Explain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        user: Option<String>,
        #[arg(long = "context", value_parser = parse_kv)]
        context: Vec<(String, String)>,
        #[arg(long)]
        at: Option<Timestamp>,
    },
    /// Ethical audit benchmark.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Rule document tools.
    Rules {
        #[command(subcommand)]
        command: RulesCommand,
    },
    /// Lowest price of an item in the reference window before a date.
    Pricecheck {
        #[command(flatten)]
        cfg: ConfigArg,
        item: String,
        #[arg(long)]
        at: Timestamp,
        /// Also check a "only N left" claim against catalog stock.
        #[arg(long)]
        stock_left: Option<u64>,
    },
    /// Run the HTTP API.
    Serve {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Write a synthetic shop (catalog, events, config) into a directory.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Generate the benchmark shop, train, serve every user, check. Exit 1 on FAIL.
    Run {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rules document for the audited engine; the protective rules by default.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RulesCommand {
    /// Validate a rules document, reporting every problem.
    Check { file: PathBuf },
}

fn parse_mode(s: &str) -> Result<IngestMode, String> {
    match s {
        "strict" => Ok(IngestMode::Strict),
        "lenient" => Ok(IngestMode::Lenient),
        _ => Err(format!("expected strict or lenient, got {s:?}")),
    }
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn open(cfg: &ConfigArg, now: Timestamp) -> Result<Service, Box<dyn std::error::Error>> {
    let config = ServiceConfig::load(&cfg.config)?;
    log::info!("config hash {}", config.config_hash());
    Ok(Service::open(config, now)?)
}

fn read_json<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<T, Box<dyn std::error::Error>> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(serde_json::from_str(
            &fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        )
        .map_err(|e| format!("{}: {e}", p.display()))?),
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest { cfg, file, mode } => {
            let now = Timestamp::now();
            let svc = open(&cfg, now)?;
            let body = if file.as_os_str() == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s)?;
                s
            } else {
                fs::read_to_string(&file)?
            };
            let summary = svc.ingest(&body, mode.unwrap_or(svc.config().ingest_mode), now)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { cfg, as_of } => {
            let as_of = as_of.unwrap_or_else(Timestamp::now);
            let svc = open(&cfg, as_of)?;
            println!("{}", serde_json::to_string_pretty(&svc.retrain(as_of)?)?);
        }
        Command::Recommend {
            cfg,
            frame,
            user,
            context,
            at,
        } => {
            let now = at.unwrap_or_else(Timestamp::now);
            let svc = open(&cfg, now)?;
            let ctx: BTreeMap<String, String> = context.into_iter().collect();
            let result = svc.recommend(&frame, &user, &ctx, now)?;
            let resp = FrameResponse {
                disclosure_text: result.disclosure.render_text(),
                result,
            };
            println!("{}", serde_json::to_string_pretty(&resp)?);
        }
        Command::Explain {
            cfg,
            frame,
            user,
            context,
            at,
        } => {
            let now = at.unwrap_or_else(Timestamp::now);
            let svc = open(&cfg, now)?;
            match user {
                Some(user) => {
                    let ctx: BTreeMap<String, String> = context.into_iter().collect();
                    print!(
                        "{}",
                        svc.recommend(&frame, &user, &ctx, now)?
                            .disclosure
                            .render_text()
                    );
                }
                None => println!("{}", serde_json::to_string_pretty(&svc.criteria(&frame)?)?),
            }
        }
        Command::Audit {
            command:
                AuditCommand::Run {
                    spec,
                    thresholds,
                    out,
                    rules,
                },
        } => {
            let spec: SyntheticShopSpec = read_json(spec.as_deref())?;
            let thresholds: AuditThresholds = read_json(thresholds.as_deref())?;
            let rules = match rules {
                Some(p) => compile_rules_document(&fs::read_to_string(&p)?)?,
                None => protective_rules(),
            };
            let report = run_audit(&mut EngineSubject::new(rules), &spec, &thresholds)?;
            if let Some(out) = out {
                fs::write(&out, report.to_json() + "\n")?;
            }
            print!("{}", report.summary());
            if !report.passed() {
                println!("failing checks: {}", report.failing_checks.join(", "));
                return Ok(ExitCode::from(1));
            }
        }
        Command::Rules {
            command: RulesCommand::Check { file },
        } => {
            let raw = parse_rules_document(&fs::read_to_string(&file)?)?;
            let (ok, errors) = check_rules(&raw);
            for e in &errors {
                eprintln!("error: {e}");
            }
            println!("{} rule(s) valid, {} error(s)", ok.len(), errors.len());
            if !errors.is_empty() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Pricecheck {
            cfg,
            item,
            at,
            stock_left,
        } => {
            let svc = open(&cfg, at)?;
            match svc.reference_price(&item, at) {
                Ok(p) => println!(
                    "{item}: lowest price in the {} days before {at} was {p:.2}",
                    svc.config().price_window_days
                ),
                Err(e) => println!("{item}: {e}"),
            }
            if let Some(n) = stock_left {
                let verdict = validate_scarcity_claim(
                    ScarcityClaim::StockLeft(n),
                    &item,
                    svc.catalog(),
                    None,
                )?;
                match verdict {
                    ClaimVerdict::Valid => println!("claim \"only {n} left\": valid"),
                    ClaimVerdict::Invalid { reason } => {
                        println!("claim \"only {n} left\": invalid ({reason})");
                        return Ok(ExitCode::from(1));
                    }
                }
            }
        }
        Command::Serve { cfg } => {
            let svc = Arc::new(open(&cfg, Timestamp::now())?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(vitrine_core::http::serve(svc))?;
        }
        Command::Synth { spec, out } => {
            let spec: SyntheticShopSpec = read_json(spec.as_deref())?;
            let shop = vitrine_core::audit::generate_synthetic_shop(&spec)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("catalog.jsonl"), catalog_to_jsonl(&shop.catalog))?;
            fs::write(out.join("events.jsonl"), shop.log.to_jsonl())?;
            let mut rules = protective_rules()
                .merged(&shop.planted_rules)?
                .rules()
                .to_vec();
            rules.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
            fs::write(
                out.join("rules.json"),
                serde_json::to_string_pretty(&serde_json::json!({ "rules": rules }))?,
            )?;
            let config = serde_json::json!({
                "paths": {
                    "event_log": "events.jsonl",
                    "catalog": "catalog.jsonl",
                    "rules": "rules.json",
                    "model": "model.vtrm",
                    "controls": "controls.jsonl"
                }
            });
            fs::write(
                out.join("vitrine.json"),
                serde_json::to_string_pretty(&config)?,
            )?;
            println!(
                "wrote {} items, {} events, {} users to {} (as of {})",
                shop.catalog.len(),
                shop.log.len(),
                shop.users.len(),
                out.display(),
                spec.as_of
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
