//! `fedsmc`: run, compare and audit federated-learning simulations.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 protocol or
//! numerical failure during a run, 1 anything else (I/O).

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fedsmc::audit::{check_disclosure, count_messages, TrueWeights};
use fedsmc::data::{generate_clients, write_csv};
use fedsmc::experiment::compare;
use fedsmc::protocol::{run_training, MessageLog, RunConfig, RunOptions, StrategyKind};
use fedsmc::WeightVector;

#[derive(Parser)]
#[command(name = "fedsmc", version, about = "Federated learning with cluster-based secure aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with one strategy and write table, curves, message log and audit.
    Run(RunArgs),
    /// Run every configured strategy for every repeat and compare them.
    Compare(RunArgs),
    /// Summarise a messages.log; with payloads and weights, check disclosures.
    Audit(AuditArgs),
    /// Write the synthetic client datasets as CSV.
    GenData(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file (fields of the resolved config; missing fields take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Number of hospitals K (resizes the default data profile).
    #[arg(long)]
    clients: Option<usize>,
    /// Number of clusters M.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dp_sigma: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Allow single-hospital clusters under smc.
    #[arg(long)]
    allow_degenerate: bool,
    /// Also write payloads.jsonl and true_weights.jsonl for offline audits.
    #[arg(long)]
    export_payloads: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Path to a messages.log.
    log: PathBuf,
    /// payloads.jsonl written by `run --export-payloads`.
    #[arg(long, requires = "weights")]
    payloads: Option<PathBuf>,
    /// true_weights.jsonl written by `run --export-payloads`.
    #[arg(long, requires = "payloads")]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Write audit.json here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Audit(args) => cmd_audit(&args),
        Command::GenData(args) => cmd_gen_data(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<fedsmc::Error>() {
        Some(fedsmc::Error::Config { .. } | fedsmc::Error::Usage(_) | fedsmc::Error::Parse { .. }) => 2,
        Some(fedsmc::Error::Protocol(_) | fedsmc::Error::Arithmetic(_) | fedsmc::Error::Shape { .. }) => 3,
        _ if e.downcast_ref::<serde_json::Error>().is_some() => 2,
        _ => 1,
    }
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(k) = args.clients {
        if k != cfg.clients {
            cfg = cfg.with_clients(k);
        }
    }
    if let Some(m) = args.clusters {
        cfg.clusters = m;
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse::<StrategyKind>()?;
    }
    if let Some(t) = args.rounds {
        cfg.rounds = t;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(sigma) = args.dp_sigma {
        cfg.dp_sigma = sigma;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    cfg.allow_degenerate |= args.allow_degenerate;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes via a temporary file in the same directory, then renames.
fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, dir.join(name)).with_context(|| format!("renaming into {name}"))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    prepare_out(&args.out)?;
    write_atomic(&args.out, "config.resolved.json", &to_json(&cfg)?)?;

    let outcome = run_training(&cfg, RunOptions { keep_payloads: true })?;
    let truth = outcome
        .true_weights
        .as_ref()
        .expect("payload retention was requested");
    let stats = count_messages(&outcome.log);
    let disclosure = check_disclosure(&outcome.log, truth, 1e-6)?.with_strategy(cfg.strategy.as_str());

    let out = &args.out;
    write_atomic(out, "table.csv", fedsmc::metrics::EvalReport::table_csv(&[&outcome.report]).as_bytes())?;
    write_atomic(out, "curves.csv", outcome.report.curves_csv().as_bytes())?;
    write_atomic(out, "report.json", &to_json(&outcome.report)?)?;
    let mut log_text = Vec::new();
    outcome.log.write_text(&mut log_text)?;
    write_atomic(out, "messages.log", &log_text)?;
    write_atomic(
        out,
        "audit.json",
        &to_json(&serde_json::json!({ "stats": stats, "disclosure": disclosure }))?,
    )?;
    if args.export_payloads {
        let mut payloads = Vec::new();
        outcome.log.write_payloads_jsonl(&mut payloads)?;
        write_atomic(out, "payloads.jsonl", &payloads)?;
        write_atomic(out, "true_weights.jsonl", &true_weights_jsonl(truth)?)?;
    }

    println!(
        "{}: avg ACC {:.2}  avg F1 {:.2}  messages {}  server disclosures {}",
        cfg.strategy,
        outcome.report.avg_accuracy,
        outcome.report.avg_f1,
        stats.total.messages,
        disclosure.server_disclosures.len()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct WeightRow {
    round: usize,
    hospital: usize,
    weights: WeightVector,
}

fn true_weights_jsonl(truth: &TrueWeights) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for round in truth.rounds() {
        for (hospital, w) in truth.round(round) {
            serde_json::to_writer(
                &mut out,
                &WeightRow {
                    round,
                    hospital,
                    weights: w.clone(),
                },
            )?;
            out.push(b'\n');
        }
    }
    Ok(out)
}

fn read_true_weights(path: &Path) -> Result<TrueWeights> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut truth = TrueWeights::default();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: WeightRow = serde_json::from_str(line).map_err(|e| fedsmc::Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        truth.insert(row.round, row.hospital, row.weights);
    }
    Ok(truth)
}

fn cmd_compare(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    prepare_out(&args.out)?;
    write_atomic(&args.out, "config.resolved.json", &to_json(&cfg)?)?;

    let cmp = compare(&cfg)?;
    write_atomic(&args.out, "table.csv", cmp.table_csv().as_bytes())?;
    write_atomic(&args.out, "overhead.csv", cmp.overhead_csv().as_bytes())?;
    for report in &cmp.reports {
        write_atomic(
            &args.out,
            &format!("curves_{}.csv", report.method),
            report.curves_csv().as_bytes(),
        )?;
    }
    write_atomic(&args.out, "compare.json", &to_json(&cmp)?)?;

    for (report, overhead) in cmp.reports.iter().zip(&cmp.overhead) {
        println!(
            "{:>6}: avg ACC {:.2}  avg F1 {:.2}  messages {}  overhead x{:.2}",
            report.method, report.avg_accuracy, report.avg_f1, overhead.messages, overhead.ratio_vs_fedavg
        );
    }
    Ok(())
}

fn cmd_audit(args: &AuditArgs) -> Result<()> {
    let file = fs::File::open(&args.log).with_context(|| format!("opening {}", args.log.display()))?;
    let mut log = MessageLog::read_text(BufReader::new(file))?;
    let stats = count_messages(&log);
    let mut doc = serde_json::json!({ "stats": stats });
    if let (Some(payloads), Some(weights)) = (&args.payloads, &args.weights) {
        let file = fs::File::open(payloads).with_context(|| format!("opening {}", payloads.display()))?;
        log.attach_payloads(BufReader::new(file))?;
        let truth = read_true_weights(weights)?;
        doc["disclosure"] = serde_json::to_value(check_disclosure(&log, &truth, args.tol)?)?;
    }
    let bytes = to_json(&doc)?;
    match &args.out {
        Some(dir) => {
            prepare_out(dir)?;
            write_atomic(dir, "audit.json", &bytes)?;
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn cmd_gen_data(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    prepare_out(&args.out)?;
    let clients = generate_clients(&cfg.data)?;
    let mut csv = Vec::new();
    write_csv(&clients, &mut csv)?;
    write_atomic(&args.out, "data.csv", &csv)?;
    write_atomic(&args.out, "config.resolved.json", &to_json(&cfg)?)?;
    for c in &clients {
        let pos = c.train.iter().chain(&c.test).filter(|e| e.label == 1).count();
        println!(
            "C{}: {} examples ({} train / {} test), {} positive",
            c.client_id,
            c.len(),
            c.train.len(),
            c.test.len(),
            pos
        );
    }
    Ok(())
}
