use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sigmacount::error::{Error, Result};
use sigmacount::grouping::plan;
use sigmacount::harness::{
    gen_sim_db, load_adult, run_monotonicity_study, run_utility_study, write_table, AdultVariables,
    MonotonicityConfig, StudyData, UtilityConfig,
};
use sigmacount::serve::Server;
use sigmacount::{Database, Engine, EngineConfig, PrivacyAccountant, Query, Schema, SigmaAlgebra};

#[derive(Parser)]
#[command(
    name = "sigmacount",
    version,
    about = "Differentially private counting queries"
)]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Total privacy budget.
    #[arg(long, global = true, default_value_t = 1.0)]
    budget: f64,
    /// ε for each query answered by the per-query mechanism.
    #[arg(long, global = true, default_value_t = 0.01)]
    eps: f64,
    /// ε′ per atom when materializing; defaults to --eps.
    #[arg(long, global = true)]
    eps_atom: Option<f64>,
    #[arg(long, global = true, default_value_t = 3)]
    threshold_u: usize,
    /// Round released values to integers.
    #[arg(long, global = true)]
    round: bool,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ledger file; loaded if present and rewritten after the command.
    #[arg(long, global = true)]
    state: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load a table and write it back as CSV plus schema JSON.
    Ingest(IngestArgs),
    /// Answer queries given on the command line or one per line on stdin.
    Query {
        #[command(flatten)]
        db: DbArgs,
        /// Query text, e.g. "c1 IN {1} AND c3 IN {0}".
        queries: Vec<String>,
    },
    /// Newline-delimited JSON requests over stdio or TCP.
    Serve {
        #[command(flatten)]
        db: DbArgs,
        /// Address to listen on; stdio when omitted.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Group a workload, induce and perturb its algebras, and write them out.
    Materialize {
        #[command(flatten)]
        db: DbArgs,
        /// One query per line.
        #[arg(long)]
        workload: PathBuf,
    },
    /// Run the order-violation or relative-utility study.
    #[command(subcommand)]
    Study(StudyCmd),
    /// Inspect the persisted privacy ledger.
    #[command(subcommand)]
    Budget(BudgetCmd),
}

#[derive(Args)]
struct IngestArgs {
    /// CSV file with a header row.
    #[arg(long, conflicts_with = "adult")]
    csv: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Raw UCI Adult file.
    #[arg(long)]
    adult: Option<PathBuf>,
    /// `nine` (21 columns) or `five` (11 columns).
    #[arg(long, default_value = "nine")]
    adult_vars: String,
    /// One-hot encode into binary columns.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct DbArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Previously materialized algebras to install.
    #[arg(long)]
    algebras: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Simulated tables with these column counts.
    #[arg(long, value_delimiter = ',', default_values_t = [11usize, 21])]
    sim_cols: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    rows: usize,
    /// Raw UCI Adult file; adds the 11- and 21-column encodings.
    #[arg(long)]
    adult: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StudyCmd {
    /// Violation rates on nested query pairs.
    Monotonicity {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [100.0, 10.0, 1.0])]
        budgets: Vec<f64>,
    },
    /// Atom-sum MSE against per-query MSE at equal budget.
    Utility {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [100_000usize, 1_000_000])]
        queries: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
        us: Vec<usize>,
    },
}

#[derive(Subcommand)]
enum BudgetCmd {
    /// Print the ledger held in --state.
    Status,
}

impl Cli {
    fn config(&self) -> EngineConfig {
        EngineConfig {
            epsilon_budget: self.budget,
            epsilon_per_query: self.eps,
            epsilon_atom: self.eps_atom,
            seed: self.seed,
            round_output: self.round,
            threshold_u: self.threshold_u,
            ..Default::default()
        }
    }

    fn accountant(&self) -> Result<PrivacyAccountant> {
        match &self.state {
            Some(p) if p.exists() => {
                PrivacyAccountant::from_json(&serde_json::from_str(&fs::read_to_string(p)?)?)
            }
            _ => PrivacyAccountant::new(self.budget),
        }
    }

    fn save(&self, acct: &PrivacyAccountant) -> Result<()> {
        if let Some(p) = &self.state {
            fs::write(p, serde_json::to_string_pretty(&acct.to_json())?)?;
        }
        Ok(())
    }

    fn engine(&self, args: &DbArgs) -> Result<Engine> {
        let schema = args.schema.as_ref().map(Schema::load_json).transpose()?;
        let db = Database::load_csv(&args.db, schema.as_ref())?;
        let engine = Engine::with_accountant(db, self.config(), self.accountant()?)?;
        if let Some(p) = &args.algebras {
            let doc: Value = serde_json::from_str(&fs::read_to_string(p)?)?;
            let list = doc
                .as_array()
                .ok_or_else(|| Error::Validation("algebra file must hold a JSON array".into()))?;
            let schema = engine.database().schema_arc();
            for a in list {
                engine.install(SigmaAlgebra::from_json(a, &schema)?)?;
            }
        }
        Ok(engine)
    }

    fn out_writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
            None => Box::new(io::stdout().lock()),
        })
    }
}

fn study_data(args: &DataArgs, seed: u64) -> Result<Vec<StudyData>> {
    let mut data = Vec::new();
    for &p in &args.sim_cols {
        data.push(StudyData::new(
            format!("sim{p}"),
            gen_sim_db(args.rows, p, seed)?,
        ));
    }
    if let Some(path) = &args.adult {
        for (vars, name) in [
            (AdultVariables::Five, "adult11"),
            (AdultVariables::Nine, "adult21"),
        ] {
            data.push(StudyData::new(
                name,
                load_adult(path, vars)?.encode_binary()?,
            ));
        }
    }
    Ok(data)
}

fn read_queries(path: &FsPath, schema: &Schema) -> Result<Vec<Query>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| Query::parse(l, schema))
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Ingest(a) => {
            let mut db = match (&a.csv, &a.adult) {
                (Some(p), None) => {
                    let schema = a.schema.as_ref().map(Schema::load_json).transpose()?;
                    Database::load_csv(p, schema.as_ref())?
                }
                (None, Some(p)) => load_adult(p, a.adult_vars.parse::<AdultVariables>()?)?,
                _ => {
                    return Err(Error::InvalidArgument(
                        "give one of --csv or --adult".into(),
                    ))
                }
            };
            if a.binary {
                db = db.encode_binary()?;
            }
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir)?;
            db.save_csv(dir.join("data.csv"))?;
            fs::write(
                dir.join("schema.json"),
                serde_json::to_string_pretty(&db.schema().to_json())?,
            )?;
            eprintln!(
                "{} rows, {} columns -> {}",
                db.n(),
                db.schema().len(),
                dir.display()
            );
        }
        Cmd::Query { db, queries } => {
            let engine = cli.engine(db)?;
            let schema = engine.database().schema_arc();
            let texts: Vec<String> = if queries.is_empty() {
                io::stdin().lock().lines().collect::<io::Result<_>>()?
            } else {
                queries.clone()
            };
            let mut out = cli.out_writer()?;
            let mut result = Ok(());
            for t in texts.iter().filter(|t| !t.trim().is_empty()) {
                let line = match Query::parse(t, &schema).and_then(|q| engine.handle(&q)) {
                    Ok(r) => serde_json::to_value(&r)?,
                    Err(e @ Error::BudgetExhausted { .. }) => {
                        result = Err(e);
                        json!({"query": t, "path": "refused", "value": null})
                    }
                    Err(e) => json!({"query": t, "error": e.to_string()}),
                };
                writeln!(out, "{line}")?;
            }
            out.flush()?;
            cli.save(&engine.accountant())?;
            return result;
        }
        Cmd::Serve { db, listen } => {
            let server = Arc::new(Server::new(cli.engine(db)?));
            match listen {
                Some(addr) => Arc::clone(&server).serve_tcp(addr.as_str())?,
                None => server.serve_stream(io::stdin().lock(), io::stdout().lock())?,
            }
            cli.save(&server.engine().accountant())?;
        }
        Cmd::Materialize { db, workload } => {
            let engine = cli.engine(db)?;
            let schema = engine.database().schema_arc();
            let qs = read_queries(workload, &schema)?;
            let p = plan(&qs, cli.threshold_u)?;
            let report = engine.materialize(&p, cli.config().eps_atom())?;
            let algebras: Vec<Value> = engine
                .algebras()
                .iter()
                .map(|a| a.to_json(&schema))
                .collect();
            let mut out = cli.out_writer()?;
            writeln!(out, "{}", serde_json::to_string_pretty(&algebras)?)?;
            out.flush()?;
            eprintln!(
                "{} algebras, {} atoms, charged {:.6}, residual {:.4}",
                report.new_algebras,
                report.atoms,
                report.charged,
                p.residual_fraction()
            );
            cli.save(&engine.accountant())?;
        }
        Cmd::Study(StudyCmd::Monotonicity {
            data,
            pairs,
            budgets,
        }) => {
            let cfg = MonotonicityConfig {
                budgets: budgets.clone(),
                pairs: *pairs,
                seed: cli.seed,
                ..Default::default()
            };
            let rows = run_monotonicity_study(&study_data(data, cli.seed)?, &cfg)?;
            for r in &rows {
                println!(
                    "{:<8} budget={:<6} benchmark={:.4} sigma={:.4}",
                    r.dataset, r.budget, r.benchmark_violation_rate, r.sigma_violation_rate
                );
            }
            if let Some(dir) = &cli.out {
                write_table(&rows, dir, "monotonicity")?;
            }
        }
        Cmd::Study(StudyCmd::Utility { data, queries, us }) => {
            let cfg = UtilityConfig {
                us: us.clone(),
                query_counts: queries.clone(),
                budget: cli.budget,
                seed: cli.seed,
                ..Default::default()
            };
            let rows = run_utility_study(&study_data(data, cli.seed)?, &cfg)?;
            for r in &rows {
                println!(
                    "{:<8} Q={:<8} u={} clusters={:<5} ratio={:.3} expected={:.3} theory={:.3}",
                    r.dataset,
                    r.queries,
                    r.u,
                    r.clusters,
                    r.relative_utility,
                    r.expected_relative_utility,
                    r.theoretical_relative_utility
                );
            }
            if let Some(dir) = &cli.out {
                write_table(&rows, dir, "utility")?;
            }
        }
        Cmd::Budget(BudgetCmd::Status) => {
            let acct = cli.accountant()?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "budget": acct.budget(),
                    "spent": acct.spent(),
                    "remaining": acct.remaining(),
                    "charges": acct.ledger().len(),
                }))?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
