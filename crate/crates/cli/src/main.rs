use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use censusdp::bench::{run_experiment, ExperimentConfig};
use censusdp::hpd::{run_hpd, HpdConfig};
use censusdp::mst::{run_mst, MstConfig};
use censusdp::population::{generate_population, ingest_csv};
use censusdp::query::{read_answer_csv, sample_query_sets};
use censusdp::topdown::{run_topdown, TopDownConfig};
use censusdp::{
    evaluate, validate_against_truth, AnswerTable, ConstraintReport, FeatureSchema, Population,
    QuerySet, RandomSource, RegionTree, TreeSpec,
};

#[derive(Parser)]
#[command(name = "censusdp", version, about = "Private hierarchical marginal release and synthetic data benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Audit an answer-table CSV for consistency, validity and faithfulness.
    Validate {
        #[arg(long)]
        table: PathBuf,
        /// Region tree JSON.
        #[arg(long)]
        tree: PathBuf,
        /// Ground-truth table; enables the root-invariant check.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Generate a seeded planted-model population CSV.
    Genpop {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        /// Feature schema JSON: a list of {"name", "domain_size"}.
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        correlation: f64,
        #[arg(long, default_value = "region")]
        region_column: String,
    },
    /// Sample disjoint in- and out-of-distribution k-way query sets.
    Queries {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long = "in")]
        count_in: usize,
        #[arg(long = "out", default_value_t = 0)]
        count_out: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_in: PathBuf,
        #[arg(long)]
        out_out: Option<PathBuf>,
    },
    /// Answer a query set on a population.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Release an answer table with TopDown.
    Topdown {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Print a JSON constraint-violation audit of the release.
        #[arg(long)]
        constraint_report: bool,
    },
    /// Release a synthetic population.
    Synth {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        algorithm: SynthAlgorithm,
        #[arg(long)]
        epsilon: f64,
        /// Defaults to 1/n^2.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        seed: u64,
        /// Training queries, required for hpd-fixed.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the fitted model as JSON.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write the measurement log CSV (hpd-fixed only).
        #[arg(long)]
        measurements: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthAlgorithm {
    Mst,
    HpdFixed,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Population CSV.
    #[arg(long)]
    population: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    #[arg(long, default_value = "region")]
    region_column: String,
}

impl DataArgs {
    fn load(&self) -> Result<Population> {
        let schema = Arc::new(read_schema(&self.schema)?);
        let tree = Arc::new(read_tree(&self.tree)?);
        ingest_csv(&self.population, schema, &self.region_column, tree)
            .with_context(|| format!("reading population {}", self.population.display()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_schema(path: &Path) -> Result<FeatureSchema> {
    read_json(path)
}

fn read_tree(path: &Path) -> Result<RegionTree> {
    let spec: TreeSpec = read_json(path)?;
    Ok(spec.build()?)
}

fn read_queries(path: &Path, schema: &FeatureSchema) -> Result<Arc<QuerySet>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Arc::new(QuerySet::from_json(&text, schema)?))
}

fn write_table(table: &AnswerTable, path: &Path) -> Result<()> {
    table.write_csv(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?)?;
    Ok(())
}

fn print_report(report: &ConstraintReport) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, report)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let config = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let outcome = run_experiment(&config)?;
            let s = &outcome.summary;
            println!(
                "{} runs, {} failed, {} constraint violations; results in {}",
                s.ledger.len() + s.failures.len(),
                s.failures.len(),
                s.constraint_violations,
                config.output_dir.display()
            );
            for f in &s.failures {
                eprintln!("failed: {} eps={} k={} rep={}: {}", f.algorithm, f.epsilon, f.k, f.repetition, f.error);
            }
            Ok(if outcome.all_succeeded() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Validate { table, tree, truth } => {
            let tree = read_tree(&tree)?;
            let open = |p: &Path| fs::File::open(p).with_context(|| format!("opening {}", p.display()));
            let (queries, values) = read_answer_csv(open(&table)?, &tree)?;
            let mut report = censusdp::constraints::validate_rows(&tree, &values);
            if let Some(truth) = truth {
                let (truth_queries, truth_values) = read_answer_csv(open(&truth)?, &tree)?;
                if truth_queries != queries {
                    bail!("table has {queries} queries but the truth has {truth_queries}");
                }
                let n = tree.len();
                report.root_invariant = (0..queries).filter(|q| values[q * n] != truth_values[q * n]).count();
            }
            print_report(&report)?;
            Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Genpop { seed, n, schema, tree, out, correlation, region_column } => {
            let schema = Arc::new(read_schema(&schema)?);
            let tree = Arc::new(read_tree(&tree)?);
            let pop = generate_population(seed, n, schema, tree, correlation)?;
            pop.write_csv(fs::File::create(&out)?, &region_column)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Queries { schema, k, count_in, count_out, seed, out_in, out_out } => {
            let schema = read_schema(&schema)?;
            let (qin, qout) = sample_query_sets(seed, &schema, k, count_in, count_out)?;
            fs::write(&out_in, qin.to_json(&schema)?)?;
            match out_out {
                Some(p) => fs::write(p, qout.to_json(&schema)?)?,
                None if count_out > 0 => bail!("--out-out is required when --out is positive"),
                None => {}
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { data, queries, out } => {
            let pop = data.load()?;
            let queries = read_queries(&queries, pop.schema())?;
            write_table(&evaluate(&pop, &queries)?, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Topdown { data, queries, epsilon, seed, out, constraint_report } => {
            let pop = data.load()?;
            let queries = read_queries(&queries, pop.schema())?;
            let truth = evaluate(&pop, &queries)?;
            let released = run_topdown(&truth, &TopDownConfig::new(epsilon, seed)?)?;
            write_table(&released, &out)?;
            if constraint_report {
                print_report(&validate_against_truth(&released, &truth)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { data, algorithm, epsilon, delta, seed, queries, out, model, measurements } => {
            let pop = data.load()?;
            let delta = delta.unwrap_or(1.0 / (pop.len() as f64).powi(2));
            let synthetic = match algorithm {
                SynthAlgorithm::Mst => {
                    let config = MstConfig { epsilon, delta, ..MstConfig::default() };
                    let release = run_mst(&pop, &config, &mut RandomSource::new(seed))?;
                    if let Some(path) = model {
                        fs::write(path, release.model.to_json()?)?;
                    }
                    release.synthetic
                }
                SynthAlgorithm::HpdFixed => {
                    let Some(queries) = queries else { bail!("hpd-fixed needs --queries") };
                    let queries = read_queries(&queries, pop.schema())?;
                    let config = HpdConfig { epsilon, delta, ..HpdConfig::default() };
                    let release = run_hpd(&pop, &queries, &config, seed)?;
                    if let Some(path) = model {
                        fs::write(path, release.fit.model.to_json()?)?;
                    }
                    if let Some(path) = measurements {
                        release.fit.log.write_csv(fs::File::create(path)?, pop.tree())?;
                    }
                    release.synthetic
                }
            };
            synthetic.write_csv(fs::File::create(&out)?, &data.region_column)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
