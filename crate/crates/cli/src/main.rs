use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use fedcontract::asyncsim::{write_ledger_csv, write_summary_csv};
use fedcontract::baselines::Algorithm;
use fedcontract::experiment::{prepare, solve_menu, ExperimentConfig};
use fedcontract::incentive::{fit_curve, publisher_utility, ContractDocument, CurveModel, FitSample};

#[derive(Parser)]
#[command(name = "fedcontract", version, about = "Incentive-driven asynchronous federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve, verify and publish the contract menu.
    Contract(RunArgs),
    /// Run the asynchronous training simulation.
    Simulate(RunArgs),
    /// Run a comparison algorithm on the same clients.
    Baseline {
        algorithm: BaselineArg,
        /// Proximal coefficient for fedprox.
        #[arg(long)]
        mu: Option<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fit the accuracy or quality curve to CSV samples.
    Fit {
        /// CSV with a header row; the last column is the target.
        samples: PathBuf,
        #[arg(long, value_enum)]
        model: CurveArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory to write fit.json into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-client size, label distance, quality and level.
    PartitionStats(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Fedavg,
    Fedprox,
    LocalSgd,
}

impl From<BaselineArg> for Algorithm {
    fn from(a: BaselineArg) -> Self {
        match a {
            BaselineArg::Fedavg => Algorithm::FedAvg,
            BaselineArg::Fedprox => Algorithm::FedProx,
            BaselineArg::LocalSgd => Algorithm::LocalSgd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveArg {
    Accuracy,
    Quality,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file (a bare config or a previous run's config-echo.json).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// paper-noattack, paper-attack30 or desk.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attackers: Option<usize>,
    #[arg(long)]
    flip_fraction: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override any config field, e.g. `--set training.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => read_config(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::desk(),
        };
        for s in &self.overrides {
            cfg.set(s).with_context(|| format!("applying --set {s}"))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(a) = self.attackers {
            cfg.attack.attackers = a;
        }
        if let Some(f) = self.flip_fraction {
            cfg.attack.flip_fraction = f;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(inner) = doc.get_mut("config") {
        doc = inner.take();
    }
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let field = e.path().to_string();
        anyhow::anyhow!("invalid config in {}: field `{field}`: {}", path.display(), e.into_inner())
    })
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    algorithm: Option<Algorithm>,
    config: &'a ExperimentConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn print_menu(doc: &ContractDocument) {
    println!("{:>5} {:>6} {:>6} {:>14} {:>16}  binding", "level", "theta", "p", "effort", "reward");
    for row in &doc.levels {
        let mut binding = Vec::new();
        if row.binding.ir {
            binding.push("IR");
        }
        if row.binding.ic_down {
            binding.push("IC-down");
        }
        println!(
            "{:>5} {:>6.3} {:>6.3} {:>14.4} {:>16.4}  {}",
            row.n,
            row.theta,
            row.p,
            row.effort,
            row.reward,
            binding.join(",")
        );
    }
    println!("publisher objective {:.4}", doc.diagnostics.objective);
}

fn cmd_contract(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    fs::create_dir_all(&run.out)?;
    write_json(&run.out.join("config-echo.json"), &Echo { command: "contract", algorithm: None, config: &cfg })?;
    let (menu, report) = solve_menu(&cfg)?;
    let doc = ContractDocument::new(&menu, &cfg.market, &report);
    write_json(&run.out.join("contracts.json"), &doc)?;
    print_menu(&doc);
    println!("publisher utility {:.4}", publisher_utility(&menu, &cfg.market, &cfg.accuracy));
    if !report.ok() {
        bail!("contract verification failed: {}", report.violations.join("; "));
    }
    println!("verified: all IR and IC constraints hold");
    Ok(())
}

fn cmd_simulate(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let prepared = prepare(&cfg)?;
    fs::create_dir_all(&run.out)?;
    write_json(
        &run.out.join("config-echo.json"),
        &Echo { command: "simulate", algorithm: None, config: &prepared.config },
    )?;
    write_json(
        &run.out.join("contracts.json"),
        &ContractDocument::new(&prepared.menu, &prepared.config.market, &prepared.report),
    )?;
    let out = prepared.simulate()?;
    write_ledger_csv(&out.ledgers, create(&run.out.join("ledger.csv"))?)?;
    write_summary_csv(&out.summary, create(&run.out.join("summary.csv"))?)?;
    write_json(&run.out.join("settlement.json"), &out.settlement)?;

    let last = out.summary.last().expect("at least one round");
    let withheld = out.settlement.clients.iter().filter(|c| c.withheld > 0.0).count();
    println!("rounds {}", out.summary.len());
    println!("final test accuracy {:.4}", last.test_accuracy);
    println!(
        "payout {:.4}, withheld {:.4} from {} clients",
        out.settlement.publisher.payout, out.settlement.publisher.withheld, withheld
    );
    Ok(())
}

fn cmd_baseline(run: &RunArgs, algorithm: Algorithm, mu: Option<f64>) -> Result<()> {
    let mut cfg = run.resolve()?;
    if let Some(mu) = mu {
        cfg.training.prox_mu = mu;
        cfg.validate()?;
    }
    let prepared = prepare(&cfg)?;
    fs::create_dir_all(&run.out)?;
    write_json(
        &run.out.join("config-echo.json"),
        &Echo { command: "baseline", algorithm: Some(algorithm), config: &prepared.config },
    )?;
    let (_, rows) = prepared.run_baseline(algorithm)?;
    write_summary_csv(&rows, create(&run.out.join("summary.csv"))?)?;
    println!("final test accuracy {:.4}", rows.last().expect("at least one round").test_accuracy);
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<FitSample>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("row {} of {} is not numeric", i + 1, path.display()))?;
        let Some((&target, inputs)) = values.split_last() else {
            bail!("row {} of {} is empty", i + 1, path.display());
        };
        samples.push(FitSample { inputs: inputs.to_vec(), target });
    }
    if samples.is_empty() {
        bail!("{} contains no samples", path.display());
    }
    Ok(samples)
}

fn cmd_fit(samples: &Path, model: CurveArg, seed: u64, out: Option<&Path>) -> Result<()> {
    let model = match model {
        CurveArg::Accuracy => CurveModel::AccuracyCurve,
        CurveArg::Quality => CurveModel::DataQuality,
    };
    let samples = read_samples(samples)?;
    let fit = fit_curve(&samples, model, &model.default_init(), seed)?;
    println!("{}", serde_json::to_string_pretty(&fit)?);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("fit.json"), &fit)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PartitionRow {
    client_id: usize,
    d_k: usize,
    emd: f64,
    theta: f64,
    level: usize,
    malicious: bool,
}

fn cmd_partition_stats(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let prepared = prepare(&cfg)?;
    fs::create_dir_all(&run.out)?;
    write_json(
        &run.out.join("config-echo.json"),
        &Echo { command: "partition-stats", algorithm: None, config: &prepared.config },
    )?;
    let mut w = csv::Writer::from_writer(create(&run.out.join("partition.csv"))?);
    for p in &prepared.profiles {
        w.serialize(PartitionRow {
            client_id: p.client_id,
            d_k: p.d,
            emd: p.emd,
            theta: p.theta,
            level: p.level,
            malicious: p.malicious,
        })?;
    }
    w.flush()?;
    let mut per_level = vec![0usize; prepared.config.market.levels()];
    for p in &prepared.profiles {
        per_level[p.level - 1] += 1;
    }
    println!("clients per level {per_level:?}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Contract(run) => cmd_contract(&run),
        Command::Simulate(run) => cmd_simulate(&run),
        Command::Baseline { algorithm, mu, run } => cmd_baseline(&run, algorithm.into(), mu),
        Command::Fit { samples, model, seed, out } => cmd_fit(&samples, model, seed, out.as_deref()),
        Command::PartitionStats(run) => cmd_partition_stats(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> Result<()> {
        let argv = std::iter::once("fedcontract").chain(args.iter().copied());
        run(Cli::try_parse_from(argv)?)
    }

    const SMALL: [&str; 8] = [
        "--set",
        "partition.num_clients=5",
        "--set",
        "dataset.train_samples=1500",
        "--set",
        "dataset.test_samples=200",
        "--rounds",
        "3",
    ];

    fn small(cmd: &[&str], out: &Path) -> Result<()> {
        let mut args: Vec<&str> = cmd.to_vec();
        args.extend(SMALL);
        args.push("--out");
        args.push(out.to_str().unwrap());
        run_args(&args)
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    }

    #[test]
    fn contract_publishes_a_verified_ten_level_menu() {
        let tmp = tempfile::tempdir().unwrap();
        run_args(&["contract", "--out", tmp.path().to_str().unwrap()]).unwrap();
        let doc: ContractDocument = serde_json::from_slice(&fs::read(tmp.path().join("contracts.json")).unwrap()).unwrap();
        assert_eq!(doc.levels.len(), 10);
        assert!(doc.verified);
    }

    #[test]
    fn contract_handles_a_single_level_market() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().to_str().unwrap();
        run_args(&["contract", "--set", "market.theta=[1.0]", "--set", "market.p=[1.0]", "--out", out]).unwrap();
        let doc: ContractDocument = serde_json::from_slice(&fs::read(tmp.path().join("contracts.json")).unwrap()).unwrap();
        assert_eq!(doc.levels.len(), 1);
        assert!(doc.levels[0].binding.ir);
    }

    #[test]
    fn malformed_config_names_the_field() {
        let tmp = tempfile::tempdir().unwrap();
        let mut doc = serde_json::to_value(ExperimentConfig::desk()).unwrap();
        doc["training"]["batch_size"] = Value::String("twenty".into());
        let path = tmp.path().join("bad.json");
        fs::write(&path, doc.to_string()).unwrap();
        let err = run_args(&["contract", "--config", path.to_str().unwrap()]).unwrap_err();
        assert!(format!("{err:#}").contains("training.batch_size"), "{err:#}");

        let err = run_args(&["contract", "--set", "training.no_such_field=1"]).unwrap_err();
        assert!(format!("{err:#}").contains("training.no_such_field"), "{err:#}");
    }

    #[test]
    fn simulate_is_reproducible_from_its_config_echo() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
        small(&["simulate", "--attackers", "1"], &a).unwrap();
        small(&["simulate", "--attackers", "1"], &b).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&b));

        let echo = a.join("config-echo.json");
        run_args(&["simulate", "--config", echo.to_str().unwrap(), "--out", c.to_str().unwrap()]).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&c));

        let names: Vec<String> = dir_bytes(&a).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["config-echo.json", "contracts.json", "ledger.csv", "settlement.json", "summary.csv"]);
        let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
        let rounds: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(rounds, ["0", "1", "2"]);
    }

    #[test]
    fn fedprox_without_proximal_term_matches_fedavg() {
        let tmp = tempfile::tempdir().unwrap();
        let (avg, prox, local) = (tmp.path().join("avg"), tmp.path().join("prox"), tmp.path().join("local"));
        small(&["baseline", "fedavg"], &avg).unwrap();
        small(&["baseline", "fedprox", "--mu", "0"], &prox).unwrap();
        assert_eq!(fs::read(avg.join("summary.csv")).unwrap(), fs::read(prox.join("summary.csv")).unwrap());

        small(&["baseline", "local-sgd"], &local).unwrap();
        let rows = fs::read_to_string(local.join("summary.csv")).unwrap();
        assert_eq!(rows.lines().count(), 4);
    }

    #[test]
    fn partition_stats_lists_every_client() {
        let tmp = tempfile::tempdir().unwrap();
        small(&["partition-stats", "--attackers", "2"], tmp.path()).unwrap();
        let mut reader = csv::Reader::from_path(tmp.path().join("partition.csv")).unwrap();
        let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["client_id", "d_k", "emd", "theta", "level", "malicious"]);
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows.iter().filter(|r| &r[5] == "true").count(), 2);
    }

    #[test]
    fn fit_recovers_noiseless_quality_samples() {
        let tmp = tempfile::tempdir().unwrap();
        let qp = fedcontract::incentive::QualityParams::default();
        let mut text = String::from("x,theta\n");
        for i in 1..=40 {
            let x = 100.0 * i as f64;
            text.push_str(&format!("{x},{:?}\n", fedcontract::incentive::quality_curve(x, &qp)));
        }
        let csv_path = tmp.path().join("q.csv");
        fs::write(&csv_path, text).unwrap();
        let out = tmp.path().join("fit");
        run_args(&["fit", csv_path.to_str().unwrap(), "--model", "quality", "--out", out.to_str().unwrap()]).unwrap();
        let fit: Value = serde_json::from_slice(&fs::read(out.join("fit.json")).unwrap()).unwrap();
        assert!(fit["rmse"].as_f64().unwrap() < 1e-6);

        let empty = tmp.path().join("empty.csv");
        fs::write(&empty, "x,theta\n").unwrap();
        let err = run_args(&["fit", empty.to_str().unwrap(), "--model", "quality"]).unwrap_err();
        assert!(err.to_string().contains("no samples"));
    }
}
