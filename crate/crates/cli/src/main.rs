use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ire_core::esom::{
    evaluate, read_dataset, read_verdicts, two_class_dataset, write_dataset, write_verdicts, Class, Detector,
    SomConfig,
};
use ire_core::security::{run_security_suite, SecurityConfig};
use ire_core::sim::{run_scenario, ScenarioConfig};

/// Intrusion response for ad hoc networks: simulation, detector and
/// protocol property suites.
#[derive(Parser, Debug)]
#[command(name = "ire", version)]
struct Cli {
    /// Master seed; mandatory for `simulate`, `train` and `generate`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the scenario sweep; writes metrics.csv and trace.csv.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check key secrecy, key independence, forward and backward secrecy and
    /// replay resistance. Exits 2 when a goal fails.
    AttackSuite {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the verdict table here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Divide every trial count by this factor.
        #[arg(long, default_value_t = 1)]
        scale_down: usize,
        /// Accept stale nonces (negative control).
        #[arg(long, hide = true)]
        no_nonce_check: bool,
    },
    /// Write a synthetic labeled two-class dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Attack shift in baseline standard deviations.
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.5)]
        attack_fraction: f64,
    },
    /// Train a detector on a labeled dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        som: SomArgs,
        /// Also write the U-matrix heights as CSV.
        #[arg(long)]
        umatrix: Option<PathBuf>,
    },
    /// Classify a dataset with a trained model.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Verdict CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score verdicts against the labels of a dataset.
    Evaluate {
        #[arg(long)]
        verdicts: PathBuf,
        /// Labeled dataset the verdicts were produced from.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SomArgs {
    /// Scenario config to take som_rows, som_cols, som_epochs and
    /// hill_quantile from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hill_quantile: Option<f64>,
}

/// Any failure that is not a property-suite verdict.
struct Failure(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn need_seed(seed: Option<u64>, cmd: &str) -> Result<u64> {
    seed.with_context(|| format!("`{cmd}` needs an explicit --seed"))
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ScenarioConfig::parse(&text).with_context(|| format!("{}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = load_config(&config)?;
            let seed = need_seed(cli.seed.or(cfg.seed), "simulate")?;
            let report = run_scenario(&cfg, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("metrics.csv"), report.metrics_csv())?;
            fs::write(out.join("trace.csv"), report.trace_csv())?;
            println!("{} rows written to {}", report.rows.len(), out.join("metrics.csv").display());
        }
        Command::AttackSuite {
            config,
            out,
            scale_down,
            no_nonce_check,
        } => {
            let mut sc = SecurityConfig::default();
            if let Some(p) = config {
                let cfg = load_config(&p)?;
                sc.suite = cfg.suite;
                sc.seed = cfg.seed.unwrap_or(sc.seed);
            }
            sc.seed = cli.seed.unwrap_or(sc.seed);
            if scale_down == 0 {
                return Err(anyhow::anyhow!("--scale-down must be positive").into());
            }
            for n in [
                &mut sc.scan_epochs,
                &mut sc.replay_trials,
                &mut sc.leaver_trials,
                &mut sc.joiner_trials,
                &mut sc.independence_trials,
            ] {
                *n = (*n / scale_down).max(1);
            }
            sc.options.verify_nonces = !no_nonce_check;
            let report = run_security_suite(&sc);
            print!("{report}");
            if let Some(p) = out {
                fs::write(&p, report.to_string()).with_context(|| format!("writing {}", p.display()))?;
            }
            if !report.all_passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Generate {
            out,
            samples,
            separation,
            attack_fraction,
        } => {
            let seed = need_seed(cli.seed, "generate")?;
            if !(separation.is_finite() && separation >= 0.0) {
                return Err(anyhow::anyhow!("--separation must be a non-negative number").into());
            }
            if !(0.0..=1.0).contains(&attack_fraction) {
                return Err(anyhow::anyhow!("--attack-fraction must lie in [0, 1]").into());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = two_class_dataset(samples, separation, attack_fraction, &mut rng);
            let mut w = create(&out)?;
            write_dataset(&mut w, &data)?;
            w.flush()?;
        }
        Command::Train { data, out, som, umatrix } => {
            let seed = need_seed(cli.seed, "train")?;
            let cfg = som_config(&som)?;
            let samples = read_dataset(open(&data)?).with_context(|| format!("{}", data.display()))?;
            if samples.is_empty() {
                return Err(anyhow::anyhow!("{}: no samples", data.display()).into());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let det = Detector::train(&samples, &cfg, &mut rng).with_context(|| format!("{}", data.display()))?;
            fs::write(&out, det.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = umatrix {
                fs::write(&p, det.umatrix.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
            for c in det.labeling.missing_classes() {
                eprintln!("warning: no neuron is labeled {}", c.name());
            }
        }
        Command::Classify { model, data, out } => {
            let bytes = fs::read(&model).with_context(|| format!("reading {}", model.display()))?;
            let det = Detector::from_bytes(&bytes).with_context(|| format!("{}", model.display()))?;
            let samples = read_dataset(open(&data)?).with_context(|| format!("{}", data.display()))?;
            let verdicts: Vec<_> = samples.iter().map(|s| det.classify(&s.features)).collect();
            let mut w = create(&out)?;
            write_verdicts(&mut w, &verdicts)?;
            w.flush()?;
        }
        Command::Evaluate { verdicts, data, out } => {
            let v = read_verdicts(open(&verdicts)?).with_context(|| format!("{}", verdicts.display()))?;
            let samples = read_dataset(open(&data)?).with_context(|| format!("{}", data.display()))?;
            let truth: Vec<Class> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| s.label.with_context(|| format!("{}: sample {} has no label", data.display(), i + 1)))
                .collect::<Result<_>>()?;
            let ev = evaluate(&v, &truth)?;
            let na = |x: Option<f64>| x.map_or("NA".to_string(), |r| format!("{r:.6}"));
            let table = format!(
                "detection_rate,false_alarm_rate,attacks,normals,unclassified\n{},{},{},{},{}\n",
                na(ev.detection_rate),
                na(ev.false_alarm_rate),
                ev.attacks,
                ev.normals,
                ev.unclassified
            );
            print!("{table}");
            if let Some(p) = out {
                fs::write(&p, table).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn som_config(a: &SomArgs) -> Result<SomConfig> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?.som,
        None => SomConfig::default(),
    };
    if let Some(r) = a.rows {
        cfg.rows = r;
    }
    if let Some(c) = a.cols {
        cfg.cols = c;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(q) = a.hill_quantile {
        cfg.hill_quantile = q;
    }
    if let Err(e) = cfg.validate() {
        bail!(e);
    }
    Ok(cfg)
}
