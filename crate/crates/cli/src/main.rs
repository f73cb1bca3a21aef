use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use ndarray::Array2;
use rand::Rng;

use dpadmm_core::admm::rho_schedule;
use dpadmm_core::dataio::{
    format_metrics, load_agent_dir, parse_key_values, read_idx_dataset, write_agent_table,
    ExperimentConfig,
};
use dpadmm_core::federation::{partition_homogeneous, run_experiment, Algorithm};
use dpadmm_core::mechanisms::{compose_epsilon, l1_sensitivity};
use dpadmm_core::model::{AgentData, ParamMatrix, ProblemDims};
use dpadmm_core::rng::{Purpose, RngStream};
use dpadmm_core::validation::{
    calibrated_scale_on_z, empirical_dp_audit, sensitivity_corpus_check, worst_case_neighbor,
    AuditOptions, AuditSetup, AuditedStep,
};
use dpadmm_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_INCONCLUSIVE: u8 = 4;
const EXIT_CHECK_FAILED: u8 = 5;

const PATH_KEYS: [&str; 5] = [
    "train.images",
    "train.labels",
    "agents.dir",
    "test.images",
    "test.labels",
];

#[derive(Parser)]
#[command(
    name = "dpadmm",
    version,
    about = "Differentially private inexact ADMM for federated softmax regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or several seeds) and write metrics.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for metrics and metadata files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Run seeds seed, seed+1, ..., seed+repeat-1.
        #[arg(long, default_value_t = 1)]
        repeat: u64,
    },
    /// Split pooled IDX training data into per-agent tables.
    Partition {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirically audit the per-iteration privacy of one local step.
    Audit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 60)]
        bins: usize,
        #[arg(long, default_value_t = 0.1)]
        slack: f64,
        /// Multiplier on the calibrated Laplace scale (0.5 = under-scaled).
        #[arg(long = "noise_scale", default_value_t = 1.0)]
        noise_scale: f64,
        /// Audit D against itself instead of its worst-case neighbor.
        #[arg(long)]
        identical: bool,
        /// Rows of D; drawn at random (J=1, K=2) when no data is configured.
        #[arg(long, default_value_t = 20)]
        rows: usize,
        /// Also write the per-bin histogram as CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Compare the closed-form sensitivity with leave-one-out on random problems.
    SensitivityCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long = "max_rows", default_value_t = 20)]
        max_rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check a deliberately wrong formula (I - 1 in place of I).
        #[arg(long = "negative_control")]
        negative_control: bool,
    },
    /// Print the composed privacy budget T * eps_bar.
    Compose {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Configuration file plus per-key overrides; flag names are the config keys.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "algorithm")]
    algorithm: Option<String>,
    #[arg(long = "T")]
    t: Option<String>,
    #[arg(long = "eps_bar")]
    eps_bar: Option<String>,
    #[arg(long = "delta_bar")]
    delta_bar: Option<String>,
    #[arg(long = "mechanism")]
    mechanism: Option<String>,
    #[arg(long = "sigma_scale")]
    sigma_scale: Option<String>,
    #[arg(long = "rho.c1")]
    rho_c1: Option<String>,
    #[arg(long = "rho.c2")]
    rho_c2: Option<String>,
    #[arg(long = "rho.Tc")]
    rho_tc: Option<String>,
    #[arg(long = "rho.cap")]
    rho_cap: Option<String>,
    #[arg(long = "prox.a")]
    prox_a: Option<String>,
    #[arg(long = "box.B")]
    box_b: Option<String>,
    #[arg(long = "beta")]
    beta: Option<String>,
    #[arg(long = "P")]
    p: Option<String>,
    #[arg(long = "seed")]
    seed: Option<String>,
    #[arg(long = "log_every")]
    log_every: Option<String>,
    #[arg(long = "train.images")]
    train_images: Option<String>,
    #[arg(long = "train.labels")]
    train_labels: Option<String>,
    #[arg(long = "agents.dir")]
    agents_dir: Option<String>,
    #[arg(long = "test.images")]
    test_images: Option<String>,
    #[arg(long = "test.labels")]
    test_labels: Option<String>,
    #[arg(long = "bias_column")]
    bias_column: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let fields = [
            ("algorithm", &self.algorithm),
            ("T", &self.t),
            ("eps_bar", &self.eps_bar),
            ("delta_bar", &self.delta_bar),
            ("mechanism", &self.mechanism),
            ("sigma_scale", &self.sigma_scale),
            ("rho.c1", &self.rho_c1),
            ("rho.c2", &self.rho_c2),
            ("rho.Tc", &self.rho_tc),
            ("rho.cap", &self.rho_cap),
            ("prox.a", &self.prox_a),
            ("box.B", &self.box_b),
            ("beta", &self.beta),
            ("P", &self.p),
            ("seed", &self.seed),
            ("log_every", &self.log_every),
            ("train.images", &self.train_images),
            ("train.labels", &self.train_labels),
            ("agents.dir", &self.agents_dir),
            ("test.images", &self.test_images),
            ("test.labels", &self.test_labels),
            ("bias_column", &self.bias_column),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    /// File values first, then flags; relative paths in the file are taken
    /// relative to the file, relative paths on the command line to the
    /// working directory.
    fn resolve(&self, default_algorithm: Option<Algorithm>) -> Result<ExperimentConfig, Failure> {
        let mut pairs = Vec::new();
        if let Some(algorithm) = default_algorithm {
            pairs.push(("algorithm".to_string(), algorithm.to_string()));
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::config)?;
            let base = path.parent().unwrap_or(Path::new(""));
            for (k, v) in
                parse_key_values(&text, &path.display().to_string()).map_err(Failure::config)?
            {
                let v = if PATH_KEYS.contains(&k.as_str()) && Path::new(&v).is_relative() {
                    base.join(&v).display().to_string()
                } else {
                    v
                };
                pairs.push((k, v));
            }
        }
        pairs.extend(self.overrides());
        ExperimentConfig::from_pairs(&pairs).map_err(Failure::from)
    }
}

/// An error together with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }

    fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATA,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => EXIT_CONFIG,
            Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

struct LoadedData {
    agents: Vec<AgentData>,
    test: Option<AgentData>,
}

fn load_idx(images: &Path, labels: &Path) -> Result<dpadmm_core::dataio::RawDataset, Failure> {
    read_idx_dataset(images, labels).map_err(Failure::data)
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<LoadedData, Failure> {
    let data = &cfg.data;
    let test_raw = match (&data.test_images, &data.test_labels) {
        (Some(i), Some(l)) => Some(load_idx(i, l)?),
        (None, None) => None,
        _ => {
            return Err(Failure::config(anyhow!(
                "test.images and test.labels must be given together"
            )))
        }
    };
    let test_classes = test_raw.as_ref().map_or(0, |r| r.num_classes());

    let mut agents = if let Some(dir) = &data.agents_dir {
        let mut agents = load_agent_dir(dir, None).map_err(Failure::data)?;
        let k = agents[0].num_classes();
        if test_classes > k {
            // Widen the one-hot labels so the test classes fit.
            agents = agents
                .iter()
                .map(|a| {
                    AgentData::from_class_indices(
                        a.features().to_owned(),
                        &a.class_indices(),
                        test_classes,
                    )
                })
                .collect::<dpadmm_core::Result<_>>()
                .map_err(Failure::data)?;
        }
        agents
    } else {
        let (images, labels) = match (&data.train_images, &data.train_labels) {
            (Some(i), Some(l)) => (i, l),
            _ => {
                return Err(Failure::config(anyhow!(
                    "no training data: set agents.dir or both train.images and train.labels"
                )))
            }
        };
        let raw = load_idx(images, labels)?;
        let pooled = raw
            .to_agent_data(raw.num_classes().max(test_classes))
            .map_err(Failure::data)?;
        let mut rng = RngStream::auxiliary(seed, Purpose::Partition, 0);
        partition_homogeneous(&pooled, cfg.run.agents, &mut rng).map_err(Failure::data)?
    };
    let k = agents[0].num_classes();
    let mut test = test_raw
        .map(|r| r.to_agent_data(k))
        .transpose()
        .map_err(Failure::data)?;
    if cfg.bias_column {
        agents = agents.iter().map(AgentData::with_bias_column).collect();
        test = test.as_ref().map(AgentData::with_bias_column);
    }
    Ok(LoadedData { agents, test })
}

/// Absolute data paths, so a metadata file reproduces the run from anywhere.
fn absolutize(cfg: &mut ExperimentConfig) {
    let d = &mut cfg.data;
    for p in [
        &mut d.train_images,
        &mut d.train_labels,
        &mut d.agents_dir,
        &mut d.test_images,
        &mut d.test_labels,
    ]
    .into_iter()
    .flatten()
    {
        if let Ok(abs) = fs::canonicalize(&*p) {
            *p = abs;
        }
    }
}

fn cmd_run(config: &ConfigArgs, out: &Path, repeat: u64) -> Result<(), Failure> {
    let mut cfg = config.resolve(None)?;
    absolutize(&mut cfg);
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::data)?;
    let first_seed = cfg.run.seed;
    for seed in (0..repeat).map(|i| first_seed.wrapping_add(i)) {
        cfg.run.seed = seed;
        let data = load_data(&cfg, seed)?;
        info!(
            "{} with {} agents, T = {}, seed {seed}",
            cfg.run.algorithm,
            data.agents.len(),
            cfg.run.iterations
        );
        let started = Instant::now();
        let outcome = run_experiment(&cfg.run, data.agents, data.test.as_ref())?;
        let wall = started.elapsed().as_secs_f64();

        let metrics_path = out.join(format!("metrics_seed{seed}.csv"));
        fs::write(&metrics_path, format_metrics(&outcome.records))
            .with_context(|| format!("writing {}", metrics_path.display()))
            .map_err(Failure::data)?;
        let mut meta = cfg.to_config_text();
        let composed = compose_epsilon(cfg.run.privacy.eps_bar, cfg.run.iterations);
        writeln!(meta, "# composed_eps = {composed}").expect("string write");
        writeln!(meta, "# wall_time_s = {wall:.3}").expect("string write");
        let meta_path = out.join(format!("run_seed{seed}.meta"));
        fs::write(&meta_path, meta)
            .with_context(|| format!("writing {}", meta_path.display()))
            .map_err(Failure::data)?;
        match outcome.records.last() {
            Some(last) => println!(
                "seed {seed}: {} rows, final test error {:.4}, CV {:.3e}, {wall:.1}s -> {}",
                outcome.records.len(),
                last.test_error,
                last.consensus_violation,
                metrics_path.display()
            ),
            None => println!(
                "seed {seed}: T = 0, header only -> {}",
                metrics_path.display()
            ),
        }
    }
    Ok(())
}

fn cmd_partition(config: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let mut cfg = config.resolve(Some(Algorithm::ObjT))?;
    if cfg.data.agents_dir.is_some() {
        return Err(Failure::config(anyhow!(
            "partition splits pooled train.images/train.labels; agents.dir is already split"
        )));
    }
    cfg.bias_column = false;
    let data = load_data(&cfg, cfg.run.seed)?;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::data)?;
    for (p, agent) in data.agents.iter().enumerate() {
        write_agent_table(&out.join(format!("agent_{p:03}.csv")), agent).map_err(Failure::data)?;
    }
    println!(
        "wrote {} agent tables to {}",
        data.agents.len(),
        out.display()
    );
    Ok(())
}

struct AuditArgs {
    samples: usize,
    bins: usize,
    slack: f64,
    noise_scale: f64,
    identical: bool,
    rows: usize,
    histogram: Option<PathBuf>,
}

fn cmd_audit(config: &ConfigArgs, args: &AuditArgs) -> Result<u8, Failure> {
    let cfg = config.resolve(Some(Algorithm::ObjT))?;
    let run = &cfg.run;
    let seed = run.seed;
    let has_data = cfg.data.agents_dir.is_some() || cfg.data.train_images.is_some();
    let d = if has_data {
        let first = load_data(&cfg, seed)?.agents.swap_remove(0);
        let keep: Vec<usize> = (0..first.rows().min(args.rows)).collect();
        first.select_rows(&keep)
    } else {
        let mut rng = RngStream::auxiliary(seed, Purpose::Synthetic, 0);
        let x = Array2::from_shape_fn((args.rows, 1), |_| rng.random_range(0.0..1.0));
        let labels: Vec<usize> = (0..args.rows).map(|_| rng.random_range(0..2)).collect();
        AgentData::from_class_indices(x, &labels, 2).map_err(Failure::data)?
    };
    if d.is_empty() {
        return Err(Failure::data(anyhow!("audit needs at least one row")));
    }
    let dims =
        ProblemDims::from_agents(std::slice::from_ref(&d), run.beta).map_err(Failure::data)?;
    let zero = ParamMatrix::zeros(dims.features, dims.classes);
    let d_prime = if args.identical {
        d.clone()
    } else {
        worst_case_neighbor(&zero, &d, &dims)?
    };
    let eps = run.privacy.eps_bar;
    let rho = rho_schedule(1, eps, &run.schedules.rho);
    let a = run.schedules.prox_scale;
    let step = match run.algorithm {
        Algorithm::ObjT => AuditedStep::TrustRegion {
            delta: a * calibrated_scale_on_z(&d, &dims, rho, eps)?,
        },
        Algorithm::ObjP => AuditedStep::Proximal { eta: a },
        other => {
            return Err(Failure::config(anyhow!(
                "audit covers the Laplace objective mechanism (ObjP, ObjT), not {other}"
            )))
        }
    };
    let setup = AuditSetup {
        noise_multiplier: args.noise_scale,
        feasible: run.feasible,
        ..AuditSetup::centered(&d, &dims, step, rho, eps)?
    };
    let opts = AuditOptions {
        samples: args.samples,
        bins: args.bins,
        slack: args.slack,
        seed,
        ..AuditOptions::default()
    };
    let sens = l1_sensitivity(&zero, &d, &dims)?.value;
    info!(
        "auditing {} on {} rows (sensitivity {sens:.4e}, rho {rho})",
        run.algorithm,
        d.rows()
    );
    let report = empirical_dp_audit(&setup, &d, &d_prime, &dims, &opts)?;
    print!("{}", report.summary());
    if let Some(path) = &args.histogram {
        fs::write(path, report.histogram_csv())
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::data)?;
    }
    Ok(if report.inconclusive {
        EXIT_INCONCLUSIVE
    } else if report.violation {
        EXIT_CHECK_FAILED
    } else {
        0
    })
}

fn cmd_sensitivity_check(
    instances: usize,
    max_rows: usize,
    seed: u64,
    negative: bool,
) -> Result<u8, Failure> {
    let report = sensitivity_corpus_check(instances, max_rows, seed, |z, d, dims| {
        let s = l1_sensitivity(z, d, dims)?.value;
        Ok(if negative {
            s * dims.samples as f64 / (dims.samples as f64 - 1.0).max(1.0)
        } else {
            s
        })
    })?;
    println!(
        "instances = {}\nmax_relative_error = {:.3e}",
        report.instances, report.max_relative_error
    );
    Ok(if report.max_relative_error <= 1e-10 {
        0
    } else {
        EXIT_CHECK_FAILED
    })
}

fn cmd_compose(config: &ConfigArgs) -> Result<(), Failure> {
    let cfg = config.resolve(Some(Algorithm::ObjT))?;
    let (eps, t) = (cfg.run.privacy.eps_bar, cfg.run.iterations);
    println!(
        "eps_bar = {eps}\nT = {t}\ncomposed_eps = {}",
        compose_epsilon(eps, t)
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; --help and --version are not errors.
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            repeat,
        } => cmd_run(config, out, *repeat).map(|()| 0),
        Command::Partition { config, out } => cmd_partition(config, out).map(|()| 0),
        Command::Audit {
            config,
            samples,
            bins,
            slack,
            noise_scale,
            identical,
            rows,
            histogram,
        } => cmd_audit(
            config,
            &AuditArgs {
                samples: *samples,
                bins: *bins,
                slack: *slack,
                noise_scale: *noise_scale,
                identical: *identical,
                rows: *rows,
                histogram: histogram.clone(),
            },
        ),
        Command::SensitivityCheck {
            instances,
            max_rows,
            seed,
            negative_control,
        } => cmd_sensitivity_check(*instances, *max_rows, *seed, *negative_control),
        Command::Compose { config } => cmd_compose(config).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
