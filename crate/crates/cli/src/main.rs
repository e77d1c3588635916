use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orwdro::conic::Domain;
use orwdro::experiments::{run_experiment, write_outputs, ExperimentConfig};
use orwdro::losses::LossFamily;
use orwdro::measures::{write_weighted, Dataset, DiscreteMeasure, GroundCost, Order};
use orwdro::reformulate::{
    build_inner_dual, evaluate_inner, extract_worst_case, joint_fit, worst_case, AmbiguitySpec, MomentFamily, SamplePieces,
};
use orwdro::robust_ot::{rwp_one_sided, rwp_two_sided};
use orwdro::robust_stats::{iterative_filter, trimmed_mean, FilterOptions, TrimSpec};
use orwdro::simulate::{
    clean_count, corrupt_classification, corrupt_multiregression, corrupt_regression, corrupt_setting_b, corrupt_setting_b_prime,
    gaussian_sample, CorruptionPlanB, OutlierSpec, RegressionCorruption, Simulation,
};

#[derive(Parser)]
#[command(name = "orwdro", version, about = "Outlier-robust Wasserstein DRO")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Outlier-robust Wasserstein distance between two datasets.
    Rwp {
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        nu: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[arg(long, default_value_t = 1)]
        p: u32,
        /// RW_p(mu ‖ nu): only mu may drop mass.
        #[arg(long)]
        one_sided: bool,
    },
    /// Robust mean of a dataset.
    Mean {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MeanMethod::Trimmed)]
        method: MeanMethod,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        /// Stop filtering once λmax is at most this.
        #[arg(long, default_value_t = 9.0)]
        threshold: f64,
    },
    /// Inner worst-case value at a fixed θ.
    Eval {
        #[command(flatten)]
        problem: Problem,
        /// Comma-separated θ.
        #[arg(long, allow_hyphen_values = true)]
        theta: String,
        /// Write the dual program in text form to this file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Minimize the inner worst case over θ.
    Fit {
        #[command(flatten)]
        problem: Problem,
    },
    /// Worst-case distribution at a fixed θ, as CSV with a weight column.
    WorstCase {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, allow_hyphen_values = true)]
        theta: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a clean/corrupted dataset pair.
    Simulate(SimulateArgs),
    /// Run an experiment config and write results.csv, results.dat, meta.json.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MeanMethod {
    Trimmed,
    Filter,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    G2,
    Gcov,
}

#[derive(Args)]
struct Problem {
    #[arg(long)]
    data: PathBuf,
    /// mad, hinge, l1-multiregression, or a JSON loss file.
    #[arg(long)]
    loss: String,
    /// Outputs for l1-multiregression.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    p: u32,
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = FamilyArg::G2)]
    family: FamilyArg,
    /// A number or `inf`.
    #[arg(long, default_value = "inf")]
    sigma: String,
    /// trimmed, filter, origin, or a CSV file holding one row.
    #[arg(long, default_value = "trimmed")]
    z0: String,
    /// Box domain for the transported block: `lo,hi` applied per coordinate.
    #[arg(long, allow_hyphen_values = true)]
    r#box: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimTask {
    SettingB,
    SettingBPrime,
    Regression,
    Classification,
    Multiregression,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    task: SimTask,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Corruption scale for regression.
    #[arg(long, default_value_t = 8.0)]
    c: f64,
    #[arg(long, default_value_t = 1)]
    p: u32,
    /// Outliers sit at this distance along e₁ (settings B and B′).
    #[arg(long, default_value_t = 1e3)]
    outlier_distance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// `x` with ten significant digits.
fn sig10(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..15).contains(&mag) {
        format!("{:.*}", (9 - mag).max(0) as usize, x)
    } else {
        format!("{x:.9e}")
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?}")))
        .collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| sig10(*x)).collect::<Vec<_>>().join(",")
}

fn load(path: &Path) -> Result<(Dataset, DiscreteMeasure)> {
    let ds = Dataset::load(path).with_context(|| format!("reading {}", path.display()))?;
    let m = ds.to_measure()?;
    Ok((ds, m))
}

fn order(p: u32) -> Result<Order> {
    Ok(Order::from_int(p)?)
}

struct Prepared {
    family: LossFamily,
    data: DiscreteMeasure,
    spec: AmbiguitySpec,
}

fn prepare(pr: &Problem) -> Result<Prepared> {
    let (ds, data) = load(&pr.data)?;
    let d = ds.dim();
    let family = match pr.loss.as_str() {
        "mad" => LossFamily::mad(d - 1, ds.mask.clone())?,
        "hinge" => {
            let f = LossFamily::hinge(d - 1)?;
            if f.mask != ds.mask {
                bail!("hinge loss needs the label (last column) pinned: add `# transported: 1,...,1,0`");
            }
            f
        }
        "l1-multiregression" => {
            let k = pr.k.context("--k is required for l1-multiregression")?;
            if k >= d {
                bail!("--k {k} leaves no features in a {d}-column dataset");
            }
            LossFamily::l1_multiregression(d - k, k, ds.mask.clone())?
        }
        file => LossFamily::load_json(file).with_context(|| format!("loading loss {file}"))?,
    };
    if family.dim() != d {
        bail!("loss expects {} columns, dataset has {d}", family.dim());
    }
    let sigma = if pr.sigma == "inf" {
        f64::INFINITY
    } else {
        pr.sigma.parse().with_context(|| format!("bad sigma {:?}", pr.sigma))?
    };
    let z0 = if sigma.is_finite() {
        match pr.z0.as_str() {
            "trimmed" => trimmed_mean(&data, TrimSpec::default())?.into_vec(),
            "filter" => iterative_filter(&data, pr.eps.min(1.0 / 12.0), &FilterOptions::default())?
                .0
                .into_vec(),
            "origin" => vec![0.0; d],
            file => {
                let z = Dataset::load(file).with_context(|| format!("reading z0 from {file}"))?;
                z.rows.into_iter().next().context("empty z0 file")?
            }
        }
    } else {
        Vec::new()
    };
    let family_kind = match pr.family {
        FamilyArg::G2 => MomentFamily::G2,
        FamilyArg::Gcov => MomentFamily::Gcov,
    };
    let mut spec = AmbiguitySpec::new(order(pr.p)?, pr.eps, pr.rho, family_kind, sigma, z0);
    if let Some(b) = &pr.r#box {
        let v = parse_list(b)?;
        if v.len() != 2 {
            bail!("--box takes lo,hi");
        }
        let t = ds.mask.num_transported();
        spec = spec.with_domain(Domain::Box {
            lower: vec![v[0]; t],
            upper: vec![v[1]; t],
        });
    }
    Ok(Prepared { family, data, spec })
}

fn simulate(a: &SimulateArgs) -> Result<(Simulation, serde_json::Value)> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let p = order(a.p)?;
    let plan_b = || CorruptionPlanB::new(a.rho, a.eps, p, OutlierSpec::far_along_e1(a.d, a.outlier_distance));
    let sim = match a.task {
        SimTask::SettingB => {
            let clean = gaussian_sample(&mut rng, a.n, a.d)?;
            let plan = plan_b();
            (corrupt_setting_b(&clean, &plan, &mut rng)?, serde_json::to_value(&plan)?)
        }
        SimTask::SettingBPrime => {
            let clean = gaussian_sample(&mut rng, clean_count(a.n, a.eps), a.d)?;
            let plan = plan_b();
            (
                corrupt_setting_b_prime(&clean, a.n, &plan, &mut rng)?,
                serde_json::to_value(&plan)?,
            )
        }
        SimTask::Regression => {
            let plan = RegressionCorruption {
                c: a.c,
                rho: a.rho,
                eps: a.eps,
            };
            (corrupt_regression(a.n, a.d, &plan, &mut rng)?, serde_json::to_value(plan)?)
        }
        SimTask::Classification => (
            corrupt_classification(a.n, a.d, a.rho, a.eps, &mut rng)?,
            serde_json::json!({"task": "classification", "rho": a.rho, "eps": a.eps}),
        ),
        SimTask::Multiregression => (
            corrupt_multiregression(a.n, a.d, a.k, a.rho, a.eps, &mut rng)?,
            serde_json::json!({"task": "multiregression", "k": a.k, "rho": a.rho, "eps": a.eps}),
        ),
    };
    Ok(sim)
}

fn run(cli: Cli) -> Result<()> {
    let mut out = io::stdout().lock();
    match cli.cmd {
        Cmd::Rwp {
            mu,
            nu,
            eps,
            p,
            one_sided,
        } => {
            let (a, ma) = load(&mu)?;
            let (b, mb) = load(&nu)?;
            if a.mask != b.mask {
                bail!("datasets have different transport masks");
            }
            let cost = GroundCost {
                p: order(p)?,
                mask: a.mask,
            };
            let v = if one_sided {
                rwp_one_sided(&ma, &mb, eps, &cost)?
            } else {
                rwp_two_sided(&ma, &mb, eps, &cost)?
            };
            writeln!(out, "{}", sig10(v))?;
        }
        Cmd::Mean {
            data,
            method,
            gamma,
            eps,
            threshold,
        } => {
            let (_, m) = load(&data)?;
            let z = match method {
                MeanMethod::Trimmed => trimmed_mean(&m, TrimSpec { gamma })?,
                MeanMethod::Filter => {
                    let opts = FilterOptions {
                        threshold,
                        ..FilterOptions::default()
                    };
                    iterative_filter(&m, eps, &opts)?.0
                }
            };
            writeln!(out, "{}", join(z.coords()))?;
        }
        Cmd::Eval { problem, theta, dump } => {
            let pr = prepare(&problem)?;
            let theta = parse_list(&theta)?;
            if let Some(path) = dump {
                let pieces = SamplePieces::from_family(&pr.family, &theta, &pr.data)?;
                fs::write(&path, build_inner_dual(&pieces, &pr.data, &pr.spec)?.program.dump())?;
            }
            let v = evaluate_inner(&pr.family, &theta, &pr.data, &pr.spec)?;
            writeln!(out, "{}", sig10(v))?;
        }
        Cmd::Fit { problem } => {
            let pr = prepare(&problem)?;
            let fit = joint_fit(&pr.family, &pr.data, &pr.spec)?;
            writeln!(out, "theta = {}", join(&fit.theta))?;
            writeln!(out, "value = {}", sig10(fit.value))?;
        }
        Cmd::WorstCase {
            problem,
            theta,
            out: path,
        } => {
            let pr = prepare(&problem)?;
            let theta = parse_list(&theta)?;
            let pieces = SamplePieces::from_family(&pr.family, &theta, &pr.data)?;
            let sol = worst_case(&pieces, &pr.data, &pr.spec)?;
            let nu = extract_worst_case(&sol)?;
            eprintln!("worst-case value {}", sig10(sol.value));
            match path {
                Some(p) => write_weighted(&nu, &pr.family.mask, fs::File::create(p)?)?,
                None => write_weighted(&nu, &pr.family.mask, &mut out)?,
            }
        }
        Cmd::Simulate(a) => {
            let (sim, plan) = simulate(&a)?;
            fs::create_dir_all(&a.out_dir)?;
            Dataset::from_measure(&sim.clean, sim.mask.clone()).save(a.out_dir.join("clean.csv"))?;
            Dataset::from_measure(&sim.corrupted, sim.mask.clone()).save(a.out_dir.join("corrupted.csv"))?;
            let meta = serde_json::to_string_pretty(&sim.meta(a.seed, plan))?;
            fs::write(a.out_dir.join("meta.json"), meta)?;
            if sim.budget.passed() == Some(false) {
                bail!("budget check failed: {:?}", sim.budget);
            }
        }
        Cmd::Experiment { config, out: dir } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let rows = run_experiment(&cfg)?;
            write_outputs(&rows, &cfg, &dir)?;
            writeln!(out, "wrote {} rows to {}", rows.len(), dir.display())?;
        }
    }
    Ok(())
}
