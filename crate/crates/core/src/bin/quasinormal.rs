use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use quasinormal::config::{Method, RunConfig};
use quasinormal::decomp::{decompose, iterative_regularize, DecompProblem};
use quasinormal::experiment::{self, read_image_dir, write_atomic, Experiment};
use quasinormal::pca::{build_basis, impute_population, PcaBasis};
use quasinormal::pfg;
use quasinormal::pipeline::{report_csv, run_pipeline, Decomposer, PipelineParams, Registrar};
use quasinormal::rpca::{rpca, DataMatrix};
use quasinormal::{Error, Result};

#[derive(Parser)]
#[command(
    name = "quasinormal",
    version,
    about = "Quasi-normal reconstruction and atlas registration experiments"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// First case seed (overrides data.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    /// Config override `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the atlas, normal population and test cases.
    Synth,
    /// Build the PCA basis from a directory of images.
    BuildBasis {
        /// Defaults to the population written by `synth`.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Fill masked voxels of a population from the unmasked images.
    Impute {
        #[arg(long)]
        images: PathBuf,
        /// One mask per image, same file-name order.
        #[arg(long)]
        masks: PathBuf,
    },
    /// Split one image into quasi-normal and abnormal parts.
    Decompose {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Regularization steps (ROF only).
        #[arg(long, default_value_t = 0)]
        steps: usize,
    },
    /// Low-rank plus sparse split of a directory of images.
    Rpca {
        #[arg(long)]
        images: PathBuf,
        /// Defaults to solver.lambda.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Register `moving` to `fixed`.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        /// Fixed-space voxels with value 1 are ignored by the similarity.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output field; defaults to `<out>/field.pfg`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Alternating registration and decomposition of one image.
    Pipeline {
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "pca1")]
        method: Method,
        /// Basis directory (PCA arms).
        #[arg(long)]
        basis: Option<PathBuf>,
        /// Atlas-space population directory (rpca arm).
        #[arg(long)]
        population: Option<PathBuf>,
    },
    /// Score stored fields and write errors.csv.
    Evaluate,
    /// Cross-validate gamma or lambda and write cv.csv.
    Crossval,
    /// Run every stage and write the manifest.
    Run,
    /// Verify a manifest and summarise the run.
    Report {
        /// Defaults to `<out>/manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.data.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config {
                line: 0,
                message: format!("threads: {e}"),
            })?;
    }
    let out = cli.out;
    std::fs::create_dir_all(&out)?;
    let exp = Experiment::new(out.clone(), config.clone());
    match cli.command {
        Command::Synth => {
            exp.synth()?;
            log::info!(
                "wrote {} cases under {}",
                config.data.cases,
                out.join("synth").display()
            );
        }
        Command::BuildBasis { images } => {
            let images = match images {
                Some(dir) => read_image_dir(&dir)?,
                None => read_image_dir(&out.join("synth").join("population"))?,
            };
            let basis = build_basis(&images, config.basis.modes)?;
            basis.save(&out.join("basis"))?;
            log::info!(
                "basis with {} modes in {}",
                basis.k(),
                out.join("basis").display()
            );
        }
        Command::Impute { images, masks } => {
            let filled = impute_population(
                &read_image_dir(&images)?,
                &read_image_dir(&masks)?,
                config.basis.impute_fallback,
            )?;
            let dir = out.join("imputed");
            std::fs::create_dir_all(&dir)?;
            for (i, img) in filled.iter().enumerate() {
                pfg::write_grid(&dir.join(format!("img_{i:04}.pfg")), img)?;
            }
        }
        Command::Decompose {
            basis,
            image,
            steps,
        } => decompose_cmd(&config, &out, &basis, &image, steps)?,
        Command::Rpca { images, lambda } => rpca_cmd(&config, &out, &images, lambda)?,
        Command::Register {
            moving,
            fixed,
            mask,
            output,
        } => {
            let mut params = config.registration.reg_params();
            params.mask = mask.map(|m| pfg::read_grid(&m)).transpose()?;
            let moving = pfg::read_grid(&moving)?;
            let fixed = pfg::read_grid(&fixed)?;
            let field = if params.mask.is_none() && !config.external.command_template.is_empty() {
                Registrar::External(config.external.command_template.clone())
                    .run(&moving, &fixed)?
            } else {
                quasinormal::registration::register(&moving, &fixed, &params)?
            };
            field.save(&output.unwrap_or_else(|| out.join("field.pfg")))?;
        }
        Command::Pipeline {
            atlas,
            image,
            method,
            basis,
            population,
        } => pipeline_cmd(&config, &out, &atlas, &image, method, basis, population)?,
        Command::Evaluate => {
            let reports = exp.evaluate()?;
            log::info!(
                "{} reports in {}",
                reports.len(),
                out.join(experiment::ERRORS).display()
            );
        }
        Command::Crossval => {
            let cv = exp.crossval()?;
            println!(
                "best {} = {}",
                if config.evaluate.cv_method == Method::Rpca {
                    "lambda"
                } else {
                    "gamma"
                },
                cv.best_param
            );
        }
        Command::Run => {
            let manifest = exp.run()?;
            log::info!(
                "{} files recorded in {}",
                manifest.digests.len(),
                out.join(experiment::MANIFEST).display()
            );
        }
        Command::Report { manifest } => {
            let summary =
                experiment::report(&manifest.unwrap_or_else(|| out.join(experiment::MANIFEST)))?;
            print!("{}", summary.text);
        }
    }
    Ok(())
}

fn decompose_cmd(
    config: &RunConfig,
    out: &Path,
    basis: &Path,
    image: &Path,
    steps: usize,
) -> Result<()> {
    let basis = PcaBasis::load(basis)?;
    let image = pfg::read_grid(image)?;
    let problem = DecompProblem {
        variant: config.solver.variant,
        solver: config.solver.solver_params(),
        ..DecompProblem::new(&basis, &image, config.solver.gamma)
    };
    let res = if steps > 0 {
        iterative_regularize(&problem, steps)?
    } else {
        decompose(&problem)?
    };
    pfg::write_grid(&out.join("quasi_normal.pfg"), &res.quasi_normal)?;
    pfg::write_grid(&out.join("abnormal.pfg"), &res.abnormal)?;
    let mut alpha = String::from("mode,alpha\n");
    for (l, a) in res.alpha.as_slice().iter().enumerate() {
        let _ = writeln!(alpha, "{l},{a}");
    }
    write_atomic(&out.join("alpha.csv"), alpha.as_bytes())?;
    let mut trace = String::from("solve,iteration,objective\n");
    for (s, solve) in res.solves.iter().enumerate() {
        for (i, e) in solve.energy_trace.iter().enumerate() {
            let _ = writeln!(trace, "{s},{},{e}", i + 1);
        }
    }
    write_atomic(&out.join("trace.csv"), trace.as_bytes())?;
    if !res.converged {
        log::warn!("solver stopped at max_iter before meeting the tolerance");
    }
    Ok(())
}

fn rpca_cmd(config: &RunConfig, out: &Path, images: &Path, lambda: Option<f64>) -> Result<()> {
    let grids = read_image_dir(images)?;
    let d = DataMatrix::from_images(&grids)?;
    let start = Instant::now();
    let res = rpca(
        &d,
        lambda.unwrap_or(config.solver.lambda),
        &config.solver.alm_params(),
    )?;
    let seconds = start.elapsed().as_secs_f64();
    for (name, matrix) in [("lowrank", &res.low_rank), ("sparse", &res.sparse)] {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        for (j, g) in grids.iter().enumerate() {
            let column = g.with_data(matrix.column(j).iter().copied().collect());
            pfg::write_grid(&dir.join(format!("img_{j:04}.pfg")), &column)?;
        }
    }
    let report = format!(
        "iterations,residual,rank_est,peak_bytes,wall_seconds\n{},{},{},{},{:.6}\n",
        res.iterations, res.residual, res.rank_est, res.peak_bytes, seconds
    );
    write_atomic(&out.join("rpca_report.csv"), report.as_bytes())
}

fn pipeline_cmd(
    config: &RunConfig,
    out: &Path,
    atlas: &Path,
    image: &Path,
    method: Method,
    basis: Option<PathBuf>,
    population: Option<PathBuf>,
) -> Result<()> {
    let missing = |what: &str| Error::Config {
        line: 0,
        message: format!("--{what} is required for method {}", method.id()),
    };
    let atlas = pfg::read_grid(atlas)?;
    let image = pfg::read_grid(image)?;
    let registrar = if config.external.command_template.is_empty() {
        Registrar::Builtin(config.registration.reg_params())
    } else {
        Registrar::External(config.external.command_template.clone())
    };
    let (basis, population) = match method {
        Method::Direct => return registrar.run(&atlas, &image)?.save(&out.join("field.pfg")),
        Method::Masked => {
            return Err(Error::Invalid(
                "the masked arm needs a tumor mask; use `register --mask`".into(),
            ))
        }
        Method::Rpca => {
            let mut p = read_image_dir(&population.ok_or_else(|| missing("population"))?)?;
            p.truncate(config.solver.lrs_population);
            (None, p)
        }
        _ => (
            Some(PcaBasis::load(&basis.ok_or_else(|| missing("basis"))?)?),
            Vec::new(),
        ),
    };
    let decomposer = match &basis {
        None => Decomposer::Lrs {
            population: &population,
            lambda: config.solver.lambda,
            alm: config.solver.alm_params(),
        },
        Some(basis) => Decomposer::Pca {
            basis,
            gamma: config.solver.gamma,
            reg_steps: method.reg_steps().expect("pca arm"),
            solver: config.solver.solver_params(),
        },
    };
    let params = PipelineParams {
        alternations: config.registration.alternations,
        registrar,
        inverse_iterations: config.registration.inverse_iterations,
    };
    let res = run_pipeline(&atlas, &image, &decomposer, &params)?;
    res.field.save(&out.join("field.pfg"))?;
    pfg::write_grid(&out.join("quasi_normal.pfg"), &res.quasi_normal)?;
    pfg::write_grid(&out.join("abnormal.pfg"), &res.abnormal)?;
    write_atomic(
        &out.join("pipeline_report.csv"),
        report_csv(&res.per_iter).as_bytes(),
    )
}
