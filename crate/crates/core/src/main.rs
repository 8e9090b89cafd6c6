use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mondi::ensemble::{distill_bundle, Weighting};
use mondi::io::{
    read_bundle, read_pfm, read_product, write_atomic, write_bundle, write_pfm, write_product,
    write_trace, FloatMap, RunConfig,
};
use mondi::metrics::{compare_methods, density_sweep, evaluate, format_table, run_method_traced, Method, MethodRow};
use mondi::parallel::thread_pool;
use mondi::scene::SceneBundle;
use mondi::solver::solve;
use mondi::synthetic::{generate_bundle, TeacherSuite};
use mondi::{Error, Result};

/// Depth fusion from a blind ensemble of teachers, monitored by photometric
/// reprojection error.
#[derive(Parser)]
#[command(name = "mondi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted sections keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scene bundles into `OUT/scene_NNN`.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        /// complementary, disjoint, noisy or perfect.
        #[arg(long)]
        suite: Option<TeacherSuite>,
        /// Fraction of pixels carrying a sparse depth sample.
        #[arg(long)]
        density: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score and fuse the teachers of a bundle.
    Distill {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Force every teacher weight to one.
        #[arg(long)]
        no_beta: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Optimize a depth field; writes `depth.pfm` and `trace.csv`.
    Solve {
        #[arg(long)]
        bundle: PathBuf,
        /// Distillation product to supervise with. Without it the configured
        /// method runs from scratch.
        #[arg(long)]
        product: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a depth map against the bundle's ground truth.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Method name written in the table.
        #[arg(long)]
        method: Option<Method>,
        #[command(flatten)]
        common: Common,
    },
    /// Run several methods over every bundle in a directory.
    Ablate {
        #[arg(long)]
        scenes_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated densities; each scene is resampled at each.
        #[arg(long, value_delimiter = ',')]
        densities: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[command(flatten)]
        common: Common,
    },
}

fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join(mondi::io::BUNDLE_MANIFEST).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingFile(root.join("*").join(mondi::io::BUNDLE_MANIFEST)));
    }
    Ok(dirs)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            out,
            scenes,
            suite,
            density,
            common,
        } => {
            let mut config = common.load()?;
            if let Some(suite) = suite {
                config.generate.suite = suite;
            }
            if let Some(density) = density {
                config.generate.density = density;
            }
            config.validate()?;
            let bundles = (0..scenes)
                .map(|s| generate_bundle(&config.generate, config.seed.wrapping_add(s as u64)))
                .collect::<Result<Vec<_>>>()?;
            mondi::io::create_dir_all(&out)?;
            write_atomic(&out.join("config.toml"), config.to_toml()?.as_bytes())?;
            for (s, bundle) in bundles.iter().enumerate() {
                write_bundle(&out.join(format!("scene_{s:03}")), bundle)?;
            }
        }
        Command::Distill {
            bundle,
            out,
            no_beta,
            common,
        } => {
            let config = common.load()?;
            let bundle = read_bundle(&bundle)?;
            let weighting = if no_beta {
                Weighting::Uniform
            } else {
                Weighting::SparseDeviation
            };
            let mut product = distill_bundle(&bundle, &config.ensemble, weighting)?;
            product.round_to_f32();
            write_product(&out, &product)?;
        }
        Command::Solve {
            bundle,
            product,
            out,
            common,
        } => {
            let config = common.load()?;
            let bundle = read_bundle(&bundle)?;
            let (depth, trace) = match product {
                Some(dir) => solve(&bundle, &read_product(&dir)?, &config.loss, &config.solver)?,
                None => run_method_traced(&bundle, config.method, &config.run_settings(), config.seed)?,
            };
            mondi::io::create_dir_all(&out)?;
            write_pfm(&out.join("depth.pfm"), &FloatMap::from_depth(&depth))?;
            write_trace(&out.join("trace.csv"), &trace)?;
        }
        Command::Eval {
            bundle,
            depth,
            out,
            method,
            common,
        } => {
            let config = common.load()?;
            let bundle = read_bundle(&bundle)?;
            let depth = read_pfm(&depth)?.into_depth()?;
            let gt = bundle
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("bundle has no ground truth".into()))?;
            let report = evaluate(&depth, gt, config.solver.depth_range())?;
            let row = MethodRow {
                method: method.unwrap_or(config.method),
                density: bundle.sparse.valid_count() as f64 / bundle.sparse.len() as f64,
                report,
                per_scene: vec![report],
            };
            write_atomic(&out, format_table(&[row]).as_bytes())?;
        }
        Command::Ablate {
            scenes_dir,
            out,
            densities,
            methods,
            common,
        } => {
            let mut config = common.load()?;
            if let Some(d) = densities {
                config.ablate.densities = d;
            }
            if let Some(m) = methods {
                config.ablate.methods = m;
            }
            config.validate()?;
            let bundles = scene_dirs(&scenes_dir)?
                .iter()
                .map(|dir| read_bundle(dir))
                .collect::<Result<Vec<SceneBundle>>>()?;
            let settings = config.run_settings();
            let rows = if config.ablate.densities.is_empty() {
                compare_methods(&bundles, &config.ablate.methods, &settings)?
            } else {
                density_sweep(&bundles, &config.ablate.densities, &config.ablate.methods, &settings)?
            };
            write_atomic(&out, format_table(&rows).as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = thread_pool().and_then(|pool| pool.install(|| run(cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mondi: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
