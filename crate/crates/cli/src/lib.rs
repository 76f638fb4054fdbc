//! `svbrdf` command line: dataset generation, rendering, exposure, fitting,
//! training, evaluation and prediction.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use svbrdf_core::datagen::{build_dataset, DatasetOptions};
use svbrdf_core::eval::{evaluate_checkpoint, run_ablation, EVAL_REPORT_FILE};
use svbrdf_core::exposure::{apply_auto_exposure, ExposureParams};
use svbrdf_core::fit::{fit_inverse, FitOptions};
use svbrdf_core::image::{load_material, read_ldr_png, read_pfm, save_material, write_ldr_png, write_pfm, LdrImage};
use svbrdf_core::render::{render_flash, SceneConfig};
use svbrdf_core::train::{load_generator, predict, train, SampleSet, TrainConfig, GENERATOR_CKPT};
use svbrdf_core::{Error, SvbrdfMaps};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SVBRDF_THREADS";

#[derive(Parser, Debug)]
#[command(name = "svbrdf", version, about = "Differentiable SVBRDF toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize procedural materials and render the training and test inputs.
    GenerateDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        materials: usize,
        /// Crop resolution of the samples.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Resolution the materials are synthesized at before cropping.
        #[arg(long, default_value_t = 128)]
        source_resolution: usize,
        /// Directory of equirectangular PFM environment maps; analytic skies otherwise.
        #[arg(long)]
        env_dir: Option<PathBuf>,
    },
    /// Render a material directory under the flash to `render.pfm`.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        maps: PathBuf,
    },
    /// Auto-expose a PFM image to `exposed.png`.
    Expose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Optimize per-texel maps against a PFM flash observation.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth material directory; adds the rendering loss against it.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Initial material directory; uniform gray otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
    },
    /// Train the generator and discriminators on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on the test split; optionally run the ablation study.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `generator.ckpt` (and optionally the discriminators).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Retrain with each loss term disabled and add the ablation grid.
        #[arg(long)]
        ablation: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Predict material maps from one photograph.
    Predict {
        #[command(flatten)]
        common: Common,
        /// PNG (linear LDR) or PFM (HDR, auto-exposed first).
        #[arg(long)]
        input: PathBuf,
        /// Generator checkpoint file or the directory containing it.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small 64 px configuration instead of the full one.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// Loss terms to switch off, any of r, p, a, f.
    #[arg(long, value_delimiter = ',')]
    disable: Vec<String>,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let mut cfg = if self.toy { TrainConfig::toy() } else { TrainConfig::default() };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            cfg.apply_kv(&text).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        cfg.seed = seed;
        let opts: [(&str, Option<String>); 6] = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("steps_per_epoch", self.steps_per_epoch.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("width_scale", self.width_scale.map(|v| v.to_string())),
            ("resolution", self.resolution.map(|v| v.to_string())),
            ("lr0", self.lr0.map(|v| v.to_string())),
        ];
        for (k, v) in opts {
            if let Some(v) = v {
                cfg.set(k, &v).map_err(|e| CliError::Usage(e.to_string()))?;
            }
        }
        for term in &self.disable {
            let key = match term.trim() {
                "r" => "enable_r",
                "p" => "enable_p",
                "a" => "enable_a",
                "f" => "enable_f",
                other => return Err(CliError::Usage(format!("unknown loss term {other:?}; expected r, p, a or f"))),
            };
            cfg.set(key, "false").map_err(|e| CliError::Usage(e.to_string()))?;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool set up earlier in the same process stays in effect
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Run the command line `argv` (program name first) and return the exit code.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return EXIT_USAGE;
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error[usage]: {}", one_line(&m));
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error[runtime]: {}", one_line(&m));
            EXIT_RUNTIME
        }
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn read_input_image(path: &Path) -> Result<LdrImage, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "pfm" => Ok(apply_auto_exposure(&read_pfm(path)?, &ExposureParams::default())?),
        "png" => Ok(read_ldr_png(path)?),
        _ => Err(CliError::Usage(format!("{}: expected a .png or .pfm input", path.display()))),
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenerateDataset {
            common,
            materials,
            resolution,
            source_resolution,
            env_dir,
        } => {
            if materials == 0 || resolution == 0 || source_resolution < resolution {
                return Err(CliError::Usage(
                    "need materials > 0 and source_resolution >= resolution > 0".into(),
                ));
            }
            let opts = DatasetOptions {
                n_materials: materials,
                resolution,
                source_resolution,
                env_dir,
                ..DatasetOptions::default()
            };
            create_out(&common.out)?;
            let m = build_dataset(&opts, &common.out, common.seed)?;
            info!("wrote {} samples to {}", m.records.len(), common.out.display());
        }
        Command::Render { common, maps } => {
            let maps = load_material(&maps)?;
            create_out(&common.out)?;
            write_pfm(&common.out.join("render.pfm"), &render_flash(&maps, &SceneConfig::default()))?;
        }
        Command::Expose { common, input } => {
            let img = apply_auto_exposure(&read_pfm(&input)?, &ExposureParams::default())?;
            create_out(&common.out)?;
            write_ldr_png(&common.out.join("exposed.png"), &img)?;
        }
        Command::Fit {
            common,
            input,
            gt,
            init,
            steps,
            lr,
        } => {
            let img = read_pfm(&input)?;
            let gt = gt.map(|p| load_material(&p)).transpose()?;
            let init = match init {
                Some(p) => load_material(&p)?,
                None => SvbrdfMaps::uniform(img.width, img.height, [0.5; 3], [0.0, 0.0, 1.0], 0.5, 0.0)?,
            };
            let opts = FitOptions {
                steps,
                lr,
                seed: common.seed,
                ..FitOptions::default()
            };
            let fit = fit_inverse(&img, &init, gt.as_ref(), &opts)?;
            create_out(&common.out)?;
            save_material(&common.out, &fit.maps)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in fit.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            let path = common.out.join("fit_losses.csv");
            fs::write(&path, csv).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        Command::Train { common, train: args } => {
            let cfg = args.config(common.seed)?;
            train(&cfg, &args.dataset, &common.out)?;
        }
        Command::Eval {
            common,
            checkpoint,
            ablation,
            train: args,
        } => {
            let cfg = args.config(common.seed)?;
            if checkpoint.is_none() && !ablation {
                return Err(CliError::Usage("eval needs --checkpoint, --ablation or both".into()));
            }
            create_out(&common.out)?;
            let runs = common.out.join("runs");
            let table = if ablation {
                let (train_set, test_set) = load_splits(&args.dataset)?;
                Some(run_ablation(&cfg, &train_set, &test_set, &runs, None, common.seed)?)
            } else {
                None
            };
            let dir = checkpoint.unwrap_or_else(|| runs.join("proposed"));
            let mut report = evaluate_checkpoint(&dir, &args.dataset, &cfg.scene, common.seed)?;
            report.ablation = table;
            if let Some(t) = &report.ablation {
                let md = t.to_markdown()?;
                let path = common.out.join("ablation.md");
                fs::write(&path, md).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            }
            report.write_json(&common.out.join(EVAL_REPORT_FILE))?;
        }
        Command::Predict {
            common,
            input,
            checkpoint,
        } => {
            let ckpt = if checkpoint.is_dir() { checkpoint.join(GENERATOR_CKPT) } else { checkpoint };
            let gen = load_generator(&ckpt)?;
            let img = read_input_image(&input)?;
            let maps = predict(&gen, &img)?;
            create_out(&common.out)?;
            save_material(&common.out, &maps)?;
        }
    }
    Ok(())
}

fn load_splits(root: &Path) -> Result<(SampleSet<f32>, SampleSet<f32>), CliError> {
    use svbrdf_core::datagen::{DatasetManifest, Split, MANIFEST_FILE};
    let m = DatasetManifest::read(&root.join(MANIFEST_FILE))?;
    Ok((SampleSet::load(root, &m, Split::Train)?, SampleSet::load(root, &m, Split::Test)?))
}
