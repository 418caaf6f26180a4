//! Argument parsing and subcommand dispatch for the `dice` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cli::config::{parse_seeds, DualFusion, Mode, RunConfig};
use crate::cli::eval::run_eval;
use crate::cli::fixture::{make_fixture, FixtureSpec};
use crate::cli::manifest::DatasetManifest;
use crate::error::{DiceError, Result};
use crate::image::{write_mask_pgm, ImageTensor};
use crate::prompts::{expand_templates, CategoryKind};
use crate::rng::SeededRng;
use crate::synth::{load_texture_dir, sample_pseudo_from, SynthConfig};
use crate::tta::SimLoss;

#[derive(Debug, Parser)]
#[command(name = "dice", version, about = "Zero-shot anomaly detection with paired references and test-time adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a dataset and write a metrics report.
    Eval(EvalArgs),
    /// Write pseudo-anomalous copies of every image in a manifest.
    Synth(SynthArgs),
    /// Generate the procedural test dataset.
    Fixture(FixtureArgs),
    /// Write the prompt ensemble of one class, one prompt per line.
    ExportPrompts(PromptArgs),
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    /// JSON config; flags given here override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// text, dual or dual_tta.
    #[arg(long)]
    pub mode: Option<String>,
    /// Reference images per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated seeds; ranges such as 1-6 are accepted.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lambda4: Option<f64>,
    #[arg(long)]
    pub lambda5: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Adaptation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the consistency loss.
    #[arg(long)]
    pub beta: Option<f64>,
    /// consistency or literal.
    #[arg(long)]
    pub sim_loss: Option<String>,
    /// joint or weighted.
    #[arg(long)]
    pub dual_fusion: Option<String>,
    #[arg(long)]
    pub fpr_limit: Option<f64>,
    #[arg(long)]
    pub encoder_seed: Option<u64>,
    #[arg(long)]
    pub text_seed: Option<u64>,
    /// Skip pixel-level metrics (masks become optional).
    #[arg(long)]
    pub no_pixel_metrics: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-image PGM heatmaps.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Directory for adapter weights and loss traces.
    #[arg(long)]
    pub tta_dump: Option<PathBuf>,
    /// Directory of .ppm textures for pseudo anomalies.
    #[arg(long)]
    pub textures: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub octaves: Option<u32>,
    #[arg(long)]
    pub base_res: Option<usize>,
    /// Directory of .ppm textures; procedural textures when omitted.
    #[arg(long)]
    pub textures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value = "tile")]
    pub category: String,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long = "class")]
    pub class_name: String,
    /// surface or object; inferred from the class name when omitted.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_sim_loss(s: &str) -> Result<SimLoss> {
    match s {
        "consistency" => Ok(SimLoss::Consistency),
        "literal" => Ok(SimLoss::Literal),
        other => Err(DiceError::Config(format!("unknown sim loss '{other}'"))),
    }
}

impl EvalArgs {
    /// Starts from the config file (or defaults) and applies every flag that
    /// was given.
    pub fn to_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.manifest {
            c.manifest = Some(v.clone());
        }
        if let Some(v) = &self.mode {
            c.mode = v.parse::<Mode>()?;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = &self.seeds {
            c.seeds = parse_seeds(v)?;
        }
        let lambdas = [
            (self.lambda1, &mut c.lambda1),
            (self.lambda2, &mut c.lambda2),
            (self.lambda3, &mut c.lambda3),
            (self.lambda4, &mut c.lambda4),
            (self.lambda5, &mut c.lambda5),
        ];
        for (flag, slot) in lambdas {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = &self.sim_loss {
            c.sim_loss = parse_sim_loss(v)?;
        }
        if let Some(v) = &self.dual_fusion {
            c.dual_fusion = v.parse::<DualFusion>()?;
        }
        if let Some(v) = self.fpr_limit {
            c.fpr_limit = v;
        }
        if let Some(v) = self.encoder_seed {
            c.encoder_seed = v;
        }
        if let Some(v) = self.text_seed {
            c.text_seed = v;
        }
        if self.no_pixel_metrics {
            c.pixel_metrics = false;
        }
        if let Some(v) = &self.out {
            c.out = Some(v.clone());
        }
        if let Some(v) = &self.heatmaps {
            c.heatmaps = Some(v.clone());
        }
        if let Some(v) = &self.tta_dump {
            c.tta_dump = Some(v.clone());
        }
        if let Some(v) = &self.textures {
            c.texture_dir = Some(v.clone());
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let config = args.to_config()?;
    let report = run_eval(&config)?;
    let m = &report.aggregate.mean;
    println!(
        "mode {} over {} seed(s): image AUROC {}, pixel AUROC {}, AUPRO {}",
        report.mode,
        report.seeds.len(),
        fmt_metric(m.auroc_image),
        fmt_metric(m.auroc_pixel),
        fmt_metric(m.aupro)
    );
    if config.out.is_none() {
        print!("{}", report.to_json()?);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthRecord {
    id: String,
    image: PathBuf,
    mask: PathBuf,
    opacity: f64,
}

/// Writes `<id>.ppm`, `<id>_mask.pgm` and an index `synth.json` under `out`.
/// Textures come from `pool` when it is not empty.
pub fn synthesize_manifest(
    manifest: &DatasetManifest,
    out: &Path,
    seed: u64,
    cfg: &SynthConfig,
    pool: &[ImageTensor],
) -> Result<usize> {
    std::fs::create_dir_all(out)?;
    let mut records = Vec::new();
    for (index, entry) in manifest.entries.iter().enumerate() {
        let Some(path) = &entry.image_path else {
            continue;
        };
        let image = ImageTensor::read_pnm(&manifest.resolve(path))?;
        let s = SeededRng::derive(seed, "synth", index as u64).next_u64();
        let sample = sample_pseudo_from(&image, s, cfg, pool)?;
        let image_name = PathBuf::from(format!("{}.ppm", entry.id));
        let mask_name = PathBuf::from(format!("{}_mask.pgm", entry.id));
        sample.image.write_pnm(&out.join(&image_name))?;
        write_mask_pgm(&sample.mask_pixel, &out.join(&mask_name))?;
        records.push(SynthRecord {
            id: entry.id.clone(),
            image: image_name,
            mask: mask_name,
            opacity: sample.opacity,
        });
    }
    std::fs::write(out.join("synth.json"), serde_json::to_vec_pretty(&records)?)?;
    Ok(records.len())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let mut cfg = SynthConfig::default();
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = args.octaves {
        cfg.octaves = v;
    }
    if let Some(v) = args.base_res {
        cfg.base_res = v;
    }
    let pool = match &args.textures {
        Some(dir) => load_texture_dir(dir)?,
        None => Vec::new(),
    };
    let n = synthesize_manifest(&manifest, &args.out, args.seed, &cfg, &pool)?;
    println!("wrote {n} pseudo-anomalous images to {}", args.out.display());
    Ok(())
}

fn cmd_fixture(args: &FixtureArgs) -> Result<()> {
    let spec = FixtureSpec {
        seed: args.seed,
        n_images: args.n,
        size: args.size,
        category: args.category.clone(),
    };
    let m = make_fixture(&spec, &args.out)?;
    println!("wrote {} images and {}", m.entries.len(), args.out.join("manifest.json").display());
    Ok(())
}

fn cmd_prompts(args: &PromptArgs) -> Result<()> {
    let kind = match args.kind.as_deref() {
        None => CategoryKind::for_class(&args.class_name),
        Some("surface") => CategoryKind::Surface,
        Some("object") => CategoryKind::Object,
        Some(other) => return Err(DiceError::Config(format!("unknown category kind '{other}'"))),
    };
    let set = expand_templates(&args.class_name, kind);
    set.write_text(&args.out)?;
    println!(
        "wrote {} normal and {} anomalous prompts to {}",
        set.normal_prompts.len(),
        set.anomalous_prompts.len(),
        args.out.display()
    );
    Ok(())
}

/// Runs one parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Fixture(a) => cmd_fixture(a),
        Command::ExportPrompts(a) => cmd_prompts(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
