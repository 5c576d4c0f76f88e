//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::cam::{self, PseudoMask};
use crate::config::{default_config, RunConfig};
use crate::data::{load_corpus, read_gray, read_rgb, ClassCatalog, LabeledImage, CLASSES_FILE, IMAGES_DIR};
use crate::encoder::{load_encoder, DualEncoder};
use crate::error::{bail, Error, Result};
use crate::masking::MaskGenerator;
use crate::prompts::PromptBank;
use crate::synth;
use crate::trainer::{self, Phase, PhasePlan, StepRecord, TrainOptions};

pub const SEED_ENV: &str = "SEMPLES_SEED";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const CAMS_DIR: &str = "cams";
pub const CAM_EXT: &str = "cam";

#[derive(Debug, Parser)]
#[command(name = "semples", version, about = "Weakly-supervised segmentation with learned background prompts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the mask generator with the matching loss.
    TrainMatch(TrainArgs),
    /// Train background prompts against a frozen generator.
    TrainPrompts(TrainArgs),
    /// Refine the generator with the learned prompts.
    TrainRefine(TrainArgs),
    /// Run all three training phases in order.
    TrainAll(TrainArgs),
    /// Threshold CAMs into pseudo masks and score them against ground truth.
    Eval(EvalArgs),
    /// Render the patch similarity of a background prompt over an image.
    Visualize(VisualizeArgs),
    /// Generate the synthetic corpus used for quick experiments.
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Preset the configuration starts from (voc, coco, toy).
    #[arg(long, default_value = "toy")]
    pub dataset: String,
    /// File of key=value lines applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed used when no override sets one.
    #[arg(long, env = SEED_ENV, hide_env_values = true)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = default_config(&self.dataset).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        for o in &self.overrides {
            config.apply_assignment(o)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Corpus directory with labels.tsv, classes.txt and images/.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Encoder checkpoint; defaults to encoder.json inside the corpus.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Output directory for checkpoints, logs and CAMs.
    #[arg(long)]
    pub out: PathBuf,
    /// Mask generator checkpoint from an earlier phase.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Prompt bank checkpoint from phase B.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of .cam files.
    #[arg(long)]
    pub cams: PathBuf,
    /// Directory of ground-truth class maps (<id>.png, 255 = ignore).
    #[arg(long)]
    pub truth: PathBuf,
    /// Minimum CAM score for a foreground label.
    #[arg(long, default_value_t = cam::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Class list; defaults to classes.txt inside the CAM directory.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Report path; the report goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory to write the pseudo masks into.
    #[arg(long)]
    pub masks_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    /// Prompt bank checkpoint (.semp).
    #[arg(long)]
    pub bank: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    pub encoder: PathBuf,
    /// Class list the bank was trained with.
    #[arg(long)]
    pub classes: PathBuf,
    /// RGB image to analyse.
    #[arg(long)]
    pub image: PathBuf,
    /// Class name whose prompt is rendered.
    #[arg(long = "class")]
    pub class: String,
    /// Output PNG; a .f32 sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    /// Directory to write the corpus, ground truth and encoder into.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = SEED_ENV, default_value_t = 0, hide_env_values = true)]
    pub seed: u64,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainMatch(a) => train(&a, &[Phase::Match]),
        Command::TrainPrompts(a) => train(&a, &[Phase::Prompt]),
        Command::TrainRefine(a) => train(&a, &[Phase::Refine]),
        Command::TrainAll(a) => train(&a, &Phase::ALL),
        Command::Eval(a) => eval(&a),
        Command::Visualize(a) => visualize(&a),
        Command::MakeToy(a) => {
            let samples = synth::make_toy_corpus(&a.out, a.seed)?;
            log::info!("wrote {} toy samples to {}", samples.len(), a.out.display());
            Ok(())
        }
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!(Data, "{what} directory {} does not exist", path.display());
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!(Data, "{what} {} does not exist", path.display());
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(args: &TrainArgs, phases: &[Phase]) -> Result<()> {
    let config = args.config.resolve()?;
    require_dir(&args.corpus, "corpus")?;
    let classes_path = args.corpus.join(CLASSES_FILE);
    require_file(&classes_path, "class list")?;
    let encoder_path = args.encoder.clone().unwrap_or_else(|| args.corpus.join(synth::ENCODER_FILE));
    require_file(&encoder_path, "encoder checkpoint")?;

    let first = phases[0];
    if first != Phase::Match && args.generator.is_none() {
        bail!(
            Data,
            "phase {} needs a generator checkpoint from phase A (pass --generator)",
            first.tag()
        );
    }
    if first == Phase::Refine && args.bank.is_none() {
        bail!(Data, "phase C_refine needs a prompt bank checkpoint from phase B (pass --bank)");
    }
    for (p, what) in [(&args.generator, "generator checkpoint"), (&args.bank, "prompt bank checkpoint")] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }

    let catalog = ClassCatalog::from_file(&classes_path)?;
    let encoder = load_encoder(&encoder_path)?;
    let corpus = load_corpus(&args.corpus, &catalog)?;
    let (mut gen, mut bank) = trainer::initial_state(&catalog, encoder.as_ref(), &config)?;
    if let Some(p) = &args.generator {
        let (g, manifest) = MaskGenerator::load(p)?;
        if manifest.classes != catalog.names() {
            bail!(Data, "{}: generator was trained for classes {:?}", p.display(), manifest.classes);
        }
        gen = g;
    }
    if let Some(p) = &args.bank {
        bank = PromptBank::load(p, &catalog)?;
    }

    create_dir(&args.out)?;
    write_text(&args.out.join(CONFIG_FILE), &config.to_kv_string())?;
    let options = TrainOptions {
        checkpoint_dir: Some(args.out.join("checkpoints")),
    };
    let mut logs: Vec<StepRecord> = Vec::new();
    for &phase in phases {
        let plan = PhasePlan::from_config(phase, &config);
        logs.extend(trainer::run_phase(
            &plan,
            &corpus,
            &mut gen,
            &mut bank,
            encoder.as_ref(),
            &catalog,
            &config,
            &options,
        )?);
        let path = trainer::write_checkpoint(&args.out, phase, None, &gen, &bank, &catalog, &config)?;
        log::info!("phase {} done, wrote {}", phase.tag(), path.display());
    }
    write_text(&args.out.join(LOG_FILE), &trainer::logs_to_jsonl(&logs))?;
    if phases.contains(&Phase::Match) || phases.contains(&Phase::Refine) {
        write_all_cams(&args.out.join(CAMS_DIR), &gen, &corpus, &catalog)?;
    }
    Ok(())
}

/// CAMs for every sample, one container per image, plus the class list.
pub fn write_all_cams(dir: &Path, gen: &MaskGenerator, corpus: &[LabeledImage], catalog: &ClassCatalog) -> Result<()> {
    use rayon::prelude::*;
    create_dir(dir)?;
    catalog.write_file(&dir.join(CLASSES_FILE))?;
    corpus.par_iter().try_for_each(|s| {
        let cams = cam::extract_cams(gen, s.pixels(), s.labels())?;
        cam::write_cams(&dir.join(format!("{}.{CAM_EXT}", s.id())), &cams)
    })
}

fn eval(args: &EvalArgs) -> Result<()> {
    require_dir(&args.cams, "CAM")?;
    require_dir(&args.truth, "ground-truth")?;
    let classes = args.classes.clone().unwrap_or_else(|| args.cams.join(CLASSES_FILE));
    require_file(&classes, "class list")?;
    let catalog = ClassCatalog::from_file(&classes)?;

    let mut ids = Vec::new();
    let entries = std::fs::read_dir(&args.cams).map_err(|e| Error::io(&args.cams, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&args.cams, e))?.path();
        if path.extension().is_some_and(|e| e == CAM_EXT) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!(Data, "no .{CAM_EXT} files in {}", args.cams.display());
    }

    let mut preds = Vec::with_capacity(ids.len());
    let mut truths: Vec<Array2<u8>> = Vec::with_capacity(ids.len());
    for id in &ids {
        let cams = cam::read_cams(&args.cams.join(format!("{id}.{CAM_EXT}")))?;
        if cams.classes() != catalog.len() {
            bail!(Data, "sample {id}: {} CAM channels for {} classes", cams.classes(), catalog.len());
        }
        preds.push(cam::cams_to_pseudo_mask(&cams, args.threshold)?);
        let truth_path = args.truth.join(format!("{id}.png"));
        if !truth_path.is_file() {
            bail!(Data, "sample {id}: missing ground truth {}", truth_path.display());
        }
        truths.push(read_gray(&truth_path)?);
    }
    let report = cam::compute_miou(&preds, &truths, &ids, &catalog)?;
    if let Some(dir) = &args.masks_out {
        create_dir(dir)?;
        for (id, p) in ids.iter().zip(&preds) {
            p.save(&dir.join(format!("{id}.png")))?;
        }
    }
    let json = report.to_json();
    match &args.out {
        Some(path) => write_text(path, &(json + "\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn visualize(args: &VisualizeArgs) -> Result<()> {
    require_file(&args.classes, "class list")?;
    require_file(&args.encoder, "encoder checkpoint")?;
    require_file(&args.bank, "prompt bank checkpoint")?;
    require_file(&args.image, "image")?;
    let catalog = ClassCatalog::from_file(&args.classes)?;
    let Some(k) = catalog.index_of(&args.class) else {
        bail!(Data, "unknown class {:?}", args.class);
    };
    let encoder: Box<dyn DualEncoder> = load_encoder(&args.encoder)?;
    let bank = PromptBank::load(&args.bank, &catalog)?;
    let img = read_rgb(&args.image)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    cam::visualize_prompt_regions(&bank, encoder.as_ref(), &img, k, &args.out)?;
    Ok(())
}

/// Pseudo masks for a corpus straight from a generator.
pub fn pseudo_masks(
    gen: &MaskGenerator,
    corpus: &[LabeledImage],
    threshold: f64,
) -> Result<Vec<PseudoMask>> {
    use rayon::prelude::*;
    corpus
        .par_iter()
        .map(|s| cam::cams_to_pseudo_mask(&cam::extract_cams(gen, s.pixels(), s.labels())?, threshold))
        .collect()
}

/// Path of a sample image inside a corpus.
pub fn image_path(corpus: &Path, id: &str) -> PathBuf {
    corpus.join(IMAGES_DIR).join(format!("{id}.png"))
}
