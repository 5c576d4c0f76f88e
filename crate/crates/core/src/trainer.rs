//! Three-phase training with explicit parameter freezing.
//!
//! | phase      | trains          | losses                      |
//! |------------|-----------------|-----------------------------|
//! | `A_match`  | mask generator  | match                       |
//! | `B_prompt` | prompt bank     | prompt_I, prompt_T          |
//! | `C_refine` | mask generator  | match, refine               |
//!
//! The encoder is frozen in every phase. Batch losses are the mean over
//! samples of the mean over each sample's present classes.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array1, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LossFlags, RunConfig};
use crate::data::{ClassCatalog, LabeledImage};
use crate::encoder::DualEncoder;
use crate::error::{bail, Error, Result};
use crate::masking::{split_by_mask, split_by_mask_vjp, GeneratorArch, GeneratorManifest, MaskGenerator};
use crate::objectives::{loss_match, loss_prompt, loss_refine, LossReport, LossWeights};
use crate::optim::{AdamW, CosineSchedule};
use crate::prompts::PromptBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "A_match")]
    Match,
    #[serde(rename = "B_prompt")]
    Prompt,
    #[serde(rename = "C_refine")]
    Refine,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Match, Phase::Prompt, Phase::Refine];

    pub fn tag(self) -> &'static str {
        match self {
            Phase::Match => "A_match",
            Phase::Prompt => "B_prompt",
            Phase::Refine => "C_refine",
        }
    }

    fn index(self) -> u64 {
        match self {
            Phase::Match => 0,
            Phase::Prompt => 1,
            Phase::Refine => 2,
        }
    }

    /// The only parameter group this phase may update.
    pub fn trainable(self) -> ParamGroup {
        match self {
            Phase::Match | Phase::Refine => ParamGroup::MaskGenerator,
            Phase::Prompt => ParamGroup::PromptBank,
        }
    }

    /// Losses this phase is allowed to use.
    pub fn allowed_losses(self) -> LossFlags {
        match self {
            Phase::Match => LossFlags::MATCH_ONLY,
            Phase::Prompt => LossFlags {
                matching: false,
                prompt_image: true,
                prompt_text: true,
                refine: false,
            },
            Phase::Refine => LossFlags {
                matching: true,
                prompt_image: false,
                prompt_text: false,
                refine: true,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    MaskGenerator,
    PromptBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    pub phase: Phase,
    pub trainable: ParamGroup,
    pub losses: LossFlags,
    pub epochs: usize,
    pub lr: f64,
}

impl PhasePlan {
    /// The plan for `phase`, restricted to the losses enabled in `config`.
    pub fn from_config(phase: Phase, config: &RunConfig) -> Self {
        let allowed = phase.allowed_losses();
        let on = config.enabled_losses;
        let losses = LossFlags {
            matching: allowed.matching && on.matching,
            prompt_image: allowed.prompt_image && on.prompt_image,
            prompt_text: allowed.prompt_text && on.prompt_text,
            refine: allowed.refine && on.refine,
        };
        let (epochs, lr) = match phase {
            Phase::Match => (config.epochs_phase_a, config.lr_phase_a),
            Phase::Prompt => (config.epochs_phase_b, config.lr_phase_b),
            Phase::Refine => (config.epochs_phase_c, config.lr_phase_c),
        };
        PhasePlan {
            phase,
            trainable: phase.trainable(),
            losses,
            epochs: epochs.unwrap_or(config.epochs),
            lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trainable != self.phase.trainable() {
            bail!(
                Config,
                "phase {} must train {:?}, plan says {:?}",
                self.phase.tag(),
                self.phase.trainable(),
                self.trainable
            );
        }
        let allowed = self.phase.allowed_losses();
        let l = self.losses;
        if (l.matching && !allowed.matching)
            || (l.prompt_image && !allowed.prompt_image)
            || (l.prompt_text && !allowed.prompt_text)
            || (l.refine && !allowed.refine)
        {
            bail!(Config, "losses {l} are not allowed in phase {}", self.phase.tag());
        }
        if self.epochs == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "phase {} needs positive epochs and learning rate", self.phase.tag());
        }
        Ok(())
    }

    /// Whether the phase has nothing to optimize.
    ///
    /// Phase C only runs when the refinement loss is on: with the
    /// matching loss alone it would just continue phase A.
    pub fn is_noop(&self) -> bool {
        match self.phase {
            Phase::Match => !self.losses.matching,
            Phase::Prompt => !self.losses.any_prompt(),
            Phase::Refine => !self.losses.refine,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    /// Samples that contributed to the step; samples without a present class are skipped.
    pub samples: usize,
    #[serde(flatten)]
    pub losses: LossReport,
    /// Wall-clock time in milliseconds since the Unix epoch. The only
    /// non-deterministic field.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where periodic checkpoints go when `checkpoint_every > 0`.
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn weights(config: &RunConfig) -> LossWeights {
    LossWeights {
        lambda_b: config.lambda_b,
        lambda_t: config.lambda_t,
        lambda: config.lambda_refine,
    }
}

/// `splitmix64` of `(seed, stream)`, used to derive independent RNG streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> usize {
    n_samples.div_ceil(batch_size)
}

/// Text embeddings of the class prompts. The encoder is frozen, so these
/// are computed once.
pub fn class_text_embeddings(encoder: &dyn DualEncoder, catalog: &ClassCatalog) -> Result<Vec<Array1<f64>>> {
    (0..catalog.len())
        .map(|k| encoder.encode_text(&catalog.prompt_text(k)?))
        .collect()
}

pub fn background_embeddings(bank: &PromptBank, encoder: &dyn DualEncoder) -> Result<Vec<Array1<f64>>> {
    (0..bank.classes())
        .map(|k| bank.background_embedding(k, encoder))
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
struct SampleLoss {
    matching: f64,
    prompt_image: f64,
    prompt_text: f64,
    refine: f64,
}

impl SampleLoss {
    fn add(&mut self, o: &SampleLoss) {
        self.matching += o.matching;
        self.prompt_image += o.prompt_image;
        self.prompt_text += o.prompt_text;
        self.refine += o.refine;
    }

    fn scale(&mut self, s: f64) {
        self.matching *= s;
        self.prompt_image *= s;
        self.prompt_text *= s;
        self.refine *= s;
    }
}

struct Context<'a> {
    encoder: &'a dyn DualEncoder,
    config: &'a RunConfig,
    losses: LossFlags,
    text: &'a [Array1<f64>],
}

/// Loss and generator gradient for one sample in phase A or C.
/// `prompts` holds the frozen background embeddings when refinement is on.
fn generator_sample(
    ctx: &Context<'_>,
    gen: &MaskGenerator,
    prompts: Option<&[Array1<f64>]>,
    sample: &LabeledImage,
) -> Result<Option<(SampleLoss, Vec<f64>)>> {
    let classes = gen.arch().classes;
    let present: Vec<usize> = sample.present_classes().into_iter().filter(|&k| k < classes).collect();
    if present.is_empty() {
        return Ok(None);
    }
    let img = sample.pixels();
    let (masks, cache) = gen.forward(img)?;
    let (h, w) = (masks.height(), masks.width());
    let mut dmasks = Array3::<f64>::zeros((classes, h, w));
    let mut loss = SampleLoss::default();
    let eps = ctx.config.clamp_eps;
    let share = 1.0 / present.len() as f64;

    for &k in &present {
        let (fg, bg) = split_by_mask(img, masks.channel(k))?;
        let v_f = ctx.encoder.encode_image(&fg)?;
        let d = v_f.len();
        let mut g_vf = Array1::<f64>::zeros(d);
        let mut g_vb = None;
        if ctx.losses.matching {
            let v_b = ctx.encoder.encode_image(&bg)?;
            let m = loss_match(v_f.view(), v_b.view(), ctx.text[k].view(), ctx.config.lambda_b, eps)?;
            loss.matching += m.value;
            g_vf += &m.grad_vf;
            g_vb = Some(m.grad_vb);
        }
        if ctx.losses.refine {
            let u_b = &prompts.expect("refinement needs background prompts")[k];
            let r = loss_refine(v_f.view(), u_b.view(), eps)?;
            loss.refine += r.value;
            g_vf += &(&r.grad_vf * ctx.config.lambda_refine);
        }
        g_vf *= share;
        let d_fg = ctx.encoder.image_vjp(&fg, g_vf.view())?;
        let d_bg = match g_vb {
            Some(g) => ctx.encoder.image_vjp(&bg, (g * share).view())?,
            None => Array3::zeros(img.raw_dim()),
        };
        dmasks
            .index_axis_mut(Axis(0), k)
            .assign(&split_by_mask_vjp(img, &d_fg, &d_bg));
    }
    loss.scale(share);
    let grad = gen.backward(&cache, &dmasks)?;
    Ok(Some((loss, grad)))
}

/// Loss and bank gradient for one sample in phase B. `backgrounds[k]` is
/// the cached background-image embedding for class `k` of this sample.
fn prompt_sample(
    ctx: &Context<'_>,
    bank: &PromptBank,
    backgrounds: &[(usize, Array1<f64>)],
) -> Result<Option<(SampleLoss, Vec<f64>)>> {
    if backgrounds.is_empty() {
        return Ok(None);
    }
    let eps = ctx.config.clamp_eps;
    let share = 1.0 / backgrounds.len() as f64;
    let mut loss = SampleLoss::default();
    let mut grad = Array3::<f64>::zeros(bank.embeddings().raw_dim());
    for (k, v_b) in backgrounds {
        let u_b = bank.background_embedding(*k, ctx.encoder)?;
        let p = loss_prompt(u_b.view(), v_b.view(), ctx.text[*k].view(), ctx.config.lambda_t, eps)?;
        let mut g = Array1::<f64>::zeros(u_b.len());
        if ctx.losses.prompt_image {
            loss.prompt_image += p.image_term;
            g += &p.grad_ub_image;
        }
        if ctx.losses.prompt_text {
            loss.prompt_text += p.text_term;
            g += &(&p.grad_ub_text * ctx.config.lambda_t);
        }
        g *= share;
        grad += &bank.background_embedding_vjp(*k, ctx.encoder, g.view())?;
    }
    loss.scale(share);
    Ok(Some((loss, grad.into_raw_vec_and_offset().0)))
}

/// Runs one training phase, updating only the plan's trainable group.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    plan: &PhasePlan,
    corpus: &[LabeledImage],
    gen: &mut MaskGenerator,
    bank: &mut PromptBank,
    encoder: &dyn DualEncoder,
    catalog: &ClassCatalog,
    config: &RunConfig,
    options: &TrainOptions,
) -> Result<Vec<StepRecord>> {
    plan.validate()?;
    if corpus.is_empty() {
        bail!(Data, "training corpus is empty");
    }
    if gen.arch().classes != catalog.len() || bank.classes() != catalog.len() {
        bail!(
            Invalid,
            "generator ({}) and prompt bank ({}) must both cover the {} catalog classes",
            gen.arch().classes,
            bank.classes(),
            catalog.len()
        );
    }
    if plan.is_noop() {
        log::info!("phase {}: no enabled losses, skipping", plan.phase.tag());
        return Ok(Vec::new());
    }

    let encoder_before = crate::archive::digest_bytes(&encoder.param_bytes());
    let frozen_before = match plan.trainable {
        ParamGroup::MaskGenerator => bank.digest(),
        ParamGroup::PromptBank => gen.digest(),
    };

    let text = class_text_embeddings(encoder, catalog)?;
    let ctx = Context {
        encoder,
        config,
        losses: plan.losses,
        text: &text,
    };
    let prompts = if plan.losses.refine {
        Some(background_embeddings(bank, encoder)?)
    } else {
        None
    };
    // In phase B the generator is frozen, so background images are fixed.
    let backgrounds: Vec<Vec<(usize, Array1<f64>)>> = if plan.trainable == ParamGroup::PromptBank {
        corpus
            .par_iter()
            .map(|s| -> Result<Vec<(usize, Array1<f64>)>> {
                let masks = gen.generate_masks(s.pixels())?;
                s.present_classes()
                    .into_iter()
                    .filter(|&k| k < catalog.len())
                    .map(|k| {
                        let (_, bg) = split_by_mask(s.pixels(), masks.channel(k))?;
                        Ok((k, encoder.encode_image(&bg)?))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let per_epoch = steps_per_epoch(corpus.len(), config.batch_size);
    let schedule = CosineSchedule {
        base_lr: plan.lr,
        total_steps: plan.epochs * per_epoch,
    };
    let n_params = match plan.trainable {
        ParamGroup::MaskGenerator => gen.params().len(),
        ParamGroup::PromptBank => bank.params().len(),
    };
    let mut opt = AdamW::new(n_params, config.weight_decay);
    let w = weights(config);
    let mut log = Vec::with_capacity(schedule.total_steps);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;

    for epoch in 0..plan.epochs {
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + 16 * epoch as u64 + plan.phase.index()));
        order.shuffle(&mut rng);

        for batch in order.chunks(config.batch_size) {
            let results: Vec<Option<(SampleLoss, Vec<f64>)>> = {
                let gen_ref: &MaskGenerator = gen;
                let bank_ref: &PromptBank = bank;
                batch
                    .par_iter()
                    .map(|&i| match plan.trainable {
                        ParamGroup::MaskGenerator => generator_sample(&ctx, gen_ref, prompts.as_deref(), &corpus[i]),
                        ParamGroup::PromptBank => prompt_sample(&ctx, bank_ref, &backgrounds[i]),
                    })
                    .collect::<Result<_>>()?
            };

            let mut total = SampleLoss::default();
            let mut grad = vec![0.0; n_params];
            let mut used = 0usize;
            for (i, r) in batch.iter().zip(results) {
                match r {
                    Some((l, g)) => {
                        total.add(&l);
                        for (a, b) in grad.iter_mut().zip(&g) {
                            *a += b;
                        }
                        used += 1;
                    }
                    None => log::warn!("sample {} has no present class; skipped", corpus[*i].id()),
                }
            }

            let mut report = LossReport::zero(w);
            if used > 0 {
                let inv = 1.0 / used as f64;
                total.scale(inv);
                grad.iter_mut().for_each(|g| *g *= inv);
                report.matching = total.matching;
                report.prompt_image = total.prompt_image;
                report.prompt_text = total.prompt_text;
                report.prompt_total = total.prompt_image + config.lambda_t * total.prompt_text;
                report.refine = total.refine;
                report.total = match plan.phase {
                    Phase::Prompt => report.prompt_total,
                    _ => total.matching + config.lambda_refine * total.refine,
                };
            }
            if !report.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    phase: plan.phase.tag(),
                    step,
                });
            }

            let lr = schedule.lr_at(step);
            if used > 0 {
                match plan.trainable {
                    ParamGroup::MaskGenerator => opt.step(gen.params_mut(), &grad, lr),
                    ParamGroup::PromptBank => opt.step(bank.params_mut(), &grad, lr),
                }
            }
            log.push(StepRecord {
                step,
                phase: plan.phase,
                epoch,
                lr,
                samples: used,
                losses: report,
                timestamp_ms: now_ms(),
            });
            step += 1;

            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                if let Some(dir) = &options.checkpoint_dir {
                    write_checkpoint(dir, plan.phase, Some(step), gen, bank, catalog, config)?;
                }
            }
        }
        if let Some(last) = log.last() {
            log::info!(
                "phase {} epoch {}/{}: total {:.5}",
                plan.phase.tag(),
                epoch + 1,
                plan.epochs,
                last.losses.total
            );
        }
    }

    let frozen_after = match plan.trainable {
        ParamGroup::MaskGenerator => bank.digest(),
        ParamGroup::PromptBank => gen.digest(),
    };
    if frozen_before != frozen_after || encoder_before != crate::archive::digest_bytes(&encoder.param_bytes()) {
        bail!(Invalid, "phase {} modified a frozen parameter group", plan.phase.tag());
    }
    Ok(log)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn generator_manifest(
    gen: &MaskGenerator,
    catalog: &ClassCatalog,
    config: &RunConfig,
    phase: Option<Phase>,
) -> GeneratorManifest {
    GeneratorManifest {
        arch: gen.arch(),
        classes: catalog.names().to_vec(),
        config: config.clone(),
        phase: phase.map(|p| p.tag().to_string()),
    }
}

/// Writes the phase's trainable group to `dir`. Intermediate checkpoints
/// carry the step number in their file name.
pub fn write_checkpoint(
    dir: &std::path::Path,
    phase: Phase,
    step: Option<usize>,
    gen: &MaskGenerator,
    bank: &PromptBank,
    catalog: &ClassCatalog,
    config: &RunConfig,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let suffix = step.map(|s| format!("_step{s:06}")).unwrap_or_default();
    match phase.trainable() {
        ParamGroup::MaskGenerator => {
            let path = dir.join(format!("generator_{}{suffix}.semg", phase.tag()));
            gen.save(&path, &generator_manifest(gen, catalog, config, Some(phase)))?;
            Ok(path)
        }
        ParamGroup::PromptBank => {
            let path = dir.join(format!("prompts_{}{suffix}.semp", phase.tag()));
            bank.save(&path, catalog)?;
            Ok(path)
        }
    }
}

/// Freshly initialized generator and bank for a run.
pub fn initial_state(
    catalog: &ClassCatalog,
    encoder: &dyn DualEncoder,
    config: &RunConfig,
) -> Result<(MaskGenerator, PromptBank)> {
    let gen = MaskGenerator::new(
        GeneratorArch {
            hidden: config.gen_hidden,
            classes: catalog.len(),
        },
        derive_seed(config.seed, 1),
    )?;
    let bank = PromptBank::init_with_std(
        catalog,
        config.prompt_len,
        encoder,
        derive_seed(config.seed, 2),
        config.prompt_init_std,
    )?;
    Ok((gen, bank))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Generator after phase A.
    pub match_generator: MaskGenerator,
    /// Generator after phase C (equal to `match_generator` when C is disabled).
    pub generator: MaskGenerator,
    pub bank: PromptBank,
    pub logs: Vec<StepRecord>,
}

/// Phases A, B and C in order, each honouring the enabled-loss flags.
pub fn run_pipeline(
    corpus: &[LabeledImage],
    catalog: &ClassCatalog,
    encoder: &dyn DualEncoder,
    config: &RunConfig,
    options: &TrainOptions,
) -> Result<PipelineOutput> {
    config.validate()?;
    let (mut gen, mut bank) = initial_state(catalog, encoder, config)?;
    let mut logs = Vec::new();
    let mut match_generator = None;
    for phase in Phase::ALL {
        let plan = PhasePlan::from_config(phase, config);
        logs.extend(run_phase(&plan, corpus, &mut gen, &mut bank, encoder, catalog, config, options)?);
        if phase == Phase::Match {
            match_generator = Some(gen.clone());
        }
    }
    Ok(PipelineOutput {
        match_generator: match_generator.expect("phase A always runs"),
        generator: gen,
        bank,
        logs,
    })
}

/// One JSON object per line.
pub fn logs_to_jsonl(logs: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in logs {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
