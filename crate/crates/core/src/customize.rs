//! Subject customization: adapter finetuning of a pretrained model so
//! that rare identity tokens bind to user-provided subjects without
//! drifting the base weights or the frame-axis blocks.
//!
//! Training mixes up to three routed loss terms, each drawing from its
//! own indexed random stream so that toggling one term off leaves the
//! batches, timesteps, and noise of the others bit-identical. That is
//! what makes paired-seed comparisons between arms meaningful.
//!
//! - co-occurrence: denoise composites holding every subject at once,
//!   each region routed to its own identity prompt;
//! - masked single-subject: the same composites, one subject prompted
//!   and the rest nulled, with the error restricted to that subject's
//!   pixels so gradients cannot leak across regions;
//! - motion prior: denoise frames the pretrained model sampled from
//!   category prompts, anchoring action words to their old meaning.
//!
//! The single-prompt baseline arm instead trains on one subject per
//! image with plain conditioning, which is what the routed terms are
//! measured against.

use crate::diffusion::{diffusion_loss_at, noised_prediction, Denoiser, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::layout::RegionLayout;
use crate::model::{trainable, VideoModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{RngStream, Stream};
use crate::scene::mix::{
    gen_motion_prior, scene_references, segment_subject, synth_mix, BackgroundSource, DMix,
    DMotion,
};
use crate::scene::{bytes_to_tensor, render_background, SubjectSpec};
use crate::tensor::{Graph, Tensor};
use crate::text::{BackgroundWord, PromptAst, TextEncoder};
use crate::unet::CondItem;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub unet_lr: f32,
    pub text_lr: f32,
    /// Adapter rank; the scale applied to the adapter product is
    /// `alpha / rank`.
    pub rank: usize,
    pub alpha: f32,
    pub naive_batch: usize,
    pub cooccur_batch: usize,
    pub masked_batch: usize,
    pub motion_batch: usize,
    /// Composites to synthesize for the co-occurrence and masked terms.
    pub mix_count: usize,
    /// Frames to sample from the pretrained model for the motion term.
    pub motion_count: usize,
    /// Single-subject composites per subject for the baseline arm.
    pub naive_per_subject: usize,
    pub grad_clip: f32,
    pub seed: u64,
    /// Region-routed conditioning on. Off selects the baseline arm and
    /// forbids the routed loss terms.
    pub use_sdca: bool,
    pub multi_cooccur: bool,
    pub masked_single: bool,
    pub motion_prior: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 1000,
            unet_lr: 1e-4,
            text_lr: 2e-5,
            rank: 16,
            alpha: 16.0,
            naive_batch: 2,
            cooccur_batch: 2,
            masked_batch: 2,
            motion_batch: 2,
            mix_count: 24,
            motion_count: 8,
            naive_per_subject: 8,
            grad_clip: 1.0,
            seed: 0,
            use_sdca: true,
            multi_cooccur: true,
            masked_single: true,
            motion_prior: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        for (name, v) in [("unet_lr", self.unet_lr), ("text_lr", self.text_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be positive")));
            }
        }
        if self.rank == 0 || !(self.alpha > 0.0) {
            return Err(Error::Config("adapter rank and alpha must be positive".into()));
        }
        for (name, v) in [
            ("naive_batch", self.naive_batch),
            ("cooccur_batch", self.cooccur_batch),
            ("masked_batch", self.masked_batch),
            ("motion_batch", self.motion_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config(format!("grad_clip {} is negative", self.grad_clip)));
        }
        let any_routed = self.multi_cooccur || self.masked_single || self.motion_prior;
        if self.use_sdca && !any_routed {
            return Err(Error::Config(
                "routed conditioning is on but every routed loss term is off".into(),
            ));
        }
        if !self.use_sdca && any_routed {
            return Err(Error::Config(
                "the baseline arm cannot take routed loss terms; disable them or enable routing"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One baseline-arm composite: a single subject pasted on a procedural
/// background, captioned with that subject's identity prompt.
pub struct NaiveSample {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub prompt: PromptAst,
}

/// Everything a finetune run consumes: the subjects, their identity
/// prompts (one per region slot, action-free), the region layout, and
/// the synthesized training sets.
pub struct CustomizationJob {
    pub subjects: Vec<SubjectSpec>,
    pub prompts: Vec<PromptAst>,
    pub layout: RegionLayout,
    pub dmix: DMix,
    pub dmotion: Option<DMotion>,
    pub naive_set: Vec<NaiveSample>,
}

fn subject_slots(layout: &RegionLayout) -> usize {
    layout.slot_count() - layout.background_slot.is_some() as usize
}

fn paste_centered(image: &mut [f32], reference: &Tensor, h: usize, w: usize) -> Result<()> {
    let rsh = reference.shape().to_vec();
    let (ph, pw) = (rsh[1], rsh[2]);
    if ph > h || pw > w {
        return Err(Error::Layout(format!(
            "reference patch {pw}x{ph} exceeds the {w}x{h} canvas"
        )));
    }
    let (ox, oy) = ((w - pw) / 2, (h - ph) / 2);
    let seg = segment_subject(reference)?;
    let (rd, sd) = (reference.data(), seg.data());
    for py in 0..ph {
        for px in 0..pw {
            if sd[py * pw + px] > 0.5 {
                for c in 0..3 {
                    image[c * h * w + (oy + py) * w + ox + px] = rd[c * ph * pw + py * pw + px];
                }
            }
        }
    }
    Ok(())
}

/// Assemble the training sets for a finetune run from subject specs.
/// Composite backgrounds come from `backgrounds`; the motion prior set
/// (when enabled) is sampled from the pretrained model itself, so this
/// runs before adapters are attached. `data_seed` is independent of the
/// training seed so synthesis never shares draws with the loss terms.
pub fn build_job(
    model: &VideoModel,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    subjects: &[SubjectSpec],
    layout: &RegionLayout,
    backgrounds: &BackgroundSource,
    cfg: &FinetuneConfig,
    data_seed: u64,
) -> Result<CustomizationJob> {
    cfg.validate()?;
    layout.validate()?;
    if subjects.is_empty() {
        return Err(Error::Config("customization needs at least one subject".into()));
    }
    if subjects.len() != subject_slots(layout) {
        return Err(Error::Config(format!(
            "{} subjects but the layout has {} subject slots",
            subjects.len(),
            subject_slots(layout)
        )));
    }
    let mut idents = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        s.validate()?;
        match s.identity {
            Some(id) => idents.push(id.as_string()),
            None => {
                return Err(Error::Config(format!("subject {i} has no identity token")));
            }
        }
    }
    idents.sort();
    idents.dedup();
    if idents.len() != subjects.len() {
        return Err(Error::Config("subjects share an identity token".into()));
    }

    let (h, w) = (model.unet.cfg.height, model.unet.cfg.width);
    let prompts: Vec<PromptAst> = subjects.iter().map(|s| PromptAst::single(s.clause(None))).collect();
    for p in &prompts {
        model.text.vocab.tokenize(p)?;
    }

    let refs: Vec<Vec<Tensor>> = subjects
        .iter()
        .map(|s| scene_references(s, h, w))
        .collect::<Result<Vec<_>>>()?;
    if cfg.mix_count == 0 {
        return Err(Error::Config("mix_count must be positive".into()));
    }
    let dmix = synth_mix(&refs, backgrounds, cfg.mix_count, layout, h, w, data_seed)?;

    let dmotion = if cfg.motion_prior {
        if cfg.motion_count == 0 {
            return Err(Error::Config("motion_count must be positive".into()));
        }
        let categories: Vec<_> = subjects.iter().map(|s| s.shape).collect();
        Some(gen_motion_prior(
            model, schedule, sampler, &categories, layout, cfg.motion_count, data_seed,
        )?)
    } else {
        None
    };

    if cfg.naive_per_subject == 0 {
        return Err(Error::Config("naive_per_subject must be positive".into()));
    }
    let mut naive_set = Vec::with_capacity(subjects.len() * cfg.naive_per_subject);
    for (i, subject_refs) in refs.iter().enumerate() {
        for k in 0..cfg.naive_per_subject {
            let bg = BackgroundWord::ALL[k % BackgroundWord::ALL.len()];
            let mut image = bytes_to_tensor(&render_background(bg, h, w), h, w).data().to_vec();
            paste_centered(&mut image, &subject_refs[k % subject_refs.len()], h, w)?;
            naive_set.push(NaiveSample {
                image: Tensor::new(image, &[3, h, w])?,
                prompt: prompts[i].clone(),
            });
        }
    }

    Ok(CustomizationJob {
        subjects: subjects.to_vec(),
        prompts,
        layout: layout.clone(),
        dmix,
        dmotion,
        naive_set,
    })
}

fn draw_indices(rng: &mut RngStream, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.below(len)).collect()
}

fn draw_timesteps(rng: &mut RngStream, batch: usize, t_max: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.below(t_max) + 1).collect()
}

/// Stack `[3, H, W]` images into a one-frame clip batch `[B, 1, 3, H, W]`.
fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let sh = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for im in images {
        if im.shape() != sh.as_slice() {
            return Err(Error::shape(
                "stack_images",
                format!("{:?} vs {:?}", im.shape(), sh),
            ));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(data, &[images.len(), 1, sh[0], sh[1], sh[2]])
}

/// Per-slot conditioning tensors: each subject slot encodes its prompt
/// (or the null stand-in when `only` excludes it) and the background
/// slot is always null.
fn slot_texts(
    g: &mut Graph,
    enc: &TextEncoder,
    layout: &RegionLayout,
    prompts: &[PromptAst],
    only: Option<usize>,
) -> Result<Vec<Tensor>> {
    let n = subject_slots(layout);
    if prompts.len() != n {
        return Err(Error::Contract(format!(
            "{} prompts for {n} subject slots",
            prompts.len()
        )));
    }
    let mut texts = Vec::with_capacity(layout.slot_count());
    for slot in 0..layout.slot_count() {
        let is_bg = layout.background_slot == Some(slot);
        let wanted = only.map_or(true, |i| i == slot);
        if is_bg || !wanted {
            texts.push(enc.encode_null());
        } else {
            texts.push(enc.encode(g, &prompts[slot])?);
        }
    }
    Ok(texts)
}

/// Baseline-arm objective: plain (unrouted) denoising of single-subject
/// composites captioned with identity prompts.
pub fn loss_naive(
    g: &mut Graph,
    enc: &TextEncoder,
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    naive_set: &[NaiveSample],
    batch: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if naive_set.is_empty() {
        return Err(Error::Contract("baseline set is empty".into()));
    }
    let idx = draw_indices(rng, naive_set.len(), batch);
    let images: Vec<&Tensor> = idx.iter().map(|&i| &naive_set[i].image).collect();
    let z0 = stack_images(&images)?;
    let texts: Vec<Tensor> = idx
        .iter()
        .map(|&i| enc.encode(g, &naive_set[i].prompt))
        .collect::<Result<Vec<_>>>()?;
    let cond: Vec<CondItem> = texts.iter().map(CondItem::vanilla).collect();
    let ts = draw_timesteps(rng, batch, schedule.t_max);
    let eps = Tensor::new(rng.fill_normal(z0.numel()), z0.shape())?;
    diffusion_loss_at(g, den, &z0, &ts, &eps, &cond, false, schedule)
}

/// Co-occurrence objective: denoise multi-subject composites with each
/// region routed to its own identity prompt.
#[allow(clippy::too_many_arguments)]
pub fn loss_cooccur(
    g: &mut Graph,
    enc: &TextEncoder,
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    dmix: &DMix,
    layout: &RegionLayout,
    prompts: &[PromptAst],
    batch: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if dmix.samples.is_empty() {
        return Err(Error::Contract("composite set is empty".into()));
    }
    let idx = draw_indices(rng, dmix.samples.len(), batch);
    let images: Vec<&Tensor> = idx.iter().map(|&i| &dmix.samples[i].image).collect();
    let z0 = stack_images(&images)?;
    let texts = slot_texts(g, enc, layout, prompts, None)?;
    let refs: Vec<&Tensor> = texts.iter().collect();
    let cond: Vec<CondItem> = (0..batch).map(|_| CondItem::routed(refs.clone(), layout)).collect();
    let ts = draw_timesteps(rng, batch, schedule.t_max);
    let eps = Tensor::new(rng.fill_normal(z0.numel()), z0.shape())?;
    diffusion_loss_at(g, den, &z0, &ts, &eps, &cond, false, schedule)
}

/// Masked single-subject objective: the same composites as the
/// co-occurrence term, but only `subject`'s region prompt is live and
/// the error is restricted to that subject's pixels. Returns the loss
/// and the masked cell count; a count of zero means the loss is a
/// constant and carries no gradient.
#[allow(clippy::too_many_arguments)]
pub fn loss_masked_single(
    g: &mut Graph,
    enc: &TextEncoder,
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    dmix: &DMix,
    layout: &RegionLayout,
    prompts: &[PromptAst],
    subject: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Result<(Tensor, usize)> {
    if dmix.samples.is_empty() {
        return Err(Error::Contract("composite set is empty".into()));
    }
    if subject >= dmix.subjects {
        return Err(Error::Contract(format!(
            "subject {subject} out of range for {} subjects",
            dmix.subjects
        )));
    }
    let idx = draw_indices(rng, dmix.samples.len(), batch);
    let images: Vec<&Tensor> = idx.iter().map(|&i| &dmix.samples[i].image).collect();
    let z0 = stack_images(&images)?;
    let texts = slot_texts(g, enc, layout, prompts, Some(subject))?;
    let refs: Vec<&Tensor> = texts.iter().collect();
    let cond: Vec<CondItem> = (0..batch).map(|_| CondItem::routed(refs.clone(), layout)).collect();
    let ts = draw_timesteps(rng, batch, schedule.t_max);
    let eps = Tensor::new(rng.fill_normal(z0.numel()), z0.shape())?;

    // Full-shape mask: the subject's [H, W] mask replicated over the
    // channel axis per item, so the masked count is exactly the number
    // of visible subject cells times the channel count.
    let sh = z0.shape().to_vec();
    let hw = sh[3] * sh[4];
    let mut mask = Vec::with_capacity(z0.numel());
    for &i in &idx {
        let m = dmix.samples[i].masks[subject].data();
        for _c in 0..sh[2] {
            mask.extend_from_slice(&m[..hw]);
        }
    }
    let mask = Tensor::new(mask, &sh)?;

    let pred = noised_prediction(g, den, &z0, &ts, &eps, &cond, false, schedule)?;
    g.masked_mse(&pred, &eps, &mask)
}

/// Motion-prior objective: denoise frames the pretrained model produced
/// for category-plus-action prompts, under the same routing. Prompts
/// carrying identity tokens are refused; the term exists to keep those
/// tokens out of the action vocabulary's gradient path.
#[allow(clippy::too_many_arguments)]
pub fn loss_motion(
    g: &mut Graph,
    enc: &TextEncoder,
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    dmotion: &DMotion,
    layout: &RegionLayout,
    batch: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if dmotion.samples.is_empty() {
        return Err(Error::Contract("motion prior set is empty".into()));
    }
    let n = subject_slots(layout);
    for (k, sample) in dmotion.samples.iter().enumerate() {
        if sample.prompts.len() != n {
            return Err(Error::Contract(format!(
                "motion sample {k} has {} prompts for {n} subject slots",
                sample.prompts.len()
            )));
        }
        for p in &sample.prompts {
            if p.clauses.iter().any(|c| c.identity.is_some()) {
                return Err(Error::Contract(
                    "motion prior prompts must not carry identity tokens".into(),
                ));
            }
        }
    }
    let idx = draw_indices(rng, dmotion.samples.len(), batch);
    let images: Vec<&Tensor> = idx.iter().map(|&i| &dmotion.samples[i].image).collect();
    let z0 = stack_images(&images)?;
    let mut texts_per_item: Vec<Vec<Tensor>> = Vec::with_capacity(batch);
    for &i in &idx {
        texts_per_item.push(slot_texts(g, enc, layout, &dmotion.samples[i].prompts, None)?);
    }
    let cond: Vec<CondItem> = texts_per_item
        .iter()
        .map(|texts| CondItem::routed(texts.iter().collect(), layout))
        .collect();
    let ts = draw_timesteps(rng, batch, schedule.t_max);
    let eps = Tensor::new(rng.fill_normal(z0.numel()), z0.shape())?;
    diffusion_loss_at(g, den, &z0, &ts, &eps, &cond, false, schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogLine {
    pub iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub naive: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooccur: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_subject: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<f32>,
    pub grad_norm: f32,
}

/// Attach adapters to a clean pretrained model and run the configured
/// loss terms for `cfg.iterations` steps. Only adapter parameters move;
/// the freeze goes through a checkpoint round trip like the temporal
/// pretraining stage, so base and frame-axis weights stay bit-identical.
/// Returns one log line per iteration.
pub fn finetune(
    model: &mut VideoModel,
    job: &CustomizationJob,
    cfg: &FinetuneConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<FinetuneLogLine>> {
    cfg.validate()?;
    let n = job.subjects.len();
    if n == 0 || job.prompts.len() != n || job.dmix.subjects != n {
        return Err(Error::Contract(format!(
            "job wires {} subjects, {} prompts, {} composite slots",
            n,
            job.prompts.len(),
            job.dmix.subjects
        )));
    }
    if subject_slots(&job.layout) != n {
        return Err(Error::Contract(format!(
            "layout has {} subject slots for {n} subjects",
            subject_slots(&job.layout)
        )));
    }
    if !cfg.use_sdca && job.naive_set.is_empty() {
        return Err(Error::Contract("baseline arm selected but the baseline set is empty".into()));
    }
    if cfg.motion_prior && job.dmotion.as_ref().map_or(true, |d| d.samples.is_empty()) {
        return Err(Error::Contract("motion term enabled without a motion prior set".into()));
    }

    if model.lora.is_some() {
        return Err(Error::Contract("adapters already attached; finetune starts from a clean model".into()));
    }
    model.attach_lora(cfg.rank, cfg.alpha, cfg.seed)?;
    // Structural freeze: reload through an archive so trainability is a
    // property of the load, not of whatever the caller did before.
    let ar = model.to_archive(&BTreeMap::new());
    let (reloaded, _) = VideoModel::from_archive(&ar, &trainable::adapters_only)?;
    *model = reloaded;
    let mut violation = None;
    model.visit_params_mut(&mut |name, t| {
        if t.requires_grad() && !trainable::adapters_only(&name) && violation.is_none() {
            violation = Some(name);
        }
    });
    if let Some(name) = violation {
        return Err(Error::Contract(format!("base parameter {name} is trainable")));
    }

    let mut opt = AdamW::new(AdamWConfig::default());
    let lr_for = |name: &str| {
        if name.starts_with("text") {
            cfg.text_lr
        } else {
            cfg.unet_lr
        }
    };
    let mut log = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut g = Graph::recording();
        let mut line = FinetuneLogLine {
            iter,
            naive: None,
            cooccur: None,
            masked: None,
            masked_subject: None,
            masked_cells: None,
            motion: None,
            grad_norm: 0.0,
        };
        // Terms that reached the graph; a masked term with no visible
        // cells is a constant and must stay out of the backward pass.
        let mut tracked: Vec<Tensor> = Vec::new();
        {
            let enc = &model.text;
            let den: &dyn Denoiser = &*model;
            if !cfg.use_sdca {
                let mut rng = RngStream::item(cfg.seed, Stream::Noise, iter as u64);
                let l = loss_naive(&mut g, enc, den, schedule, &job.naive_set, cfg.naive_batch, &mut rng)?;
                line.naive = Some(l.item()?);
                tracked.push(l);
            } else {
                if cfg.multi_cooccur {
                    let mut rng = RngStream::item(cfg.seed, Stream::Mix, iter as u64);
                    let l = loss_cooccur(
                        &mut g, enc, den, schedule, &job.dmix, &job.layout, &job.prompts,
                        cfg.cooccur_batch, &mut rng,
                    )?;
                    line.cooccur = Some(l.item()?);
                    tracked.push(l);
                }
                if cfg.masked_single {
                    let subject = iter % n;
                    let mut rng = RngStream::item(cfg.seed, Stream::Data, iter as u64);
                    let (l, cells) = loss_masked_single(
                        &mut g, enc, den, schedule, &job.dmix, &job.layout, &job.prompts, subject,
                        cfg.masked_batch, &mut rng,
                    )?;
                    line.masked = Some(l.item()?);
                    line.masked_subject = Some(subject);
                    line.masked_cells = Some(cells);
                    if cells > 0 {
                        tracked.push(l);
                    } else {
                        eprintln!(
                            "warning: masked term skipped at iteration {iter}: subject {subject} has no visible cells in the sampled batch"
                        );
                    }
                }
                if cfg.motion_prior {
                    let dmotion = job.dmotion.as_ref().expect("checked above");
                    let mut rng = RngStream::item(cfg.seed, Stream::Motion, iter as u64);
                    let l = loss_motion(
                        &mut g, enc, den, schedule, dmotion, &job.layout, cfg.motion_batch,
                        &mut rng,
                    )?;
                    line.motion = Some(l.item()?);
                    tracked.push(l);
                }
            }
        }
        if let Some(first) = tracked.first().cloned() {
            let mut total = first;
            for t in &tracked[1..] {
                total = g.add(&total, t)?;
            }
            g.backward(&total)?;
            line.grad_norm = model.apply_step(&mut opt, cfg.grad_clip, &lr_for)?;
        }
        log.push(line);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::scaled_linear;
    use crate::scene::mix::MotionSample;
    use crate::scene::SUBJECT_COLORS;
    use crate::text::{RareId, ShapeWord};
    use crate::unet::UNetConfig;

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            c1: 8,
            c2: 16,
            frames: 2,
            height: 16,
            width: 16,
            groups: 4,
            time_dim: 8,
        }
    }

    /// A fresh model's output head is zero-initialized, which blocks
    /// every upstream gradient; nudge it the way pretraining would so
    /// adapter gradients exist.
    fn pretrained_ish(seed: u64) -> VideoModel {
        let mut m = VideoModel::init(tiny_cfg(), seed).unwrap();
        let mut rng = RngStream::new(99, Stream::Init);
        m.visit_params_mut(&mut |name, t| {
            if name == "unet.head.conv.w" {
                let v: Vec<f32> = rng.fill_normal(t.numel()).iter().map(|x| x * 0.05).collect();
                *t = Tensor::new(v, t.shape()).unwrap().trainable();
            }
        });
        m
    }

    fn subject(shape: ShapeWord, base: usize, accent: usize, id: Option<u8>) -> SubjectSpec {
        SubjectSpec {
            shape,
            base_color: SUBJECT_COLORS[base],
            accent_color: SUBJECT_COLORS[accent],
            size: 0.4,
            identity: id.map(|k| RareId::new(k).unwrap()),
        }
    }

    fn tiny_job(identities: bool, with_motion: bool) -> CustomizationJob {
        let ids: [Option<u8>; 2] = if identities { [Some(1), Some(2)] } else { [None, None] };
        let subjects = vec![
            subject(ShapeWord::Circle, 0, 8, ids[0]),
            subject(ShapeWord::Square, 1, 3, ids[1]),
        ];
        let layout = RegionLayout::uniform(2).unwrap();
        let refs: Vec<Vec<Tensor>> = subjects
            .iter()
            .map(|s| scene_references(s, 16, 16).unwrap())
            .collect();
        let dmix = synth_mix(&refs, &BackgroundSource::Procedural, 4, &layout, 16, 16, 5).unwrap();
        let prompts: Vec<PromptAst> =
            subjects.iter().map(|s| PromptAst::single(s.clause(None))).collect();
        let dmotion = with_motion.then(|| DMotion {
            samples: dmix
                .samples
                .iter()
                .map(|s| MotionSample {
                    image: s.image.clone(),
                    prompts: subjects
                        .iter()
                        .map(|sp| PromptAst::single(subject(sp.shape, 0, 8, None).clause(None)))
                        .collect(),
                    seed: 0,
                })
                .collect(),
        });
        let naive_set = dmix
            .samples
            .iter()
            .map(|s| NaiveSample {
                image: s.image.clone(),
                prompt: prompts[0].clone(),
            })
            .collect();
        CustomizationJob {
            subjects,
            prompts,
            layout,
            dmix,
            dmotion,
            naive_set,
        }
    }

    fn quick_finetune_cfg() -> FinetuneConfig {
        FinetuneConfig {
            iterations: 1,
            rank: 2,
            alpha: 2.0,
            naive_batch: 1,
            cooccur_batch: 1,
            masked_batch: 1,
            motion_batch: 1,
            mix_count: 2,
            motion_count: 1,
            naive_per_subject: 1,
            seed: 11,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn toggle_combinations_validate() {
        let base = FinetuneConfig::default();
        assert!(base.validate().is_ok());
        let naive = FinetuneConfig {
            use_sdca: false,
            multi_cooccur: false,
            masked_single: false,
            motion_prior: false,
            ..base.clone()
        };
        assert!(naive.validate().is_ok());
        let hollow = FinetuneConfig {
            multi_cooccur: false,
            masked_single: false,
            motion_prior: false,
            ..base.clone()
        };
        assert!(matches!(hollow.validate(), Err(Error::Config(_))));
        let contradictory = FinetuneConfig {
            use_sdca: false,
            multi_cooccur: false,
            masked_single: false,
            ..base
        };
        assert!(matches!(contradictory.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn disabling_motion_leaves_other_terms_bit_identical() {
        let job_without = tiny_job(true, false);
        let job_with = tiny_job(true, true);
        let cfg_without = FinetuneConfig {
            motion_prior: false,
            ..quick_finetune_cfg()
        };
        let cfg_with = quick_finetune_cfg();
        let mut m1 = VideoModel::init(tiny_cfg(), 3).unwrap();
        let mut m2 = VideoModel::init(tiny_cfg(), 3).unwrap();
        let s = scaled_linear(100).unwrap();
        let log1 = finetune(&mut m1, &job_without, &cfg_without, &s).unwrap();
        let log2 = finetune(&mut m2, &job_with, &cfg_with, &s).unwrap();
        assert!(log1[0].motion.is_none());
        assert!(log2[0].motion.is_some());
        assert_eq!(
            log1[0].cooccur.unwrap().to_bits(),
            log2[0].cooccur.unwrap().to_bits()
        );
        assert_eq!(
            log1[0].masked.unwrap().to_bits(),
            log2[0].masked.unwrap().to_bits()
        );
    }

    #[test]
    fn motion_loss_matches_cooccur_on_identical_data() {
        // Identity-free subjects so the same prompts are legal for both
        // terms; identical images and draws must give identical losses.
        let job = tiny_job(false, false);
        let dmotion = DMotion {
            samples: job
                .dmix
                .samples
                .iter()
                .map(|s| MotionSample {
                    image: s.image.clone(),
                    prompts: job.prompts.clone(),
                    seed: 0,
                })
                .collect(),
        };
        let model = VideoModel::init(tiny_cfg(), 3).unwrap();
        let s = scaled_linear(100).unwrap();
        let mut g1 = Graph::recording();
        let mut rng1 = RngStream::item(7, Stream::Mix, 3);
        let a = loss_cooccur(
            &mut g1, &model.text, &model, &s, &job.dmix, &job.layout, &job.prompts, 2, &mut rng1,
        )
        .unwrap();
        let mut g2 = Graph::recording();
        let mut rng2 = RngStream::item(7, Stream::Mix, 3);
        let b = loss_motion(&mut g2, &model.text, &model, &s, &dmotion, &job.layout, 2, &mut rng2)
            .unwrap();
        assert_eq!(a.item().unwrap().to_bits(), b.item().unwrap().to_bits());
    }

    #[test]
    fn motion_loss_refuses_identity_tokens() {
        let job = tiny_job(true, false);
        let dmotion = DMotion {
            samples: vec![MotionSample {
                image: job.dmix.samples[0].image.clone(),
                prompts: job.prompts.clone(),
                seed: 0,
            }],
        };
        let model = VideoModel::init(tiny_cfg(), 3).unwrap();
        let s = scaled_linear(100).unwrap();
        let mut g = Graph::recording();
        let mut rng = RngStream::item(7, Stream::Motion, 0);
        let err = loss_motion(&mut g, &model.text, &model, &s, &dmotion, &job.layout, 1, &mut rng);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    struct LeafDenoiser {
        leaf: Tensor,
    }

    impl Denoiser for LeafDenoiser {
        fn predict(
            &self,
            _g: &mut Graph,
            _zt: &Tensor,
            _ts: &[usize],
            _cond: &[CondItem],
            _temporal: bool,
        ) -> Result<Tensor> {
            Ok(self.leaf.clone())
        }
    }

    #[test]
    fn masked_term_gradient_is_exactly_zero_outside_the_mask() {
        let job = tiny_job(true, false);
        let model = VideoModel::init(tiny_cfg(), 3).unwrap();
        let s = scaled_linear(100).unwrap();
        let batch = 2;
        let mut init = RngStream::new(42, Stream::Init);
        let leaf = Tensor::new(init.fill_normal(batch * 3 * 16 * 16), &[batch, 1, 3, 16, 16])
            .unwrap()
            .trainable();
        let den = LeafDenoiser { leaf: leaf.clone() };
        let mut g = Graph::recording();
        let mut rng = RngStream::item(9, Stream::Data, 0);
        let subject = 1;
        let (loss, cells) = loss_masked_single(
            &mut g, &model.text, &den, &s, &job.dmix, &job.layout, &job.prompts, subject, batch,
            &mut rng,
        )
        .unwrap();
        assert!(cells > 0);
        g.backward(&loss).unwrap();
        let grad = leaf.grad().unwrap();

        // Rebuild the mask the loss used: same draw order, same stream.
        let mut replay = RngStream::item(9, Stream::Data, 0);
        let idx = draw_indices(&mut replay, job.dmix.samples.len(), batch);
        let mut inside = 0;
        for (b, &i) in idx.iter().enumerate() {
            let m = job.dmix.samples[i].masks[subject].data();
            for c in 0..3 {
                for p in 0..16 * 16 {
                    let gv = grad[(b * 3 + c) * 16 * 16 + p];
                    if m[p] == 0.0 {
                        assert_eq!(gv, 0.0, "gradient leaked outside the mask");
                    } else if gv != 0.0 {
                        inside += 1;
                    }
                }
            }
        }
        assert!(inside > 0, "no gradient reached the masked cells");
    }

    #[test]
    fn empty_mask_logs_zero_and_skips_the_step() {
        let mut job = tiny_job(true, false);
        for s in &mut job.dmix.samples {
            s.masks[0] = Tensor::zeros(&[16, 16]);
            s.masks[1] = Tensor::zeros(&[16, 16]);
        }
        let cfg = FinetuneConfig {
            multi_cooccur: false,
            motion_prior: false,
            ..quick_finetune_cfg()
        };
        let mut model = VideoModel::init(tiny_cfg(), 3).unwrap();
        let s = scaled_linear(100).unwrap();
        let log = finetune(&mut model, &job, &cfg, &s).unwrap();
        assert_eq!(log[0].masked, Some(0.0));
        assert_eq!(log[0].masked_cells, Some(0));
        assert_eq!(log[0].grad_norm, 0.0);
    }

    #[test]
    fn finetune_moves_adapters_and_nothing_else() {
        let job = tiny_job(true, true);
        let cfg = FinetuneConfig {
            iterations: 2,
            ..quick_finetune_cfg()
        };
        let mut model = pretrained_ish(3);
        let mut before = BTreeMap::new();
        model.visit_params_mut(&mut |name, t| {
            before.insert(name, t.data().to_vec());
        });
        let s = scaled_linear(100).unwrap();
        let log = finetune(&mut model, &job, &cfg, &s).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log[1].grad_norm > 0.0);
        assert_eq!(model.lora, Some((cfg.rank, cfg.alpha)));
        let mut adapters_moved = false;
        model.visit_params_mut(&mut |name, t| {
            if let Some(old) = before.get(&name) {
                let same = old.len() == t.numel()
                    && old
                        .iter()
                        .zip(t.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "base parameter {name} moved");
            } else {
                assert!(name.contains("lora_"), "unexpected new parameter {name}");
                if t.data().iter().any(|&v| v != 0.0) && name.contains("lora_b") {
                    adapters_moved = true;
                }
            }
        });
        assert!(adapters_moved, "no adapter update reached the weights");
    }

    #[test]
    fn finetune_refuses_preattached_adapters() {
        let job = tiny_job(true, false);
        let cfg = FinetuneConfig {
            motion_prior: false,
            ..quick_finetune_cfg()
        };
        let mut model = VideoModel::init(tiny_cfg(), 3).unwrap();
        model.attach_lora(2, 2.0, 0).unwrap();
        let s = scaled_linear(100).unwrap();
        assert!(matches!(
            finetune(&mut model, &job, &cfg, &s),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn build_job_synthesizes_all_sets() {
        let model = VideoModel::init(tiny_cfg(), 3).unwrap();
        let s = scaled_linear(100).unwrap();
        let sampler = SamplerConfig {
            steps: 2,
            cfg_scale: 1.0,
            ..SamplerConfig::default()
        };
        let subjects = vec![
            subject(ShapeWord::Circle, 0, 8, Some(1)),
            subject(ShapeWord::Square, 1, 3, Some(2)),
        ];
        let layout = RegionLayout::uniform(2).unwrap();
        let cfg = FinetuneConfig {
            motion_prior: false,
            mix_count: 3,
            naive_per_subject: 2,
            ..quick_finetune_cfg()
        };
        let job = build_job(
            &model, &s, &sampler, &subjects, &layout, &BackgroundSource::Procedural, &cfg, 17,
        )
        .unwrap();
        assert_eq!(job.dmix.samples.len(), 3);
        assert_eq!(job.naive_set.len(), 4);
        assert!(job.dmotion.is_none());
        assert!(job.prompts[0].render().contains("S1*"));

        let anonymous = vec![subject(ShapeWord::Circle, 0, 8, None), subjects[1].clone()];
        assert!(matches!(
            build_job(
                &model, &s, &sampler, &anonymous, &layout, &BackgroundSource::Procedural, &cfg, 17,
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn build_job_with_motion_samples_from_the_model() {
        let model = VideoModel::init(tiny_cfg(), 3).unwrap();
        let s = scaled_linear(100).unwrap();
        let sampler = SamplerConfig {
            steps: 2,
            cfg_scale: 1.0,
            ..SamplerConfig::default()
        };
        let subjects = vec![
            subject(ShapeWord::Circle, 0, 8, Some(1)),
            subject(ShapeWord::Square, 1, 3, Some(2)),
        ];
        let layout = RegionLayout::uniform(2).unwrap();
        let cfg = FinetuneConfig {
            mix_count: 2,
            motion_count: 2,
            ..quick_finetune_cfg()
        };
        let job = build_job(
            &model, &s, &sampler, &subjects, &layout, &BackgroundSource::Procedural, &cfg, 17,
        )
        .unwrap();
        let dmotion = job.dmotion.unwrap();
        assert_eq!(dmotion.samples.len(), 2);
        assert_eq!(dmotion.samples[0].image.shape(), &[3, 16, 16]);
        assert!(dmotion.samples[0]
            .prompts
            .iter()
            .all(|p| p.clauses[0].identity.is_none()));
    }
}
