//! Two-phase base training: image denoising first, then the frame-axis
//! blocks on full clips with everything else frozen.
//!
//! The freeze between phases goes through a checkpoint round trip, so
//! "frozen" is structural: phase two reloads the phase-one archive with
//! only frame-axis parameters accepting gradients, and the rest of the
//! network stays bit-identical. A small fraction of batches drops the
//! caption and conditions on the learned null encoding instead, which
//! is what makes guidance scales other than 1 meaningful at sampling
//! time.

use crate::diffusion::{diffusion_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{trainable, VideoModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{RngStream, Stream};
use crate::scene::io::LoadedItem;
use crate::tensor::Graph;
use crate::text::{parse_prompt, PromptAst};
use crate::unet::CondItem;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub image_steps: usize,
    pub temporal_steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Probability of replacing a caption with the null encoding.
    pub dropout: f32,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            image_steps: 600,
            temporal_steps: 300,
            batch: 8,
            lr: 2e-4,
            dropout: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One clip with its parsed caption.
pub struct TrainItem {
    /// `[F, 3, H, W]`.
    pub video: Tensor,
    pub prompt: PromptAst,
}

use crate::tensor::Tensor;

pub fn train_items(items: &[LoadedItem]) -> Result<Vec<TrainItem>> {
    items
        .iter()
        .map(|it| {
            Ok(TrainItem {
                video: it.video.clone(),
                prompt: parse_prompt(&it.meta.caption)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub stage: String,
    pub step: usize,
    pub loss: f32,
    pub grad_norm: f32,
}

/// Mean loss of the last tenth of the log divided by the first tenth.
/// Below 1 means training moved the objective.
pub fn loss_ratio(lines: &[LogLine]) -> f32 {
    if lines.is_empty() {
        return 1.0;
    }
    let k = (lines.len() / 10).max(1);
    let head: f32 = lines[..k].iter().map(|l| l.loss).sum::<f32>() / k as f32;
    let tail: f32 = lines[lines.len() - k..].iter().map(|l| l.loss).sum::<f32>() / k as f32;
    tail / head
}

enum Phase {
    Image,
    Temporal,
}

fn run_phase(
    model: &mut VideoModel,
    items: &[TrainItem],
    phase: Phase,
    steps: usize,
    cfg: &PretrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LogLine>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("no training items".into()));
    }
    let (stage_idx, stage_name, temporal) = match phase {
        Phase::Image => (0u64, "image", false),
        Phase::Temporal => (1u64, "temporal", true),
    };
    let ucfg = model.unet.cfg.clone();
    for (i, it) in items.iter().enumerate() {
        let sh = it.video.shape();
        if sh[1] != ucfg.in_channels || sh[2] != ucfg.height || sh[3] != ucfg.width {
            return Err(Error::Contract(format!(
                "item {i} has shape {sh:?}, model expects [{}, {}, {}]",
                ucfg.in_channels, ucfg.height, ucfg.width
            )));
        }
        if temporal && sh[0] != ucfg.frames {
            return Err(Error::Contract(format!(
                "item {i} has {} frames, temporal phase needs {}",
                sh[0], ucfg.frames
            )));
        }
    }
    let mut rng_batch = RngStream::item(cfg.seed, Stream::Batch, stage_idx);
    let mut rng_noise = RngStream::item(cfg.seed, Stream::Noise, stage_idx);
    let mut rng_drop = RngStream::item(cfg.seed, Stream::Dropout, stage_idx);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut log = Vec::with_capacity(steps);

    let item_px = 3 * ucfg.height * ucfg.width;
    for step in 0..steps {
        let mut g = Graph::recording();
        let mut z_data = Vec::new();
        let mut prompts = Vec::with_capacity(cfg.batch);
        let clip_frames = if temporal { ucfg.frames } else { 1 };
        for _ in 0..cfg.batch {
            let it = &items[rng_batch.below(items.len())];
            match phase {
                Phase::Image => {
                    let f = rng_batch.below(it.video.shape()[0]);
                    z_data.extend_from_slice(&it.video.data()[f * item_px..(f + 1) * item_px]);
                }
                Phase::Temporal => z_data.extend_from_slice(&it.video.data()),
            }
            prompts.push(it.prompt.clone());
        }
        let z0 = Tensor::new(
            z_data,
            &[cfg.batch, clip_frames, ucfg.in_channels, ucfg.height, ucfg.width],
        )?;
        let encodings: Vec<Tensor> = prompts
            .iter()
            .map(|p| {
                let dropped = rng_drop.uniform() < cfg.dropout as f64;
                if dropped {
                    Ok(model.text.encode_null())
                } else {
                    model.text.encode(&mut g, p)
                }
            })
            .collect::<Result<_>>()?;
        let cond: Vec<CondItem> = encodings.iter().map(CondItem::vanilla).collect();
        let loss = diffusion_loss(&mut g, model, &z0, &cond, temporal, schedule, &mut rng_noise)?;
        let loss_val = loss.item()?;
        g.backward(&loss)?;
        let grad_norm = model.apply_step(&mut opt, cfg.grad_clip, &|_| cfg.lr)?;
        log.push(LogLine {
            stage: stage_name.into(),
            step,
            loss: loss_val,
            grad_norm,
        });
    }
    Ok(log)
}

/// Phase one: every parameter trains on single frames.
pub fn pretrain_image_stage(
    model: &mut VideoModel,
    items: &[TrainItem],
    cfg: &PretrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LogLine>> {
    run_phase(model, items, Phase::Image, cfg.image_steps, cfg, schedule)
}

/// Phase two: frame-axis parameters train on clips. The model should
/// have been reloaded with `trainable::temporal_only` first; this
/// function checks that non-temporal parameters are actually frozen.
pub fn pretrain_temporal_stage(
    model: &mut VideoModel,
    items: &[TrainItem],
    cfg: &PretrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LogLine>> {
    let mut leak = None;
    model.visit_params_mut(&mut |name, t| {
        if t.requires_grad() && !crate::unet::is_temporal_param(&name) && leak.is_none() {
            leak = Some(name);
        }
    });
    if let Some(name) = leak {
        return Err(Error::Contract(format!(
            "temporal phase requires frozen base weights, {name} is trainable"
        )));
    }
    run_phase(model, items, Phase::Temporal, cfg.temporal_steps, cfg, schedule)
}

/// Both phases with the freeze in between: train images, round-trip
/// through an archive keeping only frame-axis parameters trainable,
/// train those on clips. Returns the final model and the combined log.
pub fn pretrain(
    mut model: VideoModel,
    items: &[TrainItem],
    cfg: &PretrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(VideoModel, Vec<LogLine>)> {
    let mut log = pretrain_image_stage(&mut model, items, cfg, schedule)?;
    let ar = model.to_archive(&BTreeMap::new());
    let (mut model, _) = VideoModel::from_archive(&ar, &trainable::temporal_only)?;
    log.extend(pretrain_temporal_stage(&mut model, items, cfg, schedule)?);
    Ok((model, log))
}
