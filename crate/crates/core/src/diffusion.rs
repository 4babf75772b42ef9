//! Forward noising, the denoising objective, and the sampling loop.
//!
//! The forward process mixes data with Gaussian noise along a fixed
//! variance schedule; training regresses the injected noise; sampling
//! inverts the process deterministically (or stochastically when `eta`
//! is nonzero) with classifier-free guidance between a conditional and
//! a null prediction. Schedule tables are kept in f64 so that products
//! of two hundred factors agree with closed forms to ~1e-12 even though
//! the tensors themselves are f32.

use crate::error::{Error, Result};
use crate::layout::RegionLayout;
use crate::model::VideoModel;
use crate::rng::{RngStream, Stream};
use crate::tensor::{Graph, Tensor};
use crate::text::{split_composite, PromptAst};
use crate::unet::{CondItem, UNet};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear beta schedule between the two endpoints inclusive. A single
/// step uses `beta_start` alone.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range ({beta_start}, {beta_end}) outside 0 < start <= end < 1"
        )));
    }
    let beta: Vec<f64> = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0f64;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    debug_assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]));
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
    })
}

/// The default training schedule: the usual thousand-step linear range
/// scaled so that shorter schedules reach comparable terminal noise.
pub fn scaled_linear(t_max: usize) -> Result<NoiseSchedule> {
    let k = 1000.0 / t_max as f64;
    make_schedule(t_max, 1e-4 * k, 0.02 * k)
}

impl NoiseSchedule {
    /// Cumulative signal fraction after `t` steps; `t = 0` is clean data.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t > self.t_max {
            return Err(Error::Contract(format!(
                "timestep {t} beyond schedule of {} steps",
                self.t_max
            )));
        }
        Ok(if t == 0 { 1.0 } else { self.alpha_bar[t - 1] })
    }
}

/// Closed-form forward noising: mix `z0` with `eps` at step `t` (1-based).
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Contract("q_sample needs t >= 1".into()));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape()),
        ));
    }
    let ab = s.alpha_bar_at(t)?;
    let (cs, cn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data: Vec<f32> = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| cs * a + cn * b)
        .collect();
    Tensor::new(data, z0.shape())
}

/// Anything that predicts noise from a noisy batch. The test suite
/// substitutes fixed-output stubs for the real denoiser.
pub trait Denoiser {
    fn predict(
        &self,
        g: &mut Graph,
        z_t: &Tensor,
        ts: &[usize],
        cond: &[CondItem],
        temporal: bool,
    ) -> Result<Tensor>;
}

impl Denoiser for UNet {
    fn predict(
        &self,
        g: &mut Graph,
        z_t: &Tensor,
        ts: &[usize],
        cond: &[CondItem],
        temporal: bool,
    ) -> Result<Tensor> {
        self.forward(g, z_t, ts, cond, temporal)
    }
}

impl Denoiser for VideoModel {
    fn predict(
        &self,
        g: &mut Graph,
        z_t: &Tensor,
        ts: &[usize],
        cond: &[CondItem],
        temporal: bool,
    ) -> Result<Tensor> {
        self.unet.forward(g, z_t, ts, cond, temporal)
    }
}

/// Noise the batch to the given timesteps and run the denoiser: the
/// common front half of every training objective. Loss shapes (plain,
/// masked) differ only in what they do with the returned prediction.
#[allow(clippy::too_many_arguments)]
pub fn noised_prediction(
    g: &mut Graph,
    d: &dyn Denoiser,
    z0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    cond: &[CondItem],
    temporal: bool,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let sh = z0.shape().to_vec();
    if sh.len() != 5 {
        return Err(Error::shape(
            "diffusion_loss",
            format!("expected [B, F, C, H, W], got {sh:?}"),
        ));
    }
    let b = sh[0];
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if ts.len() != b {
        return Err(Error::Contract(format!(
            "{b} items but {} timesteps",
            ts.len()
        )));
    }
    let item = z0.numel() / b;
    let mut zt = vec![0.0f32; z0.numel()];
    for (i, &t) in ts.iter().enumerate() {
        let ab = s.alpha_bar_at(t)?;
        if t == 0 {
            return Err(Error::Contract("training timesteps start at 1".into()));
        }
        let (cs, cn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        for j in i * item..(i + 1) * item {
            zt[j] = cs * z0.data()[j] + cn * eps.data()[j];
        }
    }
    let zt = Tensor::new(zt, &sh)?;
    d.predict(g, &zt, ts, cond, temporal)
}

/// Mean squared error between injected and predicted noise at explicit
/// per-item timesteps with explicit noise. The sampled-timestep wrapper
/// below is the training entry point; this one exists so tests can pin
/// the randomness.
pub fn diffusion_loss_at(
    g: &mut Graph,
    d: &dyn Denoiser,
    z0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    cond: &[CondItem],
    temporal: bool,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let pred = noised_prediction(g, d, z0, ts, eps, cond, temporal, s)?;
    let diff = g.sub(&pred, eps)?;
    let sq = g.mul(&diff, &diff)?;
    g.mean_all(&sq)
}

/// Training objective: uniform random timestep per item, fresh noise.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    g: &mut Graph,
    d: &dyn Denoiser,
    z0: &Tensor,
    cond: &[CondItem],
    temporal: bool,
    s: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let b = *z0
        .shape()
        .first()
        .ok_or_else(|| Error::shape("diffusion_loss", "empty shape"))?;
    let ts: Vec<usize> = (0..b).map(|_| rng.below(s.t_max) + 1).collect();
    let eps = Tensor::new(rng.fill_normal(z0.numel()), z0.shape())?;
    diffusion_loss_at(g, d, z0, &ts, &eps, cond, temporal, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// 0 = deterministic; larger values add fresh noise each step.
    pub eta: f32,
    pub cfg_scale: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            eta: 0.0,
            cfg_scale: 3.0,
            seed: 0,
        }
    }
}

/// The decreasing timestep sequence visited by the sampler.
pub fn sample_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Config(format!(
            "sampler steps {steps} outside 1..={t_max}"
        )));
    }
    Ok((1..=steps).map(|i| i * t_max / steps).collect())
}

/// Guidance pair for one denoising step: per-item conditional and null
/// conditioning.
pub struct Guidance<'a> {
    pub cond: Vec<CondItem<'a>>,
    pub null: Vec<CondItem<'a>>,
    pub cfg_scale: f32,
}

fn combine_guided(null: &Tensor, cond: &Tensor, g_scale: f32) -> Result<Tensor> {
    let data: Vec<f32> = null
        .data()
        .iter()
        .zip(cond.data())
        .map(|(n, c)| n + g_scale * (c - n))
        .collect();
    Tensor::new(data, null.shape())
}

/// One reverse step from `t` to `t_prev` (0 = clean). Guidance scales of
/// exactly 0 or 1 evaluate the model once; anything else twice.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    d: &dyn Denoiser,
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    gd: &Guidance,
    temporal: bool,
    s: &NoiseSchedule,
    eta: f32,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if t == 0 || t_prev >= t {
        return Err(Error::Contract(format!(
            "step must go down: t={t}, t_prev={t_prev}"
        )));
    }
    let b = *z_t
        .shape()
        .first()
        .ok_or_else(|| Error::shape("denoise_step", "empty shape"))?;
    let ts = vec![t; b];
    let mut g = Graph::inference();
    let eps_hat = if gd.cfg_scale == 0.0 {
        d.predict(&mut g, z_t, &ts, &gd.null, temporal)?
    } else if gd.cfg_scale == 1.0 {
        d.predict(&mut g, z_t, &ts, &gd.cond, temporal)?
    } else {
        let e_null = d.predict(&mut g, z_t, &ts, &gd.null, temporal)?;
        let e_cond = d.predict(&mut g, z_t, &ts, &gd.cond, temporal)?;
        combine_guided(&e_null, &e_cond, gd.cfg_scale)?
    };
    let ab_t = s.alpha_bar_at(t)?;
    let ab_p = s.alpha_bar_at(t_prev)?;
    let (cs, cn) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    // Stochastic share of the step noise; zero when eta = 0.
    let sigma = if eta > 0.0 {
        eta as f64
            * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt()
            * (1.0 - ab_t / ab_p).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let noise: Vec<f32> = if sigma > 0.0 {
        rng.fill_normal(z_t.numel())
    } else {
        vec![0.0; z_t.numel()]
    };
    let sq = ab_p.sqrt();
    let data: Vec<f32> = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(&noise)
        .map(|((z, e), n)| {
            let z0_hat = (*z as f64 - cn * *e as f64) / cs;
            (sq * z0_hat + dir * *e as f64 + sigma * *n as f64) as f32
        })
        .collect();
    Tensor::new(data, z_t.shape())
}

/// Generate one clip of `frames` frames for a composite prompt. With
/// `use_sdca` the prompt is split per subject and each layout region
/// attends to its own encoding (the background slot, when present, gets
/// the background prompt or the null encoding); otherwise the whole
/// prompt conditions every position. `temporal` off treats frames as
/// independent images. Deterministic in (seed, config, checkpoint).
#[allow(clippy::too_many_arguments)]
pub fn sample_clip(
    model: &VideoModel,
    prompt: &PromptAst,
    layout: &RegionLayout,
    sc: &SamplerConfig,
    s: &NoiseSchedule,
    use_sdca: bool,
    frames: usize,
    temporal: bool,
) -> Result<Tensor> {
    prompt.validate()?;
    let mut g = Graph::inference();
    let cfg = &model.unet.cfg;
    let shape = [1, frames, cfg.in_channels, cfg.height, cfg.width];

    // Encoded conditioning, owned here and borrowed by the step items.
    let mut texts: Vec<Tensor> = Vec::new();
    if use_sdca {
        let (subjects, background) = split_composite(prompt);
        for sp in &subjects {
            texts.push(model.text.encode(&mut g, sp)?);
        }
        if layout.background_slot.is_some() {
            match &background {
                Some(bp) => texts.push(model.text.encode(&mut g, bp)?),
                None => texts.push(model.text.encode_null()),
            }
        }
        if texts.len() != layout.slot_count() {
            return Err(Error::Layout(format!(
                "{} prompt slots for a layout with {} regions",
                texts.len(),
                layout.slot_count()
            )));
        }
    } else {
        texts.push(model.text.encode(&mut g, prompt)?);
    }
    let null = model.text.encode_null();

    let cond_item = || -> CondItem {
        if use_sdca {
            CondItem::routed(texts.iter().collect(), layout)
        } else {
            CondItem::vanilla(&texts[0])
        }
    };

    let mut rng = RngStream::new(sc.seed, Stream::Sample);
    let mut z = Tensor::new(rng.fill_normal(shape.iter().product()), &shape)?;
    let steps = sample_timesteps(s.t_max, sc.steps)?;
    for (i, &t) in steps.iter().enumerate().rev() {
        let t_prev = if i == 0 { 0 } else { steps[i - 1] };
        let gd = Guidance {
            cond: vec![cond_item()],
            null: vec![CondItem::vanilla(&null)],
            cfg_scale: sc.cfg_scale,
        };
        z = denoise_step(model, &z, t, t_prev, &gd, temporal, s, sc.eta, &mut rng)?;
    }
    let clamped = z.clamp(-1.0, 1.0);
    let mut g2 = Graph::inference();
    g2.reshape(&clamped, &shape[1..])
}

/// `sample_clip` at the model's native frame count with temporal
/// attention on: the standard way to generate a video.
pub fn sample_video(
    model: &VideoModel,
    prompt: &PromptAst,
    layout: &RegionLayout,
    sc: &SamplerConfig,
    s: &NoiseSchedule,
    use_sdca: bool,
) -> Result<Tensor> {
    let frames = model.unet.cfg.frames;
    sample_clip(model, prompt, layout, sc, s, use_sdca, frames, true)
}
