//! Synthetic co-occurrence composites and motion-prior snapshots: the
//! two auxiliary datasets customization trains on besides the subject
//! references themselves.
//!
//! Composites paste segmented reference sprites into their layout
//! regions over a background, pixel-for-pixel: wherever a subject mask
//! is set the composite carries the reference pixel, everywhere else
//! the background. Motion snapshots are single frames sampled from the
//! pretrained model for category prompts that never mention identity
//! tokens.

use crate::diffusion::{sample_clip, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::layout::{Region, RegionLayout};
use crate::model::VideoModel;
use crate::rng::{RngStream, Stream};
use crate::scene::{bytes_to_tensor, render_background, SubjectSpec};
use crate::tensor::Tensor;
use crate::text::{ActionWord, BackgroundWord, PromptAst, ShapeWord};

/// Alpha-threshold segmentation of an RGBA reference: the subject is
/// wherever alpha exceeds one half.
pub fn segment_subject(rgba: &Tensor) -> Result<Tensor> {
    let sh = rgba.shape().to_vec();
    if sh.len() != 3 || sh[0] != 4 {
        return Err(Error::shape(
            "segment_subject",
            format!("expected [4, H, W], got {sh:?}"),
        ));
    }
    let hw = sh[1] * sh[2];
    let data = rgba.data()[3 * hw..]
        .iter()
        .map(|&a| if a > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(data, &[sh[1], sh[2]])
}

/// Area-average a 0/1 mask to a coarser grid, then threshold at half
/// coverage. Identity when the resolutions match.
pub fn downsample_mask(mask: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let sh = mask.shape().to_vec();
    if sh.len() != 2 {
        return Err(Error::shape("downsample_mask", format!("expected [H, W], got {sh:?}")));
    }
    let (h, w) = (sh[0], sh[1]);
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::shape(
            "downsample_mask",
            format!("{h}x{w} does not divide into {th}x{tw}"),
        ));
    }
    let (fy, fx) = (h / th, w / tw);
    let d = mask.data();
    let mut out = vec![0.0f32; th * tw];
    for y in 0..th {
        for x in 0..tw {
            let mut acc = 0.0f32;
            for dy in 0..fy {
                for dx in 0..fx {
                    acc += d[(y * fy + dy) * w + (x * fx + dx)];
                }
            }
            out[y * tw + x] = if acc / (fy * fx) as f32 > 0.5 { 1.0 } else { 0.0 };
        }
    }
    Tensor::new(out, &[th, tw])
}

/// References for compositing at scene scale: the sprite is rendered
/// into the smallest patch holding its on-frame diameter.
pub fn scene_references(subject: &SubjectSpec, h: usize, w: usize) -> Result<Vec<Tensor>> {
    let diameter = subject.size * h.min(w) as f32;
    let patch = diameter.ceil() as usize + 1;
    let scaled = SubjectSpec {
        size: diameter / patch as f32,
        ..subject.clone()
    };
    crate::scene::reference_set(&scaled, patch)
}

/// Pixel rectangle of a region, snapped exactly like layout
/// rasterization: half-open `[x0, x1) x [y0, y1)`.
pub fn region_rect_px(region: &Region, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let snap = |edge: f32, cells: usize| ((edge as f64 * cells as f64).ceil() as usize).min(cells);
    (
        snap(region.rect[0], w),
        snap(region.rect[2], w),
        snap(region.rect[1], h),
        snap(region.rect[3], h),
    )
}

/// One composite: the image and one full-frame mask per subject.
pub struct MixSample {
    /// `[3, H, W]`.
    pub image: Tensor,
    /// `masks[i]` is the `[H, W]` mask of subject `i`; pairwise disjoint.
    pub masks: Vec<Tensor>,
}

pub struct DMix {
    pub samples: Vec<MixSample>,
    pub subjects: usize,
}

/// Where composite backgrounds come from: procedural renders, or single
/// frames sampled from a pretrained model on background-only prompts.
pub enum BackgroundSource<'a> {
    Procedural,
    Model {
        model: &'a VideoModel,
        schedule: &'a NoiseSchedule,
        sampler: SamplerConfig,
    },
}

fn background_image(
    source: &BackgroundSource,
    index: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Tensor> {
    let word = BackgroundWord::ALL[index % BackgroundWord::ALL.len()];
    match source {
        BackgroundSource::Procedural => Ok(bytes_to_tensor(&render_background(word, h, w), h, w)),
        BackgroundSource::Model {
            model,
            schedule,
            sampler,
        } => {
            let cfg = &model.unet.cfg;
            if cfg.height != h || cfg.width != w {
                return Err(Error::Contract(format!(
                    "background model renders {}x{}, composites need {h}x{w}",
                    cfg.height, cfg.width
                )));
            }
            let per_sample = SamplerConfig {
                seed: seed ^ index as u64,
                ..sampler.clone()
            };
            let prompt = PromptAst::background_only(word);
            let clip = sample_clip(
                model,
                &prompt,
                &RegionLayout::uniform(1)?,
                &per_sample,
                schedule,
                false,
                1,
                false,
            )?;
            let hw = 3 * h * w;
            Tensor::new(clip.data()[..hw].to_vec(), &[3, h, w])
        }
    }
}

/// Build `count` composites of the given subjects, subject `i` placed
/// inside region `i` of the layout. Each subject needs 3 to 5 RGBA
/// references; one is chosen (and jittered inside the region) per
/// composite. Errors if a reference patch does not fit its region.
pub fn synth_mix(
    subject_refs: &[Vec<Tensor>],
    background: &BackgroundSource,
    count: usize,
    layout: &RegionLayout,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<DMix> {
    layout.validate()?;
    let n = subject_refs.len();
    if n == 0 || count == 0 {
        return Err(Error::Contract("composites need subjects and a positive count".into()));
    }
    for (i, refs) in subject_refs.iter().enumerate() {
        if !(3..=5).contains(&refs.len()) {
            return Err(Error::Contract(format!(
                "subject {i} has {} references, want 3 to 5",
                refs.len()
            )));
        }
    }
    let mut region_of = Vec::with_capacity(n);
    for i in 0..n {
        let region = layout
            .regions
            .iter()
            .find(|r| r.slot == i)
            .ok_or_else(|| Error::Layout(format!("layout has no region for subject {i}")))?;
        region_of.push(region);
    }

    let mut samples = Vec::with_capacity(count);
    for r in 0..count {
        let mut rng = RngStream::item(seed, Stream::Mix, r as u64);
        let mut image = background_image(background, r, h, w, seed)?.data().to_vec();
        let mut masks: Vec<Vec<f32>> = Vec::with_capacity(n);
        let mut patch_rects: Vec<(usize, usize, usize, usize)> = Vec::new();
        for i in 0..n {
            let refs = &subject_refs[i];
            let reference = &refs[rng.below(refs.len())];
            let rsh = reference.shape().to_vec();
            let (ph, pw) = (rsh[1], rsh[2]);
            let (rx0, rx1, ry0, ry1) = region_rect_px(region_of[i], h, w);
            let (rw, rh) = (rx1 - rx0, ry1 - ry0);
            if pw > rw || ph > rh {
                return Err(Error::Layout(format!(
                    "subject {i} patch {pw}x{ph} exceeds its {rw}x{rh} region"
                )));
            }
            let ox = rx0 + rng.below(rw - pw + 1);
            let oy = ry0 + rng.below(rh - ph + 1);
            if patch_rects
                .iter()
                .any(|&(px0, px1, py0, py1)| ox < px1 && px0 < ox + pw && oy < py1 && py0 < oy + ph)
            {
                return Err(Error::Layout(format!(
                    "subject {i} patch overlaps an earlier placement"
                )));
            }
            patch_rects.push((ox, ox + pw, oy, oy + ph));

            let seg = segment_subject(reference)?;
            let rd = reference.data();
            let sd = seg.data();
            let mut mask = vec![0.0f32; h * w];
            for py in 0..ph {
                for px in 0..pw {
                    if sd[py * pw + px] > 0.5 {
                        let (fx, fy) = (ox + px, oy + py);
                        mask[fy * w + fx] = 1.0;
                        for c in 0..3 {
                            image[c * h * w + fy * w + fx] = rd[c * ph * pw + py * pw + px];
                        }
                    }
                }
            }
            masks.push(mask);
        }
        samples.push(MixSample {
            image: Tensor::new(image, &[3, h, w])?,
            masks: masks
                .into_iter()
                .map(|m| Tensor::new(m, &[h, w]))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    Ok(DMix {
        samples,
        subjects: n,
    })
}

/// One motion-prior snapshot: a sampled frame and the per-slot category
/// prompts (never identity tokens) that conditioned it.
pub struct MotionSample {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub prompts: Vec<PromptAst>,
    pub seed: u64,
}

pub struct DMotion {
    pub samples: Vec<MotionSample>,
}

/// Sample `count` single frames from the pretrained model with routed
/// conditioning on "a <category> <action>" prompts, actions drawn per
/// slot. Sample `k` depends only on `(seed, k)`, not on `count`.
pub fn gen_motion_prior(
    model: &VideoModel,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    categories: &[ShapeWord],
    layout: &RegionLayout,
    count: usize,
    seed: u64,
) -> Result<DMotion> {
    if categories.is_empty() || count == 0 {
        return Err(Error::Contract("motion prior needs categories and a positive count".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = RngStream::item(seed, Stream::Motion, k as u64);
        let prompts: Vec<PromptAst> = categories
            .iter()
            .map(|&shape| {
                PromptAst::single(crate::text::SubjectClause {
                    identity: None,
                    shape,
                    action: Some(ActionWord::ALL[rng.below(ActionWord::ALL.len())]),
                })
            })
            .collect();
        let composite = PromptAst {
            clauses: prompts.iter().map(|p| p.clauses[0]).collect(),
            background: None,
        };
        let per_sample = SamplerConfig {
            seed: rng.next_u64(),
            ..sampler.clone()
        };
        let clip = sample_clip(model, &composite, layout, &per_sample, schedule, true, 1, false)?;
        let cfg = &model.unet.cfg;
        let hw = 3 * cfg.height * cfg.width;
        samples.push(MotionSample {
            image: Tensor::new(clip.data()[..hw].to_vec(), &[3, cfg.height, cfg.width])?,
            prompts,
            seed: per_sample.seed,
        });
    }
    Ok(DMotion { samples })
}
