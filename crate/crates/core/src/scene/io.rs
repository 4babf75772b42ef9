//! Dataset files on disk: PNG frames and masks plus JSON metadata,
//! one directory per item under `items/<index>/`.
//!
//! Frames are 8-bit RGB and masks 8-bit grayscale (0 or 255), so a
//! write-read cycle reproduces tensors bit for bit.

use crate::error::{Error, Result};
use crate::scene::{color_to_f32, tensor_to_bytes, SceneSpec};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemMeta {
    pub caption: String,
    pub scene: SceneSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub items: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

pub fn item_dir(root: &Path, index: usize) -> PathBuf {
    root.join("items").join(index.to_string())
}

pub fn write_frame_png(path: &Path, frame: &Tensor) -> Result<()> {
    let sh = frame.shape().to_vec();
    let px = tensor_to_bytes(frame)?;
    let (h, w) = (sh[1], sh[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Rgb(px[y * w + x]));
        }
    }
    buf.save(path).map_err(|e| Error::Checkpoint(format!("png write {path:?}: {e}")))
}

pub fn read_frame_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Checkpoint(format!("png read {path:?}: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = color_to_f32(p[c]);
            }
        }
    }
    Tensor::new(data, &[3, h, w])
}

pub fn write_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let sh = mask.shape().to_vec();
    if sh.len() != 2 {
        return Err(Error::shape("write_mask_png", format!("expected [H, W], got {sh:?}")));
    }
    let (h, w) = (sh[0], sh[1]);
    let d = mask.data();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if d[y * w + x] > 0.5 { 255 } else { 0 };
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::Checkpoint(format!("png write {path:?}: {e}")))
}

pub fn read_mask_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Checkpoint(format!("png read {path:?}: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = if img.get_pixel(x as u32, y as u32)[0] > 127 { 1.0 } else { 0.0 };
        }
    }
    Tensor::new(data, &[h, w])
}

/// Write one rendered item: frames, per-subject masks, metadata.
pub fn write_item(root: &Path, index: usize, meta: &ItemMeta) -> Result<()> {
    let dir = item_dir(root, index);
    std::fs::create_dir_all(&dir)?;
    let video = meta.scene.render_video()?;
    let sh = video.frames.shape().to_vec();
    let (frames, h, w) = (sh[0], sh[2], sh[3]);
    let hw = 3 * h * w;
    for f in 0..frames {
        let frame = Tensor::new(
            video.frames.data()[f * hw..(f + 1) * hw].to_vec(),
            &[3, h, w],
        )?;
        write_frame_png(&dir.join(format!("frame_{f}.png")), &frame)?;
        for (s, m) in video.masks[f].iter().enumerate() {
            write_mask_png(&dir.join(format!("mask_{s}_{f}.png")), m)?;
        }
    }
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

/// An item loaded back from disk for training.
pub struct LoadedItem {
    /// `[F, 3, H, W]`.
    pub video: Tensor,
    pub meta: ItemMeta,
}

pub fn read_item(root: &Path, index: usize) -> Result<LoadedItem> {
    let dir = item_dir(root, index);
    let meta: ItemMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let frames = meta.scene.frames;
    let (h, w) = (meta.scene.height, meta.scene.width);
    let mut data = Vec::with_capacity(frames * 3 * h * w);
    for f in 0..frames {
        let t = read_frame_png(&dir.join(format!("frame_{f}.png")))?;
        if t.shape() != [3, h, w] {
            return Err(Error::Checkpoint(format!(
                "frame {f} of item {index} has shape {:?}, meta says {h}x{w}",
                t.shape()
            )));
        }
        data.extend_from_slice(&t.data());
    }
    Ok(LoadedItem {
        video: Tensor::new(data, &[frames, 3, h, w])?,
        meta,
    })
}

pub fn read_item_masks(root: &Path, index: usize) -> Result<Vec<Vec<Tensor>>> {
    let dir = item_dir(root, index);
    let meta: ItemMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let subjects = meta.scene.placements.len();
    let mut all = Vec::with_capacity(meta.scene.frames);
    for f in 0..meta.scene.frames {
        let mut per_frame = Vec::with_capacity(subjects);
        for s in 0..subjects {
            per_frame.push(read_mask_png(&dir.join(format!("mask_{s}_{f}.png")))?);
        }
        all.push(per_frame);
    }
    Ok(all)
}

pub fn write_manifest(root: &Path, manifest: &CorpusManifest) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(root.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<CorpusManifest> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("missing corpus manifest {path:?}: {e}")))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load every item listed in a corpus directory's manifest.
pub fn read_corpus(root: &Path) -> Result<(CorpusManifest, Vec<LoadedItem>)> {
    let manifest = read_manifest(root)?;
    let items = (0..manifest.items)
        .map(|i| read_item(root, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, items))
}
