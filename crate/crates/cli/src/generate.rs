//! Clip sampling from a checkpoint: single prompts and ordered
//! multi-entry scripts that share one customized model.

use crate::util::{
    begin_run, finish_run, layout_from_value, parse_layout, sha256_file, sha256_hex,
    subject_slots, write_json, OverrideArgs, RunStamp,
};
use serde::{Deserialize, Serialize};
use spritediff_core::config::{ExperimentConfig, CODE_VERSION};
use spritediff_core::diffusion::{sample_video, SamplerConfig};
use spritediff_core::eval::frame_slice;
use spritediff_core::layout::RegionLayout;
use spritediff_core::model::{trainable, VideoModel};
use spritediff_core::scene::io::write_frame_png;
use spritediff_core::text::parse_prompt;
use spritediff_core::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(clap::Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint from pretrain or finetune.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// `uniform:N`, `quad:N`, or a layout JSON file.
    #[arg(long)]
    pub layout: String,
    /// Sampling seed for this clip.
    #[arg(long)]
    pub seed: u64,
    /// Directory for frames and sidecar.
    #[arg(long)]
    pub out: PathBuf,
    /// Sample through plain cross-attention instead of region routing.
    #[arg(long)]
    pub no_sdca: bool,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

/// Everything a reader needs to reproduce or interpret one clip.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClipSidecar {
    pub prompt: String,
    pub layout: RegionLayout,
    pub seed: u64,
    pub use_sdca: bool,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub config_hash: String,
    pub code_version: String,
    pub checkpoint_hash: String,
}

/// Load a checkpoint plus the experiment config embedded in it, with
/// command-line overrides applied on top.
pub fn load_for_sampling(
    path: &Path,
    overrides: &OverrideArgs,
) -> Result<(VideoModel, ExperimentConfig, String)> {
    let (model, meta) = VideoModel::load(path, &trainable::none)?;
    let raw = meta
        .get("config")
        .ok_or_else(|| Error::Checkpoint(format!("{} lacks an embedded config", path.display())))?;
    let stored: ExperimentConfig = serde_json::from_str(raw)?;
    let cfg = overrides.apply(&stored)?;
    Ok((model, cfg, sha256_file(path)?))
}

/// Sample one clip into `dir` as numbered frames plus a sidecar.
#[allow(clippy::too_many_arguments)]
pub fn render_clip(
    model: &VideoModel,
    cfg: &ExperimentConfig,
    checkpoint_hash: &str,
    prompt: &str,
    layout: &RegionLayout,
    seed: u64,
    use_sdca: bool,
    dir: &Path,
) -> Result<ClipSidecar> {
    let ast = parse_prompt(prompt)?;
    let slots = subject_slots(layout);
    if ast.clauses.len() != slots {
        return Err(Error::Layout(format!(
            "prompt has {} subject clauses but the layout has {slots} subject regions",
            ast.clauses.len()
        )));
    }
    let schedule = cfg.schedule()?;
    let sc = SamplerConfig { seed, ..cfg.sampler };
    let clip = sample_video(model, &ast, layout, &sc, &schedule, use_sdca)?;
    std::fs::create_dir_all(dir)?;
    let (f, h, w) = (cfg.model.frames, cfg.model.height, cfg.model.width);
    for i in 0..f {
        write_frame_png(&dir.join(format!("frame_{i}.png")), &frame_slice(&clip, i, h, w)?)?;
    }
    let sidecar = ClipSidecar {
        prompt: prompt.into(),
        layout: layout.clone(),
        seed,
        use_sdca,
        frames: f,
        height: h,
        width: w,
        config_hash: cfg.hash(),
        code_version: CODE_VERSION.into(),
        checkpoint_hash: checkpoint_hash.into(),
    };
    write_json(&dir.join("clip.json"), &sidecar)?;
    Ok(sidecar)
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let (model, cfg, ckpt_hash) = load_for_sampling(&args.checkpoint, &args.overrides)?;
    let layout = parse_layout(&args.layout)?;
    let stamp = RunStamp::new("generate", &cfg.hash())
        .input("checkpoint", &ckpt_hash)
        .input("prompt", &args.prompt)
        .input("layout", serde_json::to_string(&layout)?)
        .input("seed", args.seed.to_string())
        .input("use_sdca", (!args.no_sdca).to_string());
    let stamp_path = args.out.join("run.json");
    if begin_run(&stamp_path, &stamp)? && args.out.join("clip.json").exists() {
        println!("already complete: {}", args.out.display());
        return Ok(());
    }
    render_clip(
        &model,
        &cfg,
        &ckpt_hash,
        &args.prompt,
        &layout,
        args.seed,
        !args.no_sdca,
        &args.out,
    )?;
    finish_run(&stamp_path, &stamp)?;
    println!("wrote {} frames to {}", cfg.model.frames, args.out.display());
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct StoryArgs {
    /// Checkpoint shared by every entry.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON list of `{prompt, layout, seed}` entries, in order.
    #[arg(long)]
    pub script: PathBuf,
    /// Directory receiving one clip directory per entry.
    #[arg(long)]
    pub out: PathBuf,
    /// Sample through plain cross-attention instead of region routing.
    #[arg(long)]
    pub no_sdca: bool,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

/// One story beat: a prompt sampled under its own layout and seed.
#[derive(Debug, Deserialize)]
pub struct ScriptEntry {
    pub prompt: String,
    pub layout: serde_json::Value,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct StoryEntrySummary {
    index: usize,
    dir: String,
    prompt: String,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct StoryManifest {
    entries: Vec<StoryEntrySummary>,
    config_hash: String,
    code_version: String,
    checkpoint_hash: String,
}

pub fn story(args: StoryArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.script)
        .map_err(|e| Error::Checkpoint(format!("cannot read script {}: {e}", args.script.display())))?;
    let entries: Vec<ScriptEntry> = serde_json::from_str(&text)?;
    if entries.is_empty() {
        return Err(Error::Config("story script has no entries".into()));
    }
    let (model, cfg, ckpt_hash) = load_for_sampling(&args.checkpoint, &args.overrides)?;
    let stamp = RunStamp::new("story", &cfg.hash())
        .input("checkpoint", &ckpt_hash)
        .input("script", sha256_hex(text.as_bytes()))
        .input("use_sdca", (!args.no_sdca).to_string());
    let stamp_path = args.out.join("run.json");
    if begin_run(&stamp_path, &stamp)? && args.out.join("story.json").exists() {
        println!("already complete: {}", args.out.display());
        return Ok(());
    }
    let mut summaries = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let layout = layout_from_value(&entry.layout)?;
        let name = format!("entry_{i}");
        render_clip(
            &model,
            &cfg,
            &ckpt_hash,
            &entry.prompt,
            &layout,
            entry.seed,
            !args.no_sdca,
            &args.out.join(&name),
        )?;
        summaries.push(StoryEntrySummary {
            index: i,
            dir: name,
            prompt: entry.prompt.clone(),
            seed: entry.seed,
        });
    }
    let manifest = StoryManifest {
        entries: summaries,
        config_hash: cfg.hash(),
        code_version: CODE_VERSION.into(),
        checkpoint_hash: ckpt_hash,
    };
    write_json(&args.out.join("story.json"), &manifest)?;
    finish_run(&stamp_path, &stamp)?;
    println!("wrote {} clips to {}", entries.len(), args.out.display());
    Ok(())
}
