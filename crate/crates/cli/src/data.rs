//! Corpus synthesis and two-stage base training.

use crate::util::{begin_run, finish_run, read_json, sibling, write_json, ConfigArgs, RunStamp};
use spritediff_core::checkpoint::Archive;
use spritediff_core::config::{ExperimentConfig, CODE_VERSION};
use spritediff_core::model::{trainable, VideoModel};
use spritediff_core::pretrain::{
    loss_ratio, pretrain_image_stage, pretrain_temporal_stage, train_items, LogLine,
};
use spritediff_core::scene::corpus::gen_corpus;
use spritediff_core::scene::io::{read_corpus, read_manifest};
use spritediff_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Corpus directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth_corpus(args: SynthArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let stamp = RunStamp::new("synth-corpus", &cfg.hash());
    let stamp_path = args.out.join("run.json");
    if begin_run(&stamp_path, &stamp)? && read_manifest(&args.out).is_ok() {
        println!("already complete: {}", args.out.display());
        return Ok(());
    }
    let manifest = gen_corpus(&args.out, &cfg.corpus, cfg.seed)?;
    finish_run(&stamp_path, &stamp)?;
    println!(
        "wrote {} items ({} frames of {}x{}) to {}",
        manifest.items,
        manifest.frames,
        manifest.height,
        manifest.width,
        args.out.display()
    );
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Corpus directory written by synth-corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write; a part-trained file here is resumed.
    #[arg(long)]
    pub out: PathBuf,
}

/// Meta entries stamped into every checkpoint this tool writes. The
/// full config rides along so sampling commands need no config flag.
pub fn checkpoint_meta(cfg: &ExperimentConfig, stage: &str) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("stage".into(), stage.into());
    meta.insert("config".into(), serde_json::to_string(cfg).expect("config serializes"));
    meta.insert("config_hash".into(), cfg.hash());
    meta.insert("code_version".into(), CODE_VERSION.into());
    meta
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let schedule = cfg.schedule()?;
    let hash = cfg.hash();
    let log_path = sibling(&args.out, ".log.json");

    // Resume state lives in the checkpoint itself: its meta says which
    // stages already ran and under which config.
    let mut log: Vec<LogLine> = Vec::new();
    let mut image_done = false;
    let mut model = if args.out.exists() {
        let ar = Archive::load(&args.out)?;
        if ar.meta.get("config_hash") != Some(&hash) {
            return Err(Error::Checkpoint(format!(
                "{} was trained under a different config; refusing to overwrite",
                args.out.display()
            )));
        }
        match ar.meta.get("stage").map(String::as_str) {
            Some("temporal") => {
                println!("already complete: {}", args.out.display());
                return Ok(());
            }
            Some("image") => {
                image_done = true;
                log = read_json(&log_path).unwrap_or_default();
                let (m, _) = VideoModel::from_archive(&ar, &trainable::temporal_only)?;
                m
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "{} is not a stage checkpoint (stage {other:?})",
                    args.out.display()
                )))
            }
        }
    } else {
        VideoModel::init(cfg.model, cfg.seed)?
    };

    let (manifest, items) = read_corpus(&args.data)?;
    if (manifest.frames, manifest.height, manifest.width)
        != (cfg.model.frames, cfg.model.height, cfg.model.width)
    {
        return Err(Error::Config(format!(
            "corpus geometry {}x{}x{} does not match model {}x{}x{}",
            manifest.frames,
            manifest.height,
            manifest.width,
            cfg.model.frames,
            cfg.model.height,
            cfg.model.width
        )));
    }
    if manifest.items != cfg.corpus.items || manifest.seed != cfg.seed {
        return Err(Error::Config(format!(
            "corpus at {} ({} items, seed {}) was not generated by this config",
            args.data.display(),
            manifest.items,
            manifest.seed
        )));
    }
    let items = train_items(&items)?;

    if !image_done {
        log.extend(pretrain_image_stage(&mut model, &items, &cfg.pretrain, &schedule)?);
        model.save(&args.out, &checkpoint_meta(&cfg, "image"))?;
        write_json(&log_path, &log)?;
        // The freeze is structural: reload the archive just written
        // with only frame-axis parameters trainable.
        let ar = Archive::load(&args.out)?;
        let (m, _) = VideoModel::from_archive(&ar, &trainable::temporal_only)?;
        model = m;
    }
    log.extend(pretrain_temporal_stage(&mut model, &items, &cfg.pretrain, &schedule)?);
    model.save(&args.out, &checkpoint_meta(&cfg, "temporal"))?;
    write_json(&log_path, &log)?;
    println!(
        "pretrained {} steps, loss ratio {:.3}, checkpoint {}",
        log.len(),
        loss_ratio(&log),
        args.out.display()
    );
    Ok(())
}
