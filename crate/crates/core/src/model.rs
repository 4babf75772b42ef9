//! The full generator: text encoder plus denoiser, with checkpointing.
//!
//! A checkpoint archive stores every parameter by its visit name along
//! with the denoiser configuration and the vocabulary, so a loaded model
//! is usable without any side channel. Loading decides per parameter
//! whether it is trainable, which is how the training phases freeze
//! parts of the network: the temporal stage trains only frame-axis
//! blocks, and customization trains only the attached adapters.

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::rng::{RngStream, Stream};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, Vocabulary};
use crate::unet::{UNet, UNetConfig};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_VERSION: &str = "1";

pub struct VideoModel {
    pub text: TextEncoder,
    pub unet: UNet,
    /// (rank, alpha) when adapters are attached.
    pub lora: Option<(usize, f32)>,
}

impl VideoModel {
    /// Fresh model, all parameters trainable. The text encoder consumes
    /// the stream before the denoiser, so both are fixed by the seed.
    pub fn init(cfg: UNetConfig, seed: u64) -> Result<VideoModel> {
        let mut rng = RngStream::new(seed, Stream::Init);
        let text = TextEncoder::init(&mut rng);
        let unet = UNet::init(cfg, &mut rng)?;
        Ok(VideoModel {
            text,
            unet,
            lora: None,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.text.vocab
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.text.visit_params_mut("text", f);
        self.unet.visit_params_mut("unet", f);
    }

    /// Attach adapters to every cross-attention projection in the
    /// denoiser and every attention projection in the text encoder.
    pub fn attach_lora(&mut self, rank: usize, alpha: f32, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Contract("adapters already attached".into()));
        }
        let mut rng = RngStream::new(seed, Stream::Init);
        self.text.attach_lora(rank, alpha, &mut rng)?;
        self.unet.attach_lora(rank, alpha, &mut rng)?;
        self.lora = Some((rank, alpha));
        Ok(())
    }

    /// Fold adapters into the base weights and drop them.
    pub fn merge_lora(&mut self) {
        self.text.merge_lora();
        self.unet.merge_lora();
        self.lora = None;
    }

    /// Number of scalar parameters.
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params_mut(&mut |_, t| n += t.numel());
        n
    }

    /// Drop all accumulated gradients.
    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    /// Clip the global gradient norm of trainable parameters to
    /// `max_norm`, then apply one optimizer update per parameter that
    /// holds a gradient, with a per-parameter learning rate. Returns the
    /// pre-clip gradient norm. Gradients are cleared afterwards.
    pub fn apply_step(
        &mut self,
        opt: &mut crate::optim::AdamW,
        max_norm: f32,
        lr_for: &dyn Fn(&str) -> f32,
    ) -> Result<f32> {
        let mut views: Vec<Tensor> = Vec::new();
        self.visit_params_mut(&mut |_, t| {
            if t.requires_grad() {
                views.push(t.clone());
            }
        });
        let refs: Vec<&Tensor> = views.iter().collect();
        let norm = crate::optim::global_grad_norm(&refs);
        if max_norm > 0.0 {
            crate::optim::clip_grad_norm(&refs, max_norm);
        }
        let mut result = Ok(());
        self.visit_params_mut(&mut |name, t| {
            if result.is_ok() && t.requires_grad() {
                if let Err(e) = opt.step_param(&name, t, lr_for(&name)) {
                    result = Err(e);
                }
            }
        });
        result?;
        self.zero_grads();
        Ok(norm)
    }

    pub fn to_archive(&mut self, extra_meta: &BTreeMap<String, String>) -> Archive {
        let mut ar = Archive::new();
        ar.meta.insert("format_version".into(), FORMAT_VERSION.into());
        ar.meta.insert(
            "unet_config".into(),
            serde_json::to_string(&self.unet.cfg).expect("config serializes"),
        );
        ar.meta.insert("vocab".into(), self.text.vocab.to_json());
        if let Some((rank, alpha)) = self.lora {
            ar.meta.insert("lora_rank".into(), rank.to_string());
            ar.meta.insert("lora_alpha".into(), format!("{alpha}"));
        }
        for (k, v) in extra_meta {
            ar.meta.insert(k.clone(), v.clone());
        }
        self.visit_params_mut(&mut |name, t| {
            ar.put(&name, t);
        });
        ar
    }

    pub fn save(&mut self, path: &Path, extra_meta: &BTreeMap<String, String>) -> Result<()> {
        self.to_archive(extra_meta).save(path)
    }

    /// Rebuild a model from an archive. `trainable` decides, per visit
    /// name, which loaded parameters accept gradients.
    pub fn from_archive(
        ar: &Archive,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(VideoModel, BTreeMap<String, String>)> {
        let version = ar
            .meta
            .get("format_version")
            .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {version}"
            )));
        }
        let cfg_json = ar
            .meta
            .get("unet_config")
            .ok_or_else(|| Error::Checkpoint("missing unet_config".into()))?;
        let cfg: UNetConfig = serde_json::from_str(cfg_json)?;
        let vocab_json = ar
            .meta
            .get("vocab")
            .ok_or_else(|| Error::Checkpoint("missing vocab".into()))?;
        let vocab = Vocabulary::from_json(vocab_json)?;
        let mut model = VideoModel::init(cfg, 0)?;
        if model.text.vocab != vocab {
            return Err(Error::Checkpoint("vocabulary mismatch".into()));
        }
        match (ar.meta.get("lora_rank"), ar.meta.get("lora_alpha")) {
            (Some(r), Some(a)) => {
                let rank: usize = r
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad lora_rank {r}")))?;
                let alpha: f32 = a
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad lora_alpha {a}")))?;
                model.attach_lora(rank, alpha, 0)?;
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint("incomplete adapter metadata".into())),
        }
        let mut used = 0usize;
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match ar.get(&name) {
                Some(stored) => {
                    if stored.shape() != t.shape() {
                        failure = Some(Error::Checkpoint(format!(
                            "{name}: stored shape {:?} does not match {:?}",
                            stored.shape(),
                            t.shape()
                        )));
                        return;
                    }
                    used += 1;
                    let fresh = Tensor::new(stored.data().to_vec(), stored.shape())
                        .expect("validated shape");
                    *t = if trainable(&name) { fresh.trainable() } else { fresh };
                }
                None => failure = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if used != ar.len() {
            return Err(Error::Checkpoint(format!(
                "archive holds {} tensors but the model uses {used}",
                ar.len()
            )));
        }
        Ok((model, ar.meta.clone()))
    }

    pub fn load(
        path: &Path,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(VideoModel, BTreeMap<String, String>)> {
        let ar = Archive::load(path)?;
        VideoModel::from_archive(&ar, trainable)
    }
}

/// Trainability filters for the phases of the pipeline.
pub mod trainable {
    /// Everything learns (image-stage pretraining keeps temporal blocks
    /// gated shut but they may still receive gradients; the image stage
    /// simply never routes through them).
    pub fn all(_name: &str) -> bool {
        true
    }

    /// Nothing learns: sampling and evaluation.
    pub fn none(_name: &str) -> bool {
        false
    }

    /// Only frame-axis blocks learn: temporal pretraining stage.
    pub fn temporal_only(name: &str) -> bool {
        crate::unet::is_temporal_param(name)
    }

    /// Only adapters learn: customization. Temporal blocks and all base
    /// weights stay frozen.
    pub fn adapters_only(name: &str) -> bool {
        name.contains("lora_")
    }
}
