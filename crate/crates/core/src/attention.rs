//! Cross-attention from feature-map queries to text sequences, in two
//! flavors: vanilla (every query attends to one shared text) and
//! region-routed (queries are partitioned by a [`RegionLayout`] and each
//! region attends only to its own text, all regions sharing one set of
//! projection weights).
//!
//! Region routing works by gathering each region's query rows, running
//! ordinary cross-attention on them, and scattering the results back to
//! their original positions. Because gather and scatter are exact row
//! moves, a single-region layout is bit-identical to the vanilla path,
//! and region i's output cannot depend on any other region's text.

use crate::error::{Error, Result};
use crate::layout::RegionLayout;
use crate::lora::Linear;
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};

/// Shared projection weights: queries from `d_model`, keys and values
/// from `d_text`, output back to `d_model`.
#[derive(Debug)]
pub struct AttnProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnProjections {
    pub fn init(d_model: usize, d_text: usize, d_attn: usize, rng: &mut RngStream) -> AttnProjections {
        let proj = |rng: &mut RngStream, din: usize, dout: usize| {
            let std = 1.0 / (din as f32).sqrt();
            let w = Tensor::new(
                rng.fill_normal(din * dout).iter().map(|v| v * std).collect(),
                &[din, dout],
            )
            .unwrap()
            .trainable();
            Linear::new(w, None)
        };
        AttnProjections {
            q: proj(rng, d_model, d_attn),
            k: proj(rng, d_text, d_attn),
            v: proj(rng, d_text, d_attn),
            o: proj(rng, d_attn, d_model),
        }
    }

    pub fn d_attn(&self) -> usize {
        self.q.d_out()
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.q.visit_params_mut(&format!("{prefix}.q"), f);
        self.k.visit_params_mut(&format!("{prefix}.k"), f);
        self.v.visit_params_mut(&format!("{prefix}.v"), f);
        self.o.visit_params_mut(&format!("{prefix}.o"), f);
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f32, rng: &mut RngStream) -> Result<()> {
        for lin in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            lin.attach_lora(rank, alpha, rng)?;
        }
        Ok(())
    }

    pub fn merge_and_clear_lora(&mut self) {
        for lin in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            lin.merge_lora();
            lin.clear_lora();
        }
    }
}

/// `softmax(Q K^T / sqrt(d)) V` with Q from `q_features` `[m, d_model]`
/// and K, V from `text` `[L, d_text]`, projected back to `[m, d_model]`.
pub fn cross_attention(
    g: &mut Graph,
    q_features: &Tensor,
    text: &Tensor,
    w: &AttnProjections,
) -> Result<Tensor> {
    if q_features.rank() != 2 || text.rank() != 2 {
        return Err(Error::shape(
            "cross_attention",
            format!(
                "expected [m, d_model] and [L, d_text], got {:?} and {:?}",
                q_features.shape(),
                text.shape()
            ),
        ));
    }
    let q = w.q.forward(g, q_features)?;
    let k = w.k.forward(g, text)?;
    let v = w.v.forward(g, text)?;
    let kt = g.transpose(&k)?;
    let scores = g.matmul(&q, &kt)?;
    let scaled = g.scale(&scores, 1.0 / (w.d_attn() as f32).sqrt())?;
    let probs = g.softmax_last(&scaled)?;
    let ctx = g.matmul(&probs, &v)?;
    w.o.forward(g, &ctx)
}

/// Row indices of each slot in a rasterized cell map, ascending within
/// each slot.
pub fn slot_rows(map: &[usize], slots: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); slots];
    for (i, &s) in map.iter().enumerate() {
        rows[s].push(i);
    }
    rows
}

/// Region-routed cross-attention over a flattened `[h*w, d_model]` query
/// map. `texts[s]` conditions every cell the layout assigns to slot `s`.
pub fn sdca(
    g: &mut Graph,
    q_features: &Tensor,
    texts: &[&Tensor],
    layout: &RegionLayout,
    h: usize,
    w_cells: usize,
    w: &AttnProjections,
) -> Result<Tensor> {
    let m = h * w_cells;
    if q_features.rank() != 2 || q_features.shape()[0] != m {
        return Err(Error::shape(
            "sdca",
            format!(
                "query map {:?} does not match {h}x{w_cells} cells",
                q_features.shape()
            ),
        ));
    }
    let needed = layout.slot_count();
    if texts.len() < needed {
        return Err(Error::Layout(format!(
            "layout references {needed} prompt slots but only {} texts were supplied",
            texts.len()
        )));
    }
    let map = layout.rasterize(h, w_cells)?;
    let rows = slot_rows(&map, needed);
    let mut out: Option<Tensor> = None;
    for (slot, idx) in rows.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let picked = g.gather_rows(q_features, idx)?;
        let attended = cross_attention(g, &picked, texts[slot], w)?;
        let placed = g.scatter_rows(&attended, idx, m)?;
        out = Some(match out {
            None => placed,
            Some(acc) => g.add(&acc, &placed)?,
        });
    }
    out.ok_or_else(|| Error::Layout("layout assigned no cells to any slot".into()))
}
