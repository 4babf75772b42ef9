//! Linear layers with optional low-rank adapters.
//!
//! An adapter holds `A: [r, d_in]` and `B: [d_out, r]`; the effective
//! weight is `W + (alpha/r) * (B A)^T` in the `x . W` convention used
//! here. `B` starts at zero, so a freshly attached adapter leaves the
//! layer's output bit-identical to the base layer, and only the adapter
//! tensors are trainable while the base stays frozen.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};

#[derive(Debug)]
pub struct LoraPair {
    /// `[rank, d_in]`, gaussian init scaled by 1/sqrt(d_in).
    pub a: Tensor,
    /// `[d_out, rank]`, zero init.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraPair {
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f32, rng: &mut RngStream) -> Result<LoraPair> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Contract(format!(
                "adapter rank {rank} must be in 1..=min({d_in}, {d_out})"
            )));
        }
        let std = 1.0 / (d_in as f32).sqrt();
        let a = Tensor::new(
            rng.fill_normal(rank * d_in).iter().map(|v| v * std).collect(),
            &[rank, d_in],
        )?
        .trainable();
        let b = Tensor::zeros(&[d_out, rank]).trainable();
        Ok(LoraPair { a, b, rank, alpha })
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// `y = x . W (+ bias) (+ adapter delta)` with `W: [d_in, d_out]`.
#[derive(Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub lora: Option<LoraPair>,
}

impl Linear {
    pub fn new(w: Tensor, b: Option<Tensor>) -> Linear {
        Linear { w, b, lora: None }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let mut y = g.matmul(x, &self.w)?;
        if let Some(b) = &self.b {
            y = g.add(&y, b)?;
        }
        if let Some(l) = &self.lora {
            let at = g.transpose(&l.a)?; // [d_in, r]
            let bt = g.transpose(&l.b)?; // [r, d_out]
            let mid = g.matmul(x, &at)?;
            let delta = g.matmul(&mid, &bt)?;
            let scaled = g.scale(&delta, l.scale())?;
            y = g.add(&y, &scaled)?;
        }
        Ok(y)
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f32, rng: &mut RngStream) -> Result<()> {
        self.lora = Some(LoraPair::init(self.d_in(), self.d_out(), rank, alpha, rng)?);
        Ok(())
    }

    /// Fold the adapter delta into the base weight. The adapter is kept
    /// attached; call [`Linear::clear_lora`] afterwards unless the point
    /// is to demonstrate that a second merge double-applies.
    pub fn merge_lora(&mut self) {
        let Some(l) = &self.lora else { return };
        let (d_in, d_out, r) = (self.d_in(), self.d_out(), l.rank);
        let s = l.scale();
        let (a, b) = (l.a.data(), l.b.data());
        let mut w = self.w.data().to_vec();
        // delta^T[i][o] = sum_r A[r][i] * B[o][r]
        for i in 0..d_in {
            for o in 0..d_out {
                let mut acc = 0.0f32;
                for k in 0..r {
                    acc += a[k * d_in + i] * b[o * r + k];
                }
                w[i * d_out + o] += s * acc;
            }
        }
        self.w = self.w.with_data(w);
    }

    pub fn clear_lora(&mut self) {
        self.lora = None;
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(format!("{prefix}.b"), b);
        }
        if let Some(l) = &mut self.lora {
            f(format!("{prefix}.lora_a"), &mut l.a);
            f(format!("{prefix}.lora_b"), &mut l.b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn sample_linear(rng: &mut RngStream) -> Linear {
        let w = Tensor::new(rng.fill_normal(8 * 6), &[8, 6]).unwrap();
        let b = Tensor::new(rng.fill_normal(6), &[6]).unwrap();
        Linear::new(w, Some(b))
    }

    #[test]
    fn fresh_adapter_is_identity_delta() {
        let mut rng = RngStream::new(1, Stream::Init);
        let mut lin = sample_linear(&mut rng);
        let x = Tensor::new(rng.fill_normal(3 * 8), &[3, 8]).unwrap();
        let mut g = Graph::inference();
        let base = lin.forward(&mut g, &x).unwrap();
        lin.attach_lora(4, 4.0, &mut rng).unwrap();
        let adapted = lin.forward(&mut g, &x).unwrap();
        assert!(base.bits_eq(&adapted), "zero-init B must not change output");
    }

    #[test]
    fn adapter_param_count_matches_rank_times_dims() {
        let mut rng = RngStream::new(2, Stream::Init);
        let w = Tensor::zeros(&[64, 64]);
        let mut lin = Linear::new(w, None);
        lin.attach_lora(16, 16.0, &mut rng).unwrap();
        let l = lin.lora.as_ref().unwrap();
        assert_eq!(l.a.numel() + l.b.numel(), 2 * 16 * 64);
    }

    #[test]
    fn merged_weights_match_adapter_path() {
        let mut rng = RngStream::new(3, Stream::Init);
        let mut lin = sample_linear(&mut rng);
        lin.attach_lora(4, 4.0, &mut rng).unwrap();
        // Give B nonzero values so the delta actually does something.
        let l = lin.lora.as_mut().unwrap();
        l.b = Tensor::new(rng.fill_normal(6 * 4), &[6, 4]).unwrap().trainable();
        let x = Tensor::new(rng.fill_normal(5 * 8), &[5, 8]).unwrap();
        let mut g = Graph::inference();
        let via_adapter = lin.forward(&mut g, &x).unwrap();
        let mut merged = Linear::new(lin.w.clone(), lin.b.clone());
        merged.lora = Some(LoraPair {
            a: lin.lora.as_ref().unwrap().a.clone(),
            b: lin.lora.as_ref().unwrap().b.clone(),
            rank: 4,
            alpha: 4.0,
        });
        merged.merge_lora();
        merged.clear_lora();
        let via_merge = merged.forward(&mut g, &x).unwrap();
        assert!(via_adapter.max_abs_diff(&via_merge).unwrap() < 1e-5);
    }

    #[test]
    fn double_merge_differs_from_single() {
        let mut rng = RngStream::new(4, Stream::Init);
        let mut lin = sample_linear(&mut rng);
        lin.attach_lora(2, 2.0, &mut rng).unwrap();
        let l = lin.lora.as_mut().unwrap();
        l.b = Tensor::full(&[6, 2], 0.5).trainable();
        lin.merge_lora();
        let once = lin.w.clone();
        lin.merge_lora();
        assert!(!lin.w.exact_eq(&once), "second merge must double-apply");
        // Merging a cleared adapter is a no-op.
        lin.clear_lora();
        let before = lin.w.clone();
        lin.merge_lora();
        assert!(lin.w.bits_eq(&before));
    }

    #[test]
    fn grads_flow_to_adapter_not_base() {
        let mut rng = RngStream::new(5, Stream::Init);
        // Frozen base (not trainable), trainable adapter.
        let mut lin = sample_linear(&mut rng);
        lin.attach_lora(4, 4.0, &mut rng).unwrap();
        let x = Tensor::new(rng.fill_normal(3 * 8), &[3, 8]).unwrap();
        let mut g = Graph::recording();
        let y = lin.forward(&mut g, &x).unwrap();
        let sq = g.mul(&y, &y).unwrap();
        let loss = g.mean_all(&sq).unwrap();
        g.backward(&loss).unwrap();
        assert!(lin.w.grad().is_none(), "frozen base must not get grads");
        let l = lin.lora.as_ref().unwrap();
        assert!(l.a.grad().is_some());
        let gb = l.b.grad().unwrap();
        assert!(gb.iter().any(|&v| v != 0.0), "B grad must be nonzero");
    }

    #[test]
    fn rank_bounds_enforced() {
        let mut rng = RngStream::new(6, Stream::Init);
        let mut lin = Linear::new(Tensor::zeros(&[8, 4]), None);
        assert!(lin.attach_lora(0, 1.0, &mut rng).is_err());
        assert!(lin.attach_lora(5, 5.0, &mut rng).is_err());
        assert!(lin.attach_lora(4, 4.0, &mut rng).is_ok());
    }
}
