//! Causal patching through the toy chat readout.
//!
//! Each sample row is one token position; its position within a sequence is
//! `(global index mod seq_len) + 1`.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::crosscoder::{self, CrosscoderParams};
use crate::diffing::LatentClassification;
use crate::error::{Result, XdiffError};
use crate::world::{toy_forward, PairedActivationBatch, PlantedWorld};

pub const DEFAULT_SEQ_LEN: usize = 32;
/// Positions 2 through 10: the nine tokens after the first.
pub const FIRST_WINDOW: std::ops::RangeInclusive<usize> = 2..=10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchSpec {
    /// The base activation unchanged.
    None,
    /// Chat reconstruction plus base error.
    All,
    /// Base reconstruction plus chat error.
    Error,
    /// `h_base + sum_{j in S} f_j (d_chat_j - d_base_j)`. With `with_bias`
    /// the decoder bias difference is swapped as well, so that the full set
    /// reproduces `All` exactly.
    LatentSet { latents: Vec<usize>, with_bias: bool, label: String },
    /// Chat activation on template positions, base elsewhere.
    Template,
}

impl PatchSpec {
    pub fn latent_set(label: &str, latents: Vec<usize>) -> Self {
        PatchSpec::LatentSet { latents, with_bias: false, label: label.to_string() }
    }

    /// Every latent plus the decoder bias.
    pub fn full_set(dict_size: usize) -> Self {
        PatchSpec::LatentSet { latents: (0..dict_size).collect(), with_bias: true, label: "set-all".into() }
    }

    pub fn label(&self) -> &str {
        match self {
            PatchSpec::None => "none",
            PatchSpec::All => "all",
            PatchSpec::Error => "error",
            PatchSpec::LatentSet { label, .. } => label,
            PatchSpec::Template => "template",
        }
    }
}

/// The chat-activation approximation for a batch.
pub fn approximate(params: &CrosscoderParams, batch: &PairedActivationBatch, spec: &PatchSpec) -> Result<Array2<f64>> {
    if batch.dim() != params.dim() {
        return Err(XdiffError::Dimension(format!("batch dim {} vs params dim {}", batch.dim(), params.dim())));
    }
    let w = &params.weights;
    match spec {
        PatchSpec::None => Ok(batch.h_base.clone()),
        PatchSpec::Template => {
            let mut h = batch.h_base.clone();
            for (i, &t) in batch.template_mask.iter().enumerate() {
                if t {
                    h.row_mut(i).assign(&batch.h_chat.row(i));
                }
            }
            Ok(h)
        }
        PatchSpec::All | PatchSpec::Error => {
            let codes = crosscoder::inference_codes(params, batch)?;
            let (rb, rc) = crosscoder::decode(params, &codes)?;
            Ok(match spec {
                PatchSpec::All => &rc + &(&batch.h_base - &rb),
                _ => &rb + &(&batch.h_chat - &rc),
            })
        }
        PatchSpec::LatentSet { latents, with_bias, .. } => {
            let dict = params.dict_size();
            if let Some(&j) = latents.iter().find(|&&j| j >= dict) {
                return Err(XdiffError::Patch(format!("latent {j} out of range for dictionary of {dict}")));
            }
            let mut h = batch.h_base.clone();
            if latents.is_empty() && !with_bias {
                return Ok(h);
            }
            let codes = crosscoder::inference_codes(params, batch)?.active();
            let mut sel = Array2::<f64>::zeros(codes.dim());
            for &j in latents {
                sel.column_mut(j).assign(&codes.column(j));
            }
            h += &sel.dot(&(&w.dec_chat - &w.dec_base));
            if *with_bias {
                h += &(&w.b_dec_chat - &w.b_dec_base);
            }
            Ok(h)
        }
    }
}

/// `sum_i p_i ln(p_i / q_i)` in nats. Returns `+inf` when `q_i = 0 < p_i`.
pub fn kl_divergence(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(XdiffError::Dimension(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(XdiffError::Probability(format!("{name} has a negative or non-finite entry")));
        }
        let s = v.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(XdiffError::Probability(format!("{name} sums to {s}")));
        }
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative value for identical inputs.
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchResult {
    pub label: String,
    /// KL of every sample row, in batch order.
    pub kl_per_position: Vec<f64>,
    /// 1-based position of each row within its sequence.
    pub positions: Vec<usize>,
    pub kl_mean_all: f64,
    pub kl_mean_first9: f64,
    pub n_positions: usize,
}

pub fn position_of(global_index: u64, seq_len: usize) -> usize {
    (global_index % seq_len as u64) as usize + 1
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Run every spec on the same batches. KL compares the patched chat output
/// against the chat output on the true chat activation.
pub fn run_patch_experiment(
    world: &PlantedWorld,
    params: &CrosscoderParams,
    batches: &[PairedActivationBatch],
    specs: &[PatchSpec],
    seq_len: usize,
) -> Result<Vec<PatchResult>> {
    if batches.iter().all(|b| b.is_empty()) {
        return Err(XdiffError::Empty("patch batches"));
    }
    if seq_len == 0 {
        return Err(XdiffError::Config("sequence length must be at least 1".into()));
    }
    let readout = &world.readout_chat;
    let mut truth: Vec<Array1<f64>> = Vec::new();
    let mut positions = Vec::new();
    for b in batches {
        for (i, row) in b.h_chat.rows().into_iter().enumerate() {
            truth.push(toy_forward(readout, row)?);
            positions.push(position_of(b.first_index + i as u64, seq_len));
        }
    }

    specs
        .par_iter()
        .map(|spec| {
            let mut kl = Vec::with_capacity(truth.len());
            for b in batches {
                let h = approximate(params, b, spec)?;
                for row in h.rows() {
                    let q = toy_forward(readout, row)?;
                    kl.push(kl_divergence(truth[kl.len()].view(), q.view())?);
                }
            }
            let first9 = mean(kl.iter().zip(&positions).filter(|(_, p)| FIRST_WINDOW.contains(p)).map(|(k, _)| *k));
            Ok(PatchResult {
                label: spec.label().to_string(),
                kl_mean_all: mean(kl.iter().copied()),
                kl_mean_first9: first9,
                n_positions: kl.len(),
                positions: positions.clone(),
                kl_per_position: kl,
            })
        })
        .collect()
}

/// Split an ordering (most chat-specific first) into equal best and worst
/// halves; the middle element of an odd list is left out.
pub fn split_halves(ordered: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let h = ordered.len() / 2;
    (ordered[..h].to_vec(), ordered[ordered.len() - h..].to_vec())
}

/// Non-dead latents by decreasing delta norm, ties by index.
pub fn order_by_delta_norm(classes: &[LatentClassification]) -> Vec<usize> {
    let mut live: Vec<(usize, f64)> =
        classes.iter().filter(|c| !c.dead).filter_map(|c| c.delta_norm.map(|d| (c.latent, d))).collect();
    live.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    live.into_iter().map(|(j, _)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::{Variant, Weights};
    use ndarray::array;

    #[test]
    fn kl_examples() {
        let p = array![0.25, 0.25, 0.5];
        assert_eq!(kl_divergence(p.view(), p.view()).unwrap(), 0.0);
        let v = kl_divergence(array![1.0, 0.0].view(), array![0.5, 0.5].view()).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = kl_divergence(array![0.75, 0.25].view(), array![0.5, 0.5].view()).unwrap();
        assert!((v - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((v - 0.1308).abs() < 1e-4);
        assert_eq!(kl_divergence(array![0.5, 0.5].view(), array![1.0, 0.0].view()).unwrap(), f64::INFINITY);
        assert!(kl_divergence(array![0.5, 0.6].view(), array![0.5, 0.5].view()).is_err());
    }

    fn setup() -> (CrosscoderParams, PairedActivationBatch) {
        let mut w = Weights::zeros(2, 2);
        w.enc_base.assign(&array![[1.0, 0.0], [0.0, 1.0]]);
        w.enc_chat.assign(&array![[0.5, 0.0], [0.0, 0.5]]);
        w.dec_base.assign(&array![[1.0, 0.1], [0.0, 0.2]]);
        w.dec_chat.assign(&array![[0.9, 0.0], [0.3, 1.0]]);
        w.b_dec_base.assign(&array![0.1, -0.1]);
        w.b_dec_chat.assign(&array![0.0, 0.3]);
        let p = CrosscoderParams::new(w, Variant::L1 { mu: 0.1 }).unwrap();
        let b = PairedActivationBatch::new(
            array![[1.0, 0.5], [0.2, 2.0], [0.0, 0.0]],
            array![[0.8, 1.5], [0.1, 2.5], [0.3, 0.3]],
            vec![true, false, true],
        )
        .unwrap();
        (p, b)
    }

    #[test]
    fn modes() {
        let (p, b) = setup();
        assert_eq!(approximate(&p, &b, &PatchSpec::None).unwrap(), b.h_base);
        assert_eq!(approximate(&p, &b, &PatchSpec::latent_set("empty", vec![])).unwrap(), b.h_base);
        let all = approximate(&p, &b, &PatchSpec::All).unwrap();
        let set = approximate(&p, &b, &PatchSpec::full_set(2)).unwrap();
        for (x, y) in all.iter().zip(set.iter()) {
            assert!((x - y).abs() <= 1e-10);
        }
        let t = approximate(&p, &b, &PatchSpec::Template).unwrap();
        assert_eq!(t.row(0), b.h_chat.row(0));
        assert_eq!(t.row(1), b.h_base.row(1));
        assert!(matches!(approximate(&p, &b, &PatchSpec::latent_set("bad", vec![5])), Err(XdiffError::Patch(_))));
    }

    #[test]
    fn positions_and_halves() {
        assert_eq!(position_of(0, 32), 1);
        assert_eq!(position_of(33, 32), 2);
        assert_eq!(split_halves(&[4, 1, 3, 2, 0]), (vec![4, 1], vec![2, 0]));
    }
}
