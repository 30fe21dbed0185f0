//! Post-training diffing metrics.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::crosscoder::{self, CrosscoderParams};
use crate::error::{Result, XdiffError};
use crate::linalg;
use crate::world::PairedActivationBatch;

/// Decoder rows with both norms below this are dead.
pub const DEAD_NORM: f64 = 1e-12;
pub const DEFAULT_TWIN_THRESHOLD: f64 = 0.9;
pub const DIVERGENCE_HIGH: f64 = 0.7;
pub const DIVERGENCE_LOW: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormClass {
    BaseOnly,
    ChatOnly,
    Shared,
    Other,
}

impl NormClass {
    pub fn as_str(self) -> &'static str {
        match self {
            NormClass::BaseOnly => "base-only",
            NormClass::ChatOnly => "chat-only",
            NormClass::Shared => "shared",
            NormClass::Other => "other",
        }
    }

    /// Band lookup; bands are closed intervals.
    pub fn of(delta_norm: f64) -> Self {
        if delta_norm <= 0.1 {
            NormClass::BaseOnly
        } else if delta_norm >= 0.9 {
            NormClass::ChatOnly
        } else if (0.4..=0.6).contains(&delta_norm) {
            NormClass::Shared
        } else {
            NormClass::Other
        }
    }
}

/// Relative decoder norm difference from the two norms; `None` when both
/// are (numerically) zero.
pub fn delta_norm_from_norms(norm_base: f64, norm_chat: f64) -> Option<f64> {
    let max = norm_base.max(norm_chat);
    if max < DEAD_NORM {
        return None;
    }
    Some(0.5 * ((norm_chat - norm_base) / max + 1.0))
}

pub fn delta_norm(params: &CrosscoderParams, j: usize) -> Option<f64> {
    let w = &params.weights;
    delta_norm_from_norms(linalg::norm(w.dec_base.row(j)), linalg::norm(w.dec_chat.row(j)))
}

pub fn delta_norms(params: &CrosscoderParams) -> Vec<Option<f64>> {
    let w = &params.weights;
    let nb = linalg::row_norms(w.dec_base.view());
    let nc = linalg::row_norms(w.dec_chat.view());
    nb.iter().zip(nc.iter()).map(|(&b, &c)| delta_norm_from_norms(b, c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentClassification {
    pub latent: usize,
    pub delta_norm: Option<f64>,
    /// `None` for dead latents.
    pub class: Option<NormClass>,
    pub freq: f64,
    pub dead: bool,
}

/// Classify every latent. With `freq`, latents that never fired are dead too.
pub fn classify(params: &CrosscoderParams, freq: Option<&[f64]>) -> Result<Vec<LatentClassification>> {
    let dict = params.dict_size();
    if let Some(f) = freq {
        if f.len() != dict {
            return Err(XdiffError::Dimension(format!("{} frequencies for {dict} latents", f.len())));
        }
    }
    Ok(delta_norms(params)
        .into_iter()
        .enumerate()
        .map(|(j, dn)| {
            let fj = freq.map_or(0.0, |f| f[j]);
            let dead = dn.is_none() || freq.is_some_and(|_| fj == 0.0);
            LatentClassification {
                latent: j,
                delta_norm: dn,
                class: if dead { None } else { dn.map(NormClass::of) },
                freq: fj,
                dead,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub base_only: usize,
    pub chat_only: usize,
    pub shared: usize,
    pub other: usize,
    pub dead: usize,
}

pub fn class_counts(classes: &[LatentClassification]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for l in classes {
        match l.class {
            Some(NormClass::BaseOnly) => c.base_only += 1,
            Some(NormClass::ChatOnly) => c.chat_only += 1,
            Some(NormClass::Shared) => c.shared += 1,
            Some(NormClass::Other) => c.other += 1,
            None => c.dead += 1,
        }
    }
    c
}

/// Histogram of non-dead delta norms over `[0, 1]`; the last bin is closed.
pub fn delta_norm_histogram(classes: &[LatentClassification], bins: usize) -> Vec<usize> {
    let mut h = vec![0usize; bins];
    if bins == 0 {
        return h;
    }
    for l in classes.iter().filter(|l| !l.dead) {
        if let Some(x) = l.delta_norm {
            let b = ((x * bins as f64).floor() as usize).min(bins - 1);
            h[b] += 1;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinPair {
    pub chat_latent: usize,
    pub base_latent: usize,
    pub cosine: f64,
    pub divergence: Option<f64>,
}

/// Pair every chat-only latent with the base-only latent whose base decoder
/// is most similar to its chat decoder, keeping pairs above `threshold`.
pub fn twin_pairs(params: &CrosscoderParams, classes: &[LatentClassification], threshold: f64) -> Vec<TwinPair> {
    let w = &params.weights;
    let pick =
        |c: NormClass| -> Vec<usize> { classes.iter().filter(|l| l.class == Some(c)).map(|l| l.latent).collect() };
    let chat_only = pick(NormClass::ChatOnly);
    let base_only = pick(NormClass::BaseOnly);
    let mut out = Vec::new();
    for &i in &chat_only {
        let best = base_only.iter().map(|&j| (j, linalg::cosine(w.dec_chat.row(i), w.dec_base.row(j)))).fold(
            None::<(usize, f64)>,
            |acc, (j, c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((j, c)),
            },
        );
        if let Some((j, c)) = best {
            if c > threshold {
                out.push(TwinPair { chat_latent: i, base_latent: j, cosine: c, divergence: None });
            }
        }
    }
    out
}

/// Activation divergence from scaled-activation traces. `A_p` is the max of
/// both training traces; events are counted per validation sample.
pub fn divergence_from_traces(train_i: &[f64], train_j: &[f64], val_i: &[f64], val_j: &[f64]) -> Option<f64> {
    let a = train_i.iter().chain(train_j).copied().fold(0.0f64, f64::max);
    if !(a > 0.0) {
        return None;
    }
    let (high, low) = (DIVERGENCE_HIGH * a, DIVERGENCE_LOW * a);
    let mut union = 0usize;
    let mut single = 0usize;
    for (&x, &y) in val_i.iter().zip(val_j) {
        let hi = x > high;
        let hj = y > high;
        if hi || hj {
            union += 1;
        }
        if hi && y < low {
            single += 1;
        }
        if hj && x < low {
            single += 1;
        }
    }
    (union > 0).then(|| single as f64 / union as f64)
}

/// Scaled inference activations of the listed latents, one trace per latent.
pub fn activation_traces(
    params: &CrosscoderParams,
    batches: &[PairedActivationBatch],
    latents: &[usize],
) -> Result<Vec<Vec<f64>>> {
    for &j in latents {
        if j >= params.dict_size() {
            return Err(XdiffError::Dimension(format!("latent {j} out of range")));
        }
    }
    let norms = params.decoder_norm_sums();
    let mut traces = vec![Vec::new(); latents.len()];
    for batch in batches {
        let active = crosscoder::inference_codes(params, batch)?.active();
        for (t, &j) in traces.iter_mut().zip(latents) {
            t.extend(active.column(j).iter().map(|&f| f * norms[j]));
        }
    }
    Ok(traces)
}

pub fn activation_divergence(
    params: &CrosscoderParams,
    pair: &TwinPair,
    train: &[PairedActivationBatch],
    val: &[PairedActivationBatch],
) -> Result<Option<f64>> {
    let ids = [pair.chat_latent, pair.base_latent];
    let t = activation_traces(params, train, &ids)?;
    let v = activation_traces(params, val, &ids)?;
    Ok(divergence_from_traces(&t[0], &t[1], &v[0], &v[1]))
}

/// Fill in the divergence of every pair, sharing one encoding pass.
pub fn annotate_divergence(
    params: &CrosscoderParams,
    pairs: &mut [TwinPair],
    train: &[PairedActivationBatch],
    val: &[PairedActivationBatch],
) -> Result<()> {
    let ids: Vec<usize> =
        pairs.iter().flat_map(|p| [p.chat_latent, p.base_latent]).collect::<BTreeSet<_>>().into_iter().collect();
    let t = activation_traces(params, train, &ids)?;
    let v = activation_traces(params, val, &ids)?;
    let idx = |j: usize| ids.iter().position(|&x| x == j).expect("collected above");
    for p in pairs.iter_mut() {
        let (i, j) = (idx(p.chat_latent), idx(p.base_latent));
        p.divergence = divergence_from_traces(&t[i], &t[j], &v[i], &v[j]);
    }
    Ok(())
}

/// Fraction of samples on which each latent's inference code is nonzero.
pub fn frequency_stats(params: &CrosscoderParams, batches: &[PairedActivationBatch]) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; params.dict_size()];
    let mut total = 0usize;
    for batch in batches {
        let active: Array2<f64> = crosscoder::inference_codes(params, batch)?.active();
        for row in active.rows() {
            for (c, &x) in counts.iter_mut().zip(row.iter()) {
                if x > 0.0 {
                    *c += 1;
                }
            }
        }
        total += batch.len();
    }
    Ok(counts.into_iter().map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect())
}
