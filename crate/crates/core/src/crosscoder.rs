//! Crosscoder parameters and the pure forward computations of both variants.
//!
//! Layout: every per-latent vector is a row, so `enc_*` and `dec_*` are all
//! `D x d`. Latent activations are shared across the two models; encoders and
//! decoders are per model.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::error::{Result, XdiffError};
use crate::linalg;
use crate::world::PairedActivationBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Sparsity penalty `mu * sum_j f_j (|d_base_j| + |d_chat_j|)`.
    L1 { mu: f64 },
    /// Keep the top `n * k` scaled activations per batch; `k_aux` dead latents
    /// reconstruct the residual with weight `alpha`.
    BatchTopK { k: usize, k_aux: usize, alpha: f64 },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::L1 { .. } => "l1",
            Variant::BatchTopK { .. } => "batchtopk",
        }
    }
}

/// The seven trainable blocks. Also used as the gradient bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub enc_base: Array2<f64>,
    pub enc_chat: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub dec_base: Array2<f64>,
    pub dec_chat: Array2<f64>,
    pub b_dec_base: Array1<f64>,
    pub b_dec_chat: Array1<f64>,
}

pub const BLOCK_NAMES: [&str; 7] =
    ["enc_base", "enc_chat", "b_enc", "dec_base", "dec_chat", "b_dec_base", "b_dec_chat"];

impl Weights {
    pub fn zeros(dict_size: usize, d: usize) -> Self {
        Self {
            enc_base: Array2::zeros((dict_size, d)),
            enc_chat: Array2::zeros((dict_size, d)),
            b_enc: Array1::zeros(dict_size),
            dec_base: Array2::zeros((dict_size, d)),
            dec_chat: Array2::zeros((dict_size, d)),
            b_dec_base: Array1::zeros(d),
            b_dec_chat: Array1::zeros(d),
        }
    }

    pub fn dict_size(&self) -> usize {
        self.enc_base.nrows()
    }

    pub fn dim(&self) -> usize {
        self.enc_base.ncols()
    }

    /// Blocks in file order, as flat row-major slices.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 7] {
        fn s(a: Option<&[f64]>) -> &[f64] {
            a.expect("weights are always in standard layout")
        }
        [
            (BLOCK_NAMES[0], s(self.enc_base.as_slice())),
            (BLOCK_NAMES[1], s(self.enc_chat.as_slice())),
            (BLOCK_NAMES[2], s(self.b_enc.as_slice())),
            (BLOCK_NAMES[3], s(self.dec_base.as_slice())),
            (BLOCK_NAMES[4], s(self.dec_chat.as_slice())),
            (BLOCK_NAMES[5], s(self.b_dec_base.as_slice())),
            (BLOCK_NAMES[6], s(self.b_dec_chat.as_slice())),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 7] {
        fn s(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("weights are always in standard layout")
        }
        [
            s(self.enc_base.as_slice_mut()),
            s(self.enc_chat.as_slice_mut()),
            s(self.b_enc.as_slice_mut()),
            s(self.dec_base.as_slice_mut()),
            s(self.dec_chat.as_slice_mut()),
            s(self.b_dec_base.as_slice_mut()),
            s(self.b_dec_chat.as_slice_mut()),
        ]
    }

    fn check(&self) -> Result<()> {
        let (dict, d) = self.enc_base.dim();
        if dict == 0 || d == 0 {
            return Err(XdiffError::Config("dictionary size and dimension must be at least 1".into()));
        }
        let mats = [&self.enc_chat, &self.dec_base, &self.dec_chat];
        if mats.iter().any(|m| m.dim() != (dict, d))
            || self.b_enc.len() != dict
            || self.b_dec_base.len() != d
            || self.b_dec_chat.len() != d
        {
            return Err(XdiffError::Dimension("weight blocks disagree on (D, d)".into()));
        }
        for (name, block) in self.blocks() {
            if !block.iter().all(|x| x.is_finite()) {
                return Err(XdiffError::Config(format!("block `{name}` has non-finite entries")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrosscoderParams {
    pub weights: Weights,
    pub variant: Variant,
    /// Inference threshold. Always `None` for L1.
    pub theta: Option<f64>,
}

impl CrosscoderParams {
    pub fn new(weights: Weights, variant: Variant) -> Result<Self> {
        weights.check()?;
        validate_variant(&variant, weights.dict_size())?;
        Ok(Self { weights, variant, theta: None })
    }

    pub fn dict_size(&self) -> usize {
        self.weights.dict_size()
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn set_theta(&mut self, theta: f64) -> Result<()> {
        if !matches!(self.variant, Variant::BatchTopK { .. }) {
            return Err(XdiffError::Variant { expected: "batchtopk" });
        }
        if theta.is_nan() || theta < 0.0 {
            return Err(XdiffError::Config(format!("theta must be nonnegative, got {theta}")));
        }
        self.theta = Some(theta);
        Ok(())
    }

    /// `|d_base_j| + |d_chat_j|` for every latent.
    pub fn decoder_norm_sums(&self) -> Array1<f64> {
        linalg::row_norms(self.weights.dec_base.view()) + linalg::row_norms(self.weights.dec_chat.view())
    }
}

pub(crate) fn validate_variant(variant: &Variant, dict_size: usize) -> Result<()> {
    match *variant {
        Variant::L1 { mu } if !(mu >= 0.0 && mu.is_finite()) => {
            Err(XdiffError::Config(format!("mu must be finite and nonnegative, got {mu}")))
        }
        Variant::BatchTopK { k, .. } if k == 0 || k > dict_size => {
            Err(XdiffError::Config(format!("k must be in 1..={dict_size}, got {k}")))
        }
        Variant::BatchTopK { alpha, .. } if !(alpha >= 0.0 && alpha.is_finite()) => {
            Err(XdiffError::Config(format!("alpha must be finite and nonnegative, got {alpha}")))
        }
        _ => Ok(()),
    }
}

/// Latent activations and the post-selection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodes {
    pub f: Array2<f64>,
    pub active_mask: Array2<bool>,
}

impl LatentCodes {
    /// Codes with masked entries zeroed.
    pub fn active(&self) -> Array2<f64> {
        let mut out = self.f.clone();
        Zip::from(&mut out).and(&self.active_mask).for_each(|x, &keep| {
            if !keep {
                *x = 0.0;
            }
        });
        out
    }

    /// Number of nonzero active codes per sample.
    pub fn l0(&self) -> Vec<usize> {
        self.f
            .rows()
            .into_iter()
            .zip(self.active_mask.rows())
            .map(|(f, m)| f.iter().zip(m.iter()).filter(|(&x, &k)| k && x > 0.0).count())
            .collect()
    }
}

fn check_batch(params: &CrosscoderParams, batch: &PairedActivationBatch) -> Result<()> {
    if batch.dim() != params.dim() || batch.h_chat.ncols() != params.dim() {
        return Err(XdiffError::Dimension(format!(
            "batch has dimension {}, crosscoder expects {}",
            batch.dim(),
            params.dim()
        )));
    }
    if batch.h_base.nrows() != batch.h_chat.nrows() {
        return Err(XdiffError::Dimension("base and chat row counts differ".into()));
    }
    Ok(())
}

/// `e_base_j . h_base + e_chat_j . h_chat + b_enc_j` for every sample and latent.
pub fn pre_activations(params: &CrosscoderParams, batch: &PairedActivationBatch) -> Result<Array2<f64>> {
    check_batch(params, batch)?;
    let w = &params.weights;
    let mut pre = batch.h_base.dot(&w.enc_base.t());
    pre += &batch.h_chat.dot(&w.enc_chat.t());
    pre += &w.b_enc;
    Ok(pre)
}

/// ReLU latent activations with an all-true mask.
pub fn encode(params: &CrosscoderParams, batch: &PairedActivationBatch) -> Result<LatentCodes> {
    let f = pre_activations(params, batch)?.mapv_into(|x| x.max(0.0));
    let active_mask = Array2::from_elem(f.dim(), true);
    Ok(LatentCodes { f, active_mask })
}

/// `v(x_i, j) = f_j(x_i) * (|d_base_j| + |d_chat_j|)`.
pub fn scaled_activation(params: &CrosscoderParams, codes: &LatentCodes) -> Array2<f64> {
    scale_by_norms(&codes.f, &params.decoder_norm_sums())
}

fn scale_by_norms(f: &Array2<f64>, norm_sums: &Array1<f64>) -> Array2<f64> {
    f * norm_sums
}

/// Keep exactly `n * k` entries of `v`: the largest values, ties broken by
/// lower sample index, then lower latent index.
pub fn batch_topk_select(v: ArrayView2<'_, f64>, k: usize) -> Result<Array2<bool>> {
    let (n, dict) = v.dim();
    if k > dict {
        return Err(XdiffError::Config(format!("k = {k} exceeds dictionary size {dict}")));
    }
    let keep = n * k;
    let mut mask = Array2::from_elem((n, dict), false);
    if keep == 0 {
        return Ok(mask);
    }
    // Only positive entries compete unless there are too few of them; the
    // rest are zeros (codes are nonnegative) and fill in by index.
    let mut cand: Vec<(f64, usize)> = v.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, &x)| (x, i)).collect();
    let mut rest: Vec<(f64, usize)> = Vec::new();
    if cand.len() < keep {
        rest = v.iter().enumerate().filter(|(_, &x)| !(x > 0.0)).map(|(i, &x)| (x, i)).collect();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let out = mask.as_slice_mut().expect("fresh array is contiguous");
    if cand.len() > keep {
        cand.select_nth_unstable_by(keep - 1, cmp);
        cand.truncate(keep);
    }
    let missing = keep - cand.len();
    if missing > 0 {
        if missing < rest.len() {
            rest.select_nth_unstable_by(missing - 1, cmp);
        }
        cand.extend_from_slice(&rest[..missing]);
    }
    for &(_, idx) in &cand {
        out[idx] = true;
    }
    Ok(mask)
}

/// Per sample, the top `k_aux` dead latents with positive scaled activation.
pub fn aux_select(v: ArrayView2<'_, f64>, dead_mask: &[bool], k_aux: usize) -> Array2<bool> {
    let (n, dict) = v.dim();
    let mut mask = Array2::from_elem((n, dict), false);
    let dead: Vec<usize> = (0..dict).filter(|&j| dead_mask[j]).collect();
    if dead.is_empty() || k_aux == 0 {
        return mask;
    }
    let mut cand: Vec<usize> = Vec::with_capacity(dead.len());
    for i in 0..n {
        cand.clear();
        cand.extend(dead.iter().copied().filter(|&j| v[[i, j]] > 0.0));
        let cmp = |a: &usize, b: &usize| v[[i, *b]].total_cmp(&v[[i, *a]]).then(a.cmp(b));
        if cand.len() > k_aux {
            cand.select_nth_unstable_by(k_aux - 1, cmp);
            cand.truncate(k_aux);
        }
        for &j in &cand {
            mask[[i, j]] = true;
        }
    }
    mask
}

/// Affine reconstructions of both models from the active codes.
pub fn decode(params: &CrosscoderParams, codes: &LatentCodes) -> Result<(Array2<f64>, Array2<f64>)> {
    if codes.f.ncols() != params.dict_size() || codes.active_mask.dim() != codes.f.dim() {
        return Err(XdiffError::Dimension(format!(
            "codes have {} latents, crosscoder has {}",
            codes.f.ncols(),
            params.dict_size()
        )));
    }
    Ok(decode_active(params, &codes.active()))
}

pub(crate) fn decode_active(params: &CrosscoderParams, active: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let w = &params.weights;
    let rb = active.dot(&w.dec_base) + &w.b_dec_base;
    let rc = active.dot(&w.dec_chat) + &w.b_dec_chat;
    (rb, rc)
}

/// Per-sample-averaged loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon_base: f64,
    pub recon_chat: f64,
    /// L1 sparsity term, already multiplied by `mu`. Zero for BatchTopK.
    pub sparsity: f64,
    /// Unweighted auxiliary loss. Zero for L1.
    pub aux: f64,
    pub total: f64,
}

/// Masks that fix the selection for one batch. Differentiation holds these
/// constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMasks {
    pub main: Array2<bool>,
    /// Present only when some latent is dead.
    pub aux: Option<Array2<bool>>,
}

/// Compute the selection masks of the params' variant for a batch.
pub fn select_masks(
    params: &CrosscoderParams,
    batch: &PairedActivationBatch,
    dead_mask: &[bool],
) -> Result<SelectionMasks> {
    let codes = encode(params, batch)?;
    masks_from_codes(params, &codes.f, dead_mask)
}

pub(crate) fn masks_from_codes(
    params: &CrosscoderParams,
    f: &Array2<f64>,
    dead_mask: &[bool],
) -> Result<SelectionMasks> {
    match params.variant {
        Variant::L1 { .. } => Ok(SelectionMasks { main: Array2::from_elem(f.dim(), true), aux: None }),
        Variant::BatchTopK { k, k_aux, .. } => {
            if dead_mask.len() != params.dict_size() {
                return Err(XdiffError::Dimension(format!(
                    "dead mask has {} entries, dictionary has {}",
                    dead_mask.len(),
                    params.dict_size()
                )));
            }
            let v = scale_by_norms(f, &params.decoder_norm_sums());
            let main = batch_topk_select(v.view(), k)?;
            let aux = dead_mask.iter().any(|&x| x).then(|| aux_select(v.view(), dead_mask, k_aux));
            Ok(SelectionMasks { main, aux })
        }
    }
}

/// Loss of the params' variant with the selection held fixed.
pub fn loss_with_masks(
    params: &CrosscoderParams,
    batch: &PairedActivationBatch,
    masks: &SelectionMasks,
) -> Result<LossBreakdown> {
    let f = encode(params, batch)?.f;
    if masks.main.dim() != f.dim() {
        return Err(XdiffError::Dimension("selection mask shape does not match codes".into()));
    }
    let n = f.nrows().max(1) as f64;
    let active = LatentCodes { f: f.clone(), active_mask: masks.main.clone() }.active();
    let (rb, rc) = decode_active(params, &active);
    let eb = &batch.h_base - &rb;
    let ec = &batch.h_chat - &rc;
    let recon_base = 0.5 * linalg::sq_norm(eb.view()) / n;
    let recon_chat = 0.5 * linalg::sq_norm(ec.view()) / n;
    let mut out = LossBreakdown { recon_base, recon_chat, ..Default::default() };
    match params.variant {
        Variant::L1 { mu } => {
            let s = params.decoder_norm_sums();
            out.sparsity = mu * active.dot(&s).sum() / n;
            out.total = recon_base + recon_chat + out.sparsity;
        }
        Variant::BatchTopK { alpha, .. } => {
            if let Some(aux_mask) = &masks.aux {
                let fa = LatentCodes { f, active_mask: aux_mask.clone() }.active();
                let w = &params.weights;
                let rb_aux = &eb - &fa.dot(&w.dec_base);
                let rc_aux = &ec - &fa.dot(&w.dec_chat);
                out.aux = (linalg::sq_norm(rb_aux.view()) + linalg::sq_norm(rc_aux.view())) / n;
            }
            out.total = recon_base + recon_chat + alpha * out.aux;
        }
    }
    Ok(out)
}

/// L1 crosscoder objective, averaged over the batch.
pub fn l1_loss(params: &CrosscoderParams, batch: &PairedActivationBatch) -> Result<LossBreakdown> {
    if !matches!(params.variant, Variant::L1 { .. }) {
        return Err(XdiffError::Variant { expected: "l1" });
    }
    let masks = select_masks(params, batch, &[])?;
    loss_with_masks(params, batch, &masks)
}

/// BatchTopK objective: top-k reconstruction plus `alpha` times the
/// dead-latent auxiliary loss.
pub fn batchtopk_loss(
    params: &CrosscoderParams,
    batch: &PairedActivationBatch,
    dead_mask: &[bool],
) -> Result<LossBreakdown> {
    if !matches!(params.variant, Variant::BatchTopK { .. }) {
        return Err(XdiffError::Variant { expected: "batchtopk" });
    }
    let masks = select_masks(params, batch, dead_mask)?;
    loss_with_masks(params, batch, &masks)
}

/// Smallest selected positive scaled activation, if any.
pub fn min_selected_activation(v: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Option<f64> {
    v.iter().zip(mask.iter()).filter(|(&x, &m)| m && x > 0.0).map(|(&x, _)| x).min_by(|a, b| a.total_cmp(b))
}

/// Estimate the inference threshold as the mean over batches of the smallest
/// selected positive scaled activation, store it and return it. Batches that
/// select nothing positive do not contribute.
pub fn estimate_theta<'a, I>(params: &mut CrosscoderParams, batches: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a PairedActivationBatch>,
{
    let Variant::BatchTopK { k, .. } = params.variant else {
        return Err(XdiffError::Variant { expected: "batchtopk" });
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let codes = encode(params, batch)?;
        let v = scaled_activation(params, &codes);
        let mask = batch_topk_select(v.view(), k)?;
        if let Some(m) = min_selected_activation(v.view(), mask.view()) {
            sum += m;
            count += 1;
        }
    }
    if count == 0 {
        return Err(XdiffError::ThresholdEstimation);
    }
    let theta = sum / count as f64;
    params.set_theta(theta)?;
    Ok(theta)
}

/// Batch-independent BatchTopK codes: keep `f_j` where `v > theta`.
pub fn encode_inference(params: &CrosscoderParams, batch: &PairedActivationBatch) -> Result<LatentCodes> {
    if !matches!(params.variant, Variant::BatchTopK { .. }) {
        return Err(XdiffError::Variant { expected: "batchtopk" });
    }
    let theta = params.theta.ok_or(XdiffError::ThresholdUnset)?;
    let codes = encode(params, batch)?;
    let v = scaled_activation(params, &codes);
    let active_mask = v.mapv(|x| x > theta);
    Ok(LatentCodes { f: codes.f, active_mask })
}

/// Codes used for analysis: plain `encode` for L1, thresholded for BatchTopK.
pub fn inference_codes(params: &CrosscoderParams, batch: &PairedActivationBatch) -> Result<LatentCodes> {
    match params.variant {
        Variant::L1 { .. } => encode(params, batch),
        Variant::BatchTopK { .. } => encode_inference(params, batch),
    }
}

/// Sparsity penalty of one latent under the crosscoder loss and under a
/// stacked SAE over concatenated activations.
pub fn sparsity_penalties(dec_base_j: ArrayView1<'_, f64>, dec_chat_j: ArrayView1<'_, f64>, f: f64) -> (f64, f64) {
    let nb = linalg::norm(dec_base_j);
    let nc = linalg::norm(dec_chat_j);
    (f * (nb + nc), f * (nb * nb + nc * nc).sqrt())
}
