//! Optimization of crosscoder parameters.
//!
//! Gradients are analytic. For BatchTopK the selection masks (main top-k and
//! auxiliary dead-latent top-k_aux) are computed once per batch and held
//! fixed while differentiating; the ReLU subgradient at exactly 0 is 0, as is
//! the norm subgradient of an all-zero decoder row.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::crosscoder::{
    self, masks_from_codes, validate_variant, CrosscoderParams, LossBreakdown, SelectionMasks, Variant, Weights,
};
use crate::error::{Result, XdiffError};
use crate::io::kv;
use crate::linalg;
use crate::world::PairedActivationBatch;

/// Fraction of the final training steps whose batches calibrate theta.
pub const THETA_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    L1,
    BatchTopK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: VariantKind,
    pub mu: f64,
    pub k: usize,
    pub k_aux: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub dead_window: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Defaults to an expansion factor of 32.
    pub dict_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: VariantKind::BatchTopK,
            mu: 0.04,
            k: 100,
            k_aux: 512,
            alpha: 1.0 / 32.0,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            steps: 1000,
            dead_window: 500,
            seed: 0,
            init_scale: 0.1,
            dict_size: None,
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        match self.kind {
            VariantKind::L1 => Variant::L1 { mu: self.mu },
            VariantKind::BatchTopK => Variant::BatchTopK { k: self.k, k_aux: self.k_aux, alpha: self.alpha },
        }
    }

    pub fn dict_size_for(&self, d: usize) -> usize {
        self.dict_size.unwrap_or(32 * d)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv::parse(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "variant" => {
                self.kind = match raw.to_ascii_lowercase().as_str() {
                    "l1" => VariantKind::L1,
                    "batchtopk" | "topk" => VariantKind::BatchTopK,
                    _ => return Err(XdiffError::Config(format!("unknown variant `{raw}`"))),
                }
            }
            "mu" => self.mu = kv::value(key, raw)?,
            "k" => self.k = kv::value(key, raw)?,
            "k_aux" => self.k_aux = kv::value(key, raw)?,
            "alpha" => self.alpha = kv::value(key, raw)?,
            "lr" | "learning_rate" => self.learning_rate = kv::value(key, raw)?,
            "beta1" => self.adam_beta1 = kv::value(key, raw)?,
            "beta2" => self.adam_beta2 = kv::value(key, raw)?,
            "eps" => self.adam_eps = kv::value(key, raw)?,
            "batch_size" => self.batch_size = kv::value(key, raw)?,
            "steps" => self.steps = kv::value(key, raw)?,
            "dead_window" => self.dead_window = kv::value(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            "init_scale" => self.init_scale = kv::value(key, raw)?,
            "dict_size" => self.dict_size = Some(kv::value(key, raw)?),
            _ => return Err(XdiffError::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        let variant = match self.kind {
            VariantKind::L1 => "l1",
            VariantKind::BatchTopK => "batchtopk",
        };
        let mut s = format!(
            "variant = {variant}\nmu = {}\nk = {}\nk_aux = {}\nalpha = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\n\
             batch_size = {}\nsteps = {}\ndead_window = {}\nseed = {}\ninit_scale = {}\n",
            self.mu,
            self.k,
            self.k_aux,
            self.alpha,
            self.learning_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.batch_size,
            self.steps,
            self.dead_window,
            self.seed,
            self.init_scale
        );
        if let Some(dict) = self.dict_size {
            s.push_str(&format!("dict_size = {dict}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XdiffError::Config(m));
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) || !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("Adam betas must lie strictly between 0 and 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if self.dead_window == 0 || self.batch_size == 0 || self.steps == 0 {
            return bad("dead_window, batch_size and steps must be at least 1".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if self.dict_size == Some(0) {
            return bad("dict_size must be at least 1".into());
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Mean nonzero post-selection codes per sample.
    pub l0: f64,
    /// Number of selected (sample, latent) entries.
    pub selected: usize,
    pub fve: f64,
    pub dead_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainStats {
    pub fve_base: f64,
    pub fve_chat: f64,
    pub fve_total: f64,
    pub l0_mean: f64,
    pub dead_fraction: f64,
    pub loss_history: Vec<StepRecord>,
}

/// Paired encoders drawn once and shared by both models, decoders equal to
/// the encoder rows, zero biases.
pub fn init_params(config: &TrainConfig, d: usize) -> Result<CrosscoderParams> {
    config.validate()?;
    if d == 0 {
        return Err(XdiffError::Config("dimension must be at least 1".into()));
    }
    let dict = config.dict_size_for(d);
    validate_variant(&config.variant(), dict)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut enc = Array2::<f64>::zeros((dict, d));
    for mut row in enc.rows_mut() {
        loop {
            row.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
            let n = linalg::norm(row.view());
            if n > 1e-12 {
                row *= config.init_scale / n;
                break;
            }
        }
    }
    let mut w = Weights::zeros(dict, d);
    w.enc_base.assign(&enc);
    w.enc_chat.assign(&enc);
    w.dec_base.assign(&enc);
    w.dec_chat.assign(&enc);
    CrosscoderParams::new(w, config.variant())
}

/// Everything one optimization step needs from a batch.
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub grads: Weights,
    pub masks: SelectionMasks,
    /// Latents with at least one selected positive code in the batch.
    pub fired: Vec<bool>,
    pub selected: usize,
    pub nonzero: usize,
    /// Smallest selected positive scaled activation (BatchTopK only).
    pub min_selected: Option<f64>,
    pub sq_err_base: f64,
    pub sq_err_chat: f64,
}

/// Loss and analytic gradients of the params' variant.
pub fn gradients(
    params: &CrosscoderParams,
    batch: &PairedActivationBatch,
    dead_mask: &[bool],
) -> Result<(LossBreakdown, Weights)> {
    let out = forward_backward(params, batch, dead_mask)?;
    Ok((out.loss, out.grads))
}

/// Loss and gradients with caller-supplied selection masks.
pub fn gradients_with_masks(
    params: &CrosscoderParams,
    batch: &PairedActivationBatch,
    masks: SelectionMasks,
) -> Result<(LossBreakdown, Weights)> {
    let pre = crosscoder::pre_activations(params, batch)?;
    let out = backward(params, batch, pre, masks)?;
    Ok((out.loss, out.grads))
}

pub fn forward_backward(
    params: &CrosscoderParams,
    batch: &PairedActivationBatch,
    dead_mask: &[bool],
) -> Result<StepOutput> {
    let pre = crosscoder::pre_activations(params, batch)?;
    let f = pre.mapv(|x| x.max(0.0));
    let masks = masks_from_codes(params, &f, dead_mask)?;
    backward(params, batch, pre, masks)
}

/// Nonzero codes kept by a selection mask, as `(sample, latent, value)`.
fn active_entries(f: &Array2<f64>, mask: &Array2<bool>) -> Vec<(usize, usize, f64)> {
    let dict = f.ncols();
    f.iter()
        .zip(mask.iter())
        .enumerate()
        .filter(|(_, (&x, &m))| m && x > 0.0)
        .map(|(flat, (&x, _))| (flat / dict, flat % dict, x))
        .collect()
}

fn row(m: &Array2<f64>, i: usize) -> &[f64] {
    let d = m.ncols();
    &m.as_slice().expect("standard layout")[i * d..(i + 1) * d]
}

fn row_mut(m: &mut Array2<f64>, i: usize) -> &mut [f64] {
    let d = m.ncols();
    &mut m.as_slice_mut().expect("standard layout")[i * d..(i + 1) * d]
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `codes * dec` for sparse codes.
fn sparse_decode(entries: &[(usize, usize, f64)], dec: &Array2<f64>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, dec.ncols()));
    for &(i, j, x) in entries {
        axpy(row_mut(&mut out, i), x, row(dec, j));
    }
    out
}

/// Adds the contributions of one set of active codes with upstream
/// reconstruction gradients `g_b`, `g_c` to the decoder gradients and
/// returns `dL/df` at each entry.
fn backprop_entries(
    entries: &[(usize, usize, f64)],
    g_b: &Array2<f64>,
    g_c: &Array2<f64>,
    w: &Weights,
    grads: &mut Weights,
) -> Vec<f64> {
    entries
        .iter()
        .map(|&(i, j, x)| {
            let (gb, gc) = (row(g_b, i), row(g_c, i));
            axpy(row_mut(&mut grads.dec_base, j), x, gb);
            axpy(row_mut(&mut grads.dec_chat, j), x, gc);
            dot(gb, row(&w.dec_base, j)) + dot(gc, row(&w.dec_chat, j))
        })
        .collect()
}

fn backward(
    params: &CrosscoderParams,
    batch: &PairedActivationBatch,
    pre: Array2<f64>,
    masks: SelectionMasks,
) -> Result<StepOutput> {
    let w = &params.weights;
    let n_rows = batch.len();
    if masks.main.dim() != pre.dim() || masks.aux.as_ref().is_some_and(|a| a.dim() != pre.dim()) {
        return Err(XdiffError::Dimension("selection mask shape does not match codes".into()));
    }
    let n = n_rows.max(1) as f64;
    let dict = params.dict_size();
    let f = pre.mapv(|x| x.max(0.0));
    // Entries with f > 0 are exactly those with pre > 0, so the ReLU
    // derivative is 1 on every entry below and 0 elsewhere.
    let main = active_entries(&f, &masks.main);

    let eb = &batch.h_base - &(sparse_decode(&main, &w.dec_base, n_rows) + &w.b_dec_base);
    let ec = &batch.h_chat - &(sparse_decode(&main, &w.dec_chat, n_rows) + &w.b_dec_chat);
    let sq_err_base = linalg::sq_norm(eb.view());
    let sq_err_chat = linalg::sq_norm(ec.view());
    let mut loss =
        LossBreakdown { recon_base: 0.5 * sq_err_base / n, recon_chat: 0.5 * sq_err_chat / n, ..Default::default() };

    // Gradients w.r.t. the main reconstructions.
    let mut g_main_b = eb.mapv(|x| -x / n);
    let mut g_main_c = ec.mapv(|x| -x / n);
    let norm_sums = params.decoder_norm_sums();
    let mut grads = Weights::zeros(dict, params.dim());
    // (sample, latent, dL/dpre) for every entry that carries gradient.
    let mut dpre: Vec<(usize, usize, f64)> = Vec::with_capacity(main.len());

    match params.variant {
        Variant::L1 { mu } => {
            let mut code_sums = Array1::<f64>::zeros(dict);
            for &(_, j, x) in &main {
                code_sums[j] += x;
            }
            loss.sparsity = mu * code_sums.dot(&norm_sums) / n;
            loss.total = loss.recon_base + loss.recon_chat + loss.sparsity;

            let df = backprop_entries(&main, &g_main_b, &g_main_c, w, &mut grads);
            add_norm_subgradient(&mut grads.dec_base, &w.dec_base, &(&code_sums * (mu / n)));
            add_norm_subgradient(&mut grads.dec_chat, &w.dec_chat, &(&code_sums * (mu / n)));
            dpre.extend(main.iter().zip(df).map(|(&(i, j, _), g)| (i, j, g + mu / n * norm_sums[j])));
        }
        Variant::BatchTopK { alpha, .. } => {
            let mut aux_part = None;
            if let Some(aux_mask) = &masks.aux {
                let aux = active_entries(&f, aux_mask);
                let rb = &eb - &sparse_decode(&aux, &w.dec_base, n_rows);
                let rc = &ec - &sparse_decode(&aux, &w.dec_chat, n_rows);
                loss.aux = (linalg::sq_norm(rb.view()) + linalg::sq_norm(rc.view())) / n;
                // d(alpha * aux)/d(residual), felt by both the main and the aux codes.
                let gb = rb.mapv(|x| -2.0 * alpha * x / n);
                let gc = rc.mapv(|x| -2.0 * alpha * x / n);
                g_main_b += &gb;
                g_main_c += &gc;
                aux_part = Some((aux, gb, gc));
            }
            loss.total = loss.recon_base + loss.recon_chat + alpha * loss.aux;

            let df = backprop_entries(&main, &g_main_b, &g_main_c, w, &mut grads);
            dpre.extend(main.iter().zip(df).map(|(&(i, j, _), g)| (i, j, g)));
            if let Some((aux, gb, gc)) = aux_part {
                let df = backprop_entries(&aux, &gb, &gc, w, &mut grads);
                dpre.extend(aux.iter().zip(df).map(|(&(i, j, _), g)| (i, j, g)));
            }
        }
    }
    grads.b_dec_base = g_main_b.sum_axis(Axis(0));
    grads.b_dec_chat = g_main_c.sum_axis(Axis(0));

    for &(i, j, g) in &dpre {
        axpy(row_mut(&mut grads.enc_base, j), g, row(&batch.h_base, i));
        axpy(row_mut(&mut grads.enc_chat, j), g, row(&batch.h_chat, i));
        grads.b_enc[j] += g;
    }

    for (name, block) in grads.blocks() {
        if !block.iter().all(|x| x.is_finite()) {
            return Err(XdiffError::NonFiniteGradient { block: name });
        }
    }

    let mut fired = vec![false; dict];
    for &(_, j, _) in &main {
        fired[j] = true;
    }
    let selected = masks.main.iter().filter(|&&m| m).count();
    let nonzero = main.len();
    let min_selected = match params.variant {
        Variant::BatchTopK { .. } => {
            main.iter().map(|&(_, j, x)| x * norm_sums[j]).filter(|&v| v > 0.0).min_by(|a, b| a.total_cmp(b))
        }
        Variant::L1 { .. } => None,
    };

    Ok(StepOutput { loss, grads, masks, fired, selected, nonzero, min_selected, sq_err_base, sq_err_chat })
}

/// Add `coef_j * row_j / |row_j|` to every nonzero row.
fn add_norm_subgradient(grad: &mut Array2<f64>, dec: &Array2<f64>, coef: &Array1<f64>) {
    for ((mut g, row), &c) in grad.rows_mut().into_iter().zip(dec.rows()).zip(coef.iter()) {
        let n = linalg::norm(row);
        if n > 0.0 && c != 0.0 {
            g.scaled_add(c / n, &row);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Weights,
    v: Weights,
}

impl Adam {
    pub fn new(config: &TrainConfig, dict_size: usize, d: usize) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: Weights::zeros(dict_size, d),
            v: Weights::zeros(dict_size, d),
        }
    }

    pub fn step(&mut self, params: &mut Weights, grads: &Weights) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let grad_blocks = grads.blocks();
        let p_blocks = params.blocks_mut();
        let m_blocks = self.m.blocks_mut();
        let v_blocks = self.v.blocks_mut();
        for (((p, m), v), (_, g)) in p_blocks.into_iter().zip(m_blocks).zip(v_blocks).zip(grad_blocks) {
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn fve(sq_err: f64, centered: f64) -> f64 {
    if centered > 0.0 {
        1.0 - sq_err / centered
    } else if sq_err == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Train from `batches` (at least `config.steps` of them) on dimension `d`.
///
/// Dead latents are those not selected with a positive code in the last
/// `dead_window` steps. For BatchTopK, theta is calibrated on the batches of
/// the final tenth of training.
pub fn train<I>(batches: I, d: usize, config: &TrainConfig) -> Result<(CrosscoderParams, TrainStats)>
where
    I: IntoIterator<Item = PairedActivationBatch>,
{
    let mut params = init_params(config, d)?;
    let dict = params.dict_size();
    let mut adam = Adam::new(config, dict, d);
    let mut since_fired = vec![0usize; dict];
    let final_steps = ((config.steps as f64 * THETA_FRACTION).ceil() as usize).max(1);
    let final_start = config.steps - final_steps.min(config.steps);

    let mut history = Vec::with_capacity(config.steps);
    let (mut theta_sum, mut theta_count) = (0.0, 0usize);
    let (mut err_b, mut err_c, mut var_b, mut var_c) = (0.0, 0.0, 0.0, 0.0);
    let (mut l0_sum, mut l0_rows) = (0usize, 0usize);

    let mut iter = batches.into_iter();
    for step in 0..config.steps {
        let batch = iter.next().ok_or(XdiffError::Empty("training stream ended early"))?;
        let dead_mask: Vec<bool> = since_fired.iter().map(|&s| s >= config.dead_window).collect();
        let out = match forward_backward(&params, &batch, &dead_mask) {
            Err(XdiffError::NonFiniteGradient { .. }) => return Err(XdiffError::Diverged { step }),
            other => other?,
        };
        if !out.loss.total.is_finite() {
            return Err(XdiffError::Diverged { step });
        }
        adam.step(&mut params.weights, &out.grads);

        for (s, &fired) in since_fired.iter_mut().zip(out.fired.iter()) {
            *s = if fired { 0 } else { *s + 1 };
        }
        let cb = linalg::centered_sq_norm(batch.h_base.view());
        let cc = linalg::centered_sq_norm(batch.h_chat.view());
        let rows = batch.len().max(1);
        let dead_now = since_fired.iter().filter(|&&s| s >= config.dead_window).count();
        history.push(StepRecord {
            step,
            loss: out.loss,
            l0: out.nonzero as f64 / rows as f64,
            selected: out.selected,
            fve: fve(out.sq_err_base + out.sq_err_chat, cb + cc),
            dead_fraction: dead_now as f64 / dict as f64,
        });

        if step >= final_start {
            if let Some(m) = out.min_selected {
                theta_sum += m;
                theta_count += 1;
            }
            err_b += out.sq_err_base;
            err_c += out.sq_err_chat;
            var_b += cb;
            var_c += cc;
            l0_sum += out.nonzero;
            l0_rows += batch.len();
        }
    }

    if let Variant::BatchTopK { .. } = params.variant {
        if theta_count == 0 {
            return Err(XdiffError::ThresholdEstimation);
        }
        params.set_theta(theta_sum / theta_count as f64)?;
    }

    let dead = since_fired.iter().filter(|&&s| s >= config.dead_window).count();
    let stats = TrainStats {
        fve_base: fve(err_b, var_b),
        fve_chat: fve(err_c, var_c),
        fve_total: fve(err_b + err_c, var_b + var_c),
        l0_mean: l0_sum as f64 / l0_rows.max(1) as f64,
        dead_fraction: dead as f64 / dict as f64,
        loss_history: history,
    };
    Ok((params, stats))
}

/// Held-out statistics with inference-mode codes.
pub fn compute_stats(params: &CrosscoderParams, held_out: &[PairedActivationBatch]) -> Result<TrainStats> {
    let total_rows: usize = held_out.iter().map(|b| b.len()).sum();
    if total_rows == 0 {
        return Err(XdiffError::Empty("held-out set"));
    }
    let d = params.dim();
    let mut sum_b = Array1::<f64>::zeros(d);
    let mut sum_c = Array1::<f64>::zeros(d);
    let mut sq_b = 0.0;
    let mut sq_c = 0.0;
    let mut err_b = 0.0;
    let mut err_c = 0.0;
    let mut nonzero = 0usize;
    let mut fired = vec![false; params.dict_size()];
    for batch in held_out {
        let codes = crosscoder::inference_codes(params, batch)?;
        let (rb, rc) = crosscoder::decode(params, &codes)?;
        err_b += linalg::sq_norm((&batch.h_base - &rb).view());
        err_c += linalg::sq_norm((&batch.h_chat - &rc).view());
        sum_b += &batch.h_base.sum_axis(Axis(0));
        sum_c += &batch.h_chat.sum_axis(Axis(0));
        sq_b += linalg::sq_norm(batch.h_base.view());
        sq_c += linalg::sq_norm(batch.h_chat.view());
        let active = codes.active();
        for row in active.rows() {
            for (j, &x) in row.iter().enumerate() {
                if x > 0.0 {
                    nonzero += 1;
                    fired[j] = true;
                }
            }
        }
    }
    let n = total_rows as f64;
    let var_b = sq_b - sum_b.dot(&sum_b) / n;
    let var_c = sq_c - sum_c.dot(&sum_c) / n;
    Ok(TrainStats {
        fve_base: fve(err_b, var_b),
        fve_chat: fve(err_c, var_c),
        fve_total: fve(err_b + err_c, var_b + var_c),
        l0_mean: nonzero as f64 / n,
        dead_fraction: fired.iter().filter(|&&f| !f).count() as f64 / params.dict_size() as f64,
        loss_history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_batch() -> PairedActivationBatch {
        PairedActivationBatch::new(
            array![[0.5, -0.3, 1.2], [0.9, 0.4, -0.7]],
            array![[0.2, 0.8, -0.1], [-0.6, 0.3, 0.5]],
            vec![false; 2],
        )
        .unwrap()
    }

    #[test]
    fn init_pairs_encoders_and_ties_decoders() {
        let cfg = TrainConfig { dict_size: Some(8), k: 2, ..TrainConfig::default() };
        let p = init_params(&cfg, 3).unwrap();
        assert_eq!(p.weights.enc_base, p.weights.enc_chat);
        assert_eq!(p.weights.dec_base, p.weights.enc_base);
        assert_eq!(p.weights.dec_chat, p.weights.enc_chat);
        assert!(p.weights.b_enc.iter().all(|&x| x == 0.0));
        assert!(p.weights.b_dec_base.iter().all(|&x| x == 0.0));
        assert!(p.weights.b_dec_chat.iter().all(|&x| x == 0.0));
        assert_eq!(init_params(&cfg, 3).unwrap(), p);
        assert_eq!(p.dict_size(), 8);
        let default_dict = TrainConfig { k: 2, ..TrainConfig::default() };
        assert_eq!(init_params(&default_dict, 3).unwrap().dict_size(), 96);
    }

    #[test]
    fn zero_gradient_at_perfect_fit() {
        let mut w = Weights::zeros(3, 3);
        for j in 0..3 {
            w.enc_base[[j, j]] = 1.0;
            w.dec_base[[j, j]] = 1.0;
            w.dec_chat[[j, j]] = 1.0;
        }
        // Strictly positive inputs keep every pre-activation away from the kink.
        let b = PairedActivationBatch::new(array![[0.5, 0.3, 1.2]], array![[0.5, 0.3, 1.2]], vec![false]).unwrap();
        let p = CrosscoderParams::new(w, Variant::L1 { mu: 0.0 }).unwrap();
        let (loss, g) = gradients(&p, &b, &[false; 3]).unwrap();
        assert_eq!(loss.total, 0.0);
        for (_, block) in g.blocks() {
            assert!(block.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn sparsity_gradient_on_decoder_row() {
        // Decoder-base gradient of mu * f * |d_base| alone; the reconstruction
        // part is removed by taking the difference of two mu values.
        let mut w = Weights::zeros(1, 2);
        w.b_enc[0] = 1.5;
        w.dec_base.row_mut(0).assign(&array![3.0, 4.0]);
        w.dec_chat.row_mut(0).assign(&array![1.0, 0.0]);
        let b = PairedActivationBatch::new(array![[0.0, 0.0]], array![[0.0, 0.0]], vec![false]).unwrap();
        let g0 =
            gradients(&CrosscoderParams::new(w.clone(), Variant::L1 { mu: 0.0 }).unwrap(), &b, &[false]).unwrap().1;
        let g1 = gradients(&CrosscoderParams::new(w, Variant::L1 { mu: 0.2 }).unwrap(), &b, &[false]).unwrap().1;
        let diff = &g1.dec_base - &g0.dec_base;
        let expect = array![0.2 * 1.5 * 3.0 / 5.0, 0.2 * 1.5 * 4.0 / 5.0];
        for (x, y) in diff.row(0).iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_latent_gets_no_decoder_gradient() {
        let mut w = Weights::zeros(2, 3);
        w.enc_base.assign(&array![[1.0, 0.0, 0.0], [0.0, 0.1, 0.0]]);
        w.dec_base.assign(&array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        w.dec_chat.assign(&array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let p = CrosscoderParams::new(w, Variant::BatchTopK { k: 1, k_aux: 1, alpha: 0.1 }).unwrap();
        let b = PairedActivationBatch::new(array![[2.0, 1.0, 0.0]], array![[2.0, 1.0, 0.0]], vec![false]).unwrap();
        let (_, g) = gradients(&p, &b, &[false, false]).unwrap();
        assert!(g.dec_base.row(1).iter().all(|&x| x == 0.0));
        assert!(g.dec_chat.row(1).iter().all(|&x| x == 0.0));
        assert!(g.enc_base.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dead_latent_recovers_gradient_through_aux() {
        // Latent 1 has a zeroed encoder row but a positive bias; it is never
        // selected by the main top-k and would get no gradient without aux.
        let mut w = Weights::zeros(2, 3);
        w.enc_base.row_mut(0).assign(&array![1.0, 0.0, 0.0]);
        w.b_enc[1] = 0.2;
        w.dec_base.assign(&array![[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]]);
        w.dec_chat.assign(&array![[1.0, 0.0, 0.0], [0.0, 0.5, -0.5]]);
        let p = CrosscoderParams::new(w, Variant::BatchTopK { k: 1, k_aux: 1, alpha: 1.0 / 32.0 }).unwrap();
        let b = tiny_batch();
        let alive = gradients(&p, &b, &[false, false]).unwrap().1;
        assert!(alive.dec_base.row(1).iter().all(|&x| x == 0.0));
        assert_eq!(alive.b_enc[1], 0.0);
        let dead = gradients(&p, &b, &[false, true]).unwrap().1;
        assert!(dead.dec_base.row(1).iter().any(|&x| x != 0.0));
        assert!(dead.b_enc[1] != 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let mut adam = Adam::new(&cfg, 1, 1);
        let mut w = Weights::zeros(1, 1);
        let mut g = Weights::zeros(1, 1);
        g.b_enc[0] = 3.0;
        g.dec_base[[0, 0]] = -0.5;
        adam.step(&mut w, &g);
        assert!((w.b_enc[0] + 0.01).abs() < 1e-9);
        assert!((w.dec_base[[0, 0]] - 0.01).abs() < 1e-9);
        assert_eq!(w.enc_base[[0, 0]], 0.0);
    }

    #[test]
    fn config_validation_and_kv() {
        assert!(TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { dead_window: 0, ..TrainConfig::default() }.validate().is_err());
        let cfg = TrainConfig { kind: VariantKind::L1, mu: 0.07, dict_size: Some(40), ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
    }

    #[test]
    fn compute_stats_edge_cases() {
        let b = tiny_batch();
        let p = CrosscoderParams::new(Weights::zeros(2, 3), Variant::L1 { mu: 0.0 }).unwrap();
        assert!(matches!(compute_stats(&p, &[]), Err(XdiffError::Empty(_))));
        let s = compute_stats(&p, std::slice::from_ref(&b)).unwrap();
        assert_eq!(s.l0_mean, 0.0);
        assert_eq!(s.dead_fraction, 1.0);
        // Zero model reconstructs the zero vector, not the mean: FVE <= 0.
        assert!(s.fve_total <= 0.0);
    }
}
