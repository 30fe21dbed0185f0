//! Latent Scaling.
//!
//! For latent `j`, a scalar `beta` is fitted so that `beta * f_j(x) * d_j`
//! best explains a target in each model, where `d_j` is the latent's chat
//! decoder row. Targets are either the raw activations (reconstruction) or
//! the leave-one-out residual `eps + f_j d^m_j` (error). The ratios of the
//! base and chat betas measure how much the latent is present in the base
//! model.
//!
//! Everything is accumulated over samples in one pass, so `Y` is never
//! materialized.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::crosscoder::{self, CrosscoderParams};
use crate::error::{Result, XdiffError};
use crate::world::PairedActivationBatch;

/// Latents firing on fewer samples than this are flagged.
pub const MIN_SUPPORT: usize = 10;
pub const SHRINKAGE_THRESHOLD: f64 = 0.2;
pub const DECOUPLING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Reconstruction,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Base,
    Chat,
}

/// `argmin_beta sum_i |beta f_i d - y_i|^2`.
pub fn beta_closed_form(f: ArrayView1<'_, f64>, d: ArrayView1<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    if y.dim() != (f.len(), d.len()) {
        return Err(XdiffError::Dimension(format!("targets are {:?}, expected ({}, {})", y.dim(), f.len(), d.len())));
    }
    let ff = f.dot(&f);
    let dd = d.dot(&d);
    if ff == 0.0 || dd == 0.0 {
        return Err(XdiffError::UndefinedScaling("latent activation or decoder is zero".into()));
    }
    Ok(d.dot(&y.t().dot(&f)) / (ff * dd))
}

/// Signed base/chat ratio.
pub fn nu_ratio(beta_base: f64, beta_chat: f64) -> Result<f64> {
    if beta_chat == 0.0 {
        return Err(XdiffError::UndefinedScaling("chat beta is zero".into()));
    }
    Ok(beta_base / beta_chat)
}

/// Explicit target matrix for latent `j`.
pub fn scaling_targets(
    params: &CrosscoderParams,
    batch: &PairedActivationBatch,
    j: usize,
    kind: TargetKind,
    model: Model,
) -> Result<Array2<f64>> {
    if j >= params.dict_size() {
        return Err(XdiffError::Dimension(format!("latent {j} out of range")));
    }
    let h = match model {
        Model::Base => &batch.h_base,
        Model::Chat => &batch.h_chat,
    };
    if kind == TargetKind::Reconstruction {
        return Ok(h.clone());
    }
    let codes = crosscoder::inference_codes(params, batch)?;
    let (rb, rc) = crosscoder::decode(params, &codes)?;
    let (recon, dec) = match model {
        Model::Base => (rb, &params.weights.dec_base),
        Model::Chat => (rc, &params.weights.dec_chat),
    };
    let mut y = h - &recon;
    let active = codes.active();
    for (mut row, &fj) in y.rows_mut().into_iter().zip(active.column(j).iter()) {
        if fj != 0.0 {
            row.scaled_add(fj, &dec.row(j));
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaQuadruple {
    pub beta_r_base: f64,
    pub beta_r_chat: f64,
    pub beta_eps_base: f64,
    pub beta_eps_chat: f64,
    pub nu_r: f64,
    pub nu_eps: f64,
    pub negative_base_flag: bool,
}

/// Relative MSE improvement from adding `beta f_j d_j` to an empty
/// contribution, over the latent's firing samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MseImprovements {
    pub r_base: f64,
    pub r_chat: f64,
    pub eps_base: f64,
    pub eps_chat: f64,
}

impl MseImprovements {
    pub fn get(&self, model: Model, kind: TargetKind) -> f64 {
        match (model, kind) {
            (Model::Base, TargetKind::Reconstruction) => self.r_base,
            (Model::Chat, TargetKind::Reconstruction) => self.r_chat,
            (Model::Base, TargetKind::Error) => self.eps_base,
            (Model::Chat, TargetKind::Error) => self.eps_chat,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentScaling {
    pub latent: usize,
    /// Samples on which the latent's inference code is nonzero.
    pub support: usize,
    /// `None` when the latent is excluded; see `excluded`.
    pub betas: Option<BetaQuadruple>,
    pub mse: Option<MseImprovements>,
    pub low_support: bool,
    pub excluded: Option<&'static str>,
}

impl LatentScaling {
    pub fn flags(&self) -> String {
        let mut f: Vec<&str> = Vec::new();
        if let Some(reason) = self.excluded {
            f.push(reason);
        }
        if self.low_support {
            f.push("low-support");
        }
        if self.betas.is_some_and(|b| b.negative_base_flag) {
            f.push("negative-base");
        }
        f.join("|")
    }
}

/// Per-target running sums for one latent.
#[derive(Debug, Clone, Copy, Default)]
struct TargetSums {
    /// sum f (y . d_chat)
    num: f64,
    /// sum over firing samples of |y|^2
    yy: f64,
}

#[derive(Debug, Clone, Default)]
struct Accumulator {
    ff: Vec<f64>,
    support: Vec<usize>,
    // [r_base, r_chat, eps_base, eps_chat]
    sums: [Vec<TargetSums>; 4],
}

impl Accumulator {
    fn new(dict: usize) -> Self {
        Self {
            ff: vec![0.0; dict],
            support: vec![0; dict],
            sums: std::array::from_fn(|_| vec![TargetSums::default(); dict]),
        }
    }

    fn add_batch(&mut self, params: &CrosscoderParams, batch: &PairedActivationBatch) -> Result<()> {
        let w = &params.weights;
        let codes = crosscoder::inference_codes(params, batch)?;
        let f = codes.active();
        let (rb, rc) = crosscoder::decode(params, &codes)?;
        let eb = &batch.h_base - &rb;
        let ec = &batch.h_chat - &rc;

        let dct = w.dec_chat.t();
        let hb_dc = batch.h_base.dot(&dct);
        let hc_dc = batch.h_chat.dot(&dct);
        let eb_dc = eb.dot(&dct);
        let eb_db = eb.dot(&w.dec_base.t());
        let ec_dc = ec.dot(&dct);

        let nb2 = w.dec_base.map_axis(Axis(1), |r| r.dot(&r));
        let nc2 = w.dec_chat.map_axis(Axis(1), |r| r.dot(&r));
        let bc = (&w.dec_base * &w.dec_chat).sum_axis(Axis(1));
        let hb2: Array1<f64> = batch.h_base.map_axis(Axis(1), |r| r.dot(&r));
        let hc2: Array1<f64> = batch.h_chat.map_axis(Axis(1), |r| r.dot(&r));
        let eb2: Array1<f64> = eb.map_axis(Axis(1), |r| r.dot(&r));
        let ec2: Array1<f64> = ec.map_axis(Axis(1), |r| r.dot(&r));

        for (i, frow) in f.rows().into_iter().enumerate() {
            for (j, &fj) in frow.iter().enumerate() {
                if fj == 0.0 {
                    continue;
                }
                self.ff[j] += fj * fj;
                self.support[j] += 1;
                let [r_b, r_c, e_b, e_c] = &mut self.sums;
                r_b[j].num += fj * hb_dc[[i, j]];
                r_b[j].yy += hb2[i];
                r_c[j].num += fj * hc_dc[[i, j]];
                r_c[j].yy += hc2[i];
                // y = eps + f d^m, so y . d_chat = eps . d_chat + f d^m . d_chat
                e_b[j].num += fj * (eb_dc[[i, j]] + fj * bc[j]);
                e_b[j].yy += eb2[i] + 2.0 * fj * eb_db[[i, j]] + fj * fj * nb2[j];
                e_c[j].num += fj * (ec_dc[[i, j]] + fj * nc2[j]);
                e_c[j].yy += ec2[i] + 2.0 * fj * ec_dc[[i, j]] + fj * fj * nc2[j];
            }
        }
        Ok(())
    }
}

fn improvement(beta: f64, s: TargetSums, den: f64) -> f64 {
    if s.yy > 0.0 {
        // |y|^2 - |y - beta f d|^2 = 2 beta num - beta^2 den
        (2.0 * beta * s.num - beta * beta * den) / s.yy
    } else {
        f64::NAN
    }
}

/// Betas, ratios and MSE improvements for the listed latents.
pub fn latent_scaling_report(
    params: &CrosscoderParams,
    batches: &[PairedActivationBatch],
    latents: &[usize],
) -> Result<Vec<LatentScaling>> {
    if batches.is_empty() {
        return Err(XdiffError::Empty("scaling batches"));
    }
    let dict = params.dict_size();
    if let Some(&j) = latents.iter().find(|&&j| j >= dict) {
        return Err(XdiffError::Dimension(format!("latent {j} out of range")));
    }
    let mut acc = Accumulator::new(dict);
    for b in batches {
        acc.add_batch(params, b)?;
    }
    let nc2 = params.weights.dec_chat.map_axis(Axis(1), |r| r.dot(&r));

    Ok(latents
        .iter()
        .map(|&j| {
            let support = acc.support[j];
            let mut row = LatentScaling {
                latent: j,
                support,
                betas: None,
                mse: None,
                low_support: support < MIN_SUPPORT,
                excluded: None,
            };
            let den = acc.ff[j] * nc2[j];
            if support == 0 {
                row.excluded = Some("never-fires");
                return row;
            }
            if den == 0.0 {
                row.excluded = Some("zero-decoder");
                return row;
            }
            let [r_b, r_c, e_b, e_c] = [0, 1, 2, 3].map(|t| acc.sums[t][j]);
            let b = [r_b, r_c, e_b, e_c].map(|s| s.num / den);
            row.mse = Some(MseImprovements {
                r_base: improvement(b[0], r_b, den),
                r_chat: improvement(b[1], r_c, den),
                eps_base: improvement(b[2], e_b, den),
                eps_chat: improvement(b[3], e_c, den),
            });
            match (nu_ratio(b[0], b[1]), nu_ratio(b[2], b[3])) {
                (Ok(nu_r), Ok(nu_eps)) => {
                    row.betas = Some(BetaQuadruple {
                        beta_r_base: b[0],
                        beta_r_chat: b[1],
                        beta_eps_base: b[2],
                        beta_eps_chat: b[3],
                        nu_r,
                        nu_eps,
                        negative_base_flag: b[0] < 0.0 || b[2] < 0.0,
                    });
                }
                _ => row.excluded = Some("zero-chat-beta"),
            }
            row
        })
        .collect())
}

/// MSE improvement of one latent in one model and target kind.
pub fn mse_improvement(
    params: &CrosscoderParams,
    batches: &[PairedActivationBatch],
    j: usize,
    model: Model,
    kind: TargetKind,
) -> Result<f64> {
    let row = latent_scaling_report(params, batches, &[j])?.remove(0);
    let v = row
        .mse
        .map(|m| m.get(model, kind))
        .ok_or_else(|| XdiffError::UndefinedScaling(format!("latent {j}: {}", row.excluded.unwrap_or("undefined"))))?;
    if v.is_nan() {
        return Err(XdiffError::UndefinedScaling(format!("latent {j}: original MSE is zero")));
    }
    Ok(v)
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut k = i;
        while k + 1 < idx.len() && x[idx[k + 1]] == x[idx[i]] {
            k += 1;
        }
        let avg = (i + k) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=k] {
            r[p] = avg;
        }
        i = k + 1;
    }
    r
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Latents with betas ordered by `rank(nu_eps) + rank(nu_r)` ascending,
/// ties by latent index. Lowest sums are the most chat-specific.
pub fn rank_sum_order(rows: &[LatentScaling]) -> Vec<(usize, f64)> {
    let with: Vec<(usize, BetaQuadruple)> = rows.iter().filter_map(|r| r.betas.map(|b| (r.latent, b))).collect();
    let eps: Vec<f64> = with.iter().map(|(_, b)| b.nu_eps).collect();
    let rec: Vec<f64> = with.iter().map(|(_, b)| b.nu_r).collect();
    let (re, rr) = (ranks(&eps), ranks(&rec));
    let mut out: Vec<(usize, f64)> = with.iter().enumerate().map(|(i, (j, _))| (*j, re[i] + rr[i])).collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::{Variant, Weights};
    use ndarray::array;

    #[test]
    fn closed_form_examples() {
        let f = array![1.0, 1.0];
        let d = array![1.0, 0.0];
        let y = array![[1.0, 0.0], [3.0, 0.0]];
        assert_eq!(beta_closed_form(f.view(), d.view(), y.view()).unwrap(), 2.0);

        let f = array![0.5, 2.0, 1.5];
        let d = array![0.3, -1.0];
        let exact = Array2::from_shape_fn((3, 2), |(i, k)| f[i] * d[k]);
        assert!((beta_closed_form(f.view(), d.view(), exact.view()).unwrap() - 1.0).abs() < 1e-12);
        let twice = &exact * 2.0;
        assert!((beta_closed_form(f.view(), d.view(), twice.view()).unwrap() - 2.0).abs() < 1e-12);

        assert!(beta_closed_form(array![0.0, 0.0].view(), d.view(), y.view()).is_err());
        assert!(nu_ratio(1.0, 0.0).is_err());
    }

    /// One latent along x in the chat model only, perfectly recovered.
    fn chat_only_setup() -> (CrosscoderParams, PairedActivationBatch) {
        let mut w = Weights::zeros(1, 2);
        w.enc_chat.assign(&array![[1.0, 0.0]]);
        w.dec_chat.assign(&array![[1.0, 0.0]]);
        let p = CrosscoderParams::new(w, Variant::L1 { mu: 0.0 }).unwrap();
        let hc = Array2::from_shape_fn((12, 2), |(i, k)| if k == 0 { 0.5 + i as f64 } else { 0.0 });
        let hb = Array2::zeros((12, 2));
        (p, PairedActivationBatch::new(hb, hc, vec![false; 12]).unwrap())
    }

    #[test]
    fn truly_chat_specific_latent() {
        let (p, b) = chat_only_setup();
        let rows = latent_scaling_report(&p, std::slice::from_ref(&b), &[0]).unwrap();
        let q = rows[0].betas.unwrap();
        assert_eq!(q.beta_eps_base, 0.0);
        assert_eq!(q.beta_eps_chat, 1.0);
        assert_eq!(q.nu_eps, 0.0);
        assert_eq!(q.nu_r, 0.0);
        assert!(!rows[0].low_support);

        let y = scaling_targets(&p, &b, 0, TargetKind::Error, Model::Chat).unwrap();
        assert_eq!(y, b.h_chat);
        assert_eq!(scaling_targets(&p, &b, 0, TargetKind::Reconstruction, Model::Base).unwrap(), b.h_base);
        // The error is fully explained by the latent in its own model.
        assert!(
            (mse_improvement(&p, std::slice::from_ref(&b), 0, Model::Chat, TargetKind::Error).unwrap() - 1.0).abs()
                < 1e-12
        );
    }

    #[test]
    fn accumulators_match_explicit_targets() {
        let mut w = Weights::zeros(2, 3);
        w.enc_base.assign(&array![[1.0, 0.2, 0.0], [0.0, 0.5, 0.9]]);
        w.enc_chat.assign(&array![[0.4, 0.0, 0.3], [0.1, 0.7, 0.0]]);
        w.b_enc.assign(&array![0.1, -0.05]);
        w.dec_base.assign(&array![[0.9, 0.1, 0.0], [0.0, 0.2, 0.8]]);
        w.dec_chat.assign(&array![[1.0, 0.0, 0.2], [0.1, 0.6, 0.5]]);
        w.b_dec_base.assign(&array![0.05, 0.0, -0.1]);
        let p = CrosscoderParams::new(w, Variant::L1 { mu: 0.1 }).unwrap();
        let b = PairedActivationBatch::new(
            array![[1.0, 0.5, 0.2], [0.3, 1.2, 0.8], [0.9, 0.1, 0.4]],
            array![[0.7, 0.2, 0.9], [0.2, 1.5, 0.3], [1.1, 0.4, 0.0]],
            vec![false; 3],
        )
        .unwrap();
        let rows = latent_scaling_report(&p, std::slice::from_ref(&b), &[0, 1]).unwrap();
        let codes = crosscoder::inference_codes(&p, &b).unwrap().active();
        for row in &rows {
            let j = row.latent;
            let f = codes.column(j);
            let d = p.weights.dec_chat.row(j);
            let q = row.betas.unwrap();
            let expect = [
                (TargetKind::Reconstruction, Model::Base, q.beta_r_base),
                (TargetKind::Reconstruction, Model::Chat, q.beta_r_chat),
                (TargetKind::Error, Model::Base, q.beta_eps_base),
                (TargetKind::Error, Model::Chat, q.beta_eps_chat),
            ];
            for (kind, model, beta) in expect {
                let y = scaling_targets(&p, &b, j, kind, model).unwrap();
                let direct = beta_closed_form(f, d, y.view()).unwrap();
                assert!((direct - beta).abs() < 1e-12 * direct.abs().max(1.0));
                // MSE improvement against a direct evaluation over firing rows.
                let (mut orig, mut scaled) = (0.0, 0.0);
                for (i, yi) in y.rows().into_iter().enumerate() {
                    if f[i] != 0.0 {
                        orig += yi.dot(&yi);
                        let r = &yi - &(&d * (beta * f[i]));
                        scaled += r.dot(&r);
                    }
                }
                let got = row.mse.unwrap().get(model, kind);
                assert!((got - (orig - scaled) / orig).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn never_firing_latent_is_excluded() {
        let (mut p, b) = chat_only_setup();
        p.weights.b_enc[0] = -1e6;
        let rows = latent_scaling_report(&p, std::slice::from_ref(&b), &[0]).unwrap();
        assert_eq!(rows[0].excluded, Some("never-fires"));
        assert!(rows[0].betas.is_none());
        assert!(mse_improvement(&p, &[b], 0, Model::Base, TargetKind::Error).is_err());
    }

    #[test]
    fn spearman_and_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }
}
