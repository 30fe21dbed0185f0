use ndarray::{Array1, Array2};
use proptest::prelude::*;

use xdiff::crosscoder::{self, CrosscoderParams, Variant, Weights};
use xdiff::diffing;
use xdiff::io::{decode_batch, decode_weights, encode_batch, encode_weights};
use xdiff::linalg;
use xdiff::patching::{self, PatchSpec};
use xdiff::scaling;
use xdiff::world::{generate_world, PairedActivationBatch, WorldConfig};

fn vec_of(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    vec_of(rows * cols, -2.0, 2.0).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn weights(dict: usize, d: usize) -> impl Strategy<Value = Weights> {
    (
        matrix(dict, d),
        matrix(dict, d),
        vec_of(dict, -0.5, 0.5),
        matrix(dict, d),
        matrix(dict, d),
        vec_of(d, -0.5, 0.5),
        vec_of(d, -0.5, 0.5),
    )
        .prop_map(|(eb, ec, be, db, dc, bb, bc)| Weights {
            enc_base: eb,
            enc_chat: ec,
            b_enc: Array1::from(be),
            dec_base: db,
            dec_chat: dc,
            b_dec_base: Array1::from(bb),
            b_dec_chat: Array1::from(bc),
        })
}

fn variant(dict: usize) -> impl Strategy<Value = Variant> {
    prop_oneof![
        (0.0..2.0f64).prop_map(|mu| Variant::L1 { mu }),
        (1..=dict, 1..=dict, 0.0..1.0f64).prop_map(|(k, k_aux, alpha)| Variant::BatchTopK { k, k_aux, alpha }),
    ]
}

fn model() -> impl Strategy<Value = (CrosscoderParams, PairedActivationBatch)> {
    (1..=6usize, 1..=8usize, 1..=6usize).prop_flat_map(|(d, dict, n)| {
        (weights(dict, d), variant(dict), matrix(n, d), matrix(n, d)).prop_map(move |(w, v, hb, hc)| {
            (CrosscoderParams::new(w, v).unwrap(), PairedActivationBatch::new(hb, hc, vec![false; n]).unwrap())
        })
    })
}

fn distribution(n: usize) -> impl Strategy<Value = Array1<f64>> {
    vec_of(n, -5.0, 5.0).prop_map(|v| linalg::softmax(Array1::from(v).view()))
}

fn brute_divergence(ti: &[f64], tj: &[f64], vi: &[f64], vj: &[f64]) -> Option<f64> {
    let a = ti.iter().chain(tj).copied().fold(0.0, f64::max);
    if a <= 0.0 {
        return None;
    }
    let events: Vec<usize> = (0..vi.len()).filter(|&s| vi[s] > 0.7 * a || vj[s] > 0.7 * a).collect();
    if events.is_empty() {
        return None;
    }
    let mut single = 0;
    for &s in &events {
        single += (vi[s] > 0.7 * a && vj[s] < 0.3 * a) as usize;
        single += (vj[s] > 0.7 * a && vi[s] < 0.3 * a) as usize;
    }
    Some(single as f64 / events.len() as f64)
}

fn trace(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..3.0f64], n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn delta_norm_rescale_and_swap(nb in 0.0..10.0f64, nc in 0.0..10.0f64, s in 1e-3..1e3f64) {
        if let Some(x) = diffing::delta_norm_from_norms(nb, nc) {
            prop_assert!((0.0..=1.0).contains(&x));
            let scaled = diffing::delta_norm_from_norms(s * nb, s * nc).unwrap();
            prop_assert!((x - scaled).abs() <= 1e-12);
            let swapped = diffing::delta_norm_from_norms(nc, nb).unwrap();
            prop_assert!((x + swapped - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn delta_norm_swap_on_params((params, _) in model()) {
        let mut swapped = params.clone();
        std::mem::swap(&mut swapped.weights.dec_base, &mut swapped.weights.dec_chat);
        for (a, b) in diffing::delta_norms(&params).into_iter().zip(diffing::delta_norms(&swapped)) {
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a + b - 1.0).abs() <= 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_identity(
        (p, q) in (1..=12usize).prop_flat_map(|n| (distribution(n), distribution(n)))
    ) {
        prop_assert!(patching::kl_divergence(p.view(), q.view()).unwrap() >= 0.0);
        prop_assert_eq!(patching::kl_divergence(p.view(), p.view()).unwrap(), 0.0);
    }

    #[test]
    fn weights_round_trip_bit_exact((params, _) in model(), theta in prop::option::of(0.0..5.0f64)) {
        let mut params = params;
        for block in params.weights.blocks_mut() {
            for v in block.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        if let (Some(t), Variant::BatchTopK { .. }) = (theta, params.variant) {
            params.set_theta(t).unwrap();
        }
        let bytes = encode_weights(&params);
        let back = decode_weights(&bytes).unwrap();
        for ((_, a), (_, b)) in back.weights.blocks().iter().zip(params.weights.blocks().iter()) {
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back.variant, params.variant);
        prop_assert_eq!(back.theta, params.theta);
        prop_assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn batch_round_trip_bit_exact((_, batch) in model(), flags in prop::collection::vec(any::<bool>(), 6)) {
        let n = batch.len();
        let f32ish = |m: &Array2<f64>| m.mapv(|x| x as f32 as f64);
        let b = PairedActivationBatch::new(f32ish(&batch.h_base), f32ish(&batch.h_chat), flags[..n].to_vec()).unwrap();
        let back = decode_batch(&encode_batch(&b)).unwrap();
        prop_assert_eq!(&back.h_base, &b.h_base);
        prop_assert_eq!(&back.h_chat, &b.h_chat);
        prop_assert_eq!(&back.template_mask, &b.template_mask);
    }

    #[test]
    fn divergence_matches_brute_force(
        (ti, tj) in (1..=100usize).prop_flat_map(|n| (trace(n), trace(n))),
        (vi, vj) in (1..=100usize).prop_flat_map(|n| (trace(n), trace(n))),
    ) {
        prop_assert_eq!(diffing::divergence_from_traces(&ti, &tj, &vi, &vj), brute_divergence(&ti, &tj, &vi, &vj));
    }

    #[test]
    fn closed_form_beta_is_a_minimum(
        (f, d, y) in (1..=20usize, 1..=8usize).prop_flat_map(|(n, k)| (vec_of(n, 0.0, 3.0), vec_of(k, -2.0, 2.0), matrix(n, k)))
    ) {
        let f = Array1::from(f);
        let d = Array1::from(d);
        prop_assume!(f.dot(&f) > 1e-6 && d.dot(&d) > 1e-6);
        let beta = scaling::beta_closed_form(f.view(), d.view(), y.view()).unwrap();
        let loss = |b: f64| {
            let mut s = 0.0;
            for (i, &fi) in f.iter().enumerate() {
                for (k, &dk) in d.iter().enumerate() {
                    s += (b * fi * dk - y[[i, k]]).powi(2);
                }
            }
            s
        };
        let at = loss(beta);
        prop_assert!(at <= loss(beta + 1e-3) && at <= loss(beta - 1e-3));
    }

    #[test]
    fn crosscoder_penalty_dominates_stacked(
        (b, c) in (1..=16usize).prop_flat_map(|n| (vec_of(n, -5.0, 5.0), vec_of(n, -5.0, 5.0))),
        f in 0.0..5.0f64,
        zero in 0..3u8,
    ) {
        let mut b = Array1::from(b);
        let mut c = Array1::from(c);
        match zero {
            0 => b.fill(0.0),
            1 => c.fill(0.0),
            _ => {}
        }
        let (cross, stacked) = crosscoder::sparsity_penalties(b.view(), c.view(), f);
        prop_assert!(cross >= stacked);
        if zero < 2 {
            prop_assert_eq!(cross, stacked);
        }
    }

    #[test]
    fn topk_keeps_exactly_n_k_largest(v in (1..=6usize, 1..=8usize).prop_flat_map(|(n, m)| matrix(n, m)), k in 1..=8usize) {
        let k = k.min(v.ncols());
        let mask = crosscoder::batch_topk_select(v.view(), k).unwrap();
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), v.nrows() * k);
        let kept_min = v.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&x, _)| x).fold(f64::INFINITY, f64::min);
        let dropped_max = v.iter().zip(mask.iter()).filter(|(_, &m)| !m).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(kept_min >= dropped_max);
    }

    #[test]
    fn full_latent_set_reproduces_all_patch((params, batch) in model(), theta in 0.0..1.0f64) {
        let mut params = params;
        if matches!(params.variant, Variant::BatchTopK { .. }) {
            params.set_theta(theta).unwrap();
        }
        let all = patching::approximate(&params, &batch, &PatchSpec::All).unwrap();
        let set = patching::approximate(&params, &batch, &PatchSpec::full_set(params.dict_size())).unwrap();
        for (x, y) in all.iter().zip(set.iter()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
        let none = patching::approximate(&params, &batch, &PatchSpec::latent_set("empty", vec![])).unwrap();
        prop_assert_eq!(none, batch.h_base.clone());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn worlds_are_deterministic(seed in any::<u64>(), first in 0..1_000_000u64) {
        let wc = WorldConfig { d: 16, vocab: 8, shared: 4, base_only: 4, chat_only: 4, seed, ..WorldConfig::default() };
        let a = generate_world(&wc).unwrap();
        let b = generate_world(&wc).unwrap();
        prop_assert_eq!(&a.latents, &b.latents);
        prop_assert_eq!(a.sample_range(first, 7), b.sample_range(first, 7));
        let whole = a.sample_range(first, 7);
        let tail = a.sample_range(first + 3, 4);
        prop_assert_eq!(whole.h_chat.slice(ndarray::s![3.., ..]), tail.h_chat.view());
    }
}
