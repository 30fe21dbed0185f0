//! Synthetic paired-activation worlds with a planted dictionary.
//!
//! A world holds a set of planted latents, each with a unit direction per
//! model and per-model scales, plus two toy affine readouts that stand in for
//! the remaining layers of each model. Samples are generated from a per-index
//! random stream, so any index range can be reproduced independently.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Result, XdiffError};
use crate::io::kv;
use crate::linalg;

const SAMPLE_SALT: u64 = 0x5eed_ba7c_4e5f_0001;
const MAX_DIRECTION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatentClass {
    Shared,
    BaseOnly,
    ChatOnly,
    DecouplingProbe,
}

impl LatentClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentClass::Shared => "shared",
            LatentClass::BaseOnly => "base-only",
            LatentClass::ChatOnly => "chat-only",
            LatentClass::DecouplingProbe => "decoupling-probe",
        }
    }
}

/// Firing probabilities of the three activation components of a
/// decoupling-probe latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeFiring {
    pub shared: f64,
    pub base_excl: f64,
    pub chat_excl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedLatent {
    pub direction_base: Array1<f64>,
    pub direction_chat: Array1<f64>,
    pub class: LatentClass,
    pub fire_prob: f64,
    pub scale_base: f64,
    pub scale_chat: f64,
    /// Only set for decoupling probes.
    pub probe: Option<ProbeFiring>,
}

/// Affine map `R^d -> R^V` followed by a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Readout {
    pub fn vocab(&self) -> usize {
        self.weight.nrows()
    }

    pub fn logits(&self, h: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&h) + &self.bias
    }
}

/// Next-token distribution of a toy readout: `softmax(W h + b)`.
pub fn toy_forward(readout: &Readout, h: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if h.len() != readout.weight.ncols() {
        return Err(XdiffError::Dimension(format!(
            "activation has {} entries, readout expects {}",
            h.len(),
            readout.weight.ncols()
        )));
    }
    Ok(linalg::softmax(readout.logits(h).view()))
}

/// Generator settings. Every field has a key in the flat config file.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub d: usize,
    pub vocab: usize,
    pub shared: usize,
    pub base_only: usize,
    pub chat_only: usize,
    pub probe: usize,
    /// Shared latents whose base and chat scales differ.
    pub asym_shared: usize,
    pub p_shared: f64,
    pub p_base_only: f64,
    pub p_chat_only: f64,
    pub p_asym: f64,
    pub p_probe_shared: f64,
    pub p_probe_base_excl: f64,
    pub p_probe_chat_excl: f64,
    pub scale_shared_base: f64,
    pub scale_shared_chat: f64,
    pub scale_base_only: f64,
    pub scale_chat_only: f64,
    pub scale_asym_base: f64,
    pub scale_asym_chat: f64,
    pub scale_probe: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub template_stride: usize,
    pub max_cos: f64,
    pub readout_gain: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d: 64,
            vocab: 16,
            shared: 16,
            base_only: 16,
            chat_only: 16,
            probe: 0,
            asym_shared: 0,
            p_shared: 0.05,
            p_base_only: 0.05,
            p_chat_only: 0.05,
            p_asym: 0.05,
            p_probe_shared: 0.05,
            p_probe_base_excl: 0.0,
            p_probe_chat_excl: 0.0,
            scale_shared_base: 1.0,
            scale_shared_chat: 1.0,
            scale_base_only: 1.0,
            scale_chat_only: 1.0,
            scale_asym_base: 0.1,
            scale_asym_chat: 1.0,
            scale_probe: 1.0,
            noise_sigma: 0.01,
            seed: 0,
            template_stride: 8,
            max_cos: 0.5,
            readout_gain: 4.0,
        }
    }
}

impl WorldConfig {
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv::parse(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Assign one field by its config-file key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "d" => self.d = kv::value(key, raw)?,
            "vocab" => self.vocab = kv::value(key, raw)?,
            "shared" => self.shared = kv::value(key, raw)?,
            "base_only" => self.base_only = kv::value(key, raw)?,
            "chat_only" => self.chat_only = kv::value(key, raw)?,
            "probe" => self.probe = kv::value(key, raw)?,
            "asym_shared" => self.asym_shared = kv::value(key, raw)?,
            "p_shared" => self.p_shared = kv::value(key, raw)?,
            "p_base_only" => self.p_base_only = kv::value(key, raw)?,
            "p_chat_only" => self.p_chat_only = kv::value(key, raw)?,
            "p_asym" => self.p_asym = kv::value(key, raw)?,
            "p_probe_shared" => self.p_probe_shared = kv::value(key, raw)?,
            "p_probe_base_excl" => self.p_probe_base_excl = kv::value(key, raw)?,
            "p_probe_chat_excl" => self.p_probe_chat_excl = kv::value(key, raw)?,
            "scale_shared_base" => self.scale_shared_base = kv::value(key, raw)?,
            "scale_shared_chat" => self.scale_shared_chat = kv::value(key, raw)?,
            "scale_base_only" => self.scale_base_only = kv::value(key, raw)?,
            "scale_chat_only" => self.scale_chat_only = kv::value(key, raw)?,
            "scale_asym_base" => self.scale_asym_base = kv::value(key, raw)?,
            "scale_asym_chat" => self.scale_asym_chat = kv::value(key, raw)?,
            "scale_probe" => self.scale_probe = kv::value(key, raw)?,
            "noise_sigma" => self.noise_sigma = kv::value(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            "template_stride" => self.template_stride = kv::value(key, raw)?,
            "max_cos" => self.max_cos = kv::value(key, raw)?,
            "readout_gain" => self.readout_gain = kv::value(key, raw)?,
            _ => return Err(XdiffError::Config(format!("unknown world key `{key}`"))),
        }
        Ok(())
    }

    /// Serialize back to the flat key-value form.
    pub fn to_kv_text(&self) -> String {
        let rows: [(&str, String); 26] = [
            ("d", self.d.to_string()),
            ("vocab", self.vocab.to_string()),
            ("shared", self.shared.to_string()),
            ("base_only", self.base_only.to_string()),
            ("chat_only", self.chat_only.to_string()),
            ("probe", self.probe.to_string()),
            ("asym_shared", self.asym_shared.to_string()),
            ("p_shared", self.p_shared.to_string()),
            ("p_base_only", self.p_base_only.to_string()),
            ("p_chat_only", self.p_chat_only.to_string()),
            ("p_asym", self.p_asym.to_string()),
            ("p_probe_shared", self.p_probe_shared.to_string()),
            ("p_probe_base_excl", self.p_probe_base_excl.to_string()),
            ("p_probe_chat_excl", self.p_probe_chat_excl.to_string()),
            ("scale_shared_base", self.scale_shared_base.to_string()),
            ("scale_shared_chat", self.scale_shared_chat.to_string()),
            ("scale_base_only", self.scale_base_only.to_string()),
            ("scale_chat_only", self.scale_chat_only.to_string()),
            ("scale_asym_base", self.scale_asym_base.to_string()),
            ("scale_asym_chat", self.scale_asym_chat.to_string()),
            ("scale_probe", self.scale_probe.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("seed", self.seed.to_string()),
            ("template_stride", self.template_stride.to_string()),
            ("max_cos", self.max_cos.to_string()),
            ("readout_gain", self.readout_gain.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn latent_count(&self) -> usize {
        self.shared + self.asym_shared + self.base_only + self.chat_only + self.probe
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XdiffError::Config(m));
        if self.d == 0 {
            return bad("d must be at least 1".into());
        }
        if self.vocab == 0 || self.vocab > self.d {
            return bad(format!("vocab must be in 1..={} (d)", self.d));
        }
        let probs = [
            ("p_shared", self.p_shared),
            ("p_base_only", self.p_base_only),
            ("p_chat_only", self.p_chat_only),
            ("p_asym", self.p_asym),
            ("p_probe_shared", self.p_probe_shared),
            ("p_probe_base_excl", self.p_probe_base_excl),
            ("p_probe_chat_excl", self.p_probe_chat_excl),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability, got {p}"));
            }
        }
        let nonneg = [
            ("scale_shared_base", self.scale_shared_base),
            ("scale_shared_chat", self.scale_shared_chat),
            ("scale_base_only", self.scale_base_only),
            ("scale_chat_only", self.scale_chat_only),
            ("scale_asym_base", self.scale_asym_base),
            ("scale_asym_chat", self.scale_asym_chat),
            ("scale_probe", self.scale_probe),
            ("noise_sigma", self.noise_sigma),
            ("readout_gain", self.readout_gain),
        ];
        for (name, x) in nonneg {
            if !(x >= 0.0 && x.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative number, got {x}"));
            }
        }
        if self.template_stride == 0 {
            return bad("template_stride must be at least 1".into());
        }
        if !(self.max_cos > 0.0 && self.max_cos <= 1.0) {
            return bad(format!("max_cos must be in (0, 1], got {}", self.max_cos));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWorld {
    pub latents: Vec<PlantedLatent>,
    pub d: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub readout_base: Readout,
    pub readout_chat: Readout,
    pub template_stride: usize,
}

/// Ground-truth codes per model. They coincide except on decoupling probes,
/// whose exclusive components fire in one model only.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub codes_base: Array2<f64>,
    pub codes_chat: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedActivationBatch {
    pub h_base: Array2<f64>,
    pub h_chat: Array2<f64>,
    pub ground_truth: Option<GroundTruth>,
    pub template_mask: Vec<bool>,
    /// Global index of the first row; rows are token positions.
    pub first_index: u64,
}

impl PairedActivationBatch {
    pub fn new(h_base: Array2<f64>, h_chat: Array2<f64>, template_mask: Vec<bool>) -> Result<Self> {
        if h_base.dim() != h_chat.dim() {
            return Err(XdiffError::Dimension(format!(
                "base activations are {:?}, chat activations are {:?}",
                h_base.dim(),
                h_chat.dim()
            )));
        }
        if template_mask.len() != h_base.nrows() {
            return Err(XdiffError::Dimension(format!(
                "template mask has {} flags for {} rows",
                template_mask.len(),
                h_base.nrows()
            )));
        }
        Ok(Self { h_base, h_chat, ground_truth: None, template_mask, first_index: 0 })
    }

    pub fn len(&self) -> usize {
        self.h_base.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h_base.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.h_base.ncols()
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = linalg::norm(v.view());
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn random_readout(rng: &mut ChaCha8Rng, vocab: usize, d: usize, gain: f64) -> Readout {
    let scale = gain / (d as f64).sqrt();
    loop {
        let weight = Array2::from_shape_fn((vocab, d), |_| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        let bias =
            (0..vocab).map(|_| 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
        if gain == 0.0 || linalg::row_rank(weight.view(), 1e-9 * scale.max(1.0)) == vocab {
            return Readout { weight, bias };
        }
    }
}

/// Build a world: directions are rejection-sampled so that every pair has
/// `|cos| <= max_cos`.
pub fn generate_world(config: &WorldConfig) -> Result<PlantedWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let count = config.latent_count();
    let mut directions: Vec<Array1<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_DIRECTION_ATTEMPTS {
            let cand = random_unit(&mut rng, config.d);
            if directions.iter().all(|u| u.dot(&cand).abs() <= config.max_cos) {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(u) => directions.push(u),
            None => {
                return Err(XdiffError::Config(format!(
                    "d = {} is too small to place {count} directions with |cos| <= {} (failed at latent {i})",
                    config.d, config.max_cos
                )))
            }
        }
    }

    let mut specs: Vec<(LatentClass, f64, f64, f64, Option<ProbeFiring>)> = Vec::with_capacity(count);
    specs.extend(
        (0..config.shared)
            .map(|_| (LatentClass::Shared, config.p_shared, config.scale_shared_base, config.scale_shared_chat, None)),
    );
    specs.extend(
        (0..config.asym_shared)
            .map(|_| (LatentClass::Shared, config.p_asym, config.scale_asym_base, config.scale_asym_chat, None)),
    );
    specs.extend(
        (0..config.base_only).map(|_| (LatentClass::BaseOnly, config.p_base_only, config.scale_base_only, 0.0, None)),
    );
    specs.extend(
        (0..config.chat_only).map(|_| (LatentClass::ChatOnly, config.p_chat_only, 0.0, config.scale_chat_only, None)),
    );
    let probe = ProbeFiring {
        shared: config.p_probe_shared,
        base_excl: config.p_probe_base_excl,
        chat_excl: config.p_probe_chat_excl,
    };
    specs.extend((0..config.probe).map(|_| {
        (LatentClass::DecouplingProbe, config.p_probe_shared, config.scale_probe, config.scale_probe, Some(probe))
    }));

    let latents = specs
        .into_iter()
        .zip(directions)
        .map(|((class, fire_prob, scale_base, scale_chat, probe), dir)| PlantedLatent {
            direction_base: dir.clone(),
            direction_chat: dir,
            class,
            fire_prob,
            scale_base,
            scale_chat,
            probe,
        })
        .collect();

    let readout_base = random_readout(&mut rng, config.vocab, config.d, config.readout_gain);
    let readout_chat = random_readout(&mut rng, config.vocab, config.d, config.readout_gain);

    Ok(PlantedWorld {
        latents,
        d: config.d,
        noise_sigma: config.noise_sigma,
        seed: config.seed,
        readout_base,
        readout_chat,
        template_stride: config.template_stride,
    })
}

impl PlantedWorld {
    pub fn is_template(&self, index: u64) -> bool {
        index.is_multiple_of(self.template_stride as u64)
    }

    fn sample_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SAMPLE_SALT);
        rng.set_stream(index);
        rng
    }

    /// Samples with global indices `first..first + n`. Pure in
    /// `(world, first, n)`.
    pub fn sample_range(&self, first: u64, n: usize) -> PairedActivationBatch {
        let d = self.d;
        let m = self.latents.len();
        let mut h_base = Array2::zeros((n, d));
        let mut h_chat = Array2::zeros((n, d));
        let mut codes_base = Array2::zeros((n, m));
        let mut codes_chat = Array2::zeros((n, m));
        let mut template_mask = Vec::with_capacity(n);

        for row in 0..n {
            let index = first + row as u64;
            let mut rng = self.sample_rng(index);
            for (j, lat) in self.latents.iter().enumerate() {
                let (cb, cc) = match lat.probe {
                    Some(p) => {
                        let shared = fire(&mut rng, p.shared);
                        let base_excl = fire(&mut rng, p.base_excl);
                        let chat_excl = fire(&mut rng, p.chat_excl);
                        (shared + base_excl, shared + chat_excl)
                    }
                    None => {
                        let c = fire(&mut rng, lat.fire_prob);
                        (c, c)
                    }
                };
                codes_base[[row, j]] = cb;
                codes_chat[[row, j]] = cc;
                if cb > 0.0 && lat.scale_base > 0.0 {
                    h_base.row_mut(row).scaled_add(cb * lat.scale_base, &lat.direction_base);
                }
                if cc > 0.0 && lat.scale_chat > 0.0 {
                    h_chat.row_mut(row).scaled_add(cc * lat.scale_chat, &lat.direction_chat);
                }
            }
            if self.noise_sigma > 0.0 {
                for x in h_base.slice_mut(s![row, ..]).iter_mut() {
                    *x += self.noise_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                }
                for x in h_chat.slice_mut(s![row, ..]).iter_mut() {
                    *x += self.noise_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                }
            }
            template_mask.push(self.is_template(index));
        }

        PairedActivationBatch {
            h_base,
            h_chat,
            ground_truth: Some(GroundTruth { codes_base, codes_chat }),
            template_mask,
            first_index: first,
        }
    }

    pub fn sample_batch(&self, n: usize) -> PairedActivationBatch {
        self.sample_range(0, n)
    }

    /// Consecutive batches of `batch_size` starting at global index `first`.
    pub fn stream(&self, first: u64, batch_size: usize) -> BatchStream<'_> {
        BatchStream { world: self, next: first, batch_size }
    }
}

/// Bernoulli(p) gate times an Exponential(1) magnitude.
fn fire(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    if p > 0.0 && rng.random::<f64>() < p {
        let m: f64 = Exp1.sample(rng);
        // Exp1 can return exactly 0; keep fired codes strictly positive.
        m.max(f64::MIN_POSITIVE)
    } else {
        0.0
    }
}

/// Infinite iterator of consecutive batches.
pub struct BatchStream<'w> {
    world: &'w PlantedWorld,
    next: u64,
    batch_size: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = PairedActivationBatch;

    fn next(&mut self) -> Option<Self::Item> {
        let batch = self.world.sample_range(self.next, self.batch_size);
        self.next += self.batch_size as u64;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(class_counts: (usize, usize, usize), d: usize) -> WorldConfig {
        WorldConfig {
            d,
            vocab: 2.min(d),
            shared: class_counts.0,
            base_only: class_counts.1,
            chat_only: class_counts.2,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn chat_only_world_has_zero_base_scale() {
        let w = generate_world(&single((0, 0, 1), 4)).unwrap();
        assert_eq!(w.latents.len(), 1);
        assert_eq!(w.latents[0].class, LatentClass::ChatOnly);
        assert_eq!(w.latents[0].scale_base, 0.0);
    }

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig { seed: 7, ..WorldConfig::default() };
        assert_eq!(generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
    }

    #[test]
    fn directions_are_unit_and_spread() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.latents.len(), 48);
        for (i, a) in w.latents.iter().enumerate() {
            assert!((linalg::norm(a.direction_base.view()) - 1.0).abs() < 1e-9);
            assert!((linalg::norm(a.direction_chat.view()) - 1.0).abs() < 1e-9);
            for b in &w.latents[i + 1..] {
                assert!(a.direction_base.dot(&b.direction_base).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn too_many_latents_for_dimension() {
        let cfg = single((3, 0, 0), 1);
        assert!(matches!(generate_world(&cfg), Err(XdiffError::Config(_))));
    }

    #[test]
    fn readouts_have_full_row_rank() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(linalg::row_rank(w.readout_chat.weight.view(), 1e-9), 16);
        assert_eq!(linalg::row_rank(w.readout_base.weight.view(), 1e-9), 16);
    }

    #[test]
    fn chat_only_sample_leaves_base_empty() {
        let cfg = WorldConfig { noise_sigma: 0.0, p_chat_only: 1.0, ..single((0, 0, 1), 4) };
        let w = generate_world(&cfg).unwrap();
        let b = w.sample_batch(5);
        let codes = &b.ground_truth.as_ref().unwrap().codes_chat;
        for i in 0..5 {
            assert!(b.h_base.row(i).iter().all(|&x| x == 0.0));
            let expect = &w.latents[0].direction_chat * (codes[[i, 0]] * w.latents[0].scale_chat);
            for (x, y) in b.h_chat.row(i).iter().zip(expect.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn probe_with_shared_only_is_collinear() {
        let cfg = WorldConfig {
            d: 6,
            vocab: 2,
            shared: 0,
            base_only: 0,
            chat_only: 0,
            probe: 1,
            p_probe_shared: 1.0,
            scale_probe: 1.5,
            noise_sigma: 0.0,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let lat = &w.latents[0];
        assert_eq!(lat.direction_base, lat.direction_chat);
        let b = w.sample_batch(20);
        let lhs = &b.h_base / lat.scale_base;
        let rhs = &b.h_chat / lat.scale_chat;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_reproduce_and_ranges_compose() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let a = w.sample_range(100, 10);
        let b = w.sample_range(100, 10);
        assert_eq!(a, b);
        let part = w.sample_range(105, 3);
        assert_eq!(part.h_base.row(0), a.h_base.row(5));
        assert_eq!(part.h_chat.row(2), a.h_chat.row(7));
    }

    #[test]
    fn zero_noise_reconstruction_identity() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            probe: 2,
            p_probe_base_excl: 0.3,
            p_probe_chat_excl: 0.2,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let b = w.sample_batch(64);
        let gt = b.ground_truth.as_ref().unwrap();
        let mut dir_b = Array2::zeros((w.latents.len(), w.d));
        let mut dir_c = Array2::zeros((w.latents.len(), w.d));
        for (j, l) in w.latents.iter().enumerate() {
            dir_b.row_mut(j).assign(&(&l.direction_base * l.scale_base));
            dir_c.row_mut(j).assign(&(&l.direction_chat * l.scale_chat));
        }
        let rb = gt.codes_base.dot(&dir_b);
        let rc = gt.codes_chat.dot(&dir_c);
        for (x, y) in rb.iter().zip(b.h_base.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in rc.iter().zip(b.h_chat.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn template_mask_every_eighth() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let b = w.sample_range(3, 16);
        let idx: Vec<usize> = b.template_mask.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i).collect();
        assert_eq!(idx, vec![5, 13]);
    }

    #[test]
    fn toy_forward_values() {
        let r = Readout { weight: Array2::zeros((4, 3)), bias: Array1::zeros(4) };
        let p = toy_forward(&r, array![1.0, -2.0, 3.0].view()).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let r = Readout { weight: Array2::zeros((2, 3)), bias: array![2f64.ln(), 0.0] };
        let p = toy_forward(&r, array![0.3, 0.1, 0.0].view()).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(toy_forward(&r, array![1.0].view()).is_err());
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = WorldConfig { d: 12, p_chat_only: 0.25, seed: 99, ..WorldConfig::default() };
        assert_eq!(WorldConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
        assert!(WorldConfig::from_kv_text("bogus = 1").is_err());
    }
}
