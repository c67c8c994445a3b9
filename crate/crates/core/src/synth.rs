//! Seeded synthetic correspondence pairs.
//!
//! Each class owns a bank of keypoint-type prototypes. A pair draws a class
//! and `m` of its types, scatters them over the unit image, warps and jitters
//! them for the second image, and shuffles the second image's order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{ImageRecord, PairRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPairSpec {
    pub num_pairs: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub num_classes: usize,
    pub types_per_class: usize,
    pub latent_dim: usize,
    /// Largest absolute rotation, degrees.
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Largest absolute shift per axis, image units.
    pub max_translation: f64,
    pub jitter: f64,
    /// Per-image Gaussian noise added to each latent.
    pub descriptor_noise: f64,
    /// Leading latent channels that carry type identity; the rest are
    /// redrawn independently for each image at `clutter_scale`.
    pub signal_dims: usize,
    pub clutter_scale: f64,
    pub shuffle: bool,
    /// Seeds the prototype bank, so train and test sets share classes.
    pub bank_seed: u64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        Self {
            num_pairs: 100,
            m_min: 5,
            m_max: 10,
            num_classes: 10,
            types_per_class: 10,
            latent_dim: 32,
            max_rotation_deg: 30.0,
            scale_min: 0.8,
            scale_max: 1.25,
            max_translation: 0.1,
            jitter: 0.01,
            descriptor_noise: 0.0,
            signal_dims: 16,
            clutter_scale: 0.4,
            shuffle: true,
            bank_seed: 0,
        }
    }
}

impl SyntheticPairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m_min == 0 || self.m_min > self.m_max {
            return Err(Error::config("need 1 ≤ m_min ≤ m_max"));
        }
        if self.m_max > self.types_per_class {
            return Err(Error::config("m_max exceeds types_per_class"));
        }
        if self.num_classes == 0 || self.latent_dim == 0 {
            return Err(Error::config("num_classes and latent_dim must be positive"));
        }
        if self.signal_dims > self.latent_dim {
            return Err(Error::config("signal_dims exceeds latent_dim"));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return Err(Error::config("need 0 < scale_min ≤ scale_max"));
        }
        for (k, v) in [
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_translation", self.max_translation),
            ("jitter", self.jitter),
            ("descriptor_noise", self.descriptor_noise),
            ("clutter_scale", self.clutter_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{k} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Same `key = value` format as the training config.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line, message };
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k.to_string()) {
                return Err(err(format!("key {k:?} given twice")));
            }
            seen.push(k.to_string());
            spec.set(k, v).map_err(|e| match e {
                Error::Config(m) => err(m),
                other => other,
            })?;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "num_pairs" => self.num_pairs = num(key, v)?,
            "m_min" => self.m_min = num(key, v)?,
            "m_max" => self.m_max = num(key, v)?,
            "num_classes" => self.num_classes = num(key, v)?,
            "types_per_class" => self.types_per_class = num(key, v)?,
            "latent_dim" => self.latent_dim = num(key, v)?,
            "max_rotation_deg" => self.max_rotation_deg = num(key, v)?,
            "scale_min" => self.scale_min = num(key, v)?,
            "scale_max" => self.scale_max = num(key, v)?,
            "max_translation" => self.max_translation = num(key, v)?,
            "jitter" => self.jitter = num(key, v)?,
            "descriptor_noise" => self.descriptor_noise = num(key, v)?,
            "signal_dims" => self.signal_dims = num(key, v)?,
            "clutter_scale" => self.clutter_scale = num(key, v)?,
            "shuffle" => {
                self.shuffle = match v {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::config(format!("shuffle: expected true or false, got {v:?}"))),
                }
            }
            "bank_seed" => self.bank_seed = num(key, v)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

/// Prototype latents, `types_per_class` rows per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub classes: Vec<Tensor>,
}

impl PrototypeBank {
    /// Unit-norm Gaussian prototypes over the signal channels.
    pub fn new(spec: &SyntheticPairSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.bank_seed);
        let (t, s) = (spec.types_per_class, spec.signal_dims);
        let classes = (0..spec.num_classes)
            .map(|_| {
                let mut data = Vec::with_capacity(t * s);
                for _ in 0..t {
                    let v: Vec<f64> = (0..s).map(|_| StandardNormal.sample(&mut rng)).collect();
                    data.extend(crate::tensor::l2_normalize(&v, crate::tensor::DEFAULT_EPS_GUARD));
                }
                Tensor::matrix(t, s, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { classes })
    }
}

fn in_unit(p: [f64; 2]) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

/// Similarity transform about the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl Warp {
    pub const IDENTITY: Warp = Warp {
        rotation: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0],
    };

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        // Written as p + (sR − I)(p − c) + t so the identity is exact.
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (p[0] - 0.5, p[1] - 0.5);
        [
            p[0] + (self.scale * c - 1.0) * x - self.scale * s * y + self.translation[0],
            p[1] + self.scale * s * x + (self.scale * c - 1.0) * y + self.translation[1],
        ]
    }
}

/// Generates one pair. `seed` fixes everything except the prototype bank.
pub fn generate_pair(spec: &SyntheticPairSpec, bank: &PrototypeBank, seed: u64) -> Result<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_id = rng.random_range(0..spec.num_classes);
    let m = rng.random_range(spec.m_min..=spec.m_max);
    let mut types: Vec<usize> = (0..spec.types_per_class).collect();
    types.shuffle(&mut rng);
    types.truncate(m);

    let points: Vec<[f64; 2]> = (0..m).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let need = (0.9 * m as f64).ceil() as usize;
    // Falls back to the identity, which keeps every point inside.
    let mut warp = Warp::IDENTITY;
    for _ in 0..100 {
        let w = Warp {
            rotation: rng.random_range(-1.0..=1.0) * spec.max_rotation_deg.to_radians(),
            scale: rng.random_range(spec.scale_min..=spec.scale_max),
            translation: [
                rng.random_range(-1.0..=1.0) * spec.max_translation,
                rng.random_range(-1.0..=1.0) * spec.max_translation,
            ],
        };
        let inside = points.iter().filter(|&&p| in_unit(w.apply(p))).count();
        if inside >= need {
            warp = w;
            break;
        }
    }
    let warped: Vec<[f64; 2]> = points
        .iter()
        .map(|&p| {
            let q = warp.apply(p);
            let jx: f64 = StandardNormal.sample(&mut rng);
            let jy: f64 = StandardNormal.sample(&mut rng);
            [q[0] + spec.jitter * jx, q[1] + spec.jitter * jy]
        })
        .collect();

    let mut order: Vec<usize> = (0..m).collect();
    if spec.shuffle {
        order.shuffle(&mut rng);
    }
    // Keypoint i of image 1 lands at position truth[i] in image 2.
    let truth = order;

    let protos = &bank.classes[class_id];
    let latent = |rng: &mut ChaCha8Rng, t: usize| -> Vec<f64> {
        let mut v = vec![0.0; spec.latent_dim];
        for (k, slot) in v.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *slot = if k < spec.signal_dims {
                protos.get(t, k) + spec.descriptor_noise * z
            } else {
                spec.clutter_scale * z
            };
        }
        v
    };
    let latents1: Vec<Vec<f64>> = types.iter().map(|&t| latent(&mut rng, t)).collect();
    let mut latents2 = vec![Vec::new(); m];
    let mut keypoints2 = vec![[0.0; 2]; m];
    for i in 0..m {
        latents2[truth[i]] = latent(&mut rng, types[i]);
        keypoints2[truth[i]] = warped[i];
    }
    let (seed1, seed2) = (rng.random(), rng.random());
    Ok(PairRecord {
        pair_id: format!("pair-{seed}"),
        class_id,
        truth,
        image1: ImageRecord {
            id: format!("pair-{seed}/a"),
            keypoints: points,
            latents: Some(latents1),
            features: None,
            seed: seed1,
        },
        image2: ImageRecord {
            id: format!("pair-{seed}/b"),
            keypoints: keypoints2,
            latents: Some(latents2),
            features: None,
            seed: seed2,
        },
    })
}

/// `spec.num_pairs` pairs; pair `k` uses a seed derived from `(seed, k)`.
pub fn generate_dataset(spec: &SyntheticPairSpec, seed: u64) -> Result<Vec<PairRecord>> {
    let bank = PrototypeBank::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.num_pairs)
        .map(|_| generate_pair(spec, &bank, rng.random()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_spec() -> SyntheticPairSpec {
        SyntheticPairSpec {
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            max_translation: 0.0,
            jitter: 0.0,
            shuffle: false,
            ..SyntheticPairSpec::default()
        }
    }

    #[test]
    fn identity_warp_without_shuffle() {
        let spec = plain_spec();
        let bank = PrototypeBank::new(&spec).unwrap();
        let p = generate_pair(&spec, &bank, 3).unwrap();
        let m = p.truth.len();
        assert_eq!(p.truth, (0..m).collect::<Vec<_>>());
        assert_eq!(p.image1.keypoints, p.image2.keypoints);
    }

    #[test]
    fn same_seed_same_pair() {
        let spec = SyntheticPairSpec::default();
        let bank = PrototypeBank::new(&spec).unwrap();
        assert_eq!(generate_pair(&spec, &bank, 9).unwrap(), generate_pair(&spec, &bank, 9).unwrap());
        assert_ne!(generate_pair(&spec, &bank, 9).unwrap(), generate_pair(&spec, &bank, 10).unwrap());
    }

    #[test]
    fn shuffle_is_recorded_in_truth() {
        let spec = SyntheticPairSpec {
            shuffle: true,
            ..plain_spec()
        };
        let bank = PrototypeBank::new(&spec).unwrap();
        let shuffled = generate_pair(&spec, &bank, 4).unwrap();
        let m = shuffled.truth.len();
        for i in 0..m {
            assert_eq!(shuffled.image2.keypoints[shuffled.truth[i]], shuffled.image1.keypoints[i]);
        }
        assert_ne!(shuffled.truth, (0..m).collect::<Vec<_>>());
    }

    #[test]
    fn warps_keep_most_points_inside() {
        let spec = SyntheticPairSpec {
            jitter: 0.0,
            ..SyntheticPairSpec::default()
        };
        let bank = PrototypeBank::new(&spec).unwrap();
        for seed in 0..200 {
            let p = generate_pair(&spec, &bank, seed).unwrap();
            let m = p.truth.len();
            assert!((spec.m_min..=spec.m_max).contains(&m));
            let inside = p.image2.keypoints.iter().filter(|&&q| in_unit(q)).count();
            assert!(inside * 10 >= 9 * m);
        }
    }

    #[test]
    fn latents_follow_the_truth() {
        let spec = SyntheticPairSpec {
            descriptor_noise: 0.0,
            clutter_scale: 0.0,
            ..SyntheticPairSpec::default()
        };
        let bank = PrototypeBank::new(&spec).unwrap();
        let p = generate_pair(&spec, &bank, 5).unwrap();
        let (l1, l2) = (p.image1.latents.unwrap(), p.image2.latents.unwrap());
        for (i, &j) in p.truth.iter().enumerate() {
            assert_eq!(l1[i], l2[j]);
        }
    }

    #[test]
    fn clutter_channels_differ_between_images() {
        let spec = SyntheticPairSpec {
            descriptor_noise: 0.0,
            signal_dims: 16,
            clutter_scale: 1.0,
            ..SyntheticPairSpec::default()
        };
        let bank = PrototypeBank::new(&spec).unwrap();
        let p = generate_pair(&spec, &bank, 6).unwrap();
        let (l1, l2) = (p.image1.latents.unwrap(), p.image2.latents.unwrap());
        let j = p.truth[0];
        assert_eq!(l1[0][..16], l2[j][..16]);
        assert_ne!(l1[0][16..], l2[j][16..]);
    }

    #[test]
    fn spec_parsing() {
        let s = SyntheticPairSpec::parse("num_pairs = 7 # few\nshuffle = false\n").unwrap();
        assert_eq!(s.num_pairs, 7);
        assert!(!s.shuffle);
        assert!(matches!(SyntheticPairSpec::parse("pairs = 7\n"), Err(Error::Parse { line: 1, .. })));
        assert!(SyntheticPairSpec::parse("m_max = 11\n").is_err());
    }

    #[test]
    fn warp_is_a_similarity() {
        let w = Warp {
            rotation: 0.3,
            scale: 1.2,
            translation: [0.05, -0.02],
        };
        let (a, b) = ([0.1, 0.7], [0.6, 0.2]);
        let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        assert!((d(w.apply(a), w.apply(b)) - 1.2 * d(a, b)).abs() < 1e-12);
        assert_eq!(Warp::IDENTITY.apply(a), a);
    }
}
