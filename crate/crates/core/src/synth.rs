//! Deterministic synthetic re-id data and feature-space corruption.
//!
//! Each identity owns a random unit prototype direction, each camera a fixed
//! offset vector. A clean clip feature is
//! `normalize(margin·prototype + camera_offset + noise)` with per-entry
//! Gaussian noise. Corruption blends a clip towards a fresh random direction.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Vector};
use crate::store::{FeatureStore, Split, Tracklet};

pub const DEFAULT_CORRUPTION_STRENGTH: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub cameras: usize,
    pub tracklets_per_identity: usize,
    pub clips_per_tracklet: usize,
    pub frames_per_tracklet: usize,
    pub feature_dim: usize,
    /// Length of the identity prototype before noise is added.
    pub identity_margin: f64,
    /// Weight of one direction shared by every prototype:
    /// `prototype = normalize(shared·μ + u_id)`. 0 gives independent
    /// prototypes; larger values pack identities closer together.
    pub shared_direction: f64,
    /// Per-entry standard deviation of clip noise.
    pub intra_noise: f64,
    /// Per-entry standard deviation of the per-camera offset.
    pub camera_shift: f64,
    /// Blend weight γ of the random direction in a corrupted clip.
    pub corruption_strength: f64,
    /// Upper bound on corrupted clips per tracklet; 0 disables corruption.
    pub max_corrupt_clips: usize,
    /// Log-normal σ of a per-clip magnitude factor applied after
    /// normalization; 0 keeps every clean clip at unit norm.
    pub magnitude_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 64,
            cameras: 2,
            tracklets_per_identity: 6,
            clips_per_tracklet: 8,
            frames_per_tracklet: 32,
            feature_dim: 128,
            identity_margin: 1.0,
            shared_direction: 0.0,
            intra_noise: 0.12,
            camera_shift: 0.04,
            corruption_strength: DEFAULT_CORRUPTION_STRENGTH,
            max_corrupt_clips: 0,
            magnitude_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_identities == 0 {
            return bad("num_identities must be positive");
        }
        if self.cameras < 2 {
            return bad("query and gallery need at least 2 cameras");
        }
        if self.tracklets_per_identity < 2 {
            return bad("need at least 2 tracklets per identity for the query/gallery split");
        }
        if self.clips_per_tracklet == 0 || self.feature_dim == 0 || self.frames_per_tracklet == 0 {
            return bad("clip count, frame count and feature_dim must be positive");
        }
        if self.max_corrupt_clips > self.clips_per_tracklet {
            return bad("max_corrupt_clips exceeds clips_per_tracklet");
        }
        if !(0.0..=1.0).contains(&self.corruption_strength) {
            return bad("corruption_strength must lie in [0, 1]");
        }
        for (name, v) in [
            ("identity_margin", self.identity_margin),
            ("shared_direction", self.shared_direction),
            ("intra_noise", self.intra_noise),
            ("camera_shift", self.camera_shift),
            ("magnitude_jitter", self.magnitude_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Sizes of the (train, query, gallery) splits this config produces.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.num_identities;
        (n * (self.tracklets_per_identity - 2), n, n)
    }
}

pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let v = Vector::from_finite(raw);
        if v.norm() > 1e-6 {
            return l2_normalize(&v).expect("non-empty");
        }
    }
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<FeatureStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.feature_dim;
    let shared = (cfg.shared_direction > 0.0).then(|| random_unit(dim, &mut rng));
    let prototypes: Vec<Vector> = (0..cfg.num_identities)
        .map(|_| {
            let u = random_unit(dim, &mut rng);
            match &shared {
                Some(mu) => {
                    let v: Vec<f64> = (0..dim).map(|d| cfg.shared_direction * mu[d] + u[d]).collect();
                    l2_normalize(&Vector::from_finite(v)).expect("non-zero")
                }
                None => u,
            }
        })
        .collect();
    let offsets: Vec<Vec<f64>> = (0..cfg.cameras)
        .map(|_| gaussian_vec(dim, cfg.camera_shift, &mut rng))
        .collect();
    let jitter = (cfg.magnitude_jitter > 0.0)
        .then(|| Normal::new(0.0, cfg.magnitude_jitter).expect("validated"));

    let mut entries = Vec::with_capacity(cfg.num_identities * cfg.tracklets_per_identity);
    for (pid, proto) in prototypes.iter().enumerate() {
        let first_cam = rng.random_range(0..cfg.cameras);
        for k in 0..cfg.tracklets_per_identity {
            let cam = (first_cam + k) % cfg.cameras;
            let mut clips = Vec::with_capacity(cfg.clips_per_tracklet);
            for _ in 0..cfg.clips_per_tracklet {
                let noise = gaussian_vec(dim, cfg.intra_noise, &mut rng);
                let raw: Vec<f64> = (0..dim)
                    .map(|d| cfg.identity_margin * proto[d] + offsets[cam][d] + noise[d])
                    .collect();
                let mut clip = l2_normalize(&Vector::new(raw)?)?;
                if let Some(j) = &jitter {
                    clip = clip.scale(j.sample(&mut rng).exp())?;
                }
                clips.push(clip);
            }
            let split = match k {
                0 => Split::Query,
                1 => Split::Gallery,
                _ => Split::Train,
            };
            let tracklet = Tracklet {
                tracklet_id: format!("p{pid:04}_t{k:02}"),
                person_id: pid as u32,
                camera_id: cam as u32,
                num_frames: cfg.frames_per_tracklet as u32,
                clip_features: clips,
                corrupted_mask: None,
            };
            entries.push((tracklet, split));
        }
    }
    if cfg.max_corrupt_clips > 0 {
        for (t, _) in entries.iter_mut() {
            *t = corrupt_sequence(t, cfg.max_corrupt_clips, cfg.corruption_strength, &mut rng)?;
        }
    }
    FeatureStore::new(entries, true)
}

/// Corrupts between 0 and `max_corrupt` (uniform) distinct clips. Returns the
/// new clip list and which clips were selected.
pub fn corrupt_clips<R: Rng + ?Sized>(
    clips: &[Vector],
    max_corrupt: usize,
    strength: f64,
    rng: &mut R,
) -> Result<(Vec<Vector>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!(
            "corruption strength {strength} outside [0, 1]"
        )));
    }
    let m = clips.len();
    if max_corrupt > m {
        return Err(Error::InvalidArgument(format!(
            "max corrupt clips {max_corrupt} exceeds clip count {m}"
        )));
    }
    let count = rng.random_range(0..=max_corrupt);
    let mut out = clips.to_vec();
    let mut mask = vec![false; m];
    for i in index::sample(rng, m, count) {
        mask[i] = true;
        if strength == 0.0 {
            continue;
        }
        let noise = random_unit(clips[i].len(), rng);
        let blended: Vec<f64> = clips[i]
            .as_slice()
            .iter()
            .zip(noise.as_slice())
            .map(|(f, n)| (1.0 - strength) * f + strength * n)
            .collect();
        out[i] = l2_normalize(&Vector::new(blended)?)?;
    }
    Ok((out, mask))
}

/// Corrupts a tracklet. Previously corrupted clips stay flagged.
pub fn corrupt_sequence<R: Rng + ?Sized>(
    tracklet: &Tracklet,
    max_corrupt: usize,
    strength: f64,
    rng: &mut R,
) -> Result<Tracklet> {
    let (clips, mask) = corrupt_clips(&tracklet.clip_features, max_corrupt, strength, rng)?;
    let mask = match &tracklet.corrupted_mask {
        Some(prev) => prev.iter().zip(&mask).map(|(a, b)| *a || *b).collect(),
        None => mask,
    };
    Ok(Tracklet {
        clip_features: clips,
        corrupted_mask: Some(mask),
        ..tracklet.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    fn small() -> SynthConfig {
        SynthConfig {
            num_identities: 10,
            tracklets_per_identity: 4,
            feature_dim: 32,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn split_arithmetic() {
        let cfg = small();
        let store = generate(&cfg).unwrap();
        assert_eq!(store.split_counts(), (20, 10, 10));
        assert_eq!(cfg.split_sizes(), (20, 10, 10));
        for q in store.select_split(Split::Query) {
            let g = store
                .select_split(Split::Gallery)
                .into_iter()
                .find(|g| g.person_id == q.person_id)
                .unwrap();
            assert_ne!(q.camera_id, g.camera_id);
        }
    }

    #[test]
    fn noise_free_clips_equal_prototype() {
        let cfg = SynthConfig {
            intra_noise: 0.0,
            camera_shift: 0.0,
            ..small()
        };
        let store = generate(&cfg).unwrap();
        let t = store.tracklets();
        for a in t.iter().filter(|t| t.person_id == 3) {
            for b in t.iter().filter(|t| t.person_id == 3) {
                for (x, y) in a.clip_features.iter().zip(&b.clip_features) {
                    assert_eq!(x, y);
                    assert!((cosine(x, y).unwrap() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn seeds_change_payload_not_shape() {
        let a = generate(&small()).unwrap();
        let b = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        let (ba, bb) = (a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(a.manifest().tracklets.len(), b.manifest().tracklets.len());
        assert_eq!(ba.len(), bb.len());
        assert_ne!(ba, bb);
        assert_eq!(generate(&small()).unwrap().to_bytes().unwrap(), ba);
    }

    #[test]
    fn config_errors() {
        let cfg = SynthConfig {
            tracklets_per_identity: 1,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            max_corrupt_clips: 9,
            ..small()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn corruption_degenerate_cases() {
        let store = generate(&small()).unwrap();
        let t = &store.tracklets()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = corrupt_sequence(t, 0, 0.85, &mut rng).unwrap();
        assert_eq!(out.clip_features, t.clip_features);
        assert_eq!(out.corrupted_mask, Some(vec![false; 8]));

        let out = corrupt_sequence(t, 8, 0.0, &mut rng).unwrap();
        assert_eq!(out.clip_features, t.clip_features);
        assert!(out.corrupted_mask.is_some());

        assert!(matches!(
            corrupt_sequence(t, 2, 1.5, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn full_corruption_decorrelates_in_high_dimension() {
        let clean = vec![random_unit(1024, &mut ChaCha8Rng::seed_from_u64(9))];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut trials = 0;
        while trials < 100 {
            let (out, mask) = corrupt_clips(&clean, 1, 1.0, &mut rng).unwrap();
            if mask[0] {
                assert!(cosine(&out[0], &clean[0]).unwrap().abs() < 0.2);
                trials += 1;
            }
        }
    }

    #[test]
    fn corruption_leaves_unselected_clips_alone() {
        let store = generate(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in store.tracklets() {
            let out = corrupt_sequence(t, 5, 0.85, &mut rng).unwrap();
            let mask = out.corrupted_mask.as_ref().unwrap();
            for i in 0..t.num_clips() {
                if !mask[i] {
                    assert_eq!(out.clip_features[i], t.clip_features[i]);
                } else {
                    assert_ne!(out.clip_features[i], t.clip_features[i]);
                }
            }
        }
    }

    #[test]
    fn clean_data_is_separable() {
        let store = generate(&SynthConfig::default()).unwrap();
        let q = store.select_split(Split::Query);
        let g = store.select_split(Split::Gallery);
        let (mut same, mut diff) = (Vec::new(), Vec::new());
        for a in &q {
            for b in &g {
                let c = cosine(&a.clip_features[0], &b.clip_features[0]).unwrap();
                if a.person_id == b.person_id {
                    same.push(c);
                } else {
                    diff.push(c);
                }
            }
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            (m, var)
        };
        let ((ms, vs), (md, vd)) = (stats(&same), stats(&diff));
        let pooled = ((vs + vd) / 2.0).sqrt();
        assert!(ms - md > 3.0 * pooled, "gap {} pooled sd {pooled}", ms - md);
    }
}
