//! Index-level sampling: frame selection inside a clip, clip placement
//! inside a sequence, and identity-balanced PK batches.
//!
//! Rounding is always half-up, computed in exact integer arithmetic.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSampling {
    /// L consecutive frames at a random start.
    Consec,
    /// L distinct frames at random, in temporal order.
    Random,
    /// L frames spread evenly over the sequence.
    Evenly,
    /// Every frame.
    All,
}

impl FromStr for FrameSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consec" => Ok(Self::Consec),
            "random" => Ok(Self::Random),
            "evenly" => Ok(Self::Evenly),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown frame sampling method {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub clip_length: usize,
    pub num_clips: usize,
    pub method: FrameSampling,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            clip_length: 4,
            num_clips: 8,
            method: FrameSampling::Consec,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_length == 0 || self.num_clips == 0 {
            return Err(Error::InvalidArgument(
                "clip length and clip count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Selected frame indices; `with_replacement` is set when the sequence was too
/// short to draw distinct frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSample {
    pub indices: Vec<usize>,
    pub with_replacement: bool,
}

/// `round(num / den)` with halves rounded up, for non-negative operands.
fn div_round_half_up(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Frame indices `0..target` mapped cyclically onto a sequence of `n` frames.
pub fn cyclic_pad(n: usize, target: usize) -> Vec<usize> {
    (0..target).map(|k| k % n).collect()
}

pub fn sample_frame_indices<R: Rng + ?Sized>(
    n: usize,
    clip_length: usize,
    method: FrameSampling,
    rng: &mut R,
) -> Result<FrameSample> {
    if n == 0 || clip_length == 0 {
        return Err(Error::InvalidArgument(
            "sequence length and clip length must be positive".into(),
        ));
    }
    let l = clip_length;
    let sample = match method {
        FrameSampling::All => FrameSample {
            indices: (0..n).collect(),
            with_replacement: false,
        },
        FrameSampling::Consec if n < l => FrameSample {
            indices: cyclic_pad(n, l),
            with_replacement: false,
        },
        FrameSampling::Consec => {
            let start = rng.random_range(0..=n - l);
            FrameSample {
                indices: (start..start + l).collect(),
                with_replacement: false,
            }
        }
        FrameSampling::Random if n < l => {
            let mut indices: Vec<usize> = (0..l).map(|_| rng.random_range(0..n)).collect();
            indices.sort_unstable();
            FrameSample {
                indices,
                with_replacement: true,
            }
        }
        FrameSampling::Random => {
            let mut indices = index::sample(rng, n, l).into_vec();
            indices.sort_unstable();
            FrameSample {
                indices,
                with_replacement: false,
            }
        }
        FrameSampling::Evenly if l == 1 => FrameSample {
            indices: vec![0],
            with_replacement: false,
        },
        FrameSampling::Evenly => FrameSample {
            indices: (0..l)
                .map(|k| div_round_half_up(k * (n - 1), l - 1))
                .collect(),
            with_replacement: false,
        },
    };
    Ok(sample)
}

/// Start frames of `num_clips` clips of length `clip_length`, spread evenly over
/// `[0, n - clip_length]`. Clips overlap when `n < num_clips * clip_length`.
pub fn sample_clip_starts(n: usize, num_clips: usize, clip_length: usize) -> Result<Vec<usize>> {
    if num_clips == 0 || clip_length == 0 {
        return Err(Error::InvalidArgument(
            "clip count and clip length must be positive".into(),
        ));
    }
    if n < clip_length {
        return Err(Error::SequenceTooShort {
            frames: n,
            clip_length,
        });
    }
    let span = n - clip_length;
    if num_clips == 1 {
        return Ok(vec![span / 2]);
    }
    Ok((0..num_clips)
        .map(|j| div_round_half_up(j * span, num_clips - 1))
        .collect())
}

/// A batch of `p` identities with `k` entries each, identity-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub p: usize,
    pub k: usize,
    /// Positions into the caller's tracklet list.
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `p` identities without replacement, then `k` of each identity's
/// tracklets (without replacement when it has at least `k`, otherwise with).
pub fn sample_pk_batch<R: Rng + ?Sized>(
    person_ids: &[u32],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(Error::Config("P and K must be positive".into()));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &pid) in person_ids.iter().enumerate() {
        groups.entry(pid).or_default().push(i);
    }
    if groups.len() < p {
        return Err(Error::Config(format!(
            "need {p} identities for a PK batch, only {} available",
            groups.len()
        )));
    }
    let ids: Vec<(&u32, &Vec<usize>)> = groups.iter().collect();
    let mut indices = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for pick in index::sample(rng, ids.len(), p) {
        let (&pid, members) = ids[pick];
        if members.len() >= k {
            for j in index::sample(rng, members.len(), k) {
                indices.push(members[j]);
            }
        } else {
            for _ in 0..k {
                indices.push(members[rng.random_range(0..members.len())]);
            }
        }
        labels.extend(std::iter::repeat_n(pid, k));
    }
    Ok(PkBatch {
        p,
        k,
        indices,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn frame_index_examples() {
        let mut r = rng();
        let evenly = sample_frame_indices(12, 4, FrameSampling::Evenly, &mut r).unwrap();
        assert_eq!(evenly.indices, [0, 4, 7, 11]);
        let all = sample_frame_indices(5, 4, FrameSampling::All, &mut r).unwrap();
        assert_eq!(all.indices, [0, 1, 2, 3, 4]);
        let consec = sample_frame_indices(4, 4, FrameSampling::Consec, &mut r).unwrap();
        assert_eq!(consec.indices, [0, 1, 2, 3]);
        assert_eq!(
            sample_frame_indices(9, 1, FrameSampling::Evenly, &mut r).unwrap().indices,
            [0]
        );
    }

    #[test]
    fn short_sequences() {
        let mut r = rng();
        let s = sample_frame_indices(3, 5, FrameSampling::Random, &mut r).unwrap();
        assert!(s.with_replacement);
        assert_eq!(s.indices.len(), 5);
        assert!(s.indices.windows(2).all(|w| w[0] <= w[1]));
        let c = sample_frame_indices(3, 5, FrameSampling::Consec, &mut r).unwrap();
        assert_eq!(c.indices, [0, 1, 2, 0, 1]);
    }

    #[test]
    fn random_frames_are_sorted_and_distinct() {
        let mut r = rng();
        for _ in 0..50 {
            let s = sample_frame_indices(20, 6, FrameSampling::Random, &mut r).unwrap();
            assert!(!s.with_replacement);
            assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            assert!(s.indices.iter().all(|&i| i < 20));
        }
    }

    #[test]
    fn clip_start_examples() {
        assert_eq!(
            sample_clip_starts(32, 8, 4).unwrap(),
            [0, 4, 8, 12, 16, 20, 24, 28]
        );
        assert_eq!(sample_clip_starts(8, 8, 4).unwrap(), [0, 1, 1, 2, 2, 3, 3, 4]);
        assert_eq!(sample_clip_starts(4, 1, 4).unwrap(), [0]);
        assert_eq!(sample_clip_starts(10, 1, 4).unwrap(), [3]);
        assert!(matches!(
            sample_clip_starts(3, 2, 4),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn pk_batch_sizes() {
        let ids: Vec<u32> = (0..100).map(|i| i % 20).collect();
        let mut r = rng();
        assert_eq!(sample_pk_batch(&ids, 8, 4, &mut r).unwrap().len(), 32);
        assert_eq!(sample_pk_batch(&ids, 12, 4, &mut r).unwrap().len(), 48);
        assert!(matches!(
            sample_pk_batch(&ids, 21, 4, &mut r),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pk_batch_with_replacement_keeps_labels() {
        let ids = [7u32, 7, 9, 9, 9, 9];
        let mut r = rng();
        let b = sample_pk_batch(&ids, 2, 4, &mut r).unwrap();
        for (&i, &l) in b.indices.iter().zip(&b.labels) {
            assert_eq!(ids[i], l);
        }
        let sevens: Vec<_> = b.indices.iter().filter(|&&i| ids[i] == 7).collect();
        assert_eq!(sevens.len(), 4);
    }

    proptest! {
        #[test]
        fn evenly_is_strictly_increasing(n in 2usize..200, l in 2usize..32) {
            prop_assume!(n >= l);
            let s = sample_frame_indices(n, l, FrameSampling::Evenly, &mut rng()).unwrap();
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(s.indices[0], 0);
            prop_assert_eq!(*s.indices.last().unwrap(), n - 1);
        }

        #[test]
        fn clip_starts_cover_range(n in 1usize..300, m in 2usize..20, l in 1usize..16) {
            prop_assume!(n >= l);
            let s = sample_clip_starts(n, m, l).unwrap();
            prop_assert_eq!(s.len(), m);
            prop_assert_eq!(s[0], 0);
            prop_assert_eq!(*s.last().unwrap(), n - l);
            prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn pk_groups_are_exact(seed in 0u64..1000, p in 1usize..8, k in 1usize..6) {
            let ids: Vec<u32> = (0..40).map(|i| (i * 7 % 10) as u32).collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let b = sample_pk_batch(&ids, p, k, &mut r).unwrap();
            let mut groups: BTreeMap<u32, usize> = BTreeMap::new();
            for &l in &b.labels {
                *groups.entry(l).or_default() += 1;
            }
            prop_assert_eq!(groups.len(), p);
            prop_assert!(groups.values().all(|&c| c == k));
        }
    }
}
