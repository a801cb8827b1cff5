//! The CSF1 feature-store file: per-clip feature vectors grouped into
//! tracklets, with identity/camera labels and split assignments.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! offset 0   magic      b"CSF1"
//! offset 4   version    1
//! offset 8   D          feature dimension
//! offset 12  count      number of tracklets
//! offset 16  len        byte length of the JSON manifest
//! offset 20  manifest   UTF-8 JSON, `len` bytes
//! ...        payload    f32 LE, tracklets in manifest order, clips in order,
//!                       D values per clip
//! ```
//!
//! Features are kept at `f32` precision in memory too (widened to `f64`), so
//! a store that was built in memory and one read back from disk compare equal.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

pub const STORE_MAGIC: [u8; 4] = *b"CSF1";
pub const STORE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

/// One observation of one person: an ordered list of clip features.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub tracklet_id: String,
    pub person_id: u32,
    pub camera_id: u32,
    pub num_frames: u32,
    pub clip_features: Vec<Vector>,
    pub corrupted_mask: Option<Vec<bool>>,
}

impl Tracklet {
    pub fn num_clips(&self) -> usize {
        self.clip_features.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.clip_features.first().map_or(0, Vector::len)
    }

    pub fn is_corrupted(&self, clip: usize) -> bool {
        self.corrupted_mask.as_ref().is_some_and(|m| m[clip])
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.clip_features.is_empty() {
            return Err(Error::Manifest(format!(
                "tracklet {} has no clips",
                self.tracklet_id
            )));
        }
        if self.num_frames == 0 {
            return Err(Error::Manifest(format!(
                "tracklet {} has zero frames",
                self.tracklet_id
            )));
        }
        for f in &self.clip_features {
            if f.len() != dim {
                return Err(Error::InconsistentDim {
                    expected: dim,
                    found: f.len(),
                });
            }
        }
        if let Some(mask) = &self.corrupted_mask {
            if mask.len() != self.clip_features.len() {
                return Err(Error::Manifest(format!(
                    "tracklet {}: mask length {} != clip count {}",
                    self.tracklet_id,
                    mask.len(),
                    self.clip_features.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackletMeta {
    pub tracklet_id: String,
    pub person_id: u32,
    pub camera_id: u32,
    pub num_frames: u32,
    pub num_clips: u32,
    pub split: Split,
    #[serde(default)]
    pub corrupted_mask: Option<Vec<bool>>,
}

/// The JSON block of a CSF1 file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub feature_dim: u32,
    /// Distinct person ids across all splits.
    pub num_identities: u32,
    /// Standard re-id protocol: every query identity has a gallery entry.
    pub require_query_in_gallery: bool,
    pub tracklets: Vec<TrackletMeta>,
}

/// An in-memory feature store. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    manifest: DatasetManifest,
    tracklets: Vec<Tracklet>,
}

fn quantize(v: &Vector) -> Vector {
    Vector::from_finite(v.as_slice().iter().map(|&x| x as f32 as f64).collect())
}

impl FeatureStore {
    /// Builds and validates a store. Features are rounded to `f32`.
    pub fn new(
        tracklets: Vec<(Tracklet, Split)>,
        require_query_in_gallery: bool,
    ) -> Result<Self> {
        if tracklets.is_empty() {
            return Err(Error::InvalidArgument("empty tracklet list".into()));
        }
        let dim = tracklets[0].0.feature_dim();
        if dim == 0 {
            return Err(Error::InvalidArgument("zero feature dimension".into()));
        }
        let mut metas = Vec::with_capacity(tracklets.len());
        let mut stored = Vec::with_capacity(tracklets.len());
        for (mut t, split) in tracklets {
            t.validate(dim)?;
            for f in t.clip_features.iter_mut() {
                if f.as_slice().iter().any(|x| !(*x as f32).is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "tracklet {} overflows f32",
                        t.tracklet_id
                    )));
                }
                *f = quantize(f);
            }
            metas.push(TrackletMeta {
                tracklet_id: t.tracklet_id.clone(),
                person_id: t.person_id,
                camera_id: t.camera_id,
                num_frames: t.num_frames,
                num_clips: t.num_clips() as u32,
                split,
                corrupted_mask: t.corrupted_mask.clone(),
            });
            stored.push(t);
        }
        let num_identities = metas
            .iter()
            .map(|m| m.person_id)
            .collect::<BTreeSet<_>>()
            .len() as u32;
        let manifest = DatasetManifest {
            feature_dim: dim as u32,
            num_identities,
            require_query_in_gallery,
            tracklets: metas,
        };
        validate_manifest(&manifest)?;
        Ok(Self {
            manifest,
            tracklets: stored,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim as usize
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.manifest.tracklets[index].split
    }

    /// Tracklets of one split, in store order.
    pub fn select_split(&self, split: Split) -> Vec<&Tracklet> {
        self.tracklets
            .iter()
            .zip(&self.manifest.tracklets)
            .filter(|(_, m)| m.split == split)
            .map(|(t, _)| t)
            .collect()
    }

    pub fn select_split_named(&self, name: &str) -> Result<Vec<&Tracklet>> {
        Ok(self.select_split(name.parse()?))
    }

    pub fn find(&self, tracklet_id: &str) -> Option<(&Tracklet, Split)> {
        self.tracklets
            .iter()
            .position(|t| t.tracklet_id == tracklet_id)
            .map(|i| (&self.tracklets[i], self.split_of(i)))
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s| self.manifest.tracklets.iter().filter(|m| m.split == s).count();
        (count(Split::Train), count(Split::Query), count(Split::Gallery))
    }

    /// Serializes to the CSF1 byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.manifest)?;
        let payload: usize = self.tracklets.iter().map(|t| t.num_clips()).sum::<usize>()
            * self.feature_dim()
            * 4;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 + json.len() + payload);
        out.extend_from_slice(&STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.manifest.feature_dim.to_le_bytes());
        out.extend_from_slice(&(self.tracklets.len() as u32).to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tracklets {
            for f in &t.clip_features {
                for &x in f.as_slice() {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize| -> Result<()> {
            if bytes.len() < n {
                Err(Error::Truncated {
                    needed: n,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != STORE_MAGIC {
            return Err(Error::BadMagic {
                expected: STORE_MAGIC,
                found: magic,
            });
        }
        need(HEADER_LEN + 4)?;
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = word(4);
        if version != STORE_VERSION {
            return Err(Error::VersionMismatch {
                expected: STORE_VERSION,
                found: version,
            });
        }
        let dim = word(8) as usize;
        let count = word(12) as usize;
        let json_len = word(16) as usize;
        let json_end = HEADER_LEN + 4 + json_len;
        need(json_end)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes[HEADER_LEN + 4..json_end])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.feature_dim as usize != dim {
            return Err(Error::InconsistentDim {
                expected: dim,
                found: manifest.feature_dim as usize,
            });
        }
        if manifest.tracklets.len() != count {
            return Err(Error::Manifest(format!(
                "header declares {count} tracklets, manifest lists {}",
                manifest.tracklets.len()
            )));
        }
        validate_manifest(&manifest)?;
        let total_clips: usize = manifest.tracklets.iter().map(|m| m.num_clips as usize).sum();
        let payload_end = json_end + total_clips * dim * 4;
        need(payload_end)?;
        if bytes.len() != payload_end {
            return Err(Error::Manifest(format!(
                "{} trailing bytes after payload",
                bytes.len() - payload_end
            )));
        }
        let mut cursor = json_end;
        let mut tracklets = Vec::with_capacity(count);
        for meta in &manifest.tracklets {
            let mut clips = Vec::with_capacity(meta.num_clips as usize);
            for _ in 0..meta.num_clips {
                let data: Vec<f64> = bytes[cursor..cursor + dim * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                cursor += dim * 4;
                clips.push(Vector::new(data)?);
            }
            let t = Tracklet {
                tracklet_id: meta.tracklet_id.clone(),
                person_id: meta.person_id,
                camera_id: meta.camera_id,
                num_frames: meta.num_frames,
                clip_features: clips,
                corrupted_mask: meta.corrupted_mask.clone(),
            };
            t.validate(dim)?;
            tracklets.push(t);
        }
        Ok(Self {
            manifest,
            tracklets,
        })
    }
}

fn validate_manifest(m: &DatasetManifest) -> Result<()> {
    if m.feature_dim == 0 {
        return Err(Error::Manifest("feature_dim must be positive".into()));
    }
    if m.tracklets.is_empty() {
        return Err(Error::Manifest("no tracklets".into()));
    }
    let mut ids = HashSet::new();
    for t in &m.tracklets {
        if !ids.insert(t.tracklet_id.as_str()) {
            return Err(Error::Manifest(format!(
                "duplicate tracklet id {:?}",
                t.tracklet_id
            )));
        }
        if t.num_clips == 0 {
            return Err(Error::Manifest(format!("{} has no clips", t.tracklet_id)));
        }
        if let Some(mask) = &t.corrupted_mask {
            if mask.len() != t.num_clips as usize {
                return Err(Error::Manifest(format!(
                    "{}: mask length {} != clip count {}",
                    t.tracklet_id,
                    mask.len(),
                    t.num_clips
                )));
            }
        }
    }
    let distinct = m
        .tracklets
        .iter()
        .map(|t| t.person_id)
        .collect::<BTreeSet<_>>()
        .len();
    if distinct != m.num_identities as usize {
        return Err(Error::Manifest(format!(
            "num_identities {} but {distinct} distinct person ids",
            m.num_identities
        )));
    }
    if m.require_query_in_gallery {
        let gallery: HashSet<u32> = m
            .tracklets
            .iter()
            .filter(|t| t.split == Split::Gallery)
            .map(|t| t.person_id)
            .collect();
        if let Some(q) = m
            .tracklets
            .iter()
            .find(|t| t.split == Split::Query && !gallery.contains(&t.person_id))
        {
            return Err(Error::Manifest(format!(
                "query {} (person {}) has no gallery entry",
                q.tracklet_id, q.person_id
            )));
        }
    }
    Ok(())
}

pub fn write_store(store: &FeatureStore, path: &Path) -> Result<()> {
    let bytes = store.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a store from a `.csf` file, or from `features.csf` inside a directory.
pub fn read_store(path: &Path) -> Result<FeatureStore> {
    let file = resolve_store_path(path);
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    FeatureStore::from_bytes(&bytes)
}

pub const STORE_FILE_NAME: &str = "features.csf";

pub fn resolve_store_path(path: &Path) -> std::path::PathBuf {
    if path.is_dir() {
        path.join(STORE_FILE_NAME)
    } else {
        path.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tracklet(id: &str, pid: u32, cam: u32, clips: Vec<Vec<f64>>) -> Tracklet {
        Tracklet {
            tracklet_id: id.into(),
            person_id: pid,
            camera_id: cam,
            num_frames: 8,
            clip_features: clips.into_iter().map(|c| Vector::new(c).unwrap()).collect(),
            corrupted_mask: None,
        }
    }

    fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureStore {
        let entries = (0..n)
            .map(|i| {
                let m = rng.random_range(1..5);
                let clips = (0..m)
                    .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect();
                let mut t = tracklet(&format!("t{i}"), (i % 7) as u32, (i % 3) as u32, clips);
                if rng.random_bool(0.5) {
                    t.corrupted_mask = Some((0..m).map(|_| rng.random_bool(0.3)).collect());
                }
                let split = [Split::Train, Split::Query, Split::Gallery][i % 3];
                (t, split)
            })
            .collect();
        FeatureStore::new(entries, false).unwrap()
    }

    #[test]
    fn file_size_matches_layout() {
        let t = tracklet("a", 0, 0, vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.5; 4]]);
        let store = FeatureStore::new(vec![(t, Split::Train)], false).unwrap();
        let json = serde_json::to_vec(store.manifest()).unwrap();
        let bytes = store.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 + json.len() + 2 * 4 * 4);
        assert_eq!(&bytes[0..4], b"CSF1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 4, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn empty_store_is_rejected() {
        assert!(matches!(
            FeatureStore::new(vec![], false),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn round_trip_100_random_tracklets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = random_store(&mut rng, 100, 6);
        let bytes = store.to_bytes().unwrap();
        let back = FeatureStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn distinct_errors_for_corrupt_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes = random_store(&mut rng, 5, 3).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FeatureStore::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            FeatureStore::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        let bad = &bytes[..bytes.len() - 3];
        assert!(matches!(FeatureStore::from_bytes(bad), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[8] = 4;
        assert!(matches!(
            FeatureStore::from_bytes(&bad),
            Err(Error::InconsistentDim { .. })
        ));
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let a = tracklet("a", 0, 0, vec![vec![1.0; 4]]);
        let b = tracklet("b", 1, 0, vec![vec![1.0; 3]]);
        assert!(matches!(
            FeatureStore::new(vec![(a, Split::Train), (b, Split::Train)], false),
            Err(Error::InconsistentDim { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn split_selection_preserves_order() {
        let mut entries = Vec::new();
        let layout = [3usize, 2, 5];
        let splits = [Split::Train, Split::Query, Split::Gallery];
        let mut i = 0;
        for (count, split) in layout.iter().zip(splits) {
            for _ in 0..*count {
                entries.push((tracklet(&format!("t{i}"), (i % 2) as u32, 0, vec![vec![1.0]]), split));
                i += 1;
            }
        }
        let store = FeatureStore::new(entries, false).unwrap();
        assert_eq!(store.select_split(Split::Train).len(), 3);
        assert_eq!(store.select_split(Split::Query).len(), 2);
        let gallery = store.select_split_named("gallery").unwrap();
        let ids: Vec<_> = gallery.iter().map(|t| t.tracklet_id.as_str()).collect();
        assert_eq!(ids, ["t5", "t6", "t7", "t8", "t9"]);
        assert!(matches!(
            store.select_split_named("test"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn query_gallery_protocol_checks() {
        let q = tracklet("q", 0, 0, vec![vec![1.0]]);
        let g = tracklet("g", 1, 1, vec![vec![1.0]]);
        assert!(FeatureStore::new(
            vec![(q.clone(), Split::Query), (g.clone(), Split::Gallery)],
            true
        )
        .is_err());
        assert!(FeatureStore::new(vec![(q.clone(), Split::Query), (g, Split::Gallery)], false).is_ok());
        // the same tracklet id cannot be both query and gallery
        assert!(FeatureStore::new(vec![(q.clone(), Split::Query), (q, Split::Gallery)], false).is_err());
    }
}
