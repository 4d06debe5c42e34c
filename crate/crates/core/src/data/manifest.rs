//! JSON Lines dataset manifests: a header on line 1, then one record per
//! sample. Relative tensor paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::npy::{read_npy, read_npy_header};
use crate::calib::{DepthMap, InverseDepthMap};
use crate::error::{Error, Result};
use crate::heads::{pool_features, FeatureMap, FeaturePyramid, PooledFeature, TextEmbedding, PYRAMID_LEVELS};
use crate::scalar::Scalar;

pub const MANIFEST_FORMAT: &str = "depthcal-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub dataset: String,
    pub text_dim: usize,
    /// Length of the pooled feature vector.
    pub feature_dim: usize,
    /// Per-level channel counts when records carry feature maps instead of
    /// pooled vectors; they must sum to `feature_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_channels: Option<Vec<usize>>,
    pub embeddings_normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl ManifestHeader {
    pub fn new(dataset: impl Into<String>, text_dim: usize, feature_dim: usize, embeddings_normalized: bool) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            dataset: dataset.into(),
            text_dim,
            feature_dim,
            level_channels: None,
            embeddings_normalized,
            notes: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest { record: "<header>".into(), msg });
        if self.format != MANIFEST_FORMAT {
            return bad(format!("unknown format '{}'", self.format));
        }
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported version {} (expected {MANIFEST_VERSION})", self.version));
        }
        if self.text_dim == 0 || self.feature_dim == 0 {
            return bad("text_dim and feature_dim must be positive".into());
        }
        if let Some(ch) = &self.level_channels {
            if ch.len() != PYRAMID_LEVELS || ch.iter().sum::<usize>() != self.feature_dim {
                return bad(format!("level_channels {ch:?} must list {PYRAMID_LEVELS} levels summing to feature_dim"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub y_path: String,
    pub gt_path: String,
    pub text_emb_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feat_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feat_level_paths: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
}

impl SampleRecord {
    pub fn n_captions(&self) -> usize {
        self.text_emb_paths.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
    /// Directory relative record paths resolve against.
    pub base_dir: PathBuf,
}

/// One fully loaded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub y: InverseDepthMap<T>,
    pub gt: DepthMap<T>,
    pub text: Vec<TextEmbedding<T>>,
    pub feature: PooledFeature<T>,
}

impl Manifest {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks every record against the header, touching only file headers.
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let mut seen = HashSet::new();
        for rec in &self.records {
            let fail = |msg: String| Error::Manifest { record: rec.id.clone(), msg };
            if !seen.insert(rec.id.as_str()) {
                return Err(fail("duplicate id".into()));
            }
            if rec.text_emb_paths.is_empty() {
                return Err(fail("no text embeddings (K = 0)".into()));
            }
            if let Some(c) = &rec.captions {
                if c.len() != rec.text_emb_paths.len() {
                    return Err(fail(format!("{} captions for {} embeddings", c.len(), rec.text_emb_paths.len())));
                }
            }
            let shape_of = |p: &str| {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(fail(format!("missing file {}", full.display())));
                }
                read_npy_header(&full).map(|h| h.shape).map_err(|e| fail(e.to_string()))
            };
            let y = shape_of(&rec.y_path)?;
            if y.len() != 2 || y[0] == 0 || y[1] == 0 {
                return Err(fail(format!("relative depth must be a non-empty H x W map, got shape {y:?}")));
            }
            let gt = shape_of(&rec.gt_path)?;
            if gt != y {
                return Err(fail(format!("ground truth shape {gt:?} differs from relative depth shape {y:?}")));
            }
            for p in &rec.text_emb_paths {
                let s = shape_of(p)?;
                if s != [self.header.text_dim] {
                    return Err(fail(format!("text embedding {p} has shape {s:?}, header text_dim is {}", self.header.text_dim)));
                }
            }
            match (&rec.feat_path, &rec.feat_level_paths, &self.header.level_channels) {
                (Some(p), None, _) => {
                    let s = shape_of(p)?;
                    if s != [self.header.feature_dim] {
                        return Err(fail(format!("feature {p} has shape {s:?}, header feature_dim is {}", self.header.feature_dim)));
                    }
                }
                (None, Some(levels), Some(ch)) => {
                    if levels.len() != ch.len() {
                        return Err(fail(format!("{} feature levels, header lists {}", levels.len(), ch.len())));
                    }
                    for (p, &c) in levels.iter().zip(ch) {
                        let s = shape_of(p)?;
                        if s.len() != 3 || s[0] != c {
                            return Err(fail(format!("feature map {p} has shape {s:?}, expected {c} channels")));
                        }
                    }
                }
                (None, Some(_), None) => return Err(fail("per-level features need header level_channels".into())),
                _ => return Err(fail("exactly one of feat_path or feat_level_paths is required".into())),
            }
        }
        Ok(())
    }

    pub fn load_sample<T: Scalar>(&self, index: usize) -> Result<Sample<T>> {
        let rec = &self.records[index];
        let fail = |msg: String| Error::Manifest { record: rec.id.clone(), msg };
        let y = read_npy(self.resolve(&rec.y_path))?;
        let gt = read_npy(self.resolve(&rec.gt_path))?;
        if y.shape.len() != 2 || gt.shape != y.shape {
            return Err(fail(format!("map shapes {:?} and {:?} disagree", y.shape, gt.shape)));
        }
        let (h, w) = (y.shape[0], y.shape[1]);
        let text = rec
            .text_emb_paths
            .iter()
            .map(|p| {
                let a = read_npy(self.resolve(p))?;
                if a.data.len() != self.header.text_dim {
                    return Err(fail(format!("text embedding {p} has {} values", a.data.len())));
                }
                Ok(TextEmbedding(a.cast()))
            })
            .collect::<Result<Vec<_>>>()?;
        let feature = match (&rec.feat_path, &rec.feat_level_paths) {
            (Some(p), _) => PooledFeature(read_npy(self.resolve(p))?.cast()),
            (None, Some(levels)) => {
                let maps = levels
                    .iter()
                    .map(|p| {
                        let a = read_npy(self.resolve(p))?;
                        if a.shape.len() != 3 {
                            return Err(fail(format!("feature map {p} must be C x H x W")));
                        }
                        FeatureMap::new(a.shape[0], a.shape[1], a.shape[2], a.cast())
                    })
                    .collect::<Result<Vec<_>>>()?;
                pool_features(&FeaturePyramid::Maps(maps))?
            }
            (None, None) => return Err(fail("no features".into())),
        };
        if feature.0.len() != self.header.feature_dim {
            return Err(Error::dims(format!("feature of record {}", rec.id), self.header.feature_dim, feature.0.len()));
        }
        Ok(Sample { id: rec.id.clone(), y: InverseDepthMap::new(h, w, y.cast())?, gt: DepthMap::new(h, w, gt.cast())?, text, feature })
    }

    /// Loads every record, in manifest order.
    pub fn load_samples<T: Scalar>(&self) -> Result<Vec<Sample<T>>> {
        use rayon::prelude::*;
        (0..self.records.len()).into_par_iter().map(|i| self.load_sample(i)).collect()
    }
}

/// Parses and eagerly validates a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::Manifest { record: "<header>".into(), msg: "empty manifest".into() })?;
    let header: ManifestHeader =
        serde_json::from_str(first).map_err(|e| Error::Manifest { record: "<header>".into(), msg: format!("line 1: {e}") })?;
    let records = lines
        .map(|(i, l)| {
            serde_json::from_str::<SampleRecord>(l).map_err(|e| Error::Manifest { record: format!("<line {}>", i + 1), msg: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest { header, records, base_dir };
    m.validate()?;
    Ok(m)
}

pub fn save_manifest(path: impl AsRef<Path>, m: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &m.header)?;
    out.push(b'\n');
    for r in &m.records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
