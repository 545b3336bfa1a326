//! Synthetic corpora for testing the pipeline without real embeddings.
//!
//! Clips are drawn from five isotropic Gaussian clusters whose means sit on a
//! regular simplex, so every pair of class means is the same distance apart.
//! Frame-level sources get per-frame noise on top of the clip vector.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::dataset::{
    write_embedding, write_manifest, ClipRecord, ExpectedCounts, FoldDefinition, FoldProtocol, Manifest, SourceTag,
    Subset,
};
use crate::error::{Error, Result};
use crate::label::{Label, LABELS, NUM_CLASSES};
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub clips_per_class: usize,
    pub dim: usize,
    /// Frames per clip for frame-level sources.
    pub frames: usize,
    /// Distance between any two class means, in units of `sigma`.
    pub separation: f64,
    /// Clip-level standard deviation around the class mean.
    pub sigma: f64,
    /// Per-frame standard deviation around the clip vector.
    pub frame_noise: f64,
    pub podcasts: usize,
    /// One embedding file per clip and source; each source draws its own noise.
    pub sources: Vec<SourceTag>,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            clips_per_class: 400,
            dim: 8,
            frames: 6,
            separation: 10.0,
            sigma: 1.0,
            frame_noise: 0.5,
            podcasts: 60,
            sources: vec![SourceTag::W2v2(11)],
            seed: 0,
        }
    }
}

impl ClusterSpec {
    /// Mean of class `c`: `separation·sigma/√2 · e_c`, so means are pairwise
    /// `separation·sigma` apart.
    pub fn class_means(&self) -> Result<Vec<Vec<f64>>> {
        if self.dim < NUM_CLASSES {
            return Err(Error::Config(format!(
                "synthetic clusters need dim >= {}, got {}",
                NUM_CLASSES, self.dim
            )));
        }
        let scale = self.separation * self.sigma / std::f64::consts::SQRT_2;
        Ok((0..NUM_CLASSES)
            .map(|c| {
                let mut m = vec![0.0; self.dim];
                m[c] = scale;
                m
            })
            .collect())
    }

    /// Standard deviation of a pooled frame mean around its class mean.
    pub fn pooled_sigma(&self, source: SourceTag) -> f64 {
        if source.is_frame_level() {
            (self.sigma * self.sigma + self.frame_noise * self.frame_noise / self.frames as f64).sqrt()
        } else {
            self.sigma
        }
    }
}

/// One synthetic clip with an embedding matrix per source.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub clip_id: String,
    pub podcast_id: String,
    pub label: Label,
    pub embeddings: BTreeMap<SourceTag, Matrix>,
}

pub fn generate_clusters(spec: &ClusterSpec) -> Result<Vec<SyntheticClip>> {
    let means = spec.class_means()?;
    if spec.frames == 0 || spec.podcasts == 0 || spec.sources.is_empty() {
        return Err(Error::Config("synthetic corpus needs frames, podcasts and sources".into()));
    }
    let mut rng = SeededRng::new(spec.seed);
    let n = spec.clips_per_class * NUM_CLASSES;
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let label = LABELS[i % NUM_CLASSES];
        let mean = &means[label.index()];
        let podcast = rng.below(spec.podcasts);
        let mut embeddings = BTreeMap::new();
        for &source in &spec.sources {
            let clip: Vec<f64> = mean.iter().map(|m| m + spec.sigma * rng.normal()).collect();
            let frames = if source.is_frame_level() { spec.frames } else { 1 };
            let mut data = Vec::with_capacity(frames * spec.dim);
            for _ in 0..frames {
                if source.is_frame_level() {
                    data.extend(clip.iter().map(|x| x + spec.frame_noise * rng.normal()));
                } else {
                    data.extend_from_slice(&clip);
                }
            }
            embeddings.insert(source, Matrix::new(frames, spec.dim, data)?);
        }
        clips.push(SyntheticClip {
            clip_id: format!("syn{:06}", i),
            podcast_id: format!("pod{:03}", podcast),
            label,
            embeddings,
        });
    }
    Ok(clips)
}

/// Writes every embedding as an f32 `.npy` file under `dir/emb/` plus a
/// `dir/manifest.csv` with relative paths. Returns the manifest path.
///
/// Values are narrowed to f32 on disk, as real extractor output is.
pub fn write_corpus(dir: impl AsRef<Path>, clips: &[SyntheticClip]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let emb = dir.join("emb");
    std::fs::create_dir_all(&emb).map_err(|e| Error::io(&emb, e))?;
    let mut records = Vec::with_capacity(clips.len());
    for clip in clips {
        let mut paths = BTreeMap::new();
        for (tag, m) in &clip.embeddings {
            let rel = PathBuf::from("emb").join(format!("{}.{}.npy", clip.clip_id, tag));
            write_embedding(dir.join(&rel), m)?;
            paths.insert(*tag, dir.join(&rel));
        }
        records.push(ClipRecord {
            clip_id: clip.clip_id.clone(),
            podcast_id: clip.podcast_id.clone(),
            label: clip.label,
            embedding_paths: paths,
        });
    }
    let manifest = Manifest::from_records(records)?;
    let path = dir.join("manifest.csv");
    write_manifest(&path, &manifest)?;
    Ok(path)
}

/// Monte-Carlo estimate of the best attainable UAR, in percent.
///
/// Draws pooled clip means straight from the generative model and classifies
/// them by the nearest class mean, which is the Bayes rule for equal priors
/// and a shared isotropic covariance. The pooled standard-deviation half
/// carries no class information, so it is left out.
pub fn bayes_uar_monte_carlo(spec: &ClusterSpec, source: SourceTag, samples: usize, seed: u64) -> Result<f64> {
    let means = spec.class_means()?;
    let sigma = spec.pooled_sigma(source);
    let mut rng = SeededRng::new(seed);
    let mut hits = [0u64; NUM_CLASSES];
    let mut support = [0u64; NUM_CLASSES];
    let mut y = vec![0.0; spec.dim];
    for i in 0..samples {
        let c = i % NUM_CLASSES;
        for (v, m) in y.iter_mut().zip(&means[c]) {
            *v = m + sigma * rng.normal();
        }
        let mut best = (f64::INFINITY, 0);
        for (k, m) in means.iter().enumerate() {
            let d: f64 = y.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        support[c] += 1;
        if best.1 == c {
            hits[c] += 1;
        }
    }
    let recalls: Vec<f64> = (0..NUM_CLASSES)
        .filter(|&c| support[c] > 0)
        .map(|c| 100.0 * hits[c] as f64 / support[c] as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Builds a manifest and fold protocol whose per-fold class counts follow
/// `expected`, with podcast-disjoint subsets.
///
/// Each class is a pool of clips sized by the first fold's totals. In fold `f`
/// the pool is rotated by the test counts of the earlier folds and cut into
/// test, val and train. Clips sharing the same subset in every fold share a
/// podcast, so no podcast straddles two subsets. A fold whose class totals
/// differ from the first fold's cannot be matched and shows up in the train
/// counts.
pub fn manifest_from_counts(expected: &ExpectedCounts) -> Result<(Manifest, FoldProtocol)> {
    let folds: Vec<u32> = expected.folds().into_iter().collect();
    let first = *folds.first().ok_or(Error::EmptyList)?;
    let class_total = |fold: u32, c: usize| -> u64 {
        expected
            .for_fold(fold)
            .values()
            .map(|cc| cc.counts[c])
            .sum()
    };
    let mut signatures: Vec<(Label, String)> = Vec::new();
    for (c, &label) in LABELS.iter().enumerate() {
        let n = class_total(first, c) as usize;
        let mut sig = vec![String::with_capacity(folds.len()); n];
        let mut offset = 0usize;
        for &f in &folds {
            let split = expected.for_fold(f);
            let get = |s: Subset| split.get(&s).map_or(0, |cc| cc.counts[c] as usize);
            let (t, v) = (get(Subset::Test), get(Subset::Val));
            if t + v > n {
                return Err(Error::InvalidFolds(format!(
                    "fold {} needs {} test+val clips of class {} but the pool has {}",
                    f, t + v, label, n
                )));
            }
            for (i, s) in sig.iter_mut().enumerate() {
                let r = (i + offset) % n;
                s.push(if r < t {
                    'e'
                } else if r < t + v {
                    'v'
                } else {
                    't'
                });
            }
            offset += t;
        }
        signatures.extend(sig.into_iter().map(|s| (label, s)));
    }

    let mut records = Vec::with_capacity(signatures.len());
    for (i, (label, sig)) in signatures.iter().enumerate() {
        records.push(ClipRecord {
            clip_id: format!("{}{:06}", label.code(), i),
            podcast_id: format!("pod-{}", sig),
            label: *label,
            embedding_paths: BTreeMap::new(),
        });
    }
    let podcasts: BTreeSet<&String> = signatures.iter().map(|(_, s)| s).collect();
    let mut protocol = FoldProtocol::default();
    for (k, &f) in folds.iter().enumerate() {
        let mut def = FoldDefinition {
            fold_id: f,
            ..Default::default()
        };
        for sig in &podcasts {
            let id = format!("pod-{}", sig);
            match sig.as_bytes()[k] {
                b'e' => def.test.insert(id),
                b'v' => def.val.insert(id),
                _ => def.train.insert(id),
            };
        }
        protocol.folds.push(def);
    }
    Ok((Manifest::from_records(records)?, protocol))
}
