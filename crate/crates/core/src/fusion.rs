//! Score-level fusion of two systems and the score file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifiers::{ScoreKind, ScoreVector};
use crate::dataset::csv_error;
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, ConfusionMatrix};
use crate::label::{Label, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight of the first system.
    pub alpha: f64,
}

impl FusionConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("fusion weight {} outside [0, 1]", alpha)));
        }
        Ok(FusionConfig { alpha })
    }
}

/// `alpha * a + (1 - alpha) * b`, per class. Both inputs must be of the same kind.
pub fn score_fuse(a: &ScoreVector, b: &ScoreVector, cfg: FusionConfig) -> Result<(Label, ScoreVector)> {
    if a.kind != b.kind {
        return Err(Error::KindMismatch(format!("{:?} vs {:?}", a.kind, b.kind)));
    }
    let alpha = cfg.alpha;
    let mut values = [0.0; NUM_CLASSES];
    for (i, v) in values.iter_mut().enumerate() {
        *v = alpha * a.values[i] + (1.0 - alpha) * b.values[i];
    }
    let fused = ScoreVector::new(values, a.kind);
    Ok((fused.argmax(), fused))
}

pub fn fuse_all(a: &[ScoreVector], b: &[ScoreVector], cfg: FusionConfig) -> Result<Vec<(Label, ScoreVector)>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    a.iter().zip(b).map(|(x, y)| score_fuse(x, y, cfg)).collect()
}

/// `0.0, 0.1, …, 1.0`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Result of scanning fusion weights on a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    /// `(alpha, uar)` per grid point.
    pub points: Vec<(f64, f64)>,
    pub best_alpha: f64,
    pub best_uar: f64,
}

/// Picks the weight with the highest UAR; ties go to the larger weight.
pub fn sweep_alpha(a: &[ScoreVector], b: &[ScoreVector], truth: &[Label], grid: &[f64]) -> Result<AlphaSweep> {
    if a.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: truth.len(),
        });
    }
    if grid.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut points = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let fused = fuse_all(a, b, FusionConfig::new(alpha)?)?;
        let pred: Vec<Label> = fused.iter().map(|(l, _)| *l).collect();
        let cm = ConfusionMatrix::from_pairs(truth, &pred)?;
        points.push((alpha, compute_metrics(&cm, "sweep", None)?.uar));
    }
    let (best_alpha, best_uar) = points
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, p| if p.1 >= best.1 { p } else { best });
    Ok(AlphaSweep {
        points,
        best_alpha,
        best_uar,
    })
}

/// Per-clip scores of one system, keyed by clip id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreFile {
    pub scores: BTreeMap<String, ScoreVector>,
}

const SCORE_HEADER: [&str; 7] = ["clip_id", "score_R", "score_P", "score_B", "score_I", "score_F", "kind"];

impl ScoreFile {
    pub fn to_csv(&self) -> String {
        let mut s = SCORE_HEADER.join(",");
        s.push('\n');
        for (id, v) in &self.scores {
            s.push_str(id);
            for x in v.values {
                let _ = write!(s, ",{}", x);
            }
            let _ = writeln!(s, ",{}", kind_name(v.kind));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Reads a score file. The trailing `kind` column is optional and
    /// defaults to `posterior`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        let mut cols = [0usize; 6];
        for (slot, name) in cols.iter_mut().zip(&SCORE_HEADER[..6]) {
            *slot = headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::MissingColumn {
                    path: path.to_path_buf(),
                    column: name.to_string(),
                })?;
        }
        let kind_col = headers.iter().position(|h| h == "kind");
        let mut out = ScoreFile::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let id = rec[cols[0]].to_string();
            let mut values = [0.0; NUM_CLASSES];
            for (v, &c) in values.iter_mut().zip(&cols[1..]) {
                *v = rec[c].trim().parse::<f64>().map_err(|_| Error::Csv {
                    path: path.to_path_buf(),
                    reason: format!("clip {}: bad score {:?}", id, &rec[c]),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("score for clip {}", id)));
                }
            }
            let kind = match kind_col.map(|c| rec[c].trim()) {
                None | Some("") | Some("posterior") => ScoreKind::Posterior,
                Some("vote_fraction") => ScoreKind::VoteFraction,
                Some(other) => {
                    return Err(Error::Csv {
                        path: path.to_path_buf(),
                        reason: format!("unknown score kind {:?}", other),
                    })
                }
            };
            if out.scores.insert(id.clone(), ScoreVector::new(values, kind)).is_some() {
                return Err(Error::DuplicateClipId(id));
            }
        }
        Ok(out)
    }

    /// Fuses two score files over their common clips; a clip present in only
    /// one of them is an error.
    pub fn fuse(&self, other: &ScoreFile, cfg: FusionConfig) -> Result<(ScoreFile, BTreeMap<String, Label>)> {
        if let Some(id) = self
            .scores
            .keys()
            .find(|k| !other.scores.contains_key(*k))
            .or_else(|| other.scores.keys().find(|k| !self.scores.contains_key(*k)))
        {
            return Err(Error::Csv {
                path: Default::default(),
                reason: format!("clip {} is missing from one score file", id),
            });
        }
        let mut fused = ScoreFile::default();
        let mut labels = BTreeMap::new();
        for (id, a) in &self.scores {
            let (l, v) = score_fuse(a, &other.scores[id], cfg)?;
            fused.scores.insert(id.clone(), v);
            labels.insert(id.clone(), l);
        }
        Ok((fused, labels))
    }
}

fn kind_name(k: ScoreKind) -> &'static str {
    match k {
        ScoreKind::Posterior => "posterior",
        ScoreKind::VoteFraction => "vote_fraction",
    }
}
