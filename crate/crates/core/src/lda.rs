//! Fisher linear discriminant analysis used as a supervised reduction step.
//!
//! The generalized problem `S_b v = λ S_w v` is solved through two symmetric
//! eigendecompositions: `W = S_w^{-1/2}` is built from the eigenpairs of the
//! regularized within-class scatter, then the top eigenvectors of `W S_b W`
//! are mapped back through `W`. The resulting columns are `S_w`-orthonormal.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::label::{Label, LABELS, NUM_CLASSES};
use crate::numerics::{sym_eig, Matrix};

pub const DEFAULT_COMPONENTS: usize = 4;
/// Ridge added to the within-class scatter, relative to `trace(S_w)/D`.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub global_mean: Vec<f64>,
    /// `D×k`, columns ordered by descending discriminant value.
    pub projection: Matrix,
    /// Discriminant values of the kept components.
    pub eigenvalues: Vec<f64>,
    pub class_labels: Vec<Label>,
    pub epsilon: f64,
}

/// Within- and between-class scatter of a labelled sample.
#[derive(Debug, Clone)]
pub struct Scatter {
    pub within: Matrix,
    pub between: Matrix,
    pub global_mean: Vec<f64>,
    pub classes: Vec<Label>,
}

/// Computes pooled within-class and count-weighted between-class scatter.
pub fn scatter_matrices(x: &Matrix, y: &[Label]) -> Result<Scatter> {
    if x.rows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.rows(),
            right: y.len(),
        });
    }
    let d = x.cols();
    let global_mean = x.mean_rows()?;

    let mut counts = [0usize; NUM_CLASSES];
    let mut sums = vec![vec![0.0; d]; NUM_CLASSES];
    for (row, l) in x.iter_rows().zip(y) {
        counts[l.index()] += 1;
        for (s, v) in sums[l.index()].iter_mut().zip(row) {
            *s += v;
        }
    }
    let classes: Vec<Label> = LABELS.iter().copied().filter(|l| counts[l.index()] > 0).collect();
    let means: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|c| {
            let n = counts[c].max(1) as f64;
            sums[c].iter().map(|s| s / n).collect()
        })
        .collect();

    // upper triangle, mirrored at the end
    let mut within = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for (row, l) in x.iter_rows().zip(y) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&means[l.index()]) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                within[(i, j)] += ci * centered[j];
            }
        }
    }
    let mut between = Matrix::zeros(d, d);
    for &c in &classes {
        let n = counts[c.index()] as f64;
        let diff: Vec<f64> = means[c.index()].iter().zip(&global_mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in i..d {
                between[(i, j)] += n * diff[i] * diff[j];
            }
        }
    }
    for m in [&mut within, &mut between] {
        for i in 0..d {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
    }
    Ok(Scatter {
        within,
        between,
        global_mean,
        classes,
    })
}

/// Fits an LDA projection to `components` dimensions.
pub fn lda_fit(x: &Matrix, y: &[Label], components: usize, epsilon: f64) -> Result<LdaModel> {
    if x.rows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.rows(),
            right: y.len(),
        });
    }
    if components == 0 {
        return Err(Error::Config("LDA needs at least one component".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("invalid LDA regularization {}", epsilon)));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for l in y {
        counts[l.index()] += 1;
    }
    if let Some(l) = LABELS.iter().find(|l| counts[l.index()] == 1) {
        return Err(Error::DegenerateClass(l.to_string()));
    }
    let n_classes = counts.iter().filter(|&&c| c > 0).count();
    let max = n_classes.saturating_sub(1).min(x.cols());
    if components > max {
        return Err(Error::TooManyComponents {
            requested: components,
            max,
        });
    }
    if x.rows() <= n_classes {
        return Err(Error::Config(format!(
            "LDA needs more samples ({}) than classes ({})",
            x.rows(),
            n_classes
        )));
    }

    let Scatter {
        mut within,
        between,
        global_mean,
        classes,
    } = scatter_matrices(x, y)?;
    let d = x.cols();
    let ridge = epsilon * within.trace() / d as f64;
    for i in 0..d {
        within[(i, i)] += ridge;
    }

    let sw = sym_eig(&within)?;
    if sw.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::RankDeficient);
    }
    // W = U diag(λ^{-1/2}) U^T
    let mut scaled = sw.vectors.clone();
    for c in 0..d {
        let f = 1.0 / sw.values[c].sqrt();
        for r in 0..d {
            scaled[(r, c)] *= f;
        }
    }
    let whiten = scaled.matmul(&sw.vectors.transpose())?;
    let mut m = whiten.matmul(&between)?.matmul(&whiten)?;
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let eig = sym_eig(&m)?;
    let mut projection = whiten.matmul(&eig.vectors.leading_columns(components))?;
    fix_signs(&mut projection);

    Ok(LdaModel {
        global_mean,
        projection,
        eigenvalues: eig.values[..components].to_vec(),
        class_labels: classes,
        epsilon,
    })
}

/// Flips each column so that its largest-magnitude entry is positive.
fn fix_signs(p: &mut Matrix) {
    for c in 0..p.cols() {
        let mut best = 0.0f64;
        for r in 0..p.rows() {
            if p[(r, c)].abs() > best.abs() {
                best = p[(r, c)];
            }
        }
        if best < 0.0 {
            for r in 0..p.rows() {
                p[(r, c)] = -p[(r, c)];
            }
        }
    }
}

impl LdaModel {
    pub fn input_dim(&self) -> usize {
        self.global_mean.len()
    }

    pub fn components(&self) -> usize {
        self.projection.cols()
    }

    /// `(X - mean) · projection`.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        x.center_rows(&self.global_mean)?.matmul(&self.projection)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        writeln!(s, "lda,1").unwrap();
        writeln!(s, "epsilon,{}", self.epsilon).unwrap();
        let labels: Vec<&str> = self.class_labels.iter().map(|l| l.code()).collect();
        writeln!(s, "labels,{}", labels.join(",")).unwrap();
        writeln!(s, "eigenvalues,{}", join(&self.eigenvalues)).unwrap();
        writeln!(s, "global_mean,{}", join(&self.global_mean)).unwrap();
        for r in 0..self.projection.rows() {
            writeln!(s, "projection,{}", join(self.projection.row(r))).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Csv {
            path: "<lda model>".into(),
            reason: reason.to_string(),
        };
        let floats = |fields: &[&str]| -> Result<Vec<f64>> {
            fields
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad("bad number")))
                .collect()
        };
        let mut epsilon = None;
        let mut labels = Vec::new();
        let mut eigenvalues = Vec::new();
        let mut mean = Vec::new();
        let mut proj_rows: Vec<Vec<f64>> = Vec::new();
        let mut version_seen = false;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let rest = &fields[1..];
            match fields[0] {
                "lda" => {
                    if rest != ["1"] {
                        return Err(bad("unsupported model version"));
                    }
                    version_seen = true;
                }
                "epsilon" => epsilon = Some(floats(rest)?.first().copied().ok_or_else(|| bad("empty epsilon"))?),
                "labels" => labels = rest.iter().map(|l| l.parse()).collect::<Result<_>>()?,
                "eigenvalues" => eigenvalues = floats(rest)?,
                "global_mean" => mean = floats(rest)?,
                "projection" => proj_rows.push(floats(rest)?),
                other => return Err(bad(&format!("unknown record {:?}", other))),
            }
        }
        if !version_seen {
            return Err(bad("missing version record"));
        }
        if proj_rows.len() != mean.len() {
            return Err(bad("projection rows do not match mean length"));
        }
        Ok(LdaModel {
            projection: Matrix::from_rows(&proj_rows)?,
            global_mean: mean,
            eigenvalues,
            class_labels: labels,
            epsilon: epsilon.ok_or_else(|| bad("missing epsilon"))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LdaModel::from_csv(&text)
    }
}

pub fn lda_transform(model: &LdaModel, x: &Matrix) -> Result<Matrix> {
    model.transform(x)
}

/// `tr(Pᵀ S_b P) / tr(Pᵀ S_w P)` for a `D×k` projection.
pub fn trace_ratio(scatter: &Scatter, projection: &Matrix) -> Result<f64> {
    let pt = projection.transpose();
    let b = pt.matmul(&scatter.between)?.matmul(projection)?;
    let w = pt.matmul(&scatter.within)?.matmul(projection)?;
    Ok(b.trace() / w.trace())
}
