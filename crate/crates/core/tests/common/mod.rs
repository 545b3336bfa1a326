//! Reference implementations used to check the library from the outside.
//!
//! Nothing here calls into the algorithms under test; inputs are plain
//! `Vec<Vec<f64>>` and every formula is written out longhand.

#![allow(dead_code)]

use stutter_probe::{Label, SeededRng, LABELS, NUM_CLASSES};

pub type Rows = Vec<Vec<f64>>;

/// Gaussian blobs with distinct, randomly scaled class means.
pub fn gaussian_classes(n: usize, d: usize, spread: f64, seed: u64) -> (Rows, Vec<Label>) {
    let mut rng = SeededRng::new(seed);
    let means: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|c| (0..d).map(|_| spread * (1.0 + 0.3 * c as f64) * rng.normal()).collect())
        .collect();
    let scales: Vec<f64> = (0..d).map(|_| 0.5 + rng.uniform()).collect();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % NUM_CLASSES;
        x.push((0..d).map(|j| means[c][j] + scales[j] * rng.normal()).collect());
        y.push(LABELS[c]);
    }
    (x, y)
}

// ---------------------------------------------------------------------------
// dense linear algebra

pub fn mat_vec(a: &Rows, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(p, q)| p * q).sum()).collect()
}

pub fn mat_mul(a: &Rows, b: &Rows) -> Rows {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Rows) -> Rows {
    let n = a.len();
    let mut m: Rows = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix");
        m[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

// ---------------------------------------------------------------------------
// LDA

/// Within-class (ridged) and between-class scatter as plain sums.
pub fn scatter(x: &Rows, y: &[Label], epsilon: f64) -> (Rows, Rows) {
    let d = x[0].len();
    let mut global = vec![0.0; d];
    let mut sums = vec![vec![0.0; d]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (r, l) in x.iter().zip(y) {
        counts[l.index()] += 1;
        for j in 0..d {
            global[j] += r[j];
            sums[l.index()][j] += r[j];
        }
    }
    global.iter_mut().for_each(|g| *g /= x.len() as f64);
    let means: Rows = sums
        .iter()
        .zip(counts)
        .map(|(s, n)| s.iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    let mut sw = vec![vec![0.0; d]; d];
    for (r, l) in x.iter().zip(y) {
        let m = &means[l.index()];
        for i in 0..d {
            for j in 0..d {
                sw[i][j] += (r[i] - m[i]) * (r[j] - m[j]);
            }
        }
    }
    let mut sb = vec![vec![0.0; d]; d];
    for c in 0..NUM_CLASSES {
        if counts[c] == 0 {
            continue;
        }
        for i in 0..d {
            for j in 0..d {
                sb[i][j] += counts[c] as f64 * (means[c][i] - global[i]) * (means[c][j] - global[j]);
            }
        }
    }
    let ridge = epsilon * (0..d).map(|i| sw[i][i]).sum::<f64>() / d as f64;
    for (i, row) in sw.iter_mut().enumerate() {
        row[i] += ridge;
    }
    (sw, sb)
}

/// Leading `k` generalized eigenvectors of `S_b v = λ S_w v`, found by power
/// iteration on `S_w^{-1} S_b` with `S_w`-orthogonal deflation, then polished
/// by shifted inverse iteration. Returns `(eigenvalue, unit vector)` pairs.
pub fn generalized_eigvecs(sw: &Rows, sb: &Rows, k: usize) -> Vec<(f64, Vec<f64>)> {
    let d = sw.len();
    let m = mat_mul(&invert(sw), sb);
    let mut found: Vec<(f64, Vec<f64>)> = Vec::new();
    let deflate = |v: &mut Vec<f64>, found: &[(f64, Vec<f64>)]| {
        for (_, u) in found {
            let c = dot(u, &mat_vec(sw, v)) / dot(u, &mat_vec(sw, u));
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let n = dot(v, v).sqrt();
        v.iter_mut().for_each(|a| *a /= n);
    };
    let rayleigh = |v: &[f64]| dot(v, &mat_vec(sb, v)) / dot(v, &mat_vec(sw, v));
    for j in 0..k {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + j * 3) % 5) as f64).collect();
        deflate(&mut v, &found);
        for _ in 0..3000 {
            v = mat_vec(&m, &v);
            deflate(&mut v, &found);
        }
        let lambda = rayleigh(&v);
        let shift = lambda * (1.0 + 1e-9);
        let shifted: Rows = (0..d)
            .map(|r| (0..d).map(|c| m[r][c] - if r == c { shift } else { 0.0 }).collect())
            .collect();
        let solve = invert(&shifted);
        for _ in 0..4 {
            v = mat_vec(&solve, &v);
            deflate(&mut v, &found);
        }
        found.push((rayleigh(&v), v));
    }
    found
}

// ---------------------------------------------------------------------------
// classifiers

/// Posterior from the product of univariate normal densities, in linear space.
pub fn gaussian_posterior(
    means: &[Vec<f64>],
    variances: &[Vec<f64>],
    priors: &[f64],
    present: &[bool],
    e: &[f64],
) -> [f64; NUM_CLASSES] {
    let mut joint = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if !present[c] {
            continue;
        }
        let mut p = priors[c];
        for j in 0..e.len() {
            let v = variances[c][j];
            let z = e[j] - means[c][j];
            p *= (-z * z / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        }
        joint[c] = p;
    }
    let total: f64 = joint.iter().sum();
    joint.map(|p| p / total)
}

/// Per-class means and population variances by two passes.
pub fn class_moments(x: &Rows, y: &[Label]) -> (Rows, Rows, [f64; NUM_CLASSES]) {
    let d = x[0].len();
    let mut means = vec![vec![0.0; d]; NUM_CLASSES];
    let mut vars = vec![vec![0.0; d]; NUM_CLASSES];
    let mut counts = [0.0; NUM_CLASSES];
    for (r, l) in x.iter().zip(y) {
        counts[l.index()] += 1.0;
        for j in 0..d {
            means[l.index()][j] += r[j];
        }
    }
    for c in 0..NUM_CLASSES {
        means[c].iter_mut().for_each(|m| *m /= counts[c]);
    }
    for (r, l) in x.iter().zip(y) {
        for j in 0..d {
            vars[l.index()][j] += (r[j] - means[l.index()][j]).powi(2);
        }
    }
    for c in 0..NUM_CLASSES {
        vars[c].iter_mut().for_each(|v| *v /= counts[c]);
    }
    let n: f64 = counts.iter().sum();
    (means, vars, counts.map(|c| c / n))
}

pub fn minkowski(a: &[f64], b: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    } else if p == 2.0 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Sorts every training point, keeps the first `k`, and votes. Ties on votes
/// go to the class with the smaller summed distance, then to label order.
pub fn knn_full_scan(train: &Rows, labels: &[Label], q: &[f64], k: usize, p: f64) -> Label {
    let mut all: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (minkowski(t, q, p), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = [0usize; NUM_CLASSES];
    let mut dist = [0.0; NUM_CLASSES];
    for &(d, i) in &all[..k] {
        votes[labels[i].index()] += 1;
        dist[labels[i].index()] += d;
    }
    let top = *votes.iter().max().unwrap();
    let mut best: Option<usize> = None;
    for c in 0..NUM_CLASSES {
        if votes[c] != top {
            continue;
        }
        match best {
            Some(b) if dist[b] <= dist[c] => {}
            _ => best = Some(c),
        }
    }
    LABELS[best.unwrap()]
}

// ---------------------------------------------------------------------------
// metrics

/// `(recalls in %, total accuracy in %, UAR in %)` from raw counts, with UAR
/// averaged over classes that occur.
pub fn recount(counts: &[[u64; NUM_CLASSES]; NUM_CLASSES]) -> ([Option<f64>; NUM_CLASSES], f64, f64) {
    let mut recalls = [None; NUM_CLASSES];
    let mut correct = 0u64;
    let mut total = 0u64;
    for t in 0..NUM_CLASSES {
        let support: u64 = counts[t].iter().sum();
        total += support;
        correct += counts[t][t];
        if support > 0 {
            recalls[t] = Some(100.0 * counts[t][t] as f64 / support as f64);
        }
    }
    let defined: Vec<f64> = recalls.iter().flatten().copied().collect();
    let uar = defined.iter().sum::<f64>() / defined.len() as f64;
    (recalls, 100.0 * correct as f64 / total as f64, uar)
}

// ---------------------------------------------------------------------------
// end-to-end helpers

use std::path::Path;
use stutter_probe::dataset::{generate_folds, load_manifest, FoldGeneration, FoldProtocol, Manifest};
use stutter_probe::pipeline::{crossval, CrossvalResult, PipelineSpec};
use stutter_probe::synthetic::{generate_clusters, write_corpus, ClusterSpec};

/// Writes a synthetic corpus under `dir`, reads it back through the manifest
/// and cuts a podcast-level protocol.
pub fn synthetic_corpus(dir: &Path, cluster: &ClusterSpec, folds: u32) -> (Manifest, FoldProtocol) {
    let clips = generate_clusters(cluster).expect("clusters");
    let manifest = load_manifest(write_corpus(dir, &clips).expect("corpus")).expect("manifest");
    let protocol = generate_folds(&manifest, &FoldGeneration { folds, seed: cluster.seed }).expect("folds");
    (manifest, protocol)
}

/// Spec for synthetic runs, which carry fewer than 768 dimensions.
pub fn synthetic_spec(name: &str, classifier: &str, sources: &[&str], fusion: &str, extra: &str) -> PipelineSpec {
    let list: Vec<String> = sources.iter().map(|s| format!("{:?}", s)).collect();
    let text = format!(
        "name = {:?}\nsources = [{}]\nfusion = {:?}\nclassifier = {:?}\nstrict_shapes = false\n{}",
        name,
        list.join(", "),
        fusion,
        classifier,
        extra
    );
    PipelineSpec::from_toml(&text).expect("spec")
}

pub fn run(spec: &PipelineSpec, manifest: &Manifest, protocol: &FoldProtocol, jobs: usize) -> CrossvalResult {
    crossval(spec, manifest, protocol, jobs).expect("crossval")
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot_tree(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, at: &Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(at).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn data_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}
