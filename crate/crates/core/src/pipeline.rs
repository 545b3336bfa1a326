//! Configured experiment chains.
//!
//! A [`PipelineSpec`] names the embedding sources, the optional LDA
//! reduction, the back-end and the fusion mode. [`run_fold`] fits everything
//! on the training podcasts of one fold, uses the validation podcasts for early
//! stopping and weight tuning, and scores the test podcasts. [`crossval`] runs
//! every fold of a protocol and aggregates the reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{GaussianNbModel, KnnModel, Prediction, ScoreVector, DEFAULT_K, DEFAULT_MINKOWSKI_P};
use crate::dataset::{csv_error, read_embedding, FoldDefinition, FoldProtocol, Manifest, SourceTag};
use crate::error::{Error, Result};
use crate::eval::{aggregate, compute_metrics, render_report, AggregateReport, ConfusionMatrix, EvalReport};
use crate::features::{concat_columns, l2_normalize, pool_embedding};
use crate::fusion::{default_alpha_grid, fuse_all, sweep_alpha, AlphaSweep, FusionConfig, ScoreFile};
use crate::label::{Label, NUM_CLASSES};
use crate::lda::{lda_fit, LdaModel, DEFAULT_COMPONENTS, DEFAULT_EPSILON};
use crate::mlp::{self, TrainingConfig, TrainingLog, TwoBranchMlp};
use crate::numerics::Matrix;

// ---------------------------------------------------------------------------
// spec

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Knn,
    Gnb,
    Mlp,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Knn => "knn",
            ClassifierKind::Gnb => "gnb",
            ClassifierKind::Mlp => "mlp",
        }
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(ClassifierKind::Knn),
            "gnb" => Ok(ClassifierKind::Gnb),
            "mlp" => Ok(ClassifierKind::Mlp),
            other => Err(Error::UnknownClassifier(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    None,
    /// Concatenate the reduced features of every source.
    Embed,
    /// Weighted average of two systems' scores; the first source gets `alpha`.
    Score,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdaMode {
    /// One LDA per source, outputs concatenated.
    #[default]
    PerSource,
    /// A single LDA over the concatenated sources.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnParams {
    pub k: usize,
    pub p: f64,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams {
            k: DEFAULT_K,
            p: DEFAULT_MINKOWSKI_P,
        }
    }
}

fn default_components() -> usize {
    DEFAULT_COMPONENTS
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_alpha() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}

/// Experiment description, read from TOML.
///
/// The MLP seed is not taken from `[mlp]`: every fold trains with
/// `seed + fold_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub name: String,
    pub sources: Vec<SourceTag>,
    #[serde(default)]
    pub fusion: FusionMode,
    /// 0 disables LDA.
    #[serde(default = "default_components")]
    pub lda_components: usize,
    #[serde(default)]
    pub lda_mode: LdaMode,
    #[serde(default = "default_epsilon")]
    pub lda_epsilon: f64,
    pub classifier: String,
    #[serde(default)]
    pub knn: KnnParams,
    #[serde(default)]
    pub mlp: TrainingConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub l2_normalize: Vec<SourceTag>,
    #[serde(default)]
    pub seed: u64,
    /// Enforce the extractor shapes, `(1, 192)` and `(T, 768)`.
    #[serde(default = "default_true")]
    pub strict_shapes: bool,
}

impl PipelineSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: PipelineSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineSpec::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn classifier_kind(&self) -> Result<ClassifierKind> {
        self.classifier.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.classifier_kind()?;
        if self.name.trim().is_empty() {
            return bad("spec name is empty".into());
        }
        if self.sources.is_empty() {
            return bad("spec lists no sources".into());
        }
        for (i, s) in self.sources.iter().enumerate() {
            if self.sources[..i].contains(s) {
                return bad(format!("source {} listed twice", s));
            }
        }
        match (self.fusion, self.sources.len()) {
            (FusionMode::None, 1) | (FusionMode::Score, 2) => {}
            (FusionMode::Embed, n) if n >= 2 => {}
            (mode, n) => return bad(format!("fusion {:?} does not take {} sources", mode, n)),
        }
        if self.lda_components > NUM_CLASSES - 1 {
            return bad(format!(
                "lda_components {} exceeds the {} available discriminants",
                self.lda_components,
                NUM_CLASSES - 1
            ));
        }
        if !(self.lda_epsilon > 0.0) {
            return bad("lda_epsilon must be positive".into());
        }
        if self.knn.k == 0 || !(self.knn.p >= 1.0) {
            return bad("knn needs k >= 1 and p >= 1".into());
        }
        self.mlp.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if let Some(t) = self.l2_normalize.iter().find(|t| !self.sources.contains(t)) {
            return bad(format!("l2_normalize names {} which is not a source", t));
        }
        Ok(())
    }

    /// Source groups, one per system.
    fn systems(&self) -> Vec<Vec<SourceTag>> {
        match self.fusion {
            FusionMode::Score => self.sources.iter().map(|s| vec![*s]).collect(),
            _ => vec![self.sources.clone()],
        }
    }
}

// ---------------------------------------------------------------------------
// features

/// Pooled features of every clip in a manifest, rows in manifest order.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub clip_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub blocks: BTreeMap<SourceTag, Matrix>,
}

/// Reads and pools one source for every clip of the manifest.
pub fn pool_source(manifest: &Manifest, tag: SourceTag, normalize: bool, strict: bool) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut dim = None;
    for rec in manifest.records() {
        let m = read_embedding(rec.embedding_path(tag)?)?;
        if strict {
            tag.check_shape(&m)?;
        }
        let mut v = pool_embedding(&m, tag)?;
        if normalize {
            v = l2_normalize(&v)?;
        }
        match dim {
            None => dim = Some(v.dim()),
            Some(d) if d != v.dim() => {
                return Err(Error::DimMismatch {
                    expected: d,
                    found: v.dim(),
                })
            }
            _ => {}
        }
        data.extend_from_slice(&v.values);
    }
    Ok(Matrix::from_raw(manifest.len(), dim.unwrap_or(0), data))
}

impl FeatureTable {
    pub fn load(manifest: &Manifest, tags: &[SourceTag], normalize: &[SourceTag], strict: bool) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        for &tag in tags {
            blocks.insert(tag, pool_source(manifest, tag, normalize.contains(&tag), strict)?);
        }
        Ok(FeatureTable {
            clip_ids: manifest.records().iter().map(|r| r.clip_id.clone()).collect(),
            labels: manifest.records().iter().map(|r| r.label).collect(),
            blocks,
        })
    }

    pub fn block(&self, tag: SourceTag) -> Result<&Matrix> {
        self.blocks.get(&tag).ok_or_else(|| Error::MissingEmbedding {
            clip_id: "*".into(),
            tag: tag.to_string(),
        })
    }

    /// SHA-256 of the pooled values of one source (little-endian f64).
    pub fn digest(&self, tag: SourceTag) -> Result<String> {
        let mut h = Sha256::new();
        for v in self.block(tag)?.data() {
            h.update(v.to_le_bytes());
        }
        Ok(hex(&h.finalize()))
    }
}

/// Labelled feature rows as exchanged between command-line steps.
///
/// CSV layout: `clip_id,label,f0,f1,…`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub clip_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub features: Matrix,
}

impl FeatureSet {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,label");
        for i in 0..self.features.cols() {
            let _ = write!(s, ",f{}", i);
        }
        s.push('\n');
        for ((id, l), row) in self.clip_ids.iter().zip(&self.labels).zip(self.features.iter_rows()) {
            let _ = write!(s, "{},{}", id, l);
            for v in row {
                let _ = write!(s, ",{}", v);
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        for (i, name) in ["clip_id", "label"].iter().enumerate() {
            if headers.get(i) != Some(name) {
                return Err(Error::MissingColumn {
                    path: path.to_path_buf(),
                    column: name.to_string(),
                });
            }
        }
        let dim = headers.len() - 2;
        let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            ids.push(rec[0].to_string());
            labels.push(rec[1].trim().parse()?);
            for v in rec.iter().skip(2) {
                data.push(v.trim().parse::<f64>().map_err(|_| Error::Csv {
                    path: path.to_path_buf(),
                    reason: format!("clip {}: bad value {:?}", &rec[0], v),
                })?);
            }
        }
        let features = Matrix::new(ids.len(), dim, data)?;
        Ok(FeatureSet {
            clip_ids: ids,
            labels,
            features,
        })
    }
}

// ---------------------------------------------------------------------------
// per-fold chain

/// Manifest row indices of one fold.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(manifest: &Manifest, fold: &FoldDefinition) -> Result<FoldSplit> {
    let split = FoldSplit {
        train: manifest.indices_for(&fold.train),
        val: manifest.indices_for(&fold.val),
        test: manifest.indices_for(&fold.test),
    };
    if split.train.is_empty() {
        return Err(Error::EmptySet("training"));
    }
    if split.val.is_empty() {
        return Err(Error::EmptySet("validation"));
    }
    if split.test.is_empty() {
        return Err(Error::EmptySet("test"));
    }
    Ok(split)
}

/// LDA stage fitted on the training rows of one system.
#[derive(Debug, Clone)]
pub struct FeatureReducer {
    pub tags: Vec<SourceTag>,
    pub mode: LdaMode,
    /// One model per source, or a single joint model; empty without LDA.
    pub models: Vec<LdaModel>,
}

impl FeatureReducer {
    pub fn fit(spec: &PipelineSpec, table: &FeatureTable, tags: &[SourceTag], train: &[usize]) -> Result<Self> {
        let labels: Vec<Label> = train.iter().map(|&i| table.labels[i]).collect();
        let mut models = Vec::new();
        if spec.lda_components > 0 {
            let fit = |x: &Matrix| lda_fit(x, &labels, spec.lda_components, spec.lda_epsilon);
            match spec.lda_mode {
                LdaMode::PerSource => {
                    for &t in tags {
                        models.push(fit(&table.block(t)?.select_rows(train))?);
                    }
                }
                LdaMode::Joint => models.push(fit(&raw_features(table, tags, train)?)?),
            }
        }
        Ok(FeatureReducer {
            tags: tags.to_vec(),
            mode: spec.lda_mode,
            models,
        })
    }

    pub fn apply(&self, table: &FeatureTable, rows: &[usize]) -> Result<Matrix> {
        if self.models.is_empty() {
            return raw_features(table, &self.tags, rows);
        }
        match self.mode {
            LdaMode::PerSource => {
                let parts = self
                    .tags
                    .iter()
                    .zip(&self.models)
                    .map(|(t, m)| m.transform(&table.block(*t)?.select_rows(rows)))
                    .collect::<Result<Vec<_>>>()?;
                concat_columns(&parts)
            }
            LdaMode::Joint => self.models[0].transform(&raw_features(table, &self.tags, rows)?),
        }
    }

    /// File names for the fitted models, parallel to `models`.
    pub fn model_names(&self) -> Vec<String> {
        match self.mode {
            _ if self.models.is_empty() => Vec::new(),
            LdaMode::PerSource => self.tags.iter().map(|t| format!("lda_{}.csv", t)).collect(),
            LdaMode::Joint => vec!["lda_joint.csv".into()],
        }
    }
}

fn raw_features(table: &FeatureTable, tags: &[SourceTag], rows: &[usize]) -> Result<Matrix> {
    let parts = tags
        .iter()
        .map(|t| Ok(table.block(*t)?.select_rows(rows)))
        .collect::<Result<Vec<_>>>()?;
    concat_columns(&parts)
}

/// A trained back-end.
#[derive(Debug, Clone)]
pub enum FittedClassifier {
    Knn(KnnModel),
    Gnb(GaussianNbModel),
    Mlp(Box<TwoBranchMlp>),
}

impl FittedClassifier {
    /// Fits a back-end. Only the MLP looks at the validation rows.
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        kind: ClassifierKind,
        knn: KnnParams,
        mlp_cfg: &TrainingConfig,
        train_x: &Matrix,
        train_y: &[Label],
        val_x: &Matrix,
        val_y: &[Label],
        seed: u64,
    ) -> Result<(Self, Option<TrainingLog>)> {
        Ok(match kind {
            ClassifierKind::Knn => (
                FittedClassifier::Knn(KnnModel::fit(train_x.clone(), train_y.to_vec(), knn.k, knn.p)?),
                None,
            ),
            ClassifierKind::Gnb => (FittedClassifier::Gnb(GaussianNbModel::fit(train_x, train_y)?), None),
            ClassifierKind::Mlp => {
                let cfg = TrainingConfig {
                    seed,
                    ..mlp_cfg.clone()
                };
                let (model, log) = mlp::train(train_x, train_y, val_x, val_y, &cfg)?;
                (FittedClassifier::Mlp(Box::new(model)), Some(log))
            }
        })
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            FittedClassifier::Knn(_) => ClassifierKind::Knn,
            FittedClassifier::Gnb(_) => ClassifierKind::Gnb,
            FittedClassifier::Mlp(_) => ClassifierKind::Mlp,
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<Prediction>> {
        match self {
            FittedClassifier::Knn(m) => x.iter_rows().map(|r| m.predict(r)).collect(),
            FittedClassifier::Gnb(m) => x.iter_rows().map(|r| m.predict(r)).collect(),
            FittedClassifier::Mlp(m) => m.predict_batch(x),
        }
    }

    pub fn default_file_name(kind: ClassifierKind) -> &'static str {
        match kind {
            ClassifierKind::Knn => "model.knn",
            ClassifierKind::Gnb => "model.gnb.csv",
            ClassifierKind::Mlp => "model.mlp.bin",
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            FittedClassifier::Knn(m) => m.save(path),
            FittedClassifier::Gnb(m) => m.save(path),
            FittedClassifier::Mlp(m) => m.save(path),
        }
    }

    /// Loads any saved back-end, recognising the format from the file header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"knn,") {
            Ok(FittedClassifier::Knn(KnnModel::load(path)?))
        } else if bytes.starts_with(b"gnb,") {
            Ok(FittedClassifier::Gnb(GaussianNbModel::load(path)?))
        } else if bytes.starts_with(b"SPMLP") {
            Ok(FittedClassifier::Mlp(Box::new(TwoBranchMlp::load(path)?)))
        } else {
            Err(Error::BadCheckpoint(format!("{} is not a saved model", path.display())))
        }
    }
}

/// One fitted system (sources, reduction and back-end) on one fold.
#[derive(Debug, Clone)]
pub struct SystemRun {
    pub name: String,
    pub reducer: FeatureReducer,
    pub classifier: FittedClassifier,
    pub training_log: Option<TrainingLog>,
    /// Validation predictions, kept when fusion weights are tuned.
    pub val_predictions: Option<Vec<Prediction>>,
    pub test_predictions: Vec<Prediction>,
    pub report: EvalReport,
}

/// Everything produced on one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold_id: u32,
    pub seed: u64,
    pub test_clip_ids: Vec<String>,
    pub test_labels: Vec<Label>,
    pub systems: Vec<SystemRun>,
    /// Final decisions (fused under score fusion).
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
    pub val_sweep: Option<AlphaSweep>,
    pub val_tuned: Option<EvalReport>,
}

fn labels_at(table: &FeatureTable, rows: &[usize]) -> Vec<Label> {
    rows.iter().map(|&i| table.labels[i]).collect()
}

fn report_for(preds: &[Prediction], truth: &[Label], system: &str, fold_id: u32) -> Result<EvalReport> {
    let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    compute_metrics(&ConfusionMatrix::from_pairs(truth, &labels)?, system, Some(fold_id))
}

fn fused_predictions(a: &[Prediction], b: &[Prediction], alpha: f64) -> Result<Vec<Prediction>> {
    let sa: Vec<ScoreVector> = a.iter().map(|p| p.scores).collect();
    let sb: Vec<ScoreVector> = b.iter().map(|p| p.scores).collect();
    Ok(fuse_all(&sa, &sb, FusionConfig::new(alpha)?)?
        .into_iter()
        .map(|(label, scores)| Prediction { label, scores })
        .collect())
}

/// System names used in reports.
pub fn system_names(spec: &PipelineSpec) -> Vec<String> {
    match spec.fusion {
        FusionMode::Score => spec.sources.iter().map(|s| format!("{} [{}]", spec.name, s)).collect(),
        _ => vec![spec.name.clone()],
    }
}

pub fn val_tuned_name(spec: &PipelineSpec) -> String {
    format!("{} (val-tuned alpha)", spec.name)
}

pub fn oracle_tuned_name(spec: &PipelineSpec) -> String {
    format!("{} (oracle-tuned alpha)", spec.name)
}

/// Runs the configured chain on one fold with seed `spec.seed + fold_id`.
pub fn run_fold(
    spec: &PipelineSpec,
    manifest: &Manifest,
    table: &FeatureTable,
    fold: &FoldDefinition,
) -> Result<FoldOutcome> {
    let kind = spec.classifier_kind()?;
    let split = split_indices(manifest, fold)?;
    let seed = spec.seed.wrapping_add(fold.fold_id as u64);
    let train_y = labels_at(table, &split.train);
    let val_y = labels_at(table, &split.val);
    let test_y = labels_at(table, &split.test);
    let keep_val = spec.fusion == FusionMode::Score;

    let mut systems = Vec::new();
    for (tags, name) in spec.systems().iter().zip(system_names(spec)) {
        let reducer = FeatureReducer::fit(spec, table, tags, &split.train)?;
        let train_x = reducer.apply(table, &split.train)?;
        let val_x = reducer.apply(table, &split.val)?;
        let test_x = reducer.apply(table, &split.test)?;
        let (classifier, training_log) =
            FittedClassifier::fit(kind, spec.knn, &spec.mlp, &train_x, &train_y, &val_x, &val_y, seed)?;
        let test_predictions = classifier.predict(&test_x)?;
        let val_predictions = if keep_val { Some(classifier.predict(&val_x)?) } else { None };
        let report = report_for(&test_predictions, &test_y, &name, fold.fold_id)?;
        systems.push(SystemRun {
            name,
            reducer,
            classifier,
            training_log,
            val_predictions,
            test_predictions,
            report,
        });
    }

    let (predictions, report, val_sweep, val_tuned) = if spec.fusion == FusionMode::Score {
        let (a, b) = (&systems[0], &systems[1]);
        let preds = fused_predictions(&a.test_predictions, &b.test_predictions, spec.alpha)?;
        let report = report_for(&preds, &test_y, &spec.name, fold.fold_id)?;
        let scores = |p: &[Prediction]| p.iter().map(|p| p.scores).collect::<Vec<_>>();
        let sweep = sweep_alpha(
            &scores(a.val_predictions.as_deref().unwrap_or_default()),
            &scores(b.val_predictions.as_deref().unwrap_or_default()),
            &val_y,
            &default_alpha_grid(),
        )?;
        let tuned = fused_predictions(&a.test_predictions, &b.test_predictions, sweep.best_alpha)?;
        let tuned = report_for(&tuned, &test_y, &val_tuned_name(spec), fold.fold_id)?;
        (preds, report, Some(sweep), Some(tuned))
    } else {
        let s = &systems[0];
        (s.test_predictions.clone(), s.report.clone(), None, None)
    };

    Ok(FoldOutcome {
        fold_id: fold.fold_id,
        seed,
        test_clip_ids: split.test.iter().map(|&i| table.clip_ids[i].clone()).collect(),
        test_labels: test_y,
        systems,
        predictions,
        report,
        val_sweep,
        val_tuned,
    })
}

// ---------------------------------------------------------------------------
// cross-validation

/// Fusion weight chosen on the test folds themselves, reported as an upper
/// bound rather than a fair estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAlpha {
    /// `(alpha, fold-mean test UAR)` per grid point.
    pub points: Vec<(f64, f64)>,
    pub alpha: f64,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct CrossvalResult {
    pub spec: PipelineSpec,
    pub folds: Vec<FoldOutcome>,
    /// Main system first; under score fusion the two components, the
    /// val-tuned and the oracle-tuned fusion follow.
    pub summaries: Vec<AggregateReport>,
    pub oracle: Option<OracleAlpha>,
    pub feature_digests: BTreeMap<String, String>,
}

/// Runs every fold of `protocol`, up to `jobs` at a time. Results do not
/// depend on `jobs`.
pub fn crossval(spec: &PipelineSpec, manifest: &Manifest, protocol: &FoldProtocol, jobs: usize) -> Result<CrossvalResult> {
    spec.validate()?;
    if protocol.folds.is_empty() {
        return Err(Error::InvalidFolds("protocol defines no folds".into()));
    }
    let table = FeatureTable::load(manifest, &spec.sources, &spec.l2_normalize, spec.strict_shapes)?;
    let folds = run_folds(spec, manifest, &table, protocol, jobs.max(1))?;
    let expected = protocol.folds.len();

    let mut summaries = vec![aggregate(&folds.iter().map(|f| f.report.clone()).collect::<Vec<_>>(), expected)?];
    let mut oracle = None;
    if spec.fusion == FusionMode::Score {
        for s in 0..2 {
            let r: Vec<EvalReport> = folds.iter().map(|f| f.systems[s].report.clone()).collect();
            summaries.push(aggregate(&r, expected)?);
        }
        let r: Vec<EvalReport> = folds.iter().filter_map(|f| f.val_tuned.clone()).collect();
        summaries.push(aggregate(&r, expected)?);
        let o = oracle_alpha(spec, &folds)?;
        summaries.push(aggregate(&o.reports, expected)?);
        oracle = Some(o);
    }

    let mut feature_digests = BTreeMap::new();
    for &t in &spec.sources {
        feature_digests.insert(t.to_string(), table.digest(t)?);
    }
    Ok(CrossvalResult {
        spec: spec.clone(),
        folds,
        summaries,
        oracle,
        feature_digests,
    })
}

fn run_folds(
    spec: &PipelineSpec,
    manifest: &Manifest,
    table: &FeatureTable,
    protocol: &FoldProtocol,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    let n = protocol.folds.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FoldOutcome>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = run_fold(spec, manifest, table, &protocol.folds[i]);
                slots.lock().expect("fold worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("fold worker panicked")
        .into_iter()
        .map(|s| s.expect("every fold ran"))
        .collect()
}

/// Picks the weight with the best fold-mean test UAR (ties to the larger weight).
fn oracle_alpha(spec: &PipelineSpec, folds: &[FoldOutcome]) -> Result<OracleAlpha> {
    let grid = default_alpha_grid();
    let mut points = Vec::with_capacity(grid.len());
    for &alpha in &grid {
        let mut total = 0.0;
        for f in folds {
            let p = fused_predictions(&f.systems[0].test_predictions, &f.systems[1].test_predictions, alpha)?;
            total += report_for(&p, &f.test_labels, "oracle", f.fold_id)?.uar;
        }
        points.push((alpha, total / folds.len() as f64));
    }
    let best = points
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |b, p| if p.1 >= b.1 { p } else { b });
    let reports = folds
        .iter()
        .map(|f| {
            let p = fused_predictions(&f.systems[0].test_predictions, &f.systems[1].test_predictions, best.0)?;
            report_for(&p, &f.test_labels, &oracle_tuned_name(spec), f.fold_id)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleAlpha {
        points,
        alpha: best.0,
        reports,
    })
}

// ---------------------------------------------------------------------------
// artifacts

/// What is needed to rerun a cross-validation bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub tool_version: String,
    pub spec: PipelineSpec,
    pub seed: u64,
    /// SHA-256 of the input files (spec, manifest, folds), keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of the pooled features per source.
    pub features: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub systems: Vec<AggregateReport>,
    pub val_tuned_alpha: BTreeMap<u32, f64>,
    pub oracle_alpha: Option<OracleAlpha>,
}

impl Summary {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{:02x}", b);
        s
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn scores_file(ids: &[String], preds: &[Prediction]) -> ScoreFile {
    ScoreFile {
        scores: ids.iter().cloned().zip(preds.iter().map(|p| p.scores)).collect(),
    }
}

fn predictions_csv(ids: &[String], truth: &[Label], preds: &[Prediction]) -> String {
    let mut s = String::from("clip_id,label,predicted\n");
    for ((id, t), p) in ids.iter().zip(truth).zip(preds) {
        let _ = writeln!(s, "{},{},{}", id, t, p.label);
    }
    s
}

fn write_system(dir: &Path, fold: &FoldOutcome, sys: &SystemRun) -> Result<()> {
    create_dir(dir)?;
    for (m, name) in sys.reducer.models.iter().zip(sys.reducer.model_names()) {
        m.save(dir.join(name))?;
    }
    sys.classifier
        .save(dir.join(FittedClassifier::default_file_name(sys.classifier.kind())))?;
    if let Some(log) = &sys.training_log {
        write_text(&dir.join("training_log.csv"), &log.to_csv())?;
    }
    sys.report.save_json(dir.join("report.json"))?;
    write_text(&dir.join("confusion.csv"), &sys.report.confusion.to_csv())?;
    scores_file(&fold.test_clip_ids, &sys.test_predictions).save(dir.join("scores.csv"))?;
    write_text(
        &dir.join("predictions.csv"),
        &predictions_csv(&fold.test_clip_ids, &fold.test_labels, &sys.test_predictions),
    )
}

/// Writes `summary.md`, `summary.json`, `config_snapshot.json` and one
/// `fold_NN/` directory per fold with reports, scores and fitted models.
pub fn write_crossval(out: impl AsRef<Path>, result: &CrossvalResult, inputs: BTreeMap<String, String>) -> Result<()> {
    let out = out.as_ref();
    create_dir(out)?;
    for fold in &result.folds {
        let dir = out.join(format!("fold_{:02}", fold.fold_id));
        if result.spec.fusion == FusionMode::Score {
            create_dir(&dir)?;
            for (sys, sub) in fold.systems.iter().zip(["a", "b"]) {
                write_system(&dir.join(sub), fold, sys)?;
            }
            fold.report.save_json(dir.join("report.json"))?;
            write_text(&dir.join("confusion.csv"), &fold.report.confusion.to_csv())?;
            scores_file(&fold.test_clip_ids, &fold.predictions).save(dir.join("scores.csv"))?;
            write_text(
                &dir.join("predictions.csv"),
                &predictions_csv(&fold.test_clip_ids, &fold.test_labels, &fold.predictions),
            )?;
            if let Some(sweep) = &fold.val_sweep {
                let text = serde_json::to_string_pretty(sweep).expect("sweep serializes");
                write_text(&dir.join("alpha_sweep_val.json"), &(text + "\n"))?;
            }
        } else {
            write_system(&dir, fold, &fold.systems[0])?;
        }
    }

    let mut md = render_report(&result.summaries);
    if let Some(o) = &result.oracle {
        let _ = writeln!(md, "\noracle-tuned alpha: {:.1}", o.alpha);
    }
    write_text(&out.join("summary.md"), &md)?;

    let summary = Summary {
        systems: result.summaries.clone(),
        val_tuned_alpha: result
            .folds
            .iter()
            .filter_map(|f| f.val_sweep.as_ref().map(|s| (f.fold_id, s.best_alpha)))
            .collect(),
        oracle_alpha: result.oracle.clone(),
    };
    write_text(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;

    let snapshot = ConfigSnapshot {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        spec: result.spec.clone(),
        seed: result.spec.seed,
        inputs,
        features: result.feature_digests.clone(),
    };
    write_text(
        &out.join("config_snapshot.json"),
        &(serde_json::to_string_pretty(&snapshot).expect("snapshot serializes") + "\n"),
    )
}

/// Output locations written by [`write_crossval`] for one fold.
pub fn fold_dir(out: impl AsRef<Path>, fold_id: u32) -> PathBuf {
    out.as_ref().join(format!("fold_{:02}", fold_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "W2V2 L11 + LDA + KNN"
sources = ["w2v2.L11"]
classifier = "knn"
"#;

    #[test]
    fn spec_defaults() {
        let s = PipelineSpec::from_toml(MINIMAL).unwrap();
        assert_eq!(s.lda_components, 4);
        assert_eq!(s.fusion, FusionMode::None);
        assert_eq!(s.knn, KnnParams { k: 5, p: 2.0 });
        assert_eq!(s.mlp, TrainingConfig::default());
        assert_eq!(s.alpha, 0.9);
        assert!(s.strict_shapes);
        assert_eq!(PipelineSpec::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn spec_errors() {
        let unknown = MINIMAL.replace("\"knn\"", "\"svm\"");
        assert!(matches!(PipelineSpec::from_toml(&unknown), Err(Error::UnknownClassifier(_))));
        let too_many = format!("{}lda_components = 5\n", MINIMAL);
        assert!(matches!(PipelineSpec::from_toml(&too_many), Err(Error::Config(_))));
        let fused_one = format!("{}fusion = \"score\"\n", MINIMAL);
        assert!(matches!(PipelineSpec::from_toml(&fused_one), Err(Error::Config(_))));
        let typo = format!("{}clasifier = \"gnb\"\n", MINIMAL);
        assert!(matches!(PipelineSpec::from_toml(&typo), Err(Error::Config(_))));
        let bad_tag = MINIMAL.replace("w2v2.L11", "w2v2.L14");
        assert!(PipelineSpec::from_toml(&bad_tag).is_err());
    }

    #[test]
    fn score_fusion_spec() {
        let text = r#"
name = "fused"
sources = ["w2v2.L11", "ecapa"]
fusion = "score"
classifier = "gnb"
alpha = 0.9
l2_normalize = ["ecapa"]
"#;
        let s = PipelineSpec::from_toml(text).unwrap();
        assert_eq!(s.systems().len(), 2);
        assert_eq!(system_names(&s), vec!["fused [w2v2.L11]", "fused [ecapa]"]);
    }

    #[test]
    fn feature_set_round_trip() {
        let fs = FeatureSet {
            clip_ids: vec!["a".into(), "b".into()],
            labels: vec![Label::Block, Label::Fluent],
            features: Matrix::from_rows(&[[0.1, -2.5], [1e-300, 3.0]]).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fs.save(&p).unwrap();
        assert_eq!(FeatureSet::load(&p).unwrap(), fs);
    }

    #[test]
    fn hex_digest() {
        assert_eq!(hex(&[0, 15, 255]), "000fff");
    }
}
