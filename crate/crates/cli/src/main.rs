use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stutter_probe::classifiers::{DEFAULT_K, DEFAULT_MINKOWSKI_P};
use stutter_probe::dataset::{
    generate_folds, load_expected_counts, load_folds, load_manifest, verify_split, write_folds, FoldGeneration,
    Manifest, SourceTag, Subset,
};
use stutter_probe::eval::{compute_metrics, render_report, ConfusionMatrix};
use stutter_probe::features::l2_normalize;
use stutter_probe::fusion::{default_alpha_grid, sweep_alpha, FusionConfig, ScoreFile};
use stutter_probe::lda::{lda_fit, LdaModel, DEFAULT_COMPONENTS, DEFAULT_EPSILON};
use stutter_probe::mlp::TrainingConfig;
use stutter_probe::pipeline::{
    crossval, pool_source, sha256_file, write_crossval, ClassifierKind, FeatureSet, FittedClassifier, KnnParams,
    PipelineSpec, Summary,
};
use stutter_probe::{Error, Label, Matrix, Result};

#[derive(Parser)]
#[command(name = "stutter-probe", version, about = "Stuttering detection on pre-extracted speech embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a fold protocol against expected per-class counts.
    VerifySplit(VerifySplitArgs),
    /// Build a podcast-disjoint k-fold protocol from a manifest.
    MakeFolds(MakeFoldsArgs),
    /// Pool one embedding source into a feature file.
    Pool(PoolArgs),
    /// Fit an LDA projection on a feature file.
    FitLda(FitLdaArgs),
    /// Project a feature file through a fitted LDA.
    Transform(TransformArgs),
    /// Train a back-end on a feature file.
    Train(TrainArgs),
    /// Score a feature file with a trained back-end.
    Evaluate(EvaluateArgs),
    /// Combine two score files by weighted averaging.
    FuseScores(FuseArgs),
    /// Run a pipeline spec over every fold of a protocol.
    Crossval(CrossvalArgs),
    /// Render summary files from earlier runs as one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct VerifySplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    /// CSV with `fold,subset,R,P,B,I,F,total`.
    #[arg(long)]
    expected: PathBuf,
    /// Check one fold only.
    #[arg(long)]
    fold: Option<u32>,
}

#[derive(Args)]
struct MakeFoldsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SubsetSelection {
    /// Restrict to one subset of a fold (needs --folds and --fold).
    #[arg(long, requires_all = ["folds", "fold"])]
    subset: Option<Subset>,
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long)]
    fold: Option<u32>,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `ecapa` or `w2v2.L1` … `w2v2.L13`.
    #[arg(long)]
    source: SourceTag,
    #[arg(long)]
    l2_normalize: bool,
    /// Accept embeddings of any width.
    #[arg(long)]
    relaxed_shapes: bool,
    #[command(flatten)]
    selection: SubsetSelection,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitLdaArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = DEFAULT_COMPONENTS)]
    components: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    lda: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_classifier(s: &str) -> std::result::Result<ClassifierKind, String> {
    s.parse::<ClassifierKind>()
        .map_err(|_| format!("unknown classifier {:?} (expected knn, gnb or mlp)", s))
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_classifier)]
    classifier: ClassifierKind,
    #[arg(long)]
    features: PathBuf,
    /// Validation features for early stopping (required for mlp).
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_MINKOWSKI_P)]
    p: f64,
    /// TOML file with MLP training options.
    #[arg(long)]
    mlp_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the MLP training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "system")]
    system: String,
    #[arg(long)]
    fold: Option<u32>,
    /// Write per-clip scores.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the confusion matrix as CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// Scores of the system weighted by alpha.
    #[arg(long)]
    w2v2: PathBuf,
    /// Scores of the system weighted by 1 - alpha.
    #[arg(long)]
    ecapa: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Manifest giving the true labels, for metrics.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Also scan alpha over 0.0, 0.1, …, 1.0 (needs --manifest).
    #[arg(long, requires = "manifest")]
    sweep: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides the pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// `summary.json` files written by crossval.
    #[arg(long = "summary", required = true)]
    summaries: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    /// A check ran but did not pass.
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            let class = e.class();
            eprintln!(
                "stutter-probe: error class={} code={} kind={}: {}",
                class.as_str(),
                class.exit_code(),
                e.kind(),
                e
            );
            ExitCode::from(class.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<Status> {
    match cmd {
        Command::VerifySplit(a) => verify(a),
        Command::MakeFolds(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let protocol = generate_folds(
                &manifest,
                &FoldGeneration {
                    folds: a.folds,
                    seed: a.seed,
                },
            )?;
            write_folds(&a.out, &protocol)?;
            Ok(Status::Ok)
        }
        Command::Pool(a) => pool(a),
        Command::FitLda(a) => {
            let fs = FeatureSet::load(&a.features)?;
            lda_fit(&fs.features, &fs.labels, a.components, a.epsilon)?.save(&a.out)?;
            Ok(Status::Ok)
        }
        Command::Transform(a) => {
            let model = LdaModel::load(&a.lda)?;
            let fs = FeatureSet::load(&a.features)?;
            FeatureSet {
                features: model.transform(&fs.features)?,
                ..fs
            }
            .save(&a.out)?;
            Ok(Status::Ok)
        }
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::FuseScores(a) => fuse(a),
        Command::Crossval(a) => run_crossval(a),
        Command::Report(a) => {
            let mut systems = Vec::new();
            for p in &a.summaries {
                systems.extend(Summary::load(p)?.systems);
            }
            emit(&render_report(&systems), a.out.as_deref())?;
            Ok(Status::Ok)
        }
    }
}

fn verify(a: VerifySplitArgs) -> Result<Status> {
    let manifest = load_manifest(&a.manifest)?;
    let protocol = load_folds(&a.folds)?;
    let expected = load_expected_counts(&a.expected)?;
    let folds: Vec<_> = match a.fold {
        Some(id) => vec![protocol
            .fold(id)
            .ok_or_else(|| Error::InvalidFolds(format!("fold {} is not in {}", id, a.folds.display())))?],
        None => protocol.folds.iter().collect(),
    };
    let mut passed = true;
    for f in folds {
        let report = verify_split(&manifest, f, &expected.for_fold(f.fold_id));
        for line in report.lines() {
            println!("{}", line);
        }
        passed &= report.passed();
    }
    Ok(if passed { Status::Ok } else { Status::CheckFailed })
}

fn select(manifest: Manifest, sel: &SubsetSelection) -> Result<Manifest> {
    let (Some(subset), Some(folds), Some(fold)) = (sel.subset, &sel.folds, sel.fold) else {
        return Ok(manifest);
    };
    let protocol = load_folds(folds)?;
    let def = protocol
        .fold(fold)
        .ok_or_else(|| Error::InvalidFolds(format!("fold {} is not in {}", fold, folds.display())))?;
    let keep = manifest.indices_for(def.subset(subset));
    Manifest::from_records(keep.iter().map(|&i| manifest.records()[i].clone()).collect())
}

fn pool(a: PoolArgs) -> Result<Status> {
    let manifest = select(load_manifest(&a.manifest)?, &a.selection)?;
    let features = pool_source(&manifest, a.source, false, !a.relaxed_shapes)?;
    let features = if a.l2_normalize {
        let rows = features
            .iter_rows()
            .map(|r| {
                let v = stutter_probe::features::PooledVector::new(r.to_vec(), a.source);
                Ok(l2_normalize(&v)?.values)
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::new(features.rows(), features.cols(), rows.concat())?
    } else {
        features
    };
    FeatureSet {
        clip_ids: manifest.records().iter().map(|r| r.clip_id.clone()).collect(),
        labels: manifest.records().iter().map(|r| r.label).collect(),
        features,
    }
    .save(&a.out)?;
    Ok(Status::Ok)
}

fn train(a: TrainArgs) -> Result<Status> {
    let fs = FeatureSet::load(&a.features)?;
    let val = match &a.val {
        Some(p) => FeatureSet::load(p)?,
        None if a.classifier == ClassifierKind::Mlp => {
            return Err(Error::Config("mlp training needs --val for early stopping".into()))
        }
        None => fs.clone(),
    };
    let mlp_cfg = match &a.mlp_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainingConfig::from_toml(&text)?
        }
        None => TrainingConfig::default(),
    };
    let (model, log) = FittedClassifier::fit(
        a.classifier,
        KnnParams { k: a.k, p: a.p },
        &mlp_cfg,
        &fs.features,
        &fs.labels,
        &val.features,
        &val.labels,
        a.seed,
    )?;
    model.save(&a.out)?;
    if let (Some(path), Some(log)) = (&a.log, log) {
        std::fs::write(path, log.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(Status::Ok)
}

fn evaluate(a: EvaluateArgs) -> Result<Status> {
    let model = FittedClassifier::load(&a.model)?;
    let fs = FeatureSet::load(&a.features)?;
    let preds = model.predict(&fs.features)?;
    let predicted: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let report = compute_metrics(&ConfusionMatrix::from_pairs(&fs.labels, &predicted)?, &a.system, a.fold)?;
    if let Some(p) = &a.scores {
        ScoreFile {
            scores: fs.clip_ids.iter().cloned().zip(preds.iter().map(|p| p.scores)).collect(),
        }
        .save(p)?;
    }
    if let Some(p) = &a.report {
        report.save_json(p)?;
    }
    if let Some(p) = &a.confusion {
        std::fs::write(p, report.confusion.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    println!("{}", report.to_json());
    Ok(Status::Ok)
}

fn fuse(a: FuseArgs) -> Result<Status> {
    let first = ScoreFile::load(&a.w2v2)?;
    let second = ScoreFile::load(&a.ecapa)?;
    let (fused, labels) = first.fuse(&second, FusionConfig::new(a.alpha)?)?;
    fused.save(&a.out)?;
    if let Some(m) = &a.manifest {
        let manifest = load_manifest(m)?;
        let mut truth = Vec::with_capacity(labels.len());
        for id in labels.keys() {
            let rec = manifest
                .get(id)
                .ok_or_else(|| Error::MissingEmbedding {
                    clip_id: id.clone(),
                    tag: "manifest".into(),
                })?;
            truth.push(rec.label);
        }
        let predicted: Vec<Label> = labels.values().copied().collect();
        let report = compute_metrics(&ConfusionMatrix::from_pairs(&truth, &predicted)?, "fused", None)?;
        println!("{}", report.to_json());
        if a.sweep {
            let sa: Vec<_> = first.scores.values().copied().collect();
            let sb: Vec<_> = labels.keys().map(|k| second.scores[k]).collect();
            let sweep = sweep_alpha(&sa, &sb, &truth, &default_alpha_grid())?;
            println!("alpha,uar");
            for (alpha, uar) in &sweep.points {
                println!("{:.1},{}", alpha, uar);
            }
            println!("best alpha {:.1} (tuned on these labels)", sweep.best_alpha);
        }
    }
    Ok(Status::Ok)
}

fn run_crossval(a: CrossvalArgs) -> Result<Status> {
    let mut spec = PipelineSpec::load(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let manifest = load_manifest(&a.manifest)?;
    let protocol = load_folds(&a.folds)?;
    let result = crossval(&spec, &manifest, &protocol, a.jobs)?;
    let inputs: BTreeMap<String, String> = [("spec", &a.spec), ("manifest", &a.manifest), ("folds", &a.folds)]
        .into_iter()
        .map(|(k, p)| Ok((k.to_string(), sha256_file(p)?)))
        .collect::<Result<_>>()?;
    write_crossval(&a.out, &result, inputs)?;
    print!("{}", render_report(&result.summaries));
    Ok(Status::Ok)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}
