//! Two-branch MLP back-end.
//!
//! The fluent branch separates fluent clips from stuttered ones (all four
//! disfluency classes share one pseudo-label); the disfluent branch types the
//! disfluency over five outputs, with fluent clips contributing zero loss.
//! Each branch is three fully connected layers, each followed by ReLU and
//! batch normalization, with inverted dropout after the first two, and a
//! softmax over the last layer. At inference the fluent branch decides
//! fluent vs stutter and the disfluent branch names the type.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifiers::{Prediction, ScoreKind, ScoreVector};
use crate::error::{Error, Result};
use crate::label::{Label, LABELS, NUM_CLASSES};
use crate::numerics::{Matrix, SeededRng};

/// Index of the fluent pseudo-class in the fluent branch output.
pub const FLUENT_OUTPUT: usize = 0;
/// Index of the stutter pseudo-class in the fluent branch output.
pub const STUTTER_OUTPUT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 128,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            patience: 7,
            max_epochs: 200,
            hidden: [64, 32],
            dropout: 0.2,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("mlp: {}", what)));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) {
            return bad("learning_rate and adam_epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return bad("patience and max_epochs must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_epsilon > 0.0) {
            return bad("batch-norm momentum must lie in (0, 1] and epsilon be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// layers

/// Fully connected layer followed by ReLU, batch norm and (optionally) dropout.
#[derive(Debug, Clone, PartialEq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    /// `fan_in × fan_out`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    dropout: f64,
}

struct DenseCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mask: Option<Vec<f64>>,
}

struct DenseGrads {
    weight: Vec<f64>,
    bias: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl Dense {
    fn new(fan_in: usize, fan_out: usize, dropout: f64, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            fan_in,
            fan_out,
            weight: (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect(),
            bias: (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect(),
            gamma: vec![1.0; fan_out],
            beta: vec![0.0; fan_out],
            running_mean: vec![0.0; fan_out],
            running_var: vec![1.0; fan_out],
            dropout,
        }
    }

    /// `relu(x W + b)` for a row-major `batch × fan_in` input.
    fn affine_relu(&self, x: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let (n_in, n_out) = (self.fan_in, self.fan_out);
        let mut pre = vec![0.0; batch * n_out];
        for r in 0..batch {
            let z = &mut pre[r * n_out..(r + 1) * n_out];
            z.copy_from_slice(&self.bias);
            for (k, &xv) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (zv, &w) in z.iter_mut().zip(&self.weight[k * n_out..(k + 1) * n_out]) {
                    *zv += xv * w;
                }
            }
        }
        let act = pre.iter().map(|&z| z.max(0.0)).collect();
        (pre, act)
    }

    fn forward_train(
        &mut self,
        x: &[f64],
        batch: usize,
        momentum: f64,
        eps: f64,
        rng: &mut SeededRng,
    ) -> (Vec<f64>, DenseCache) {
        let n_out = self.fan_out;
        let (pre, act) = self.affine_relu(x, batch);
        let b = batch as f64;
        let mut mean = vec![0.0; n_out];
        for r in 0..batch {
            for (m, a) in mean.iter_mut().zip(&act[r * n_out..(r + 1) * n_out]) {
                *m += a;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b);
        let mut var = vec![0.0; n_out];
        for r in 0..batch {
            for ((v, a), m) in var.iter_mut().zip(&act[r * n_out..(r + 1) * n_out]).zip(&mean) {
                *v += (a - m) * (a - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= b);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = vec![0.0; batch * n_out];
        let mut out = vec![0.0; batch * n_out];
        for r in 0..batch {
            for j in 0..n_out {
                let i = r * n_out + j;
                xhat[i] = (act[i] - mean[j]) * inv_std[j];
                out[i] = self.gamma[j] * xhat[i] + self.beta[j];
            }
        }

        let unbias = if batch > 1 { b / (b - 1.0) } else { 1.0 };
        for j in 0..n_out {
            self.running_mean[j] = (1.0 - momentum) * self.running_mean[j] + momentum * mean[j];
            self.running_var[j] = (1.0 - momentum) * self.running_var[j] + momentum * var[j] * unbias;
        }

        let mask = (self.dropout > 0.0).then(|| {
            let keep = 1.0 - self.dropout;
            let m: Vec<f64> = (0..batch * n_out)
                .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            out.iter_mut().zip(&m).for_each(|(o, k)| *o *= k);
            m
        });

        (
            out,
            DenseCache {
                input: x.to_vec(),
                pre,
                xhat,
                inv_std,
                mask,
            },
        )
    }

    fn forward_eval(&self, x: &[f64], batch: usize, eps: f64) -> Vec<f64> {
        let n_out = self.fan_out;
        let (_, mut act) = self.affine_relu(x, batch);
        for r in 0..batch {
            for j in 0..n_out {
                let a = &mut act[r * n_out + j];
                *a = self.gamma[j] * (*a - self.running_mean[j]) / (self.running_var[j] + eps).sqrt()
                    + self.beta[j];
            }
        }
        act
    }

    fn backward(&self, cache: &DenseCache, dout: &[f64], batch: usize) -> (Vec<f64>, DenseGrads) {
        let (n_in, n_out) = (self.fan_in, self.fan_out);
        let b = batch as f64;
        let dy: Vec<f64> = match &cache.mask {
            Some(m) => dout.iter().zip(m).map(|(d, k)| d * k).collect(),
            None => dout.to_vec(),
        };

        let mut dgamma = vec![0.0; n_out];
        let mut dbeta = vec![0.0; n_out];
        for r in 0..batch {
            for j in 0..n_out {
                let i = r * n_out + j;
                dgamma[j] += dy[i] * cache.xhat[i];
                dbeta[j] += dy[i];
            }
        }
        // d(act) = inv_std/B * (B*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), dxhat = dy*gamma
        let mut dpre = vec![0.0; batch * n_out];
        for r in 0..batch {
            for j in 0..n_out {
                let i = r * n_out + j;
                if cache.pre[i] <= 0.0 {
                    continue;
                }
                let g = self.gamma[j];
                let dxhat = dy[i] * g;
                let sum_dxhat = dbeta[j] * g;
                let sum_dxhat_xhat = dgamma[j] * g;
                dpre[i] = cache.inv_std[j] / b * (b * dxhat - sum_dxhat - cache.xhat[i] * sum_dxhat_xhat);
            }
        }

        let mut dweight = vec![0.0; n_in * n_out];
        let mut dbias = vec![0.0; n_out];
        let mut dx = vec![0.0; batch * n_in];
        for r in 0..batch {
            let dz = &dpre[r * n_out..(r + 1) * n_out];
            for (db, d) in dbias.iter_mut().zip(dz) {
                *db += d;
            }
            let xr = &cache.input[r * n_in..(r + 1) * n_in];
            let dxr = &mut dx[r * n_in..(r + 1) * n_in];
            for k in 0..n_in {
                let w_row = &self.weight[k * n_out..(k + 1) * n_out];
                let dw_row = &mut dweight[k * n_out..(k + 1) * n_out];
                let xv = xr[k];
                let mut acc = 0.0;
                for j in 0..n_out {
                    dw_row[j] += xv * dz[j];
                    acc += dz[j] * w_row[j];
                }
                dxr[k] = acc;
            }
        }
        (
            dx,
            DenseGrads {
                weight: dweight,
                bias: dbias,
                gamma: dgamma,
                beta: dbeta,
            },
        )
    }
}

/// One branch: `input → h1 → h2 → outputs`, softmax on top.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchNet {
    layers: Vec<Dense>,
}

impl BranchNet {
    pub fn new(input: usize, hidden: [usize; 2], outputs: usize, dropout: f64, rng: &mut SeededRng) -> Self {
        BranchNet {
            layers: vec![
                Dense::new(input, hidden[0], dropout, rng),
                Dense::new(hidden[0], hidden[1], dropout, rng),
                Dense::new(hidden[1], outputs, 0.0, rng),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn outputs(&self) -> usize {
        self.layers[2].fan_out
    }

    fn forward_train(
        &mut self,
        x: &[f64],
        batch: usize,
        momentum: f64,
        eps: f64,
        rng: &mut SeededRng,
    ) -> (Vec<f64>, Vec<DenseCache>) {
        let mut caches = Vec::with_capacity(3);
        let mut h = x.to_vec();
        for layer in &mut self.layers {
            let (out, cache) = layer.forward_train(&h, batch, momentum, eps, rng);
            caches.push(cache);
            h = out;
        }
        softmax_rows(&mut h, self.outputs());
        (h, caches)
    }

    fn forward_eval(&self, x: &[f64], batch: usize, eps: f64) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward_eval(&h, batch, eps);
        }
        softmax_rows(&mut h, self.outputs());
        h
    }

    /// Gradients in [`BranchNet::tensors`] order, given d(loss)/d(logits).
    fn backward(&self, caches: &[DenseCache], dlogits: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut per_layer = Vec::with_capacity(3);
        let mut d = dlogits.to_vec();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (dx, g) = layer.backward(cache, &d, batch);
            per_layer.push(g);
            d = dx;
        }
        per_layer
            .into_iter()
            .rev()
            .flat_map(|g| [g.weight, g.bias, g.gamma, g.beta])
            .collect()
    }

    /// Trainable tensors: per layer weight, bias, gamma, beta.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight[..], &l.bias[..], &l.gamma[..], &l.beta[..]])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias, &mut l.gamma, &mut l.beta])
            .collect()
    }

    fn running_stats(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.layers.iter().map(|l| (&l.running_mean[..], &l.running_var[..]))
    }
}

fn softmax_rows(v: &mut [f64], width: usize) {
    for row in v.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
}

// ---------------------------------------------------------------------------
// model

/// Output of both branches for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchProbs {
    /// `B×2`: fluent, stutter.
    pub fluent: Matrix,
    /// `B×5` in label order.
    pub disfluent: Matrix,
}

pub enum Mode<'a> {
    Train(&'a mut SeededRng),
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoBranchMlp {
    pub fluent_branch: BranchNet,
    pub disfluent_branch: BranchNet,
    pub config: TrainingConfig,
    /// Running statistics have been updated at least once.
    bn_ready: bool,
    /// Produced by [`train`] or loaded from a checkpoint.
    fitted: bool,
}

/// Fluent, disfluent and total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub fluent: f64,
    pub disfluent: f64,
    pub total: f64,
}

impl TwoBranchMlp {
    pub fn new(input_dim: usize, config: &TrainingConfig, rng: &mut SeededRng) -> Self {
        TwoBranchMlp {
            fluent_branch: BranchNet::new(input_dim, config.hidden, 2, config.dropout, rng),
            disfluent_branch: BranchNet::new(input_dim, config.hidden, NUM_CLASSES, config.dropout, rng),
            config: config.clone(),
            bn_ready: false,
            fitted: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fluent_branch.input_dim()
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode<'_>) -> Result<BranchProbs> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train(rng) => self.forward_train(x, rng).map(|(p, _)| p),
        }
    }

    /// Inference pass with running batch-norm statistics and no dropout.
    pub fn forward_eval(&self, x: &Matrix) -> Result<BranchProbs> {
        self.check_input(x)?;
        if !self.bn_ready {
            return Err(Error::UnfittedBatchNorm);
        }
        let eps = self.config.bn_epsilon;
        let b = x.rows();
        Ok(BranchProbs {
            fluent: Matrix::from_raw(b, 2, self.fluent_branch.forward_eval(x.data(), b, eps)),
            disfluent: Matrix::from_raw(b, NUM_CLASSES, self.disfluent_branch.forward_eval(x.data(), b, eps)),
        })
    }

    fn forward_train(&mut self, x: &Matrix, rng: &mut SeededRng) -> Result<(BranchProbs, [Vec<DenseCache>; 2])> {
        self.check_input(x)?;
        let (m, eps, b) = (self.config.bn_momentum, self.config.bn_epsilon, x.rows());
        let (fp, fc) = self.fluent_branch.forward_train(x.data(), b, m, eps, rng);
        let (dp, dc) = self.disfluent_branch.forward_train(x.data(), b, m, eps, rng);
        self.bn_ready = true;
        Ok((
            BranchProbs {
                fluent: Matrix::from_raw(b, 2, fp),
                disfluent: Matrix::from_raw(b, NUM_CLASSES, dp),
            },
            [fc, dc],
        ))
    }

    /// Train-mode forward and backward pass. Gradients follow [`TwoBranchMlp::tensors`].
    pub fn loss_and_gradients(
        &mut self,
        x: &Matrix,
        labels: &[Label],
        rng: &mut SeededRng,
    ) -> Result<(LossParts, Vec<Vec<f64>>)> {
        let (probs, [fc, dc]) = self.forward_train(x, rng)?;
        let loss = compute_loss(&probs.fluent, &probs.disfluent, labels)?;
        let (df, dd) = loss_logit_gradients(&probs, labels);
        let b = x.rows();
        let mut grads = self.fluent_branch.backward(&fc, &df, b);
        grads.extend(self.disfluent_branch.backward(&dc, &dd, b));
        Ok((loss, grads))
    }

    /// Fluent branch tensors followed by disfluent branch tensors.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.fluent_branch.tensors();
        t.extend(self.disfluent_branch.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t = self.fluent_branch.tensors_mut();
        t.extend(self.disfluent_branch.tensors_mut());
        t
    }

    /// Number of leading tensors that belong to the fluent branch.
    pub fn fluent_tensor_count(&self) -> usize {
        self.fluent_branch.tensors().len()
    }

    /// Fluent branch decides fluent vs stutter; otherwise the disfluent
    /// branch picks among R, P, B, I.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let m = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&m)?.remove(0))
    }

    pub fn predict_batch(&self, x: &Matrix) -> Result<Vec<Prediction>> {
        if !self.fitted {
            return Err(Error::UnfittedModel);
        }
        let probs = self.forward_eval(x)?;
        Ok((0..x.rows())
            .map(|r| combine_branches(probs.fluent.row(r), probs.disfluent.row(r)))
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TwoBranchMlp::read_checkpoint(&mut &bytes[..])
    }
}

/// Assembles the decision and a five-class score vector from the two branches.
///
/// `p(F)` is the fluent output; each disfluency gets the stutter output times
/// its share of the disfluent branch mass over R, P, B, I.
pub fn combine_branches(fluent: &[f64], disfluent: &[f64]) -> Prediction {
    let p_fluent = fluent[FLUENT_OUTPUT];
    let p_stutter = fluent[STUTTER_OUTPUT];
    let disfluent_mass: f64 = disfluent[..NUM_CLASSES - 1].iter().sum();
    let mut values = [0.0; NUM_CLASSES];
    values[Label::Fluent.index()] = p_fluent;
    for c in 0..NUM_CLASSES - 1 {
        values[c] = if disfluent_mass > 0.0 {
            p_stutter * disfluent[c] / disfluent_mass
        } else {
            p_stutter / (NUM_CLASSES - 1) as f64
        };
    }
    let label = if p_fluent >= p_stutter {
        Label::Fluent
    } else {
        let mut best = 0;
        for c in 1..NUM_CLASSES - 1 {
            if disfluent[c] > disfluent[best] {
                best = c;
            }
        }
        LABELS[best]
    };
    Prediction {
        label,
        scores: ScoreVector::new(values, ScoreKind::Posterior),
    }
}

/// Cross-entropy of both branches.
///
/// The fluent loss averages over the whole batch against the fluent/stutter
/// pseudo-labels. The disfluent loss averages over non-fluent samples only and
/// is exactly zero when the batch holds no stuttered clip.
pub fn compute_loss(fluent_probs: &Matrix, disfluent_probs: &Matrix, labels: &[Label]) -> Result<LossParts> {
    let b = labels.len();
    if fluent_probs.shape() != (b, 2) || disfluent_probs.shape() != (b, NUM_CLASSES) {
        return Err(Error::ShapeMismatch(format!(
            "loss over {} labels with {:?} and {:?} probabilities",
            b,
            fluent_probs.shape(),
            disfluent_probs.shape()
        )));
    }
    if b == 0 {
        return Err(Error::EmptySet("batch"));
    }
    let mut lf = 0.0;
    let mut ld = 0.0;
    let mut n_dis = 0usize;
    for (r, l) in labels.iter().enumerate() {
        let target = if l.is_fluent() { FLUENT_OUTPUT } else { STUTTER_OUTPUT };
        lf -= fluent_probs[(r, target)].ln();
        if !l.is_fluent() {
            ld -= disfluent_probs[(r, l.index())].ln();
            n_dis += 1;
        }
    }
    let fluent = lf / b as f64;
    let disfluent = if n_dis > 0 { ld / n_dis as f64 } else { 0.0 };
    Ok(LossParts {
        fluent,
        disfluent,
        total: fluent + disfluent,
    })
}

/// d(loss)/d(logits) for both branches (softmax + cross-entropy).
fn loss_logit_gradients(probs: &BranchProbs, labels: &[Label]) -> (Vec<f64>, Vec<f64>) {
    let b = labels.len() as f64;
    let n_dis = labels.iter().filter(|l| !l.is_fluent()).count();
    let mut df = probs.fluent.data().to_vec();
    let mut dd = vec![0.0; labels.len() * NUM_CLASSES];
    for (r, l) in labels.iter().enumerate() {
        let target = if l.is_fluent() { FLUENT_OUTPUT } else { STUTTER_OUTPUT };
        df[r * 2 + target] -= 1.0;
        if !l.is_fluent() {
            let row = &mut dd[r * NUM_CLASSES..(r + 1) * NUM_CLASSES];
            row.copy_from_slice(probs.disfluent.row(r));
            row[l.index()] -= 1.0;
            row.iter_mut().for_each(|g| *g /= n_dis as f64);
        }
    }
    df.iter_mut().for_each(|g| *g /= b);
    (df, dd)
}

// ---------------------------------------------------------------------------
// optimizer and training loop

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], cfg: &TrainingConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Patience-based stopping on a monitored loss (lower is better).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// New best; snapshot the parameters.
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossParts,
    pub val_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_total: f64,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_f,L_d,L_tot,val_L_tot\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train.fluent, e.train.disfluent, e.train.total, e.val_total
            ));
        }
        s
    }
}

/// Splits a shuffled order into batches; a trailing batch of one joins the previous one.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Trains a freshly initialized model with Adam and early stopping on the
/// validation total loss, returning the parameters of the best epoch.
pub fn train(
    train_x: &Matrix,
    train_y: &[Label],
    val_x: &Matrix,
    val_y: &[Label],
    cfg: &TrainingConfig,
) -> Result<(TwoBranchMlp, TrainingLog)> {
    cfg.validate()?;
    if train_x.rows() != train_y.len() || val_x.rows() != val_y.len() {
        return Err(Error::LengthMismatch {
            left: train_x.rows(),
            right: train_y.len(),
        });
    }
    if train_x.rows() < 2 {
        return Err(Error::EmptySet("training"));
    }
    if val_x.rows() == 0 {
        return Err(Error::EmptySet("validation"));
    }
    if val_x.cols() != train_x.cols() {
        return Err(Error::DimMismatch {
            expected: train_x.cols(),
            found: val_x.cols(),
        });
    }

    let mut rng = SeededRng::new(cfg.seed);
    let mut model = TwoBranchMlp::new(train_x.cols(), cfg, &mut rng);
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes, cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train_x.rows()).collect();

    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let (mut lf, mut ld, mut n_dis) = (0.0, 0.0, 0usize);
        for batch in batches(&order, cfg.batch_size) {
            let x = train_x.select_rows(batch);
            let y: Vec<Label> = batch.iter().map(|&i| train_y[i]).collect();
            let (loss, grads) = model.loss_and_gradients(&x, &y, &mut rng)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!("training batch loss {:?}", loss),
                });
            }
            let nd = y.iter().filter(|l| !l.is_fluent()).count();
            lf += loss.fluent * y.len() as f64;
            ld += loss.disfluent * nd as f64;
            n_dis += nd;
            adam.step(model.tensors_mut(), &grads);
        }
        let lf = lf / train_x.rows() as f64;
        let ld = if n_dis > 0 { ld / n_dis as f64 } else { 0.0 };

        let vp = model.forward_eval(val_x)?;
        let val = compute_loss(&vp.fluent, &vp.disfluent, val_y)?;
        if !val.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("validation loss {:?}", val),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train: LossParts {
                fluent: lf,
                disfluent: ld,
                total: lf + ld,
            },
            val_total: val.total,
        });
        match stopper.update(epoch, val.total) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    log.best_epoch = stopper.best_epoch();
    log.best_val_total = stopper.best();
    best.fitted = true;
    Ok((best, log))
}

// ---------------------------------------------------------------------------
// checkpoint

const CHECKPOINT_MAGIC: &[u8; 8] = b"SPMLP\0\0\0";
const CHECKPOINT_VERSION: u32 = 1;

impl TwoBranchMlp {
    fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            self.input_dim() as u64,
            c.hidden[0] as u64,
            c.hidden[1] as u64,
            c.batch_size as u64,
            c.patience as u64,
            c.max_epochs as u64,
            c.seed,
            u64::from(self.bn_ready),
            u64::from(self.fitted),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [
            c.learning_rate,
            c.beta1,
            c.beta2,
            c.adam_epsilon,
            c.dropout,
            c.bn_momentum,
            c.bn_epsilon,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for branch in [&self.fluent_branch, &self.disfluent_branch] {
            let stats = branch.running_stats().flat_map(|(m, v)| [m, v]);
            for t in branch.tensors().into_iter().chain(stats) {
                w.write_all(&(t.len() as u64).to_le_bytes())?;
                for x in t {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::BadCheckpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
        if u32::from_le_bytes(u32b) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u64::from_le_bytes(b))
        };
        let mut ints = [0u64; 9];
        for v in &mut ints {
            *v = read_u64(r)?;
        }
        let mut floats = [0f64; 7];
        for v in &mut floats {
            *v = f64::from_bits(read_u64(r)?);
        }
        let config = TrainingConfig {
            hidden: [ints[1] as usize, ints[2] as usize],
            batch_size: ints[3] as usize,
            patience: ints[4] as usize,
            max_epochs: ints[5] as usize,
            seed: ints[6],
            learning_rate: floats[0],
            beta1: floats[1],
            beta2: floats[2],
            adam_epsilon: floats[3],
            dropout: floats[4],
            bn_momentum: floats[5],
            bn_epsilon: floats[6],
        };
        let mut rng = SeededRng::new(0);
        let mut model = TwoBranchMlp::new(ints[0] as usize, &config, &mut rng);
        model.bn_ready = ints[7] != 0;
        model.fitted = ints[8] != 0;
        for branch in [&mut model.fluent_branch, &mut model.disfluent_branch] {
            for layer in &mut branch.layers {
                for t in [
                    &mut layer.weight,
                    &mut layer.bias,
                    &mut layer.gamma,
                    &mut layer.beta,
                ] {
                    read_tensor(r, t)?;
                }
            }
            for layer in &mut branch.layers {
                read_tensor(r, &mut layer.running_mean)?;
                read_tensor(r, &mut layer.running_var)?;
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| bad("read error"))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }
}

// tensors are written in order, then running stats per layer
fn read_tensor<R: Read>(r: &mut R, into: &mut Vec<f64>) -> Result<()> {
    let bad = |m: &str| Error::BadCheckpoint(m.to_string());
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated tensor"))?;
    let n = u64::from_le_bytes(b) as usize;
    if n != into.len() {
        return Err(bad("tensor size does not match architecture"));
    }
    for v in into.iter_mut() {
        r.read_exact(&mut b).map_err(|_| bad("truncated tensor"))?;
        *v = f64::from_le_bytes(b);
        if !v.is_finite() {
            return Err(bad("non-finite parameter"));
        }
    }
    Ok(())
}
