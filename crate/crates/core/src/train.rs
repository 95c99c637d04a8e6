//! Full-batch training: adaptive-moment gradient descent with per-group
//! learning rates and weight decays (filter coefficients vs. network
//! weights), seeded uniform splits, early stopping on validation accuracy,
//! and argmax evaluation with a lowest-class-id tie rule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamTag;
use crate::graph::LabelVector;
use crate::matrix::Matrix;
use crate::model::{GraphContext, LossWeights, NodeMoe};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} fraction {v} outside [0, 1]")));
            }
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        if self.train == 0.0 {
            return Err(Error::invalid("training fraction must be positive"));
        }
        Ok(())
    }
}

impl Default for SplitFractions {
    /// 60/20/20.
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Disjoint train/val/test node index sets covering all nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Non-fatal observations, e.g. a class with no training nodes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Uniform random permutation split (unstratified), deterministic per seed.
pub fn make_split(
    n: usize,
    labels: &LabelVector,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<Split> {
    fractions.validate()?;
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} nodes",
            labels.len()
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let n_train = (n as f64 * fractions.train).floor() as usize;
    let n_val = (n as f64 * fractions.val).floor() as usize;
    let train = perm[..n_train].to_vec();
    let val = perm[n_train..n_train + n_val].to_vec();
    let test = perm[n_train + n_val..].to_vec();

    let mut warnings = Vec::new();
    let mut seen = vec![false; labels.num_classes()];
    for &i in &train {
        seen[labels.labels()[i]] = true;
    }
    for (class, &present) in seen.iter().enumerate() {
        if !present {
            warnings.push(format!("class {class} has no training nodes"));
        }
    }
    Ok(Split {
        train,
        val,
        test,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Early stopping: stop after this many epochs without a new best
    /// validation accuracy.
    pub patience: usize,
    pub lr_filter: f64,
    pub lr_network: f64,
    pub wd_filter: f64,
    pub wd_network: f64,
    pub dropout: f64,
    /// Filter smoothing weight.
    pub gamma: f64,
    /// Load balancing weight.
    pub beta: f64,
    pub seed: u64,
    pub fractions: SplitFractions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 1000,
            patience: 100,
            lr_filter: 0.05,
            lr_network: 0.01,
            wd_filter: 0.0,
            wd_network: 5e-4,
            dropout: 0.0,
            gamma: 0.1,
            beta: 0.01,
            seed: 0,
            fractions: SplitFractions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::invalid("need at least one epoch"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid("patience must not exceed max_epochs"));
        }
        for (name, v) in [
            ("lr_filter", self.lr_filter),
            ("lr_network", self.lr_network),
            ("wd_filter", self.wd_filter),
            ("wd_network", self.wd_network),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        LossWeights::new(self.gamma, self.beta)?;
        self.fractions.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub smoothing_loss: f64,
    pub balance_loss: f64,
}

pub struct TrainOutcome {
    /// The model with the best-validation parameters restored.
    pub model: NodeMoe,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Adam with bias correction; per-parameter-group learning rate and weight
/// decay selected by the parameter's tag. Weight decay enters through the
/// gradient, so a zero learning rate freezes its group exactly.
struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut NodeMoe, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let store = model.store_mut();
        for idx in 0..store.len() {
            let (lr, wd) = match store.get(idx).tag {
                ParamTag::FilterCoeff => (cfg.lr_filter, cfg.wd_filter),
                ParamTag::NetworkWeight => (cfg.lr_network, cfg.wd_network),
            };
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(idx);
            let n = p.value.data().len();
            for e in 0..n {
                let g = p.grad.data()[e] + wd * p.value.data()[e];
                let m = self.beta1 * self.m[idx].data()[e] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[idx].data()[e] + (1.0 - self.beta2) * g * g;
                self.m[idx].data_mut()[e] = m;
                self.v[idx].data_mut()[e] = v;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                p.value.data_mut()[e] -= update;
            }
        }
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn accuracy_of(combined: &Matrix, labels: &LabelVector, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let correct = idx
        .iter()
        .filter(|&&i| argmax_lowest(combined.row(i)) == labels.labels()[i])
        .count();
    correct as f64 / idx.len() as f64
}

/// Train to convergence or patience exhaustion; returns the model restored
/// to the parameters of the best validation epoch. Accuracy is measured
/// before each update step, so the returned checkpoint is exactly the one
/// that was scored.
pub fn train(
    mut model: NodeMoe,
    ctx: &GraphContext,
    labels: &LabelVector,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let lw = cfg.loss_weights();
    let shapes: Vec<(usize, usize)> = model
        .store()
        .iter()
        .map(|p| (p.value.rows(), p.value.cols()))
        .collect();
    let mut adam = Adam::new(&shapes);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.store().values_snapshot();
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        // Forward in training mode. With dropout off this single pass also
        // serves as the evaluation forward for the current parameters;
        // otherwise run a separate deterministic pass for scoring.
        let mut fp = model.forward(
            model.store(),
            ctx,
            cfg.dropout,
            if cfg.dropout > 0.0 {
                Some(&mut dropout_rng)
            } else {
                None
            },
        )?;
        let loss_nodes = model.attach_loss(&mut fp, labels, &split.train, &lw)?;
        let train_loss = fp.tape.scalar_value(loss_nodes.total);
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss {train_loss} at epoch {epoch}"
            )));
        }
        let smoothing_loss = fp.tape.scalar_value(loss_nodes.smoothing);
        let balance_loss = fp.tape.scalar_value(loss_nodes.balance);

        let (train_acc, val_acc) = if cfg.dropout > 0.0 {
            let eval = model.predict(ctx)?;
            (
                accuracy_of(&eval.combined, labels, &split.train),
                accuracy_of(&eval.combined, labels, &split.val),
            )
        } else {
            let combined = fp.tape.value(fp.combined);
            (
                accuracy_of(combined, labels, &split.train),
                accuracy_of(combined, labels, &split.val),
            )
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_acc,
            smoothing_loss,
            balance_loss,
        });

        // Track the best validation accuracy (falls back to train accuracy
        // when there is no validation split).
        let score = if split.val.is_empty() { train_acc } else { val_acc };
        if score > best_val {
            best_val = score;
            best_epoch = epoch;
            best_params = model.store().values_snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }

        // Update step.
        fp.tape.backward(loss_nodes.total)?;
        model.store_mut().zero_grads();
        fp.tape.accumulate_param_grads(model.store_mut());
        adam.step(&mut model, cfg);
    }

    model.store_mut().restore(&best_params);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_acc: best_val,
    })
}

/// Argmax accuracy on an index set plus per-node correctness flags; exact
/// logit ties resolve to the lowest class id.
pub fn evaluate(
    model: &NodeMoe,
    ctx: &GraphContext,
    labels: &LabelVector,
    idx: &[usize],
) -> Result<(f64, Vec<bool>)> {
    let pred = model.predict(ctx)?;
    let flags: Vec<bool> = idx
        .iter()
        .map(|&i| argmax_lowest(pred.combined.row(i)) == labels.labels()[i])
        .collect();
    let acc = if flags.is_empty() {
        f64::NAN
    } else {
        flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
    };
    Ok((acc, flags))
}

/// History CSV: epoch, train_loss, train_acc, val_acc, smoothing_loss,
/// balance_loss.
pub fn write_history_csv(history: &[EpochStats], out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "epoch,train_loss,train_acc,val_acc,smoothing_loss,balance_loss"
    )?;
    for h in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            h.epoch, h.train_loss, h.train_acc, h.val_acc, h.smoothing_loss, h.balance_loss
        )?;
    }
    Ok(())
}
