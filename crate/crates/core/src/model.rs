//! The node-wise mixture-of-experts model: per-expert Chebyshev spectral
//! filters over a learned feature transform, a GIN-style gating network fed
//! with neighborhood-smoothness features, soft or top-k combination, and the
//! composite training loss (task + filter smoothing + load balancing).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, ParamTag, Tape, VarId};
use crate::graph::{Graph, LabelVector, NormalizedOperator, OperatorKind};
use crate::matrix::Matrix;
use crate::spectral::{
    difference_matrix, grid_basis_matrix, init_coeffs, FilterCoeffs, InitStrategy, SmoothingGrid,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Chebyshev polynomial order K.
    pub order: usize,
    /// Hidden width of the 2-layer feature transform.
    pub hidden: usize,
    pub init: InitStrategy,
    pub alpha: f64,
}

impl ExpertConfig {
    pub fn new(order: usize, hidden: usize, init: InitStrategy, alpha: f64) -> Self {
        ExpertConfig {
            order,
            hidden,
            init,
            alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Every expert contributes, weighted by a full softmax.
    Soft,
    /// Only the k largest gate logits survive; the softmax renormalizes over
    /// them and the rest contribute nothing (and receive no gradient).
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Hidden width of the two GIN-style message-passing layers.
    pub hidden: usize,
    pub mode: GateMode,
    /// GIN self-weight: aggregation is (1 + epsilon) h_i + sum_{j in N(i)} h_j.
    pub epsilon: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            hidden: 32,
            mode: GateMode::Soft,
            epsilon: 0.0,
        }
    }
}

/// Weights of the auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Filter smoothing weight.
    pub gamma: f64,
    /// Load balancing weight.
    pub beta: f64,
}

impl LossWeights {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        if gamma < 0.0 || beta < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(LossWeights { gamma, beta })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub num_classes: usize,
    pub experts: Vec<ExpertConfig>,
    pub gate: GateConfig,
    /// Number of segments of the uniform smoothing grid on [0, 2].
    pub grid_segments: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 {
            return Err(Error::invalid("in_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.experts.is_empty() {
            return Err(Error::invalid("need at least one expert"));
        }
        for e in &self.experts {
            if e.order < 1 {
                return Err(Error::invalid("expert order must be at least 1"));
            }
            if e.hidden == 0 {
                return Err(Error::invalid("expert hidden width must be positive"));
            }
        }
        // Differentiated initialization: with few experts the strategies must
        // be pairwise distinct or the gate cannot tell them apart at the
        // start of training.
        let m = self.experts.len();
        if (2..=3).contains(&m) {
            for i in 0..m {
                for j in (i + 1)..m {
                    if self.experts[i].init == self.experts[j].init {
                        return Err(Error::invalid(
                            "expert init strategies must be pairwise distinct for m <= 3",
                        ));
                    }
                }
            }
        }
        if m >= 2 {
            if self.gate.hidden == 0 {
                return Err(Error::invalid("gate hidden width must be positive"));
            }
            if let GateMode::TopK(k) = self.gate.mode {
                if k == 0 || k > m {
                    return Err(Error::invalid(format!(
                        "top-k gating needs 1 <= k <= {m}, got {k}"
                    )));
                }
            }
        }
        if self.grid_segments == 0 {
            return Err(Error::invalid("smoothing grid needs at least one segment"));
        }
        Ok(())
    }
}

/// Per-node expert weights produced by the gate. Rows are non-negative and
/// sum to 1; in top-k mode at most k entries per row are non-zero.
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub weights: Matrix,
}

impl GateOutput {
    pub fn validate(&self, mode: Option<GateMode>) -> Result<()> {
        for i in 0..self.weights.rows() {
            let row = self.weights.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("gate row {i} sums to {sum}")));
            }
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::invalid(format!("gate row {i} has negative weight")));
            }
        }
        if let Some(GateMode::TopK(k)) = mode {
            if self.max_nonzeros_per_row() > k {
                return Err(Error::invalid("top-k gate row exceeds k non-zeros"));
            }
        }
        Ok(())
    }

    /// Sparsity audit: the largest number of non-zero entries in any row.
    pub fn max_nonzeros_per_row(&self) -> usize {
        (0..self.weights.rows())
            .map(|i| self.weights.row(i).iter().filter(|&&w| w != 0.0).count())
            .max()
            .unwrap_or(0)
    }
}

/// Gate input: the raw features next to first- and second-hop smoothness
/// residuals, `[X, |AX - X|, |A^2 X - X|]` with A the symmetric normalized
/// adjacency. A node whose feature equals its degree-weighted neighborhood
/// mean contributes a zero middle block; isolated nodes see |x_i| in both
/// residual blocks.
pub fn gate_input(g: &Graph, x: &Matrix) -> Result<Matrix> {
    let op = NormalizedOperator::new(Arc::new(g.clone()), OperatorKind::SymAdj);
    gate_input_with(&op, x)
}

fn gate_input_with(sym_adj: &NormalizedOperator, x: &Matrix) -> Result<Matrix> {
    let ax = sym_adj.apply(x)?;
    let a2x = sym_adj.apply(&ax)?;
    let one_hop = ax.sub(x)?.map(f64::abs);
    let two_hop = a2x.sub(x)?.map(f64::abs);
    let n = x.rows();
    let d = x.cols();
    let mut out = Matrix::zeros(n, 3 * d);
    for i in 0..n {
        let row = out.row_mut(i);
        row[..d].copy_from_slice(x.row(i));
        row[d..2 * d].copy_from_slice(one_hop.row(i));
        row[2 * d..].copy_from_slice(two_hop.row(i));
    }
    Ok(out)
}

/// Combine expert logits with gate weights and softmax the result:
/// `softmax(sum_o weights[i,o] * logits_o[i])` per node.
pub fn moe_forward(gate: &GateOutput, expert_logits: &[Matrix]) -> Result<Matrix> {
    if expert_logits.is_empty() {
        return Err(Error::invalid("no expert outputs"));
    }
    let n = expert_logits[0].rows();
    let c = expert_logits[0].cols();
    if gate.weights.rows() != n || gate.weights.cols() != expert_logits.len() {
        return Err(Error::shape(format!(
            "gate is {}x{}, expected {}x{}",
            gate.weights.rows(),
            gate.weights.cols(),
            n,
            expert_logits.len()
        )));
    }
    let mut combined = Matrix::zeros(n, c);
    for (o, z) in expert_logits.iter().enumerate() {
        if z.rows() != n || z.cols() != c {
            return Err(Error::shape("expert outputs disagree on shape"));
        }
        for i in 0..n {
            let w = gate.weights.get(i, o);
            for (acc, &v) in combined.row_mut(i).iter_mut().zip(z.row(i)) {
                *acc += w * v;
            }
        }
    }
    let mut probs = combined;
    for i in 0..n {
        let row = probs.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(probs)
}

/// Precomputed per-dataset tensors shared across training iterations: the
/// operators and the gate input (which depends only on the graph and the raw
/// features).
pub struct GraphContext {
    pub graph: Arc<Graph>,
    pub features: Matrix,
    pub shifted: NormalizedOperator,
    pub raw_adj: NormalizedOperator,
    pub gate_features: Matrix,
}

impl GraphContext {
    pub fn new(graph: Arc<Graph>, features: Matrix) -> Result<Self> {
        if features.rows() != graph.num_nodes() {
            return Err(Error::shape(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                graph.num_nodes()
            )));
        }
        let sym = NormalizedOperator::new(graph.clone(), OperatorKind::SymAdj);
        let gate_features = gate_input_with(&sym, &features)?;
        Ok(GraphContext {
            shifted: NormalizedOperator::new(graph.clone(), OperatorKind::ShiftedLaplacian),
            raw_adj: NormalizedOperator::new(graph.clone(), OperatorKind::RawAdj),
            graph,
            features,
            gate_features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GinLayerIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GateIds {
    layers: Vec<GinLayerIds>,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExpertIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    theta: usize,
}

/// One recorded forward pass. The tape stays alive so a loss can be attached
/// and differentiated.
pub struct ForwardPass {
    pub tape: Tape,
    /// None when the model has a single expert (the gate is bypassed).
    pub gate_weights: Option<VarId>,
    pub expert_logits: Vec<VarId>,
    pub combined: VarId,
    pub probs: VarId,
    theta_ids: Vec<VarId>,
}

/// Loss nodes attached to a forward pass. `smoothing` and `balance` are the
/// raw terms before their weights are applied.
pub struct LossNodes {
    pub total: VarId,
    pub task: VarId,
    pub smoothing: VarId,
    pub balance: VarId,
}

/// Plain evaluation outputs.
pub struct Prediction {
    pub probs: Matrix,
    pub combined: Matrix,
    pub gate: GateOutput,
    pub expert_logits: Vec<Matrix>,
}

pub struct NodeMoe {
    config: ModelConfig,
    store: ParamStore,
    gate: Option<GateIds>,
    experts: Vec<ExpertIds>,
    grid: SmoothingGrid,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = (rng.random::<f64>() * 2.0 - 1.0) * limit;
    }
    m
}

impl NodeMoe {
    pub fn new(config: ModelConfig) -> Result<NodeMoe> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let m = config.num_experts();

        let gate = if m >= 2 {
            let gd = config.gate.hidden;
            let mut layers = Vec::new();
            let mut in_dim = 3 * config.in_dim;
            for l in 0..2 {
                let w1 = store.add(
                    format!("gate.l{l}.w1"),
                    glorot(&mut rng, in_dim, gd),
                    ParamTag::NetworkWeight,
                );
                let b1 = store.add(
                    format!("gate.l{l}.b1"),
                    Matrix::zeros(1, gd),
                    ParamTag::NetworkWeight,
                );
                let w2 = store.add(
                    format!("gate.l{l}.w2"),
                    glorot(&mut rng, gd, gd),
                    ParamTag::NetworkWeight,
                );
                let b2 = store.add(
                    format!("gate.l{l}.b2"),
                    Matrix::zeros(1, gd),
                    ParamTag::NetworkWeight,
                );
                layers.push(GinLayerIds { w1, b1, w2, b2 });
                in_dim = gd;
            }
            let w_out = store.add(
                "gate.out.w",
                glorot(&mut rng, gd, m),
                ParamTag::NetworkWeight,
            );
            let b_out = store.add("gate.out.b", Matrix::zeros(1, m), ParamTag::NetworkWeight);
            Some(GateIds {
                layers,
                w_out,
                b_out,
            })
        } else {
            None
        };

        let mut experts = Vec::new();
        for (o, e) in config.experts.iter().enumerate() {
            let w1 = store.add(
                format!("expert{o}.w1"),
                glorot(&mut rng, config.in_dim, e.hidden),
                ParamTag::NetworkWeight,
            );
            let b1 = store.add(
                format!("expert{o}.b1"),
                Matrix::zeros(1, e.hidden),
                ParamTag::NetworkWeight,
            );
            let w2 = store.add(
                format!("expert{o}.w2"),
                glorot(&mut rng, e.hidden, config.num_classes),
                ParamTag::NetworkWeight,
            );
            let b2 = store.add(
                format!("expert{o}.b2"),
                Matrix::zeros(1, config.num_classes),
                ParamTag::NetworkWeight,
            );
            let coeffs = init_coeffs(e.init, e.alpha, e.order)?;
            let theta = store.add(
                format!("expert{o}.theta"),
                Matrix::from_vec(e.order + 1, 1, coeffs.theta().to_vec())?,
                ParamTag::FilterCoeff,
            );
            experts.push(ExpertIds {
                w1,
                b1,
                w2,
                b2,
                theta,
            });
        }

        let grid = SmoothingGrid::uniform(config.grid_segments)?;
        Ok(NodeMoe {
            config,
            store,
            gate,
            experts,
            grid,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn grid(&self) -> &SmoothingGrid {
        &self.grid
    }

    /// Current coefficients of one expert's filter.
    pub fn filter_coeffs(&self, expert: usize) -> FilterCoeffs {
        let theta = &self.store.get(self.experts[expert].theta).value;
        FilterCoeffs::new(theta.data().to_vec()).expect("stored coefficients are valid")
    }

    pub fn all_filter_coeffs(&self) -> Vec<FilterCoeffs> {
        (0..self.experts.len())
            .map(|o| self.filter_coeffs(o))
            .collect()
    }

    /// Record a forward pass on a fresh tape, reading parameter values from
    /// `store` (usually [`Self::store`], but gradient checks substitute
    /// perturbed copies). `dropout` takes effect only when an RNG is given.
    pub fn forward(
        &self,
        store: &ParamStore,
        ctx: &GraphContext,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        if ctx.features.cols() != self.config.in_dim {
            return Err(Error::shape(format!(
                "model expects {} input features, got {}",
                self.config.in_dim,
                ctx.features.cols()
            )));
        }
        let mut tape = Tape::new();

        let apply_dropout = |tape: &mut Tape,
                             id: VarId,
                             rng: &mut Option<&mut ChaCha8Rng>|
         -> Result<VarId> {
            if dropout <= 0.0 {
                return Ok(id);
            }
            let Some(rng) = rng.as_deref_mut() else {
                return Ok(id);
            };
            let v = tape.value(id);
            let keep = 1.0 - dropout;
            let mut mask = Matrix::zeros(v.rows(), v.cols());
            for slot in mask.data_mut() {
                if rng.random::<f64>() < keep {
                    *slot = 1.0 / keep;
                }
            }
            let mask_id = tape.constant(mask);
            tape.elementwise_mul(id, mask_id)
        };

        // Gate.
        let gate_weights = if let Some(gate) = &self.gate {
            let mut h = tape.constant(ctx.gate_features.clone());
            for layer in &gate.layers {
                let self_part = tape.scale(h, 1.0 + self.config.gate.epsilon);
                let nbr = tape.sparse_apply(&ctx.raw_adj, h)?;
                let agg = tape.add(self_part, nbr)?;
                let w1 = tape.param(store, layer.w1);
                let b1 = tape.param(store, layer.b1);
                let lin1 = tape.matmul(agg, w1)?;
                let lin1 = tape.add_row_broadcast(lin1, b1)?;
                let t = tape.relu(lin1);
                let w2 = tape.param(store, layer.w2);
                let b2 = tape.param(store, layer.b2);
                let lin2 = tape.matmul(t, w2)?;
                let lin2 = tape.add_row_broadcast(lin2, b2)?;
                h = tape.relu(lin2);
                h = apply_dropout(&mut tape, h, &mut rng)?;
            }
            let w_out = tape.param(store, gate.w_out);
            let b_out = tape.param(store, gate.b_out);
            let logits = tape.matmul(h, w_out)?;
            let logits = tape.add_row_broadcast(logits, b_out)?;
            let weights = match self.config.gate.mode {
                GateMode::Soft => tape.row_softmax(logits)?,
                GateMode::TopK(k) => tape.row_topk_softmax(logits, k)?,
            };
            Some(weights)
        } else {
            None
        };

        // Experts.
        let x = tape.constant(ctx.features.clone());
        let mut expert_logits = Vec::new();
        let mut theta_ids = Vec::new();
        for (cfg, ids) in self.config.experts.iter().zip(&self.experts) {
            let w1 = tape.param(store, ids.w1);
            let b1 = tape.param(store, ids.b1);
            let lin1 = tape.matmul(x, w1)?;
            let lin1 = tape.add_row_broadcast(lin1, b1)?;
            let t = tape.relu(lin1);
            let t = apply_dropout(&mut tape, t, &mut rng)?;
            let w2 = tape.param(store, ids.w2);
            let b2 = tape.param(store, ids.b2);
            let lin2 = tape.matmul(t, w2)?;
            let transformed = tape.add_row_broadcast(lin2, b2)?;

            // Chebyshev recurrence on the tape.
            let mut blocks = Vec::with_capacity(cfg.order + 1);
            blocks.push(transformed);
            let first = tape.sparse_apply(&ctx.shifted, blocks[0])?;
            blocks.push(first);
            for k in 2..=cfg.order {
                let prop = tape.sparse_apply(&ctx.shifted, blocks[k - 1])?;
                let doubled = tape.scale(prop, 2.0);
                let next = tape.sub(doubled, blocks[k - 2])?;
                blocks.push(next);
            }
            let theta = tape.param(store, ids.theta);
            theta_ids.push(theta);
            let mut z: Option<VarId> = None;
            for (k, &block) in blocks.iter().enumerate() {
                let coeff = tape.row(theta, k)?;
                let term = tape.elementwise_mul(block, coeff)?;
                z = Some(match z {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            expert_logits.push(z.expect("order >= 1"));
        }

        // Combination.
        let combined = match gate_weights {
            None => expert_logits[0],
            Some(weights) => {
                let mut acc: Option<VarId> = None;
                for (o, &z) in expert_logits.iter().enumerate() {
                    let w_col = tape.col(weights, o)?;
                    let term = tape.elementwise_mul(z, w_col)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                acc.expect("at least one expert")
            }
        };
        let probs = tape.row_softmax(combined)?;

        Ok(ForwardPass {
            tape,
            gate_weights,
            expert_logits,
            combined,
            probs,
            theta_ids,
        })
    }

    /// Attach the composite loss to a recorded forward pass:
    /// mean masked cross-entropy + gamma * sum of per-expert smoothing terms
    /// + beta * squared coefficient of variation of the per-expert gate mass.
    pub fn attach_loss(
        &self,
        fp: &mut ForwardPass,
        labels: &LabelVector,
        mask: &[usize],
        lw: &LossWeights,
    ) -> Result<LossNodes> {
        let tape = &mut fp.tape;
        let task = tape.cross_entropy_masked(
            fp.combined,
            Arc::new(labels.labels().to_vec()),
            Arc::new(mask.to_vec()),
        )?;

        // Filter smoothing: squared differences of the response samples.
        let mut smoothing: Option<VarId> = None;
        for (cfg, &theta) in self.config.experts.iter().zip(&fp.theta_ids) {
            let basis = tape.constant(grid_basis_matrix(&self.grid, cfg.order));
            let resp = tape.matmul(basis, theta)?;
            let diff_m = tape.constant(difference_matrix(self.grid.points().len()));
            let diffs = tape.matmul(diff_m, resp)?;
            let sq = tape.elementwise_mul(diffs, diffs)?;
            let term = tape.reduce_sum(sq);
            smoothing = Some(match smoothing {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let smoothing = smoothing.expect("at least one expert");

        // Load balancing: rows are stochastic, so the per-expert importance
        // (column mass) always sums to n and its mean is the constant n/m.
        // CV^2 = variance / mean^2 reduces to (m/n^2) * sum((imp - n/m)^2).
        let balance = match fp.gate_weights {
            None => tape.constant(Matrix::scalar(0.0)),
            Some(weights) => {
                let n = tape.value(weights).rows();
                let m = self.config.num_experts();
                let ones = tape.constant(Matrix::from_vec(1, n, vec![1.0; n])?);
                let importance = tape.matmul(ones, weights)?;
                let mean = n as f64 / m as f64;
                let neg_mean = tape.constant(Matrix::from_vec(1, m, vec![-mean; m])?);
                let dev = tape.add(importance, neg_mean)?;
                let sq = tape.elementwise_mul(dev, dev)?;
                let ssq = tape.reduce_sum(sq);
                tape.scale(ssq, m as f64 / (n as f64 * n as f64))
            }
        };

        let weighted_smooth = tape.scale(smoothing, lw.gamma);
        let weighted_balance = tape.scale(balance, lw.beta);
        let aux = tape.add(weighted_smooth, weighted_balance)?;
        let total = tape.add(task, aux)?;
        Ok(LossNodes {
            total,
            task,
            smoothing,
            balance,
        })
    }

    /// Evaluation-mode forward (no dropout) returning plain matrices.
    pub fn predict(&self, ctx: &GraphContext) -> Result<Prediction> {
        let fp = self.forward(&self.store, ctx, 0.0, None)?;
        let gate = match fp.gate_weights {
            Some(id) => GateOutput {
                weights: fp.tape.value(id).clone(),
            },
            None => GateOutput {
                weights: Matrix::from_vec(ctx.num_nodes(), 1, vec![1.0; ctx.num_nodes()])?,
            },
        };
        Ok(Prediction {
            probs: fp.tape.value(fp.probs).clone(),
            combined: fp.tape.value(fp.combined).clone(),
            gate,
            expert_logits: fp
                .expert_logits
                .iter()
                .map(|&id| fp.tape.value(id).clone())
                .collect(),
        })
    }

    /// Gate weights only.
    pub fn gate_forward(&self, ctx: &GraphContext) -> Result<GateOutput> {
        Ok(self.predict(ctx)?.gate)
    }

    /// Scalar total loss for a parameter setting; the finite-difference
    /// oracle drives this with perturbed stores.
    pub fn loss_value(
        &self,
        store: &ParamStore,
        ctx: &GraphContext,
        labels: &LabelVector,
        mask: &[usize],
        lw: &LossWeights,
    ) -> Result<f64> {
        let mut fp = self.forward(store, ctx, 0.0, None)?;
        let loss = self.attach_loss(&mut fp, labels, mask, lw)?;
        Ok(fp.tape.scalar_value(loss.total))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.store.clone(),
            train_config: None,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<NodeMoe> {
        let mut model = NodeMoe::new(ckpt.config)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::invalid("checkpoint parameter count mismatch"));
        }
        for idx in 0..model.store.len() {
            let loaded = ckpt.params.get(idx);
            let expected = model.store.get(idx);
            if loaded.name != expected.name || !loaded.value.same_shape(&expected.value) {
                return Err(Error::invalid(format!(
                    "checkpoint parameter '{}' does not match the model layout",
                    loaded.name
                )));
            }
        }
        model.store = ckpt.params;
        Ok(model)
    }
}

/// On-disk model state: configuration, every parameter, and the seeds that
/// produced them (the init seed lives in the config; the training seed rides
/// along in the embedded training configuration when present). JSON keeps
/// f64 round-trips bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub train_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_grads, max_relative_error};
    use crate::csbm;
    use crate::spectral::{assemble, precompute_basis};

    fn small_ctx(seed: u64, n: usize, d: usize) -> (GraphContext, LabelVector) {
        let params =
            csbm::CsbmParams::with_mean_distance(n, d, (0.6, 0.2), (0.2, 0.6), 0.5, 1.0, seed)
                .unwrap();
        let sample = csbm::generate(&params).unwrap();
        let ctx =
            GraphContext::new(Arc::new(sample.graph.clone()), sample.features.clone()).unwrap();
        (ctx, sample.labels)
    }

    fn two_expert_config(in_dim: usize, seed: u64, mode: GateMode) -> ModelConfig {
        ModelConfig {
            in_dim,
            num_classes: 2,
            experts: vec![
                ExpertConfig::new(4, 8, InitStrategy::Increasing, 0.9),
                ExpertConfig::new(4, 8, InitStrategy::Decreasing, 0.9),
            ],
            gate: GateConfig {
                hidden: 8,
                mode,
                epsilon: 0.0,
            },
            grid_segments: 10,
            seed,
        }
    }

    #[test]
    fn gate_input_blocks() {
        // K2 with x = [1, 0]: one-hop residuals are 1 for both nodes, and
        // A^2 = I makes the two-hop block vanish.
        let g = Graph::build(&[(0, 1)], 2).unwrap();
        let x = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let gi = gate_input(&g, &x).unwrap();
        assert_eq!(gi.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(gi.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gate_input_smooth_node_is_zero() {
        // A node whose feature equals its normalized neighbor mean produces
        // a zero one-hop residual.
        let g = Graph::build(&[(0, 1)], 2).unwrap();
        let x = Matrix::from_vec(2, 1, vec![3.0, 3.0]).unwrap();
        let gi = gate_input(&g, &x).unwrap();
        assert_eq!(gi.row(0), &[3.0, 0.0, 0.0]);
    }

    #[test]
    fn gate_input_isolated_node() {
        let g = Graph::build(&[(0, 1)], 3).unwrap();
        let x = Matrix::from_vec(3, 1, vec![1.0, 2.0, -4.0]).unwrap();
        let gi = gate_input(&g, &x).unwrap();
        assert_eq!(gi.row(2), &[-4.0, 4.0, 4.0]);
    }

    #[test]
    fn gate_rows_are_stochastic() {
        let (ctx, _) = small_ctx(1, 30, 3);
        for mode in [GateMode::Soft, GateMode::TopK(1)] {
            let model = NodeMoe::new(two_expert_config(3, 5, mode)).unwrap();
            let gate = model.gate_forward(&ctx).unwrap();
            gate.validate(Some(mode)).unwrap();
            if let GateMode::TopK(k) = mode {
                assert!(gate.max_nonzeros_per_row() <= k);
            }
        }
    }

    #[test]
    fn softmax_rows_match_hand_cases() {
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::from_vec(2, 2, vec![0.0, 0.0, 2.0, -1.0]).unwrap());
        let soft = tape.row_softmax(logits).unwrap();
        let sm = tape.value(soft);
        assert!((sm.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((sm.get(0, 1) - 0.5).abs() < 1e-12);
        let topk = tape.row_topk_softmax(logits, 1).unwrap();
        let tk = tape.value(topk);
        assert_eq!(tk.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn moe_forward_degenerate_cases() {
        let z0 = Matrix::from_vec(2, 2, vec![2.0, -1.0, 0.0, 1.0]).unwrap();
        let z1 = Matrix::from_vec(2, 2, vec![-3.0, 5.0, 1.0, 1.0]).unwrap();

        // One-hot gate rows select a single expert.
        let gate = GateOutput {
            weights: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        };
        let probs = moe_forward(&gate, &[z0.clone(), z1.clone()]).unwrap();
        let single = moe_forward(
            &GateOutput {
                weights: Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap(),
            },
            &[z0.clone()],
        )
        .unwrap();
        assert!((probs.get(0, 0) - single.get(0, 0)).abs() < 1e-12);

        // Identical experts make the output gate-independent.
        let gate_a = GateOutput {
            weights: Matrix::from_vec(2, 2, vec![0.3, 0.7, 0.9, 0.1]).unwrap(),
        };
        let gate_b = GateOutput {
            weights: Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.2, 0.8]).unwrap(),
        };
        let pa = moe_forward(&gate_a, &[z0.clone(), z0.clone()]).unwrap();
        let pb = moe_forward(&gate_b, &[z0.clone(), z0.clone()]).unwrap();
        assert!(pa.max_abs_diff(&pb) < 1e-12);

        // Adding a constant to every expert's logit rows preserves argmax.
        let shifted: Vec<Matrix> = [z0.clone(), z1.clone()]
            .iter()
            .map(|z| z.map(|v| v + 11.0))
            .collect();
        let p1 = moe_forward(&gate_a, &[z0, z1]).unwrap();
        let p2 = moe_forward(&gate_a, &shifted).unwrap();
        for i in 0..2 {
            let am1 = if p1.get(i, 0) >= p1.get(i, 1) { 0 } else { 1 };
            let am2 = if p2.get(i, 0) >= p2.get(i, 1) { 0 } else { 1 };
            assert_eq!(am1, am2);
        }
    }

    #[test]
    fn single_expert_reduces_to_plain_spectral_model() {
        let (ctx, _) = small_ctx(2, 20, 3);
        let config = ModelConfig {
            in_dim: 3,
            num_classes: 2,
            experts: vec![ExpertConfig::new(4, 8, InitStrategy::Uniform, 0.9)],
            gate: GateConfig::default(),
            grid_segments: 10,
            seed: 3,
        };
        let model = NodeMoe::new(config).unwrap();
        let pred = model.predict(&ctx).unwrap();

        // Independent plain route: MLP -> basis -> assemble -> softmax.
        let s = model.store();
        let ids = &model.experts[0];
        let t = ctx
            .features
            .matmul(&s.get(ids.w1).value)
            .unwrap()
            .add(&tile_rows(&s.get(ids.b1).value, ctx.num_nodes()))
            .unwrap()
            .map(|v| v.max(0.0));
        let transformed = t
            .matmul(&s.get(ids.w2).value)
            .unwrap()
            .add(&tile_rows(&s.get(ids.b2).value, ctx.num_nodes()))
            .unwrap();
        let basis = precompute_basis(&ctx.shifted, &transformed, 4).unwrap();
        let z = assemble(&model.filter_coeffs(0), &basis).unwrap();
        assert!(pred.combined.max_abs_diff(&z) < 1e-12);
        let probs = moe_forward(
            &GateOutput {
                weights: Matrix::from_vec(20, 1, vec![1.0; 20]).unwrap(),
            },
            &[z],
        )
        .unwrap();
        assert!(pred.probs.max_abs_diff(&probs) < 1e-12);
    }

    fn tile_rows(bias: &Matrix, rows: usize) -> Matrix {
        let mut out = Matrix::zeros(rows, bias.cols());
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(bias.row(0));
        }
        out
    }

    #[test]
    fn expert_permutation_leaves_predictions_unchanged() {
        let (ctx, _) = small_ctx(3, 25, 3);
        let config = two_expert_config(3, 7, GateMode::Soft);
        let model_a = NodeMoe::new(config.clone()).unwrap();

        let mut swapped = config.clone();
        swapped.experts.reverse();
        let mut model_b = NodeMoe::new(swapped).unwrap();
        // Copy A's parameters into B with experts (and gate output columns)
        // permuted.
        for o in 0..2 {
            let src = model_a.experts[o].clone();
            let dst = model_b.experts[1 - o].clone();
            for (s_id, d_id) in [
                (src.w1, dst.w1),
                (src.b1, dst.b1),
                (src.w2, dst.w2),
                (src.b2, dst.b2),
                (src.theta, dst.theta),
            ] {
                let v = model_a.store.get(s_id).value.clone();
                model_b.store.get_mut(d_id).value = v;
            }
        }
        let g_src = model_a.gate.as_ref().unwrap().clone();
        let g_dst = model_b.gate.as_ref().unwrap().clone();
        for (s, d) in g_src
            .layers
            .iter()
            .zip(&g_dst.layers)
            .flat_map(|(a, b)| [(a.w1, b.w1), (a.b1, b.b1), (a.w2, b.w2), (a.b2, b.b2)])
        {
            model_b.store.get_mut(d).value = model_a.store.get(s).value.clone();
        }
        // Swap gate output columns.
        let w_out = model_a.store.get(g_src.w_out).value.clone();
        let mut w_swapped = w_out.clone();
        for i in 0..w_out.rows() {
            w_swapped.set(i, 0, w_out.get(i, 1));
            w_swapped.set(i, 1, w_out.get(i, 0));
        }
        model_b.store.get_mut(g_dst.w_out).value = w_swapped;
        let b_out = model_a.store.get(g_src.b_out).value.clone();
        model_b.store.get_mut(g_dst.b_out).value =
            Matrix::from_vec(1, 2, vec![b_out.get(0, 1), b_out.get(0, 0)]).unwrap();

        let pa = model_a.predict(&ctx).unwrap();
        let pb = model_b.predict(&ctx).unwrap();
        assert!(pa.probs.max_abs_diff(&pb.probs) < 1e-10);
        // Gate columns permute.
        for i in 0..ctx.num_nodes() {
            assert!((pa.gate.weights.get(i, 0) - pb.gate.weights.get(i, 1)).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_weights_off_is_plain_cross_entropy() {
        let (ctx, labels) = small_ctx(4, 20, 3);
        let model = NodeMoe::new(two_expert_config(3, 11, GateMode::Soft)).unwrap();
        let mask: Vec<usize> = (0..10).collect();
        let lw = LossWeights::new(0.0, 0.0).unwrap();
        let mut fp = model.forward(model.store(), &ctx, 0.0, None).unwrap();
        let nodes = model.attach_loss(&mut fp, &labels, &mask, &lw).unwrap();
        let total = fp.tape.scalar_value(nodes.total);
        let task = fp.tape.scalar_value(nodes.task);
        assert!((total - task).abs() < 1e-15);
    }

    #[test]
    fn balanced_gate_zeroes_balance_term() {
        // Zeroed gate output layer: constant logits, perfectly balanced mass.
        let (ctx, labels) = small_ctx(5, 16, 3);
        let mut model = NodeMoe::new(two_expert_config(3, 13, GateMode::Soft)).unwrap();
        let ids = model.gate.as_ref().unwrap().clone();
        model.store.get_mut(ids.w_out).value = Matrix::zeros(8, 2);
        model.store.get_mut(ids.b_out).value = Matrix::zeros(1, 2);
        let mask: Vec<usize> = (0..16).collect();
        let lw = LossWeights::new(0.5, 0.5).unwrap();
        let mut fp = model.forward(model.store(), &ctx, 0.0, None).unwrap();
        let nodes = model.attach_loss(&mut fp, &labels, &mask, &lw).unwrap();
        assert!(fp.tape.scalar_value(nodes.balance).abs() < 1e-12);
    }

    #[test]
    fn constant_filters_zero_smoothing_term() {
        let (ctx, labels) = small_ctx(6, 16, 3);
        let mut model = NodeMoe::new(two_expert_config(3, 17, GateMode::Soft)).unwrap();
        for o in 0..2 {
            let theta = model.experts[o].theta;
            let mut v = Matrix::zeros(5, 1);
            v.set(0, 0, 1.0 + o as f64);
            model.store.get_mut(theta).value = v;
        }
        let mask: Vec<usize> = (0..16).collect();
        let lw = LossWeights::new(100.0, 0.0).unwrap();
        let mut fp = model.forward(model.store(), &ctx, 0.0, None).unwrap();
        let nodes = model.attach_loss(&mut fp, &labels, &mask, &lw).unwrap();
        assert!(fp.tape.scalar_value(nodes.smoothing).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        let (ctx, labels) = small_ctx(7, 12, 3);
        let model = NodeMoe::new(two_expert_config(3, 19, GateMode::Soft)).unwrap();
        let lw = LossWeights::new(0.1, 0.01).unwrap();
        let mut fp = model.forward(model.store(), &ctx, 0.0, None).unwrap();
        assert!(model.attach_loss(&mut fp, &labels, &[], &lw).is_err());
    }

    #[test]
    fn full_loss_gradient_check_soft_and_topk() {
        let (ctx, labels) = small_ctx(8, 12, 3);
        let mask: Vec<usize> = vec![0, 2, 3, 5, 7, 8, 10];
        let lw = LossWeights::new(0.1, 0.01).unwrap();
        for mode in [GateMode::Soft, GateMode::TopK(1)] {
            let model = NodeMoe::new(two_expert_config(3, 23, mode)).unwrap();
            let mut store = model.store().clone();

            let mut fp = model.forward(&store, &ctx, 0.0, None).unwrap();
            let nodes = model.attach_loss(&mut fp, &labels, &mask, &lw).unwrap();
            fp.tape.backward(nodes.total).unwrap();
            store.zero_grads();
            fp.tape.accumulate_param_grads(&mut store);
            let analytic: Vec<Matrix> = store.iter().map(|p| p.grad.clone()).collect();

            let numeric = finite_difference_grads(
                &mut store,
                |s| model.loss_value(s, &ctx, &labels, &mask, &lw),
                1e-5,
            )
            .unwrap();
            for ((a, n), p) in analytic.iter().zip(&numeric).zip(store.iter()) {
                let err = max_relative_error(a, n);
                assert!(
                    err <= 1e-4,
                    "param {} gradient error {err} ({mode:?})",
                    p.name
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = NodeMoe::new(two_expert_config(3, 29, GateMode::TopK(1))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.to_checkpoint().save(&path).unwrap();
        let loaded = NodeMoe::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(model.store().len(), loaded.store().len());
        for idx in 0..model.store().len() {
            let (a, b) = (model.store().get(idx), loaded.store().get(idx));
            assert_eq!(a.name, b.name);
            assert_eq!(a.tag, b.tag);
            assert_eq!(a.value, b.value, "param {} not bit-exact", a.name);
        }
        // Re-saving produces identical bytes.
        let path2 = dir.path().join("model2.json");
        loaded.to_checkpoint().save(&path2).unwrap();
        let (b1, b2) = (std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        assert_eq!(b1, b2);
    }

    #[test]
    fn duplicate_inits_rejected_for_small_ensembles() {
        let mut config = two_expert_config(3, 31, GateMode::Soft);
        config.experts[1].init = InitStrategy::Increasing;
        assert!(NodeMoe::new(config).is_err());
    }

    #[test]
    fn expert_outputs_deterministic() {
        let (ctx, _) = small_ctx(9, 15, 3);
        let model = NodeMoe::new(two_expert_config(3, 37, GateMode::Soft)).unwrap();
        let p1 = model.predict(&ctx).unwrap();
        let p2 = model.predict(&ctx).unwrap();
        assert_eq!(p1.probs, p2.probs);
        assert_eq!(p1.expert_logits[0], p2.expert_logits[0]);
    }

    #[test]
    fn differentiated_inits_differ_in_propagated_component() {
        // On K2 the propagated blocks are [0,-1] (odd orders) and [1,0]
        // (even orders), so the filters disagree wherever odd-order weights
        // differ. Values frozen from the dense two-node evaluation.
        let g = Graph::build(&[(0, 1)], 2).unwrap();
        let h = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let op = NormalizedOperator::new(Arc::new(g), OperatorKind::ShiftedLaplacian);
        let basis3 = precompute_basis(&op, &h, 3).unwrap();
        let low3 = init_coeffs(InitStrategy::Increasing, 0.9, 3).unwrap();
        let high3 = init_coeffs(InitStrategy::Decreasing, 0.9, 3).unwrap();
        let zl = assemble(&low3, &basis3).unwrap();
        let zh = assemble(&high3, &basis3).unwrap();
        // Node 1 only receives odd (propagated) blocks, each equal to -1:
        // z[1] = -(theta_1 + theta_3).
        // increasing(0.9, 3): theta = [0.729, 0.81, 0.9, 1.0] -> -(1.81)
        // decreasing(0.9, 3): theta = [1.0, 0.9, 0.81, 0.729] -> -(1.629)
        assert!((zl.get(1, 0) + 1.81).abs() < 1e-12);
        assert!((zh.get(1, 0) + 1.629).abs() < 1e-12);
        assert!((zl.get(1, 0) - zh.get(1, 0)).abs() > 0.1);
    }
}
