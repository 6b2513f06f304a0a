use alloc::string::String;
use alloc::vec::Vec;

use super::loss;
use super::params::{ModelDims, ModelParams, ParamVars};
use super::{cluster_forward, encoder_forward, gene_topic_forward, TopicOutputs};
use crate::data::{preprocess, Dataset};
use crate::error::{bail, Error, Result};
use crate::neighbors::{NeighborIndex, View};
use crate::ot::{ecr_term, sinkhorn, SinkhornConfig, TransportPlan};
use crate::rng::{normal_matrix, permutation, seeded, SeededRng};
use crate::tensor::{Matrix, Tape, Var};

/// How the entropy regulariser is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RegMode {
    /// Entropy of the batch-mean assignment.
    #[default]
    BatchMean,
    /// Sum of per-cell assignment entropies.
    PerCell,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub n_topics: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    /// `None` picks 512 below 10 000 cells and 2048 otherwise, capped at n.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// Temperature of the gene-topic softmax.
    pub tau: f64,
    pub sinkhorn: SinkhornConfig,
    pub knn_k: usize,
    pub contrastive_temperature: f64,
    /// Highly variable genes kept by [`train`]; capped at the gene count.
    pub n_hvg: usize,
    /// Top genes recorded per topic.
    pub top_h: usize,
    pub reg_mode: RegMode,
    /// Cross-view terms on/off; off trains on expression alone.
    pub use_cve: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_topics: 100,
            embed_dim: 200,
            hidden: 200,
            epochs: 500,
            batch_size: None,
            lr: 2e-3,
            alpha: 5.0,
            lambda: 20.0,
            tau: 1.0,
            sinkhorn: SinkhornConfig::default(),
            knn_k: 15,
            contrastive_temperature: 0.5,
            n_hvg: 5000,
            top_h: 10,
            reg_mode: RegMode::BatchMean,
            use_cve: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_topics", self.n_topics),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("knn_k", self.knn_k),
            ("n_hvg", self.n_hvg),
            ("top_h", self.top_h),
        ];
        for (name, v) in counts {
            if v == 0 {
                bail!(InvalidArgument, "{} must be at least 1", name);
            }
        }
        if self.batch_size == Some(0) {
            bail!(InvalidArgument, "batch_size must be at least 1");
        }
        let positive = [("lr", self.lr), ("tau", self.tau), ("contrastive_temperature", self.contrastive_temperature)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bail!(InvalidArgument, "{} must be positive, got {}", name, v);
            }
        }
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(InvalidArgument, "{} must be non-negative, got {}", name, v);
            }
        }
        self.sinkhorn.validate()
    }

    pub fn resolved_batch_size(&self, n_cells: usize) -> usize {
        let b = self.batch_size.unwrap_or(if n_cells < 10_000 { 512 } else { 2048 });
        b.min(n_cells).max(1)
    }
}

/// Per-term values of one step (or epoch means). `total` is
/// `re + con + nei − α·reg + λ·ecr`; disabled terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTerms {
    pub re: f64,
    pub con: f64,
    pub nei: f64,
    pub reg: f64,
    pub ecr: f64,
    pub total: f64,
}

impl LossTerms {
    fn check(&self, epoch: usize) -> Result<()> {
        let named = [
            ("L_RE", self.re),
            ("L_CON", self.con),
            ("L_NEI", self.nei),
            ("L_REG", self.reg),
            ("L_ECR", self.ecr),
            ("total", self.total),
        ];
        for (term, v) in named {
            if !v.is_finite() {
                return Err(Error::Diverged { term, epoch });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossTerms,
    /// Largest Sinkhorn iteration count in the epoch.
    pub sinkhorn_iters: usize,
    /// Largest marginal violation in the epoch.
    pub sinkhorn_violation: f64,
}

/// RMSprop with decay 0.99 and ε = 1e-8.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    square_avg: Vec<Matrix>,
}

impl RmsProp {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let square_avg = params.tensors().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { lr, decay: 0.99, eps: 1e-8, square_avg }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Matrix]) {
        for (((_, p), g), s) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.square_avg) {
            for ((pv, &gv), sv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(s.as_mut_slice()) {
                *sv = self.decay * *sv + (1.0 - self.decay) * gv * gv;
                *pv -= self.lr * gv / (libm::sqrt(*sv) + self.eps);
            }
        }
    }
}

/// Preprocessed inputs the trainer consumes.
#[derive(Debug, Clone)]
pub struct TrainInputs {
    /// Cells × genes model input and reconstruction target.
    pub expression: Matrix,
    pub external: Option<Matrix>,
    pub neighbors: Option<NeighborIndex>,
}

impl TrainInputs {
    /// Builds the mutual-kNN index when an external view is given.
    pub fn new(expression: Matrix, external: Option<Matrix>, knn_k: usize) -> Result<Self> {
        if expression.as_slice().iter().any(|&v| v < 0.0) {
            bail!(Data, "expression has negative entries");
        }
        let neighbors = match &external {
            Some(v) => Some(NeighborIndex::build(&expression, v, knn_k)?),
            None => None,
        };
        Ok(Self { expression, external, neighbors })
    }

    pub fn n_cells(&self) -> usize {
        self.expression.rows()
    }
}

/// Everything computed in one forward pass over a batch, for inspection.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub batch: Vec<usize>,
    pub x: Matrix,
    pub theta: Matrix,
    pub mu: Matrix,
    pub logvar: Matrix,
    pub phi: Option<Matrix>,
    pub theta_nei: Option<Matrix>,
    pub phi_nei: Option<Matrix>,
    pub gene_topic: Matrix,
    pub plan: Option<TransportPlan>,
    pub terms: LossTerms,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub terms: LossTerms,
    /// Training-mode θ of the batch.
    pub theta: Matrix,
    pub sinkhorn_iters: usize,
    pub sinkhorn_violation: f64,
}

struct Forward {
    tape: Tape,
    params: ParamVars,
    total: Var,
    out: BatchForward,
}

/// Mini-batch trainer. Single-threaded and fully determined by the seed.
pub struct Trainer {
    cfg: TrainConfig,
    inputs: TrainInputs,
    params: ModelParams,
    opt: RmsProp,
    rng: SeededRng,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(inputs: TrainInputs, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = inputs.n_cells();
        if n < 2 {
            bail!(InvalidArgument, "need at least 2 cells, got {}", n);
        }
        if cfg.use_cve && (inputs.external.is_none() || inputs.neighbors.is_none()) {
            bail!(InvalidArgument, "cross-view training needs an external embedding");
        }
        if cfg.n_topics > inputs.expression.cols() && cfg.lambda > 0.0 {
            bail!(InvalidArgument, "{} topics exceed {} genes", cfg.n_topics, inputs.expression.cols());
        }
        let dims = ModelDims {
            n_genes: inputs.expression.cols(),
            external_dim: inputs.external.as_ref().map_or(0, Matrix::cols),
            n_topics: cfg.n_topics,
            embed_dim: cfg.embed_dim,
            hidden: cfg.hidden,
        };
        let params = ModelParams::init(dims, crate::rng::derive_seed(cfg.seed, &[0]));
        let opt = RmsProp::new(cfg.lr, &params);
        let rng = seeded(crate::rng::derive_seed(cfg.seed, &[1]));
        let batch_size = cfg.resolved_batch_size(n);
        Ok(Self { cfg, inputs, params, opt, rng, batch_size, order: Vec::new(), cursor: n, epoch: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Forward pass over `batch`, drawing noise and neighbours from `rng`.
    pub fn forward_batch(&self, batch: &[usize], rng: &mut SeededRng) -> Result<BatchForward> {
        Ok(self.forward(batch, rng, false)?.out)
    }

    fn forward(&self, batch: &[usize], rng: &mut SeededRng, trainable: bool) -> Result<Forward> {
        let cfg = &self.cfg;
        let k = cfg.n_topics;
        let b = batch.len();
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, trainable);

        let x = self.inputs.expression.select_rows(batch);
        let xv = tape.constant(x.clone());
        let zeta = tape.constant(normal_matrix(rng, b, k, 1.0));
        let enc = encoder_forward(&mut tape, &pv, xv, Some(zeta));

        let o = gene_topic_forward(&mut tape, &pv, cfg.tau);
        let re = loss::reconstruction(&mut tape, enc.theta, o, xv, enc.mu, enc.logvar);
        let mut total = re;
        let mut terms = LossTerms { re: tape.scalar(re), ..Default::default() };

        let (mut phi_m, mut tn_m, mut pn_m) = (None, None, None);
        if cfg.use_cve {
            let ext = self.inputs.external.as_ref().expect("checked in new");
            let nb = self.inputs.neighbors.as_ref().expect("checked in new");
            let x_nei: Vec<usize> = batch.iter().map(|&i| nb.sample_neighbor(View::Internal, i, rng)).collect();
            let v_nei: Vec<usize> = batch.iter().map(|&i| nb.sample_neighbor(View::External, i, rng)).collect();

            let vv = tape.constant(ext.select_rows(batch));
            let (phi_logits, phi) = cluster_forward(&mut tape, &pv, vv);
            let xn = tape.constant(self.inputs.expression.select_rows(&x_nei));
            let zeta_n = tape.constant(normal_matrix(rng, b, k, 1.0));
            let enc_n = encoder_forward(&mut tape, &pv, xn, Some(zeta_n));
            let vn = tape.constant(ext.select_rows(&v_nei));
            let (_, phi_n) = cluster_forward(&mut tape, &pv, vn);

            let con = loss::consistency(&mut tape, enc.theta, phi);
            let nei = loss::neighborhood(&mut tape, enc.theta, phi, enc_n.theta, phi_n, cfg.contrastive_temperature);
            let reg = match cfg.reg_mode {
                RegMode::PerCell => {
                    let a = loss::row_entropy(&mut tape, enc.logits);
                    let c = loss::row_entropy(&mut tape, phi_logits);
                    tape.add(a, c)
                }
                RegMode::BatchMean => {
                    let a = loss::mean_entropy(&mut tape, enc.logits);
                    let c = loss::mean_entropy(&mut tape, phi_logits);
                    tape.add(a, c)
                }
            };
            terms.con = tape.scalar(con);
            terms.nei = tape.scalar(nei);
            terms.reg = tape.scalar(reg);
            let cve = tape.add(con, nei);
            let reg_w = tape.scale(reg, -cfg.alpha);
            let cve = tape.add(cve, reg_w);
            total = tape.add(total, cve);
            phi_m = Some(tape.value(phi).clone());
            tn_m = Some(tape.value(enc_n.theta).clone());
            pn_m = Some(tape.value(phi_n).clone());
        }

        let mut plan = None;
        if cfg.lambda > 0.0 {
            let cost = tape.value(pv.gene_emb).sq_dist(tape.value(pv.topic_emb))?;
            let p = match sinkhorn(&cost, &cfg.sinkhorn) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { term: "L_ECR", epoch: self.epoch }),
                r => r?,
            };
            let pi = tape.constant(p.pi.clone());
            let ecr = ecr_term(&mut tape, pv.gene_emb, pv.topic_emb, pi);
            terms.ecr = tape.scalar(ecr);
            let w = tape.scale(ecr, cfg.lambda);
            total = tape.add(total, w);
            plan = Some(p);
        }
        terms.total = tape.scalar(total);
        terms.check(self.epoch)?;

        let out = BatchForward {
            batch: batch.to_vec(),
            x,
            theta: tape.value(enc.theta).clone(),
            mu: tape.value(enc.mu).clone(),
            logvar: tape.value(enc.logvar).clone(),
            phi: phi_m,
            theta_nei: tn_m,
            phi_nei: pn_m,
            gene_topic: tape.value(o).clone(),
            plan,
            terms,
        };
        Ok(Forward { tape, params: pv, total, out })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.inputs.n_cells();
        if self.cursor >= n {
            self.order = permutation(&mut self.rng, n);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// One optimizer step on the next mini-batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch();
        let mut rng = self.rng.clone();
        let fwd = self.forward(&batch, &mut rng, true)?;
        self.rng = rng;
        let mut grads = fwd.tape.backward(fwd.total);
        let g: Vec<Matrix> = fwd.params.all().iter().map(|&v| grads.take(v)).collect();
        if g.iter().any(|m| !m.is_finite()) {
            return Err(Error::Diverged { term: "gradient", epoch: self.epoch });
        }
        self.opt.step(&mut self.params, &g);
        if self.cursor >= self.inputs.n_cells() {
            self.epoch += 1;
        }
        let (iters, viol) = fwd.out.plan.as_ref().map_or((0, 0.0), |p| (p.iterations, p.marginal_violation));
        Ok(StepReport { terms: fwd.out.terms, theta: fwd.out.theta, sinkhorn_iters: iters, sinkhorn_violation: viol })
    }

    /// Runs steps until the current epoch completes.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = self.epoch;
        let mut sum = LossTerms::default();
        let mut steps = 0usize;
        let mut iters = 0;
        let mut viol = 0.0f64;
        while self.epoch == start {
            let r = self.step()?;
            sum.re += r.terms.re;
            sum.con += r.terms.con;
            sum.nei += r.terms.nei;
            sum.reg += r.terms.reg;
            sum.ecr += r.terms.ecr;
            sum.total += r.terms.total;
            iters = iters.max(r.sinkhorn_iters);
            viol = viol.max(r.sinkhorn_violation);
            steps += 1;
        }
        let s = steps as f64;
        let losses = LossTerms {
            re: sum.re / s,
            con: sum.con / s,
            nei: sum.nei / s,
            reg: sum.reg / s,
            ecr: sum.ecr / s,
            total: sum.total / s,
        };
        Ok(EpochLog { epoch: start + 1, losses, sinkhorn_iters: iters, sinkhorn_violation: viol })
    }

    /// Inference-mode θ (ζ = 0) for every cell.
    pub fn infer_theta(&self) -> Result<Matrix> {
        infer_theta(&self.params, &self.inputs.expression)
    }

    pub fn gene_topic(&self) -> Result<Matrix> {
        super::gene_topic_matrix(&self.params.gene_emb, &self.params.topic_emb, self.cfg.tau)
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }
}

/// Inference-mode θ, computed in chunks.
pub fn infer_theta(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let n = x.rows();
    let mut out = Matrix::zeros(n, params.dims.n_topics);
    let chunk = 1024;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let enc = super::encode(params, &x.select_rows(&idx), None)?;
        for (r, i) in idx.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(enc.theta.row(r));
        }
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ModelParams,
    pub outputs: TopicOutputs,
    pub log: Vec<EpochLog>,
    /// Original column index of each model gene (identity for [`fit`]).
    pub selected_genes: Vec<usize>,
}

/// Trains on prepared inputs for `cfg.epochs` epochs, then runs inference.
pub fn fit(inputs: TrainInputs, gene_names: Vec<String>, cfg: &TrainConfig) -> Result<TrainResult> {
    fit_with(inputs, gene_names, cfg, |_| {})
}

/// [`fit`] with a callback after each epoch.
pub fn fit_with(
    inputs: TrainInputs,
    gene_names: Vec<String>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    if gene_names.len() != inputs.expression.cols() {
        bail!(Shape, "{} gene names for {} genes", gene_names.len(), inputs.expression.cols());
    }
    let n_genes = gene_names.len();
    let mut trainer = Trainer::new(inputs, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let entry = trainer.run_epoch()?;
        on_epoch(&entry);
        log.push(entry);
    }
    let theta = trainer.infer_theta()?;
    let o = trainer.gene_topic()?;
    let outputs = TopicOutputs::new(theta, o, gene_names, cfg.top_h.min(n_genes))?;
    Ok(TrainResult { params: trainer.into_params(), outputs, log, selected_genes: (0..n_genes).collect() })
}

/// Full pipeline on raw counts: log1p + variable-gene selection, mutual kNN
/// on both views, then [`fit`].
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    train_with(dataset, cfg, |_| {})
}

pub fn train_with(dataset: &Dataset, cfg: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainResult> {
    cfg.validate()?;
    let pre = preprocess(&dataset.expression, cfg.n_hvg.min(dataset.n_genes()))?;
    let names: Vec<String> = pre.selected.iter().map(|&g| dataset.gene_names[g].clone()).collect();
    let external = if cfg.use_cve { dataset.external.clone() } else { None };
    let inputs = TrainInputs::new(pre.expression, external, cfg.knn_k)?;
    let mut result = fit_with(inputs, names, cfg, on_epoch)?;
    result.selected_genes = pre.selected;
    Ok(result)
}
