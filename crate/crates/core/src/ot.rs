//! Entropic optimal transport between gene embeddings and topic embeddings.
//!
//! Genes carry mass `1/V` each and topics `1/K` each. The plan is found with
//! log-domain Sinkhorn iterations and then used as fixed soft assignments in
//! the embedding clustering loss `Σ_mk ‖g_m − t_k‖² π_mk`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{log_sum_exp, Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once the L1 marginal violation drops below this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, max_iter: 1000, tol: 1e-6 }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            bail!(InvalidArgument, "sinkhorn epsilon must be positive, got {}", self.epsilon);
        }
        if !(self.tol > 0.0) {
            bail!(InvalidArgument, "sinkhorn tol must be positive, got {}", self.tol);
        }
        if self.max_iter == 0 {
            bail!(InvalidArgument, "sinkhorn max_iter must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub pi: Matrix,
    pub converged: bool,
    pub iterations: usize,
    /// `‖π1 − a‖₁ + ‖πᵀ1 − b‖₁` of the returned plan.
    pub marginal_violation: f64,
}

/// Solves the entropic transport problem for a V×K cost matrix with uniform
/// marginals `1/V` on rows and `1/K` on columns.
pub fn sinkhorn(cost: &Matrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    cost.ensure_finite("sinkhorn cost matrix")?;
    let (v, k) = cost.shape();
    if v == 0 || k == 0 {
        bail!(Shape, "empty {}x{} cost matrix", v, k);
    }
    let eps = cfg.epsilon;
    let log_a = -libm::log(v as f64);
    let log_b = -libm::log(k as f64);

    // Dual potentials; log π_mk = (f_m + g_k − C_mk) / ε.
    let mut f = vec![0.0; v];
    let mut g = vec![0.0; k];
    let mut buf_k = vec![0.0; k];
    let mut buf_v = vec![0.0; v];

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        for m in 0..v {
            let row = cost.row(m);
            for j in 0..k {
                buf_k[j] = (g[j] - row[j]) / eps;
            }
            f[m] = eps * (log_a - log_sum_exp(&buf_k));
        }
        for j in 0..k {
            for m in 0..v {
                buf_v[m] = (f[m] - cost[(m, j)]) / eps;
            }
            g[j] = eps * (log_b - log_sum_exp(&buf_v));
        }
        violation = marginal_violation(cost, &f, &g, eps);
        if violation < cfg.tol {
            break;
        }
    }

    let pi = plan_from_potentials(cost, &f, &g, eps);
    if !pi.is_finite() {
        bail!(NonFinite, "transport plan");
    }
    let marginal_violation = plan_violation(&pi);
    Ok(TransportPlan { pi, converged: violation < cfg.tol, iterations, marginal_violation })
}

fn plan_from_potentials(cost: &Matrix, f: &[f64], g: &[f64], eps: f64) -> Matrix {
    Matrix::from_fn(cost.rows(), cost.cols(), |m, j| libm::exp((f[m] + g[j] - cost[(m, j)]) / eps))
}

fn marginal_violation(cost: &Matrix, f: &[f64], g: &[f64], eps: f64) -> f64 {
    plan_violation(&plan_from_potentials(cost, f, g, eps))
}

/// L1 distance of a plan's marginals from the uniform targets.
pub fn plan_violation(pi: &Matrix) -> f64 {
    let (v, k) = pi.shape();
    let a = 1.0 / v as f64;
    let b = 1.0 / k as f64;
    let rows: f64 = pi.row_sums().iter().map(|s| (s - a).abs()).sum();
    let cols: f64 = pi.col_sums().iter().map(|s| (s - b).abs()).sum();
    rows + cols
}

/// Entropic objective `Σ C π + ε Σ π (log π − 1)`.
pub fn entropic_objective(cost: &Matrix, pi: &Matrix, epsilon: f64) -> f64 {
    cost.as_slice()
        .iter()
        .zip(pi.as_slice())
        .map(|(&c, &p)| {
            let ent = if p > 0.0 { p * (libm::log(p) - 1.0) } else { 0.0 };
            c * p + epsilon * ent
        })
        .sum()
}

/// Transport cost `Σ C π`.
pub fn transport_cost(cost: &Matrix, pi: &Matrix) -> f64 {
    cost.as_slice().iter().zip(pi.as_slice()).map(|(c, p)| c * p).sum()
}

#[derive(Debug, Clone)]
pub struct EcrOutput {
    pub loss: f64,
    pub grad_genes: Matrix,
    pub grad_topics: Matrix,
    pub plan: TransportPlan,
}

/// Embedding clustering loss with its gradient. The plan is solved from the
/// current embeddings and then held fixed, so gradients only flow through
/// the squared distances. A plan that hit `max_iter` is still used; check
/// `plan.converged`.
pub fn ecr_loss(genes: &Matrix, topics: &Matrix, cfg: &SinkhornConfig) -> Result<EcrOutput> {
    if genes.cols() != topics.cols() || genes.cols() == 0 {
        bail!(Shape, "gene embeddings are {}-d, topic embeddings {}-d", genes.cols(), topics.cols());
    }
    if genes.rows() < topics.rows() {
        bail!(InvalidArgument, "need at least as many genes ({}) as topics ({})", genes.rows(), topics.rows());
    }
    let cost = genes.sq_dist(topics)?;
    let plan = sinkhorn(&cost, cfg)?;

    let mut tape = Tape::new();
    let g = tape.var(genes.clone());
    let t = tape.var(topics.clone());
    let pi = tape.constant(plan.pi.clone());
    let loss = ecr_term(&mut tape, g, t, pi);
    let mut grads = tape.backward(loss);
    Ok(EcrOutput {
        loss: tape.scalar(loss),
        grad_genes: grads.take(g),
        grad_topics: grads.take(t),
        plan,
    })
}

/// Tape form of the clustering loss for a fixed plan.
pub fn ecr_term(tape: &mut Tape, genes: Var, topics: Var, plan: Var) -> Var {
    let cost = tape.sq_dist(genes, topics);
    let weighted = tape.mul(cost, plan);
    tape.sum(weighted)
}

/// Plan-weighted barycenter of the genes for each topic:
/// `Σ_m π_mk g_m / Σ_m π_mk`.
pub fn plan_barycenters(genes: &Matrix, pi: &Matrix) -> Matrix {
    let mass = pi.col_sums();
    let mut out = pi.matmul_tn_unchecked(genes);
    for (k, &w) in mass.iter().enumerate() {
        out.row_mut(k).iter_mut().for_each(|v| *v /= w);
    }
    out
}

/// Mean distance from each topic to its plan-weighted gene barycenter.
pub fn mean_barycenter_distance(genes: &Matrix, topics: &Matrix, pi: &Matrix) -> f64 {
    let bary = plan_barycenters(genes, pi);
    let d: Vec<f64> = (0..topics.rows())
        .map(|k| libm::sqrt(crate::tensor::sq_euclidean(topics.row(k), bary.row(k))))
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded};
    use crate::tensor::grad_check;
    use rand::Rng;

    fn cfg(epsilon: f64) -> SinkhornConfig {
        SinkhornConfig { epsilon, max_iter: 20_000, tol: 1e-9 }
    }

    #[test]
    fn zero_cost_gives_product_coupling() {
        let plan = sinkhorn(&Matrix::zeros(2, 2), &SinkhornConfig::default()).unwrap();
        assert!(plan.converged);
        for &p in plan.pi.as_slice() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    /// Feasible 2x2 plans with uniform marginals are
    /// [[s, 0.5 − s], [0.5 − s, s]] for s ∈ [0, 0.5]; grid-search the entropic
    /// objective over s.
    fn grid_search_2x2(cost: &Matrix, eps: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        let n = 200_000;
        for i in 1..n {
            let s = 0.5 * i as f64 / n as f64;
            let pi = Matrix::from_rows(&[[s, 0.5 - s], [0.5 - s, s]]).unwrap();
            let obj = entropic_objective(cost, &pi, eps);
            if obj < best.0 {
                best = (obj, s);
            }
        }
        best.1
    }

    #[test]
    fn anti_diagonal_cost_concentrates_on_diagonal() {
        let cost = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let plan = sinkhorn(&cost, &cfg(0.01)).unwrap();
        let s = grid_search_2x2(&cost, 0.01);
        assert!((plan.pi[(0, 0)] - s).abs() < 1e-5);
        assert!((plan.pi[(0, 0)] - 0.5).abs() < 1e-3);
        assert!(plan.pi[(0, 1)] < 1e-3 && plan.pi[(1, 0)] < 1e-3);
    }

    #[test]
    fn grid_oracle_at_moderate_epsilon() {
        let cost = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let plan = sinkhorn(&cost, &cfg(0.5)).unwrap();
        assert!((plan.pi[(0, 0)] - grid_search_2x2(&cost, 0.5)).abs() < 1e-5);
    }

    #[test]
    fn converged_plans_meet_tolerance() {
        let mut rng = seeded(11);
        for _ in 0..20 {
            let cost = Matrix::from_fn(17, 4, |_, _| rng.gen::<f64>() * 3.0);
            let c = SinkhornConfig::default();
            let plan = sinkhorn(&cost, &c).unwrap();
            assert!(plan.converged);
            assert!(plan.marginal_violation < c.tol);
            assert!(plan.pi.as_slice().iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = SinkhornConfig { epsilon: 0.0, ..Default::default() };
        assert!(sinkhorn(&Matrix::zeros(2, 2), &c).is_err());
        let mut cost = Matrix::zeros(2, 2);
        cost[(0, 1)] = f64::NAN;
        assert!(sinkhorn(&cost, &SinkhornConfig::default()).is_err());
    }

    #[test]
    fn non_convergence_is_reported_not_fatal() {
        let mut rng = seeded(2);
        let cost = Matrix::from_fn(30, 5, |_, _| rng.gen::<f64>());
        let c = SinkhornConfig { epsilon: 0.01, max_iter: 1, tol: 1e-12 };
        let plan = sinkhorn(&cost, &c).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations, 1);
    }

    #[test]
    fn ecr_zero_when_embeddings_coincide() {
        let e = Matrix::filled(4, 3, 0.7);
        let out = ecr_loss(&e, &Matrix::filled(2, 3, 0.7), &SinkhornConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    /// Hard assignments respecting the marginals put two genes on each topic;
    /// the best is {0,0}→t0 and {10,10}→t1 with cost 0.
    #[test]
    fn ecr_two_cluster_assignment() {
        let genes = Matrix::from_rows(&[[0.0], [0.0], [10.0], [10.0]]).unwrap();
        let topics = Matrix::from_rows(&[[0.0], [10.0]]).unwrap();
        let mut best = f64::INFINITY;
        for mask in 0u32..16 {
            if mask.count_ones() != 2 {
                continue;
            }
            let c: f64 = (0..4)
                .map(|m| {
                    let k = ((mask >> m) & 1) as usize;
                    let d = genes[(m, 0)] - topics[(k, 0)];
                    d * d / 4.0
                })
                .sum();
            best = best.min(c);
        }
        assert_eq!(best, 0.0);
        let out = ecr_loss(&genes, &topics, &cfg(0.5)).unwrap();
        assert!((out.loss - best).abs() < 1e-6, "{}", out.loss);
    }

    #[test]
    fn ecr_gradient_with_frozen_plan() {
        let mut rng = seeded(5);
        let genes = normal_matrix(&mut rng, 10, 4, 1.0);
        let topics = normal_matrix(&mut rng, 3, 4, 1.0);
        let out = ecr_loss(&genes, &topics, &SinkhornConfig::default()).unwrap();
        let pi = out.plan.pi.clone();
        let err = grad_check(
            |t, p| {
                let plan = t.constant(pi.clone());
                ecr_term(t, p[0], p[1], plan)
            },
            &[genes.clone(), topics.clone()],
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let mut tape = Tape::new();
        let (g, t) = (tape.var(genes), tape.var(topics));
        let plan = tape.constant(pi);
        let l = ecr_term(&mut tape, g, t, plan);
        let grads = tape.backward(l);
        assert!(grads.wrt(g).max_abs_diff(&out.grad_genes) < 1e-14);
        assert!(grads.wrt(t).max_abs_diff(&out.grad_topics) < 1e-14);
    }

    #[test]
    fn transport_cost_decreases_with_epsilon() {
        let mut rng = seeded(8);
        for _ in 0..10 {
            let cost = Matrix::from_fn(5, 3, |_, _| rng.gen::<f64>());
            let costs: Vec<f64> = [1.0, 0.1, 0.01]
                .iter()
                .map(|&e| transport_cost(&cost, &sinkhorn(&cost, &cfg(e)).unwrap().pi))
                .collect();
            assert!(costs[1] <= costs[0] + 1e-12, "{costs:?}");
            assert!(costs[2] <= costs[1] + 1e-12, "{costs:?}");
        }
    }

    #[test]
    fn plan_beats_independent_coupling() {
        let mut rng = seeded(9);
        for _ in 0..10 {
            let cost = Matrix::from_fn(6, 4, |_, _| rng.gen::<f64>() * 2.0);
            let eps = 0.1;
            let plan = sinkhorn(&cost, &cfg(eps)).unwrap();
            let indep = Matrix::filled(6, 4, 1.0 / 24.0);
            assert!(entropic_objective(&cost, &plan.pi, eps) <= entropic_objective(&cost, &indep, eps) + 1e-12);
        }
    }

    #[test]
    fn topic_descent_moves_toward_barycenters() {
        let mut rng = seeded(21);
        let genes = normal_matrix(&mut rng, 40, 3, 1.0);
        let mut topics = normal_matrix(&mut rng, 4, 3, 1.0);
        let c = SinkhornConfig { epsilon: 0.05, ..Default::default() };
        let first = ecr_loss(&genes, &topics, &c).unwrap();
        let before = mean_barycenter_distance(&genes, &topics, &first.plan.pi);
        let mut last = first;
        for _ in 0..200 {
            topics = topics.sub(&last.grad_topics.scale(1.0)).unwrap();
            last = ecr_loss(&genes, &topics, &c).unwrap();
        }
        let after = mean_barycenter_distance(&genes, &topics, &last.plan.pi);
        assert!(after < before, "{before} -> {after}");
    }
}
