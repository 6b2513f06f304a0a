//! Loss terms, each as a tape builder plus a value-only wrapper.
//!
//! * reconstruction: `(1/B) Σ_i [−x_iᵀ log softmax(θ_i Oᵀ) + KL(N(μ_i, σ_i²) ‖ N(0, I))]`
//! * consistency: `−log Σ_i θ_iᵀ φ_i`
//! * neighbourhood: symmetric InfoNCE over assignment rows with cosine
//!   similarity, positives being the sampled cross-view neighbours
//! * entropy: `−Σ_i Σ_k (θ_ik log θ_ik + φ_ik log φ_ik)`

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{Matrix, Tape, Var};

/// Reconstruction error plus Gaussian KL, averaged over the batch.
/// `x` should be a constant.
pub fn reconstruction(tape: &mut Tape, theta: Var, gene_topic: Var, x: Var, mu: Var, logvar: Var) -> Var {
    let b = tape.value(theta).rows() as f64;
    let logits = tape.matmul_nt(theta, gene_topic);
    let log_p = tape.log_softmax_rows(logits);
    let weighted = tape.mul(x, log_p);
    let nll = tape.sum(weighted);
    let nll = tape.scale(nll, -1.0 / b);

    // ½ Σ (σ² + μ² − 1 − log σ²)
    let var = tape.exp(logvar);
    let mu2 = tape.mul(mu, mu);
    let a = tape.add(var, mu2);
    let a = tape.sub(a, logvar);
    let a = tape.add_scalar(a, -1.0);
    let kl = tape.sum(a);
    let kl = tape.scale(kl, 0.5 / b);
    tape.add(nll, kl)
}

pub fn consistency(tape: &mut Tape, theta: Var, phi: Var) -> Var {
    let prod = tape.mul(theta, phi);
    let s = tape.sum(prod);
    let l = tape.log(s);
    tape.scale(l, -1.0)
}

/// One direction of the neighbourhood loss summed over the batch: anchor
/// `a_i`, positive `p_i`, negatives `p_j (j ≠ i)` and `a_j (j ≠ i)`.
fn info_nce(tape: &mut Tape, anchor: Var, positive: Var, temperature: f64) -> Var {
    let b = tape.value(anchor).rows();
    let an = tape.normalize_rows(anchor);
    let pn = tape.normalize_rows(positive);
    let cross = tape.matmul_nt(an, pn);
    let same = tape.matmul_nt(an, an);
    let logits = tape.concat_cols(cross, same);
    let logits = tape.scale(logits, 1.0 / temperature);
    let mask = Matrix::from_fn(b, 2 * b, |r, c| if c == b + r { 0.0 } else { 1.0 });
    let lse = tape.masked_log_sum_exp(logits, mask);
    let pos = tape.diag(cross);
    let pos = tape.scale(pos, 1.0 / temperature);
    let per_cell = tape.sub(lse, pos);
    tape.sum(per_cell)
}

pub fn neighborhood(tape: &mut Tape, theta: Var, phi: Var, theta_nei: Var, phi_nei: Var, temperature: f64) -> Var {
    let b = tape.value(theta).rows() as f64;
    let x_to_v = info_nce(tape, phi, theta_nei, temperature);
    let v_to_x = info_nce(tape, theta, phi_nei, temperature);
    let total = tape.add(x_to_v, v_to_x);
    tape.scale(total, 1.0 / b)
}

/// `Σ_i H(softmax(logits_i))`, computed through log-softmax.
pub fn row_entropy(tape: &mut Tape, logits: Var) -> Var {
    let p = tape.softmax_rows(logits);
    let lp = tape.log_softmax_rows(logits);
    let plp = tape.mul(p, lp);
    let s = tape.sum(plp);
    tape.scale(s, -1.0)
}

/// Entropy of the batch-mean assignment `H((1/B) Σ_i softmax(logits_i))`.
pub fn mean_entropy(tape: &mut Tape, logits: Var) -> Var {
    let b = tape.value(logits).rows();
    let p = tape.softmax_rows(logits);
    let avg = tape.constant(Matrix::filled(1, b, 1.0 / b as f64));
    let mean = tape.matmul(avg, p);
    let lm = tape.log(mean);
    let mlm = tape.mul(mean, lm);
    let s = tape.sum(mlm);
    tape.scale(s, -1.0)
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{}: {}x{} vs {}x{}", what, a.rows(), a.cols(), b.rows(), b.cols());
    }
    Ok(())
}

/// Value of the reconstruction term for given θ, O, counts, μ and log σ².
pub fn loss_re(theta: &Matrix, gene_topic: &Matrix, x: &Matrix, mu: &Matrix, logvar: &Matrix) -> Result<f64> {
    if x.as_slice().iter().any(|&v| v < 0.0) {
        bail!(Data, "reconstruction target has negative entries");
    }
    if theta.cols() != gene_topic.cols() || x.shape() != (theta.rows(), gene_topic.rows()) {
        bail!(Shape, "theta {:?}, O {:?}, x {:?}", theta.shape(), gene_topic.shape(), x.shape());
    }
    same_shape(theta, mu, "theta vs mu")?;
    same_shape(mu, logvar, "mu vs logvar")?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = [theta, gene_topic, x, mu, logvar].iter().map(|m| tape.constant((*m).clone())).collect();
    let l = reconstruction(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4]);
    Ok(tape.scalar(l))
}

pub fn loss_con(theta: &Matrix, phi: &Matrix) -> Result<f64> {
    same_shape(theta, phi, "theta vs phi")?;
    let s: f64 = theta.as_slice().iter().zip(phi.as_slice()).map(|(a, b)| a * b).sum();
    if !(s > 0.0) {
        bail!(InvalidArgument, "assignments have zero overlap; consistency loss is infinite");
    }
    Ok(-libm::log(s))
}

pub fn loss_nei(theta: &Matrix, phi: &Matrix, theta_nei: &Matrix, phi_nei: &Matrix, temperature: f64) -> Result<f64> {
    same_shape(theta, phi, "theta vs phi")?;
    same_shape(theta, theta_nei, "theta vs theta_nei")?;
    same_shape(theta, phi_nei, "theta vs phi_nei")?;
    for m in [theta, phi, theta_nei, phi_nei] {
        if m.iter_rows().any(|r| r.iter().all(|&v| v == 0.0)) {
            bail!(InvalidArgument, "zero-norm assignment row");
        }
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = [theta, phi, theta_nei, phi_nei].iter().map(|m| tape.constant((*m).clone())).collect();
    let l = neighborhood(&mut tape, vars[0], vars[1], vars[2], vars[3], temperature);
    Ok(tape.scalar(l))
}

/// `−Σ (θ log θ + φ log φ)` on probability rows, with `0 log 0 = 0`.
pub fn loss_reg(theta: &Matrix, phi: &Matrix) -> f64 {
    let h = |m: &Matrix| -> f64 {
        m.as_slice().iter().filter(|&&p| p > 0.0).map(|&p| -p * libm::log(p)).sum()
    };
    h(theta) + h(phi)
}

/// `H(mean θ) + H(mean φ)`, the entropies of the batch-mean assignments.
pub fn loss_reg_batch_mean(theta: &Matrix, phi: &Matrix) -> f64 {
    let h = |m: &Matrix| -> f64 {
        let b = m.rows() as f64;
        m.col_sums()
            .into_iter()
            .map(|c| c / b)
            .filter(|&p| p > 0.0)
            .map(|p| -p * libm::log(p))
            .sum()
    };
    h(theta) + h(phi)
}
