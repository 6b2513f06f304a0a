//! The cross-view topic model.
//!
//! A cell's expression profile goes through the topic head (MLP → Gaussian
//! latent → softmax) to give its topic proportions θ. Its external embedding
//! goes through the cluster head (MLP → softmax) to give φ. Genes and topics
//! live in a shared embedding space; the gene-topic matrix O is a softmax
//! over negative squared distances, and cells are reconstructed from
//! `softmax(θ Oᵀ)`.

pub mod loss;
mod params;
mod train;

use alloc::string::String;
use alloc::vec::Vec;

pub use params::{Dense, ModelDims, ModelParams, ParamVars};
pub use train::{
    fit, fit_with, infer_theta, train, train_with, BatchForward, EpochLog, LossTerms, RegMode, RmsProp, StepReport,
    TrainConfig, TrainInputs, TrainResult, Trainer,
};
pub use params::TENSOR_NAMES;

use crate::error::{bail, Result};
use crate::tensor::{Matrix, Tape, Var};

/// Output of the topic head for a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub theta: Matrix,
    pub mu: Matrix,
    pub logvar: Matrix,
}

/// Tape nodes of the topic head.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub mu: Var,
    pub logvar: Var,
    /// Pre-softmax latent `μ + σ ⊙ ζ`.
    pub logits: Var,
    pub theta: Var,
}

/// Topic head on the tape. `noise` holds ζ (same shape as μ); `None` means
/// ζ = 0, the inference-mode posterior mean.
pub fn encoder_forward(tape: &mut Tape, p: &ParamVars, x: Var, noise: Option<Var>) -> EncoderVars {
    let h = p.enc_hidden1.forward(tape, x);
    let h = tape.tanh(h);
    let h = p.enc_hidden2.forward(tape, h);
    let h = tape.tanh(h);
    let mu = p.enc_mu.forward(tape, h);
    let logvar = p.enc_logvar.forward(tape, h);
    let logits = match noise {
        Some(zeta) => {
            let half = tape.scale(logvar, 0.5);
            let sigma = tape.exp(half);
            let jitter = tape.mul(sigma, zeta);
            tape.add(mu, jitter)
        }
        None => mu,
    };
    let theta = tape.softmax_rows(logits);
    EncoderVars { mu, logvar, logits, theta }
}

/// Cluster head on the tape; returns `(logits, φ)`.
pub fn cluster_forward(tape: &mut Tape, p: &ParamVars, v: Var) -> (Var, Var) {
    let h = p.clu_hidden.forward(tape, v);
    let h = tape.tanh(h);
    let logits = p.clu_out.forward(tape, h);
    let phi = tape.softmax_rows(logits);
    (logits, phi)
}

/// Gene-topic matrix on the tape: `softmax_k(−‖g_m − t_k‖² / τ)`.
pub fn gene_topic_forward(tape: &mut Tape, p: &ParamVars, tau: f64) -> Var {
    let d = tape.sq_dist(p.gene_emb, p.topic_emb);
    let s = tape.scale(d, -1.0 / tau);
    tape.softmax_rows(s)
}

/// Runs the topic head on a batch of expression rows. With `noise = None`
/// θ is the softmax of μ.
pub fn encode(params: &ModelParams, x: &Matrix, noise: Option<&Matrix>) -> Result<Encoded> {
    if x.cols() != params.dims.n_genes {
        bail!(Shape, "expression has {} genes, model expects {}", x.cols(), params.dims.n_genes);
    }
    if let Some(z) = noise {
        if z.shape() != (x.rows(), params.dims.n_topics) {
            bail!(Shape, "noise must be {}x{}", x.rows(), params.dims.n_topics);
        }
    }
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let z = noise.map(|z| tape.constant(z.clone()));
    let out = encoder_forward(&mut tape, &p, xv, z);
    let enc = Encoded {
        theta: tape.value(out.theta).clone(),
        mu: tape.value(out.mu).clone(),
        logvar: tape.value(out.logvar).clone(),
    };
    enc.theta.ensure_finite("topic head activations")?;
    enc.logvar.ensure_finite("topic head activations")?;
    Ok(enc)
}

/// Runs the cluster head on a batch of external embeddings.
pub fn encode_external(params: &ModelParams, v: &Matrix) -> Result<Matrix> {
    if v.cols() != params.dims.external_dim {
        bail!(Shape, "external view has {} dims, model expects {}", v.cols(), params.dims.external_dim);
    }
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    let vv = tape.constant(v.clone());
    let (_, phi) = cluster_forward(&mut tape, &p, vv);
    let phi = tape.value(phi).clone();
    phi.ensure_finite("cluster head activations")?;
    Ok(phi)
}

/// `O_mk = exp(−‖g_m − t_k‖²/τ) / Σ_j exp(−‖g_m − t_j‖²/τ)`.
pub fn gene_topic_matrix(genes: &Matrix, topics: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        bail!(InvalidArgument, "temperature must be positive, got {}", tau);
    }
    Ok(genes.sq_dist(topics)?.scale(-1.0 / tau).softmax_rows())
}

/// Indices of the `h` largest entries of each column of `o`, descending,
/// ties by row index.
pub fn top_gene_indices(o: &Matrix, h: usize) -> Result<Vec<Vec<usize>>> {
    if h > o.rows() {
        bail!(InvalidArgument, "asked for {} top genes of {}", h, o.rows());
    }
    Ok((0..o.cols())
        .map(|k| {
            let mut idx: Vec<usize> = (0..o.rows()).collect();
            idx.sort_by(|&a, &b| o[(b, k)].total_cmp(&o[(a, k)]).then(a.cmp(&b)));
            idx.truncate(h);
            idx
        })
        .collect())
}

pub fn extract_top_genes(o: &Matrix, gene_names: &[String], h: usize) -> Result<Vec<Vec<String>>> {
    if gene_names.len() != o.rows() {
        bail!(Shape, "{} gene names for {} rows of O", gene_names.len(), o.rows());
    }
    Ok(top_gene_indices(o, h)?
        .into_iter()
        .map(|list| list.into_iter().map(|g| gene_names[g].clone()).collect())
        .collect())
}

/// Fitted cell-topic and gene-topic matrices with each topic's top genes.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TopicOutputs {
    /// n × K, rows on the simplex.
    pub theta: Matrix,
    /// V × K, rows on the simplex.
    pub gene_topic: Matrix,
    pub gene_names: Vec<String>,
    pub top_genes: Vec<Vec<String>>,
}

impl TopicOutputs {
    pub fn new(theta: Matrix, gene_topic: Matrix, gene_names: Vec<String>, h: usize) -> Result<Self> {
        if theta.cols() != gene_topic.cols() {
            bail!(Shape, "theta has {} topics, gene-topic matrix {}", theta.cols(), gene_topic.cols());
        }
        let top_genes = extract_top_genes(&gene_topic, &gene_names, h)?;
        Ok(Self { theta, gene_topic, gene_names, top_genes })
    }

    pub fn n_topics(&self) -> usize {
        self.theta.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded};
    use alloc::format;

    fn dims() -> ModelDims {
        ModelDims { n_genes: 6, external_dim: 5, n_topics: 3, embed_dim: 4, hidden: 7 }
    }

    #[test]
    fn zero_weights_give_uniform_theta() {
        let mut p = ModelParams::init(dims(), 1);
        for (_, t) in p.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = normal_matrix(&mut seeded(2), 4, 6, 1.0);
        let e = encode(&p, &x, None).unwrap();
        for &v in e.theta.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn theta_rows_sum_to_one_and_noise_is_deterministic() {
        let p = ModelParams::init(dims(), 3);
        let x = normal_matrix(&mut seeded(4), 5, 6, 3.0);
        let z1 = normal_matrix(&mut seeded(9), 5, 3, 1.0);
        let z2 = normal_matrix(&mut seeded(9), 5, 3, 1.0);
        let a = encode(&p, &x, Some(&z1)).unwrap();
        let b = encode(&p, &x, Some(&z2)).unwrap();
        assert_eq!(a.theta, b.theta);
        for s in a.theta.row_sums() {
            assert!((s - 1.0).abs() < 1e-9);
        }
        let phi = encode_external(&p, &normal_matrix(&mut seeded(5), 5, 5, 1.0)).unwrap();
        for s in phi.row_sums() {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_checks_shapes() {
        let p = ModelParams::init(dims(), 3);
        assert!(encode(&p, &Matrix::zeros(2, 5), None).is_err());
        assert!(encode_external(&p, &Matrix::zeros(2, 6)).is_err());
    }

    #[test]
    fn equidistant_gene_gets_uniform_row() {
        let topics = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let genes = Matrix::zeros(1, 2);
        let o = gene_topic_matrix(&genes, &topics, 0.7).unwrap();
        for &v in o.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn small_tau_approaches_one_hot() {
        let topics = Matrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        let genes = Matrix::from_rows(&[[2.9]]).unwrap();
        let o = gene_topic_matrix(&genes, &topics, 1e-3).unwrap();
        assert!((o[(0, 2)] - 1.0).abs() < 1e-12);
        assert!(gene_topic_matrix(&genes, &topics, 0.0).is_err());
    }

    #[test]
    fn gene_topic_matches_direct_formula() {
        let mut rng = seeded(6);
        let g = normal_matrix(&mut rng, 6, 4, 1.0);
        let t = normal_matrix(&mut rng, 3, 4, 1.0);
        let o = gene_topic_matrix(&g, &t, 1.0).unwrap();
        for m in 0..6 {
            let e: Vec<f64> = (0..3)
                .map(|k| {
                    let d: f64 = (0..4).map(|j| (g[(m, j)] - t[(k, j)]).powi(2)).sum();
                    libm::exp(-d)
                })
                .collect();
            let z: f64 = e.iter().sum();
            for k in 0..3 {
                assert!((o[(m, k)] - e[k] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_genes_rules() {
        let names: Vec<String> = (0..5).map(|i| format!("g{i}")).collect();
        let mut o = Matrix::zeros(5, 2);
        o[(3, 0)] = 1.0;
        for m in 0..5 {
            o[(m, 1)] = 0.2;
        }
        let top = extract_top_genes(&o, &names, 2).unwrap();
        assert_eq!(top[0][0], "g3");
        assert_eq!(top[1], ["g0", "g1"]);
        assert!(extract_top_genes(&o, &names, 6).is_err());

        let col = [0.3, 0.9, 0.1, 0.5, 0.7];
        let o = Matrix::from_fn(5, 1, |r, _| col[r]);
        let mut oracle: Vec<usize> = (0..5).collect();
        oracle.sort_by(|&a, &b| col[b].partial_cmp(&col[a]).unwrap());
        assert_eq!(top_gene_indices(&o, 5).unwrap()[0], oracle);
    }
}
