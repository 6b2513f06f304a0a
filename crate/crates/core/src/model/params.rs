use alloc::vec::Vec;

use rand::Rng;

use crate::rng::{normal_matrix, seeded};
use crate::tensor::{Matrix, Tape, Var};

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dense {
    /// in × out
    pub weight: Matrix,
    /// 1 × out
    pub bias: Matrix,
}

impl Dense {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let a = libm::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
        Self {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..=a)),
            bias: Matrix::zeros(1, fan_out),
        }
    }
}

/// A dense layer registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.weight);
        tape.add_row(y, self.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelDims {
    pub n_genes: usize,
    pub external_dim: usize,
    pub n_topics: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelParams {
    pub dims: ModelDims,
    pub enc_hidden1: Dense,
    pub enc_hidden2: Dense,
    pub enc_mu: Dense,
    pub enc_logvar: Dense,
    pub clu_hidden: Dense,
    pub clu_out: Dense,
    /// K × E
    pub topic_emb: Matrix,
    /// V × E
    pub gene_emb: Matrix,
}

/// Every parameter tensor as a tape variable.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub enc_hidden1: DenseVars,
    pub enc_hidden2: DenseVars,
    pub enc_mu: DenseVars,
    pub enc_logvar: DenseVars,
    pub clu_hidden: DenseVars,
    pub clu_out: DenseVars,
    pub topic_emb: Var,
    pub gene_emb: Var,
}

impl ParamVars {
    /// Tape variables in the same order as [`ModelParams::tensors`].
    pub fn all(&self) -> [Var; 14] {
        [
            self.enc_hidden1.weight,
            self.enc_hidden1.bias,
            self.enc_hidden2.weight,
            self.enc_hidden2.bias,
            self.enc_mu.weight,
            self.enc_mu.bias,
            self.enc_logvar.weight,
            self.enc_logvar.bias,
            self.clu_hidden.weight,
            self.clu_hidden.bias,
            self.clu_out.weight,
            self.clu_out.bias,
            self.topic_emb,
            self.gene_emb,
        ]
    }
}

pub const TENSOR_NAMES: [&str; 14] = [
    "encoder.hidden1.weight",
    "encoder.hidden1.bias",
    "encoder.hidden2.weight",
    "encoder.hidden2.bias",
    "encoder.mu.weight",
    "encoder.mu.bias",
    "encoder.logvar.weight",
    "encoder.logvar.bias",
    "cluster.hidden.weight",
    "cluster.hidden.bias",
    "cluster.out.weight",
    "cluster.out.bias",
    "topic_embeddings",
    "gene_embeddings",
];

impl ModelParams {
    /// Xavier-uniform MLP weights; topic and gene embeddings from N(0, 0.02²).
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let ModelDims { n_genes, external_dim, n_topics, embed_dim, hidden } = dims;
        Self {
            dims,
            enc_hidden1: Dense::xavier(&mut rng, n_genes, hidden),
            enc_hidden2: Dense::xavier(&mut rng, hidden, hidden),
            enc_mu: Dense::xavier(&mut rng, hidden, n_topics),
            enc_logvar: Dense::xavier(&mut rng, hidden, n_topics),
            clu_hidden: Dense::xavier(&mut rng, external_dim, hidden),
            clu_out: Dense::xavier(&mut rng, hidden, n_topics),
            topic_emb: normal_matrix(&mut rng, n_topics, embed_dim, 0.02),
            gene_emb: normal_matrix(&mut rng, n_genes, embed_dim, 0.02),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 14] {
        let t = [
            &self.enc_hidden1.weight,
            &self.enc_hidden1.bias,
            &self.enc_hidden2.weight,
            &self.enc_hidden2.bias,
            &self.enc_mu.weight,
            &self.enc_mu.bias,
            &self.enc_logvar.weight,
            &self.enc_logvar.bias,
            &self.clu_hidden.weight,
            &self.clu_hidden.bias,
            &self.clu_out.weight,
            &self.clu_out.bias,
            &self.topic_emb,
            &self.gene_emb,
        ];
        let mut i = 0;
        t.map(|m| {
            i += 1;
            (TENSOR_NAMES[i - 1], m)
        })
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 14] {
        let t = [
            &mut self.enc_hidden1.weight,
            &mut self.enc_hidden1.bias,
            &mut self.enc_hidden2.weight,
            &mut self.enc_hidden2.bias,
            &mut self.enc_mu.weight,
            &mut self.enc_mu.bias,
            &mut self.enc_logvar.weight,
            &mut self.enc_logvar.bias,
            &mut self.clu_hidden.weight,
            &mut self.clu_hidden.bias,
            &mut self.clu_out.weight,
            &mut self.clu_out.bias,
            &mut self.topic_emb,
            &mut self.gene_emb,
        ];
        let mut i = 0;
        t.map(|m| {
            i += 1;
            (TENSOR_NAMES[i - 1], m)
        })
    }

    /// Expected shape of each tensor, in [`tensors`](Self::tensors) order.
    pub fn shapes(dims: &ModelDims) -> [(usize, usize); 14] {
        let ModelDims { n_genes, external_dim, n_topics, embed_dim, hidden } = *dims;
        [
            (n_genes, hidden),
            (1, hidden),
            (hidden, hidden),
            (1, hidden),
            (hidden, n_topics),
            (1, n_topics),
            (hidden, n_topics),
            (1, n_topics),
            (external_dim, hidden),
            (1, hidden),
            (hidden, n_topics),
            (1, n_topics),
            (n_topics, embed_dim),
            (n_genes, embed_dim),
        ]
    }

    /// Rebuilds parameters from tensors in [`tensors`](Self::tensors) order.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Matrix>) -> crate::Result<Self> {
        let shapes = Self::shapes(&dims);
        if tensors.len() != shapes.len() {
            return Err(crate::Error::Shape(alloc::format!("expected 14 tensors, got {}", tensors.len())));
        }
        for ((m, s), name) in tensors.iter().zip(shapes).zip(TENSOR_NAMES) {
            if m.shape() != s {
                return Err(crate::Error::Shape(alloc::format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    s.0,
                    s.1
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        let mut dense = || Dense { weight: next(), bias: next() };
        let enc_hidden1 = dense();
        let enc_hidden2 = dense();
        let enc_mu = dense();
        let enc_logvar = dense();
        let clu_hidden = dense();
        let clu_out = dense();
        Ok(Self { dims, enc_hidden1, enc_hidden2, enc_mu, enc_logvar, clu_hidden, clu_out, topic_emb: next(), gene_emb: next() })
    }

    /// Places every tensor on the tape, as variables when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |m: &Matrix| if trainable { tape.var(m.clone()) } else { tape.constant(m.clone()) };
        let mut dense = |d: &Dense| DenseVars { weight: put(&d.weight), bias: put(&d.bias) };
        let enc_hidden1 = dense(&self.enc_hidden1);
        let enc_hidden2 = dense(&self.enc_hidden2);
        let enc_mu = dense(&self.enc_mu);
        let enc_logvar = dense(&self.enc_logvar);
        let clu_hidden = dense(&self.clu_hidden);
        let clu_out = dense(&self.clu_out);
        ParamVars {
            enc_hidden1,
            enc_hidden2,
            enc_mu,
            enc_logvar,
            clu_hidden,
            clu_out,
            topic_emb: put(&self.topic_emb),
            gene_emb: put(&self.gene_emb),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}
