//! Candidate fitness: how well a pruned model's embeddings match the
//! original network's, measured on a fixed probe set.
//!
//! The original (unpruned) model embeds the probe images once; a PCA basis
//! is fitted to those embeddings and frozen. Every mask is then scored as
//! the mean per-image cosine similarity between the original and pruned
//! embeddings after projecting both through that one frozen basis —
//! pruning is judged by how it moves the images in the original model's own
//! dominant subspace. Masked evaluation uses physical compaction, which
//! computes the identical function with less work.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{Result, SnapError};
use crate::tensor::linalg::sym_eigen;
use crate::tensor::Tensor;
use crate::vit::forward::{embed_tokens, encode_tokens, forward};
use crate::vit::{compact, ModelWeights, PruneMask};

#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// `(1 × d)` feature means of the fitting data.
    pub mean: Tensor,
    /// `(k × d)`, orthonormal rows, strongest component first.
    pub components: Tensor,
    /// Sample variances along each kept component, descending.
    pub eigenvalues: Vec<f64>,
}

/// Fit a PCA basis: center, form the sample covariance (denominator n−1),
/// and keep the top-k eigenvectors.
pub fn fit_pca(data: &Tensor, k: usize) -> Result<PcaBasis> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(SnapError::Data("PCA needs at least two samples".into()));
    }
    if k == 0 || k > d {
        return Err(SnapError::Config(format!("PCA rank {k} out of range 1..={d}")));
    }
    let mut mean = Tensor::zeros(&[1, d]);
    for r in 0..n {
        for (m, v) in mean.data_mut().iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    for m in mean.data_mut() {
        *m /= n as f64;
    }
    let mut centered = data.clone();
    for r in 0..n {
        let row = centered.row_mut(r);
        for (v, m) in row.iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    let cov = centered.matmul_tn(&centered)?.scale(1.0 / (n - 1) as f64);
    let (eigenvalues, vectors) = sym_eigen(&cov)?; // descending, columns are vectors
    let mut components = Tensor::zeros(&[k, d]);
    for c in 0..k {
        for r in 0..d {
            components.set2(c, r, vectors.at2(r, c));
        }
    }
    Ok(PcaBasis { mean, components, eigenvalues: eigenvalues[..k].to_vec() })
}

impl PcaBasis {
    /// Project rows of `x` onto the basis: `(x − mean)·componentsᵀ`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(SnapError::shape("pca_project", "feature width mismatch"));
        }
        let mut centered = x.clone();
        for r in 0..centered.rows() {
            let row = centered.row_mut(r);
            for (v, m) in row.iter_mut().zip(self.mean.data()) {
                *v -= m;
            }
        }
        centered.matmul_nt(&self.components)
    }

    pub fn k(&self) -> usize {
        self.components.rows()
    }
}

/// Mean row-wise cosine similarity between two equally shaped matrices.
/// A pair of zero rows counts as perfectly similar; a single zero row as
/// orthogonal.
pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(SnapError::shape("mean_cosine", "operand shapes differ"));
    }
    if a.rows() == 0 {
        return Err(SnapError::Data("cosine over an empty set".into()));
    }
    let mut total = 0.0;
    for r in 0..a.rows() {
        let (ra, rb) = (a.row(r), b.row(r));
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        };
    }
    Ok(total / a.rows() as f64)
}

/// Frozen reference for scoring masks: the original weights, the probe
/// images (pre-embedded into encoder tokens), the PCA basis fitted to the
/// original embeddings, and those embeddings already projected. Scores are
/// memoized per mask — the search frequently re-proposes identical masks,
/// and the score for a given mask never changes.
#[derive(Debug)]
pub struct FitnessContext {
    weights: ModelWeights,
    n_probe: usize,
    tokens: Tensor,
    n_tok: usize,
    basis: PcaBasis,
    reference: Tensor,
    cache: Mutex<HashMap<Vec<u8>, f64>>,
}

fn mask_key(mask: &PruneMask) -> Vec<u8> {
    let mut key = Vec::new();
    for layer in mask.heads.iter().chain(&mask.neurons) {
        key.extend(layer.iter().map(|&m| m));
    }
    key
}

impl FitnessContext {
    pub fn new(weights: &ModelWeights, probe: &Tensor, pca_k: usize) -> Result<FitnessContext> {
        let original = forward(weights, &PruneMask::all_keep(&weights.config), probe)?;
        let basis = fit_pca(&original, pca_k)?;
        let reference = basis.project(&original)?;
        // The token embedding stage is mask-independent: compute it once.
        let (tokens, n_tok) = embed_tokens(weights, probe)?;
        Ok(FitnessContext {
            weights: weights.clone(),
            n_probe: probe.shape()[0],
            tokens,
            n_tok,
            basis,
            reference,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn basis(&self) -> &PcaBasis {
        &self.basis
    }

    pub fn n_probe(&self) -> usize {
        self.n_probe
    }

    /// Score one mask: compact, embed the probe set, project through the
    /// frozen basis, and average the per-image cosine against the original.
    pub fn mask_fitness(&self, mask: &PruneMask) -> Result<f64> {
        let key = mask_key(mask);
        if let Some(&f) = self.cache.lock().unwrap().get(&key) {
            return Ok(f);
        }
        let pruned = compact(&self.weights, mask)?;
        let emb =
            encode_tokens(&pruned, &pruned.all_keep_mask(), &self.tokens, self.n_probe, self.n_tok)?;
        let projected = self.basis.project(&emb)?;
        let f = mean_cosine(&projected, &self.reference)?;
        self.cache.lock().unwrap().insert(key, f);
        Ok(f)
    }

    /// Mean fitness over a set of masks (one per sparsity level).
    pub fn grid_fitness(&self, masks: &[PruneMask]) -> Result<f64> {
        if masks.is_empty() {
            return Err(SnapError::Contract("fitness needs at least one mask".into()));
        }
        let mut total = 0.0;
        for m in masks {
            total += self.mask_fitness(m)?;
        }
        Ok(total / masks.len() as f64)
    }
}
