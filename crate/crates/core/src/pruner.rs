//! Score fusion, constraint-aware global ranking, elastic mask extraction,
//! and the end-to-end search driver.
//!
//! The pipeline turns per-structure local curvature scores and a per-unit
//! factor vector `c` into a single importance ranking over every attention
//! head and FFN neuron. Masks for any sparsity are then read off the ranking:
//! walk from least important, drop structures while the dropped budget stays
//! within the target, skip any drop that would violate a layer's retention
//! floor, and stop at the first structure that no longer fits the budget.
//! Because the drop sequence is fixed per ranking, masks at increasing
//! sparsity are nested.

use crate::curvature::{local_scores_ssl, local_scores_supervised, LocalScores, LossKind};
use crate::error::{Result, SnapError};
use crate::fitness::FitnessContext;
use crate::ssl::CropPlan;
use crate::tensor::Tensor;
use crate::vit::{
    structure_census, ModelWeights, PruneMask, RetentionCaps, StructureCensus, StructureId,
    StructureKind, UnitMode, ViTConfig,
};
use crate::xnes::{CovInit, Xnes};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Unit of account for a sparsity target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneBasis {
    StructureCount,
    ParameterCount,
    Flops,
}

impl fmt::Display for PruneBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruneBasis::StructureCount => write!(f, "structures"),
            PruneBasis::ParameterCount => write!(f, "params"),
            PruneBasis::Flops => write!(f, "flops"),
        }
    }
}

impl std::str::FromStr for PruneBasis {
    type Err = SnapError;
    fn from_str(s: &str) -> Result<PruneBasis> {
        match s {
            "structures" => Ok(PruneBasis::StructureCount),
            "params" => Ok(PruneBasis::ParameterCount),
            "flops" => Ok(PruneBasis::Flops),
            other => Err(SnapError::Config(format!(
                "unknown basis {other:?}; expected structures, params, or flops"
            ))),
        }
    }
}

/// How the search covariance is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaInit {
    Identity,
    Cka,
}

/// A sparsity target and the basis it is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityRequest {
    pub target: f64,
    pub basis: PruneBasis,
}

/// Everything needed to reproduce a ranking, stored alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub iterations: usize,
    pub grid: Vec<f64>,
    pub n_samples_grad: usize,
    pub n_samples_fitness: usize,
    pub batch_size: usize,
    pub pca_k: usize,
    pub lambda: usize,
    pub eta_mu: f64,
    pub eta_sigma: f64,
    pub loss_kind: LossKind,
    pub unit_mode: UnitMode,
    pub sigma_init: SigmaInit,
    pub caps: RetentionCaps,
    pub search_basis: PruneBasis,
    /// True when no factor search ran (zero iterations): the ranking is the
    /// pure local-score order.
    pub local_only: bool,
    pub best_fitness: Option<f64>,
    /// Best fitness seen so far, one entry per iteration.
    pub fitness_history: Vec<f64>,
}

/// Global importance order over every prunable structure, least important
/// first, with the scores and search state that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureRanking {
    /// Least → most important.
    pub order: Vec<StructureId>,
    /// Fused score of `order[i]` (non-decreasing).
    pub fused: Vec<f64>,
    /// Unfused local scores, in census order.
    pub local: Vec<f64>,
    /// Winning per-unit factors.
    pub c: Vec<f64>,
    /// Final search mean.
    pub mu: Vec<f64>,
    /// Final log-covariance factor (`B×B`).
    pub a: Tensor,
    pub provenance: Provenance,
}

impl StructureRanking {
    /// The ranking must be a permutation of the census and carry one factor
    /// per searched unit.
    pub fn validate(&self, census: &StructureCensus) -> Result<()> {
        if self.order.len() != census.n_structures() {
            return Err(SnapError::Contract(format!(
                "ranking covers {} structures, census has {}",
                self.order.len(),
                census.n_structures()
            )));
        }
        let mut seen = vec![false; census.n_structures()];
        for s in &self.order {
            let i = census.index_of(s);
            if i >= seen.len() || seen[i] || census.structures[i] != *s {
                return Err(SnapError::Contract(format!("{s:?} is not a census entry seen once")));
            }
            seen[i] = true;
        }
        if self.fused.len() != self.order.len() {
            return Err(SnapError::Contract("one fused score per ranked structure".into()));
        }
        if self.local.len() != self.order.len() {
            return Err(SnapError::Contract("one local score per census structure".into()));
        }
        if self.c.len() != census.n_units() {
            return Err(SnapError::Contract(format!(
                "{} factors for {} units",
                self.c.len(),
                census.n_units()
            )));
        }
        Ok(())
    }
}

/// Fused prunability score per structure (census order): the local score
/// scaled by its unit's factor. Structures outside the searched set keep a
/// factor of one.
pub fn fuse_scores(local: &LocalScores, c: &[f64], census: &StructureCensus) -> Result<Vec<f64>> {
    local.validate(census)?;
    if c.len() != census.n_units() {
        return Err(SnapError::Contract(format!(
            "{} factors for {} units",
            c.len(),
            census.n_units()
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(SnapError::Contract("factors must be finite".into()));
    }
    Ok(local
        .per_structure
        .iter()
        .zip(&census.unit_of)
        .map(|(&s, unit)| match unit {
            Some(u) => s * c[*u],
            None => s,
        })
        .collect())
}

/// Baseline importance: mean absolute weight over each structure's owned
/// parameters.
pub fn magnitude_scores(w: &ModelWeights, census: &StructureCensus) -> Result<Vec<f64>> {
    if &w.config != census.config() {
        return Err(SnapError::Contract("census built for a different config".into()));
    }
    let cfg = census.config();
    let (d, dk) = (cfg.d_model, cfg.d_key);
    for (l, lw) in w.layers.iter().enumerate() {
        if lw.n_heads(dk) != cfg.n_heads || lw.d_ff() != cfg.d_ff {
            return Err(SnapError::Contract(format!(
                "layer {l} is compacted; magnitude scores need full shapes"
            )));
        }
    }
    let mut scores = Vec::with_capacity(census.n_structures());
    for s in &census.structures {
        let lw = &w.layers[s.layer];
        let sum = match s.kind {
            StructureKind::AttentionHead => {
                let mut acc = 0.0;
                for t in [&lw.wq, &lw.wk, &lw.wv] {
                    for r in s.index * dk..(s.index + 1) * dk {
                        acc += t.row(r).iter().map(|v| v.abs()).sum::<f64>();
                    }
                }
                for i in 0..lw.wo.rows() {
                    for c in s.index * dk..(s.index + 1) * dk {
                        acc += lw.wo.at2(i, c).abs();
                    }
                }
                acc / (4 * dk * d) as f64
            }
            StructureKind::FfnNeuron => {
                let mut acc = lw.w_in.row(s.index).iter().map(|v| v.abs()).sum::<f64>();
                acc += lw.b_in.data()[s.index].abs();
                for i in 0..lw.w_out.rows() {
                    acc += lw.w_out.at2(i, s.index).abs();
                }
                acc / (2 * d + 1) as f64
            }
        };
        scores.push(sum);
    }
    Ok(scores)
}

/// Ascending sort of the census by fused score; ties fall back to
/// (layer, kind, index) order, so equal-score rankings are deterministic.
pub fn rank_structures(
    fused: &[f64],
    census: &StructureCensus,
) -> Result<(Vec<StructureId>, Vec<f64>)> {
    if fused.len() != census.n_structures() {
        return Err(SnapError::Contract(format!(
            "{} scores for a census of {} structures",
            fused.len(),
            census.n_structures()
        )));
    }
    if fused.iter().any(|s| !s.is_finite()) {
        return Err(SnapError::Contract("fused scores must be finite".into()));
    }
    let mut idx: Vec<usize> = (0..fused.len()).collect();
    idx.sort_by(|&a, &b| {
        fused[a]
            .partial_cmp(&fused[b])
            .unwrap()
            .then_with(|| census.structures[a].cmp(&census.structures[b]))
    });
    let order = idx.iter().map(|&i| census.structures[i]).collect();
    let scores = idx.iter().map(|&i| fused[i]).collect();
    Ok((order, scores))
}

fn basis_weights(basis: PruneBasis, config: &ViTConfig) -> (f64, f64) {
    match basis {
        PruneBasis::StructureCount => (1.0, 1.0),
        PruneBasis::ParameterCount => (
            (4 * config.d_key * config.d_model) as f64,
            (2 * config.d_model + 1) as f64,
        ),
        PruneBasis::Flops => {
            let (h, n) = crate::analytics::per_structure_flops(config);
            (h as f64, n as f64)
        }
    }
}

fn total_weight(basis: PruneBasis, config: &ViTConfig) -> f64 {
    let (wh, wn) = basis_weights(basis, config);
    config.n_layers as f64 * (config.n_heads as f64 * wh + config.d_ff as f64 * wn)
}

/// Walk the order least-important-first, dropping while the dropped weight
/// stays within `budget`; skip floor violations, stop at the first structure
/// that no longer fits.
fn budget_walk(
    order: &[StructureId],
    config: &ViTConfig,
    caps: &RetentionCaps,
    basis: PruneBasis,
    budget: f64,
) -> (PruneMask, f64) {
    let (wh, wn) = basis_weights(basis, config);
    let min_h = caps.min_heads(config.n_heads);
    let min_f = caps.min_neurons(config.d_ff);
    let mut kept_h = vec![config.n_heads; config.n_layers];
    let mut kept_f = vec![config.d_ff; config.n_layers];
    let mut mask = PruneMask::all_keep(config);
    let mut dropped = 0.0;
    for s in order {
        let (weight, kept, min) = match s.kind {
            StructureKind::AttentionHead => (wh, &mut kept_h[s.layer], min_h),
            StructureKind::FfnNeuron => (wn, &mut kept_f[s.layer], min_f),
        };
        if *kept <= min {
            continue;
        }
        if dropped + weight > budget * (1.0 + 1e-12) + 1e-9 {
            break;
        }
        mask.drop(s);
        *kept -= 1;
        dropped += weight;
    }
    (mask, dropped)
}

/// Largest sparsity the retention floors allow, and the layer retaining the
/// most weight at that point (the constraint to name when a target is
/// infeasible). Ties go to the lowest layer index.
pub fn max_sparsity(
    basis: PruneBasis,
    config: &ViTConfig,
    caps: &RetentionCaps,
) -> (f64, usize) {
    let (wh, wn) = basis_weights(basis, config);
    let min_h = caps.min_heads(config.n_heads) as f64;
    let min_f = caps.min_neurons(config.d_ff) as f64;
    let retained_per_layer = min_h * wh + min_f * wn;
    let total = total_weight(basis, config);
    let max = (total - config.n_layers as f64 * retained_per_layer) / total;
    // With uniform layer shapes every layer retains the same weight; the
    // first layer is reported as the binding one.
    (max, 0)
}

/// Materialize the mask for one sparsity target by walking the ranking.
/// Returns the mask together with the achieved sparsity, which sits within
/// one structure's weight below the target.
pub fn extract_mask(
    ranking: &StructureRanking,
    request: SparsityRequest,
    config: &ViTConfig,
    caps: &RetentionCaps,
) -> Result<(PruneMask, f64)> {
    if !request.target.is_finite() || !(0.0..1.0).contains(&request.target) {
        return Err(SnapError::Config(format!(
            "sparsity target must lie in [0, 1), got {}",
            request.target
        )));
    }
    let expected = config.n_layers * (config.n_heads + config.d_ff);
    if ranking.order.len() != expected {
        return Err(SnapError::Contract(format!(
            "ranking covers {} structures, config implies {expected}",
            ranking.order.len()
        )));
    }
    let (max, binding) = max_sparsity(request.basis, config, caps);
    if request.target > max + 1e-9 {
        return Err(SnapError::Infeasible {
            layer: binding,
            detail: format!(
                "requested {} sparsity {:.4} exceeds the feasible maximum {:.4} set by \
                 per-layer retention floors",
                request.basis, request.target, max
            ),
        });
    }
    let total = total_weight(request.basis, config);
    let (mask, dropped) = budget_walk(&ranking.order, config, caps, request.basis, request.target * total);
    Ok((mask, dropped / total))
}

/// Run configuration for the full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapConfig {
    pub seed: u64,
    pub iterations: usize,
    pub grid: Vec<f64>,
    pub n_samples_grad: usize,
    pub n_samples_fitness: usize,
    pub batch_size: usize,
    pub pca_k: usize,
    pub loss_kind: LossKind,
    pub unit_mode: UnitMode,
    pub sigma_init: SigmaInit,
    pub caps: RetentionCaps,
    pub search_basis: PruneBasis,
    /// Crop geometry override; `None` derives it from the image size.
    pub crop_plan: Option<CropPlan>,
}

impl SnapConfig {
    /// Defaults: 50 iterations over the {0.1, 0.3, 0.5, 0.6} grid, 256
    /// samples each for gradients and fitness, batches of 16.
    pub fn new(seed: u64) -> SnapConfig {
        SnapConfig {
            seed,
            iterations: 50,
            grid: vec![0.1, 0.3, 0.5, 0.6],
            n_samples_grad: 256,
            n_samples_fitness: 256,
            batch_size: 16,
            pca_k: 16,
            loss_kind: LossKind::Ssl,
            unit_mode: UnitMode::Full,
            sigma_init: SigmaInit::Identity,
            caps: RetentionCaps::default(),
            search_basis: PruneBasis::ParameterCount,
        crop_plan: None,
        }
    }

    fn validate(&self, config: &ViTConfig) -> Result<()> {
        if self.iterations > 0 {
            if self.grid.is_empty() {
                return Err(SnapError::Config("fitness grid must not be empty".into()));
            }
            let mut prev = -1.0;
            for &s in &self.grid {
                if !s.is_finite() || !(0.0..1.0).contains(&s) {
                    return Err(SnapError::Config(format!("grid point {s} outside [0, 1)")));
                }
                if s <= prev {
                    return Err(SnapError::Config("grid must be strictly increasing".into()));
                }
                prev = s;
            }
            let (max, _) = max_sparsity(self.search_basis, config, &self.caps);
            if prev > max + 1e-9 {
                return Err(SnapError::Config(format!(
                    "grid point {prev} exceeds the feasible maximum sparsity {max:.4}"
                )));
            }
            if self.n_samples_fitness == 0 {
                return Err(SnapError::Config("fitness needs at least one sample".into()));
            }
            if self.pca_k == 0 {
                return Err(SnapError::Config("pca_k must be at least 1".into()));
            }
        }
        if self.n_samples_grad == 0 || self.batch_size == 0 {
            return Err(SnapError::Config("gradient scoring needs samples and a batch size".into()));
        }
        Ok(())
    }
}

fn rows_slice(images: &Tensor, start: usize, count: usize) -> Tensor {
    let shape = images.shape();
    let per: usize = shape[1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[0] = count;
    Tensor::from_vec(&out_shape, images.data()[start * per..(start + count) * per].to_vec())
}

fn grad_batches(images: &Tensor, n: usize, batch: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let count = batch.min(n - start);
        out.push(rows_slice(images, start, count));
        start += count;
    }
    out
}

/// Grid masks for one candidate factor vector, via fuse → rank → walk.
fn candidate_masks(
    local: &LocalScores,
    c: &[f64],
    census: &StructureCensus,
    cfg: &SnapConfig,
) -> Result<Vec<PruneMask>> {
    let fused = fuse_scores(local, c, census)?;
    let (order, _) = rank_structures(&fused, census)?;
    let config = census.config();
    let total = total_weight(cfg.search_basis, config);
    Ok(cfg
        .grid
        .iter()
        .map(|&s| budget_walk(&order, config, &cfg.caps, cfg.search_basis, s * total).0)
        .collect())
}

/// Full pipeline: local curvature scores, factor search over the unit
/// covariance, best-ever candidate selection, fusion, and global ranking.
///
/// `images` supplies both gradient samples (the first `n_samples_grad` rows)
/// and the fitness probe (the last `n_samples_fitness` rows — disjoint from
/// the gradient slice when enough rows exist). `labels` is only consulted for
/// cross-entropy scoring.
pub fn run_snapvit(
    weights: &ModelWeights,
    images: &Tensor,
    labels: Option<&[usize]>,
    cfg: &SnapConfig,
) -> Result<StructureRanking> {
    run_snapvit_with_progress(weights, images, labels, cfg, |_, _| {})
}

/// [`run_snapvit`] with an observer called after each search iteration with
/// `(iteration index, best fitness so far)`. The observer cannot influence
/// the run.
pub fn run_snapvit_with_progress(
    weights: &ModelWeights,
    images: &Tensor,
    labels: Option<&[usize]>,
    cfg: &SnapConfig,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<StructureRanking> {
    weights.validate()?;
    cfg.validate(&weights.config)?;
    let census = structure_census(&weights.config, cfg.unit_mode)?;
    let n_rows = images.shape()[0];
    let needed = cfg.n_samples_grad.max(if cfg.iterations > 0 { cfg.n_samples_fitness } else { 0 });
    if n_rows < needed {
        return Err(SnapError::Data(format!(
            "dataset has {n_rows} samples, the run needs {needed}"
        )));
    }

    let batches = grad_batches(images, cfg.n_samples_grad, cfg.batch_size);
    let local = match cfg.loss_kind {
        LossKind::Ssl => {
            let head = weights.ssl_head.as_ref().ok_or_else(|| {
                SnapError::Config(
                    "label-free scoring needs projection-head weights; this checkpoint has none"
                        .into(),
                )
            })?;
            let plan = cfg
                .crop_plan
                .clone()
                .unwrap_or_else(|| CropPlan::for_image_size(weights.config.image_size));
            local_scores_ssl(weights, head, &batches, &plan, &census, cfg.seed)?
        }
        LossKind::CrossEntropy => {
            let labels = labels.ok_or_else(|| {
                SnapError::Data("cross-entropy scoring needs labels".into())
            })?;
            if labels.len() < cfg.n_samples_grad {
                return Err(SnapError::Data(format!(
                    "{} labels for {} gradient samples",
                    labels.len(),
                    cfg.n_samples_grad
                )));
            }
            let mut labeled = Vec::with_capacity(batches.len());
            let mut start = 0;
            for b in batches {
                let n = b.shape()[0];
                labeled.push((b, labels[start..start + n].to_vec()));
                start += n;
            }
            local_scores_supervised(weights, &labeled, &census)?
        }
    };

    let n_units = census.n_units();
    let mut provenance = Provenance {
        seed: cfg.seed,
        iterations: cfg.iterations,
        grid: cfg.grid.clone(),
        n_samples_grad: cfg.n_samples_grad,
        n_samples_fitness: cfg.n_samples_fitness,
        batch_size: cfg.batch_size,
        pca_k: cfg.pca_k,
        lambda: crate::xnes::default_lambda(n_units),
        eta_mu: 1.0,
        eta_sigma: crate::xnes::default_eta_sigma(n_units),
        loss_kind: cfg.loss_kind,
        unit_mode: cfg.unit_mode,
        sigma_init: cfg.sigma_init,
        caps: cfg.caps,
        search_basis: cfg.search_basis,
        local_only: cfg.iterations == 0,
        best_fitness: None,
        fitness_history: Vec::new(),
    };

    if cfg.iterations == 0 {
        // No factor search: all-equal factors, pure local ranking.
        let c = vec![1.0; n_units];
        let fused = fuse_scores(&local, &c, &census)?;
        let (order, scores) = rank_structures(&fused, &census)?;
        return Ok(StructureRanking {
            order,
            fused: scores,
            local: local.per_structure,
            c,
            mu: vec![0.0; n_units],
            a: Tensor::zeros(&[n_units, n_units]),
            provenance,
        });
    }

    let probe = rows_slice(images, n_rows - cfg.n_samples_fitness, cfg.n_samples_fitness);
    let ctx = FitnessContext::new(weights, &probe, cfg.pca_k)?;
    let cov = match cfg.sigma_init {
        SigmaInit::Identity => CovInit::Isotropic(1.0),
        SigmaInit::Cka => {
            let cka =
                crate::analytics::cka_sigma_init(weights, &probe, cfg.n_samples_fitness, &census)?;
            CovInit::Matrix(cka.matrix)
        }
    };
    let mut es = Xnes::new(&vec![0.0; n_units], cov, cfg.seed)?;
    provenance.lambda = es.lambda();
    provenance.eta_mu = es.eta_mu();
    provenance.eta_sigma = es.eta_sigma();

    let mut best_f = f64::NEG_INFINITY;
    let mut best_c = vec![1.0; n_units];
    for iter in 0..cfg.iterations {
        let pop = es.ask()?;
        let fits: Vec<f64> = pop
            .candidates
            .par_iter()
            .map(|c| {
                let masks = candidate_masks(&local, c, &census, cfg)?;
                ctx.grid_fitness(&masks)
            })
            .collect::<Result<Vec<f64>>>()?;
        for (c, &f) in pop.candidates.iter().zip(&fits) {
            if f > best_f {
                best_f = f;
                best_c = c.clone();
            }
        }
        provenance.fitness_history.push(best_f);
        on_iteration(iter, best_f);
        es.tell(&pop, &fits)?;
    }
    provenance.best_fitness = Some(best_f);

    let fused = fuse_scores(&local, &best_c, &census)?;
    let (order, scores) = rank_structures(&fused, &census)?;
    Ok(StructureRanking {
        order,
        fused: scores,
        local: local.per_structure,
        c: best_c,
        mu: es.mu().to_vec(),
        a: es.log_cov_factor().clone(),
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::SslHeadWeights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn micro_config() -> ViTConfig {
        let mut cfg = ViTConfig::toy();
        cfg.image_size = 8;
        cfg.patch_size = 4;
        cfg.d_model = 8;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_key = 4;
        cfg.d_ff = 8;
        cfg
    }

    fn scores(v: Vec<f64>) -> LocalScores {
        LocalScores { per_structure: v, n_samples_used: 1, loss_kind: LossKind::Ssl }
    }

    fn ranking_from(order: Vec<StructureId>, fused: Vec<f64>, n_units: usize) -> StructureRanking {
        let local = fused.clone();
        StructureRanking {
            order,
            fused,
            local,
            c: vec![1.0; n_units],
            mu: vec![0.0; n_units],
            a: Tensor::zeros(&[n_units, n_units]),
            provenance: Provenance {
                seed: 0,
                iterations: 0,
                grid: vec![],
                n_samples_grad: 0,
                n_samples_fitness: 0,
                batch_size: 16,
                pca_k: 1,
                lambda: crate::xnes::default_lambda(n_units),
                eta_mu: 1.0,
                eta_sigma: crate::xnes::default_eta_sigma(n_units),
                loss_kind: LossKind::Ssl,
                unit_mode: UnitMode::Full,
                sigma_init: SigmaInit::Identity,
                caps: RetentionCaps::default(),
                search_basis: PruneBasis::ParameterCount,
                local_only: true,
                best_fitness: None,
                fitness_history: vec![],
            },
        }
    }

    fn random_ranking(config: &ViTConfig, seed: u64) -> (StructureRanking, StructureCensus) {
        let census = structure_census(config, UnitMode::Full).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let fused: Vec<f64> = (0..census.n_structures()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (order, sorted) = rank_structures(&fused, &census).unwrap();
        (ranking_from(order, sorted, census.n_units()), census)
    }

    #[test]
    fn fuse_matches_hand_example() {
        // One layer, two heads, one neuron: local {1, 2, 3} with factors
        // {2, 1, 0.5} over units (head 0, head 1, ffn) fuses to {2, 2, 1.5}.
        let mut cfg = micro_config();
        cfg.d_ff = 1;
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        assert_eq!(census.n_structures(), 3);
        assert_eq!(census.n_units(), 3);
        let fused = fuse_scores(&scores(vec![1.0, 2.0, 3.0]), &[2.0, 1.0, 0.5], &census).unwrap();
        assert_eq!(fused, vec![2.0, 2.0, 1.5]);
    }

    #[test]
    fn all_ones_factors_reproduce_local_scores() {
        let cfg = micro_config();
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let local = scores((0..10).map(|i| 0.1 + i as f64).collect());
        let fused = fuse_scores(&local, &vec![1.0; 3], &census).unwrap();
        assert_eq!(fused, local.per_structure);
    }

    #[test]
    fn zero_factor_annihilates_the_unit() {
        let cfg = micro_config();
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let local = scores((0..10).map(|i| 1.0 + i as f64).collect());
        // Silence the FFN unit: its eight neurons score zero and rank first.
        let fused = fuse_scores(&local, &[1.0, 1.0, 0.0], &census).unwrap();
        assert!(fused[2..].iter().all(|&v| v == 0.0));
        let (order, _) = rank_structures(&fused, &census).unwrap();
        assert!(order[..8].iter().all(|s| s.kind == StructureKind::FfnNeuron));
    }

    #[test]
    fn ffn_only_mode_leaves_head_scores_unscaled() {
        let cfg = micro_config();
        let census = structure_census(&cfg, UnitMode::FfnOnly).unwrap();
        assert_eq!(census.n_units(), 1);
        let local = scores((0..10).map(|i| 1.0 + i as f64).collect());
        let fused = fuse_scores(&local, &[0.25], &census).unwrap();
        assert_eq!(&fused[..2], &local.per_structure[..2]);
        for j in 2..10 {
            assert_eq!(fused[j], local.per_structure[j] * 0.25);
        }
    }

    #[test]
    fn equal_scores_rank_in_census_order() {
        let cfg = micro_config();
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let (order, sorted) = rank_structures(&vec![0.7; 10], &census).unwrap();
        assert_eq!(order, census.structures);
        assert!(sorted.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn rank_starts_at_the_global_minimum() {
        let mut cfg = micro_config();
        cfg.n_layers = 3;
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let fused: Vec<f64> = (0..census.n_structures()).map(|_| rng.gen_range(0.0..9.0)).collect();
        let (order, sorted) = rank_structures(&fused, &census).unwrap();
        let min = fused.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(sorted[0], min);
        assert_eq!(census.index_of(&order[0]), fused.iter().position(|&v| v == min).unwrap());
        assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
        let rk = ranking_from(order, sorted, census.n_units());
        rk.validate(&census).unwrap();
    }

    #[test]
    fn uniform_scaling_leaves_the_ranking_unchanged() {
        let cfg = ViTConfig::toy();
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let local = scores((0..census.n_structures()).map(|_| rng.gen_range(0.0..2.0)).collect());
        let c: Vec<f64> = (0..census.n_units()).map(|_| rng.gen_range(0.1..3.0)).collect();
        let base = rank_structures(&fuse_scores(&local, &c, &census).unwrap(), &census).unwrap().0;
        let scaled_local = scores(local.per_structure.iter().map(|v| v * 3.1).collect());
        let scaled_c: Vec<f64> = c.iter().map(|v| v * 0.5).collect();
        let again =
            rank_structures(&fuse_scores(&scaled_local, &scaled_c, &census).unwrap(), &census)
                .unwrap()
                .0;
        assert_eq!(base, again);
    }

    #[test]
    fn zero_target_keeps_everything() {
        let (rk, census) = random_ranking(&ViTConfig::toy(), 11);
        let cfg = census.config().clone();
        for basis in [PruneBasis::StructureCount, PruneBasis::ParameterCount, PruneBasis::Flops] {
            let (mask, achieved) = extract_mask(
                &rk,
                SparsityRequest { target: 0.0, basis },
                &cfg,
                &RetentionCaps::default(),
            )
            .unwrap();
            assert!(mask.is_all_keep());
            assert_eq!(achieved, 0.0);
        }
    }

    #[test]
    fn max_target_on_vit_b_keeps_exactly_the_floors() {
        let config = ViTConfig::vit_b16();
        let (rk, _) = random_ranking(&config, 13);
        let caps = RetentionCaps::default();
        for basis in [PruneBasis::StructureCount, PruneBasis::ParameterCount] {
            let (max, _) = max_sparsity(basis, &config, &caps);
            let (mask, achieved) =
                extract_mask(&rk, SparsityRequest { target: max, basis }, &config, &caps).unwrap();
            for l in 0..config.n_layers {
                assert_eq!(mask.kept_heads(l), 2, "layer {l}");
                assert_eq!(mask.kept_neurons(l), 154, "layer {l}");
            }
            assert!((achieved - max).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_basis_lands_within_one_structure_of_the_target() {
        let (rk, census) = random_ranking(&ViTConfig::toy(), 17);
        let config = census.config().clone();
        let caps = RetentionCaps::default();
        let (mask, achieved) = extract_mask(
            &rk,
            SparsityRequest { target: 0.5, basis: PruneBasis::ParameterCount },
            &config,
            &caps,
        )
        .unwrap();
        let total = census.total_owned_params() as f64;
        let kept: usize = census
            .structures
            .iter()
            .zip(&census.params)
            .filter(|(s, _)| mask.keeps(s))
            .map(|(_, p)| *p)
            .sum();
        let dropped_frac = 1.0 - kept as f64 / total;
        assert!((dropped_frac - achieved).abs() < 1e-12);
        let head_params = (4 * config.d_key * config.d_model) as f64;
        assert!(achieved <= 0.5 + 1e-12);
        assert!(0.5 - achieved <= head_params / total, "achieved {achieved}");
    }

    #[test]
    fn sweep_is_nested_capped_and_monotone() {
        let (rk, census) = random_ranking(&ViTConfig::toy(), 19);
        let config = census.config().clone();
        let caps = RetentionCaps::default();
        for basis in [PruneBasis::StructureCount, PruneBasis::ParameterCount, PruneBasis::Flops] {
            let (wh, wn) = basis_weights(basis, &config);
            let total = total_weight(basis, &config);
            let max_weight = wh.max(wn);
            let mut prev_mask: Option<PruneMask> = None;
            let mut prev_achieved = -1.0;
            for i in 0..30 {
                let target = 0.8 * i as f64 / 29.0;
                let (mask, achieved) =
                    extract_mask(&rk, SparsityRequest { target, basis }, &config, &caps).unwrap();
                mask.validate(&config, &caps).unwrap();
                assert!(achieved <= target + 1e-12);
                assert!(target - achieved <= max_weight / total + 1e-12);
                assert!(achieved + 1e-12 >= prev_achieved);
                if let Some(prev) = &prev_mask {
                    for s in &census.structures {
                        if !prev.keeps(s) {
                            assert!(!mask.keeps(s), "dropped {s:?} reappeared at target {target}");
                        }
                    }
                }
                prev_mask = Some(mask);
                prev_achieved = achieved;
            }
        }
    }

    #[test]
    fn infeasible_target_reports_the_binding_layer() {
        let (rk, census) = random_ranking(&ViTConfig::toy(), 23);
        let config = census.config().clone();
        let err = extract_mask(
            &rk,
            SparsityRequest { target: 0.99, basis: PruneBasis::ParameterCount },
            &config,
            &RetentionCaps::default(),
        )
        .unwrap_err();
        match err {
            SnapError::Infeasible { layer, detail } => {
                assert_eq!(layer, 0);
                assert!(detail.contains("feasible maximum"));
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn magnitude_scores_rank_inflated_weights_last() {
        let cfg = micro_config();
        let mut w = ModelWeights::random_init(&cfg, 29).unwrap();
        // Inflate head 1's owned weights far beyond the 0.02-std init.
        let l0 = &mut w.layers[0];
        for t in [&mut l0.wq, &mut l0.wk, &mut l0.wv] {
            for r in cfg.d_key..2 * cfg.d_key {
                for v in t.row_mut(r) {
                    *v = 5.0;
                }
            }
        }
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let scores = magnitude_scores(&w, &census).unwrap();
        let head1 = census.index_of(&StructureId {
            layer: 0,
            kind: StructureKind::AttentionHead,
            index: 1,
        });
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(scores[head1], best);
        // Hand value: 3·dk·d entries at 5.0, plus |wo| column mass, averaged
        // over 4·dk·d owned entries.
        let mut wo_mass = 0.0;
        for i in 0..cfg.d_model {
            for c in cfg.d_key..2 * cfg.d_key {
                wo_mass += w.layers[0].wo.at2(i, c).abs();
            }
        }
        let expect = (3.0 * (cfg.d_key * cfg.d_model) as f64 * 5.0 + wo_mass)
            / (4 * cfg.d_key * cfg.d_model) as f64;
        assert!((scores[head1] - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_weights_give_constant_magnitude_scores() {
        let cfg = micro_config();
        let mut w = ModelWeights::random_init(&cfg, 31).unwrap();
        for l in &mut w.layers {
            for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w_in, &mut l.w_out] {
                for v in t.data_mut() {
                    *v = -0.3;
                }
            }
            for v in l.b_in.data_mut() {
                *v = 0.3;
            }
        }
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let scores = magnitude_scores(&w, &census).unwrap();
        for s in scores {
            assert!((s - 0.3).abs() < 1e-15);
        }
    }

    fn micro_model_with_head(seed: u64) -> (ViTConfig, ModelWeights) {
        let cfg = micro_config();
        let mut w = ModelWeights::random_init(&cfg, seed).unwrap();
        w.ssl_head = Some(SslHeadWeights::random_init(cfg.d_model, 6, seed + 1));
        (cfg, w)
    }

    fn random_images(seed: u64, n: usize, size: usize) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let shape = [n, 3, size, size];
        let len: usize = shape.iter().product();
        Tensor::from_vec(&shape, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn micro_run_config(seed: u64, iterations: usize) -> SnapConfig {
        let mut cfg = SnapConfig::new(seed);
        cfg.iterations = iterations;
        cfg.n_samples_grad = 4;
        cfg.n_samples_fitness = 8;
        cfg.batch_size = 2;
        cfg.pca_k = 4;
        cfg
    }

    #[test]
    fn zero_iterations_give_the_pure_local_ranking() {
        let (cfg, w) = micro_model_with_head(37);
        let images = random_images(38, 12, 8);
        let run = micro_run_config(7, 0);
        let rk = run_snapvit(&w, &images, None, &run).unwrap();
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        rk.validate(&census).unwrap();
        assert!(rk.provenance.local_only);
        assert!(rk.c.iter().all(|&v| v == 1.0));
        assert_eq!(rk.provenance.best_fitness, None);

        // The order must match ranking the local scores directly.
        let head = w.ssl_head.as_ref().unwrap();
        let batches = grad_batches(&images, 4, 2);
        let local = local_scores_ssl(
            &w,
            head,
            &batches,
            &CropPlan::for_image_size(8),
            &census,
            7,
        )
        .unwrap();
        let (order, _) = rank_structures(&local.per_structure, &census).unwrap();
        assert_eq!(rk.order, order);
    }

    #[test]
    fn short_search_runs_are_deterministic_and_tracked() {
        let (_cfg, w) = micro_model_with_head(41);
        let images = random_images(42, 12, 8);
        let run = micro_run_config(9, 3);
        let a = run_snapvit(&w, &images, None, &run).unwrap();
        let b = run_snapvit(&w, &images, None, &run).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.provenance.fitness_history.len(), 3);
        assert!(a
            .provenance
            .fitness_history
            .windows(2)
            .all(|w| w[1] >= w[0]));
        let best = a.provenance.best_fitness.unwrap();
        assert!((-1.0..=1.0).contains(&best));
        assert_eq!(best, *a.provenance.fitness_history.last().unwrap());
        assert!(!a.provenance.local_only);
    }

    #[test]
    fn cka_initialized_search_completes() {
        let (_cfg, w) = micro_model_with_head(47);
        let images = random_images(48, 12, 8);
        let mut run = micro_run_config(11, 2);
        run.sigma_init = SigmaInit::Cka;
        let rk = run_snapvit(&w, &images, None, &run).unwrap();
        assert_eq!(rk.provenance.sigma_init, SigmaInit::Cka);
        assert!(rk.provenance.best_fitness.unwrap().is_finite());
    }

    #[test]
    fn missing_projection_head_is_a_config_error() {
        let cfg = micro_config();
        let w = ModelWeights::random_init(&cfg, 51).unwrap();
        let images = random_images(52, 12, 8);
        let run = micro_run_config(13, 1);
        assert!(matches!(run_snapvit(&w, &images, None, &run), Err(SnapError::Config(_))));
    }

    #[test]
    fn supervised_scoring_path_runs_end_to_end() {
        let mut cfg = micro_config();
        cfg.n_classes = 4;
        let w = ModelWeights::random_init(&cfg, 53).unwrap();
        let images = random_images(54, 12, 8);
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let mut run = micro_run_config(15, 1);
        run.loss_kind = LossKind::CrossEntropy;
        let rk = run_snapvit(&w, &images, Some(&labels), &run).unwrap();
        assert_eq!(rk.provenance.loss_kind, LossKind::CrossEntropy);
        assert!(matches!(
            run_snapvit(&w, &images, None, &run),
            Err(SnapError::Data(_))
        ));
    }
}
