//! Model accounting and embedding diagnostics: theoretical FLOPs, linear
//! CKA similarity between prunable units (used to seed the search
//! covariance), and k-NN evaluation of embeddings.

use crate::error::{Result, SnapError};
use crate::tensor::linalg::sym_eigen;
use crate::tensor::tape::mean_pool_groups;
use crate::tensor::Tensor;
use crate::vit::forward::forward_with_taps;
use crate::vit::{ModelWeights, PruneMask, StructureCensus, UnitKind, ViTConfig};

/// Attention FLOPs for one block, split by computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionFlops {
    pub qkv: u64,
    pub qk_logits: u64,
    pub softmax: u64,
    pub reduction: u64,
    pub projection: u64,
}

impl AttentionFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.qk_logits + self.softmax + self.reduction + self.projection
    }
}

/// Theoretical forward-pass FLOPs, exact integer arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub embeddings: u64,
    pub attention: Vec<AttentionFlops>,
    pub ffn: Vec<u64>,
    pub logits: u64,
    pub total: u64,
}

impl FlopsReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

fn attention_block_flops(t: u64, d: u64, dk: u64, heads: u64) -> AttentionFlops {
    let width = dk * heads;
    AttentionFlops {
        qkv: 2 * t * 3 * d * width,
        qk_logits: 2 * t * t * width,
        softmax: 3 * heads * t * t,
        reduction: 2 * t * t * width,
        projection: 2 * t * width * d,
    }
}

/// Theoretical FLOPs for one forward pass at the config resolution.
///
/// Per-component counts: embeddings 2·n_patch·d_patch²·n_ch·d_model; per
/// block QKV 2·T·3·d·(d_key·h), QK logits 2·T²·(d_key·h), softmax 3·h·T²,
/// reduction 2·T²·(d_key·h), projection 2·T·(d_key·h)·d, and FFN
/// 4·T·d·d_ff (the common 16·T·d² figure is the d_ff = 4d special case);
/// logits 2·d·n_classes. A mask substitutes each layer's surviving head and
/// neuron counts, so an all-keep mask reproduces the unmasked counts
/// exactly. A zero-layer config is allowed and costs embeddings + logits.
pub fn flops(config: &ViTConfig, mask: Option<&PruneMask>) -> Result<FlopsReport> {
    if config.patch_size == 0 || config.image_size % config.patch_size != 0 {
        return Err(SnapError::Config("patch size must divide image size".into()));
    }
    if let Some(m) = mask {
        if !m.shape_matches(config) {
            return Err(SnapError::Constraint("mask shape does not match config".into()));
        }
    }
    let t = config.n_tokens() as u64;
    let d = config.d_model as u64;
    let dk = config.d_key as u64;
    let embeddings = 2
        * config.n_patches() as u64
        * (config.patch_size as u64 * config.patch_size as u64)
        * config.n_channels as u64
        * d;
    let logits = 2 * d * config.n_classes as u64;
    let mut attention = Vec::with_capacity(config.n_layers);
    let mut ffn = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let heads = mask.map_or(config.n_heads, |m| m.kept_heads(l)) as u64;
        let hidden = mask.map_or(config.d_ff, |m| m.kept_neurons(l)) as u64;
        attention.push(attention_block_flops(t, d, dk, heads));
        ffn.push(4 * t * d * hidden);
    }
    let total = embeddings
        + logits
        + attention.iter().map(AttentionFlops::total).sum::<u64>()
        + ffn.iter().sum::<u64>();
    Ok(FlopsReport { embeddings, attention, ffn, logits, total })
}

/// FLOPs of a model as stored, reading each layer's surviving head and
/// neuron counts from the weight shapes. Agrees with [`flops`] under the
/// mask a compacted model was cut with.
pub fn flops_from_weights(w: &ModelWeights) -> Result<FlopsReport> {
    w.validate()?;
    let config = &w.config;
    let base = flops(config, None)?;
    let t = config.n_tokens() as u64;
    let d = config.d_model as u64;
    let dk = config.d_key as u64;
    let mut attention = Vec::with_capacity(w.layers.len());
    let mut ffn = Vec::with_capacity(w.layers.len());
    for layer in &w.layers {
        attention.push(attention_block_flops(t, d, dk, layer.n_heads(config.d_key) as u64));
        ffn.push(4 * t * d * layer.d_ff() as u64);
    }
    let total = base.embeddings
        + base.logits
        + attention.iter().map(AttentionFlops::total).sum::<u64>()
        + ffn.iter().sum::<u64>();
    Ok(FlopsReport { embeddings: base.embeddings, attention, ffn, logits: base.logits, total })
}

/// FLOPs owned by a single attention head and a single FFN neuron at the
/// config resolution. Removing a structure lowers the total by exactly this
/// amount, so FLOPs-based budgets are linear in the mask.
pub fn per_structure_flops(config: &ViTConfig) -> (u64, u64) {
    let t = config.n_tokens() as u64;
    let d = config.d_model as u64;
    let dk = config.d_key as u64;
    let one = attention_block_flops(t, d, dk, 1);
    (one.total(), 4 * t * d)
}

/// Linear centered kernel alignment between two feature matrices sharing
/// rows: ‖Ỹᵀ X̃‖_F² / (‖X̃ᵀX̃‖_F · ‖ỸᵀỸ‖_F) on column-centered inputs.
/// Invariant to orthogonal transforms and isotropic scaling of either side.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(SnapError::shape("linear_cka", "row counts differ"));
    }
    if x.rows() < 2 {
        return Err(SnapError::Data("CKA needs at least two samples".into()));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross = yc.matmul_tn(&xc)?;
    let xx = xc.matmul_tn(&xc)?;
    let yy = yc.matmul_tn(&yc)?;
    let denom = xx.frobenius_norm() * yy.frobenius_norm();
    if denom == 0.0 {
        return Err(SnapError::Degenerate("CKA of a zero-variance input".into()));
    }
    let num = cross.frobenius_norm();
    Ok(num * num / denom)
}

fn center_columns(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut out = x.clone();
    for r in 0..n {
        for (v, m) in out.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// Pairwise CKA between prunable units, floored to positive definite so it
/// can seed a search covariance.
#[derive(Debug, Clone)]
pub struct CkaMatrix {
    pub matrix: Tensor,
    pub n_samples: usize,
}

/// Unit activation similarity on a sample of images. Each attention head
/// contributes its pre-projection context (token-mean-pooled, N×d_key);
/// each FFN block its post-activation hidden vector (token-mean-pooled,
/// N×d_ff). Pairwise linear CKA fills a symmetric B×B matrix, whose
/// eigenvalues are then clipped at 1e-6 to guarantee positive definiteness.
pub fn cka_sigma_init(
    weights: &ModelWeights,
    images: &Tensor,
    n_samples: usize,
    census: &StructureCensus,
) -> Result<CkaMatrix> {
    let avail = images.shape()[0];
    if n_samples < 2 || n_samples > avail {
        return Err(SnapError::Data(format!(
            "requested {n_samples} samples, have {avail} (need ≥ 2)"
        )));
    }
    if &weights.config != census.config() {
        return Err(SnapError::Contract("census built for a different config".into()));
    }
    let probe = slice_images(images, n_samples);
    let (_, taps) =
        forward_with_taps(weights, &PruneMask::all_keep(&weights.config), &probe)?;
    let t = taps.n_tokens;
    let cfg = &weights.config;
    let mut acts: Vec<Tensor> = Vec::with_capacity(census.n_units());
    for unit in &census.units {
        match unit.kind {
            UnitKind::Head(h) => {
                let pooled = mean_pool_groups(&taps.attn_ctx[unit.layer], t);
                let mut slice = Tensor::zeros(&[n_samples, cfg.d_key]);
                for r in 0..n_samples {
                    for c in 0..cfg.d_key {
                        slice.set2(r, c, pooled.at2(r, h * cfg.d_key + c));
                    }
                }
                acts.push(slice);
            }
            UnitKind::FfnBlock => {
                acts.push(mean_pool_groups(&taps.ffn_hidden[unit.layer], t));
            }
        }
    }
    let b = acts.len();
    let mut m = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in i..b {
            let v = linear_cka(&acts[i], &acts[j])?;
            m.set2(i, j, v);
            m.set2(j, i, v);
        }
    }
    // Floor eigenvalues so the matrix is usable as a covariance.
    let (mut evals, vecs) = sym_eigen(&m)?;
    for e in &mut evals {
        *e = e.max(1e-6);
    }
    let mut floored = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            let mut v = 0.0;
            for (k, e) in evals.iter().enumerate() {
                v += vecs.at2(i, k) * e * vecs.at2(j, k);
            }
            floored.set2(i, j, v);
        }
    }
    for i in 0..b {
        for j in 0..i {
            let s = 0.5 * (floored.at2(i, j) + floored.at2(j, i));
            floored.set2(i, j, s);
            floored.set2(j, i, s);
        }
    }
    Ok(CkaMatrix { matrix: floored, n_samples })
}

fn slice_images(images: &Tensor, n: usize) -> Tensor {
    let shape = images.shape();
    let per = shape[1] * shape[2] * shape[3];
    let mut out_shape = shape.to_vec();
    out_shape[0] = n;
    Tensor::from_vec(&out_shape, images.data()[..n * per].to_vec())
}

/// k-nearest-neighbor top-1 accuracy on L2-normalized embeddings with
/// majority voting; vote ties go to the class of the nearest tied-class
/// neighbor.
pub fn knn_eval(
    train_emb: &Tensor,
    train_labels: &[usize],
    test_emb: &Tensor,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    let n_train = train_emb.rows();
    let n_test = test_emb.rows();
    if train_labels.len() != n_train || test_labels.len() != n_test {
        return Err(SnapError::Contract("label count does not match embeddings".into()));
    }
    if k == 0 || k > n_train {
        return Err(SnapError::Contract(format!("k = {k} outside 1..={n_train}")));
    }
    if train_emb.cols() != test_emb.cols() {
        return Err(SnapError::shape("knn_eval", "embedding widths differ"));
    }
    let train = train_emb.l2_normalize_rows();
    let test = test_emb.l2_normalize_rows();
    let mut correct = 0usize;
    for q in 0..n_test {
        let qrow = test.row(q);
        let mut dist: Vec<(f64, usize)> = (0..n_train)
            .map(|i| {
                let d: f64 = train
                    .row(i)
                    .iter()
                    .zip(qrow)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, i)
            })
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let neighbors = &dist[..k];
        let max_label = neighbors.iter().map(|&(_, i)| train_labels[i]).max().unwrap();
        let mut votes = vec![0usize; max_label + 1];
        for &(_, i) in neighbors {
            votes[train_labels[i]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let predicted = neighbors
            .iter()
            .map(|&(_, i)| train_labels[i])
            .find(|&c| votes[c] == top)
            .unwrap();
        if predicted == test_labels[q] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_test as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{structure_census, StructureId, StructureKind, UnitMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn flops_match_published_vit_totals() {
        let s = flops(&ViTConfig::vit_s16(), None).unwrap();
        assert_eq!(s.total, 9_206_147_352);
        let b = flops(&ViTConfig::vit_b16(), None).unwrap();
        assert_eq!(b.total, 35_144_421_936);
        let l = flops(&ViTConfig::vit_l16(), None).unwrap();
        assert_eq!(l.total, 123_154_133_120);
        for (report, expect) in [(&s, 9.2), (&b, 35.1), (&l, 123.2)] {
            let rounded = (report.gflops() * 10.0).round() / 10.0;
            assert!((rounded - expect).abs() < 0.05, "{rounded} vs {expect}");
        }
    }

    #[test]
    fn flops_component_identity_holds() {
        let cfg = ViTConfig::vit_b16();
        let r = flops(&cfg, None).unwrap();
        let attn: u64 = r.attention.iter().map(AttentionFlops::total).sum();
        let ffn: u64 = r.ffn.iter().sum();
        assert_eq!(r.total, r.embeddings + attn + ffn + r.logits);
        // With d_ff = 4·d_model the per-layer FFN term is the published
        // 16·T·d² figure.
        let t = cfg.n_tokens() as u64;
        let d = cfg.d_model as u64;
        assert_eq!(cfg.d_ff as u64, 4 * d);
        assert_eq!(r.ffn[0], 16 * t * d * d);
    }

    #[test]
    fn all_keep_mask_equals_unmasked_exactly() {
        let cfg = ViTConfig::toy();
        let unmasked = flops(&cfg, None).unwrap();
        let masked = flops(&cfg, Some(&PruneMask::all_keep(&cfg))).unwrap();
        assert_eq!(unmasked, masked);
    }

    #[test]
    fn weight_shapes_reproduce_the_masked_report() {
        let cfg = ViTConfig::toy();
        let w = ModelWeights::random_init(&cfg, 3).unwrap();
        assert_eq!(flops_from_weights(&w).unwrap(), flops(&cfg, None).unwrap());
        let mut mask = PruneMask::all_keep(&cfg);
        mask.heads[0][2] = 0;
        mask.neurons[1][7] = 0;
        mask.neurons[1][90] = 0;
        mask.heads[3][0] = 0;
        let small = crate::vit::compact(&w, &mask).unwrap();
        assert_eq!(flops_from_weights(&small).unwrap(), flops(&cfg, Some(&mask)).unwrap());
    }

    #[test]
    fn flops_decrease_by_exactly_the_owned_amount() {
        let cfg = ViTConfig::toy();
        let (head_flops, neuron_flops) = per_structure_flops(&cfg);
        let base = flops(&cfg, None).unwrap().total;
        let mut mask = PruneMask::all_keep(&cfg);
        let mut expected = base;
        let drops = [
            StructureId { layer: 0, kind: StructureKind::AttentionHead, index: 2 },
            StructureId { layer: 1, kind: StructureKind::FfnNeuron, index: 9 },
            StructureId { layer: 3, kind: StructureKind::FfnNeuron, index: 0 },
            StructureId { layer: 2, kind: StructureKind::AttentionHead, index: 0 },
        ];
        for s in &drops {
            mask.drop(s);
            expected -= match s.kind {
                StructureKind::AttentionHead => head_flops,
                StructureKind::FfnNeuron => neuron_flops,
            };
            let now = flops(&cfg, Some(&mask)).unwrap().total;
            assert_eq!(now, expected, "after dropping {s:?}");
            assert!(now < base);
        }
    }

    #[test]
    fn zero_layer_config_counts_embeddings_and_logits_only() {
        let mut cfg = ViTConfig::toy();
        cfg.n_layers = 0;
        cfg.n_classes = 10;
        let r = flops(&cfg, None).unwrap();
        assert_eq!(r.total, r.embeddings + r.logits);
        assert_eq!(r.embeddings, 2 * 16 * 64 * 3 * 64);
        assert_eq!(r.logits, 2 * 64 * 10);
    }

    fn random_matrix(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        use rand_distr::{Distribution, StandardNormal};
        Tensor::from_vec(
            &[n, d],
            (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
    }

    #[test]
    fn cka_identity_scaling_and_rotation_invariance() {
        let x = random_matrix(1, 40, 3);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((linear_cka(&x, &x.scale(3.0)).unwrap() - 1.0).abs() < 1e-12);
        // Rotate features by an explicit 3D rotation.
        let th: f64 = 0.7;
        let r = Tensor::from_vec(
            &[3, 3],
            vec![th.cos(), -th.sin(), 0.0, th.sin(), th.cos(), 0.0, 0.0, 0.0, 1.0],
        );
        let xr = x.matmul(&r).unwrap();
        assert!((linear_cka(&x, &xr).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cka_is_symmetric_low_for_independent_and_rejects_degenerate() {
        let x = random_matrix(2, 500, 6);
        let y = random_matrix(3, 500, 4);
        let a = linear_cka(&x, &y).unwrap();
        let b = linear_cka(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a < 0.1, "{a}");
        assert!((0.0..=1.0).contains(&a));
        assert!(linear_cka(&x, &Tensor::zeros(&[500, 2])).is_err());
    }

    #[test]
    fn cka_matrix_is_symmetric_unit_diagonal_and_pd() {
        let cfg = ViTConfig::toy();
        let w = ModelWeights::random_init(&cfg, 4).unwrap();
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let images = Tensor::from_vec(
            &[40, 3, 32, 32],
            (0..40 * 3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let cka = cka_sigma_init(&w, &images, 32, &census).unwrap();
        assert_eq!(cka.n_samples, 32);
        assert_eq!(cka.matrix.shape(), &[20, 20]);
        for i in 0..20 {
            assert!((cka.matrix.at2(i, i) - 1.0).abs() < 1e-6, "diag {i}");
            for j in 0..20 {
                assert_eq!(cka.matrix.at2(i, j), cka.matrix.at2(j, i));
            }
        }
        let (evals, _) = sym_eigen(&cka.matrix).unwrap();
        assert!(evals.iter().all(|&e| e >= 1e-6 - 1e-9), "{evals:?}");
    }

    #[test]
    fn duplicated_heads_have_unit_cka() {
        let cfg = ViTConfig::toy();
        let mut w = ModelWeights::random_init(&cfg, 6).unwrap();
        // Make head 1 of layer 0 an exact copy of head 0.
        let dk = cfg.d_key;
        for t in [0, 1, 2] {
            let m = match t {
                0 => &mut w.layers[0].wq,
                1 => &mut w.layers[0].wk,
                _ => &mut w.layers[0].wv,
            };
            for r in 0..dk {
                let src = m.row(r).to_vec();
                m.row_mut(dk + r).copy_from_slice(&src);
            }
        }
        let census = structure_census(&cfg, UnitMode::Full).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let images = Tensor::from_vec(
            &[16, 3, 32, 32],
            (0..16 * 3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let cka = cka_sigma_init(&w, &images, 16, &census).unwrap();
        // Units 0 and 1 are heads 0 and 1 of layer 0.
        assert!((cka.matrix.at2(0, 1) - 1.0).abs() < 1e-6, "{}", cka.matrix.at2(0, 1));
    }

    #[test]
    fn knn_memorizes_and_separates_blobs() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let class = i % 2;
            let center = if class == 0 { -5.0 } else { 5.0 };
            data.extend([center + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
            labels.push(class);
        }
        let train = Tensor::from_vec(&[60, 2], data);
        // Duplicated training point, k = 1.
        let probe = Tensor::from_vec(&[1, 2], train.row(3).to_vec());
        let acc = knn_eval(&train, &labels, &probe, &[labels[3]], 1).unwrap();
        assert_eq!(acc, 1.0);
        // Fresh points from each blob, k = 20.
        let mut tdata = Vec::new();
        let mut tlabels = Vec::new();
        for i in 0..20 {
            let class = i % 2;
            let center = if class == 0 { -5.0 } else { 5.0 };
            tdata.extend([center + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
            tlabels.push(class);
        }
        let test = Tensor::from_vec(&[20, 2], tdata);
        assert_eq!(knn_eval(&train, &labels, &test, &tlabels, 20).unwrap(), 1.0);
        // k = train size: everyone gets the global majority (tie → nearest).
        let acc = knn_eval(&train, &labels, &test, &tlabels, 60).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(knn_eval(&train, &labels, &test, &tlabels, 61).is_err());
        assert!(knn_eval(&train, &labels, &test, &tlabels, 0).is_err());
    }

    #[test]
    fn knn_majority_vote_with_global_k_predicts_majority_class() {
        // 3 points of class 0, 2 of class 1: with k = 5 every query gets
        // class 0.
        let train = Tensor::from_vec(
            &[5, 2],
            vec![1.0, 0.0, 0.9, 0.1, 1.1, -0.1, -1.0, 0.0, -0.9, 0.1],
        );
        let labels = [0, 0, 0, 1, 1];
        let test = Tensor::from_vec(&[2, 2], vec![-1.0, 0.05, 1.0, 0.05]);
        let acc = knn_eval(&train, &labels, &test, &[0, 0], 5).unwrap();
        assert_eq!(acc, 1.0);
        let acc = knn_eval(&train, &labels, &test, &[1, 1], 5).unwrap();
        assert_eq!(acc, 0.0);
    }
}
