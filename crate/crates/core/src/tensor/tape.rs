//! Define-by-run reverse-mode differentiation at tensor granularity.
//!
//! A `GradTape` is rebuilt for every batch: forward calls append nodes, and
//! `backward` replays the list in reverse, which visits each node after all
//! of its consumers because node indices are already topologically ordered.
//! Ops are coarse (whole matmuls, a fused multi-head attention) so a full
//! model forward is a few hundred nodes, not millions.

use super::{gelu, gelu_prime, matmul_nn_into, mean_var, softmax_in_place, Tensor};
use crate::error::{Result, SnapError};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Geometry of one fused attention op. `head_mask` has one entry per head
/// present in the Q/K/V projections; a zero entry removes that head's
/// contribution from the output (and therefore from all gradients).
#[derive(Debug, Clone)]
pub struct MhaSpec {
    pub n_heads: usize,
    pub d_key: usize,
    pub n_tokens: usize,
    pub head_mask: Vec<f64>,
}

enum Op {
    Leaf,
    MatmulNN(NodeId, NodeId),
    MatmulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// x (reps·t × n) + tile (t × n) repeated `reps` times down the rows.
    AddTiled { x: NodeId, tile: NodeId, reps: usize },
    /// x (m × n) + bias row (1 × n or n) broadcast over rows.
    AddBias { x: NodeId, bias: NodeId },
    /// Insert `row` before every consecutive block of `group` rows of x.
    PrependRowTiled { row: NodeId, x: NodeId, group: usize },
    /// Elementwise product (same shapes).
    Mul(NodeId, NodeId),
    /// Columns of x scaled by a length-n vector.
    MulCols { x: NodeId, m: NodeId },
    Scale { x: NodeId, k: f64 },
    Gelu(NodeId),
    LayerNorm { x: NodeId, scale: NodeId, shift: NodeId, eps: f64 },
    Mha { q: NodeId, k: NodeId, v: NodeId, spec: MhaSpec, probs: Tensor },
    SelectRows { x: NodeId, indices: Vec<usize> },
    MeanPoolGroups { x: NodeId, group: usize },
    /// Σ over rows of −Σ_c target·log softmax(logits/τ); target is constant.
    CeSoftSum { logits: NodeId, target: Tensor, tau: f64, probs: Tensor },
    SumAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional cotangent per node, `None` for
/// nodes the loss does not depend on.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, materializing zeros for untouched nodes so callers
    /// always get a tensor of the right shape.
    pub fn get_or_zero(&self, id: NodeId, tape: &GradTape) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatmulNN(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatmulNT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(SnapError::shape("add", "operand shapes differ"));
        }
        let v = self.value(a).add(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_tiled(&mut self, x: NodeId, tile: NodeId, reps: usize) -> Result<NodeId> {
        let (xv, tv) = (self.value(x), self.value(tile));
        if xv.cols() != tv.cols() || xv.rows() != tv.rows() * reps {
            return Err(SnapError::shape("add_tiled", "tile does not divide x"));
        }
        let t_rows = tv.rows();
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let tile_row = tv.row(r % t_rows).to_vec();
            for (o, t) in out.row_mut(r).iter_mut().zip(&tile_row) {
                *o += t;
            }
        }
        Ok(self.push(out, Op::AddTiled { x, tile, reps }))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(SnapError::shape("add_bias", "bias length vs columns"));
        }
        let b = bv.data().to_vec();
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    pub fn prepend_row_tiled(&mut self, row: NodeId, x: NodeId, group: usize) -> Result<NodeId> {
        let (rv, xv) = (self.value(row), self.value(x));
        if rv.len() != xv.cols() || xv.rows() % group != 0 {
            return Err(SnapError::shape("prepend_row_tiled", "row/group mismatch"));
        }
        let n = xv.cols();
        let reps = xv.rows() / group;
        let mut out = Tensor::zeros(&[reps * (group + 1), n]);
        for b in 0..reps {
            out.row_mut(b * (group + 1)).copy_from_slice(rv.data());
            for t in 0..group {
                let src = xv.row(b * group + t).to_vec();
                out.row_mut(b * (group + 1) + t + 1).copy_from_slice(&src);
            }
        }
        Ok(self.push(out, Op::PrependRowTiled { row, x, group }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(SnapError::shape("mul", "operand shapes differ"));
        }
        let v = self.value(a).mul(self.value(b));
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn mul_cols(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (xv, mv) = (self.value(x), self.value(m));
        if mv.len() != xv.cols() {
            return Err(SnapError::shape("mul_cols", "mask length vs columns"));
        }
        let mask = mv.data().to_vec();
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, mm) in out.row_mut(r).iter_mut().zip(&mask) {
                *o *= mm;
            }
        }
        Ok(self.push(out, Op::MulCols { x, m }))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x).scale(k);
        self.push(v, Op::Scale { x, k })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn layernorm(&mut self, x: NodeId, scale: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, sv, bv) = (self.value(x), self.value(scale), self.value(shift));
        if sv.len() != xv.cols() || bv.len() != xv.cols() {
            return Err(SnapError::shape("layernorm", "scale/shift length vs columns"));
        }
        let v = xv.layernorm_rows(sv.data(), bv.data(), eps);
        Ok(self.push(v, Op::LayerNorm { x, scale, shift, eps }))
    }

    pub fn mha(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: MhaSpec) -> Result<NodeId> {
        let (out, probs) = mha_forward(self.value(q), self.value(k), self.value(v), &spec)?;
        Ok(self.push(out, Op::Mha { q, k, v, spec, probs }))
    }

    pub fn select_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = Tensor::zeros(&[indices.len(), n]);
        for (r, &i) in indices.iter().enumerate() {
            if i >= xv.rows() {
                return Err(SnapError::shape("select_rows", format!("row {i} out of range")));
            }
            let src = xv.row(i).to_vec();
            out.row_mut(r).copy_from_slice(&src);
        }
        Ok(self.push(out, Op::SelectRows { x, indices }))
    }

    pub fn mean_pool_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 {
            return Err(SnapError::shape("mean_pool_groups", "group does not divide rows"));
        }
        let v = mean_pool_groups(xv, group);
        Ok(self.push(v, Op::MeanPoolGroups { x, group }))
    }

    /// Soft cross-entropy against constant target rows, summed over rows.
    /// Targets act as stop-gradient teacher probabilities.
    pub fn ce_soft_sum(&mut self, logits: NodeId, target: Tensor, tau: f64) -> Result<NodeId> {
        let lv = self.value(logits);
        if target.shape() != lv.shape() {
            return Err(SnapError::shape("ce_soft_sum", "target shape vs logits"));
        }
        if tau <= 0.0 {
            return Err(SnapError::Config(format!("temperature must be positive, got {tau}")));
        }
        let (m, n) = (lv.rows(), lv.cols());
        let mut probs = lv.scale(1.0 / tau);
        let mut total = 0.0;
        for r in 0..m {
            let row = probs.row_mut(r);
            // log-softmax via max shift, accumulate CE, then store probs.
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                total -= target.at2(r, j) * (row[j] - lse);
            }
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::scalar(total), Op::CeSoftSum { logits, target, tau, probs }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    /// Reverse pass from a scalar loss node. Errors if the node is not a
    /// single-element tensor.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(SnapError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(go) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(go);
                    continue;
                }
                Op::MatmulNN(a, b) => {
                    let da = go.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&go)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatmulNT(a, b) => {
                    let da = go.matmul(self.value(*b))?;
                    let db = go.matmul_tn(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, go.clone());
                    accumulate(&mut grads, *b, go);
                }
                Op::AddTiled { x, tile, reps } => {
                    let t_rows = self.value(*tile).rows();
                    let n = self.value(*tile).cols();
                    let mut dt = Tensor::zeros(&[t_rows, n]);
                    for r in 0..go.rows() {
                        let src = go.row(r).to_vec();
                        for (o, s) in dt.row_mut(r % t_rows).iter_mut().zip(&src) {
                            *o += s;
                        }
                    }
                    let _ = reps;
                    accumulate(&mut grads, *x, go);
                    accumulate(&mut grads, *tile, dt);
                }
                Op::AddBias { x, bias } => {
                    let n = go.cols();
                    let mut db = Tensor::zeros(self.value(*bias).shape());
                    for r in 0..go.rows() {
                        for (o, s) in db.data_mut().iter_mut().zip(go.row(r)) {
                            *o += s;
                        }
                    }
                    let _ = n;
                    accumulate(&mut grads, *x, go);
                    accumulate(&mut grads, *bias, db);
                }
                Op::PrependRowTiled { row, x, group } => {
                    let n = go.cols();
                    let reps = go.rows() / (group + 1);
                    let mut drow = Tensor::zeros(self.value(*row).shape());
                    let mut dx = Tensor::zeros(&[reps * group, n]);
                    for b in 0..reps {
                        for (o, s) in drow.data_mut().iter_mut().zip(go.row(b * (group + 1))) {
                            *o += s;
                        }
                        for t in 0..*group {
                            let src = go.row(b * (group + 1) + t + 1).to_vec();
                            dx.row_mut(b * group + t).copy_from_slice(&src);
                        }
                    }
                    accumulate(&mut grads, *row, drow);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mul(a, b) => {
                    let da = go.mul(self.value(*b));
                    let db = go.mul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulCols { x, m } => {
                    let mask = self.value(*m).data().to_vec();
                    let xv = self.value(*x);
                    let mut dx = go.clone();
                    let mut dm = Tensor::zeros(self.value(*m).shape());
                    for r in 0..dx.rows() {
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o *= mask[j];
                        }
                        for (j, d) in dm.data_mut().iter_mut().enumerate() {
                            *d += go.at2(r, j) * xv.at2(r, j);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *m, dm);
                }
                Op::Scale { x, k } => {
                    accumulate(&mut grads, *x, go.scale(*k));
                }
                Op::Gelu(x) => {
                    let dx = self.value(*x).map(gelu_prime).mul(&go);
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, scale, shift, eps } => {
                    let (dx, dscale, dshift) =
                        layernorm_backward(self.value(*x), self.value(*scale), &go, *eps);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *scale, dscale);
                    accumulate(&mut grads, *shift, dshift);
                }
                Op::Mha { q, k, v, spec, probs } => {
                    let (dq, dk, dv) = mha_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &go,
                        spec,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::SelectRows { x, indices } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, s) in dx.row_mut(i).iter_mut().zip(go.row(r)) {
                            *o += s;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanPoolGroups { x, group } => {
                    let xv = self.value(*x);
                    let inv = 1.0 / *group as f64;
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        let src = go.row(r / group).to_vec();
                        for (o, s) in dx.row_mut(r).iter_mut().zip(&src) {
                            *o += s * inv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CeSoftSum { logits, target, tau, probs } => {
                    let g = go.item();
                    let mut dl = probs.clone();
                    for r in 0..dl.rows() {
                        let tsum: f64 = target.row(r).iter().sum();
                        for j in 0..dl.cols() {
                            let val = (probs.at2(r, j) * tsum - target.at2(r, j)) / tau * g;
                            dl.set2(r, j, val);
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::SumAll(x) => {
                    let dx = Tensor::filled(self.value(*x).shape(), go.item());
                    accumulate(&mut grads, *x, dx);
                }
            }
            // Interior node: cotangent no longer needed once distributed.
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Shared forward for the fused attention op. Q/K/V are (batch·T × H·dk);
/// rows are grouped per image. Returns the masked context concatenation and
/// the saved softmax probabilities (zeros for masked heads).
pub(crate) fn mha_forward(q: &Tensor, k: &Tensor, v: &Tensor, spec: &MhaSpec) -> Result<(Tensor, Tensor)> {
    let t = spec.n_tokens;
    let width = spec.n_heads * spec.d_key;
    if q.cols() != width || k.cols() != width || v.cols() != width {
        return Err(SnapError::shape("mha", format!("width {} vs heads*d_key {}", q.cols(), width)));
    }
    if q.rows() % t != 0 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(SnapError::shape("mha", "rows must be batch*n_tokens with equal q/k/v"));
    }
    if spec.head_mask.len() != spec.n_heads {
        return Err(SnapError::shape("mha", "head_mask length"));
    }
    let batch = q.rows() / t;
    let dk = spec.d_key;
    let alpha = 1.0 / (dk as f64).sqrt();
    let mut out = Tensor::zeros(&[q.rows(), width]);
    let mut probs = Tensor::zeros(&[batch * spec.n_heads * t, t]);
    let mut qh = vec![0.0; t * dk];
    let mut kh = vec![0.0; t * dk];
    let mut vh = vec![0.0; t * dk];
    let mut logits = vec![0.0; t * t];
    let mut ctx = vec![0.0; t * dk];
    for b in 0..batch {
        for h in 0..spec.n_heads {
            let m = spec.head_mask[h];
            if m == 0.0 {
                continue;
            }
            copy_block(q, b * t, t, h * dk, dk, &mut qh);
            copy_block(k, b * t, t, h * dk, dk, &mut kh);
            copy_block(v, b * t, t, h * dk, dk, &mut vh);
            // logits = α·Qh·Khᵀ, row-wise softmax, ctx = P·Vh
            logits.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..t {
                for j in 0..t {
                    let mut acc = 0.0;
                    for d in 0..dk {
                        acc += qh[i * dk + d] * kh[j * dk + d];
                    }
                    logits[i * t + j] = acc * alpha;
                }
            }
            for i in 0..t {
                softmax_in_place(&mut logits[i * t..(i + 1) * t]);
            }
            let p_base = (b * spec.n_heads + h) * t;
            for i in 0..t {
                probs.row_mut(p_base + i).copy_from_slice(&logits[i * t..(i + 1) * t]);
            }
            ctx.iter_mut().for_each(|x| *x = 0.0);
            matmul_nn_into(&logits, &vh, &mut ctx, t, t, dk);
            for i in 0..t {
                let dst = &mut out.row_mut(b * t + i)[h * dk..(h + 1) * dk];
                for d in 0..dk {
                    dst[d] = ctx[i * dk + d] * m;
                }
            }
        }
    }
    Ok((out, probs))
}

fn mha_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    go: &Tensor,
    spec: &MhaSpec,
) -> (Tensor, Tensor, Tensor) {
    let t = spec.n_tokens;
    let dk = spec.d_key;
    let batch = q.rows() / t;
    let alpha = 1.0 / (dk as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dkk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut qh = vec![0.0; t * dk];
    let mut kh = vec![0.0; t * dk];
    let mut vh = vec![0.0; t * dk];
    let mut p = vec![0.0; t * t];
    let mut dctx = vec![0.0; t * dk];
    let mut dp = vec![0.0; t * t];
    let mut ds = vec![0.0; t * t];
    let mut dqh = vec![0.0; t * dk];
    let mut dkh = vec![0.0; t * dk];
    let mut dvh = vec![0.0; t * dk];
    for b in 0..batch {
        for h in 0..spec.n_heads {
            let m = spec.head_mask[h];
            if m == 0.0 {
                continue;
            }
            copy_block(q, b * t, t, h * dk, dk, &mut qh);
            copy_block(k, b * t, t, h * dk, dk, &mut kh);
            copy_block(v, b * t, t, h * dk, dk, &mut vh);
            copy_block(go, b * t, t, h * dk, dk, &mut dctx);
            dctx.iter_mut().for_each(|x| *x *= m);
            let p_base = (b * spec.n_heads + h) * t;
            for i in 0..t {
                p[i * t..(i + 1) * t].copy_from_slice(probs.row(p_base + i));
            }
            // dV = Pᵀ·dctx
            dvh.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..t {
                for j in 0..t {
                    let pij = p[i * t + j];
                    if pij == 0.0 {
                        continue;
                    }
                    for d in 0..dk {
                        dvh[j * dk + d] += pij * dctx[i * dk + d];
                    }
                }
            }
            // dP = dctx·Vᵀ
            for i in 0..t {
                for j in 0..t {
                    let mut acc = 0.0;
                    for d in 0..dk {
                        acc += dctx[i * dk + d] * vh[j * dk + d];
                    }
                    dp[i * t + j] = acc;
                }
            }
            // softmax backward per row: dS = P ⊙ (dP − ⟨dP,P⟩_row)
            for i in 0..t {
                let row_p = &p[i * t..(i + 1) * t];
                let row_dp = &dp[i * t..(i + 1) * t];
                let dot: f64 = row_p.iter().zip(row_dp).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    ds[i * t + j] = row_p[j] * (row_dp[j] - dot);
                }
            }
            // dQ = α·dS·K ; dK = α·dSᵀ·Q
            dqh.iter_mut().for_each(|x| *x = 0.0);
            dkh.iter_mut().for_each(|x| *x = 0.0);
            matmul_nn_into(&ds, &kh, &mut dqh, t, t, dk);
            for i in 0..t {
                for j in 0..t {
                    let s = ds[i * t + j];
                    if s == 0.0 {
                        continue;
                    }
                    for d in 0..dk {
                        dkh[j * dk + d] += s * qh[i * dk + d];
                    }
                }
            }
            add_block(&mut dq, b * t, h * dk, dk, &dqh, alpha);
            add_block(&mut dkk, b * t, h * dk, dk, &dkh, alpha);
            add_block(&mut dv, b * t, h * dk, dk, &dvh, 1.0);
        }
    }
    (dq, dkk, dv)
}

/// Row-wise layernorm backward. Means/variances are cheap to recompute, so
/// nothing is saved at forward time.
fn layernorm_backward(x: &Tensor, scale: &Tensor, go: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let (m, n) = (x.rows(), x.cols());
    let gamma = scale.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dscale = Tensor::zeros(scale.shape());
    let mut dshift = Tensor::zeros(scale.shape());
    for r in 0..m {
        let xr = x.row(r);
        let gr = go.row(r);
        let (mean, var) = mean_var(xr);
        let inv = 1.0 / (var + eps).sqrt();
        // g = dy ⊙ γ; dx = inv·(g − mean(g) − x̂·mean(g ⊙ x̂))
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for j in 0..n {
            let xhat = (xr[j] - mean) * inv;
            let g = gr[j] * gamma[j];
            g_mean += g;
            gx_mean += g * xhat;
            dscale.data_mut()[j] += gr[j] * xhat;
            dshift.data_mut()[j] += gr[j];
        }
        g_mean /= n as f64;
        gx_mean /= n as f64;
        let dxr = dx.row_mut(r);
        for j in 0..n {
            let xhat = (xr[j] - mean) * inv;
            dxr[j] = inv * (gr[j] * gamma[j] - g_mean - xhat * gx_mean);
        }
    }
    (dx, dscale, dshift)
}

fn copy_block(src: &Tensor, row0: usize, rows: usize, col0: usize, cols: usize, dst: &mut [f64]) {
    for i in 0..rows {
        let r = src.row(row0 + i);
        dst[i * cols..(i + 1) * cols].copy_from_slice(&r[col0..col0 + cols]);
    }
}

fn add_block(dst: &mut Tensor, row0: usize, col0: usize, cols: usize, src: &[f64], scale: f64) {
    let rows = src.len() / cols;
    for i in 0..rows {
        let d = &mut dst.row_mut(row0 + i)[col0..col0 + cols];
        for j in 0..cols {
            d[j] += src[i * cols + j] * scale;
        }
    }
}

pub(crate) fn mean_pool_groups(x: &Tensor, group: usize) -> Tensor {
    let n = x.cols();
    let out_rows = x.rows() / group;
    let mut out = Tensor::zeros(&[out_rows, n]);
    let inv = 1.0 / group as f64;
    for r in 0..x.rows() {
        let src = x.row(r).to_vec();
        for (o, s) in out.row_mut(r / group).iter_mut().zip(&src) {
            *o += s * inv;
        }
    }
    out
}
