//! Minimal tape-based reverse-mode autodiff over 2-D `f64` tensors.
//!
//! Every value is a row-major matrix; vectors are `[1, n]`. A [`Graph`]
//! records each op on a tape as it executes, so `backward` can walk the
//! tape in reverse and accumulate gradients for the trainable leaves.
//! Leaves created with `grad_enabled = false` (frozen parameters,
//! constants such as positional encodings or attention masks) still carry
//! values through the forward pass but are dead ends for gradient flow.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};

// ── tensor handles ──────────────────────────────────────────────────────

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a tensor, used to key gradients and
/// optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub u64);

#[derive(Debug)]
struct TensorInner {
    id: TensorId,
    shape: [usize; 2],
    data: RefCell<Vec<f64>>,
    grad_enabled: bool,
}

/// A cheaply clonable handle to a row-major `f64` matrix.
///
/// Op results are never mutated; leaf tensors (parameters) are updated in
/// place by the optimizer or re-initializer *between* graphs.
#[derive(Debug, Clone)]
pub struct Tensor(Rc<TensorInner>);

impl Tensor {
    pub fn new(shape: [usize; 2], data: Vec<f64>, grad_enabled: bool) -> Result<Self> {
        if shape[0] * shape[1] != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} values, got {}", shape, shape[0] * shape[1], data.len()),
            });
        }
        Ok(Tensor(Rc::new(TensorInner {
            id: TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)),
            shape,
            data: RefCell::new(data),
            grad_enabled,
        })))
    }

    pub fn zeros(shape: [usize; 2], grad_enabled: bool) -> Self {
        Tensor::new(shape, vec![0.0; shape[0] * shape[1]], grad_enabled).expect("consistent shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new([1, 1], vec![v], false).expect("consistent shape")
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> [usize; 2] {
        self.0.shape
    }

    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.0.shape[0] * self.0.shape[1]
    }

    pub fn grad_enabled(&self) -> bool {
        self.0.grad_enabled
    }

    /// Borrow the underlying values (row-major).
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    /// Replace the values of a leaf in place. Only call between graphs:
    /// a recorded tape assumes its inputs do not change.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "Tensor::set_data",
                detail: format!("expected {} values, got {}", self.numel(), data.len()),
            });
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    /// Apply `f(index, value) -> value` over the values in place.
    pub fn update_data(&self, f: impl FnMut(usize, f64) -> f64) {
        let mut data = self.0.data.borrow_mut();
        let mut f = f;
        for (i, v) in data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }
}

// ── op tape ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Op {
    MatMul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    AddRow { a: Tensor, bias: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, c: f64 },
    Relu { a: Tensor },
    Transpose { a: Tensor },
    SoftmaxRows { a: Tensor },
    LayerNorm { a: Tensor, gain: Tensor, bias: Tensor, eps: f64 },
    Embedding { table: Tensor, ids: Vec<usize> },
    ConcatCols { parts: Vec<Tensor> },
    SumAll { a: Tensor },
    CrossEntropySum { logits: Tensor, targets: Vec<usize>, counted: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    out: Tensor,
}

/// Records ops as they run; `backward` walks the tape in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    tape: Vec<Node>,
    produced: HashSet<TensorId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.tape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tape.is_empty()
    }

    fn push(&mut self, op: Op, shape: [usize; 2], data: Vec<f64>) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            op_name(&op)
        );
        let out = Tensor::new(shape, data, true).expect("op produced consistent shape");
        self.produced.insert(out.id());
        self.tape.push(Node { op, out: out.clone() });
        out
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let (shape, data) = compute_matmul(a, b);
        Ok(self.push(Op::MatMul { a: a.clone(), b: b.clone() }, shape, data))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} + {:?}", a.shape(), b.shape()),
            });
        }
        let (shape, data) = compute_add(a, b);
        Ok(self.push(Op::Add { a: a.clone(), b: b.clone() }, shape, data))
    }

    /// Add a `[1, n]` bias row to every row of `a`.
    pub fn add_row(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if bias.rows() != 1 || bias.cols() != a.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + bias {:?}", a.shape(), bias.shape()),
            });
        }
        let (shape, data) = compute_add_row(a, bias);
        Ok(self.push(Op::AddRow { a: a.clone(), bias: bias.clone() }, shape, data))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} * {:?}", a.shape(), b.shape()),
            });
        }
        let (shape, data) = compute_mul(a, b);
        Ok(self.push(Op::Mul { a: a.clone(), b: b.clone() }, shape, data))
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(CoreError::Autodiff(format!("scale by non-finite {c}")));
        }
        let (shape, data) = compute_scale(a, c);
        Ok(self.push(Op::Scale { a: a.clone(), c }, shape, data))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let (shape, data) = compute_relu(a);
        Ok(self.push(Op::Relu { a: a.clone() }, shape, data))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (shape, data) = compute_transpose(a);
        Ok(self.push(Op::Transpose { a: a.clone() }, shape, data))
    }

    /// Numerically stable row-wise softmax (subtracts each row's max).
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (shape, data) = compute_softmax_rows(a);
        Ok(self.push(Op::SoftmaxRows { a: a.clone() }, shape, data))
    }

    /// Row-wise layer norm with learned `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        if gain.shape() != [1, a.cols()] || bias.shape() != [1, a.cols()] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gain {:?}, bias {:?}", a.shape(), gain.shape(), bias.shape()),
            });
        }
        let (shape, data) = compute_layer_norm(a, gain, bias, eps);
        Ok(self.push(
            Op::LayerNorm { a: a.clone(), gain: gain.clone(), bias: bias.clone(), eps },
            shape,
            data,
        ))
    }

    /// Gather rows `ids` from an embedding table; backward scatter-adds.
    pub fn embedding_lookup(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows()) {
            return Err(CoreError::ShapeMismatch {
                op: "embedding",
                detail: format!("id {} out of range for table with {} rows", bad, table.rows()),
            });
        }
        let (shape, data) = compute_embedding(table, ids);
        Ok(self.push(Op::Embedding { table: table.clone(), ids: ids.to_vec() }, shape, data))
    }

    /// Concatenate tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CoreError::ShapeMismatch { op: "concat_cols", detail: "no parts".into() });
        }
        let rows = parts[0].rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(CoreError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts differ: {:?}", parts.iter().map(|p| p.shape()).collect::<Vec<_>>()),
            });
        }
        let (shape, data) = compute_concat_cols(parts);
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, shape, data))
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let (shape, data) = compute_sum_all(a);
        Ok(self.push(Op::SumAll { a: a.clone() }, shape, data))
    }

    /// Summed token-level cross entropy of row `i` of `logits` against
    /// `targets[i]`, skipping rows whose target is `pad_id`. Returns the
    /// `[1, 1]` loss sum and the number of counted rows.
    pub fn cross_entropy_sum(
        &mut self,
        logits: &Tensor,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<(Tensor, usize)> {
        if targets.len() != logits.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy_sum",
                detail: format!("{} targets for {} logit rows", targets.len(), logits.rows()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad_id && t >= logits.cols()) {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy_sum",
                detail: format!("target {} out of range for vocab {}", bad, logits.cols()),
            });
        }
        let counted: Vec<bool> = targets.iter().map(|&t| t != pad_id).collect();
        let count = counted.iter().filter(|&&c| c).count();
        let (shape, data) = compute_cross_entropy_sum(logits, targets, &counted);
        let out = self.push(
            Op::CrossEntropySum { logits: logits.clone(), targets: targets.to_vec(), counted },
            shape,
            data,
        );
        Ok((out, count))
    }

    /// Mean token-level cross entropy over non-pad targets. Errors when
    /// every target is padding (a degenerate batch).
    pub fn cross_entropy_logits(&mut self, logits: &Tensor, targets: &[usize], pad_id: usize) -> Result<Tensor> {
        let (sum, count) = self.cross_entropy_sum(logits, targets, pad_id)?;
        if count == 0 {
            return Err(CoreError::Autodiff("cross entropy over zero non-pad targets".into()));
        }
        self.scale(&sum, 1.0 / count as f64)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-walk the tape from a scalar loss and return gradients for
    /// every `grad_enabled` *leaf* reachable from it. Frozen leaves never
    /// appear in the result; intermediates are dropped.
    pub fn backward(&self, loss: &Tensor) -> Result<HashMap<TensorId, Vec<f64>>> {
        if loss.shape() != [1, 1] {
            return Err(CoreError::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !self.produced.contains(&loss.id()) {
            return Err(CoreError::Autodiff("loss tensor was not produced by this graph".into()));
        }

        let mut grads: HashMap<TensorId, Vec<f64>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);

        // Skip gradient work for dead ends: leaves with grad_enabled off.
        let wants_grad =
            |t: &Tensor, produced: &HashSet<TensorId>| t.grad_enabled() || produced.contains(&t.id());

        for node in self.tape.iter().rev() {
            let Some(gout) = grads.get(&node.out.id()).cloned() else {
                continue;
            };
            match &node.op {
                Op::MatMul { a, b } => {
                    let (m, k) = (a.rows(), a.cols());
                    let n = b.cols();
                    if wants_grad(a, &self.produced) {
                        // dA = dC · Bᵀ
                        let bd = b.data();
                        let ga = grads.entry(a.id()).or_insert_with(|| vec![0.0; a.numel()]);
                        for i in 0..m {
                            for j in 0..n {
                                let g = gout[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += g * bd[p * n + j];
                                }
                            }
                        }
                    }
                    if wants_grad(b, &self.produced) {
                        // dB = Aᵀ · dC
                        let ad = a.data();
                        let gb = grads.entry(b.id()).or_insert_with(|| vec![0.0; b.numel()]);
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += av * gout[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for t in [a, b] {
                        if wants_grad(t, &self.produced) {
                            accumulate(&mut grads, t, &gout);
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    if wants_grad(a, &self.produced) {
                        accumulate(&mut grads, a, &gout);
                    }
                    if wants_grad(bias, &self.produced) {
                        let n = a.cols();
                        let gb = grads.entry(bias.id()).or_insert_with(|| vec![0.0; n]);
                        for r in 0..a.rows() {
                            for j in 0..n {
                                gb[j] += gout[r * n + j];
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if wants_grad(a, &self.produced) {
                        let bd = b.data();
                        let ga = grads.entry(a.id()).or_insert_with(|| vec![0.0; a.numel()]);
                        for (i, g) in gout.iter().enumerate() {
                            ga[i] += g * bd[i];
                        }
                    }
                    if wants_grad(b, &self.produced) {
                        let ad = a.data();
                        let gb = grads.entry(b.id()).or_insert_with(|| vec![0.0; b.numel()]);
                        for (i, g) in gout.iter().enumerate() {
                            gb[i] += g * ad[i];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if wants_grad(a, &self.produced) {
                        let ga = grads.entry(a.id()).or_insert_with(|| vec![0.0; a.numel()]);
                        for (i, g) in gout.iter().enumerate() {
                            ga[i] += g * c;
                        }
                    }
                }
                Op::Relu { a } => {
                    if wants_grad(a, &self.produced) {
                        let ad = a.data();
                        let ga = grads.entry(a.id()).or_insert_with(|| vec![0.0; a.numel()]);
                        for (i, g) in gout.iter().enumerate() {
                            if ad[i] > 0.0 {
                                ga[i] += g;
                            }
                        }
                    }
                }
                Op::Transpose { a } => {
                    if wants_grad(a, &self.produced) {
                        let (r, c) = (a.rows(), a.cols());
                        let ga = grads.entry(a.id()).or_insert_with(|| vec![0.0; a.numel()]);
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += gout[j * r + i];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    if wants_grad(a, &self.produced) {
                        let y = node.out.data();
                        let n = a.cols();
                        let ga = grads.entry(a.id()).or_insert_with(|| vec![0.0; a.numel()]);
                        for r in 0..a.rows() {
                            let row = r * n;
                            let dot: f64 = (0..n).map(|j| gout[row + j] * y[row + j]).sum();
                            for j in 0..n {
                                ga[row + j] += y[row + j] * (gout[row + j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { a, gain, bias, eps } => {
                    backward_layer_norm(&mut grads, &self.produced, a, gain, bias, *eps, &gout, &wants_grad);
                }
                Op::Embedding { table, ids } => {
                    if wants_grad(table, &self.produced) {
                        let n = table.cols();
                        let gt = grads.entry(table.id()).or_insert_with(|| vec![0.0; table.numel()]);
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..n {
                                gt[id * n + j] += gout[r * n + j];
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total: usize = parts.iter().map(Tensor::cols).sum();
                    let rows = parts[0].rows();
                    let mut offset = 0;
                    for p in parts {
                        if wants_grad(p, &self.produced) {
                            let c = p.cols();
                            let gp = grads.entry(p.id()).or_insert_with(|| vec![0.0; p.numel()]);
                            for r in 0..rows {
                                for j in 0..c {
                                    gp[r * c + j] += gout[r * total + offset + j];
                                }
                            }
                        }
                        offset += p.cols();
                    }
                }
                Op::SumAll { a } => {
                    if wants_grad(a, &self.produced) {
                        let g = gout[0];
                        let ga = grads.entry(a.id()).or_insert_with(|| vec![0.0; a.numel()]);
                        for v in ga.iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::CrossEntropySum { logits, targets, counted } => {
                    if wants_grad(logits, &self.produced) {
                        let g = gout[0];
                        let ld = logits.data();
                        let n = logits.cols();
                        let gl = grads.entry(logits.id()).or_insert_with(|| vec![0.0; logits.numel()]);
                        for (r, (&t, &c)) in targets.iter().zip(counted).enumerate() {
                            if !c {
                                continue;
                            }
                            let row = &ld[r * n..(r + 1) * n];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                            for j in 0..n {
                                let p = (row[j] - max).exp() / denom;
                                gl[r * n + j] += g * (p - if j == t { 1.0 } else { 0.0 });
                            }
                        }
                    }
                }
            }
        }

        // Keep only grad-enabled leaves.
        grads.retain(|id, _| !self.produced.contains(id));
        Ok(grads)
    }

    /// Recompute every recorded op and compare against the stored outputs
    /// bit for bit. Valid while the graph's leaf data is unchanged.
    pub fn replay_matches(&self) -> bool {
        for node in &self.tape {
            let (_, fresh) = compute(&node.op);
            let stored = node.out.data();
            if fresh.len() != stored.len() {
                return false;
            }
            if fresh.iter().zip(stored.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return false;
            }
        }
        true
    }
}

fn accumulate(grads: &mut HashMap<TensorId, Vec<f64>>, t: &Tensor, g: &[f64]) {
    let slot = grads.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]);
    for (s, v) in slot.iter_mut().zip(g) {
        *s += v;
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_layer_norm(
    grads: &mut HashMap<TensorId, Vec<f64>>,
    produced: &HashSet<TensorId>,
    a: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
    gout: &[f64],
    wants_grad: &dyn Fn(&Tensor, &HashSet<TensorId>) -> bool,
) {
    let (rows, n) = (a.rows(), a.cols());
    let ad = a.data();
    let gd = gain.data();
    // Recompute per-row stats; cheaper than caching them on the tape.
    let mut xhat = vec![0.0; rows * n];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &ad[r * n..(r + 1) * n];
        let mu: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..n {
            xhat[r * n + j] = (row[j] - mu) * is;
        }
    }
    if wants_grad(gain, produced) {
        let gg = grads.entry(gain.id()).or_insert_with(|| vec![0.0; n]);
        for r in 0..rows {
            for j in 0..n {
                gg[j] += gout[r * n + j] * xhat[r * n + j];
            }
        }
    }
    if wants_grad(bias, produced) {
        let gb = grads.entry(bias.id()).or_insert_with(|| vec![0.0; n]);
        for r in 0..rows {
            for j in 0..n {
                gb[j] += gout[r * n + j];
            }
        }
    }
    if wants_grad(a, produced) {
        let ga = grads.entry(a.id()).or_insert_with(|| vec![0.0; rows * n]);
        for r in 0..rows {
            let row = r * n;
            // dxhat = gout ⊙ gain; dx = inv_std (dxhat - mean(dxhat) - xhat · mean(dxhat ⊙ xhat))
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..n {
                let dxh = gout[row + j] * gd[j];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xhat[row + j];
            }
            mean_dxhat /= n as f64;
            mean_dxhat_xhat /= n as f64;
            for j in 0..n {
                let dxh = gout[row + j] * gd[j];
                ga[row + j] += inv_std[r] * (dxh - mean_dxhat - xhat[row + j] * mean_dxhat_xhat);
            }
        }
    }
}

// ── forward kernels (shared by the graph builders and replay) ───────────

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::AddRow { .. } => "add_row",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Relu { .. } => "relu",
        Op::Transpose { .. } => "transpose",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SumAll { .. } => "sum_all",
        Op::CrossEntropySum { .. } => "cross_entropy_sum",
    }
}

fn compute(op: &Op) -> ([usize; 2], Vec<f64>) {
    match op {
        Op::MatMul { a, b } => compute_matmul(a, b),
        Op::Add { a, b } => compute_add(a, b),
        Op::AddRow { a, bias } => compute_add_row(a, bias),
        Op::Mul { a, b } => compute_mul(a, b),
        Op::Scale { a, c } => compute_scale(a, *c),
        Op::Relu { a } => compute_relu(a),
        Op::Transpose { a } => compute_transpose(a),
        Op::SoftmaxRows { a } => compute_softmax_rows(a),
        Op::LayerNorm { a, gain, bias, eps } => compute_layer_norm(a, gain, bias, *eps),
        Op::Embedding { table, ids } => compute_embedding(table, ids),
        Op::ConcatCols { parts } => compute_concat_cols(parts),
        Op::SumAll { a } => compute_sum_all(a),
        Op::CrossEntropySum { logits, targets, counted } => compute_cross_entropy_sum(logits, targets, counted),
    }
}

fn compute_matmul(a: &Tensor, b: &Tensor) -> ([usize; 2], Vec<f64>) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    ([m, n], out)
}

fn compute_add(a: &Tensor, b: &Tensor) -> ([usize; 2], Vec<f64>) {
    let ad = a.data();
    let bd = b.data();
    (a.shape(), ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect())
}

fn compute_add_row(a: &Tensor, bias: &Tensor) -> ([usize; 2], Vec<f64>) {
    let ad = a.data();
    let bd = bias.data();
    let n = a.cols();
    let out = ad.iter().enumerate().map(|(i, v)| v + bd[i % n]).collect();
    (a.shape(), out)
}

fn compute_mul(a: &Tensor, b: &Tensor) -> ([usize; 2], Vec<f64>) {
    let ad = a.data();
    let bd = b.data();
    (a.shape(), ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect())
}

fn compute_scale(a: &Tensor, c: f64) -> ([usize; 2], Vec<f64>) {
    (a.shape(), a.data().iter().map(|v| v * c).collect())
}

fn compute_relu(a: &Tensor) -> ([usize; 2], Vec<f64>) {
    (a.shape(), a.data().iter().map(|v| v.max(0.0)).collect())
}

fn compute_transpose(a: &Tensor) -> ([usize; 2], Vec<f64>) {
    let (r, c) = (a.rows(), a.cols());
    let ad = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = ad[i * c + j];
        }
    }
    ([c, r], out)
}

fn compute_softmax_rows(a: &Tensor) -> ([usize; 2], Vec<f64>) {
    let (rows, n) = (a.rows(), a.cols());
    let ad = a.data();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let row = &ad[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            out[r * n + j] = e;
            denom += e;
        }
        for j in 0..n {
            out[r * n + j] /= denom;
        }
    }
    ([rows, n], out)
}

fn compute_layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> ([usize; 2], Vec<f64>) {
    let (rows, n) = (a.rows(), a.cols());
    let ad = a.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let row = &ad[r * n..(r + 1) * n];
        let mu: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[r * n + j] = (row[j] - mu) * inv_std * gd[j] + bd[j];
        }
    }
    ([rows, n], out)
}

fn compute_embedding(table: &Tensor, ids: &[usize]) -> ([usize; 2], Vec<f64>) {
    let n = table.cols();
    let td = table.data();
    let mut out = Vec::with_capacity(ids.len() * n);
    for &id in ids {
        out.extend_from_slice(&td[id * n..(id + 1) * n]);
    }
    ([ids.len(), n], out)
}

fn compute_concat_cols(parts: &[Tensor]) -> ([usize; 2], Vec<f64>) {
    let rows = parts[0].rows();
    let total: usize = parts.iter().map(Tensor::cols).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let c = p.cols();
            let pd = p.data();
            out.extend_from_slice(&pd[r * c..(r + 1) * c]);
        }
    }
    ([rows, total], out)
}

fn compute_sum_all(a: &Tensor) -> ([usize; 2], Vec<f64>) {
    ([1, 1], vec![a.data().iter().sum()])
}

fn compute_cross_entropy_sum(logits: &Tensor, targets: &[usize], counted: &[bool]) -> ([usize; 2], Vec<f64>) {
    let n = logits.cols();
    let ld = logits.data();
    let mut total = 0.0;
    for (r, (&t, &c)) in targets.iter().zip(counted).enumerate() {
        if !c {
            continue;
        }
        let row = &ld[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    ([1, 1], vec![total])
}

// ── finite differences ──────────────────────────────────────────────────

/// Compare autodiff gradients of `f` w.r.t. `x` against central finite
/// differences. `f` must rebuild its computation from scratch on the graph
/// it is given and return a scalar loss. Returns the maximum elementwise
/// error `|fd - analytic| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    if !x.grad_enabled() {
        return Err(CoreError::Autodiff("finite_diff_check needs a grad-enabled tensor".into()));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, x)?;
    let grads = g.backward(&loss)?;
    let analytic = grads
        .get(&x.id())
        .cloned()
        .ok_or_else(|| CoreError::Autodiff("tensor received no gradient".into()))?;

    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        Ok(f(&mut g, x)?.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.update_data(|j, v| if j == i { orig + eps } else { v });
        let up = eval(x)?;
        x.update_data(|j, v| if j == i { orig - eps } else { v });
        let down = eval(x)?;
        x.update_data(|j, v| if j == i { orig } else { v });
        let fd = (up - down) / (2.0 * eps);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

// ── tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 2], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec(), true).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let a = t([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t([3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut g = Graph::new();
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 2]);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = t([2, 3], &[0.0; 6]);
        let b = t([2, 2], &[0.0; 4]);
        let mut g = Graph::new();
        assert!(matches!(g.matmul(&a, &b), Err(CoreError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_matches_independent_oracle() {
        // Oracle values computed from exp(x_i) / sum exp(x_j) with 50-digit
        // arithmetic for the row [1, 2, 3].
        let x = t([1, 3], &[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let y = g.softmax_rows(&x).unwrap();
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_7,
            0.665_240_955_774_821_9,
        ];
        for (a, e) in y.to_vec().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_extreme_inputs() {
        let x = t([2, 3], &[1e30, -1e30, 0.0, 700.0, 710.0, 690.0]);
        let mut g = Graph::new();
        let y = g.softmax_rows(&x).unwrap();
        let data = y.to_vec();
        for r in 0..2 {
            let s: f64 = data[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(data[r * 3..(r + 1) * 3].iter().all(|v| v.is_finite()));
        }
        // The -1e30 entry underflows to an exactly zero weight.
        assert_eq!(data[1], 0.0);
    }

    #[test]
    fn cross_entropy_matches_log_softmax_oracle() {
        // For logits [0.2, -1.3, 0.8] and target 2:
        // loss = ln(e^0.2 + e^-1.3 + e^0.8) - 0.8
        let logits = t([1, 3], &[0.2, -1.3, 0.8]);
        let mut g = Graph::new();
        let (loss, count) = g.cross_entropy_sum(&logits, &[2], usize::MAX).unwrap();
        let oracle = (0.2f64.exp() + (-1.3f64).exp() + 0.8f64.exp()).ln() - 0.8;
        assert_eq!(count, 1);
        assert!((loss.item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_pad_targets() {
        let logits = t([3, 4], &[0.1; 12]);
        let mut g = Graph::new();
        let (loss, count) = g.cross_entropy_sum(&logits, &[1, 0, 2], 0).unwrap();
        assert_eq!(count, 2);
        // Uniform logits: each counted row costs ln(4).
        assert!((loss.item() - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_logits_rejects_all_pad_batch() {
        let logits = t([2, 4], &[0.0; 8]);
        let mut g = Graph::new();
        assert!(g.cross_entropy_logits(&logits, &[0, 0], 0).is_err());
    }

    #[test]
    fn layer_norm_handles_constant_rows_and_centers_output() {
        let gain = Tensor::new([1, 4], vec![1.0; 4], false).unwrap();
        let bias = Tensor::new([1, 4], vec![0.0; 4], false).unwrap();
        // A constant row has zero variance; eps keeps it finite and the
        // centered numerator makes the output exactly zero.
        let flat = t([1, 4], &[3.0, 3.0, 3.0, 3.0]);
        let mut g = Graph::new();
        let y = g.layer_norm(&flat, &gain, &bias, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));

        let x = t([3, 4], &[0.3, -1.1, 0.8, 0.2, 1.5, -0.4, 0.0, 0.9, -2.0, 0.5, 0.1, 0.7]);
        let mut g = Graph::new();
        let y = g.layer_norm(&x, &gain, &bias, 1e-9).unwrap();
        let d = y.to_vec();
        for r in 0..3 {
            let mean: f64 = d[r * 4..(r + 1) * 4].iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = t([1, 2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let y = g.relu(&x).unwrap();
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_gradient_entry() {
        let w_frozen = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let w_train = t([2, 2], &[0.5, -0.5, 1.5, 2.5]);
        let x = Tensor::new([1, 2], vec![1.0, -1.0], false).unwrap();
        let mut g = Graph::new();
        let h = g.matmul(&x, &w_frozen).unwrap();
        let y = g.matmul(&h, &w_train).unwrap();
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert!(grads.contains_key(&w_train.id()));
        assert!(!grads.contains_key(&w_frozen.id()));
        assert!(!grads.contains_key(&x.id()));
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn gradients_flow_through_frozen_intermediates() {
        // x (trainable) -> matmul with frozen w -> loss: x still needs grads.
        let w = Tensor::new([2, 1], vec![3.0, -2.0], false).unwrap();
        let x = t([1, 2], &[1.0, 1.0]);
        let mut g = Graph::new();
        let y = g.matmul(&x, &w).unwrap();
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads[&x.id()], vec![3.0, -2.0]);
    }

    #[test]
    fn finite_diff_matmul_chain() {
        let x = t([2, 3], &[0.1, -0.4, 0.7, 0.2, 0.9, -0.3]);
        let w = Tensor::new([3, 2], vec![0.5, -0.2, 0.8, 0.3, -0.6, 0.1], false).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let y = g.matmul(x, &w)?;
                let z = g.relu(&y)?;
                g.sum_all(&z)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn finite_diff_softmax_cross_entropy() {
        let x = t([3, 5], &[0.3, -0.1, 0.9, 0.05, -0.7, 1.2, 0.4, -0.5, 0.6, 0.0, -0.2, 0.8, 0.1, -0.9, 0.5]);
        let err = finite_diff_check(
            |g, x| {
                let (loss, _) = g.cross_entropy_sum(x, &[2, 0, 4], usize::MAX)?;
                Ok(loss)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn finite_diff_layer_norm_all_inputs() {
        let x = t([2, 4], &[0.3, -1.1, 0.8, 0.2, 1.5, -0.4, 0.0, 0.9]);
        let gain = t([1, 4], &[1.1, 0.9, 1.3, 0.7]);
        let bias = t([1, 4], &[0.1, -0.2, 0.0, 0.3]);
        for target in [&x, &gain, &bias] {
            let (x, gain, bias) = (x.clone(), gain.clone(), bias.clone());
            let err = finite_diff_check(
                move |g, t| {
                    // Rebuild using `t` in place of whichever input is probed.
                    let pick = |orig: &Tensor| if orig.id() == t.id() { t.clone() } else { orig.clone() };
                    let y = g.layer_norm(&pick(&x), &pick(&gain), &pick(&bias), 1e-5)?;
                    let sq = g.mul(&y, &y)?;
                    g.sum_all(&sq)
                },
                target,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-7, "max rel err {err}");
        }
    }

    #[test]
    fn finite_diff_embedding_and_concat() {
        // Keep every value well away from relu's kink at zero, where the
        // subgradient and the finite difference legitimately disagree.
        let table = t([4, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 0.35, 0.25, -0.45]);
        let err = finite_diff_check(
            |g, table| {
                let e = g.embedding_lookup(table, &[2, 0, 2])?;
                let f = g.embedding_lookup(table, &[1, 3, 3])?;
                let cat = g.concat_cols(&[e, f])?;
                let act = g.relu(&cat)?;
                g.sum_all(&act)
            },
            &table,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "repeated-id scatter-add grads, max rel err {err}");
    }

    #[test]
    fn finite_diff_attention_shaped_composite() {
        // A miniature attention block: softmax(QKᵀ/√d)V with shared input.
        let x = t([3, 4], &[0.2, -0.1, 0.5, 0.3, -0.6, 0.4, 0.1, -0.2, 0.7, 0.0, -0.3, 0.9]);
        let wq = Tensor::new([4, 2], vec![0.3, -0.5, 0.2, 0.7, -0.1, 0.4, 0.6, -0.2], false).unwrap();
        let wk = Tensor::new([4, 2], vec![-0.4, 0.1, 0.5, 0.3, 0.2, -0.6, 0.0, 0.8], false).unwrap();
        let wv = Tensor::new([4, 2], vec![0.9, 0.2, -0.3, 0.5, 0.1, -0.7, 0.4, 0.0], false).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let q = g.matmul(x, &wq)?;
                let k = g.matmul(x, &wk)?;
                let v = g.matmul(x, &wv)?;
                let kt = g.transpose(&k)?;
                let scores = g.matmul(&q, &kt)?;
                let scaled = g.scale(&scores, 1.0 / (2.0f64).sqrt())?;
                let attn = g.softmax_rows(&scaled)?;
                let out = g.matmul(&attn, &v)?;
                let (loss, _) = g.cross_entropy_sum(&out, &[1, 0, 1], usize::MAX)?;
                Ok(loss)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn replay_reproduces_tape_bit_for_bit() {
        let x = t([2, 3], &[0.3, 1.7, -2.2, 0.05, -0.8, 1.1]);
        let w = t([3, 3], &[0.1, -0.9, 0.4, 1.3, 0.2, -0.5, 0.7, 0.6, -0.1]);
        let gain = t([1, 3], &[1.0, 1.1, 0.9]);
        let bias = t([1, 3], &[0.0, 0.1, -0.1]);
        let mut g = Graph::new();
        let h = g.matmul(&x, &w).unwrap();
        let n = g.layer_norm(&h, &gain, &bias, 1e-5).unwrap();
        let s = g.softmax_rows(&n).unwrap();
        let _ = g.sum_all(&s).unwrap();
        assert!(g.replay_matches());
    }

    #[test]
    fn additive_mask_zeroes_attention_weights_exactly() {
        let scores = t([1, 4], &[0.5, 0.1, -0.2, 0.3]);
        let mask = Tensor::new([1, 4], vec![0.0, -1e30, 0.0, -1e30], false).unwrap();
        let mut g = Graph::new();
        let masked = g.add(&scores, &mask).unwrap();
        let w = g.softmax_rows(&masked).unwrap();
        let data = w.to_vec();
        assert_eq!(data[1], 0.0);
        assert_eq!(data[3], 0.0);
        assert!((data[0] + data[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_accumulates_across_shared_use() {
        // y = sum(x) + sum(x) should give grad 2 everywhere.
        let x = t([1, 3], &[0.4, -0.2, 0.9]);
        let mut g = Graph::new();
        let s1 = g.sum_all(&x).unwrap();
        let s2 = g.sum_all(&x).unwrap();
        let y = g.add(&s1, &s2).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads[&x.id()], vec![2.0, 2.0, 2.0]);
    }
}
