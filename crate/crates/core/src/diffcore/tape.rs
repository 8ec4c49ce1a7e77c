use std::cell::RefCell;
use std::fmt;

use super::kernels::{back_subst_transpose, forward_subst, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::{DiffError, Tensor};
use crate::special;

type Res<T> = Result<T, DiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    Concat { inputs: Vec<usize>, outer: usize, widths: Vec<usize> },
    SoftmaxRows { a: usize },
    LayerNorm { a: usize, inv_std: Vec<f64> },
    Relu { a: usize },
    Log { a: usize },
    Exp { a: usize },
    Softplus { a: usize },
    LGamma { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumAxis { a: usize, outer: usize, len: usize, inner: usize, mean: bool },
    Gather { a: usize, index: Vec<Option<usize>> },
    Clamp { a: usize, lo: f64, hi: f64 },
    TriSolve { l: usize, x: usize, d: usize },
    NormCdf { a: usize },
    NormQuantile { a: usize },
    TCdf { a: usize, nu: usize },
    TQuantile { a: usize, nu: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    rule_calls: usize,
}

/// Records forward operations and replays them in reverse.
///
/// Single-threaded by construction (interior mutability through `RefCell`);
/// independent tapes share nothing and can live on different threads.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Res<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NumericOverflow { op })
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Output shape of an elementwise binary op. The smaller operand must be a
/// scalar or a trailing-suffix of the larger one.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Res<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (big, small) = if numel(a) >= numel(b) { (a, b) } else { (b, a) };
    if numel(small) == 1 || big.ends_with(small) {
        Ok(big.to_vec())
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of non-leaf nodes whose backward rule ran.
    pub fn backward_rule_calls(&self) -> usize {
        self.inner.borrow().rule_calls
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Records a tensor as a leaf; gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Res<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.inner.borrow().grads.get(v.id).cloned().flatten()
    }

    /// Copies the gradient of `v` into `t.grad` (zeros when `v` was unreachable).
    pub fn store_grad(&self, v: Var<'_>, t: &mut Tensor) -> Res<()> {
        let g = self.grad(v).unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g)
    }

    /// Forgets gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.backward_done = false;
        inner.rule_calls = 0;
    }

    pub fn concat(&self, vars: &[Var<'_>], axis: usize) -> Res<Var<'_>> {
        let first = vars.first().ok_or(DiffError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(DiffError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(vars.len());
        for v in vars {
            let s = v.shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        {
            let tape = self.inner.borrow();
            for o in 0..outer {
                for (v, &w) in vars.iter().zip(&widths) {
                    out.extend_from_slice(&tape.nodes[v.id].value[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = base.clone();
        shape[axis] = total / inner;
        let rg = vars.iter().any(|v| self.rg(v.id));
        let inputs = vars.iter().map(|v| v.id).collect();
        Ok(self.push(
            shape,
            out,
            Op::Concat { inputs, outer, widths },
            rg,
        ))
    }

    /// Row-wise lower-triangular solve: each row yᵢ of the result satisfies
    /// L yᵢ = xᵢ, with `l` of shape [d, d] and `x` of shape [n, d].
    pub fn tri_solve(&self, l: Var<'_>, x: Var<'_>) -> Res<Var<'_>> {
        let ls = l.shape();
        let xs = x.shape();
        if ls.len() != 2 || ls[0] != ls[1] || xs.len() != 2 || xs[1] != ls[0] {
            return Err(DiffError::ShapeMismatch {
                op: "tri_solve",
                lhs: ls,
                rhs: xs,
            });
        }
        let d = ls[0];
        let n = xs[0];
        let mut out = vec![0.0; n * d];
        {
            let tape = self.inner.borrow();
            let lv = &tape.nodes[l.id].value;
            let xv = &tape.nodes[x.id].value;
            for r in 0..n {
                forward_subst(lv, &xv[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d], d);
            }
        }
        check_finite("tri_solve", &out)?;
        let rg = self.rg(l.id) || self.rg(x.id);
        Ok(self.push(xs, out, Op::TriSolve { l: l.id, x: x.id, d }, rg))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Res<()> {
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        if inner.nodes.is_empty() {
            return Err(DiffError::EmptyTape);
        }
        if inner.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        let loss_shape = &inner.nodes[loss.id].shape;
        if numel(loss_shape) != 1 {
            return Err(DiffError::NonScalarLoss(loss_shape.clone()));
        }
        inner.backward_done = true;
        let nodes = &inner.nodes;
        let grads = &mut inner.grads;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.id] = Some(vec![1.0]);
        let mut calls = 0;
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            calls += 1;
            backward_rule(nodes, grads, id, &g);
            grads[id] = Some(g);
        }
        inner.rule_calls = calls;
        Ok(())
    }
}

fn acc_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

/// Adds `g` (shaped like the broadcast output) into operand `id`, summing
/// over broadcast positions.
fn acc_broadcast(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: impl Iterator<Item = f64>) {
    if let Some(slot) = acc_slot(nodes, grads, id) {
        if slot.is_empty() {
            return;
        }
        let mut j = 0;
        for v in g {
            slot[j] += v;
            j += 1;
            if j == slot.len() {
                j = 0;
            }
        }
    }
}

fn backward_rule(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_b,
        } => {
            if let Some(slot) = acc_slot(nodes, grads, a) {
                for bi in 0..batch {
                    let boff = if shared_b { 0 } else { bi * k * n };
                    gemm_a_bt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &val(b)[boff..boff + k * n],
                        &mut slot[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            }
            if let Some(slot) = acc_slot(nodes, grads, b) {
                for bi in 0..batch {
                    let boff = if shared_b { 0 } else { bi * k * n };
                    gemm_at_b_acc(
                        &val(a)[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut slot[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::Add { a, b } => {
            acc_broadcast(nodes, grads, a, g.iter().copied());
            acc_broadcast(nodes, grads, b, g.iter().copied());
        }
        &Op::Sub { a, b } => {
            acc_broadcast(nodes, grads, a, g.iter().copied());
            acc_broadcast(nodes, grads, b, g.iter().map(|v| -v));
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            acc_broadcast(nodes, grads, a, g.iter().zip(bv.iter().cycle()).map(|(gv, y)| gv * y));
            acc_broadcast(nodes, grads, b, g.iter().zip(av.iter().cycle()).map(|(gv, x)| gv * x));
        }
        &Op::Div { a, b } => {
            let (av, bv) = (val(a), val(b));
            acc_broadcast(nodes, grads, a, g.iter().zip(bv.iter().cycle()).map(|(gv, d)| gv / d));
            acc_broadcast(
                nodes,
                grads,
                b,
                g.iter()
                    .zip(av.iter().cycle().zip(bv.iter().cycle()))
                    .map(|(gv, (x, d))| -gv * x / (d * d)),
            );
        }
        &Op::Scale { a, c } => {
            if let Some(slot) = acc_slot(nodes, grads, a) {
                for (s, gv) in slot.iter_mut().zip(g) {
                    *s += c * gv;
                }
            }
        }
        &Op::AddScalar { a } | &Op::Reshape { a } => {
            if let Some(slot) = acc_slot(nodes, grads, a) {
                for (s, gv) in slot.iter_mut().zip(g) {
                    *s += gv;
                }
            }
        }
        &Op::Transpose { a } => {
            let shape = &nodes[a].shape;
            let r = shape.len();
            let (rows, cols) = (shape[r - 2], shape[r - 1]);
            let batch = numel(&shape[..r - 2]);
            if let Some(slot) = acc_slot(nodes, grads, a) {
                for bi in 0..batch {
                    let off = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            slot[off + i * cols + j] += g[off + j * rows + i];
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, outer, widths } => {
            let total: usize = widths.iter().sum();
            let mut start = 0;
            for (&inp, &w) in inputs.iter().zip(widths) {
                if let Some(slot) = acc_slot(nodes, grads, inp) {
                    for o in 0..*outer {
                        for j in 0..w {
                            slot[o * w + j] += g[o * total + start + j];
                        }
                    }
                }
                start += w;
            }
        }
        &Op::SoftmaxRows { a } => {
            let cols = *node.shape.last().unwrap();
            if let Some(slot) = acc_slot(nodes, grads, a) {
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        slot[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, inv_std } => {
            let cols = *node.shape.last().unwrap();
            let nf = cols as f64;
            if let Some(slot) = acc_slot(nodes, grads, *a) {
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let mg: f64 = gr.iter().sum::<f64>() / nf;
                    let mgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..cols {
                        slot[r * cols + j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
        }
        &Op::Relu { a } => unary(nodes, grads, a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, y),
        &Op::Log { a } => unary(nodes, grads, a, g, |x, _| 1.0 / x, y),
        &Op::Exp { a } => unary(nodes, grads, a, g, |_, y| y, y),
        &Op::Softplus { a } => unary(nodes, grads, a, g, |x, _| special::sigmoid(x), y),
        &Op::LGamma { a } => unary(nodes, grads, a, g, |x, _| special::digamma(x), y),
        &Op::NormCdf { a } => unary(nodes, grads, a, g, |x, _| special::norm_pdf(x), y),
        &Op::NormQuantile { a } => unary(nodes, grads, a, g, |_, y| 1.0 / special::norm_pdf(y), y),
        &Op::Clamp { a, lo, hi } => unary(
            nodes,
            grads,
            a,
            g,
            |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
            y,
        ),
        &Op::TCdf { a, nu } => {
            let nuv = val(nu)[0];
            unary(nodes, grads, a, g, |x, _| special::t_pdf(x, nuv), y);
            if let Some(slot) = acc_slot(nodes, grads, nu) {
                let s: f64 = val(a)
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| gv * special::t_cdf_dnu(x, nuv))
                    .sum();
                slot[0] += s;
            }
        }
        &Op::TQuantile { a, nu } => {
            let nuv = val(nu)[0];
            unary(nodes, grads, a, g, |_, y| 1.0 / special::t_pdf(y, nuv), y);
            if let Some(slot) = acc_slot(nodes, grads, nu) {
                // x = T⁻¹(u; ν) ⇒ ∂x/∂ν = −(∂T/∂ν)(x) / f(x)
                let s: f64 = y
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| -gv * special::t_cdf_dnu(x, nuv) / special::t_pdf(x, nuv))
                    .sum();
                slot[0] += s;
            }
        }
        &Op::SumAll { a } => {
            if let Some(slot) = acc_slot(nodes, grads, a) {
                for s in slot.iter_mut() {
                    *s += g[0];
                }
            }
        }
        &Op::MeanAll { a } => {
            if let Some(slot) = acc_slot(nodes, grads, a) {
                let c = g[0] / slot.len() as f64;
                for s in slot.iter_mut() {
                    *s += c;
                }
            }
        }
        &Op::SumAxis {
            a,
            outer,
            len,
            inner,
            mean,
        } => {
            if let Some(slot) = acc_slot(nodes, grads, a) {
                let c = if mean { 1.0 / len as f64 } else { 1.0 };
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            slot[(o * len + l) * inner + i] += c * g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Gather { a, index } => {
            if let Some(slot) = acc_slot(nodes, grads, *a) {
                for (gv, ix) in g.iter().zip(index) {
                    if let Some(src) = ix {
                        slot[*src] += gv;
                    }
                }
            }
        }
        &Op::TriSolve { l, x, d } => {
            let lv = val(l);
            let n = y.len() / d;
            let mut gx = vec![0.0; y.len()];
            for r in 0..n {
                back_subst_transpose(lv, &g[r * d..(r + 1) * d], &mut gx[r * d..(r + 1) * d], d);
            }
            if let Some(slot) = acc_slot(nodes, grads, l) {
                // ∂/∂L = −Σ_r (L⁻ᵀ g_r) y_rᵀ, lower triangle only
                for r in 0..n {
                    let gr = &gx[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    for i in 0..d {
                        for j in 0..=i {
                            slot[i * d + j] -= gr[i] * yr[j];
                        }
                    }
                }
            }
            if let Some(slot) = acc_slot(nodes, grads, x) {
                for (s, v) in slot.iter_mut().zip(&gx) {
                    *s += v;
                }
            }
        }
    }
}

fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    y: &[f64],
) {
    let x = &nodes[a].value;
    if let Some(slot) = acc_slot(nodes, grads, a) {
        for i in 0..slot.len() {
            slot[i] += g[i] * deriv(x[i], y[i]);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    fn map_unary(
        self,
        name: &'static str,
        op: impl FnOnce(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Res<Var<'t>> {
        let (shape, out) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect::<Vec<_>>())
        };
        check_finite(name, &out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, out, op(self.id), rg))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Res<Var<'t>> {
        let sa = self.shape();
        let sb = other.shape();
        let shape = broadcast_shape(name, &sa, &sb)?;
        let out = {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            let bv = &inner.nodes[other.id].value;
            av.iter()
                .cycle()
                .zip(bv.iter().cycle())
                .take(numel(&shape))
                .map(|(&x, &y)| f(x, y))
                .collect::<Vec<_>>()
        };
        check_finite(name, &out)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(shape, out, op(self.id, other.id), rg))
    }

    /// Matrix product. Supports [m,k]·[k,n], [b,m,k]·[k,n] and [b,m,k]·[b,k,n].
    pub fn matmul(self, other: Var<'t>) -> Res<Var<'t>> {
        let sa = self.shape();
        let sb = other.shape();
        let mismatch = || DiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(mismatch()),
        };
        let (shared_b, kb, n) = match sb.len() {
            2 => (true, sb[0], sb[1]),
            3 if sa.len() == 3 && sb[0] == batch => (false, sb[1], sb[2]),
            _ => return Err(mismatch()),
        };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            let bv = &inner.nodes[other.id].value;
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                gemm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        check_finite("matmul", &out)?;
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            shape,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Res<Var<'t>> {
        self.binary(other, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Res<Var<'t>> {
        self.binary(other, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Res<Var<'t>> {
        self.binary(other, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(self, other: Var<'t>) -> Res<Var<'t>> {
        self.binary(other, "div", |a, b| Op::Div { a, b }, |x, y| x / y)
    }

    pub fn scale(self, c: f64) -> Res<Var<'t>> {
        self.map_unary("scale", |a| Op::Scale { a, c }, |x| c * x)
    }

    pub fn neg(self) -> Res<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Res<Var<'t>> {
        self.map_unary("add_scalar", |a| Op::AddScalar { a }, |x| x + c)
    }

    pub fn square(self) -> Res<Var<'t>> {
        self.mul(self)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Res<Var<'t>> {
        let shape = self.shape();
        let r = shape.len();
        if r < 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = numel(&shape[..r - 2]);
        let v = self.value();
        let mut out = vec![0.0; v.len()];
        for bi in 0..batch {
            let off = bi * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = v[off + i * cols + j];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let rg = self.requires_grad();
        Ok(self.tape.push(new_shape, out, Op::Transpose { a: self.id }, rg))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Res<Var<'t>> {
        let old = self.shape();
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != numel(&old) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape,
            });
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, self.value(), Op::Reshape { a: self.id }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(self) -> Res<Var<'t>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        let v = self.value();
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x - mx).exp();
                s += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= s;
            }
        }
        check_finite("softmax_rows", &out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, out, Op::SoftmaxRows { a: self.id }, rg))
    }

    /// Normalizes each row over the last axis to zero mean, unit variance
    /// (biased variance, no affine part).
    pub fn layer_norm(self, eps: f64) -> Res<Var<'t>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        let v = self.value();
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.len() / cols);
        for (row, o) in v.chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        check_finite("layer_norm", &out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, out, Op::LayerNorm { a: self.id, inv_std }, rg))
    }

    pub fn relu(self) -> Res<Var<'t>> {
        self.map_unary("relu", |a| Op::Relu { a }, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn log(self) -> Res<Var<'t>> {
        self.map_unary("log", |a| Op::Log { a }, f64::ln)
    }

    pub fn exp(self) -> Res<Var<'t>> {
        self.map_unary("exp", |a| Op::Exp { a }, f64::exp)
    }

    pub fn softplus(self) -> Res<Var<'t>> {
        self.map_unary("softplus", |a| Op::Softplus { a }, special::softplus)
    }

    pub fn lgamma(self) -> Res<Var<'t>> {
        self.map_unary("lgamma", |a| Op::LGamma { a }, special::ln_gamma)
    }

    pub fn norm_cdf(self) -> Res<Var<'t>> {
        self.map_unary("norm_cdf", |a| Op::NormCdf { a }, special::norm_cdf)
    }

    pub fn norm_quantile(self) -> Res<Var<'t>> {
        self.map_unary("norm_quantile", |a| Op::NormQuantile { a }, special::norm_quantile)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Res<Var<'t>> {
        self.map_unary("clamp", |a| Op::Clamp { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Student-t CDF with a single-element degrees-of-freedom variable.
    pub fn t_cdf(self, nu: Var<'t>) -> Res<Var<'t>> {
        let nuv = Self::scalar_arg("t_cdf", nu)?;
        let out: Vec<f64> = self.value().iter().map(|&x| special::t_cdf(x, nuv)).collect();
        check_finite("t_cdf", &out)?;
        let rg = self.requires_grad() || nu.requires_grad();
        Ok(self.tape.push(self.shape(), out, Op::TCdf { a: self.id, nu: nu.id }, rg))
    }

    /// Student-t quantile with a single-element degrees-of-freedom variable.
    pub fn t_quantile(self, nu: Var<'t>) -> Res<Var<'t>> {
        let nuv = Self::scalar_arg("t_quantile", nu)?;
        let out: Vec<f64> = self.value().iter().map(|&u| special::t_quantile(u, nuv)).collect();
        check_finite("t_quantile", &out)?;
        let rg = self.requires_grad() || nu.requires_grad();
        Ok(self
            .tape
            .push(self.shape(), out, Op::TQuantile { a: self.id, nu: nu.id }, rg))
    }

    fn scalar_arg(op: &'static str, v: Var<'t>) -> Res<f64> {
        if v.numel() != 1 {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: v.shape(),
                rhs: vec![1],
            });
        }
        Ok(v.item())
    }

    pub fn sum(self) -> Res<Var<'t>> {
        let s = self.value().iter().fold(0.0, |acc, x| acc + x);
        check_finite("sum", &[s])?;
        let rg = self.requires_grad();
        Ok(self.tape.push(vec![1], vec![s], Op::SumAll { a: self.id }, rg))
    }

    pub fn mean(self) -> Res<Var<'t>> {
        let v = self.value();
        let s = v.iter().fold(0.0, |acc, x| acc + x) / v.len() as f64;
        check_finite("mean", &[s])?;
        let rg = self.requires_grad();
        Ok(self.tape.push(vec![1], vec![s], Op::MeanAll { a: self.id }, rg))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Res<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(DiffError::InvalidArgument {
                op: if mean { "mean_axis" } else { "sum_axis" },
                reason: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let v = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v[(o * len + l) * inner + i];
                }
            }
        }
        if mean {
            for x in out.iter_mut() {
                *x /= len as f64;
            }
        }
        let mut new_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            new_shape,
            out,
            Op::SumAxis {
                a: self.id,
                outer,
                len,
                inner,
                mean,
            },
            rg,
        ))
    }

    /// Sums out one axis.
    pub fn sum_axis(self, axis: usize) -> Res<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Averages out one axis.
    pub fn mean_axis(self, axis: usize) -> Res<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// Builds a tensor of `shape` whose flat entries are `self[index[i]]`,
    /// or zero where the index is `None`.
    pub fn gather(self, index: Vec<Option<usize>>, shape: Vec<usize>) -> Res<Var<'t>> {
        let n = self.numel();
        if numel(&shape) != index.len() || shape.contains(&0) {
            return Err(DiffError::ShapeMismatch {
                op: "gather",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(DiffError::InvalidArgument {
                op: "gather",
                reason: format!("index {bad} out of range for {n} elements"),
            });
        }
        let v = self.value();
        let out = index.iter().map(|ix| ix.map_or(0.0, |i| v[i])).collect();
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, out, Op::Gather { a: self.id, index }, rg))
    }

    /// Picks whole rows of a 2-D tensor.
    pub fn select_rows(self, rows: &[usize]) -> Res<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "select_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let cols = shape[1];
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| Some(r * cols + c)))
            .collect();
        self.gather(index, vec![rows.len().max(1), cols])
    }
}
