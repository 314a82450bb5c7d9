//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! The forward pass is eager: [`Tape::apply`] computes the result immediately
//! and records a node holding the op, its input node ids, and the value.
//! [`Tape::backward`] replays the nodes in reverse, accumulating
//! vector-Jacobian products into every node that feeds the loss.
//!
//! The elementary primitive set lives here; convolution and other layer
//! kernels plug in through the [`Op`] trait from their own module.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, ErrorKind, Result};
use crate::tensor::{Scalar, Tensor};

const MODULE: &str = "tensor-autodiff";

/// A differentiable operation: eager forward plus a VJP rule.
pub trait Op<T: Scalar>: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradient of the loss w.r.t. each input, given the inputs, the stored
    /// output value, and the upstream gradient (same dims as the output).
    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

/// Identifier of a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<NodeId>,
    op: Option<Arc<dyn Op<T>>>,
    trainable: bool,
}

/// Wengert tape: append-only record of one forward computation.
///
/// Node inputs always reference earlier nodes, so the record is in
/// topological order by construction. A tape belongs to one logical
/// execution context; build one per sample when training in parallel.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value. Trainable leaves receive gradients from
    /// [`Tape::backward`]; others are constants.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, trainable });
        NodeId(self.nodes.len() - 1)
    }

    /// Apply an op to existing nodes, recording the result.
    pub fn apply(&mut self, op: Arc<dyn Op<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = op.forward(&tensors)?;
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: Some(op),
            trainable: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Shorthand for applying an elementary primitive.
    pub fn prim(&mut self, p: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(Arc::new(p), inputs)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Recompute every non-leaf value from the leaves. Used by tests to
    /// confirm the tape reproduces the forward pass exactly.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                None => node.value.clone(),
                Some(op) => {
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &values[id.0]).collect();
                    op.forward(&ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// use [`Gradients::get`] with the leaf ids of interest.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::new(
                MODULE,
                ErrorKind::Contract,
                format!("backward requires a scalar loss, got dims {:?}", loss_node.value.dims()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_node.value.dims().to_vec(), T::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(upstream) = grads[idx].clone() else { continue };
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let contribs = op.vjp(&ins, &node.value, &upstream)?;
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (input_id, contrib) in node.inputs.iter().zip(contribs) {
                match &mut grads[input_id.0] {
                    Some(acc) => {
                        for (a, c) in acc.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Ids of all trainable leaves, in recording order.
    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.is_none() && n.trainable)
            .map(|(i, _)| NodeId(i))
            .collect()
    }
}

/// Gradient of the loss w.r.t. every node that feeds it.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a node; `None` when no path connects it to the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zero-filled when disconnected from the loss.
    pub fn get_or_zeros(&self, id: NodeId, dims: &[usize]) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(dims.to_vec()),
        }
    }
}

// ---------------------------------------------------------------------------
// Elementary primitives
// ---------------------------------------------------------------------------

/// The elementary differentiable primitive set.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Matmul,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    Reshape(Vec<usize>),
    /// Concatenate along axis 0 (the channel axis for CHW tensors).
    ConcatChannels,
    /// Zero-pad the last two axes symmetrically.
    Pad2d(usize),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Matmul => "matmul",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Reshape(_) => "reshape",
            Primitive::ConcatChannels => "concat-channels",
            Primitive::Pad2d(_) => "pad2d",
        }
    }
}

fn arity_err(name: &str, want: &str, got: usize) -> Error {
    Error::new(MODULE, ErrorKind::Contract, format!("{name} takes {want} inputs, got {got}"))
}

fn dims_mismatch(name: &str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(MODULE, format!("{name}: dims {:?} vs {:?} are incompatible", a, b))
}

fn binary_elementwise<T: Scalar>(
    name: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(dims_mismatch(name, a.dims(), b.dims()));
    }
    let elems = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.dims().to_vec(), elems)
}

fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(dims_mismatch("matmul", a.dims(), b.dims()));
    }
    let av = a.as_slice();
    let bv = b.as_slice();
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &av[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &bv[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = t.dims2()?;
    let v = t.as_slice();
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    Tensor::from_vec(vec![c, r], out)
}

fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.len() < 2 {
        return Err(arity_err("concat-channels", "2+", inputs.len()));
    }
    let first = inputs[0];
    if first.rank() == 0 {
        return Err(Error::shape(MODULE, "concat-channels: rank-0 input".to_string()));
    }
    let trailing = &first.dims()[1..];
    let mut axis_total = 0;
    for t in inputs {
        if t.rank() != first.rank() || &t.dims()[1..] != trailing {
            return Err(dims_mismatch("concat-channels", first.dims(), t.dims()));
        }
        axis_total += t.dims()[0];
    }
    let mut dims = first.dims().to_vec();
    dims[0] = axis_total;
    let mut elems = Vec::with_capacity(dims.iter().product());
    for t in inputs {
        elems.extend_from_slice(t.as_slice());
    }
    Tensor::from_vec(dims, elems)
}

fn pad2d<T: Scalar>(t: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let v = t.as_slice();
    let mut out = vec![T::ZERO; c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            let src = &v[(ch * h + y) * w..(ch * h + y) * w + w];
            let dst_base = (ch * ho + y + pad) * wo + pad;
            out[dst_base..dst_base + w].copy_from_slice(src);
        }
    }
    Tensor::from_vec(vec![c, ho, wo], out)
}

/// Evaluate an elementary primitive. Pure: identical inputs produce
/// bit-identical outputs.
pub fn apply_primitive<T: Scalar>(p: &Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let unary = |name| -> Result<&Tensor<T>> {
        if inputs.len() == 1 {
            Ok(inputs[0])
        } else {
            Err(arity_err(name, "1", inputs.len()))
        }
    };
    let binary = |name| -> Result<(&Tensor<T>, &Tensor<T>)> {
        if inputs.len() == 2 {
            Ok((inputs[0], inputs[1]))
        } else {
            Err(arity_err(name, "2", inputs.len()))
        }
    };
    match p {
        Primitive::Add => {
            let (a, b) = binary("add")?;
            binary_elementwise("add", a, b, |x, y| x + y)
        }
        Primitive::Sub => {
            let (a, b) = binary("sub")?;
            binary_elementwise("sub", a, b, |x, y| x - y)
        }
        Primitive::Mul => {
            let (a, b) = binary("mul")?;
            binary_elementwise("mul", a, b, |x, y| x * y)
        }
        Primitive::Matmul => {
            let (a, b) = binary("matmul")?;
            matmul(a, b)
        }
        Primitive::Relu => Ok(unary("relu")?.map(|v| v.maximum(T::ZERO))),
        Primitive::Exp => Ok(unary("exp")?.map(Scalar::exp)),
        Primitive::Log => Ok(unary("log")?.map(Scalar::ln)),
        Primitive::Sum => {
            let t = unary("sum")?;
            let mut acc = T::ZERO;
            for &v in t.as_slice() {
                acc += v;
            }
            Ok(Tensor::scalar(acc))
        }
        Primitive::Mean => {
            let t = unary("mean")?;
            let mut acc = T::ZERO;
            for &v in t.as_slice() {
                acc += v;
            }
            Ok(Tensor::scalar(acc / T::from_f64(t.numel() as f64)))
        }
        Primitive::Reshape(dims) => {
            let t = unary("reshape")?;
            t.reshaped(dims.clone()).map_err(|_| {
                Error::shape(
                    MODULE,
                    format!("reshape: dims {:?} vs {:?} differ in element count", t.dims(), dims),
                )
            })
        }
        Primitive::ConcatChannels => concat_channels(inputs),
        Primitive::Pad2d(pad) => pad2d(unary("pad2d")?, *pad),
    }
}

impl<T: Scalar> Op<T> for Primitive {
    fn name(&self) -> &'static str {
        Primitive::name(self)
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        apply_primitive(self, inputs)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let up = upstream;
        match self {
            Primitive::Add => Ok(vec![up.clone(), up.clone()]),
            Primitive::Sub => Ok(vec![up.clone(), up.map(|v| -v)]),
            Primitive::Mul => Ok(vec![
                binary_elementwise("mul-vjp", up, inputs[1], |d, b| d * b)?,
                binary_elementwise("mul-vjp", up, inputs[0], |d, a| d * a)?,
            ]),
            Primitive::Matmul => {
                let da = matmul(up, &transpose2(inputs[1])?)?;
                let db = matmul(&transpose2(inputs[0])?, up)?;
                Ok(vec![da, db])
            }
            Primitive::Relu => {
                // Subgradient at the kink is 0.
                Ok(vec![binary_elementwise("relu-vjp", up, inputs[0], |d, x| {
                    if x > T::ZERO {
                        d
                    } else {
                        T::ZERO
                    }
                })?])
            }
            Primitive::Exp => Ok(vec![binary_elementwise("exp-vjp", up, output, |d, y| d * y)?]),
            Primitive::Log => Ok(vec![binary_elementwise("log-vjp", up, inputs[0], |d, x| d / x)?]),
            Primitive::Sum => {
                let d = up.item()?;
                Ok(vec![Tensor::full(inputs[0].dims().to_vec(), d)])
            }
            Primitive::Mean => {
                let d = up.item()? / T::from_f64(inputs[0].numel() as f64);
                Ok(vec![Tensor::full(inputs[0].dims().to_vec(), d)])
            }
            Primitive::Reshape(_) => Ok(vec![up.reshaped(inputs[0].dims().to_vec())?]),
            Primitive::ConcatChannels => {
                let trailing: usize = inputs[0].dims()[1..].iter().product();
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for t in inputs {
                    let n = t.dims()[0] * trailing;
                    let part = up.as_slice()[offset..offset + n].to_vec();
                    out.push(Tensor::from_vec(t.dims().to_vec(), part)?);
                    offset += n;
                }
                Ok(out)
            }
            Primitive::Pad2d(pad) => {
                let (c, h, w) = inputs[0].dims3()?;
                let wo = w + 2 * pad;
                let ho = h + 2 * pad;
                let uv = up.as_slice();
                let mut out = vec![T::ZERO; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        let src_base = (ch * ho + y + pad) * wo + pad;
                        let dst_base = (ch * h + y) * w;
                        out[dst_base..dst_base + w].copy_from_slice(&uv[src_base..src_base + w]);
                    }
                }
                Ok(vec![Tensor::from_vec(vec![c, h, w], out)?])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Check the analytic gradient of a scalar-valued program against central
/// differences at `point`. The program is handed a fresh tape and the node
/// holding `point`; it must return the node to differentiate (non-scalar
/// outputs are reduced by sum). Returns the max over coordinates of
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn grad_check<F>(program: F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let mut out = program(&mut tape, leaf)?;
        if !tape.value(out).is_scalar() {
            out = tape.prim(Primitive::Sum, &[out])?;
        }
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::new(
                MODULE,
                ErrorKind::Evaluation,
                format!("callable is non-finite at the evaluation point ({v})"),
            ));
        }
        Ok(v)
    };

    // Analytic gradient from one taped run.
    let mut tape = Tape::new();
    let leaf = tape.leaf(point.clone(), true);
    let mut out = program(&mut tape, leaf)?;
    if !tape.value(out).is_scalar() {
        out = tape.prim(Primitive::Sum, &[out])?;
    }
    let out_val = tape.value(out).item()?;
    if !out_val.is_finite() {
        return Err(Error::new(
            MODULE,
            ErrorKind::Evaluation,
            format!("callable is non-finite at the evaluation point ({out_val})"),
        ));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(leaf, point.dims());

    let mut max_err = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + GRAD_CHECK_STEP;
        let plus = eval(&probe)?;
        probe.as_mut_slice()[i] = orig - GRAD_CHECK_STEP;
        let minus = eval(&probe)?;
        probe.as_mut_slice()[i] = orig;
        let cd = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic.as_slice()[i];
        let denom = a.abs().max(cd.abs()).max(1e-8);
        max_err = max_err.max((a - cd).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn rand_tensor(dims: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-2.0..2.0))
    }

    /// Push values away from the relu kink so finite differences stay valid.
    fn away_from_kink(t: &Tensor<f64>) -> Tensor<f64> {
        t.map(|v| if v.abs() < 1e-3 { v + 0.5 } else { v })
    }

    #[test]
    fn add_elementwise() {
        let a = Tensor::from_vec(vec![2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0f32, 4.0]).unwrap();
        let out = apply_primitive(&Primitive::Add, &[&a, &b]).unwrap();
        assert_eq!(out.as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(vec![2, 2], vec![5.0f64, 6.0, 7.0, 8.0]).unwrap();
        let out = apply_primitive(&Primitive::Matmul, &[&eye, &m]).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let out = apply_primitive(&Primitive::Relu, &[&x]).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_error_names_primitive_and_dims() {
        let a = Tensor::<f32>::zeros(vec![2]);
        let b = Tensor::<f32>::zeros(vec![3]);
        let err = apply_primitive(&Primitive::Add, &[&a, &b]).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Shape);
        assert!(err.msg.contains("add"), "{}", err.msg);
        assert!(err.msg.contains("[2]") && err.msg.contains("[3]"), "{}", err.msg);
    }

    #[test]
    fn apply_primitive_is_pure() {
        let mut rng = substream(11, "purity", &[]);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        let x = apply_primitive(&Primitive::Matmul, &[&a, &b]).unwrap();
        let y = apply_primitive(&Primitive::Matmul, &[&a, &b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn backward_square() {
        // loss = x * x at x = 3 -> gradient 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let y = tape.prim(Primitive::Mul, &[x, x]).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2, 3], vec![0.5f64; 6]).unwrap(), true);
        let s = tape.prim(Primitive::Sum, &[w]).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.get(w).unwrap();
        assert_eq!(g.dims(), &[2, 3]);
        assert!(g.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![2]), true);
        let err = tape.backward(x).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Contract);
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_softmax_minus_onehot() {
        // Composed from primitives: loss = log(sum(exp(z))) - sum(y .* z).
        let z = Tensor::from_vec(vec![3], vec![0.4f64, -1.1, 0.7]).unwrap();
        let onehot = Tensor::from_vec(vec![3], vec![0.0f64, 0.0, 1.0]).unwrap();
        let build = |tape: &mut Tape<f64>, zn: NodeId| -> Result<NodeId> {
            let y = tape.leaf(onehot.clone(), false);
            let e = tape.prim(Primitive::Exp, &[zn])?;
            let se = tape.prim(Primitive::Sum, &[e])?;
            let lse = tape.prim(Primitive::Log, &[se])?;
            let yz = tape.prim(Primitive::Mul, &[y, zn])?;
            let syz = tape.prim(Primitive::Sum, &[yz])?;
            tape.prim(Primitive::Sub, &[lse, syz])
        };

        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone(), true);
        let loss = build(&mut tape, zn).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(zn).unwrap();

        // Analytic target: softmax(z) - onehot.
        let exps: Vec<f64> = z.as_slice().iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        for i in 0..3 {
            let want = exps[i] / total - onehot.as_slice()[i];
            assert!((g.as_slice()[i] - want).abs() < 1e-12);
        }

        // And against central differences.
        let err = grad_check(build, &z).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_relu_away_from_kink() {
        let err = grad_check(
            |tape, x| tape.prim(Primitive::Relu, &[x]),
            &Tensor::scalar(1.0f64),
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let err = grad_check(
            |tape, x| tape.prim(Primitive::Log, &[x]),
            &Tensor::scalar(-1.0f64),
        )
        .unwrap_err();
        assert_eq!(err.kind, ErrorKind::Evaluation);
    }

    #[test]
    fn every_primitive_passes_grad_check_at_random_points() {
        for trial in 0..10u64 {
            let mut rng = substream(401, "prim-gradcheck", &[trial]);

            let x = away_from_kink(&rand_tensor(&[2, 3], &mut rng));
            let other = rand_tensor(&[2, 3], &mut rng);
            let rhs = rand_tensor(&[3, 2], &mut rng);
            let positive = rand_tensor(&[2, 3], &mut rng).map(|v| v.abs() + 0.5);

            let with_const = |p: Primitive, c: Tensor<f64>, point_first: bool| {
                move |tape: &mut Tape<f64>, x: NodeId| {
                    let k = tape.leaf(c.clone(), false);
                    let ins = if point_first { [x, k] } else { [k, x] };
                    tape.prim(p.clone(), &ins)
                }
            };

            let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>>, Tensor<f64>)> = vec![
                ("add", Box::new(with_const(Primitive::Add, other.clone(), true)), x.clone()),
                ("sub-lhs", Box::new(with_const(Primitive::Sub, other.clone(), true)), x.clone()),
                ("sub-rhs", Box::new(with_const(Primitive::Sub, other.clone(), false)), x.clone()),
                ("mul", Box::new(with_const(Primitive::Mul, other.clone(), true)), x.clone()),
                ("matmul-lhs", Box::new(with_const(Primitive::Matmul, rhs.clone(), true)), x.clone()),
                ("matmul-rhs", Box::new(with_const(Primitive::Matmul, x.clone(), false)), rhs.clone()),
                ("relu", Box::new(|t: &mut Tape<f64>, x| t.prim(Primitive::Relu, &[x])), x.clone()),
                ("exp", Box::new(|t: &mut Tape<f64>, x| t.prim(Primitive::Exp, &[x])), x.clone()),
                ("log", Box::new(|t: &mut Tape<f64>, x| t.prim(Primitive::Log, &[x])), positive),
                ("sum", Box::new(|t: &mut Tape<f64>, x| t.prim(Primitive::Sum, &[x])), x.clone()),
                ("mean", Box::new(|t: &mut Tape<f64>, x| t.prim(Primitive::Mean, &[x])), x.clone()),
                (
                    "reshape",
                    Box::new(|t: &mut Tape<f64>, x| {
                        let r = t.prim(Primitive::Reshape(vec![6]), &[x])?;
                        // Follow with a nonlinearity so the check is not vacuous.
                        t.prim(Primitive::Exp, &[r])
                    }),
                    x.clone(),
                ),
                (
                    "concat-channels",
                    Box::new(move |t: &mut Tape<f64>, x| {
                        let k = t.leaf(other.clone(), false);
                        let c = t.prim(Primitive::ConcatChannels, &[x, k])?;
                        t.prim(Primitive::Exp, &[c])
                    }),
                    x.clone(),
                ),
                (
                    "pad2d",
                    Box::new(|t: &mut Tape<f64>, x| {
                        let p = t.prim(Primitive::Pad2d(1), &[x])?;
                        t.prim(Primitive::Exp, &[p])
                    }),
                    rand_tensor(&[2, 3, 3], &mut rng),
                ),
            ];

            for (name, program, point) in cases {
                let err = grad_check(program.as_ref(), &point).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: max relative error {err}");
            }
        }
    }

    #[test]
    fn replay_reproduces_values_exactly() {
        let mut rng = substream(12, "replay", &[]);
        let mut tape = Tape::new();
        let a = tape.leaf(rand_tensor(&[3, 3], &mut rng), true);
        let b = tape.leaf(rand_tensor(&[3, 3], &mut rng), false);
        let c = tape.prim(Primitive::Matmul, &[a, b]).unwrap();
        let d = tape.prim(Primitive::Relu, &[c]).unwrap();
        let e = tape.prim(Primitive::Mean, &[d]).unwrap();
        let values = tape.replay().unwrap();
        for (i, v) in values.iter().enumerate() {
            assert_eq!(v, tape.value(NodeId(i)));
        }
        let _ = e;
    }

    #[test]
    fn backward_is_deterministic_across_tape_builds() {
        let run = || {
            let mut rng = substream(99, "det", &[]);
            let mut tape = Tape::new();
            let a = tape.leaf(rand_tensor(&[4, 4], &mut rng), true);
            let b = tape.leaf(rand_tensor(&[4, 4], &mut rng), true);
            let m = tape.prim(Primitive::Matmul, &[a, b]).unwrap();
            let r = tape.prim(Primitive::Relu, &[m]).unwrap();
            let s = tape.prim(Primitive::Sum, &[r]).unwrap();
            let g = tape.backward(s).unwrap();
            (g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }
}
