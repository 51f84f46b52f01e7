//! Reverse-mode differentiation over vector-valued nodes.
//!
//! Values are computed eagerly as nodes are appended. `backward` walks the
//! tape in reverse and accumulates into a flat gradient laid out like the
//! model's parameter vector.

use crate::error::{Error, Result};
use crate::types::{Prompt, Token};

use super::{PolicyModel, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    /// Concatenation of embedding rows.
    Gather { table: NodeId, rows: Vec<usize>, dim: usize },
    /// `w x + b` with `w` row-major `(b.len(), x.len())`.
    Affine { w: NodeId, b: NodeId, x: NodeId },
    Tanh(NodeId),
    LogSoftmax(NodeId),
    Pick(NodeId, usize),
    /// `bias + sum_i c_i * x_i` over scalar nodes.
    Linear { terms: Vec<(f64, NodeId)> },
    LogSigmoid(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::Gather { .. } => "gather",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Pick(..) => "pick",
            Op::Linear { .. } => "linear",
            Op::LogSigmoid(_) => "log_sigmoid",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    label: Option<String>,
}

/// Computation graph bound to one policy's parameters.
pub struct Graph<'m> {
    model: &'m PolicyModel,
    nodes: Vec<Node>,
    params: Vec<Option<NodeId>>,
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m PolicyModel) -> Self {
        Self {
            model,
            nodes: Vec::new(),
            params: vec![None; model.layout().segments.len()],
        }
    }

    pub fn model(&self) -> &'m PolicyModel {
        self.model
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Attaches a name reported by numeric errors.
    pub fn label(&mut self, id: NodeId, name: impl Into<String>) {
        self.nodes[id.0].label = Some(name.into());
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn node_name(&self, id: usize) -> String {
        let node = &self.nodes[id];
        match &node.label {
            Some(l) => format!("node #{id} {} ({l})", node.op.kind()),
            None => format!("node #{id} {}", node.op.kind()),
        }
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.push(Op::Constant, vec![v])
    }

    fn param(&mut self, seg_index: usize) -> NodeId {
        if let Some(id) = self.params[seg_index] {
            return id;
        }
        let seg: &Segment = &self.model.layout().segments[seg_index];
        let value = self.model.params()[seg.range()].to_vec();
        let id = self.push(Op::Param { offset: seg.offset }, value);
        self.label(id, seg.name.clone());
        self.params[seg_index] = Some(id);
        id
    }

    fn gather(&mut self, table: NodeId, rows: Vec<usize>, dim: usize) -> NodeId {
        let t = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(rows.len() * dim);
        for &r in &rows {
            value.extend_from_slice(&t[r * dim..(r + 1) * dim]);
        }
        self.push(Op::Gather { table, rows, dim }, value)
    }

    fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let (wv, bv, xv) = (
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &self.nodes[x.0].value,
        );
        let cols = xv.len();
        let value = bv
            .iter()
            .enumerate()
            .map(|(r, bias)| {
                bias + wv[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        self.push(Op::Affine { w, b, x }, value)
    }

    fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), value)
    }

    fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let value = super::log_softmax(&self.nodes[x.0].value);
        self.push(Op::LogSoftmax(x), value)
    }

    fn pick(&mut self, x: NodeId, i: usize) -> NodeId {
        let v = self.nodes[x.0].value[i];
        self.push(Op::Pick(x, i), vec![v])
    }

    /// `bias + sum_i c_i * x_i` over scalar nodes.
    pub fn linear(&mut self, terms: Vec<(f64, NodeId)>, bias: f64) -> NodeId {
        let v = terms
            .iter()
            .fold(bias, |acc, (c, id)| acc + c * self.nodes[id.0].value[0]);
        self.push(Op::Linear { terms }, vec![v])
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        self.linear(xs.iter().map(|&x| (1.0, x)).collect(), 0.0)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.linear(vec![(c, x)], 0.0)
    }

    /// `log(sigmoid(x))` computed without overflow.
    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = log_sigmoid(self.nodes[x.0].value[0]);
        self.push(Op::LogSigmoid(x), vec![v])
    }

    /// Log-probability node for `y` given the prompt.
    pub fn sequence_logprob(&mut self, prompt: &Prompt, y: &[Token]) -> Result<NodeId> {
        if y.is_empty() {
            return Err(Error::Size("response must be non-empty".into()));
        }
        self.model.check_prompt(prompt)?;
        self.model.check_tokens(y, "response")?;
        let n_segments = self.model.layout().segments.len();
        let embed = self.param(0);
        let dim = self.model.arch().embed_dim;
        let mut picks = Vec::with_capacity(y.len());
        for t in 0..y.len() {
            let rows = self.model.window(&prompt.text, &y[..t]);
            let mut h = self.gather(embed, rows, dim);
            let mut seg = 1;
            while seg < n_segments {
                let w = self.param(seg);
                let b = self.param(seg + 1);
                h = self.affine(w, b, h);
                seg += 2;
                if seg < n_segments {
                    h = self.tanh(h);
                }
            }
            let lp = self.log_softmax(h);
            picks.push(self.pick(lp, y[t] as usize));
        }
        Ok(self.sum(&picks))
    }

    /// Gradient of a scalar node with respect to every model parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<f64>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Size("backward needs a scalar loss node".into()));
        }
        for i in 0..=loss.0 {
            if self.nodes[i].value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    node: self.node_name(i),
                    detail: "non-finite value".into(),
                });
            }
        }

        let mut out = vec![0.0; self.model.params().len()];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    node: self.node_name(i),
                    detail: "non-finite gradient".into(),
                });
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (o, v) in out[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::Gather { table, rows, dim } => {
                    let len = self.nodes[table.0].value.len();
                    let gt = acc(&mut grads, *table, len);
                    for (k, &r) in rows.iter().enumerate() {
                        for d in 0..*dim {
                            gt[r * dim + d] += g[k * dim + d];
                        }
                    }
                }
                Op::Affine { w, b, x } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let cols = xv.len();
                    {
                        let gw = acc(&mut grads, *w, wv.len());
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            for (gwc, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *gwc += gr * xc;
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *b, g.len());
                        for (o, v) in gb.iter_mut().zip(&g) {
                            *o += v;
                        }
                    }
                    let gx = acc(&mut grads, *x, cols);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (gxc, wc) in gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                            *gxc += gr * wc;
                        }
                    }
                }
                Op::Tanh(x) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, gv), y) in gx.iter_mut().zip(&g).zip(&node.value) {
                        *o += gv * (1.0 - y * y);
                    }
                }
                Op::LogSoftmax(x) => {
                    let total: f64 = g.iter().sum();
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, gv), y) in gx.iter_mut().zip(&g).zip(&node.value) {
                        *o += gv - y.exp() * total;
                    }
                }
                Op::Pick(x, idx) => {
                    let len = self.nodes[x.0].value.len();
                    acc(&mut grads, *x, len)[*idx] += g[0];
                }
                Op::Linear { terms, .. } => {
                    for (c, x) in terms {
                        acc(&mut grads, *x, 1)[0] += c * g[0];
                    }
                }
                Op::LogSigmoid(x) => {
                    // d/dx log sigmoid(x) = sigmoid(-x)
                    let xv = self.nodes[x.0].value[0];
                    acc(&mut grads, *x, 1)[0] += g[0] * sigmoid(-xv);
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{finite_diff_gradient, init_model, sequence_logprob, ArchConfig};

    fn small_model(seed: u64) -> PolicyModel {
        init_model(&ArchConfig {
            vocab_size: 12,
            context_width: 4,
            hidden_dims: vec![10, 6],
            embed_dim: 5,
            init_seed: seed,
            init_scale: 0.6,
        })
        .unwrap()
    }

    #[test]
    fn tape_value_matches_numeric_forward() {
        let m = small_model(3);
        let p = Prompt::new("p", vec![4, 5, 6]);
        let y = [6, 5, 4, 0];
        let mut g = Graph::new(&m);
        let lp = g.sequence_logprob(&p, &y).unwrap();
        let (direct, _) = sequence_logprob(&m, &p, &y).unwrap();
        assert!((g.scalar(lp) - direct).abs() < 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let m = small_model(1);
        let mut g = Graph::new(&m);
        let c = g.constant(3.5);
        assert!(g.backward(c).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let m = small_model(5);
        let p = Prompt::new("p", vec![1, 2]);
        let y = [3, 7, 0];
        let mut g = Graph::new(&m);
        let lp = g.sequence_logprob(&p, &y).unwrap();
        let analytic = g.backward(lp).unwrap();
        let numeric = finite_diff_gradient(
            &m,
            |mm| Ok(sequence_logprob(mm, &p, &y)?.0),
            1e-5,
        )
        .unwrap();
        let err = crate::tinylm::max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn linear_combination_of_losses() {
        let m = small_model(8);
        let p = Prompt::new("p", vec![9, 3]);
        let grad_of = |y: &[Token]| {
            let mut g = Graph::new(&m);
            let n = g.sequence_logprob(&p, y).unwrap();
            g.backward(n).unwrap()
        };
        let g1 = grad_of(&[1, 2]);
        let g2 = grad_of(&[4, 4, 0]);
        let (a, b) = (0.7, -2.3);
        let mut g = Graph::new(&m);
        let l1 = g.sequence_logprob(&p, &[1, 2]).unwrap();
        let l2 = g.sequence_logprob(&p, &[4, 4, 0]).unwrap();
        let total = g.linear(vec![(a, l1), (b, l2)], 0.0);
        let combined = g.backward(total).unwrap();
        for i in 0..combined.len() {
            assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((sigmoid(1.0) + sigmoid(-1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_value_names_node() {
        let m = small_model(2);
        let mut g = Graph::new(&m);
        let c = g.constant(f64::INFINITY);
        g.label(c, "bad reward");
        let l = g.scale(c, 2.0);
        match g.backward(l) {
            Err(Error::Numeric { node, .. }) => assert!(node.contains("bad reward"), "{node}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
