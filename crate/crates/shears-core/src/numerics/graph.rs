//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records primitive ops as they execute; node creation order is
//! a topological order of the DAG, so the backward pass is a single reverse
//! sweep that visits each node exactly once. Leaves registered through
//! [`Graph::param`] collect gradients into a name-keyed map; leaves from
//! [`Graph::constant`] are frozen and gradient computation is skipped for
//! any subgraph that cannot reach a parameter.

use std::collections::BTreeMap;

use super::ops;
use super::{NumResult, NumericsError, Tensor};

pub type NodeId = usize;

/// Per-parameter gradients, keyed by the name given to [`Graph::param`].
pub type GradientMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    Matmul { a: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gelu { a: NodeId },
    Embedding { table: NodeId, ids: Vec<u32> },
    SliceCols { a: NodeId, start: usize, len: usize },
    SliceRows { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    Sum { a: NodeId },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        pad: u32,
        smoothing: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A DAG of executed primitive ops plus per-parameter gradient accumulators.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Inserts a frozen leaf: no gradient is collected for it and subgraphs
    /// reaching only constants are skipped during backward.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Inserts a trainable leaf whose gradient appears in the backward map.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> NodeId {
        self.push(
            t,
            Op::Leaf {
                param: Some(name.into()),
            },
            true,
        )
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Matmul { a, b }, ng))
    }

    /// `a x b^T`, used for attention scores.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatmulNT { a, b }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NumResult<NodeId> {
        let v = ops::add_bias(self.value(a), self.value(bias))?;
        let ng = self.needs(&[a, bias]);
        Ok(self.push(v, Op::AddBias { a, bias }, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NumResult<NodeId> {
        let v = ops::scale(self.value(a), c)?;
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::Scale { a, c }, ng))
    }

    pub fn softmax(&mut self, a: NodeId) -> NumResult<NodeId> {
        let v = ops::softmax_rows(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::Softmax { a }, ng))
    }

    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NumResult<NodeId> {
        let v = ops::layernorm_rows(self.value(x), self.value(gamma), self.value(beta))?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta }, ng))
    }

    pub fn gelu(&mut self, a: NodeId) -> NumResult<NodeId> {
        let v = ops::gelu(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::Gelu { a }, ng))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> NumResult<NodeId> {
        let v = ops::embedding(self.value(table), ids)?;
        let ng = self.needs(&[table]);
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NumResult<NodeId> {
        let v = ops::slice_cols(self.value(a), start, len)?;
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::SliceCols { a, start, len }, ng))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NumResult<NodeId> {
        let v = ops::slice_rows(self.value(a), start, len)?;
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::SliceRows { a, start, len }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NumResult<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_cols(&tensors)?;
        let ng = self.needs(parts);
        Ok(self.push(
            v,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NumResult<NodeId> {
        let v = ops::sum(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::Sum { a }, ng))
    }

    /// Mean cross-entropy over non-pad positions (see [`ops::cross_entropy`]).
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        pad: u32,
        smoothing: f32,
    ) -> NumResult<NodeId> {
        let v = ops::cross_entropy(self.value(logits), targets, pad, smoothing)?;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                smoothing,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`: every node is visited exactly once
    /// in reverse creation (= reverse topological) order, and the map of
    /// parameter gradients is returned. Parameters that do not influence the
    /// loss get zero gradients of the right shape.
    pub fn backward(&self, loss: NodeId) -> NumResult<GradientMap> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            if let Op::Leaf { param: Some(_) } = &self.nodes[id].op {
                grads[id] = Some(g); // keep leaf gradients for collection
            }
        }

        let mut map = GradientMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                map.insert(
                    name.clone(),
                    Tensor::with_op_name(node.value.shape().to_vec(), data, "backward")?,
                );
            }
        }
        Ok(map)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], id: NodeId, contribution: &[f32]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => grads[id] = Some(contribution.to_vec()),
        }
    }

    fn propagate(
        &self,
        id: NodeId,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> NumResult<()> {
        let out = &self.nodes[id].value;
        let gt = |shape: &[usize]| Tensor::new(shape.to_vec(), g.to_vec());
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let gten = gt(out.shape())?;
                if self.nodes[*a].needs_grad {
                    let da = ops::matmul_nt(&gten, self.value(*b))?;
                    self.accumulate(grads, *a, da.data());
                }
                if self.nodes[*b].needs_grad {
                    let db = ops::matmul_tn(self.value(*a), &gten)?;
                    self.accumulate(grads, *b, db.data());
                }
            }
            Op::MatmulNT { a, b } => {
                let gten = gt(out.shape())?;
                if self.nodes[*a].needs_grad {
                    let da = ops::matmul(&gten, self.value(*b))?;
                    self.accumulate(grads, *a, da.data());
                }
                if self.nodes[*b].needs_grad {
                    let db = ops::matmul_tn(&gten, self.value(*a))?;
                    self.accumulate(grads, *b, db.data());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddBias { a, bias } => {
                self.accumulate(grads, *a, g);
                if self.nodes[*bias].needs_grad {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0f32; n];
                    for row in g.chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f32> = g.iter().map(|gi| gi * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax { a } => {
                // ds = s * (g - <g, s>) per row
                let s = out;
                let (_, n) = s.dims2("softmax")?;
                let mut da = Vec::with_capacity(g.len());
                for (srow, grow) in s.data().chunks_exact(n).zip(g.chunks_exact(n)) {
                    let dot: f64 = srow
                        .iter()
                        .zip(grow)
                        .map(|(&si, &gi)| si as f64 * gi as f64)
                        .sum();
                    da.extend(
                        srow.iter()
                            .zip(grow)
                            .map(|(&si, &gi)| (si as f64 * (gi as f64 - dot)) as f32),
                    );
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                self.layernorm_backward(*x, *gamma, *beta, g, grads)?;
            }
            Op::Gelu { a } => {
                let da: Vec<f32> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| gi * ops::gelu_grad_scalar(xi))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Embedding { table, ids } => {
                if self.nodes[*table].needs_grad {
                    let tt = self.value(*table);
                    let (v, d) = tt.dims2("embedding")?;
                    let mut dt = vec![0.0f32; v * d];
                    for (row, &tok) in g.chunks_exact(d).zip(ids) {
                        let base = tok as usize * d;
                        for (slot, &val) in dt[base..base + d].iter_mut().zip(row) {
                            *slot += val;
                        }
                    }
                    self.accumulate(grads, *table, &dt);
                }
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = self.value(*a).dims2("slice_cols")?;
                let mut da = vec![0.0f32; m * n];
                for (i, row) in g.chunks_exact(*len).enumerate() {
                    da[i * n + start..i * n + start + len].copy_from_slice(row);
                }
                self.accumulate(grads, *a, &da);
            }
            Op::SliceRows { a, start, len } => {
                let (m, n) = self.value(*a).dims2("slice_rows")?;
                let mut da = vec![0.0f32; m * n];
                da[start * n..(start + len) * n].copy_from_slice(g);
                self.accumulate(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.value(p).shape()[1])
                    .collect();
                let total: usize = widths.iter().sum();
                let m = out.shape()[0];
                let mut offset = 0usize;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.nodes[p].needs_grad {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                smoothing,
            } => {
                if self.nodes[*logits].needs_grad {
                    let dl = ops::cross_entropy_grad(
                        self.value(*logits),
                        targets,
                        *pad,
                        *smoothing,
                        g[0],
                    )?;
                    self.accumulate(grads, *logits, &dl);
                }
            }
        }
        Ok(())
    }

    fn layernorm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> NumResult<()> {
        let xt = self.value(x);
        let (m, n) = xt.dims2("layernorm")?;
        let gam = self.value(gamma).data();
        let mut dx = vec![0.0f32; m * n];
        let mut dgamma = vec![0.0f32; n];
        let mut dbeta = vec![0.0f32; n];
        for i in 0..m {
            let row = &xt.data()[i * n..(i + 1) * n];
            let grow = &g[i * n..(i + 1) * n];
            let (mean, var) = ops::row_mean_var(row);
            let inv = 1.0 / (var + ops::LAYERNORM_EPS as f64).sqrt();
            let xhat: Vec<f64> = row.iter().map(|&v| (v as f64 - mean) * inv).collect();
            let mut sum_gy = 0.0f64;
            let mut sum_gyx = 0.0f64;
            for j in 0..n {
                let gy = grow[j] as f64 * gam[j] as f64;
                sum_gy += gy;
                sum_gyx += gy * xhat[j];
                dgamma[j] += (grow[j] as f64 * xhat[j]) as f32;
                dbeta[j] += grow[j];
            }
            let nf = n as f64;
            for j in 0..n {
                let gy = grow[j] as f64 * gam[j] as f64;
                dx[i * n + j] = (inv * (gy - sum_gy / nf - xhat[j] * sum_gyx / nf)) as f32;
            }
        }
        self.accumulate(grads, x, &dx);
        if self.nodes[gamma].needs_grad {
            self.accumulate(grads, gamma, &dgamma);
        }
        if self.nodes[beta].needs_grad {
            self.accumulate(grads, beta, &dbeta);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;

    fn seeded(seed: u64, n: usize, scale: f32) -> Vec<f32> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                ((s >> 40) as f32 / 16777216.0 - 0.5) * scale
            })
            .collect()
    }

    fn t(shape: Vec<usize>, seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, seeded(seed, n, 2.0)).unwrap()
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Graph::new();
        let w = g.param("w", t(vec![3, 4], 1));
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads["w"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        // loss = sum(w * w) / 2  =>  dloss/dw == w
        let mut g = Graph::new();
        let wt = t(vec![2, 5], 2);
        let w = g.param("w", wt.clone());
        let sq = g.mul(w, w).unwrap();
        let tot = g.sum(sq).unwrap();
        let loss = g.scale(tot, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        for (got, want) in grads["w"].data().iter().zip(wt.data()) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.param("w", t(vec![2, 2], 3));
        let y = g.scale(w, 2.0).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(NumericsError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", t(vec![2, 2], 4));
        let _unused = g.param("u", t(vec![3], 5));
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads["u"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_do_not_appear_in_gradient_map() {
        let mut g = Graph::new();
        let w = g.param("w", t(vec![2, 3], 6));
        let c = g.constant(t(vec![3, 2], 7));
        let y = g.matmul(w, c).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains_key("w"));
    }

    // Central finite-difference checks for each primitive, using random
    // weighting of the output so asymmetric errors cannot cancel.
    fn check_unary(name: &str, f: impl Fn(&mut Graph, NodeId) -> NumResult<NodeId>, x: Tensor) {
        let weights = Tensor::new(
            x.shape().to_vec(),
            seeded(99, x.numel(), 1.0).iter().map(|v| v + 1.5).collect(),
        )
        .unwrap();
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), x);
        let build = move |g: &mut Graph, p: &BTreeMap<String, Tensor>| {
            let x = g.param("x", p["x"].clone());
            let y = f(g, x)?;
            let w = g.constant(weights.clone());
            let wy = g.mul(y, w)?;
            g.sum(wy)
        };
        let report = gradcheck::check(&params, &build, 1e-2).unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "{name}: rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn finite_difference_gelu() {
        check_unary("gelu", |g, x| g.gelu(x), t(vec![3, 4], 11));
    }

    #[test]
    fn finite_difference_softmax() {
        check_unary("softmax", |g, x| g.softmax(x), t(vec![4, 5], 12));
    }

    #[test]
    fn finite_difference_scale_slice_concat() {
        check_unary(
            "scale+slice+concat",
            |g, x| {
                let s = g.scale(x, 1.7)?;
                let l = g.slice_cols(s, 0, 2)?;
                let r = g.slice_cols(s, 2, 4)?;
                let c = g.concat_cols(&[r, l])?;
                g.slice_rows(c, 1, 2)
            },
            t(vec![4, 6], 13),
        );
    }

    #[test]
    fn finite_difference_matmul_both_sides() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), t(vec![3, 4], 21));
        params.insert("b".to_string(), t(vec![4, 2], 22));
        let build = |g: &mut Graph, p: &BTreeMap<String, Tensor>| {
            let a = g.param("a", p["a"].clone());
            let b = g.param("b", p["b"].clone());
            let y = g.matmul(a, b)?;
            g.sum(y)
        };
        let report = gradcheck::check(&params, &build, 1e-2).unwrap();
        assert!(report.max_rel_err < 1e-3, "{}", report.max_rel_err);
    }

    #[test]
    fn finite_difference_matmul_nt() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), t(vec![3, 4], 23));
        params.insert("b".to_string(), t(vec![5, 4], 24));
        let build = |g: &mut Graph, p: &BTreeMap<String, Tensor>| {
            let a = g.param("a", p["a"].clone());
            let b = g.param("b", p["b"].clone());
            let y = g.matmul_nt(a, b)?;
            g.sum(y)
        };
        let report = gradcheck::check(&params, &build, 1e-2).unwrap();
        assert!(report.max_rel_err < 1e-3, "{}", report.max_rel_err);
    }

    #[test]
    fn finite_difference_layernorm() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), t(vec![3, 6], 31));
        params.insert("gamma".to_string(), t(vec![6], 32));
        params.insert("beta".to_string(), t(vec![6], 33));
        let build = |g: &mut Graph, p: &BTreeMap<String, Tensor>| {
            let x = g.param("x", p["x"].clone());
            let gamma = g.param("gamma", p["gamma"].clone());
            let beta = g.param("beta", p["beta"].clone());
            let y = g.layernorm(x, gamma, beta)?;
            g.sum(y)
        };
        let report = gradcheck::check(&params, &build, 1e-2).unwrap();
        assert!(report.max_rel_err < 1e-3, "{}", report.max_rel_err);
    }

    #[test]
    fn finite_difference_bias_and_embedding_and_ce() {
        let mut params = BTreeMap::new();
        params.insert("table".to_string(), t(vec![7, 4], 41));
        params.insert("bias".to_string(), t(vec![4], 42));
        let ids = vec![1u32, 4, 2, 4];
        let targets = vec![3u32, 0, 9, 1]; // 9 == pad
        let build = move |g: &mut Graph, p: &BTreeMap<String, Tensor>| {
            let table = g.param("table", p["table"].clone());
            let bias = g.param("bias", p["bias"].clone());
            let e = g.embedding(table, &ids)?;
            let h = g.add_bias(e, bias)?;
            g.cross_entropy(h, &targets, 9, 0.1)
        };
        let report = gradcheck::check(&params, &build, 1e-2).unwrap();
        assert!(report.max_rel_err < 1e-3, "{}", report.max_rel_err);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(t(vec![6, 6], 51));
            let b = g.constant(t(vec![6, 6], 52));
            let m = g.matmul(a, b).unwrap();
            let s = g.softmax(m).unwrap();
            let e = g.gelu(s).unwrap();
            g.value(e).clone()
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn nan_is_rejected_not_propagated() {
        let mut g = Graph::new();
        // exp overflow: scale a large constant until softmax input overflows
        let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let big = g.scale(a, 3.0e38).unwrap_err();
        assert!(matches!(big, NumericsError::NonFinite { .. }));
    }
}
