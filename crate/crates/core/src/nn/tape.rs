//! Minimal reverse-mode tape over ndarray.
//!
//! Values are evaluated eagerly when an op is recorded; `backward` walks the
//! tape once in reverse and accumulates gradients into named parameter slots.
//! Parameters a loss never touches therefore receive *no* gradient entry at
//! all, which is what makes winner-only training structurally exact.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::lie;
use crate::nn::ops;

pub type VarId = usize;

/// Named parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients(pub IndexMap<String, ArrayD<f64>>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.0.get(name)
    }

    /// Accumulate `other`, scaled, into self (used for batch averaging).
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.scaled_add(scale, g),
                None => {
                    self.0.insert(name.clone(), g.mapv(|v| v * scale));
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    MatMul(VarId, VarId),
    BiasAdd2(VarId, VarId),
    BiasAdd4(VarId, VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    },
    Relu(VarId),
    Sigmoid(VarId),
    Exp(VarId),
    SumAll(VarId),
    MeanAll(VarId),
    Reshape(VarId),
    Concat0(Vec<VarId>),
    Narrow0 {
        a: VarId,
        start: usize,
        len: usize,
    },
    MatExp(VarId),
    Detach(VarId),
    SoftmaxCrossEntropy {
        logits: VarId,
        label: usize,
        probs: Array1<f64>,
    },
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
    param: Option<String>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: VarId) -> &ArrayD<f64> {
        &self.nodes[v].value
    }

    pub fn scalar(&self, v: VarId) -> f64 {
        let val = &self.nodes[v].value;
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar var");
        val.iter().next().copied().unwrap()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            param: None,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v].needs_grad
    }

    /// A constant: gradients never flow into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    /// A named trainable parameter; backward() collects its gradient.
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> VarId {
        let id = self.push(Op::Leaf, value, true);
        self.nodes[id].param = Some(name.to_string());
        id
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let value = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, ng)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.nodes[a].value.mapv(|v| v * c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let av = as2(&self.nodes[a].value);
        let bv = as2(&self.nodes[b].value);
        let value = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, ng)
    }

    /// (N,O) + (O,) broadcast over rows.
    pub fn bias_add2(&mut self, x: VarId, b: VarId) -> VarId {
        let mut value = as2(&self.nodes[x].value);
        let bv = as1(&self.nodes[b].value);
        for mut r in value.rows_mut() {
            r += &bv;
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Op::BiasAdd2(x, b), value.into_dyn(), ng)
    }

    /// (N,C,H,W) + (C,) broadcast over channel planes.
    pub fn bias_add4(&mut self, x: VarId, b: VarId) -> VarId {
        let mut value = as4(&self.nodes[x].value);
        let bv = as1(&self.nodes[b].value);
        for (c, mut lane) in value.axis_iter_mut(Axis(1)).enumerate() {
            let bval = bv[c];
            lane.mapv_inplace(|v| v + bval);
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Op::BiasAdd4(x, b), value.into_dyn(), ng)
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let xv = as4(&self.nodes[x].value);
        let wv = as4(&self.nodes[w].value);
        let bv = as1(&self.nodes[b].value);
        let value = ops::conv2d(&xv.view(), &wv.view(), Some(&bv.view()), stride, pad);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv2d { x, w, b, stride, pad }, value.into_dyn(), ng)
    }

    pub fn conv2d_transpose(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let xv = as4(&self.nodes[x].value);
        let wv = as4(&self.nodes[w].value);
        let bv = as1(&self.nodes[b].value);
        let value = ops::conv2d_transpose(&xv.view(), &wv.view(), Some(&bv.view()), stride, pad);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::ConvT2d { x, w, b, stride, pad }, value.into_dyn(), ng)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.mapv(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.mapv(f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), value, ng)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.nodes[a].value.sum();
        let ng = self.needs(a);
        self.push(Op::SumAll(a), scalar_array(s), ng)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let v = &self.nodes[a].value;
        let s = v.sum() / v.len() as f64;
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), scalar_array(s), ng)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let value = self.nodes[a]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        let ng = self.needs(a);
        self.push(Op::Reshape(a), value, ng)
    }

    /// Stack along axis 0; inputs must share trailing dimensions.
    pub fn concat0(&mut self, parts: &[VarId]) -> VarId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::Concat0(parts.to_vec()), value, ng)
    }

    /// Take rows [start, start+len) along axis 0.
    pub fn narrow0(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let value = self.nodes[a]
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let ng = self.needs(a);
        self.push(Op::Narrow0 { a, start, len }, value, ng)
    }

    /// Matrix exponential of a square (u,u) var.
    pub fn mat_exp(&mut self, a: VarId) -> Result<VarId> {
        let m = as2(&self.nodes[a].value);
        let value = lie::mat_exp(&m)?;
        let ng = self.needs(a);
        Ok(self.push(Op::MatExp(a), value.into_dyn(), ng))
    }

    /// Forward identity; blocks gradient flow.
    pub fn detach(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.clone();
        self.push(Op::Detach(a), value, false)
    }

    /// Cross-entropy of a (C,) or (1,C) logits var against an integer label.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        let flat: Array1<f64> = Array1::from_iter(self.nodes[logits].value.iter().copied());
        if label >= flat.len() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                flat.len()
            )));
        }
        let max = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = flat.mapv(|v| (v - max).exp());
        let denom = exps.sum();
        let probs = &exps / denom;
        let ce = -(probs[label].max(1e-300)).ln();
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, label, probs },
            scalar_array(ce),
            ng,
        ))
    }

    /// Reverse pass from a scalar root; returns gradients for every named
    /// parameter the root actually depends on.
    pub fn backward(&mut self, root: VarId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));
        let mut out = Gradients::default();

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Some(name) = &self.nodes[id].param {
                match out.0.get_mut(name) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.0.insert(name.clone(), g.clone());
                    }
                }
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    self.accumulate(&mut grads, a, ga);
                    self.accumulate(&mut grads, b, gb);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(&mut grads, a, g.mapv(|v| v * c));
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let gm = as2(&g);
                    let av = as2(&self.nodes[a].value);
                    let bv = as2(&self.nodes[b].value);
                    let ga = gm.dot(&bv.t()).into_dyn();
                    let gb = av.t().dot(&gm).into_dyn();
                    self.accumulate(&mut grads, a, ga);
                    self.accumulate(&mut grads, b, gb);
                }
                Op::BiasAdd2(x, b) => {
                    let (x, b) = (*x, *b);
                    let gm = as2(&g);
                    let gb = gm.sum_axis(Axis(0)).into_dyn();
                    self.accumulate(&mut grads, x, g.clone());
                    self.accumulate(&mut grads, b, gb);
                }
                Op::BiasAdd4(x, b) => {
                    let (x, b) = (*x, *b);
                    let g4 = as4(&g);
                    let gb = g4
                        .sum_axis(Axis(3))
                        .sum_axis(Axis(2))
                        .sum_axis(Axis(0))
                        .into_dyn();
                    self.accumulate(&mut grads, x, g.clone());
                    self.accumulate(&mut grads, b, gb);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let xv = as4(&self.nodes[x].value);
                    let wv = as4(&self.nodes[w].value);
                    let g4 = as4(&g);
                    let (gx, gw, gb) =
                        ops::conv2d_backward(&xv.view(), &wv.view(), &g4.view(), stride, pad);
                    self.accumulate(&mut grads, x, gx.into_dyn());
                    self.accumulate(&mut grads, w, gw.into_dyn());
                    self.accumulate(&mut grads, b, gb.into_dyn());
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let xv = as4(&self.nodes[x].value);
                    let wv = as4(&self.nodes[w].value);
                    let g4 = as4(&g);
                    let (gx, gw, gb) = ops::conv2d_transpose_backward(
                        &xv.view(),
                        &wv.view(),
                        &g4.view(),
                        stride,
                        pad,
                    );
                    self.accumulate(&mut grads, x, gx.into_dyn());
                    self.accumulate(&mut grads, w, gw.into_dyn());
                    self.accumulate(&mut grads, b, gb.into_dyn());
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.nodes[a].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(&mut grads, a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let dy = self.nodes[id].value.mapv(|y| y * (1.0 - y));
                    self.accumulate(&mut grads, a, &g * &dy);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let gy = &g * &self.nodes[id].value;
                    self.accumulate(&mut grads, a, gy);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gv = g.iter().next().copied().unwrap();
                    let ga = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gv);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = self.nodes[a].value.len() as f64;
                    let gv = g.iter().next().copied().unwrap() / n;
                    let ga = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gv);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let ga = g
                        .clone()
                        .into_shape_with_order(self.nodes[a].value.raw_dim())
                        .expect("reshape grad");
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Concat0(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p].value.shape()[0];
                        let gp = g
                            .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        offset += len;
                        self.accumulate(&mut grads, p, gp);
                    }
                }
                Op::Narrow0 { a, start, len } => {
                    let (a, start, len) = (*a, *start, *len);
                    let mut ga = ArrayD::zeros(self.nodes[a].value.raw_dim());
                    ga.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                        .assign(&g);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::MatExp(a) => {
                    let a = *a;
                    let m = as2(&self.nodes[a].value);
                    let gm = as2(&g);
                    let ga = lie::mat_exp_vjp(&m, &gm)
                        .expect("mat_exp input validated at forward")
                        .into_dyn();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Detach(_) => {}
                Op::SoftmaxCrossEntropy { logits, label, probs } => {
                    let (logits, label) = (*logits, *label);
                    let gv = g.iter().next().copied().unwrap();
                    let mut gl = probs.mapv(|p| p * gv);
                    gl[label] -= gv;
                    let ga = gl
                        .into_dyn()
                        .into_shape_with_order(self.nodes[logits].value.raw_dim())
                        .expect("logits grad reshape");
                    self.accumulate(&mut grads, logits, ga);
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], target: VarId, g: ArrayD<f64>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn as1(v: &ArrayD<f64>) -> Array1<f64> {
    v.clone()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("expected 1-d value")
}

fn as2(v: &ArrayD<f64>) -> Array2<f64> {
    v.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d value")
}

fn as4(v: &ArrayD<f64>) -> Array4<f64> {
    v.clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected 4-d value")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array, IxDyn};
    use rand::Rng;

    fn randd(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Generic check: analytic parameter gradients vs central differences
    /// of the scalar the builder produces.
    fn check_grads(
        build: impl Fn(&mut Tape, &IndexMap<String, ArrayD<f64>>) -> VarId,
        params: IndexMap<String, ArrayD<f64>>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let root = build(&mut tape, &params);
        let grads = tape.backward(root);
        let step = 1e-6;
        for (name, value) in &params {
            let g = grads
                .get(name)
                .unwrap_or_else(|| panic!("missing grad for {name}"));
            for idx in 0..value.len() {
                let mut pp = params.clone();
                pp.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += step;
                let mut pm = params.clone();
                pm.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= step;
                let mut tp = Tape::new();
                let rp = build(&mut tp, &pp);
                let fp = tp.scalar(rp);
                let mut tm = Tape::new();
                let rm = build(&mut tm, &pm);
                let fm = tm.scalar(rm);
                let fd = (fp - fm) / (2.0 * step);
                let got = g.as_slice().unwrap()[idx];
                assert!(
                    (got - fd).abs() <= tol * fd.abs().max(1.0),
                    "{name}[{idx}]: analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut rng = crate::rng::child_rng(31, "tape-test", &[0]);
        let mut params = IndexMap::new();
        params.insert("a".to_string(), randd(&mut rng, &[2, 3]));
        params.insert("b".to_string(), randd(&mut rng, &[2, 3]));
        check_grads(
            |t, p| {
                let a = t.param("a", p["a"].clone());
                let b = t.param("b", p["b"].clone());
                let s = t.sigmoid(a);
                let e = t.exp(b);
                let m = t.mul(s, e);
                let r = t.relu(m);
                let d = t.sub(r, b);
                let sc = t.scale(d, 0.7);
                t.mean_all(sc)
            },
            params,
            1e-5,
        );
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = crate::rng::child_rng(32, "tape-test", &[1]);
        let mut params = IndexMap::new();
        params.insert("w".to_string(), randd(&mut rng, &[3, 4]));
        params.insert("b".to_string(), randd(&mut rng, &[4]));
        let x = randd(&mut rng, &[2, 3]);
        check_grads(
            move |t, p| {
                let xv = t.constant(x.clone());
                let w = t.param("w", p["w"].clone());
                let b = t.param("b", p["b"].clone());
                let y = t.matmul(xv, w);
                let y = t.bias_add2(y, b);
                let y = t.sigmoid(y);
                t.sum_all(y)
            },
            params,
            1e-5,
        );
    }

    #[test]
    fn conv_pipeline_gradients() {
        let mut rng = crate::rng::child_rng(33, "tape-test", &[2]);
        let mut params = IndexMap::new();
        params.insert("w".to_string(), randd(&mut rng, &[2, 1, 3, 3]).mapv(|v| v * 0.5));
        params.insert("cb".to_string(), randd(&mut rng, &[2]));
        params.insert("tw".to_string(), randd(&mut rng, &[2, 1, 4, 4]).mapv(|v| v * 0.5));
        params.insert("tb".to_string(), randd(&mut rng, &[1]));
        let x = randd(&mut rng, &[1, 1, 4, 4]);
        check_grads(
            move |t, p| {
                let xv = t.constant(x.clone());
                let w = t.param("w", p["w"].clone());
                let cb = t.param("cb", p["cb"].clone());
                let tw = t.param("tw", p["tw"].clone());
                let tb = t.param("tb", p["tb"].clone());
                let y = t.conv2d(xv, w, cb, 1, 1); // (1,2,4,4)
                let y = t.relu(y);
                let y = t.conv2d_transpose(y, tw, tb, 2, 1); // (1,1,8,8)
                let y = t.sigmoid(y);
                t.mean_all(y)
            },
            params,
            1e-4,
        );
    }

    #[test]
    fn mat_exp_and_concat_gradients() {
        let mut rng = crate::rng::child_rng(34, "tape-test", &[3]);
        let mut params = IndexMap::new();
        params.insert("m".to_string(), randd(&mut rng, &[3, 3]).mapv(|v| v * 0.4));
        params.insert("z".to_string(), randd(&mut rng, &[1, 2]));
        let bases = randd(&mut rng, &[2, 9]).mapv(|v| v * 0.3);
        check_grads(
            move |t, p| {
                let m = t.param("m", p["m"].clone());
                let z = t.param("z", p["z"].clone());
                let bs = t.constant(bases.clone());
                let zb = t.matmul(z, bs);
                let zb = t.reshape(zb, &[3, 3]);
                let e1 = t.mat_exp(m).unwrap();
                let e2 = t.mat_exp(zb).unwrap();
                let prod = t.matmul(e1, e2);
                let flat1 = t.reshape(prod, &[1, 9]);
                let flat2 = t.reshape(e1, &[1, 9]);
                let stacked = t.concat0(&[flat1, flat2]);
                let top = t.narrow0(stacked, 0, 1);
                let bottom = t.narrow0(stacked, 1, 1);
                let d = t.sub(top, bottom);
                let sq = t.mul(d, d);
                t.mean_all(sq)
            },
            params,
            1e-4,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut rng = crate::rng::child_rng(35, "tape-test", &[4]);
        let a = randd(&mut rng, &[2, 2]);
        let mut tape = Tape::new();
        let p = tape.param("a", a);
        let d = tape.detach(p);
        let m = tape.mul(d, d);
        let root = tape.sum_all(m);
        let grads = tape.backward(root);
        assert!(grads.get("a").is_none());
    }

    #[test]
    fn softmax_cross_entropy_matches_closed_forms() {
        let mut tape = Tape::new();
        let logits = tape.param("l", ArrayD::zeros(IxDyn(&[4])));
        let ce = tape.softmax_cross_entropy(logits, 2).unwrap();
        assert_abs_diff_eq!(tape.scalar(ce), 4.0_f64.ln(), epsilon = 1e-12);
        let grads = tape.backward(ce);
        let g = grads.get("l").unwrap();
        // d ce / d logits = softmax - onehot
        assert_abs_diff_eq!(g.as_slice().unwrap()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g.as_slice().unwrap()[2], -0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_gradient_check() {
        let mut rng = crate::rng::child_rng(36, "tape-test", &[5]);
        let mut params = IndexMap::new();
        params.insert("l".to_string(), randd(&mut rng, &[5]));
        check_grads(
            |t, p| {
                let l = t.param("l", p["l"].clone());
                t.softmax_cross_entropy(l, 3).unwrap()
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn label_out_of_range_errors() {
        let mut tape = Tape::new();
        let logits = tape.constant(ArrayD::zeros(IxDyn(&[3])));
        assert!(tape.softmax_cross_entropy(logits, 3).is_err());
    }

    #[test]
    fn untouched_params_get_no_gradient_entry() {
        let mut tape = Tape::new();
        let a = tape.param("used", ArrayD::ones(IxDyn(&[2])));
        let _unused = tape.param("unused", ArrayD::ones(IxDyn(&[2])));
        let s = tape.sum_all(a);
        let grads = tape.backward(s);
        assert!(grads.get("used").is_some());
        assert!(grads.get("unused").is_none());
    }
}
