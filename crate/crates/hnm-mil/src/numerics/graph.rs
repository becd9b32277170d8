//! Reverse-mode computation graph.
//!
//! A [`Graph`] records one forward computation as a tape of nodes. Nodes are
//! appended in topological order (parents always precede children), so the
//! backward pass is a single reverse sweep that visits each node exactly once
//! and accumulates gradients in a fixed order.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::cell::RefCell;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Tape of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zero tensor if no path reached it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf node. Use for parameters and data alike; gradients are
    /// available for any leaf after `backward`.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    pub fn constant(&self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Current value of a node (cloned).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.as_scalar()
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g: &Tensor| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("sub", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g: &Tensor| {
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|x| -x).collect(),
                )
                .expect("sub backward shape");
                vec![g.clone(), neg]
            })),
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * c).collect(),
        )
        .expect("scale shape");
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|x| x * c).collect(),
                )
                .expect("scale backward shape")]
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.max(0.0)).collect(),
        )
        .expect("relu shape");
        // subgradient at 0 is 0
        let mask: Vec<f64> = ta.data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
                )
                .expect("relu backward shape")]
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let value = Tensor::new(ta.shape().to_vec(), out.clone()).expect("sigmoid shape");
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(&out)
                        .map(|(x, y)| x * y * (1.0 - y))
                        .collect(),
                )
                .expect("sigmoid backward shape")]
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(ta.shape().to_vec(), out.clone()).expect("exp shape");
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(&out).map(|(x, y)| x * y).collect(),
                )
                .expect("exp backward shape")]
            })),
        )
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::DegenerateInput("ln of non-positive value".into()));
        }
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.ln()).collect(),
        )?;
        let src = ta.data().to_vec();
        Ok(self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(&src).map(|(x, y)| x / y).collect(),
                )
                .expect("ln backward shape")]
            })),
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (n, d, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for k in 0..d {
                let aik = ta.data()[i * d + k];
                for j in 0..m {
                    out[i * m + j] += aik * tb.data()[k * m + j];
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let (ca, cb) = (ta.clone(), tb.clone());
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g: &Tensor| {
                // dA = G B^T, dB = A^T G
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for k in 0..d {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g.data()[i * m + j] * cb.data()[k * m + j];
                        }
                        da[i * d + k] = acc;
                    }
                }
                let mut db = vec![0.0; d * m];
                for k in 0..d {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += ca.data()[i * d + k] * g.data()[i * m + j];
                        }
                        db[k * m + j] = acc;
                    }
                }
                vec![
                    Tensor::new(vec![n, d], da).expect("matmul dA shape"),
                    Tensor::new(vec![d, m], db).expect("matmul dB shape"),
                ]
            })),
        ))
    }

    /// `m [n×d] · v [d] -> [n]`.
    pub fn matvec(&self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.shape().len() != 2 || tm.shape()[1] != tv.len() {
            return Err(Error::shape("matvec", tm.shape(), tv.shape()));
        }
        let (n, d) = (tm.shape()[0], tm.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..d {
                acc += tm.data()[i * d + k] * tv.data()[k];
            }
            out[i] = acc;
        }
        let value = Tensor::vector(out);
        let (cm, cv) = (tm.clone(), tv.clone());
        Ok(self.push(
            value,
            vec![m.0, v.0],
            Some(Box::new(move |g: &Tensor| {
                let mut dm = vec![0.0; n * d];
                for i in 0..n {
                    for k in 0..d {
                        dm[i * d + k] = g.data()[i] * cv.data()[k];
                    }
                }
                let mut dv = vec![0.0; d];
                for i in 0..n {
                    for k in 0..d {
                        dv[k] += cm.data()[i * d + k] * g.data()[i];
                    }
                }
                vec![
                    Tensor::new(vec![n, d], dm).expect("matvec dM shape"),
                    Tensor::vector(dv),
                ]
            })),
        ))
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.shape().len() != 1 {
            return Err(Error::shape("dot", ta.shape(), tb.shape()));
        }
        let mut acc = 0.0;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            acc += x * y;
        }
        let (ca, cb) = (ta.clone(), tb.clone());
        Ok(self.push(
            Tensor::scalar(acc),
            vec![a.0, b.0],
            Some(Box::new(move |g: &Tensor| {
                let s = g.as_scalar();
                vec![
                    Tensor::vector(cb.data().iter().map(|x| x * s).collect()),
                    Tensor::vector(ca.data().iter().map(|x| x * s).collect()),
                ]
            })),
        ))
    }

    /// `x [n×d] · w [d×m] + b [m]` broadcast over rows.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(Error::shape("affine weights", tx.shape(), tw.shape()));
        }
        if tb.shape().len() != 1 || tb.len() != tw.shape()[1] {
            return Err(Error::shape("affine bias", tw.shape(), tb.shape()));
        }
        let mm = self.matmul(x, w)?;
        self.add_row_broadcast(mm, b)
    }

    /// Add a bias vector to every row of a matrix.
    pub fn add_row_broadcast(&self, m: Var, b: Var) -> Result<Var> {
        let (tm, tb) = (self.value(m), self.value(b));
        if tm.shape().len() != 2 || tm.shape()[1] != tb.len() {
            return Err(Error::shape("add_row_broadcast", tm.shape(), tb.shape()));
        }
        let (n, d) = (tm.shape()[0], tm.shape()[1]);
        let mut out = tm.data().to_vec();
        for i in 0..n {
            for k in 0..d {
                out[i * d + k] += tb.data()[k];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            vec![m.0, b.0],
            Some(Box::new(move |g: &Tensor| {
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for k in 0..d {
                        db[k] += g.data()[i * d + k];
                    }
                }
                vec![g.clone(), Tensor::vector(db)]
            })),
        ))
    }

    /// Select one row of a matrix. The row choice is discrete; gradient
    /// flows into that row's values only.
    pub fn row(&self, m: Var, i: usize) -> Result<Var> {
        let tm = self.value(m);
        if tm.shape().len() != 2 || i >= tm.shape()[0] {
            return Err(Error::Contract(format!(
                "row {i} out of range for shape {:?}",
                tm.shape()
            )));
        }
        let (n, d) = (tm.shape()[0], tm.shape()[1]);
        let value = Tensor::vector(tm.row_slice(i).to_vec());
        Ok(self.push(
            value,
            vec![m.0],
            Some(Box::new(move |g: &Tensor| {
                let mut dm = vec![0.0; n * d];
                dm[i * d..(i + 1) * d].copy_from_slice(g.data());
                vec![Tensor::new(vec![n, d], dm).expect("row backward shape")]
            })),
        ))
    }

    /// `sum_i u_i * h_i` over the rows of `h [n×L]` with weights `u [n]`.
    pub fn weighted_sum_rows(&self, h: Var, u: Var) -> Result<Var> {
        let (th, tu) = (self.value(h), self.value(u));
        if th.shape().len() != 2 || th.shape()[0] != tu.len() {
            return Err(Error::shape("weighted_sum_rows", th.shape(), tu.shape()));
        }
        let (n, d) = (th.shape()[0], th.shape()[1]);
        let mut out = vec![0.0; d];
        for i in 0..n {
            let ui = tu.data()[i];
            for k in 0..d {
                out[k] += ui * th.data()[i * d + k];
            }
        }
        let (ch, cu) = (th.clone(), tu.clone());
        Ok(self.push(
            Tensor::vector(out),
            vec![h.0, u.0],
            Some(Box::new(move |g: &Tensor| {
                let mut dh = vec![0.0; n * d];
                let mut du = vec![0.0; n];
                for i in 0..n {
                    let ui = cu.data()[i];
                    let mut acc = 0.0;
                    for k in 0..d {
                        dh[i * d + k] = ui * g.data()[k];
                        acc += ch.data()[i * d + k] * g.data()[k];
                    }
                    du[i] = acc;
                }
                vec![
                    Tensor::new(vec![n, d], dh).expect("weighted_sum dH shape"),
                    Tensor::vector(du),
                ]
            })),
        ))
    }

    // ---- reductions and normalizations ----

    pub fn sum(&self, a: Var) -> Var {
        let ta = self.value(a);
        let mut acc = 0.0;
        for x in ta.data() {
            acc += x;
        }
        let shape = ta.shape().to_vec();
        self.push(
            Tensor::scalar(acc),
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                let s = g.as_scalar();
                vec![Tensor::new(
                    shape.clone(),
                    vec![s; shape.iter().product()],
                )
                .expect("sum backward shape")]
            })),
        )
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyInput("mean".into()));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Softmax over a vector.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 1 {
            return Err(Error::shape("softmax", ta.shape(), &[0]));
        }
        let max = ta.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = ta.data().iter().map(|x| (x - max).exp()).collect();
        let mut denom = 0.0;
        for e in &exps {
            denom += e;
        }
        let out: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let y = out.clone();
        Ok(self.push(
            Tensor::vector(out),
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                let mut gy = 0.0;
                for (gi, yi) in g.data().iter().zip(&y) {
                    gy += gi * yi;
                }
                vec![Tensor::vector(
                    g.data()
                        .iter()
                        .zip(&y)
                        .map(|(gi, yi)| yi * (gi - gy))
                        .collect(),
                )]
            })),
        ))
    }

    /// L2-normalize a vector to unit norm.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 1 {
            return Err(Error::shape("l2_normalize", ta.shape(), &[0]));
        }
        let mut sq = 0.0;
        for x in ta.data() {
            sq += x * x;
        }
        let norm = sq.sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput(
                "l2_normalize of zero vector".into(),
            ));
        }
        let y: Vec<f64> = ta.data().iter().map(|x| x / norm).collect();
        let cy = y.clone();
        Ok(self.push(
            Tensor::vector(y),
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                let mut gy = 0.0;
                for (gi, yi) in g.data().iter().zip(&cy) {
                    gy += gi * yi;
                }
                vec![Tensor::vector(
                    g.data()
                        .iter()
                        .zip(&cy)
                        .map(|(gi, yi)| (gi - yi * gy) / norm)
                        .collect(),
                )]
            })),
        ))
    }

    /// L2-normalize each row of a matrix independently.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::shape("l2_normalize_rows", ta.shape(), &[0, 0]));
        }
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let mut sq = 0.0;
            for k in 0..d {
                let v = ta.data()[i * d + k];
                sq += v * v;
            }
            norms[i] = sq.sqrt();
            if norms[i] == 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "l2_normalize_rows: row {i} is the zero vector"
                )));
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..d {
                out[i * d + k] = ta.data()[i * d + k] / norms[i];
            }
        }
        let cy = out.clone();
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                let mut dm = vec![0.0; n * d];
                for i in 0..n {
                    let mut gy = 0.0;
                    for k in 0..d {
                        gy += g.data()[i * d + k] * cy[i * d + k];
                    }
                    for k in 0..d {
                        dm[i * d + k] =
                            (g.data()[i * d + k] - cy[i * d + k] * gy) / norms[i];
                    }
                }
                vec![Tensor::new(vec![n, d], dm).expect("l2 rows backward shape")]
            })),
        ))
    }

    /// Select entries of a vector by index; gradient scatters back.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 1 {
            return Err(Error::shape("gather", ta.shape(), &[0]));
        }
        let n = ta.len();
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather index out of range for length {n}"
            )));
        }
        if indices.is_empty() {
            return Err(Error::EmptyInput("gather".into()));
        }
        let idx = indices.to_vec();
        let out: Vec<f64> = idx.iter().map(|&i| ta.data()[i]).collect();
        Ok(self.push(
            Tensor::vector(out),
            vec![a.0],
            Some(Box::new(move |g: &Tensor| {
                let mut da = vec![0.0; n];
                for (k, &i) in idx.iter().enumerate() {
                    da[i] += g.data()[k];
                }
                vec![Tensor::vector(da)]
            })),
        ))
    }

    /// Binary cross-entropy of a predicted probability against label `y`.
    /// The probability is clamped to `[1e-7, 1 - 1e-7]`; the gradient is 0
    /// in the clamped region.
    pub fn bce(&self, p: Var, y: f64) -> Result<Var> {
        const LO: f64 = 1e-7;
        const HI: f64 = 1.0 - 1e-7;
        let tp = self.value(p);
        if !tp.is_scalar() {
            return Err(Error::shape("bce", tp.shape(), &[1]));
        }
        let raw = tp.as_scalar();
        let clamped = raw.clamp(LO, HI);
        let loss = -(y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
        let active = raw > LO && raw < HI;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![p.0],
            Some(Box::new(move |g: &Tensor| {
                let d = if active {
                    (clamped - y) / (clamped * (1.0 - clamped))
                } else {
                    0.0
                };
                vec![Tensor::scalar(g.as_scalar() * d)]
            })),
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Each node is visited exactly once;
    /// accumulation order is fixed by node creation order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        root_val.check_finite("backward root")?;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => acc.accumulate(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // leaves keep their gradient
            if node.backward.is_none() {
                grads[id] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}
