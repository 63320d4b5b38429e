use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{matmul, Activation, Real, Tensor};
use crate::error::{Error, Result};
use crate::work::WorkCounter;

/// A value flowing through the tape. Untracked values (constants, or any
/// value produced by a non-recording tape) carry no node id.
#[derive(Debug, Clone)]
pub struct Var<T> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn constant(t: Tensor<T>) -> Self {
        Var {
            id: None,
            value: Rc::new(t),
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }

    pub fn data(&self) -> &[T] {
        &self.value.data
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: Option<usize>,
        xv: Rc<Tensor<T>>,
        w: Option<usize>,
        wv: Rc<Tensor<T>>,
        b: Option<usize>,
        act: Activation,
        out: Rc<Tensor<T>>,
    },
    Softmax {
        x: usize,
        out: Rc<Tensor<T>>,
        m: usize,
        d: usize,
    },
    Gather {
        x: usize,
        d: usize,
        idx: Rc<[u32]>,
    },
    ReduceSum {
        x: usize,
        m: usize,
        d: usize,
    },
    ReduceMean {
        x: usize,
        m: usize,
        d: usize,
    },
    ReduceMax {
        x: usize,
        m: usize,
        d: usize,
        argmax: Vec<u32>,
    },
    Concat {
        a: Option<usize>,
        b: Option<usize>,
        da: usize,
        db: usize,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    Mul {
        a: Option<usize>,
        av: Rc<Tensor<T>>,
        b: Option<usize>,
        bv: Rc<Tensor<T>>,
    },
    Dot {
        x: usize,
        coeffs: Rc<Tensor<T>>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<u32>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    len: usize,
}

/// Records primitive applications so gradients can be pulled back in reverse
/// order. A tape built with [`Tape::inference`] records nothing and lets
/// intermediate values drop as soon as they go out of scope.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    work: Cell<WorkCounter>,
}

/// Gradients indexed by tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&[T]> {
        v.id
            .and_then(|i| self.grads.get(i))
            .and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); v.value.len()])
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, what: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NotFinite(what))
    }
}

fn neighbor_dims<T: Real>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape[..] {
        [n, m, d] if m >= 1 => Ok((n, m, d)),
        _ => Err(Error::Shape(format!(
            "{what} expects [points, slots >= 1, channels], got {:?}",
            x.shape
        ))),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            work: Cell::new(WorkCounter::default()),
        }
    }

    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn work(&self) -> WorkCounter {
        self.work.get()
    }

    pub fn reset_work(&self) {
        self.work.set(WorkCounter::default());
    }

    fn add_work(&self, w: WorkCounter) {
        self.work.set(self.work.get() + w);
    }

    /// Credits attention-stage neighbor slots to the work counter.
    pub fn count_slots(&self, slots: u64) {
        self.add_work(WorkCounter {
            neighbor_slots: slots,
            ..Default::default()
        });
    }

    fn push(&self, op: Op<T>, out: Tensor<T>, tracked: bool) -> Var<T> {
        let len = out.len();
        let value = Rc::new(out);
        if !(self.recording && tracked) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, len });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        self.push(Op::Leaf, t, true)
    }

    /// `act(x @ w + b)` applied to every row of `x`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>, act: Activation) -> Result<Var<T>> {
        let (d_in, d_out) = match w.shape() {
            [i, o] => (*i, *o),
            s => return Err(Error::Shape(format!("weight must be 2-D, got {s:?}"))),
        };
        if x.value.channels() != d_in || b.shape() != [d_out] {
            return Err(Error::Shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let rows = x.value.rows();
        let mut out = vec![T::zero(); rows * d_out];
        for r in 0..rows {
            out[r * d_out..(r + 1) * d_out].copy_from_slice(&b.value.data);
        }
        matmul(rows, d_in, d_out, &x.value.data, false, &w.value.data, false, &mut out, true);
        if let Activation::LeakyRelu = act {
            let slope = T::of(Activation::LEAKY_SLOPE);
            for v in out.iter_mut() {
                if *v <= T::zero() {
                    *v = *v * slope;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let out = Tensor { shape, data: out };
        check_finite(&out, "linear")?;
        self.add_work(WorkCounter {
            mlp_macs: (rows * d_in * d_out) as u64,
            ..Default::default()
        });
        let tracked = x.is_tracked() || w.is_tracked() || b.is_tracked();
        let saved = if self.recording && tracked && act != Activation::None {
            Rc::new(out.clone())
        } else {
            Rc::new(Tensor {
                shape: Vec::new(),
                data: Vec::new(),
            })
        };
        let op = Op::Linear {
            x: x.id,
            xv: x.value.clone(),
            w: w.id,
            wv: w.value.clone(),
            b: b.id,
            act,
            out: saved,
        };
        Ok(self.push(op, out, tracked))
    }

    /// Softmax over axis 1 of a `[n, m, d]` tensor, per (point, channel).
    pub fn softmax_neighbor_axis(&self, x: &Var<T>) -> Result<Var<T>> {
        let (n, m, d) = neighbor_dims(&x.value, "softmax")?;
        let src = &x.value.data;
        let mut out = vec![T::zero(); src.len()];
        let mut mx = vec![T::zero(); d];
        let mut sum = vec![T::zero(); d];
        for i in 0..n {
            let base = i * m * d;
            mx.copy_from_slice(&src[base..base + d]);
            for j in 1..m {
                for c in 0..d {
                    mx[c] = mx[c].max(src[base + j * d + c]);
                }
            }
            sum.iter_mut().for_each(|s| *s = T::zero());
            for j in 0..m {
                for c in 0..d {
                    let e = (src[base + j * d + c] - mx[c]).exp();
                    out[base + j * d + c] = e;
                    sum[c] = sum[c] + e;
                }
            }
            for j in 0..m {
                for c in 0..d {
                    out[base + j * d + c] = out[base + j * d + c] / sum[c];
                }
            }
        }
        let out = Tensor {
            shape: x.shape().to_vec(),
            data: out,
        };
        check_finite(&out, "softmax")?;
        let saved = if self.recording && x.is_tracked() {
            Rc::new(out.clone())
        } else {
            Rc::new(Tensor {
                shape: Vec::new(),
                data: Vec::new(),
            })
        };
        let op = match x.id {
            Some(id) => Op::Softmax {
                x: id,
                out: saved,
                m,
                d,
            },
            None => Op::Leaf,
        };
        Ok(self.push(op, out, x.is_tracked()))
    }

    /// Copies rows of a `[rows, d]` tensor: `out[r] = x[idx[r]]`.
    /// The output takes `lead_shape` followed by `d`.
    pub fn gather(&self, x: &Var<T>, idx: &[u32], lead_shape: &[usize]) -> Result<Var<T>> {
        let d = x.value.channels();
        let src_rows = x.value.rows();
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "gather source must be [rows, channels], got {:?}",
                x.shape()
            )));
        }
        if lead_shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape(format!(
                "gather: {} indices do not fill {lead_shape:?}",
                idx.len()
            )));
        }
        let src = &x.value.data;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let i = i as usize;
            if i >= src_rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: src_rows,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        self.add_work(WorkCounter {
            gathers: idx.len() as u64,
            ..Default::default()
        });
        let op = match x.id {
            Some(id) if self.recording => Op::Gather {
                x: id,
                d,
                idx: Rc::from(idx),
            },
            _ => Op::Leaf,
        };
        Ok(self.push(op, Tensor { shape, data: out }, x.is_tracked()))
    }

    pub fn reduce_sum_neighbor(&self, x: &Var<T>) -> Result<Var<T>> {
        let (n, m, d) = neighbor_dims(&x.value, "reduce_sum")?;
        let src = &x.value.data;
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..m {
                let row = &src[(i * m + j) * d..(i * m + j + 1) * d];
                for (acc, v) in o.iter_mut().zip(row) {
                    *acc = *acc + *v;
                }
            }
        }
        let out = Tensor {
            shape: vec![n, d],
            data: out,
        };
        check_finite(&out, "reduce_sum")?;
        let op = match x.id {
            Some(id) => Op::ReduceSum { x: id, m, d },
            None => Op::Leaf,
        };
        Ok(self.push(op, out, x.is_tracked()))
    }

    pub fn reduce_mean_neighbor(&self, x: &Var<T>) -> Result<Var<T>> {
        let (n, m, d) = neighbor_dims(&x.value, "reduce_mean")?;
        let src = &x.value.data;
        let inv = T::one() / T::of(m as f64);
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..m {
                let row = &src[(i * m + j) * d..(i * m + j + 1) * d];
                for (acc, v) in o.iter_mut().zip(row) {
                    *acc = *acc + *v;
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let out = Tensor {
            shape: vec![n, d],
            data: out,
        };
        check_finite(&out, "reduce_mean")?;
        let op = match x.id {
            Some(id) => Op::ReduceMean { x: id, m, d },
            None => Op::Leaf,
        };
        Ok(self.push(op, out, x.is_tracked()))
    }

    /// Max over the neighbor axis; the first maximal slot owns the gradient.
    pub fn reduce_max_neighbor(&self, x: &Var<T>) -> Result<Var<T>> {
        let (n, m, d) = neighbor_dims(&x.value, "reduce_max")?;
        let src = &x.value.data;
        let mut out = vec![T::zero(); n * d];
        let mut argmax = vec![0u32; n * d];
        for i in 0..n {
            out[i * d..(i + 1) * d].copy_from_slice(&src[i * m * d..i * m * d + d]);
            for j in 1..m {
                for c in 0..d {
                    let v = src[(i * m + j) * d + c];
                    if v > out[i * d + c] {
                        out[i * d + c] = v;
                        argmax[i * d + c] = j as u32;
                    }
                }
            }
        }
        let out = Tensor {
            shape: vec![n, d],
            data: out,
        };
        check_finite(&out, "reduce_max")?;
        let op = match x.id {
            Some(id) if self.recording => Op::ReduceMax { x: id, m, d, argmax },
            _ => Op::Leaf,
        };
        Ok(self.push(op, out, x.is_tracked()))
    }

    /// Concatenation along the last axis.
    pub fn concat(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!("concat: {sa:?} vs {sb:?}")));
        }
        let (da, db) = (a.value.channels(), b.value.channels());
        let rows = a.value.rows();
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&a.value.data[r * da..(r + 1) * da]);
            out.extend_from_slice(&b.value.data[r * db..(r + 1) * db]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let op = Op::Concat {
            a: a.id,
            b: b.id,
            da,
            db,
        };
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(op, Tensor { shape, data: out }, tracked))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        check_finite(&out, "add")?;
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(Op::Add { a: a.id, b: b.id }, out, tracked))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        check_finite(&out, "mul")?;
        let tracked = a.is_tracked() || b.is_tracked();
        let op = if self.recording && tracked {
            Op::Mul {
                a: a.id,
                av: a.value.clone(),
                b: b.id,
                bv: b.value.clone(),
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(op, out, tracked))
    }

    /// Scalar `sum(x * coeffs)`.
    pub fn dot(&self, x: &Var<T>, coeffs: &Tensor<T>) -> Result<Var<T>> {
        if x.value.len() != coeffs.len() {
            return Err(Error::Shape(format!(
                "dot: {} values vs {} coefficients",
                x.value.len(),
                coeffs.len()
            )));
        }
        let s = x
            .data()
            .iter()
            .zip(&coeffs.data)
            .fold(T::zero(), |acc, (a, b)| acc + *a * *b);
        let out = Tensor::scalar(s);
        check_finite(&out, "dot")?;
        let op = match x.id {
            Some(id) => Op::Dot {
                x: id,
                coeffs: Rc::new(coeffs.clone()),
            },
            None => Op::Leaf,
        };
        Ok(self.push(op, out, x.is_tracked()))
    }

    /// Mean over points of `w[y] * -log softmax(logits)[y]`.
    pub fn weighted_cross_entropy(
        &self,
        logits: &Var<T>,
        labels: &[u32],
        weights: &[T],
    ) -> Result<Var<T>> {
        let (n, c) = match logits.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::Shape(format!("logits must be [N, C], got {s:?}"))),
        };
        if labels.len() != n || weights.len() != c || n == 0 {
            return Err(Error::Shape(format!(
                "cross entropy: {n} logit rows, {} labels, {c} classes, {} weights",
                labels.len(),
                weights.len()
            )));
        }
        let src = logits.data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for i in 0..n {
            let y = labels[i] as usize;
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    point: i,
                    label: labels[i],
                    num_classes: c,
                });
            }
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (*v - mx).exp();
                sum = sum + *p;
            }
            probs[i * c..(i + 1) * c]
                .iter_mut()
                .for_each(|p| *p = *p / sum);
            let nll = sum.ln() + mx - row[y];
            total = total + weights[y] * nll;
        }
        let out = Tensor::scalar(total / T::of(n as f64));
        check_finite(&out, "cross entropy")?;
        let op = match logits.id {
            Some(id) if self.recording => Op::CrossEntropy {
                logits: id,
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            _ => Op::Leaf,
        };
        Ok(self.push(op, out, logits.is_tracked()))
    }

    /// Pulls the gradient of the scalar `loss` back to every recorded node.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let root = loss
            .id
            .ok_or_else(|| Error::InvalidArgument("loss is not tracked by this tape".into()))?;
        if loss.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        fn slot<'g, T: Real>(
            grads: &'g mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            id: usize,
        ) -> &'g mut Vec<T> {
            grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].len])
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Linear {
                    x,
                    xv,
                    w,
                    wv,
                    b,
                    act,
                    out,
                } => {
                    let (d_in, d_out) = (wv.shape[0], wv.shape[1]);
                    let rows = xv.rows();
                    let gz: Vec<T> = match act {
                        Activation::None => g.clone(),
                        Activation::LeakyRelu => {
                            let slope = T::of(Activation::LEAKY_SLOPE);
                            g.iter()
                                .zip(&out.data)
                                .map(|(gv, o)| if *o > T::zero() { *gv } else { *gv * slope })
                                .collect()
                        }
                    };
                    if let Some(x) = x {
                        let gx = slot(&mut grads, &nodes, *x);
                        matmul(rows, d_out, d_in, &gz, false, &wv.data, true, gx, true);
                    }
                    if let Some(w) = w {
                        let gw = slot(&mut grads, &nodes, *w);
                        matmul(d_in, rows, d_out, &xv.data, true, &gz, false, gw, true);
                    }
                    if let Some(b) = b {
                        let gb = slot(&mut grads, &nodes, *b);
                        for r in 0..rows {
                            for (acc, v) in gb.iter_mut().zip(&gz[r * d_out..(r + 1) * d_out]) {
                                *acc = *acc + *v;
                            }
                        }
                    }
                }
                Op::Softmax { x, out, m, d } => {
                    let (m, d) = (*m, *d);
                    let n = out.len() / (m * d);
                    let gx = slot(&mut grads, &nodes, *x);
                    let mut dotv = vec![T::zero(); d];
                    for i in 0..n {
                        let base = i * m * d;
                        dotv.iter_mut().for_each(|v| *v = T::zero());
                        for j in 0..m {
                            for c in 0..d {
                                let k = base + j * d + c;
                                dotv[c] = dotv[c] + out.data[k] * g[k];
                            }
                        }
                        for j in 0..m {
                            for c in 0..d {
                                let k = base + j * d + c;
                                gx[k] = gx[k] + out.data[k] * (g[k] - dotv[c]);
                            }
                        }
                    }
                }
                Op::Gather { x, d, idx } => {
                    let d = *d;
                    let gx = slot(&mut grads, &nodes, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        for (acc, v) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *acc = *acc + *v;
                        }
                    }
                }
                Op::ReduceSum { x, m, d } | Op::ReduceMean { x, m, d } => {
                    let (m, d) = (*m, *d);
                    let scale = match &nodes[id].op {
                        Op::ReduceMean { .. } => T::one() / T::of(m as f64),
                        _ => T::one(),
                    };
                    let n = g.len() / d;
                    let gx = slot(&mut grads, &nodes, *x);
                    for i in 0..n {
                        for j in 0..m {
                            let dst = &mut gx[(i * m + j) * d..(i * m + j + 1) * d];
                            for (acc, v) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                *acc = *acc + *v * scale;
                            }
                        }
                    }
                }
                Op::ReduceMax { x, m, d, argmax } => {
                    let (m, d) = (*m, *d);
                    let gx = slot(&mut grads, &nodes, *x);
                    for (k, (&j, gv)) in argmax.iter().zip(&g).enumerate() {
                        let (i, c) = (k / d, k % d);
                        let dst = (i * m + j as usize) * d + c;
                        gx[dst] = gx[dst] + *gv;
                    }
                }
                Op::Concat { a, b, da, db } => {
                    let (da, db) = (*da, *db);
                    let rows = g.len() / (da + db);
                    if let Some(a) = a {
                        let ga = slot(&mut grads, &nodes, *a);
                        for r in 0..rows {
                            let src = &g[r * (da + db)..r * (da + db) + da];
                            for (acc, v) in ga[r * da..(r + 1) * da].iter_mut().zip(src) {
                                *acc = *acc + *v;
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = slot(&mut grads, &nodes, *b);
                        for r in 0..rows {
                            let src = &g[r * (da + db) + da..(r + 1) * (da + db)];
                            for (acc, v) in gb[r * db..(r + 1) * db].iter_mut().zip(src) {
                                *acc = *acc + *v;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for t in [a, b].into_iter().flatten() {
                        let gt = slot(&mut grads, &nodes, *t);
                        for (acc, v) in gt.iter_mut().zip(&g) {
                            *acc = *acc + *v;
                        }
                    }
                }
                Op::Mul { a, av, b, bv } => {
                    if let Some(a) = a {
                        let ga = slot(&mut grads, &nodes, *a);
                        for ((acc, v), o) in ga.iter_mut().zip(&g).zip(&bv.data) {
                            *acc = *acc + *v * *o;
                        }
                    }
                    if let Some(b) = b {
                        let gb = slot(&mut grads, &nodes, *b);
                        for ((acc, v), o) in gb.iter_mut().zip(&g).zip(&av.data) {
                            *acc = *acc + *v * *o;
                        }
                    }
                }
                Op::Dot { x, coeffs } => {
                    let gx = slot(&mut grads, &nodes, *x);
                    for (acc, c) in gx.iter_mut().zip(&coeffs.data) {
                        *acc = *acc + g[0] * *c;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    weights,
                } => {
                    let n = labels.len();
                    let c = weights.len();
                    let scale = g[0] / T::of(n as f64);
                    let gl = slot(&mut grads, &nodes, *logits);
                    for i in 0..n {
                        let y = labels[i] as usize;
                        let wy = weights[y] * scale;
                        for k in 0..c {
                            let onehot = if k == y { T::one() } else { T::zero() };
                            gl[i * c + k] = gl[i * c + k] + wy * (probs[i * c + k] - onehot);
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, grad_check_many, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn proj(rng: &mut ChaCha8Rng, like: &Tensor<f64>) -> Tensor<f64> {
        random(rng, &like.shape)
    }

    #[test]
    fn linear_identity_and_arithmetic() {
        let tape = Tape::<f64>::inference();
        let x = Var::constant(t(&[1, 2], &[1.0, 2.0]));
        let w = Var::constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = Var::constant(t(&[2], &[0.0, 0.0]));
        let one = Var::constant(t(&[2], &[1.0, 1.0]));
        let y = tape.linear(&x, &w, &zero, Activation::None).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = tape.linear(&x, &w, &one, Activation::None).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
        let neg = Var::constant(t(&[1, 2], &[-1.0, 2.0]));
        let y = tape.linear(&neg, &w, &zero, Activation::LeakyRelu).unwrap();
        assert_eq!(y.data(), &[-0.2, 2.0]);
        let bad = Var::constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        assert!(tape.linear(&bad, &w, &zero, Activation::None).is_err());
    }

    #[test]
    fn softmax_special_cases() {
        let tape = Tape::<f64>::inference();
        let c = Var::constant(t(&[1, 4, 2], &[3.0; 8]));
        let s = tape.softmax_neighbor_axis(&c).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.25));
        let single = Var::constant(t(&[3, 1, 2], &[5.0, -1.0, 0.0, 7.0, 1e3, -1e3]));
        let s = tape.softmax_neighbor_axis(&single).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::<f64>::inference();
        for _ in 0..20 {
            let (n, m, d) = (rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..5));
            let x = random(&mut rng, &[n, m, d]);
            let s = tape.softmax_neighbor_axis(&Var::constant(x.clone())).unwrap();
            for i in 0..n {
                for c in 0..d {
                    let denom: f64 = (0..m).map(|j| x.data[(i * m + j) * d + c].exp()).sum();
                    let mut total = 0.0;
                    for j in 0..m {
                        let k = (i * m + j) * d + c;
                        let want = x.data[k].exp() / denom;
                        assert!((s.data()[k] - want).abs() < 1e-12);
                        total += s.data()[k];
                    }
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gather_and_reductions() {
        let tape = Tape::<f64>::inference();
        let f = Var::constant(t(&[3, 2], &[1.0; 6]));
        let g = tape.gather(&f, &[0, 1, 2, 2, 1, 0], &[3, 2]).unwrap();
        let s = tape.reduce_sum_neighbor(&g).unwrap();
        assert_eq!(s.data(), &[2.0; 6]);
        assert!(tape.gather(&f, &[3], &[1]).is_err());

        let x = Var::constant(t(&[1, 3, 1], &[0.0, 5.0, 0.0]));
        assert_eq!(tape.reduce_max_neighbor(&x).unwrap().data(), &[5.0]);
        assert_eq!(tape.reduce_sum_neighbor(&x).unwrap().data(), &[5.0]);
        let one = Var::constant(t(&[2, 1, 2], &[1.0, -2.0, 3.0, 4.0]));
        assert_eq!(tape.reduce_max_neighbor(&one).unwrap().data(), one.data());
        assert_eq!(tape.reduce_sum_neighbor(&one).unwrap().data(), one.data());
        assert_eq!(tape.reduce_mean_neighbor(&one).unwrap().data(), one.data());
    }

    #[test]
    fn concat_shapes_and_slices() {
        let tape = Tape::<f64>::inference();
        let a = Var::constant(t(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = Var::constant(t(&[2, 3, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let c = tape.concat(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        for r in 0..6 {
            assert_eq!(c.data()[r * 3], a.data()[r]);
            assert_eq!(&c.data()[r * 3 + 1..r * 3 + 3], &b.data()[r * 2..r * 2 + 2]);
        }
        let empty = Var::constant(Tensor::new(vec![2, 3, 0], vec![]).unwrap());
        assert_eq!(tape.concat(&a, &empty).unwrap().data(), a.data());
        let wrong = Var::constant(t(&[2, 2, 1], &[0.0; 4]));
        assert!(tape.concat(&a, &wrong).is_err());
    }

    #[test]
    fn gather_repeat_doubles_gradient() {
        let tape = Tape::<f64>::new();
        let f = tape.leaf(t(&[2, 1], &[1.0, 2.0]));
        let g = tape.gather(&f, &[0, 0, 1], &[1, 3]).unwrap();
        let s = tape.reduce_sum_neighbor(&g).unwrap();
        let loss = tape.dot(&s, &t(&[1], &[1.0])).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&f).unwrap(), &[2.0, 1.0]);
    }

    #[test]
    fn gather_backward_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::<f64>::new();
        let f = tape.leaf(random(&mut rng, &[7, 3]));
        let idx: Vec<u32> = (0..20).map(|_| rng.gen_range(0..7)).collect();
        let g = tape.gather(&f, &idx, &[5, 4]).unwrap();
        let coeffs = proj(&mut rng, g.value());
        let loss = tape.dot(&g, &coeffs).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gf = grads.get(&f).unwrap();
        for c in 0..3 {
            let into: f64 = (0..7).map(|r| gf[r * 3 + c]).sum();
            let out: f64 = (0..20).map(|r| coeffs.data[r * 3 + c]).sum();
            assert!((into - out).abs() < 1e-12);
        }
    }

    #[test]
    fn square_sum_gradient() {
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.dot(&sq, &Tensor::scalar(1.0))
            },
            &Tensor::scalar(3.0),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(&x, &x).unwrap();
        let l = tape.dot(&sq, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.backward(&l).unwrap().get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn primitives_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let (n, m, d) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
            let x = random(&mut rng, &[n, m, d]);
            let w = random(&mut rng, &[d, 3]);
            let b = random(&mut rng, &[3]);
            let c1 = random(&mut rng, &[n, m, 3]);
            let err = grad_check_many(
                |tape, v| {
                    let y = tape.linear(&v[0], &v[1], &v[2], Activation::LeakyRelu)?;
                    tape.dot(&y, &c1)
                },
                &[x.clone(), w, b],
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "linear {err}");

            let c2 = proj(&mut rng, &x);
            let err = grad_check(
                |tape, v| tape.dot(&tape.softmax_neighbor_axis(v)?, &c2),
                &x,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "softmax {err}");

            let c3 = random(&mut rng, &[n, d]);
            for which in 0..3 {
                let err = grad_check(
                    |tape, v| {
                        let r = match which {
                            0 => tape.reduce_sum_neighbor(v)?,
                            1 => tape.reduce_max_neighbor(v)?,
                            _ => tape.reduce_mean_neighbor(v)?,
                        };
                        tape.dot(&r, &c3)
                    },
                    &x,
                    DEFAULT_EPS,
                )
                .unwrap();
                assert!(err < 1e-5, "reduce {which}: {err}");
            }

            let y = random(&mut rng, &[n, m, d]);
            let c4 = proj(&mut rng, &x);
            let err = grad_check_many(
                |tape, v| {
                    let p = tape.mul(&v[0], &v[1])?;
                    let s = tape.add(&p, &v[0])?;
                    tape.dot(&s, &c4)
                },
                &[x.clone(), y.clone()],
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "mul/add {err}");

            let c5 = random(&mut rng, &[n, m, 2 * d]);
            let err = grad_check_many(
                |tape, v| tape.dot(&tape.concat(&v[0], &v[1])?, &c5),
                &[x.clone(), y],
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "concat {err}");

            let f = random(&mut rng, &[n + 1, d]);
            let idx: Vec<u32> = (0..n * m).map(|_| rng.gen_range(0..(n + 1) as u32)).collect();
            let c6 = proj(&mut rng, &x);
            let err = grad_check(
                |tape, v| tape.dot(&tape.gather(v, &idx, &[n, m])?, &c6),
                &f,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-5, "gather {err}");
        }
    }

    #[test]
    fn max_not_below_mean_for_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::<f64>::inference();
        let n = 10 * 6 * 4;
        let x = Tensor::new(vec![10, 6, 4], (0..n).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap();
        let x = Var::constant(x);
        let mx = tape.reduce_max_neighbor(&x).unwrap();
        let s = tape.reduce_sum_neighbor(&x).unwrap();
        for (a, b) in mx.data().iter().zip(s.data()) {
            assert!(*a >= *b / 6.0);
        }
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        assert!(!x.is_tracked());
        assert!(tape.is_empty());
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1], &[f64::MAX]));
        assert!(matches!(tape.add(&x, &x), Err(Error::NotFinite(_))));
    }
}
