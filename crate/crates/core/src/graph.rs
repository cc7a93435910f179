//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every op evaluates eagerly and records a closure computing the gradients
//! of its inputs from the gradient of its output. A [`Graph`] is built per
//! forward pass and dropped afterwards; parameters enter either as trainable
//! leaves or as constants, and nothing downstream of constants only is ever
//! differentiated.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `(grad_out, out_value, input_values, input_needs_grad) -> input grads`
type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Sparse linear map between row spaces: output row `i` is
/// `Σ weight · input[row]` over `entries[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMap {
    pub in_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    pub fn out_rows(&self) -> usize {
        self.entries.len()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.nrows(), self.in_rows, "row map input rows");
        let mut out = Tensor::zeros((self.entries.len(), x.ncols()));
        for (i, row) in self.entries.iter().enumerate() {
            let mut o = out.row_mut(i);
            for &(j, w) in row {
                o.scaled_add(w, &x.row(j));
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Tensor) -> Tensor {
        let mut out = Tensor::zeros((self.in_rows, g.ncols()));
        for (i, row) in self.entries.iter().enumerate() {
            for &(j, w) in row {
                out.row_mut(j).scaled_add(w, &g.row(i));
            }
        }
        out
    }
}

/// Row addressing of a `(time, batch)` sequence stored in a 2-D matrix:
/// row = `t · step_stride + b · batch_stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub steps: usize,
    pub batch: usize,
    pub step_stride: usize,
    pub batch_stride: usize,
}

impl SeqLayout {
    fn row(&self, t: usize, b: usize) -> usize {
        t * self.step_stride + b * self.batch_stride
    }

    fn rows(&self) -> usize {
        self.steps * self.batch
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const NORM_EPS: f64 = 1e-8;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.dim(), (1, 1), "not a scalar");
        t[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to all upstream nodes.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let pg = bw(&g, &node.value, &inputs, &needs);
            for ((&p, gp), need) in node.parents.iter().zip(pg).zip(needs) {
                if let (Some(gp), true) = (gp, need) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &gp,
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, x, need| {
                vec![
                    need[0].then(|| g.dot(&x[1].t())),
                    need[1].then(|| x[0].t().dot(g)),
                ]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, _, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]),
        )
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(row).ncols(), self.value(a).ncols(), "add_row width");
        let value = self.value(a) + self.value(row);
        self.push(
            value,
            &[a, row],
            Box::new(|g, _, _, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shapes");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, x, need| {
                vec![need[0].then(|| g * x[1]), need[1].then(|| g * x[0])]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, &[a], Box::new(move |g, _, _, _| vec![Some(g * c)]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(
            value,
            &[a],
            Box::new(|g, y, _, _| {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                vec![Some(d)]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(
            value,
            &[a],
            Box::new(|g, y, _, _| {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                vec![Some(d)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            value,
            &[a],
            Box::new(|g, _, x, _| {
                let mut d = g.clone();
                Zip::from(&mut d).and(x[0]).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![Some(d)]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts");
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        self.push(
            value,
            parts,
            Box::new(move |g, _, _, need| {
                let mut off = 0;
                widths
                    .iter()
                    .zip(need)
                    .map(|(&w, &n)| {
                        let r = n.then(|| g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                        r
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let cols = self.value(a).ncols();
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| {
                let mut d = Tensor::zeros((g.nrows(), cols));
                d.slice_mut(s![.., start..end]).assign(g);
                vec![Some(d)]
            }),
        )
    }

    pub fn row_map(&mut self, a: Var, map: Arc<RowMap>) -> Var {
        let value = map.apply(self.value(a));
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(map.apply_transpose(g))]),
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r0, c0) = self.value(a).dim();
        assert_eq!(r0 * c0, rows * cols, "reshape size");
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape");
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((r0, c0))
                        .expect("reshape back"),
                )]
            }),
        )
    }

    /// Normalises over every entry of `x`, then applies per-column gain and
    /// bias.
    pub fn global_layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let mean = xv.sum() / n;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        let xhat = xv.mapv(|v| (v - mean) * inv_std);
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |g, _, inputs, need| {
                let gamma = inputs[1];
                let dx = need[0].then(|| {
                    let gxhat = g * gamma;
                    let m1 = gxhat.sum() / n;
                    let m2 = (&gxhat * &xhat).sum() / n;
                    let mut d = gxhat;
                    Zip::from(&mut d)
                        .and(&xhat)
                        .for_each(|d, &xh| *d = inv_std * (*d - m1 - xh * m2));
                    d
                });
                vec![
                    dx,
                    need[1].then(|| (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0))),
                    need[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }),
        )
    }

    /// Column means as a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let rows = self.value(a).nrows();
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty")
            .insert_axis(Axis(0));
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| {
                let row = g.row(0).mapv(|v| v / rows as f64);
                vec![Some(row.broadcast((rows, g.ncols())).unwrap().to_owned())]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).sum());
        let dim = self.value(a).dim();
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(Tensor::from_elem(dim, g[[0, 0]]))]),
        )
    }

    /// Divides by the Euclidean norm of the whole tensor.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let norm = self.value(a).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        let value = self.value(a) / norm;
        self.push(
            value,
            &[a],
            Box::new(move |g, y, _, _| {
                let proj = (g * y).sum();
                vec![Some((g - &(y * proj)) / norm)]
            }),
        )
    }

    /// Divides by the root-mean-square of the whole tensor.
    pub fn rms_normalize(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let n = xv.len() as f64;
        let rms = (xv.iter().map(|v| v * v).sum::<f64>() / n + NORM_EPS).sqrt();
        let value = xv / rms;
        self.push(
            value,
            &[a],
            Box::new(move |g, y, _, _| {
                let proj = (g * y).sum() / n;
                vec![Some((g - &(y * proj)) / rms)]
            }),
        )
    }

    /// Scale-invariant SDR (dB, capped) of a `1 × n` estimate against a fixed
    /// reference, after removing both means. Gradient is zero where the cap
    /// is active.
    pub fn si_sdr(&mut self, est: Var, reference: &[f64]) -> Var {
        use crate::metrics::{ratio_to_capped_db, SI_SDR_CAP_DB};
        let ev = self.value(est);
        assert_eq!(ev.dim(), (1, reference.len()), "si_sdr shapes");
        let n = reference.len() as f64;
        let rmean = reference.iter().sum::<f64>() / n;
        let r: Vec<f64> = reference.iter().map(|v| v - rmean).collect();
        let emean = ev.sum() / n;
        let e: Vec<f64> = ev.iter().map(|v| v - emean).collect();
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let ee: f64 = e.iter().map(|v| v * v).sum();
        let pr: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
        let (target, resid) = if rr > 0.0 {
            let t = pr * pr / rr;
            (t, (ee - t).max(0.0))
        } else {
            (0.0, ee)
        };
        let db = ratio_to_capped_db(target, resid);
        let capped = db.abs() >= SI_SDR_CAP_DB || !(rr > 0.0);
        self.push(
            Tensor::from_elem((1, 1), db),
            &[est],
            Box::new(move |g, _, _, _| {
                let len = e.len();
                if capped {
                    return vec![Some(Tensor::zeros((1, len)))];
                }
                let k = g[[0, 0]] * 10.0 / std::f64::consts::LN_10;
                // d target = 2 P r / R ; d resid = 2 e - 2 P r / R
                let mut d = Tensor::zeros((1, len));
                for i in 0..len {
                    let dt = 2.0 * pr * r[i] / rr;
                    let de = 2.0 * e[i] - dt;
                    d[[0, i]] = k * (dt / target - de / resid);
                }
                let m = d.sum() / len as f64;
                d.mapv_inplace(|v| v - m);
                vec![Some(d)]
            }),
        )
    }

    /// Mean softmax cross-entropy of `logits` (`batch × classes`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len(), "cross_entropy batch");
        let b = labels.len() as f64;
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let labels = labels.to_vec();
        self.push(
            Tensor::from_elem((1, 1), loss / b),
            &[logits],
            Box::new(move |g, _, _, _| {
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[[i, y]] -= 1.0;
                }
                vec![Some(d * (g[[0, 0]] / b))]
            }),
        )
    }

    /// Single-direction LSTM over a sequence laid out per `layout`. Gate
    /// order in the fused weights is input, forget, cell, output. Initial
    /// hidden and cell states are zero.
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        layout: SeqLayout,
        reverse: bool,
    ) -> Var {
        let xv = self.value(x);
        let wih = self.value(w_ih);
        let whh = self.value(w_hh);
        let bv = self.value(bias);
        assert_eq!(xv.nrows(), layout.rows(), "lstm input rows");
        let hidden = whh.nrows();
        assert_eq!(whh.ncols(), 4 * hidden);
        assert_eq!(wih.dim(), (xv.ncols(), 4 * hidden));
        let bsz = layout.batch;
        let order: Vec<usize> = if reverse {
            (0..layout.steps).rev().collect()
        } else {
            (0..layout.steps).collect()
        };

        let mut cache = LstmCache::default();
        let mut h = Tensor::zeros((bsz, hidden));
        let mut c = Tensor::zeros((bsz, hidden));
        let mut out = Tensor::zeros((layout.rows(), hidden));
        for &t in &order {
            let mut xt = Tensor::zeros((bsz, xv.ncols()));
            for b in 0..bsz {
                xt.row_mut(b).assign(&xv.row(layout.row(t, b)));
            }
            let mut z = xt.dot(wih) + h.dot(whh);
            z += bv;
            let ig = z.slice(s![.., 0..hidden]).mapv(sigmoid);
            let fg = z.slice(s![.., hidden..2 * hidden]).mapv(sigmoid);
            let gg = z.slice(s![.., 2 * hidden..3 * hidden]).mapv(f64::tanh);
            let og = z.slice(s![.., 3 * hidden..]).mapv(sigmoid);
            let c_new = &fg * &c + &ig * &gg;
            let tc = c_new.mapv(f64::tanh);
            let h_new = &og * &tc;
            for b in 0..bsz {
                out.row_mut(layout.row(t, b)).assign(&h_new.row(b));
            }
            cache.x.push(xt);
            cache.h_prev.push(std::mem::replace(&mut h, h_new));
            cache.c_prev.push(std::mem::replace(&mut c, c_new));
            cache.gates.push([ig, fg, gg, og]);
            cache.tanh_c.push(tc);
        }

        self.push(
            out,
            &[x, w_ih, w_hh, bias],
            Box::new(move |g, _, inputs, need| {
                let (wih, whh) = (inputs[1], inputs[2]);
                let in_dim = wih.nrows();
                let mut dx = need[0].then(|| Tensor::zeros((layout.rows(), in_dim)));
                let mut dwih = Tensor::zeros(wih.dim());
                let mut dwhh = Tensor::zeros(whh.dim());
                let mut db = Tensor::zeros((1, 4 * hidden));
                let mut dh_next = Tensor::zeros((bsz, hidden));
                let mut dc_next = Tensor::zeros((bsz, hidden));
                for (k, &t) in order.iter().enumerate().rev() {
                    let [ig, fg, gg, og] = &cache.gates[k];
                    let tc = &cache.tanh_c[k];
                    let mut dh = dh_next.clone();
                    for b in 0..bsz {
                        let mut row = dh.row_mut(b);
                        row += &g.row(layout.row(t, b));
                    }
                    let mut dz = Tensor::zeros((bsz, 4 * hidden));
                    let mut dc = Tensor::zeros((bsz, hidden));
                    Zip::from(&mut dc)
                        .and(&dh)
                        .and(og)
                        .and(tc)
                        .and(&dc_next)
                        .for_each(|dc, &dh, &o, &tc, &dcn| *dc = dh * o * (1.0 - tc * tc) + dcn);
                    {
                        let (mut di, rest) = dz.view_mut().split_at(Axis(1), hidden);
                        let (mut df, rest) = rest.split_at(Axis(1), hidden);
                        let (mut dg, mut do_) = rest.split_at(Axis(1), hidden);
                        Zip::from(&mut di)
                            .and(&dc)
                            .and(gg)
                            .and(ig)
                            .for_each(|d, &dc, &g, &i| *d = dc * g * i * (1.0 - i));
                        Zip::from(&mut df)
                            .and(&dc)
                            .and(&cache.c_prev[k])
                            .and(fg)
                            .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
                        Zip::from(&mut dg)
                            .and(&dc)
                            .and(ig)
                            .and(gg)
                            .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
                        Zip::from(&mut do_)
                            .and(&dh)
                            .and(tc)
                            .and(og)
                            .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (1.0 - o));
                    }
                    dc_next = &dc * fg;
                    if need[1] {
                        dwih += &cache.x[k].t().dot(&dz);
                    }
                    if need[2] {
                        dwhh += &cache.h_prev[k].t().dot(&dz);
                    }
                    if need[3] {
                        db += &dz.sum_axis(Axis(0));
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxt = dz.dot(&wih.t());
                        for b in 0..bsz {
                            dx.row_mut(layout.row(t, b)).assign(&dxt.row(b));
                        }
                    }
                    dh_next = dz.dot(&whh.t());
                }
                vec![dx, need[1].then_some(dwih), need[2].then_some(dwhh), need[3].then_some(db)]
            }),
        )
    }
}

#[derive(Default)]
struct LstmCache {
    x: Vec<Tensor>,
    h_prev: Vec<Tensor>,
    c_prev: Vec<Tensor>,
    gates: Vec<[Tensor; 4]>,
    tanh_c: Vec<Tensor>,
}
