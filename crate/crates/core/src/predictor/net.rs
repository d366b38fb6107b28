use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::{LayerRows, Params, RunningStats};
use crate::mix64;

/// Smooth L1 of `pred - target`: loss and derivative with respect to `pred`.
pub fn smooth_l1(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// `dot` on transposed views may return column-major results; flat views need row-major.
fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn block(w_x: &Array2<f64>, k: usize, d: usize) -> ArrayView2<'_, f64> {
    w_x.slice(s![k * d..(k + 1) * d, ..])
}

/// Every table row pushed through its block of `w_x`, so an input projection
/// is a sum of four row lookups.
struct Projections {
    op: Array2<f64>,
    kernel: Array2<f64>,
    pred1: Array2<f64>,
    pred2: Array2<f64>,
}

impl Projections {
    fn new(p: &Params) -> Self {
        let d = p.op_table.ncols();
        Projections {
            op: p.op_table.dot(&block(&p.w_x, 0, d)),
            kernel: p.kernel_table.dot(&block(&p.w_x, 1, d)),
            pred1: p.pred_table.dot(&block(&p.w_x, 2, d)),
            pred2: p.pred_table.dot(&block(&p.w_x, 3, d)),
        }
    }
}

struct Step {
    active: Vec<bool>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates `[i f g o]`.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Runs the cell over all sequences at once; a finished sequence keeps its state.
fn lstm(p: &Params, seqs: &[Vec<LayerRows>], hidden: usize, mut trace: Option<&mut Vec<Step>>) -> Array2<f64> {
    let n = seqs.len();
    let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let proj = Projections::new(p);
    let mut h = Array2::<f64>::zeros((n, hidden));
    let mut c = Array2::<f64>::zeros((n, hidden));
    for t in 0..steps {
        let mut z = Array2::<f64>::zeros((n, 4 * hidden));
        let active: Vec<bool> = seqs.iter().map(|s| t < s.len()).collect();
        for (b, seq) in seqs.iter().enumerate() {
            if let Some(r) = seq.get(t) {
                let mut row = z.row_mut(b);
                row += &proj.op.row(r.op);
                row += &proj.kernel.row(r.kernel);
                row += &proj.pred1.row(r.pred1);
                row += &proj.pred2.row(r.pred2);
            }
        }
        z += &p.b;
        z += &h.dot(&p.w_h);
        for mut row in z.rows_mut() {
            for j in 0..hidden {
                row[j] = sigmoid(row[j]);
                row[hidden + j] = sigmoid(row[hidden + j]);
                row[2 * hidden + j] = row[2 * hidden + j].tanh();
                row[3 * hidden + j] = sigmoid(row[3 * hidden + j]);
            }
        }
        let mut h_next = h.clone();
        let mut c_next = c.clone();
        let mut tanh_c = Array2::<f64>::zeros((n, hidden));
        for b in (0..n).filter(|&b| active[b]) {
            for j in 0..hidden {
                let (i, f, g, o) = (z[[b, j]], z[[b, hidden + j]], z[[b, 2 * hidden + j]], z[[b, 3 * hidden + j]]);
                let cn = f * c[[b, j]] + i * g;
                let tc = cn.tanh();
                c_next[[b, j]] = cn;
                tanh_c[[b, j]] = tc;
                h_next[[b, j]] = o * tc;
            }
        }
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(Step { active, h_prev: h, c_prev: c, gates: z, tanh_c });
        }
        h = h_next;
        c = c_next;
    }
    h
}

pub(super) fn encode(p: &Params, seqs: &[Vec<LayerRows>], hidden: usize) -> Array2<f64> {
    lstm(p, seqs, hidden, None)
}

fn head_input(p: &Params, h: &Array2<f64>, epochs: &[usize]) -> Array2<f64> {
    let e = p.epoch_table.select(Axis(0), epochs);
    concatenate(Axis(1), &[h.view(), e.view()]).expect("matching rows")
}

/// MLP with batch norm in inference mode (running statistics).
pub(super) fn head_eval(p: &Params, stats: &RunningStats, h: &Array2<f64>, epochs: &[usize], eps: f64) -> Vec<f64> {
    let mut u = head_input(p, h, epochs);
    for k in 0..p.mlp_w.len() {
        let a = u.dot(&p.mlp_w[k]);
        let inv_std = stats.var[k].mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (a - &stats.mean[k]) * &inv_std;
        u = (xhat * &p.gamma[k] + &p.beta[k]).mapv(|v| v.max(0.0));
    }
    (u.dot(&p.w_out) + &p.b_out).column(0).to_vec()
}

struct NormCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Training-mode loss and its gradient with respect to every parameter.
pub(crate) struct Gradient {
    pub loss: f64,
    pub grads: Params,
    /// Batch mean and biased variance of each normalized layer.
    pub batch_mean: Vec<Array1<f64>>,
    pub batch_var: Vec<Array1<f64>>,
    /// Hash of every ReLU's on/off state, to spot kinks in finite differences.
    pub relu_pattern: u64,
}

pub(crate) fn loss_and_grad(
    p: &Params,
    seqs: &[Vec<LayerRows>],
    epochs: &[usize],
    targets: &[f64],
    hidden: usize,
    eps: f64,
) -> Gradient {
    let n = seqs.len();
    let nf = n as f64;
    let mut trace = Vec::new();
    let h_final = lstm(p, seqs, hidden, Some(&mut trace));

    let mut u = head_input(p, &h_final, epochs);
    let mut caches = Vec::with_capacity(p.mlp_w.len());
    let (mut batch_mean, mut batch_var) = (Vec::new(), Vec::new());
    let mut relu_pattern = 0u64;
    for k in 0..p.mlp_w.len() {
        let a = u.dot(&p.mlp_w[k]);
        let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = a - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &p.gamma[k] + &p.beta[k];
        for chunk in y.as_slice().expect("standard layout").chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
            relu_pattern = mix64(relu_pattern, bits);
        }
        caches.push(NormCache { input: u, xhat, inv_std });
        batch_mean.push(mean);
        batch_var.push(var);
        u = y.mapv(|v| v.max(0.0));
    }
    let out = u.dot(&p.w_out) + &p.b_out;

    let mut loss = 0.0;
    let mut dout = Array2::<f64>::zeros((n, 1));
    for b in 0..n {
        let (l, g) = smooth_l1(out[[b, 0]], targets[b]);
        loss += l / nf;
        dout[[b, 0]] = g / nf;
    }

    let mut g = p.zeros_like();
    g.w_out = row_major(u.t().dot(&dout));
    g.b_out = dout.sum_axis(Axis(0));
    let mut dr = dout.dot(&p.w_out.t());
    for k in (0..p.mlp_w.len()).rev() {
        let c = &caches[k];
        let y = &c.xhat * &p.gamma[k] + &p.beta[k];
        let dy = dr * &y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        g.gamma[k] = (&dy * &c.xhat).sum_axis(Axis(0));
        g.beta[k] = dy.sum_axis(Axis(0));
        let dxhat = dy * &p.gamma[k];
        let sum = dxhat.sum_axis(Axis(0));
        let sum_x = (&dxhat * &c.xhat).sum_axis(Axis(0));
        let da = (dxhat * nf - &sum - &c.xhat * &sum_x) * &(&c.inv_std / nf);
        g.mlp_w[k] = row_major(c.input.t().dot(&da));
        dr = da.dot(&p.mlp_w[k].t());
    }
    for (b, &row) in epochs.iter().enumerate() {
        let mut dst = g.epoch_table.row_mut(row);
        dst += &dr.slice(s![b, hidden..]);
    }

    let four = 4 * hidden;
    let mut s_op = Array2::<f64>::zeros((p.op_table.nrows(), four));
    let mut s_kernel = Array2::<f64>::zeros((p.kernel_table.nrows(), four));
    let mut s_pred1 = Array2::<f64>::zeros((p.pred_table.nrows(), four));
    let mut s_pred2 = Array2::<f64>::zeros((p.pred_table.nrows(), four));
    let mut dh = dr.slice(s![.., ..hidden]).to_owned();
    let mut dc = Array2::<f64>::zeros((n, hidden));
    for (t, st) in trace.iter().enumerate().rev() {
        let mut dz = Array2::<f64>::zeros((n, four));
        for b in (0..n).filter(|&b| st.active[b]) {
            for j in 0..hidden {
                let gt = &st.gates;
                let (i, f, gg, o) = (gt[[b, j]], gt[[b, hidden + j]], gt[[b, 2 * hidden + j]], gt[[b, 3 * hidden + j]]);
                let tc = st.tanh_c[[b, j]];
                let dhn = dh[[b, j]];
                let dct = dc[[b, j]] + dhn * o * (1.0 - tc * tc);
                dz[[b, j]] = dct * gg * i * (1.0 - i);
                dz[[b, hidden + j]] = dct * st.c_prev[[b, j]] * f * (1.0 - f);
                dz[[b, 2 * hidden + j]] = dct * i * (1.0 - gg * gg);
                dz[[b, 3 * hidden + j]] = dhn * tc * o * (1.0 - o);
                dc[[b, j]] = dct * f;
            }
            let r = seqs[b][t];
            let row = dz.row(b);
            let mut dst = s_op.row_mut(r.op);
            dst += &row;
            let mut dst = s_kernel.row_mut(r.kernel);
            dst += &row;
            let mut dst = s_pred1.row_mut(r.pred1);
            dst += &row;
            let mut dst = s_pred2.row_mut(r.pred2);
            dst += &row;
        }
        g.w_h += &st.h_prev.t().dot(&dz);
        g.b += &dz.sum_axis(Axis(0));
        let dh_prev = dz.dot(&p.w_h.t());
        for b in (0..n).filter(|&b| st.active[b]) {
            dh.row_mut(b).assign(&dh_prev.row(b));
        }
    }
    let d = p.op_table.ncols();
    let tables = [(&p.op_table, &s_op), (&p.kernel_table, &s_kernel), (&p.pred_table, &s_pred1), (&p.pred_table, &s_pred2)];
    for (k, (table, acc)) in tables.into_iter().enumerate() {
        let mut dst = g.w_x.slice_mut(s![k * d..(k + 1) * d, ..]);
        dst += &table.t().dot(acc);
    }
    g.op_table = row_major(s_op.dot(&block(&p.w_x, 0, d).t()));
    g.kernel_table = row_major(s_kernel.dot(&block(&p.w_x, 1, d).t()));
    g.pred_table = row_major(s_pred1.dot(&block(&p.w_x, 2, d).t()) + s_pred2.dot(&block(&p.w_x, 3, d).t()));

    Gradient { loss, grads: g, batch_mean, batch_var, relu_pattern }
}
