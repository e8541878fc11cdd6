//! Differentiable building blocks. Every layer exposes a forward pass that
//! returns whatever its backward pass needs, and a backward pass that
//! accumulates parameter gradients into a same-shaped gradient layer.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;

use crate::seed::Rng;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

pub(crate) fn uniform1(n: usize, bound: f64, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-bound..=bound))
}

pub(crate) fn reverse_rows(x: &Array2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

pub(crate) fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

pub(crate) type Visit<'a, 'p> = &'a mut dyn FnMut(&str, &'p [f64]);
pub(crate) type VisitMut<'a> = &'a mut dyn FnMut(&str, &mut [f64]);

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

/// Fully connected layer, `y = x Wᵀ + b` row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform(output, input, bound, rng),
            bias: uniform1(output, bound, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub(crate) fn visit<'p>(&'p self, prefix: &str, f: Visit<'_, 'p>) {
        f(&format!("{prefix}.weight"), slice2(&self.weight));
        f(&format!("{prefix}.bias"), slice1(&self.bias));
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: VisitMut) {
        f(&format!("{prefix}.weight"), slice2_mut(&mut self.weight));
        f(&format!("{prefix}.bias"), slice1_mut(&mut self.bias));
    }
}

/// One direction of an LSTM. Gate blocks are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

pub struct LstmTrace {
    x: Array2<f64>,
    /// Activated gates per step, `T × 4H`.
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: uniform(4 * hidden, input, bound, rng),
            w_hh: uniform(4 * hidden, hidden, bound, rng),
            bias: uniform1(4 * hidden, bound, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_ih: Array2::zeros(self.w_ih.raw_dim()),
            w_hh: Array2::zeros(self.w_hh.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LstmTrace) {
        let (t_len, hd) = (x.nrows(), self.hidden());
        let pre_x = x.dot(&self.w_ih.t()) + &self.bias;
        let mut gates = Array2::zeros((t_len, 4 * hd));
        let mut c = Array2::zeros((t_len, hd));
        let mut tanh_c = Array2::zeros((t_len, hd));
        let mut h = Array2::zeros((t_len, hd));
        let mut h_prev = Array1::<f64>::zeros(hd);
        let mut c_prev = Array1::<f64>::zeros(hd);
        for t in 0..t_len {
            let pre = &pre_x.row(t) + &self.w_hh.dot(&h_prev);
            let mut g = gates.row_mut(t);
            for j in 0..hd {
                g[j] = sigmoid(pre[j]);
                g[hd + j] = sigmoid(pre[hd + j]);
                g[2 * hd + j] = pre[2 * hd + j].tanh();
                g[3 * hd + j] = sigmoid(pre[3 * hd + j]);
            }
            for j in 0..hd {
                let cj = g[hd + j] * c_prev[j] + g[j] * g[2 * hd + j];
                let tc = cj.tanh();
                c[[t, j]] = cj;
                tanh_c[[t, j]] = tc;
                h[[t, j]] = g[3 * hd + j] * tc;
            }
            h_prev = h.row(t).to_owned();
            c_prev = c.row(t).to_owned();
        }
        let trace = LstmTrace {
            x: x.clone(),
            gates,
            c,
            tanh_c,
            h: h.clone(),
        };
        (h, trace)
    }

    pub fn backward(&self, trace: &LstmTrace, dh_out: &Array2<f64>, grad: &mut LstmCell) -> Array2<f64> {
        let (t_len, hd) = (trace.x.nrows(), self.hidden());
        let mut d_pre = Array2::<f64>::zeros((t_len, 4 * hd));
        let mut dh_next = Array1::<f64>::zeros(hd);
        let mut dc_next = Array1::<f64>::zeros(hd);
        for t in (0..t_len).rev() {
            let g = trace.gates.row(t);
            let mut dp = d_pre.row_mut(t);
            for j in 0..hd {
                let (i, f, cg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let tc = trace.tanh_c[[t, j]];
                let c_prev = if t > 0 { trace.c[[t - 1, j]] } else { 0.0 };
                let dh = dh_out[[t, j]] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                dp[j] = dc * cg * i * (1.0 - i);
                dp[hd + j] = dc * c_prev * f * (1.0 - f);
                dp[2 * hd + j] = dc * i * (1.0 - cg * cg);
                dp[3 * hd + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next = self.w_hh.t().dot(&dp);
        }
        let mut h_prev = Array2::<f64>::zeros((t_len, hd));
        if t_len > 1 {
            h_prev.slice_mut(s![1.., ..]).assign(&trace.h.slice(s![..t_len - 1, ..]));
        }
        grad.w_ih += &d_pre.t().dot(&trace.x);
        grad.w_hh += &d_pre.t().dot(&h_prev);
        grad.bias += &d_pre.sum_axis(Axis(0));
        d_pre.dot(&self.w_ih)
    }

    pub(crate) fn visit<'p>(&'p self, prefix: &str, f: Visit<'_, 'p>) {
        f(&format!("{prefix}.w_ih"), slice2(&self.w_ih));
        f(&format!("{prefix}.w_hh"), slice2(&self.w_hh));
        f(&format!("{prefix}.bias"), slice1(&self.bias));
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: VisitMut) {
        f(&format!("{prefix}.w_ih"), slice2_mut(&mut self.w_ih));
        f(&format!("{prefix}.w_hh"), slice2_mut(&mut self.w_hh));
        f(&format!("{prefix}.bias"), slice1_mut(&mut self.bias));
    }
}

/// Single-layer LSTM; with a backward cell, per-frame outputs are
/// `[h_forward_t, h_backward_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: Option<LstmCell>,
}

pub struct BiLstmTrace {
    fwd: LstmTrace,
    bwd: Option<LstmTrace>,
}

impl BiLstm {
    pub fn new(input: usize, hidden: usize, bidirectional: bool, rng: &mut Rng) -> Self {
        let forward = LstmCell::new(input, hidden, rng);
        let backward = bidirectional.then(|| LstmCell::new(input, hidden, rng));
        Self { forward, backward }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            forward: self.forward.zeros_like(),
            backward: self.backward.as_ref().map(LstmCell::zeros_like),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden() * if self.backward.is_some() { 2 } else { 1 }
    }

    /// `T × input` features to `T × output_dim` states.
    pub fn run(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_trace(x).0
    }

    pub fn forward_trace(&self, x: &Array2<f64>) -> (Array2<f64>, BiLstmTrace) {
        let (hf, fwd) = self.forward.forward(x);
        match &self.backward {
            None => (hf, BiLstmTrace { fwd, bwd: None }),
            Some(cell) => {
                let (hb_rev, bwd) = cell.forward(&reverse_rows(x));
                let hb = reverse_rows(&hb_rev);
                let out = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("same length");
                (out, BiLstmTrace { fwd, bwd: Some(bwd) })
            }
        }
    }

    pub fn backward_trace(&self, trace: &BiLstmTrace, d_out: &Array2<f64>, grad: &mut BiLstm) -> Array2<f64> {
        let hd = self.forward.hidden();
        let d_fwd = d_out.slice(s![.., ..hd]).to_owned();
        let mut dx = self.forward.backward(&trace.fwd, &d_fwd, &mut grad.forward);
        if let (Some(cell), Some(bt), Some(gb)) = (&self.backward, &trace.bwd, grad.backward.as_mut()) {
            let d_bwd = reverse_rows(&d_out.slice(s![.., hd..]).to_owned());
            dx += &reverse_rows(&cell.backward(bt, &d_bwd, gb));
        }
        dx
    }

    pub(crate) fn visit<'p>(&'p self, prefix: &str, f: Visit<'_, 'p>) {
        self.forward.visit(&format!("{prefix}.forward"), f);
        if let Some(b) = &self.backward {
            b.visit(&format!("{prefix}.backward"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: VisitMut) {
        self.forward.visit_mut(&format!("{prefix}.forward"), f);
        if let Some(b) = &mut self.backward {
            b.visit_mut(&format!("{prefix}.backward"), f);
        }
    }
}

/// Scalar sigmoid score per frame: `a_t = σ(w·s_t + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameAttention {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

impl FrameAttention {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            weight: uniform1(dim, bound, rng),
            bias: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array1::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(1),
        }
    }

    pub fn scores(&self, states: &Array2<f64>) -> Array1<f64> {
        (states.dot(&self.weight) + self.bias[0]).mapv(sigmoid)
    }

    /// Score-weighted average `Σ a_t s_t / Σ a_t`.
    pub fn pool(&self, states: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
        let a = self.scores(states);
        let v = a.dot(states) / a.sum();
        (v, a)
    }

    pub fn pool_backward(
        &self,
        states: &Array2<f64>,
        scores: &Array1<f64>,
        pooled: &Array1<f64>,
        d_pooled: &Array1<f64>,
        grad: &mut FrameAttention,
    ) -> Array2<f64> {
        let total = scores.sum();
        let mut d_states = Array2::zeros(states.raw_dim());
        for t in 0..states.nrows() {
            let st = states.row(t);
            let a = scores[t];
            let da = (&st - pooled).dot(d_pooled) / total;
            let dz = da * a * (1.0 - a);
            let mut row = d_states.row_mut(t);
            row.assign(&(d_pooled * (a / total)));
            row.scaled_add(dz, &self.weight);
            grad.weight.scaled_add(dz, &st);
            grad.bias[0] += dz;
        }
        d_states
    }

    /// Gating variant placed before the recurrent layer: `x'_t = a_t x_t`.
    pub fn gate(&self, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let a = self.scores(x);
        let gated = x * &a.view().insert_axis(Axis(1));
        (gated, a)
    }

    pub fn gate_backward(
        &self,
        x: &Array2<f64>,
        scores: &Array1<f64>,
        d_gated: &Array2<f64>,
        grad: &mut FrameAttention,
    ) -> Array2<f64> {
        let mut dx = d_gated * &scores.view().insert_axis(Axis(1));
        for t in 0..x.nrows() {
            let a = scores[t];
            let dz = d_gated.row(t).dot(&x.row(t)) * a * (1.0 - a);
            dx.row_mut(t).scaled_add(dz, &self.weight);
            grad.weight.scaled_add(dz, &x.row(t));
            grad.bias[0] += dz;
        }
        dx
    }

    pub(crate) fn visit<'p>(&'p self, prefix: &str, f: Visit<'_, 'p>) {
        f(&format!("{prefix}.weight"), slice1(&self.weight));
        f(&format!("{prefix}.bias"), slice1(&self.bias));
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: VisitMut) {
        f(&format!("{prefix}.weight"), slice1_mut(&mut self.weight));
        f(&format!("{prefix}.bias"), slice1_mut(&mut self.bias));
    }
}

/// Clip vector from per-frame states: attention-weighted or plain mean.
pub fn framewise_attention(states: &Array2<f64>, attention: Option<&FrameAttention>) -> Array1<f64> {
    match attention {
        Some(att) => att.pool(states).0,
        None => states.mean_axis(Axis(0)).expect("at least one frame"),
    }
}

/// Batch normalization over the batch axis of `B × C` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BatchNormTrace {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            running_mean: Array1::zeros(self.gamma.raw_dim()),
            running_var: Array1::zeros(self.gamma.raw_dim()),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    /// Normalizes with batch statistics (biased variance).
    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, BatchNormTrace) {
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let x_hat = &centered * &inv_std;
        let y = &x_hat * &self.gamma + &self.beta;
        (
            y,
            BatchNormTrace {
                x_hat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        (x - &self.running_mean) * &inv_std * &self.gamma + &self.beta
    }

    /// Exponential moving update of the running statistics; the variance
    /// estimate is unbiased, and a batch of one leaves it unchanged.
    pub fn update_running(&mut self, trace: &BatchNormTrace, batch: usize) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &trace.batch_mean * m;
        if batch > 1 {
            let unbiased = &trace.batch_var * (batch as f64 / (batch - 1) as f64);
            self.running_var = &self.running_var * (1.0 - m) + unbiased * m;
        }
    }

    pub fn backward(&self, trace: &BatchNormTrace, dy: &Array2<f64>, grad: &mut BatchNorm) -> Array2<f64> {
        let b = dy.nrows() as f64;
        grad.gamma += &(dy * &trace.x_hat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dx_hat = dy * &self.gamma;
        let sum_dx_hat = dx_hat.sum_axis(Axis(0));
        let sum_dx_hat_xhat = (&dx_hat * &trace.x_hat).sum_axis(Axis(0));
        let inner = &dx_hat * b - &sum_dx_hat - &(&trace.x_hat * &sum_dx_hat_xhat);
        inner * &(&trace.inv_std / b)
    }

    pub(crate) fn visit<'p>(&'p self, prefix: &str, f: Visit<'_, 'p>) {
        f(&format!("{prefix}.gamma"), slice1(&self.gamma));
        f(&format!("{prefix}.beta"), slice1(&self.beta));
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: VisitMut) {
        f(&format!("{prefix}.gamma"), slice1_mut(&mut self.gamma));
        f(&format!("{prefix}.beta"), slice1_mut(&mut self.beta));
    }

    pub(crate) fn visit_buffers<'p>(&'p self, prefix: &str, f: Visit<'_, 'p>) {
        f(&format!("{prefix}.running_mean"), slice1(&self.running_mean));
        f(&format!("{prefix}.running_var"), slice1(&self.running_var));
    }

    pub(crate) fn visit_buffers_mut(&mut self, prefix: &str, f: VisitMut) {
        f(&format!("{prefix}.running_mean"), slice1_mut(&mut self.running_mean));
        f(&format!("{prefix}.running_var"), slice1_mut(&mut self.running_var));
    }
}
