use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{BlockParams, NetError, ParamGrads, ProjectionParams, LN_EPS};

/// Intermediates of one block, kept for the backward pass.
#[derive(Debug, Clone)]
struct BlockTrace {
    ln1: NormTrace,
    a1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One row-stochastic `(n, n)` matrix per head.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: NormTrace,
    a2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Debug, Clone)]
struct NormTrace {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

/// Cached forward intermediates.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Array2<f64>,
    blocks: Vec<BlockTrace>,
    lnf: NormTrace,
}

impl Trace {
    pub fn n_tokens(&self) -> usize {
        self.input.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Mean-pooled representation, length `width`.
    pub projected: Array1<f64>,
    /// Length `n_classes`.
    pub logits: Array1<f64>,
    pub trace: Trace,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, NormTrace) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * gain + bias;
    (y, NormTrace { xhat, rstd })
}

/// Returns `dx` and accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    t: &NormTrace,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &t.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xhat), &rstd) in dx.axis_iter_mut(Axis(0)).zip(t.xhat.outer_iter()).zip(&t.rstd) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        Zip::from(&mut row).and(&xhat).for_each(|d, &xh| *d = rstd * (*d - mean_d - xh * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `x · wᵀ + b`
fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn block_forward(b: &BlockParams, x: &Array2<f64>, n_heads: usize) -> (Array2<f64>, BlockTrace) {
    let e = x.ncols();
    let dh = e / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a1, ln1) = layer_norm(x, &b.ln1_gain, &b.ln1_bias);
    let q = linear(&a1, &b.wq, &b.bq);
    let k = linear(&a1, &b.wk, &b.bk);
    let v = linear(&a1, &b.wv, &b.bv);
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        p.mapv_inplace(|v| v * scale);
        softmax_rows(&mut p);
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let mid = x + &linear(&ctx, &b.wo, &b.bo);

    let (a2, ln2) = layer_norm(&mid, &b.ln2_gain, &b.ln2_bias);
    let pre_act = linear(&a2, &b.w1, &b.b1);
    let act = pre_act.mapv(gelu);
    let out = &mid + &linear(&act, &b.w2, &b.b2);
    (out, BlockTrace { ln1, a1, q, k, v, probs, ctx, ln2, a2, pre_act, act })
}

/// Runs the network on one token set of shape `(n_tok, input_dim)`.
pub fn forward(params: &ProjectionParams, tokens: ArrayView2<'_, f32>) -> Result<ForwardOutput, NetError> {
    let cfg = &params.config;
    let (n, d) = tokens.dim();
    if n == 0 {
        return Err(NetError::Shape("empty token set".into()));
    }
    if d != cfg.input_dim {
        return Err(NetError::Shape(format!("tokens have dim {d}, network expects {}", cfg.input_dim)));
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("input tokens"));
    }
    let input = tokens.mapv(f64::from);
    let mut x = linear(&input, &params.w_in, &params.b_in);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (out, trace) = block_forward(b, &x, cfg.n_heads);
        x = out;
        blocks.push(trace);
    }
    let (y, lnf) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    let projected = y.mean_axis(Axis(0)).expect("n > 0");
    let logits = params.w_head.dot(&projected) + &params.b_head;
    Ok(ForwardOutput { projected, logits, trace: Trace { input, blocks, lnf } })
}

fn outer_acc(dst: &mut Array2<f64>, dy: &Array2<f64>, x: &Array2<f64>) {
    // dst += dyᵀ · x
    ndarray::linalg::general_mat_mul(1.0, &dy.t(), x, 1.0, dst);
}

fn block_backward(
    b: &BlockParams,
    g: &mut BlockParams,
    t: &BlockTrace,
    dout: Array2<f64>,
    n_heads: usize,
) -> Array2<f64> {
    let e = dout.ncols();
    let dh = e / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    let dact = dout.dot(&b.w2);
    outer_acc(&mut g.w2, &dout, &t.act);
    g.b2 += &dout.sum_axis(Axis(0));
    let mut dpre = dact;
    Zip::from(&mut dpre).and(&t.pre_act).for_each(|d, &x| *d *= gelu_grad(x));
    outer_acc(&mut g.w1, &dpre, &t.a2);
    g.b1 += &dpre.sum_axis(Axis(0));
    let da2 = dpre.dot(&b.w1);
    let mut dmid = layer_norm_backward(&da2, &t.ln2, &b.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    dmid += &dout;

    // attention branch
    let dctx = dmid.dot(&b.wo);
    outer_acc(&mut g.wo, &dmid, &t.ctx);
    g.bo += &dmid.sum_axis(Axis(0));
    let mut dq = Array2::zeros(t.q.raw_dim());
    let mut dk = Array2::zeros(t.k.raw_dim());
    let mut dv = Array2::zeros(t.v.raw_dim());
    for (h, p) in t.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&t.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        // softmax Jacobian, row by row
        let mut ds = &dp * p;
        for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.outer_iter()) {
            let dot = row.sum();
            Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d = (*d - pv * dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&t.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&t.q.slice(cols)));
    }
    outer_acc(&mut g.wq, &dq, &t.a1);
    outer_acc(&mut g.wk, &dk, &t.a1);
    outer_acc(&mut g.wv, &dv, &t.a1);
    g.bq += &dq.sum_axis(Axis(0));
    g.bk += &dk.sum_axis(Axis(0));
    g.bv += &dv.sum_axis(Axis(0));
    let da1 = dq.dot(&b.wq) + dk.dot(&b.wk) + dv.dot(&b.wv);
    let mut dx = layer_norm_backward(&da1, &t.ln1, &b.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    dx += &dmid;
    dx
}

/// Accumulates into `grads` the gradient of
/// `grad_projected · projected + grad_logits · logits` for the traced input.
pub fn backward(
    params: &ProjectionParams,
    trace: &Trace,
    grad_projected: &Array1<f64>,
    grad_logits: &Array1<f64>,
    grads: &mut ParamGrads,
) -> Result<(), NetError> {
    let cfg = &params.config;
    if grads.config != *cfg {
        return Err(NetError::Shape("gradient buffer built for another config".into()));
    }
    if trace.blocks.len() != params.blocks.len()
        || trace.input.ncols() != cfg.input_dim
        || trace.lnf.xhat.ncols() != cfg.width
    {
        return Err(NetError::Shape("trace does not match parameters".into()));
    }
    if grad_projected.len() != cfg.width || grad_logits.len() != cfg.n_classes {
        return Err(NetError::Shape("upstream gradient length mismatch".into()));
    }
    let n = trace.n_tokens();
    let projected = {
        let y = &trace.lnf.xhat * &params.lnf_gain + &params.lnf_bias;
        y.mean_axis(Axis(0)).unwrap()
    };

    for (i, &gl) in grad_logits.iter().enumerate() {
        grads.b_head[i] += gl;
        grads.w_head.row_mut(i).scaled_add(gl, &projected);
    }
    let dproj = grad_projected + &params.w_head.t().dot(grad_logits);
    let dy = Array2::from_shape_fn((n, cfg.width), |(_, j)| dproj[j] / n as f64);
    let mut dx = layer_norm_backward(&dy, &trace.lnf, &params.lnf_gain, &mut grads.lnf_gain, &mut grads.lnf_bias);

    for ((b, g), t) in params.blocks.iter().zip(grads.blocks.iter_mut()).zip(&trace.blocks).rev() {
        dx = block_backward(b, g, t, dx, cfg.n_heads);
    }
    outer_acc(&mut grads.w_in, &dx, &trace.input);
    grads.b_in += &dx.sum_axis(Axis(0));
    Ok(())
}
