//! Differentiable primitives.
//!
//! Every op validates shapes up front, computes the forward value, and
//! registers a backward rule when any input tracks gradients. Shapes
//! are exact: no implicit broadcasting outside `add_bias` and
//! `broadcast_tokens`.
//!
//! Row convention: ops that act on the last dimension (`matmul`,
//! `add_bias`, `layer_norm`, `concat_cols`) treat the product of the
//! leading dimensions as the row count, so (B, L, C) tensors flow
//! through channel-wise layers without reshapes.

use super::{GradSink, OpBackward, Tensor};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "needs at least one non-empty dimension".into(),
        }),
    }
}

// ── elementwise ──────────────────────────────────────────────────────

struct AddBackward;
impl OpBackward for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], g.to_vec());
        sink.accumulate(&inputs[1], g.to_vec());
    }
}

struct SubBackward;
impl OpBackward for SubBackward {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], g.to_vec());
        sink.accumulate(&inputs[1], g.iter().map(|v| -v).collect());
    }
}

struct MulBackward;
impl OpBackward for MulBackward {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let a = inputs[0].data();
        let b = inputs[1].data();
        sink.accumulate(
            &inputs[0],
            g.iter().zip(b.iter()).map(|(g, b)| g * b).collect(),
        );
        sink.accumulate(
            &inputs[1],
            g.iter().zip(a.iter()).map(|(g, a)| g * a).collect(),
        );
    }
}

struct NegBackward;
impl OpBackward for NegBackward {
    fn name(&self) -> &'static str {
        "neg"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], g.iter().map(|v| -v).collect());
    }
}

struct ScaleBackward {
    factor: f64,
}
impl OpBackward for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], g.iter().map(|v| v * self.factor).collect());
    }
}

struct ExpBackward {
    out: Vec<f64>,
}
impl OpBackward for ExpBackward {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(
            &inputs[0],
            g.iter().zip(self.out.iter()).map(|(g, o)| g * o).collect(),
        );
    }
}

struct SiluBackward;
impl OpBackward for SiluBackward {
    fn name(&self) -> &'static str {
        "silu"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let x = inputs[0].data();
        let grad = g
            .iter()
            .zip(x.iter())
            .map(|(g, &x)| {
                let s = sigmoid(x);
                g * (s + x * s * (1.0 - s))
            })
            .collect();
        sink.accumulate(&inputs[0], grad);
    }
}

struct SoftplusBackward;
impl OpBackward for SoftplusBackward {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let x = inputs[0].data();
        let grad = g
            .iter()
            .zip(x.iter())
            .map(|(g, &x)| g * sigmoid(x))
            .collect();
        sink.accumulate(&inputs[0], grad);
    }
}

// ── reductions ───────────────────────────────────────────────────────

struct SumBackward {
    n: usize,
}
impl OpBackward for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], vec![g[0]; self.n]);
    }
}

struct MeanBackward {
    n: usize,
}
impl OpBackward for MeanBackward {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], vec![g[0] / self.n as f64; self.n]);
    }
}

// ── linear algebra ───────────────────────────────────────────────────

struct MatmulBackward {
    rows: usize,
    k: usize,
    n: usize,
}
impl OpBackward for MatmulBackward {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let (rows, k, n) = (self.rows, self.k, self.n);
        // dA = g . B^T
        if inputs[0].requires_grad() {
            let b = inputs[1].data();
            let bt = transpose_raw(&b, k, n);
            sink.accumulate(&inputs[0], matmul_raw(g, &bt, rows, n, k));
        }
        // dB = A^T . g
        if inputs[1].requires_grad() {
            let a = inputs[0].data();
            let at = transpose_raw(&a, rows, k);
            sink.accumulate(&inputs[1], matmul_raw(&at, g, k, rows, n));
        }
    }
}

struct AddBiasBackward {
    rows: usize,
    cols: usize,
}
impl OpBackward for AddBiasBackward {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], g.to_vec());
        let mut db = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                db[c] += g[r * self.cols + c];
            }
        }
        sink.accumulate(&inputs[1], db);
    }
}

struct TransposeBackward {
    rows: usize,
    cols: usize,
}
impl OpBackward for TransposeBackward {
    fn name(&self) -> &'static str {
        "transpose2d"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], transpose_raw(g, self.cols, self.rows));
    }
}

struct ReshapeBackward;
impl OpBackward for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        sink.accumulate(&inputs[0], g.to_vec());
    }
}

struct ConcatColsBackward {
    rows: usize,
    ca: usize,
    cb: usize,
}
impl OpBackward for ConcatColsBackward {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let (ca, cb) = (self.ca, self.cb);
        let cols = ca + cb;
        let mut da = vec![0.0; self.rows * ca];
        let mut db = vec![0.0; self.rows * cb];
        for r in 0..self.rows {
            da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * cols..r * cols + ca]);
            db[r * cb..(r + 1) * cb].copy_from_slice(&g[r * cols + ca..(r + 1) * cols]);
        }
        sink.accumulate(&inputs[0], da);
        sink.accumulate(&inputs[1], db);
    }
}

struct BroadcastTokensBackward {
    batch: usize,
    tokens: usize,
    cols: usize,
}
impl OpBackward for BroadcastTokensBackward {
    fn name(&self) -> &'static str {
        "broadcast_tokens"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let mut dv = vec![0.0; self.batch * self.cols];
        for b in 0..self.batch {
            for t in 0..self.tokens {
                let base = (b * self.tokens + t) * self.cols;
                for c in 0..self.cols {
                    dv[b * self.cols + c] += g[base + c];
                }
            }
        }
        sink.accumulate(&inputs[0], dv);
    }
}

// ── normalization ────────────────────────────────────────────────────

struct LayerNormBackward {
    rows: usize,
    cols: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}
impl OpBackward for LayerNormBackward {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let (rows, cols) = (self.rows, self.cols);
        let x = inputs[0].data();
        let gamma = inputs[1].data();
        let mut dx = vec![0.0; rows * cols];
        let mut dgamma = vec![0.0; cols];
        let mut dbeta = vec![0.0; cols];
        let n = cols as f64;
        for r in 0..rows {
            let mu = self.mean[r];
            let istd = self.inv_std[r];
            let row = &x[r * cols..(r + 1) * cols];
            let grow = &g[r * cols..(r + 1) * cols];
            // dxhat, plus the two row sums that couple elements.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for c in 0..cols {
                let xhat = (row[c] - mu) * istd;
                let dxhat = grow[c] * gamma[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma[c] += grow[c] * xhat;
                dbeta[c] += grow[c];
            }
            for c in 0..cols {
                let xhat = (row[c] - mu) * istd;
                let dxhat = grow[c] * gamma[c];
                dx[r * cols + c] = istd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
            }
        }
        sink.accumulate(&inputs[0], dx);
        sink.accumulate(&inputs[1], dgamma);
        sink.accumulate(&inputs[2], dbeta);
    }
}

// ── convolution ──────────────────────────────────────────────────────

struct Conv1dBackward {
    batch: usize,
    tokens: usize,
    channels: usize,
    kernel: usize,
}
impl OpBackward for Conv1dBackward {
    fn name(&self) -> &'static str {
        "conv1d"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let (bsz, l, c, k) = (self.batch, self.tokens, self.channels, self.kernel);
        let x = inputs[0].data();
        let w = inputs[1].data();
        let mut dx = vec![0.0; bsz * l * c];
        let mut dw = vec![0.0; c * k];
        let mut db = vec![0.0; c];
        for b in 0..bsz {
            for t in 0..l {
                for ch in 0..c {
                    let go = g[(b * l + t) * c + ch];
                    db[ch] += go;
                    for tap in 0..k {
                        if t >= tap {
                            let src = (b * l + (t - tap)) * c + ch;
                            dx[src] += go * w[ch * k + tap];
                            dw[ch * k + tap] += go * x[src];
                        }
                    }
                }
            }
        }
        sink.accumulate(&inputs[0], dx);
        sink.accumulate(&inputs[1], dw);
        sink.accumulate(&inputs[2], db);
    }
}

// ── patch / grid reindexing ──────────────────────────────────────────

#[derive(Clone, Copy)]
struct PatchGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
}

impl PatchGeom {
    fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
    fn feat(&self) -> usize {
        self.patch * self.patch * self.channels
    }
    /// Image-buffer index for (token row element): the bijection both
    /// patch ops share, so forward/backward are exact inverses.
    fn image_index(&self, b: usize, token: usize, f: usize) -> usize {
        let gw = self.width / self.patch;
        let (ty, tx) = (token / gw, token % gw);
        let p = self.patch;
        let ch = f / (p * p);
        let dy = (f / p) % p;
        let dx = f % p;
        ((b * self.channels + ch) * self.height + ty * p + dy) * self.width + tx * p + dx
    }
}

struct Im2PatchesBackward {
    geom: PatchGeom,
}
impl OpBackward for Im2PatchesBackward {
    fn name(&self) -> &'static str {
        "im2patches"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let geom = self.geom;
        let (l, feat) = (geom.tokens(), geom.feat());
        let mut dx = vec![0.0; inputs[0].numel()];
        for b in 0..geom.batch {
            for t in 0..l {
                for f in 0..feat {
                    dx[geom.image_index(b, t, f)] = g[(b * l + t) * feat + f];
                }
            }
        }
        sink.accumulate(&inputs[0], dx);
    }
}

struct Patches2ImBackward {
    geom: PatchGeom,
}
impl OpBackward for Patches2ImBackward {
    fn name(&self) -> &'static str {
        "patches2im"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let geom = self.geom;
        let (l, feat) = (geom.tokens(), geom.feat());
        let mut dx = vec![0.0; inputs[0].numel()];
        for b in 0..geom.batch {
            for t in 0..l {
                for f in 0..feat {
                    dx[(b * l + t) * feat + f] = g[geom.image_index(b, t, f)];
                }
            }
        }
        sink.accumulate(&inputs[0], dx);
    }
}

#[derive(Clone, Copy)]
struct MergeGeom {
    batch: usize,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
}

impl MergeGeom {
    /// Source index in the fine grid for one element of the merged
    /// coarse grid; shared by merge forward and unmerge backward.
    fn fine_index(&self, b: usize, coarse: usize, f: usize) -> usize {
        let wo = self.grid_w / 2;
        let (y, x) = (coarse / wo, coarse % wo);
        let q = f / self.channels;
        let c = f % self.channels;
        let (dy, dx) = (q / 2, q % 2);
        let token = (2 * y + dy) * self.grid_w + 2 * x + dx;
        (b * self.grid_h * self.grid_w + token) * self.channels + c
    }
}

struct Merge2x2Backward {
    geom: MergeGeom,
}
impl OpBackward for Merge2x2Backward {
    fn name(&self) -> &'static str {
        "merge2x2"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        let geom = self.geom;
        let lo = (geom.grid_h / 2) * (geom.grid_w / 2);
        let feat = 4 * geom.channels;
        let mut dx = vec![0.0; inputs[0].numel()];
        for b in 0..geom.batch {
            for t in 0..lo {
                for f in 0..feat {
                    dx[geom.fine_index(b, t, f)] = g[(b * lo + t) * feat + f];
                }
            }
        }
        sink.accumulate(&inputs[0], dx);
    }
}

struct Unmerge2x2Backward {
    geom: MergeGeom,
}
impl OpBackward for Unmerge2x2Backward {
    fn name(&self) -> &'static str {
        "unmerge2x2"
    }
    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut GradSink) {
        // unmerge maps coarse (h, w, C) -> fine (2h, 2w, C/4); its
        // backward gathers the fine grad back into coarse layout using
        // the same bijection as merge over the *output* geometry.
        let geom = self.geom;
        let lo = (geom.grid_h / 2) * (geom.grid_w / 2);
        let feat = 4 * geom.channels;
        let mut dx = vec![0.0; inputs[0].numel()];
        for b in 0..geom.batch {
            for t in 0..lo {
                for f in 0..feat {
                    dx[(b * lo + t) * feat + f] = g[geom.fine_index(b, t, f)];
                }
            }
        }
        sink.accumulate(&inputs[0], dx);
    }
}

// ── public op surface ────────────────────────────────────────────────

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(AddBackward),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(SubBackward),
        )
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(MulBackward),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(NegBackward),
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(ScaleBackward { factor }),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(
            data.clone(),
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(ExpBackward { out: data }),
        )
    }

    /// Swish/SiLU activation x * sigmoid(x).
    pub fn silu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(SiluBackward),
        )
    }

    /// ln(1 + e^x) with overflow guards; strictly positive output.
    pub fn softplus(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| softplus(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(SoftplusBackward),
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let total = self.data().iter().sum();
        Tensor::from_op(
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(SumBackward { n }),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                shape: self.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![total / n as f64],
            vec![1],
            vec![self.clone()],
            Box::new(MeanBackward { n }),
        )
    }

    /// Mean of squared residuals, the scalar (1/n) * sum((a - b)^2).
    pub fn mean_sq_error(&self, other: &Tensor) -> Result<Tensor> {
        let d = self.sub(other)?;
        d.mul(&d)?.mean()
    }

    /// `self` (.., K) times `rhs` (K, N); leading dims of `self` fold
    /// into rows.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "matmul",
                shape: rhs.shape().to_vec(),
                reason: "rhs must be 2-D".into(),
            });
        }
        let k = last_dim("matmul", self)?;
        let (rk, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != rk {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let rows = self.numel() / k;
        let data = matmul_raw(&self.data(), &rhs.data(), rows, k, n);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Tensor::from_op(
            data,
            shape,
            vec![self.clone(), rhs.clone()],
            Box::new(MatmulBackward { rows, k, n }),
        )
    }

    /// Adds a length-C bias to every row of a (.., C) tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = last_dim("add_bias", self)?;
        if bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let rows = self.numel() / c;
        let b = bias.data();
        let mut data = self.to_vec();
        for r in 0..rows {
            for (x, bv) in data[r * c..(r + 1) * c].iter_mut().zip(b.iter()) {
                *x += bv;
            }
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(AddBiasBackward { rows, cols: c }),
        )
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose2d",
                shape: self.shape().to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let data = transpose_raw(&self.data(), r, c);
        Tensor::from_op(
            data,
            vec![c, r],
            vec![self.clone()],
            Box::new(TransposeBackward { rows: r, cols: c }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot reshape {} elements", self.numel()),
            });
        }
        Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(ReshapeBackward),
        )
    }

    /// Concatenates along the last dimension; leading dims must match.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let ca = last_dim("concat_cols", self)?;
        let cb = last_dim("concat_cols", other)?;
        let lead_a = &self.shape()[..self.shape().len() - 1];
        let lead_b = &other.shape()[..other.shape().len() - 1];
        if lead_a != lead_b {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let rows = self.numel() / ca;
        let a = self.data();
        let b = other.data();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&a[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b[r * cb..(r + 1) * cb]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(ConcatColsBackward { rows, ca, cb }),
        )
    }

    /// (B, C) -> (B, L, C): repeats each row over `tokens` positions.
    pub fn broadcast_tokens(&self, tokens: usize) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "broadcast_tokens",
                shape: self.shape().to_vec(),
                reason: "expected (batch, channels)".into(),
            });
        }
        let (batch, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = Vec::with_capacity(batch * tokens * c);
        for b in 0..batch {
            for _ in 0..tokens {
                data.extend_from_slice(&src[b * c..(b + 1) * c]);
            }
        }
        Tensor::from_op(
            data,
            vec![batch, tokens, c],
            vec![self.clone()],
            Box::new(BroadcastTokensBackward {
                batch,
                tokens,
                cols: c,
            }),
        )
    }

    /// Normalizes the last dimension to zero mean / unit variance,
    /// then applies the affine pair (gamma, beta).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = last_dim("layer_norm", self)?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / c;
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![0.0; rows * c];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mu: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = istd;
            for cc in 0..c {
                data[r * c + cc] = (row[cc] - mu) * istd * gm[cc] + bt[cc];
            }
        }
        drop(x);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(LayerNormBackward {
                rows,
                cols: c,
                mean,
                inv_std,
            }),
        )
    }

    /// Depthwise causal 1-D convolution over the token dimension of a
    /// (B, L, C) tensor. Weight is (C, K), bias (C); positions before
    /// the sequence start are zero-padded, so output t only sees
    /// inputs at positions <= t.
    pub fn conv1d_causal(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(Error::InvalidShape {
                op: "conv1d",
                shape: self.shape().to_vec(),
                reason: "expected (batch, tokens, channels)".into(),
            });
        }
        let (bsz, l, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if weight.shape().len() != 2 || weight.shape()[0] != c {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let k = weight.shape()[1];
        if k == 0 || k > l {
            return Err(Error::InvalidShape {
                op: "conv1d",
                shape: weight.shape().to_vec(),
                reason: format!("kernel length {k} must be in [1, sequence length {l}]"),
            });
        }
        if bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let x = self.data();
        let w = weight.data();
        let bv = bias.data();
        let mut data = vec![0.0; bsz * l * c];
        for b in 0..bsz {
            for t in 0..l {
                for ch in 0..c {
                    let mut acc = bv[ch];
                    for tap in 0..k.min(t + 1) {
                        acc += w[ch * k + tap] * x[(b * l + (t - tap)) * c + ch];
                    }
                    data[(b * l + t) * c + ch] = acc;
                }
            }
        }
        drop(x);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(Conv1dBackward {
                batch: bsz,
                tokens: l,
                channels: c,
                kernel: k,
            }),
        )
    }

    /// (B, Cin, H, W) -> (B*L, p^2*Cin): each non-overlapping p x p
    /// patch becomes one row, patches in row-major grid order.
    pub fn im2patches(&self, patch: usize) -> Result<Tensor> {
        if self.shape().len() != 4 {
            return Err(Error::InvalidShape {
                op: "im2patches",
                shape: self.shape().to_vec(),
                reason: "expected (batch, channels, height, width)".into(),
            });
        }
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::InvalidShape {
                op: "im2patches",
                shape: self.shape().to_vec(),
                reason: format!("spatial extent not divisible by patch size {patch}"),
            });
        }
        let geom = PatchGeom {
            batch: b,
            channels: c,
            height: h,
            width: w,
            patch,
        };
        let (l, feat) = (geom.tokens(), geom.feat());
        let x = self.data();
        let mut data = vec![0.0; b * l * feat];
        for bi in 0..b {
            for t in 0..l {
                for f in 0..feat {
                    data[(bi * l + t) * feat + f] = x[geom.image_index(bi, t, f)];
                }
            }
        }
        drop(x);
        Tensor::from_op(
            data,
            vec![b * l, feat],
            vec![self.clone()],
            Box::new(Im2PatchesBackward { geom }),
        )
    }

    /// Inverse of [`Tensor::im2patches`]: rows of p^2*Cout features
    /// reassemble into (B, Cout, H, W).
    pub fn patches2im(
        &self,
        patch: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "patches2im",
                shape: self.shape().to_vec(),
                reason: "expected (rows, features)".into(),
            });
        }
        let feat = patch * patch * channels;
        let l = (height / patch) * (width / patch);
        if patch == 0
            || height % patch != 0
            || width % patch != 0
            || self.shape()[1] != feat
            || self.shape()[0] % l != 0
        {
            return Err(Error::InvalidShape {
                op: "patches2im",
                shape: self.shape().to_vec(),
                reason: format!("incompatible with patch {patch}, target {channels}x{height}x{width}"),
            });
        }
        let b = self.shape()[0] / l;
        let geom = PatchGeom {
            batch: b,
            channels,
            height,
            width,
            patch,
        };
        let x = self.data();
        let mut data = vec![0.0; b * channels * height * width];
        for bi in 0..b {
            for t in 0..l {
                for f in 0..feat {
                    data[geom.image_index(bi, t, f)] = x[(bi * l + t) * feat + f];
                }
            }
        }
        drop(x);
        Tensor::from_op(
            data,
            vec![b, channels, height, width],
            vec![self.clone()],
            Box::new(Patches2ImBackward { geom }),
        )
    }

    /// Merges 2x2 neighborhoods of a (B, L, C) token grid (L = h*w)
    /// into (B, L/4, 4C); the four children concatenate in row-major
    /// order.
    pub fn merge2x2(&self, grid_h: usize, grid_w: usize) -> Result<Tensor> {
        let (b, l, c) = self.expect_tokens("merge2x2", grid_h, grid_w)?;
        if grid_h % 2 != 0 || grid_w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "merge2x2",
                shape: self.shape().to_vec(),
                reason: format!("grid {grid_h}x{grid_w} must have even extents"),
            });
        }
        let geom = MergeGeom {
            batch: b,
            grid_h,
            grid_w,
            channels: c,
        };
        let lo = l / 4;
        let feat = 4 * c;
        let x = self.data();
        let mut data = vec![0.0; b * lo * feat];
        for bi in 0..b {
            for t in 0..lo {
                for f in 0..feat {
                    data[(bi * lo + t) * feat + f] = x[geom.fine_index(bi, t, f)];
                }
            }
        }
        drop(x);
        Tensor::from_op(
            data,
            vec![b, lo, feat],
            vec![self.clone()],
            Box::new(Merge2x2Backward { geom }),
        )
    }

    /// Inverse layout of [`Tensor::merge2x2`]: (B, L, C) on an (h, w)
    /// grid becomes (B, 4L, C/4) on a (2h, 2w) grid.
    pub fn unmerge2x2(&self, grid_h: usize, grid_w: usize) -> Result<Tensor> {
        let (b, l, c) = self.expect_tokens("unmerge2x2", grid_h, grid_w)?;
        if c % 4 != 0 {
            return Err(Error::InvalidShape {
                op: "unmerge2x2",
                shape: self.shape().to_vec(),
                reason: "channel count must be divisible by 4".into(),
            });
        }
        let c4 = c / 4;
        // The output's fine grid is (2h, 2w); reuse the merge bijection
        // over that geometry.
        let geom = MergeGeom {
            batch: b,
            grid_h: 2 * grid_h,
            grid_w: 2 * grid_w,
            channels: c4,
        };
        let x = self.data();
        let mut data = vec![0.0; b * 4 * l * c4];
        for bi in 0..b {
            for t in 0..l {
                for f in 0..c {
                    data[geom.fine_index(bi, t, f)] = x[(bi * l + t) * c + f];
                }
            }
        }
        drop(x);
        Tensor::from_op(
            data,
            vec![b, 4 * l, c4],
            vec![self.clone()],
            Box::new(Unmerge2x2Backward { geom }),
        )
    }

    fn expect_tokens(
        &self,
        op: &'static str,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<(usize, usize, usize)> {
        if self.shape().len() != 3 {
            return Err(Error::InvalidShape {
                op,
                shape: self.shape().to_vec(),
                reason: "expected (batch, tokens, channels)".into(),
            });
        }
        let (b, l, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if l != grid_h * grid_w {
            return Err(Error::InvalidShape {
                op,
                shape: self.shape().to_vec(),
                reason: format!("token count {l} does not match grid {grid_h}x{grid_w}"),
            });
        }
        Ok((b, l, c))
    }
}
