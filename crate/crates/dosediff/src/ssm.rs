//! State-space sequence machinery.
//!
//! A continuous linear state-space layer
//!
//! ```text
//! y'(t) = P y(t) + Q u(t),      x(t) = R y(t)
//! ```
//!
//! with diagonal P is discretized per token by the zero-order-hold
//! rule `P_bar = exp(dP)`, `Q_bar = (dP)^-1 (exp(dP) - I) dQ` and then
//! evaluated either as a left-to-right linear recurrence
//! ([`ssm_scan`]) or, when the discrete parameters are constant across
//! tokens, as a causal convolution with the structured kernel
//! `(R Q_bar, R P_bar Q_bar, ..., R P_bar^{N-1} Q_bar)`
//! ([`ssm_conv_kernel`] / [`ssm_conv_apply`]). The two routes agree to
//! round-off and serve as mutual oracles.
//!
//! [`SsmParams`] adds the selective (input-dependent) layer: per-token
//! step size, input and output projections are functions of the token,
//! and the whole layer is differentiable through the fused
//! [`selective_scan`] primitive.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Threshold under which `|delta * p|` switches to the series form of
/// the zero-order-hold input coefficient to avoid cancellation.
const ZOH_SERIES_EPS: f64 = 1e-6;

/// `(exp(delta*p) - 1) / p`, the factor multiplying `Q` in the
/// zero-order-hold rule; series fallback `delta * (1 + delta*p/2)` for
/// small `|delta*p|`.
pub(crate) fn zoh_input_factor(delta: f64, p: f64) -> f64 {
    let z = delta * p;
    if z.abs() < ZOH_SERIES_EPS {
        delta * (1.0 + 0.5 * z)
    } else {
        (z.exp() - 1.0) / p
    }
}

/// Partial derivative of [`zoh_input_factor`] with respect to `p`.
fn zoh_input_factor_dp(delta: f64, p: f64) -> f64 {
    let z = delta * p;
    if z.abs() < ZOH_SERIES_EPS {
        delta * delta * (0.5 + z / 3.0)
    } else {
        let e = z.exp();
        (delta * e * p - (e - 1.0)) / (p * p)
    }
}

/// Per-token discrete state-space coefficients, row-major
/// (tokens x n_state).
#[derive(Debug, Clone)]
pub struct DiscreteSsm {
    pub p_bar: Vec<f64>,
    pub q_bar: Vec<f64>,
    pub tokens: usize,
    pub n_state: usize,
}

impl DiscreteSsm {
    fn token_constant(&self) -> bool {
        let n = self.n_state;
        let (p0, q0) = (&self.p_bar[..n], &self.q_bar[..n]);
        (1..self.tokens).all(|t| {
            self.p_bar[t * n..(t + 1) * n] == *p0 && self.q_bar[t * n..(t + 1) * n] == *q0
        })
    }
}

/// Zero-order-hold discretization of a diagonal state-space system.
///
/// `delta` holds one strictly positive step size per token, `p_diag`
/// the diagonal of the state matrix, `q` the input projection.
pub fn discretize(delta: &[f64], p_diag: &[f64], q: &[f64]) -> Result<DiscreteSsm> {
    if p_diag.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "discretize",
            lhs: vec![p_diag.len()],
            rhs: vec![q.len()],
        });
    }
    for (i, &d) in delta.iter().enumerate() {
        if !(d > 0.0) {
            return Err(Error::NonPositiveDelta { index: i, value: d });
        }
    }
    let n = p_diag.len();
    let tokens = delta.len();
    let mut p_bar = vec![0.0; tokens * n];
    let mut q_bar = vec![0.0; tokens * n];
    for (t, &d) in delta.iter().enumerate() {
        for (j, (&p, &qv)) in p_diag.iter().zip(q.iter()).enumerate() {
            p_bar[t * n + j] = (d * p).exp();
            q_bar[t * n + j] = zoh_input_factor(d, p) * qv;
        }
    }
    Ok(DiscreteSsm {
        p_bar,
        q_bar,
        tokens,
        n_state: n,
    })
}

/// [`discretize`] for a dense state matrix: rejects any nonzero
/// off-diagonal entry, then applies the elementwise diagonal rule.
pub fn discretize_dense(delta: &[f64], p: &[f64], n: usize, q: &[f64]) -> Result<DiscreteSsm> {
    if p.len() != n * n {
        return Err(Error::InvalidShape {
            op: "discretize",
            shape: vec![p.len()],
            reason: format!("state matrix must be {n}x{n}"),
        });
    }
    let mut diag = vec![0.0; n];
    for r in 0..n {
        for c in 0..n {
            let v = p[r * n + c];
            if r == c {
                diag[r] = v;
            } else if v != 0.0 {
                return Err(Error::InvalidShape {
                    op: "discretize",
                    shape: vec![n, n],
                    reason: format!("state matrix is not diagonal: entry ({r}, {c}) = {v}"),
                });
            }
        }
    }
    discretize(delta, &diag, q)
}

/// Left-to-right linear recurrence from a zero initial state:
/// `y_t = P_bar_t . y_(t-1) + Q_bar_t . u_t`, `x_t = R . y_t`.
pub fn ssm_scan(d: &DiscreteSsm, r: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if r.len() != d.n_state || u.len() != d.tokens {
        return Err(Error::ShapeMismatch {
            op: "ssm_scan",
            lhs: vec![d.tokens, d.n_state],
            rhs: vec![u.len(), r.len()],
        });
    }
    let n = d.n_state;
    let mut state = vec![0.0; n];
    let mut out = Vec::with_capacity(d.tokens);
    for (t, &ut) in u.iter().enumerate() {
        let mut xt = 0.0;
        for j in 0..n {
            state[j] = d.p_bar[t * n + j] * state[j] + d.q_bar[t * n + j] * ut;
            xt += r[j] * state[j];
        }
        out.push(xt);
    }
    Ok(out)
}

/// Structured convolution kernel `H_k = R . P_bar^k . Q_bar` for
/// `k = 0..len`. Requires token-constant discrete parameters; for
/// token-varying ones use [`ssm_scan`].
pub fn ssm_conv_kernel(d: &DiscreteSsm, r: &[f64], len: usize) -> Result<Vec<f64>> {
    if r.len() != d.n_state {
        return Err(Error::ShapeMismatch {
            op: "ssm_conv_kernel",
            lhs: vec![d.n_state],
            rhs: vec![r.len()],
        });
    }
    if !d.token_constant() {
        return Err(Error::TokenVaryingKernel);
    }
    let n = d.n_state;
    // powers of the diagonal accumulate in place
    let mut pk_q: Vec<f64> = d.q_bar[..n].to_vec();
    let mut kernel = Vec::with_capacity(len);
    for k in 0..len {
        if k > 0 {
            for j in 0..n {
                pk_q[j] *= d.p_bar[j];
            }
        }
        kernel.push(r.iter().zip(pk_q.iter()).map(|(a, b)| a * b).sum());
    }
    Ok(kernel)
}

/// Causal convolution `x_t = sum_(k=0..t) H_k u_(t-k)`; kernel and
/// input must have equal length.
pub fn ssm_conv_apply(kernel: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if kernel.len() != u.len() {
        return Err(Error::ShapeMismatch {
            op: "ssm_conv_apply",
            lhs: vec![kernel.len()],
            rhs: vec![u.len()],
        });
    }
    let mut out = vec![0.0; u.len()];
    for (t, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &h) in kernel[..=t].iter().enumerate() {
            acc += h * u[t - k];
        }
        *o = acc;
    }
    Ok(out)
}

// ── selective (input-dependent) layer ────────────────────────────────

/// Learned parameters of one selective SSM layer over `channels`
/// parallel scans sharing an `n_state`-dimensional state each.
///
/// The state matrix is input-independent and parameterized as
/// `-exp(log_p)`, so its diagonal stays strictly negative; step size
/// and both projections are per-token functions of the input.
#[derive(Debug)]
pub struct SsmParams {
    /// (n_state) log-magnitudes; effective diagonal is -exp(log_p).
    pub log_p: Tensor,
    /// (channels, n_state) input-to-state projection.
    pub q_proj: Tensor,
    /// (channels, n_state) state-to-output projection.
    pub r_proj: Tensor,
    /// (channels, channels) per-token step-size map.
    pub delta_w: Tensor,
    /// (channels) step-size bias, pre-softplus.
    pub delta_b: Tensor,
    pub n_state: usize,
}

impl SsmParams {
    /// Initializes with the diagonal-real convention `p_n = -(n+1)`
    /// and step sizes softplus-mapped into roughly [1e-3, 1e-1].
    pub fn init(channels: usize, n_state: usize, rng: &mut ChaCha20Rng) -> Result<SsmParams> {
        let log_p: Vec<f64> = (0..n_state).map(|n| ((n + 1) as f64).ln()).collect();
        let proj_std = 1.0 / (channels as f64).sqrt();
        let mut randn = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let q_proj = randn(channels * n_state, proj_std);
        let r_proj = randn(channels * n_state, proj_std);
        let delta_w = randn(channels * channels, 0.5 * proj_std);
        let delta_b: Vec<f64> = (0..channels)
            .map(|_| {
                let dt = 10f64.powf(rng.gen_range(-3.0..-1.0));
                // inverse softplus: ln(e^dt - 1)
                (dt.exp() - 1.0).ln()
            })
            .collect();
        Ok(SsmParams {
            log_p: Tensor::param(log_p, &[n_state])?,
            q_proj: Tensor::param(q_proj, &[channels, n_state])?,
            r_proj: Tensor::param(r_proj, &[channels, n_state])?,
            delta_w: Tensor::param(delta_w, &[channels, channels])?,
            delta_b: Tensor::param(delta_b, &[channels])?,
            n_state,
        })
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.log_p"), self.log_p.clone()));
        out.push((format!("{prefix}.q_proj"), self.q_proj.clone()));
        out.push((format!("{prefix}.r_proj"), self.r_proj.clone()));
        out.push((format!("{prefix}.delta_w"), self.delta_w.clone()));
        out.push((format!("{prefix}.delta_b"), self.delta_b.clone()));
    }

    /// Applies the selective SSM to a (B, L, C) sequence: per token,
    /// step size softplus(delta_w u + delta_b), input projection
    /// `q_proj u`, output projection `r_proj u`, then the per-channel
    /// discretized recurrence. Differentiable end to end.
    pub fn selective_ssm(&self, u: &Tensor) -> Result<Tensor> {
        let delta = u.matmul(&self.delta_w)?.add_bias(&self.delta_b)?.softplus()?;
        let b_tok = u.matmul(&self.q_proj)?;
        let c_tok = u.matmul(&self.r_proj)?;
        let p_diag = self.log_p.exp()?.neg()?;
        selective_scan(u, &delta, &p_diag, &b_tok, &c_tok)
    }
}

/// Fused selective scan primitive.
///
/// Shapes: `u`, `delta` (B, L, C); `p_diag` (N); `b_tok`, `c_tok`
/// (B, L, N). Each channel runs its own recurrence over the shared
/// state diagonal; the backward pass replays the recurrence and
/// back-propagates through both zero-order-hold coefficients.
pub fn selective_scan(
    u: &Tensor,
    delta: &Tensor,
    p_diag: &Tensor,
    b_tok: &Tensor,
    c_tok: &Tensor,
) -> Result<Tensor> {
    if u.shape().len() != 3 {
        return Err(Error::InvalidShape {
            op: "selective_scan",
            shape: u.shape().to_vec(),
            reason: "expected (batch, tokens, channels)".into(),
        });
    }
    let (bsz, l, ch) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    if delta.shape() != u.shape() {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            lhs: u.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let n = p_diag.numel();
    if p_diag.shape().len() != 1 {
        return Err(Error::InvalidShape {
            op: "selective_scan",
            shape: p_diag.shape().to_vec(),
            reason: "state diagonal must be 1-D".into(),
        });
    }
    let want = [bsz, l, n];
    if b_tok.shape() != want || c_tok.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            lhs: b_tok.shape().to_vec(),
            rhs: c_tok.shape().to_vec(),
        });
    }
    {
        let dd = delta.data();
        for (i, &d) in dd.iter().enumerate() {
            if !(d > 0.0) {
                return Err(Error::NonPositiveDelta { index: i, value: d });
            }
        }
    }

    let data = scan_forward(
        &u.data(),
        &delta.data(),
        &p_diag.data(),
        &b_tok.data(),
        &c_tok.data(),
        bsz,
        l,
        ch,
        n,
    );
    Tensor::from_op(
        data,
        vec![bsz, l, ch],
        vec![
            u.clone(),
            delta.clone(),
            p_diag.clone(),
            b_tok.clone(),
            c_tok.clone(),
        ],
        Box::new(ScanBackward {
            batch: bsz,
            tokens: l,
            channels: ch,
            n_state: n,
        }),
    )
}

#[allow(clippy::too_many_arguments)]
fn scan_forward(
    u: &[f64],
    delta: &[f64],
    p: &[f64],
    b: &[f64],
    c: &[f64],
    bsz: usize,
    l: usize,
    ch: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; bsz * l * ch];
    let mut state = vec![0.0; n];
    for bi in 0..bsz {
        for d in 0..ch {
            state.iter_mut().for_each(|s| *s = 0.0);
            for t in 0..l {
                let ui = (bi * l + t) * ch + d;
                let bc = (bi * l + t) * n;
                let dt = delta[ui];
                let mut xt = 0.0;
                for j in 0..n {
                    let pbar = (dt * p[j]).exp();
                    let qbar = zoh_input_factor(dt, p[j]) * b[bc + j];
                    state[j] = pbar * state[j] + qbar * u[ui];
                    xt += c[bc + j] * state[j];
                }
                out[ui] = xt;
            }
        }
    }
    out
}

struct ScanBackward {
    batch: usize,
    tokens: usize,
    channels: usize,
    n_state: usize,
}

impl crate::tensor::OpBackward for ScanBackward {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, g: &[f64], inputs: &[Tensor], sink: &mut crate::tensor::GradSink) {
        let (bsz, l, ch, n) = (self.batch, self.tokens, self.channels, self.n_state);
        let u = inputs[0].data();
        let delta = inputs[1].data();
        let p = inputs[2].data();
        let b = inputs[3].data();
        let c = inputs[4].data();

        let mut du = vec![0.0; bsz * l * ch];
        let mut ddelta = vec![0.0; bsz * l * ch];
        let mut dp = vec![0.0; n];
        let mut db = vec![0.0; bsz * l * n];
        let mut dc = vec![0.0; bsz * l * n];

        // states[t * n + j] = y_j after consuming token t; row l stays
        // unused so index t-1 at t = 0 reads the zero initial state.
        let mut states = vec![0.0; (l + 1) * n];
        let mut adj = vec![0.0; n];

        for bi in 0..bsz {
            for d in 0..ch {
                // replay the forward recurrence for this channel
                for j in 0..n {
                    states[j] = 0.0;
                }
                for t in 0..l {
                    let ui = (bi * l + t) * ch + d;
                    let bc = (bi * l + t) * n;
                    let dt = delta[ui];
                    for j in 0..n {
                        let prev = if t == 0 { 0.0 } else { states[(t - 1) * n + j] };
                        let pbar = (dt * p[j]).exp();
                        let qbar = zoh_input_factor(dt, p[j]) * b[bc + j];
                        states[t * n + j] = pbar * prev + qbar * u[ui];
                    }
                }
                // reverse sweep
                adj.iter_mut().for_each(|a| *a = 0.0);
                for t in (0..l).rev() {
                    let ui = (bi * l + t) * ch + d;
                    let bc = (bi * l + t) * n;
                    let dt = delta[ui];
                    let go = g[ui];
                    for j in 0..n {
                        dc[bc + j] += go * states[t * n + j];
                        adj[j] += go * c[bc + j];
                    }
                    for j in 0..n {
                        let prev = if t == 0 { 0.0 } else { states[(t - 1) * n + j] };
                        let pbar = (dt * p[j]).exp();
                        let f = zoh_input_factor(dt, p[j]);
                        let qbar = f * b[bc + j];
                        let d_pbar = adj[j] * prev;
                        let d_qbar = adj[j] * u[ui];
                        du[ui] += adj[j] * qbar;
                        // d(pbar)/d(delta) = p * pbar; d(f)/d(delta) = pbar
                        ddelta[ui] += d_pbar * p[j] * pbar + d_qbar * pbar * b[bc + j];
                        dp[j] += d_pbar * dt * pbar
                            + d_qbar * zoh_input_factor_dp(dt, p[j]) * b[bc + j];
                        db[bc + j] += d_qbar * f;
                        adj[j] *= pbar;
                    }
                }
            }
        }

        sink.accumulate(&inputs[0], du);
        sink.accumulate(&inputs[1], ddelta);
        sink.accumulate(&inputs[2], dp);
        sink.accumulate(&inputs[3], db);
        sink.accumulate(&inputs[4], dc);
    }
}
