//! A minimal differentiable approximator for the backward-programming
//! sub-problems: three affine maps with batch normalisation on the input and
//! after every affine map (four normalisation layers in total), ReLU between
//! the hidden stages, exact reverse-mode gradients, and an Adam optimizer.
//!
//! The topology is fixed:
//!
//! ```text
//! x (B x 1) -> bn0 -> fc1 -> bn1 -> relu -> fc2 -> bn2 -> relu -> fc3 -> bn3 -> out
//! ```
//!
//! with hidden width `D = D_out + 10` by convention of the solvers. All
//! parameters live in one flat `Vec<f64>` (layout documented on
//! [`ParamLayout`]), which is also the checkpoint wire format.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::ldg::{ImplicitShift, LdgOperator};
use crate::march::DbdpBatch;
use crate::{Error, Result};

/// Whether a forward pass uses batch statistics (and updates the running
/// ones) or the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Offsets of every tensor inside the flat parameter vector.
///
/// Order: `bn0.gamma, bn0.beta, fc1.w (D x 1), fc1.b, bn1.gamma, bn1.beta,
/// fc2.w (D x D), fc2.b, bn2.gamma, bn2.beta, fc3.w (D_out x D), fc3.b,
/// bn3.gamma, bn3.beta`. Affine weights are row-major `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub hidden: usize,
    pub out: usize,
    ends: [usize; 14],
}

impl ParamLayout {
    pub fn new(hidden: usize, out: usize) -> Self {
        let sizes = [
            1,               // bn0.gamma
            1,               // bn0.beta
            hidden,          // fc1.w
            hidden,          // fc1.b
            hidden,          // bn1.gamma
            hidden,          // bn1.beta
            hidden * hidden, // fc2.w
            hidden,          // fc2.b
            hidden,          // bn2.gamma
            hidden,          // bn2.beta
            out * hidden,    // fc3.w
            out,             // fc3.b
            out,             // bn3.gamma
            out,             // bn3.beta
        ];
        let mut ends = [0usize; 14];
        let mut acc = 0;
        for (e, s) in ends.iter_mut().zip(sizes) {
            acc += s;
            *e = acc;
        }
        ParamLayout { hidden, out, ends }
    }

    pub fn len(&self) -> usize {
        self.ends[13]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn range(&self, i: usize) -> core::ops::Range<usize> {
        let start = if i == 0 { 0 } else { self.ends[i - 1] };
        start..self.ends[i]
    }
}

const BN0_GAMMA: usize = 0;
const FC1_W: usize = 2;
const FC1_B: usize = 3;
const BN1_GAMMA: usize = 4;
const FC2_W: usize = 6;
const FC2_B: usize = 7;
const BN2_GAMMA: usize = 8;
const FC3_W: usize = 10;
const FC3_B: usize = 11;
const BN3_GAMMA: usize = 12;

/// Running statistics layout: mean then variance for each of the four
/// normalisation layers, in network order.
fn running_len(hidden: usize, out: usize) -> usize {
    2 * (1 + hidden + hidden + out)
}

/// The feedforward approximator mapping a scalar state to a coefficient
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    layout: ParamLayout,
    params: Vec<f64>,
    running: Vec<f64>,
    momentum: f64,
    eps: f64,
}

/// Cached intermediates of one training-mode forward pass.
pub struct ForwardTape {
    batch: usize,
    h0: Vec<f64>,
    xhat0: Vec<f64>,
    istd0: Vec<f64>,
    xhat1: Vec<f64>,
    istd1: Vec<f64>,
    a1: Vec<f64>,
    xhat2: Vec<f64>,
    istd2: Vec<f64>,
    a2: Vec<f64>,
    xhat3: Vec<f64>,
    istd3: Vec<f64>,
}

impl MlpNet {
    /// Fresh network: weights uniform in `±1/sqrt(fan_in)`, biases zero,
    /// batch-norm scale 1 / shift 0, running stats (0, 1).
    pub fn init(out_dim: usize, seed: u64) -> Self {
        let hidden = out_dim + 10;
        let layout = ParamLayout::new(hidden, out_dim);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        params[layout.range(BN0_GAMMA)][0] = 1.0;
        for g in &mut params[layout.range(BN1_GAMMA)] {
            *g = 1.0;
        }
        for g in &mut params[layout.range(BN2_GAMMA)] {
            *g = 1.0;
        }
        for g in &mut params[layout.range(BN3_GAMMA)] {
            *g = 1.0;
        }
        let scale1 = 1.0; // fan_in = 1
        for w in &mut params[layout.range(FC1_W)] {
            *w = rng.gen_range(-scale1..scale1);
        }
        let scale2 = 1.0 / libm::sqrt(hidden as f64);
        for w in &mut params[layout.range(FC2_W)] {
            *w = rng.gen_range(-scale2..scale2);
        }
        for w in &mut params[layout.range(FC3_W)] {
            *w = rng.gen_range(-scale2..scale2);
        }
        let mut running = vec![0.0; running_len(hidden, out_dim)];
        // variances start at 1
        let mut off = 0;
        for feat in [1, hidden, hidden, out_dim] {
            for v in &mut running[off + feat..off + 2 * feat] {
                *v = 1.0;
            }
            off += 2 * feat;
        }
        MlpNet {
            layout,
            params,
            running,
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layout.out
    }

    pub fn hidden_dim(&self) -> usize {
        self.layout.hidden
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[f64] {
        &self.running
    }

    /// All parameters and running statistics are finite.
    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite()) && self.running.iter().all(|r| r.is_finite())
    }

    fn running_offsets(&self) -> [usize; 4] {
        let h = self.layout.hidden;
        [0, 2, 2 + 2 * h, 2 + 4 * h]
    }

    /// Replace the running statistics with the batch statistics of `x`
    /// under the current (frozen) parameters. Run after training so the
    /// inference-mode function agrees with the train-mode one on the input
    /// law; without this, the EMA lags the parameter drift, which the
    /// `1/sqrt(eps)` factor blows up wherever a layer's batch variance is
    /// tiny (e.g. the constant state at t = 0).
    pub fn refresh_running_stats(&mut self, x: &[f64], batch: usize) -> Result<()> {
        let saved = self.momentum;
        self.momentum = 0.0;
        let res = self.forward_train(x, batch);
        self.momentum = saved;
        res.map(|_| ())
    }

    /// Spec-flavoured entry point dispatching on `mode`.
    pub fn forward(&mut self, x: &[f64], batch: usize, mode: Mode) -> Result<Vec<f64>> {
        match mode {
            Mode::Infer => Ok(self.infer(x, batch)),
            Mode::Train => self.forward_train(x, batch).map(|(y, _)| y),
        }
    }

    /// Inference pass with frozen running statistics; never mutates.
    pub fn infer(&self, x: &[f64], batch: usize) -> Vec<f64> {
        assert_eq!(x.len(), batch, "input is one feature per sample");
        let h = self.layout.hidden;
        let out = self.layout.out;
        let roff = self.running_offsets();
        let mut h0 = vec![0.0; batch];
        self.bn_infer(x, &mut h0, batch, 1, BN0_GAMMA, roff[0]);
        let mut z1 = vec![0.0; batch * h];
        self.affine(&h0, &mut z1, batch, 1, h, FC1_W, FC1_B);
        let mut h1 = vec![0.0; batch * h];
        self.bn_infer(&z1, &mut h1, batch, h, BN1_GAMMA, roff[1]);
        relu(&mut h1);
        let mut z2 = vec![0.0; batch * h];
        self.affine(&h1, &mut z2, batch, h, h, FC2_W, FC2_B);
        let mut h2 = vec![0.0; batch * h];
        self.bn_infer(&z2, &mut h2, batch, h, BN2_GAMMA, roff[2]);
        relu(&mut h2);
        let mut z3 = vec![0.0; batch * out];
        self.affine(&h2, &mut z3, batch, h, out, FC3_W, FC3_B);
        let mut y = vec![0.0; batch * out];
        self.bn_infer(&z3, &mut y, batch, out, BN3_GAMMA, roff[3]);
        y
    }

    /// Training pass: batch statistics, running-stat update, and a tape for
    /// the backward pass.
    pub fn forward_train(&mut self, x: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardTape)> {
        if batch < 2 {
            return Err(Error::InvalidBatch(alloc::format!(
                "training batch of {batch} has no batch statistics (need >= 2)"
            )));
        }
        assert_eq!(x.len(), batch, "input is one feature per sample");
        let h = self.layout.hidden;
        let out = self.layout.out;
        let roff = self.running_offsets();

        let mut h0 = vec![0.0; batch];
        let mut xhat0 = vec![0.0; batch];
        let mut istd0 = vec![0.0; 1];
        self.bn_train(x, &mut h0, &mut xhat0, &mut istd0, batch, 1, BN0_GAMMA, roff[0]);

        let mut z1 = vec![0.0; batch * h];
        self.affine(&h0, &mut z1, batch, 1, h, FC1_W, FC1_B);
        let mut h1 = vec![0.0; batch * h];
        let mut xhat1 = vec![0.0; batch * h];
        let mut istd1 = vec![0.0; h];
        self.bn_train(&z1, &mut h1, &mut xhat1, &mut istd1, batch, h, BN1_GAMMA, roff[1]);
        relu(&mut h1);
        let a1 = h1;

        let mut z2 = vec![0.0; batch * h];
        self.affine(&a1, &mut z2, batch, h, h, FC2_W, FC2_B);
        let mut h2 = vec![0.0; batch * h];
        let mut xhat2 = vec![0.0; batch * h];
        let mut istd2 = vec![0.0; h];
        self.bn_train(&z2, &mut h2, &mut xhat2, &mut istd2, batch, h, BN2_GAMMA, roff[2]);
        relu(&mut h2);
        let a2 = h2;

        let mut z3 = vec![0.0; batch * out];
        self.affine(&a2, &mut z3, batch, h, out, FC3_W, FC3_B);
        let mut y = vec![0.0; batch * out];
        let mut xhat3 = vec![0.0; batch * out];
        let mut istd3 = vec![0.0; out];
        self.bn_train(&z3, &mut y, &mut xhat3, &mut istd3, batch, out, BN3_GAMMA, roff[3]);

        let tape = ForwardTape {
            batch,
            h0,
            xhat0,
            istd0,
            xhat1,
            istd1,
            a1,
            xhat2,
            istd2,
            a2,
            xhat3,
            istd3,
        };
        Ok((y, tape))
    }

    /// Reverse pass: fold `d_out` (B x D_out) back into a flat gradient
    /// vector congruent with the parameters.
    pub fn backward(&self, tape: &ForwardTape, d_out: &[f64], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let h = self.layout.hidden;
        let out = self.layout.out;
        let batch = tape.batch;

        let mut d = d_out.to_vec();
        self.bn_backward(&mut d, &tape.xhat3, &tape.istd3, batch, out, BN3_GAMMA, grads);
        let mut da2 = vec![0.0; batch * h];
        self.affine_backward(&tape.a2, &d, &mut da2, batch, h, out, FC3_W, FC3_B, grads);
        relu_backward(&mut da2, &tape.a2);

        let mut d = da2;
        self.bn_backward(&mut d, &tape.xhat2, &tape.istd2, batch, h, BN2_GAMMA, grads);
        let mut da1 = vec![0.0; batch * h];
        self.affine_backward(&tape.a1, &d, &mut da1, batch, h, h, FC2_W, FC2_B, grads);
        relu_backward(&mut da1, &tape.a1);

        let mut d = da1;
        self.bn_backward(&mut d, &tape.xhat1, &tape.istd1, batch, h, BN1_GAMMA, grads);
        let mut dh0 = vec![0.0; batch];
        self.affine_backward(&tape.h0, &d, &mut dh0, batch, 1, h, FC1_W, FC1_B, grads);

        self.bn_backward(&mut dh0, &tape.xhat0, &tape.istd0, batch, 1, BN0_GAMMA, grads);
        // dh0 now holds d(loss)/d(input); there is nothing upstream.
    }

    fn affine(
        &self,
        x: &[f64],
        y: &mut [f64],
        batch: usize,
        in_dim: usize,
        out_dim: usize,
        w_idx: usize,
        b_idx: usize,
    ) {
        let w = &self.params[self.layout.range(w_idx)];
        let b = &self.params[self.layout.range(b_idx)];
        for bi in 0..batch {
            let xr = &x[bi * in_dim..(bi + 1) * in_dim];
            let yr = &mut y[bi * out_dim..(bi + 1) * out_dim];
            for o in 0..out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut s = b[o];
                for (wi, xi) in row.iter().zip(xr) {
                    s += wi * xi;
                }
                yr[o] = s;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_backward(
        &self,
        x: &[f64],
        dy: &[f64],
        dx: &mut [f64],
        batch: usize,
        in_dim: usize,
        out_dim: usize,
        w_idx: usize,
        b_idx: usize,
        grads: &mut [f64],
    ) {
        let w = &self.params[self.layout.range(w_idx)];
        {
            let dw = &mut grads[self.layout.range(w_idx)];
            for bi in 0..batch {
                let xr = &x[bi * in_dim..(bi + 1) * in_dim];
                let dyr = &dy[bi * out_dim..(bi + 1) * out_dim];
                for o in 0..out_dim {
                    let g = dyr[o];
                    if g != 0.0 {
                        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
                        for (di, xi) in row.iter_mut().zip(xr) {
                            *di += g * xi;
                        }
                    }
                }
            }
        }
        {
            let db = &mut grads[self.layout.range(b_idx)];
            for bi in 0..batch {
                let dyr = &dy[bi * out_dim..(bi + 1) * out_dim];
                for (dbo, g) in db.iter_mut().zip(dyr) {
                    *dbo += g;
                }
            }
        }
        for bi in 0..batch {
            let dxr = &mut dx[bi * in_dim..(bi + 1) * in_dim];
            let dyr = &dy[bi * out_dim..(bi + 1) * out_dim];
            dxr.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..out_dim {
                let g = dyr[o];
                if g != 0.0 {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    for (dxi, wi) in dxr.iter_mut().zip(row) {
                        *dxi += g * wi;
                    }
                }
            }
        }
    }

    fn bn_infer(
        &self,
        x: &[f64],
        y: &mut [f64],
        batch: usize,
        feat: usize,
        gamma_idx: usize,
        run_off: usize,
    ) {
        let gamma = &self.params[self.layout.range(gamma_idx)];
        let beta = &self.params[self.layout.range(gamma_idx + 1)];
        let mean = &self.running[run_off..run_off + feat];
        let var = &self.running[run_off + feat..run_off + 2 * feat];
        for bi in 0..batch {
            for f in 0..feat {
                let xi = x[bi * feat + f];
                let xhat = (xi - mean[f]) / libm::sqrt(var[f] + self.eps);
                y[bi * feat + f] = gamma[f] * xhat + beta[f];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_train(
        &mut self,
        x: &[f64],
        y: &mut [f64],
        xhat: &mut [f64],
        istd: &mut [f64],
        batch: usize,
        feat: usize,
        gamma_idx: usize,
        run_off: usize,
    ) {
        let bf = batch as f64;
        for f in 0..feat {
            let mut mean = 0.0;
            for bi in 0..batch {
                mean += x[bi * feat + f];
            }
            mean /= bf;
            let mut var = 0.0;
            for bi in 0..batch {
                let d = x[bi * feat + f] - mean;
                var += d * d;
            }
            var /= bf; // biased, as in the normalisation itself
            let inv = 1.0 / libm::sqrt(var + self.eps);
            istd[f] = inv;
            for bi in 0..batch {
                xhat[bi * feat + f] = (x[bi * feat + f] - mean) * inv;
            }
            let m = self.momentum;
            self.running[run_off + f] = m * self.running[run_off + f] + (1.0 - m) * mean;
            self.running[run_off + feat + f] =
                m * self.running[run_off + feat + f] + (1.0 - m) * var;
        }
        let gamma = &self.params[self.layout.range(gamma_idx)];
        let beta = &self.params[self.layout.range(gamma_idx + 1)];
        for bi in 0..batch {
            for f in 0..feat {
                y[bi * feat + f] = gamma[f] * xhat[bi * feat + f] + beta[f];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        dy: &mut [f64],
        xhat: &[f64],
        istd: &[f64],
        batch: usize,
        feat: usize,
        gamma_idx: usize,
        grads: &mut [f64],
    ) {
        let gamma = &self.params[self.layout.range(gamma_idx)];
        let bf = batch as f64;
        for f in 0..feat {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for bi in 0..batch {
                let g = dy[bi * feat + f];
                sum_dy += g;
                sum_dy_xhat += g * xhat[bi * feat + f];
            }
            grads[self.layout.range(gamma_idx).start + f] += sum_dy_xhat;
            grads[self.layout.range(gamma_idx + 1).start + f] += sum_dy;
            let gi = gamma[f] * istd[f];
            let mean_dy = sum_dy / bf;
            let mean_dy_xhat = sum_dy_xhat / bf;
            for bi in 0..batch {
                let idx = bi * feat + f;
                dy[idx] = gi * (dy[idx] - mean_dy - xhat[idx] * mean_dy_xhat);
            }
        }
    }

    /// Serialise to the documented flat binary layout: magic, dims header,
    /// hyperparameters, then the parameter and running-stat arrays as
    /// little-endian f64.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"BSPDENN1");
        for dim in [1u32, self.layout.hidden as u32, self.layout.out as u32, 0u32] {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        out.extend_from_slice(&self.momentum.to_le_bytes());
        out.extend_from_slice(&self.eps.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&(self.running.len() as u64).to_le_bytes());
        for r in &self.running {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decode one network, returning it and the number of bytes consumed.
    pub fn decode_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != b"BSPDENN1" {
            return Err(Error::invalid("bad checkpoint magic"));
        }
        let _in_dim = cur.u32()?;
        let hidden = cur.u32()? as usize;
        let out_dim = cur.u32()? as usize;
        let _reserved = cur.u32()?;
        let momentum = cur.f64()?;
        let eps = cur.f64()?;
        let layout = ParamLayout::new(hidden, out_dim);
        let n_params = cur.u64()? as usize;
        if n_params != layout.len() {
            return Err(Error::invalid("checkpoint parameter count mismatch"));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(cur.f64()?);
        }
        let n_running = cur.u64()? as usize;
        if n_running != running_len(hidden, out_dim) {
            return Err(Error::invalid("checkpoint running-stat count mismatch"));
        }
        let mut running = Vec::with_capacity(n_running);
        for _ in 0..n_running {
            running.push(cur.f64()?);
        }
        Ok((
            MlpNet {
                layout,
                params,
                running,
                momentum,
                eps,
            },
            cur.pos,
        ))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (net, used) = Self::decode_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::invalid("trailing bytes after checkpoint"));
        }
        Ok(net)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::invalid("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the gradient wherever the stored activation was clamped.
fn relu_backward(dx: &mut [f64], activation: &[f64]) {
    for (d, a) in dx.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[f64] {
        &self.m
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut AdamState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), st.m.len());
    st.step += 1;
    let b1 = st.beta1;
    let b2 = st.beta2;
    let bc1 = 1.0 - libm::pow(b1, st.step as f64);
    let bc2 = 1.0 - libm::pow(b2, st.step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
        let mhat = st.m[i] / bc1;
        let vhat = st.v[i] / bc2;
        params[i] -= st.lr * mhat / (libm::sqrt(vhat) + st.eps);
    }
}

/// The one-step backward-Euler training loss and its exact gradients.
///
/// For each sample `b` with state `w_b`, increment `dW_b` and target `y_b`:
///
/// ```text
/// e_b  = U(w_b) - F_h(t, w_b, U(w_b), Psi(w_b)) dt + Psi(w_b) dW_b - y_b,
/// loss = mean_b |e_b|^2,
/// ```
///
/// differentiated through both networks and through the generator via its
/// vector-Jacobian product.
///
/// When `value_shift` is given, the value approximator is the network
/// composed with the fixed linear solve `U = (I - dt A)^{-1} net(w)`. The
/// loss as a functional of `(U, Psi)` is unchanged; the reparametrisation
/// absorbs the stiff linear generator part whose raw least-squares Hessian
/// has condition `(1 + dt |lambda|max)^2` and stalls first-order training.
pub fn loss_and_grad(
    op: &LdgOperator,
    net_u: &mut MlpNet,
    net_psi: &mut MlpNet,
    batch: &DbdpBatch,
    value_shift: Option<&ImplicitShift>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let dof = op.dof();
    assert_eq!(net_u.out_dim(), dof, "value net output must match the space");
    assert_eq!(net_psi.out_dim(), dof);
    let b = batch.len();
    let (u_out, tape_u) = net_u.forward_train(batch.states(), b)?;
    let (psi_out, tape_psi) = net_psi.forward_train(batch.states(), b)?;

    let mut u_val = u_out;
    if let Some(shift) = value_shift {
        for s in 0..b {
            shift.solve_in_place(&mut u_val[s * dof..(s + 1) * dof]);
        }
    }

    let mut ws = op.make_workspace();
    let mut f_buf = vec![0.0; dof];
    let mut resid = vec![0.0; b * dof];
    let mut loss = 0.0;
    for s in 0..b {
        let w = batch.states()[s];
        let dw = batch.increments()[s];
        let u_s = &u_val[s * dof..(s + 1) * dof];
        let psi_s = &psi_out[s * dof..(s + 1) * dof];
        op.generator_into(batch.t(), w, u_s, psi_s, &mut f_buf, &mut ws)?;
        let y_s = &batch.targets()[s * dof..(s + 1) * dof];
        let r = &mut resid[s * dof..(s + 1) * dof];
        for i in 0..dof {
            let e = u_s[i] - batch.dt() * f_buf[i] + psi_s[i] * dw - y_s[i];
            r[i] = e;
            loss += e * e;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::TrainingDivergence {
            stage: batch.stage(),
            step: 0,
            last_loss: f64::NAN,
        });
    }

    // d(loss)/dU_b = (2/B)(e_b - dt (dF/du)^T e_b), similarly for Psi with
    // the extra dW_b e_b term; the value gradient is pulled back through
    // the implicit solve when one is in use.
    let mut d_u = vec![0.0; b * dof];
    let mut d_psi = vec![0.0; b * dof];
    let mut gu = vec![0.0; dof];
    let mut gpsi = vec![0.0; dof];
    let scale = 2.0 / b as f64;
    for s in 0..b {
        let w = batch.states()[s];
        let dw = batch.increments()[s];
        let u_s = &u_val[s * dof..(s + 1) * dof];
        let psi_s = &psi_out[s * dof..(s + 1) * dof];
        let r = &resid[s * dof..(s + 1) * dof];
        op.generator_vjp(batch.t(), w, u_s, psi_s, r, &mut gu, &mut gpsi, &mut ws);
        let du = &mut d_u[s * dof..(s + 1) * dof];
        let dp = &mut d_psi[s * dof..(s + 1) * dof];
        for i in 0..dof {
            du[i] = scale * (r[i] - batch.dt() * gu[i]);
            dp[i] = scale * (r[i] * dw - batch.dt() * gpsi[i]);
        }
        if let Some(shift) = value_shift {
            shift.solve_transpose_in_place(du);
        }
    }

    let mut grads_u = vec![0.0; net_u.n_params()];
    let mut grads_psi = vec![0.0; net_psi.n_params()];
    net_u.backward(&tape_u, &d_u, &mut grads_u);
    net_psi.backward(&tape_psi, &d_psi, &mut grads_psi);
    Ok((loss, grads_u, grads_psi))
}
