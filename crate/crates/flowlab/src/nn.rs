//! A small fully-connected velocity network with reverse-mode
//! differentiation in both inputs and parameters, exact divergence, and a
//! bias-corrected Adam optimizer. Everything is f64 and deterministic.
//!
//! The network maps `(t, x [, w])` to a d-vector. Time enters through a
//! sinusoidal feature block `[t, sin(2 pi k t), cos(2 pi k t)]_{k<=K}`
//! concatenated with `x` (and the condition `w` for conditional nets).
//! The activation is `x * sigmoid(x)`: the divergence and adjoint paths
//! differentiate the field twice, so a C^2 nonlinearity is required and
//! piecewise-linear activations are out.
//!
//! Parameters live in one flat vector (row-major weight matrices followed
//! by biases, layer by layer); gradients use the same layout. The last
//! layer is zero-initialized so a fresh network is exactly the zero field.

use crate::rng::{Seed, Stream};
use crate::{Error, Result};

/// Exact-divergence (and adjoint) dimension limit.
pub const MAX_EXACT_DIVERGENCE_DIM: usize = 16;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FLOWNN1\0";
const MAX_WIDTH: usize = 1 << 20;
const MAX_PARAMS: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `z * sigmoid(z)`, smooth and C^infinity.
    Silu,
}

impl Activation {
    fn id(self) -> u32 {
        0
    }

    fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Activation::Silu),
            _ => Err(Error::Parse(format!("unknown activation id {id}"))),
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// silu value and first derivative.
#[inline]
fn act_d1(z: f64) -> (f64, f64) {
    let s = sigmoid(z);
    (z * s, s * (1.0 + z * (1.0 - s)))
}

/// silu value, first and second derivative.
#[inline]
fn act_d2(z: f64) -> (f64, f64, f64) {
    let s = sigmoid(z);
    let sp = s * (1.0 - s);
    let a = z * s;
    let d1 = s + z * sp;
    let d2 = sp * (2.0 + z * (1.0 - 2.0 * s));
    (a, d1, d2)
}

/// Fully-connected velocity network over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// Full layer widths: input, hidden..., output.
    widths: Vec<usize>,
    k_time: usize,
    data_dim: usize,
    cond_dim: usize,
    activation: Activation,
    /// `(weight_offset, bias_offset)` per layer into `params`.
    offsets: Vec<(usize, usize)>,
    params: Vec<f64>,
}

/// Sinusoidal time features `[t, sin(2 pi k t), cos(2 pi k t)]`, dimension
/// `1 + 2K`.
pub fn time_features(t: f64, k_time: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 1 + 2 * k_time);
    out[0] = t;
    for k in 1..=k_time {
        let a = 2.0 * std::f64::consts::PI * k as f64 * t;
        out[2 * k - 1] = a.sin();
        out[2 * k] = a.cos();
    }
}

impl Mlp {
    /// Fresh network. Hidden weights use uniform fan-in init
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` from the stream
    /// `(seed, "nn/init")`; biases are zero; the last layer is entirely
    /// zero so the initial field is 0.
    pub fn new(
        data_dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        k_time: usize,
        seed: Seed,
    ) -> Result<Mlp> {
        if data_dim == 0 {
            return Err(Error::InvalidArgument("data_dim must be positive".into()));
        }
        let input = 1 + 2 * k_time + data_dim + cond_dim;
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);

        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut count = 0usize;
        for l in 0..widths.len() - 1 {
            let (w_in, w_out) = (widths[l], widths[l + 1]);
            offsets.push((count, count + w_in * w_out));
            count += (w_in + 1) * w_out;
        }

        let mut params = vec![0.0; count];
        let mut stream = Stream::new(seed, "nn/init");
        let n_layers = widths.len() - 1;
        for l in 0..n_layers.saturating_sub(1) {
            let (w_in, w_out) = (widths[l], widths[l + 1]);
            let bound = 1.0 / (w_in as f64).sqrt();
            let (w_off, _) = offsets[l];
            for p in params[w_off..w_off + w_in * w_out].iter_mut() {
                *p = stream.uniform_in(-bound, bound);
            }
        }
        // last layer stays zero

        Ok(Mlp {
            widths,
            k_time,
            data_dim,
            cond_dim,
            activation: Activation::Silu,
            offsets,
            params,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn k_time(&self) -> usize {
        self.k_time
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn feature_dim(&self) -> usize {
        1 + 2 * self.k_time
    }

    fn assemble_input(&self, t: f64, x: &[f64], cond: Option<&[f64]>) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.data_dim);
        debug_assert_eq!(cond.map_or(0, |c| c.len()), self.cond_dim);
        let mut input = vec![0.0; self.widths[0]];
        time_features(t, self.k_time, &mut input[..self.feature_dim()]);
        input[self.feature_dim()..self.feature_dim() + self.data_dim].copy_from_slice(x);
        if let Some(c) = cond {
            input[self.feature_dim() + self.data_dim..].copy_from_slice(c);
        }
        input
    }

    fn matvec(&self, l: usize, a: &[f64], out: &mut [f64]) {
        let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
        let (w_off, b_off) = self.offsets[l];
        for i in 0..w_out {
            let row = &self.params[w_off + i * w_in..w_off + (i + 1) * w_in];
            let mut acc = self.params[b_off + i];
            for (w, aj) in row.iter().zip(a) {
                acc += w * aj;
            }
            out[i] = acc;
        }
    }

    /// `out[j] += sum_i W[i][j] c[i]` (transposed matvec, no bias).
    fn matvec_t(&self, l: usize, c: &[f64], out: &mut [f64]) {
        let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
        let (w_off, _) = self.offsets[l];
        for i in 0..w_out {
            let ci = c[i];
            if ci == 0.0 {
                continue;
            }
            let row = &self.params[w_off + i * w_in..w_off + (i + 1) * w_in];
            for (o, w) in out.iter_mut().zip(row) {
                *o += ci * w;
            }
        }
    }

    /// Deterministic forward pass `v(t, x [, w])`.
    pub fn forward(&self, t: f64, x: &[f64], cond: Option<&[f64]>) -> Vec<f64> {
        let n_layers = self.widths.len() - 1;
        let mut a = self.assemble_input(t, x, cond);
        for l in 0..n_layers {
            let mut z = vec![0.0; self.widths[l + 1]];
            self.matvec(l, &a, &mut z);
            if l + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = act_d1(*v).0;
                }
            }
            a = z;
        }
        a
    }

    /// Forward pass keeping per-layer inputs and pre-activations for
    /// backward passes.
    fn forward_trace(&self, input: Vec<f64>) -> Trace {
        let n_layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        acts.push(input);
        for l in 0..n_layers {
            let mut z = vec![0.0; self.widths[l + 1]];
            self.matvec(l, &acts[l], &mut z);
            pre.push(z.clone());
            if l + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = act_d1(*v).0;
                }
            }
            acts.push(z);
        }
        Trace { acts, pre }
    }

    /// Vector-Jacobian product in the parameters: accumulates
    /// `cotangent^T (d v / d theta)` into `grad_out` and returns the full
    /// input cotangent.
    pub fn vjp_accumulate(
        &self,
        t: f64,
        x: &[f64],
        cond: Option<&[f64]>,
        cotangent: &[f64],
        grad_out: &mut [f64],
    ) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), self.params.len());
        let trace = self.forward_trace(self.assemble_input(t, x, cond));
        let n_layers = self.widths.len() - 1;
        let mut bar = cotangent.to_vec();
        for l in (0..n_layers).rev() {
            // through the activation (hidden layers only)
            if l + 1 < n_layers {
                for (b, z) in bar.iter_mut().zip(&trace.pre[l]) {
                    *b *= act_d1(*z).1;
                }
            }
            // parameter gradients and propagation through the linear part
            let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
            let (w_off, b_off) = self.offsets[l];
            let a = &trace.acts[l];
            for i in 0..w_out {
                let bi = bar[i];
                grad_out[b_off + i] += bi;
                if bi != 0.0 {
                    let g = &mut grad_out[w_off + i * w_in..w_off + (i + 1) * w_in];
                    for (gj, aj) in g.iter_mut().zip(a) {
                        *gj += bi * aj;
                    }
                }
            }
            let mut prev = vec![0.0; w_in];
            self.matvec_t(l, &bar, &mut prev);
            bar = prev;
        }
        bar
    }

    /// `cotangent^T (d v / d theta)` as a fresh gradient vector.
    pub fn vjp_params(&self, t: f64, x: &[f64], cond: Option<&[f64]>, cotangent: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.vjp_accumulate(t, x, cond, cotangent, &mut grad);
        grad
    }

    /// `cotangent^T (d v / d x)`: gradient with respect to the spatial
    /// input block only.
    pub fn vjp_input(&self, t: f64, x: &[f64], cond: Option<&[f64]>, cotangent: &[f64]) -> Vec<f64> {
        let mut sink = vec![0.0; self.params.len()];
        let full = self.vjp_accumulate(t, x, cond, cotangent, &mut sink);
        full[self.feature_dim()..self.feature_dim() + self.data_dim].to_vec()
    }

    /// Jacobian-vector product in the spatial input: directional derivative
    /// of the output along `tangent_x` (time and condition held fixed).
    pub fn jvp_input(&self, t: f64, x: &[f64], cond: Option<&[f64]>, tangent_x: &[f64]) -> Vec<f64> {
        let n_layers = self.widths.len() - 1;
        let mut a = self.assemble_input(t, x, cond);
        let mut da = vec![0.0; self.widths[0]];
        da[self.feature_dim()..self.feature_dim() + self.data_dim].copy_from_slice(tangent_x);
        for l in 0..n_layers {
            let mut z = vec![0.0; self.widths[l + 1]];
            self.matvec(l, &a, &mut z);
            let mut dz = vec![0.0; self.widths[l + 1]];
            // dz = W da (no bias)
            let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
            let (w_off, _) = self.offsets[l];
            for i in 0..w_out {
                let row = &self.params[w_off + i * w_in..w_off + (i + 1) * w_in];
                let mut acc = 0.0;
                for (w, dj) in row.iter().zip(&da) {
                    acc += w * dj;
                }
                dz[i] = acc;
            }
            if l + 1 < n_layers {
                for (zi, di) in z.iter_mut().zip(dz.iter_mut()) {
                    let (a_val, d1) = act_d1(*zi);
                    *di *= d1;
                    *zi = a_val;
                }
            }
            a = z;
            da = dz;
        }
        da
    }

    /// Exact spatial divergence via `d` Jacobian-vector products.
    pub fn divergence(&self, t: f64, x: &[f64], cond: Option<&[f64]>) -> Result<f64> {
        if self.data_dim > MAX_EXACT_DIVERGENCE_DIM {
            return Err(Error::InvalidArgument(format!(
                "exact divergence limited to d <= {MAX_EXACT_DIVERGENCE_DIM}, got {}",
                self.data_dim
            )));
        }
        let mut div = 0.0;
        let mut e = vec![0.0; self.data_dim];
        for i in 0..self.data_dim {
            e[i] = 1.0;
            div += self.jvp_input(t, x, cond, &e)[i];
            e[i] = 0.0;
        }
        Ok(div)
    }

    /// Accumulates `scale * grad_x(div v)` into `grad_x_out` and
    /// `scale * grad_theta(div v)` into `grad_theta_out`.
    ///
    /// Reverse pass over the tangent-augmented forward computation, once per
    /// spatial coordinate. Needs the second derivative of the activation.
    pub fn divergence_grad_accumulate(
        &self,
        t: f64,
        x: &[f64],
        cond: Option<&[f64]>,
        scale: f64,
        grad_x_out: &mut [f64],
        grad_theta_out: &mut [f64],
    ) -> Result<()> {
        if self.data_dim > MAX_EXACT_DIVERGENCE_DIM {
            return Err(Error::InvalidArgument(format!(
                "exact divergence limited to d <= {MAX_EXACT_DIVERGENCE_DIM}, got {}",
                self.data_dim
            )));
        }
        let n_layers = self.widths.len() - 1;
        let trace = self.forward_trace(self.assemble_input(t, x, cond));
        let feat = self.feature_dim();

        for coord in 0..self.data_dim {
            // forward tangent pass along e_coord
            let mut tangents: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
            let mut da = vec![0.0; self.widths[0]];
            da[feat + coord] = 1.0;
            tangents.push(da);
            for l in 0..n_layers {
                let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
                let (w_off, _) = self.offsets[l];
                let mut dz = vec![0.0; w_out];
                for i in 0..w_out {
                    let row = &self.params[w_off + i * w_in..w_off + (i + 1) * w_in];
                    let mut acc = 0.0;
                    for (w, dj) in row.iter().zip(&tangents[l]) {
                        acc += w * dj;
                    }
                    dz[i] = acc;
                }
                if l + 1 < n_layers {
                    for (di, z) in dz.iter_mut().zip(&trace.pre[l]) {
                        *di *= act_d1(*z).1;
                    }
                }
                tangents.push(dz);
            }

            // reverse pass: cotangent on the tangent output selects the
            // diagonal entry `coord`; value-channel cotangent starts at 0
            let mut bar = vec![0.0; self.widths[n_layers]]; // value cotangent
            let mut dbar = vec![0.0; self.widths[n_layers]]; // tangent cotangent
            dbar[coord] = scale;
            for l in (0..n_layers).rev() {
                let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
                let (w_off, b_off) = self.offsets[l];
                if l + 1 < n_layers {
                    // through a_{l+1} = act(z_l), d_{l+1} = act'(z_l) dz_l:
                    // dz_bar = act'(z) * dbar
                    // z_bar  = act'(z) * bar + act''(z) * dz * dbar
                    let dz_pre: Vec<f64> = {
                        // recompute pre-activation tangent dz_l from the
                        // stored post-activation tangent d_{l+1}
                        // d_{l+1} = act'(z) dz => dz = d_{l+1} / act'(z) is
                        // unstable; instead recompute dz = W d_l directly.
                        let mut dz = vec![0.0; w_out];
                        for i in 0..w_out {
                            let row = &self.params[w_off + i * w_in..w_off + (i + 1) * w_in];
                            let mut acc = 0.0;
                            for (w, dj) in row.iter().zip(&tangents[l]) {
                                acc += w * dj;
                            }
                            dz[i] = acc;
                        }
                        dz
                    };
                    for i in 0..w_out {
                        let (_, d1, d2) = act_d2(trace.pre[l][i]);
                        let new_dbar = d1 * dbar[i];
                        let new_bar = d1 * bar[i] + d2 * dz_pre[i] * dbar[i];
                        dbar[i] = new_dbar;
                        bar[i] = new_bar;
                    }
                }
                // linear layer: z = W a + b, dz = W d
                // W_bar += bar (x) a + dbar (x) d;  b_bar += bar
                let a = &trace.acts[l];
                let d = &tangents[l];
                for i in 0..w_out {
                    let bi = bar[i];
                    let dbi = dbar[i];
                    grad_theta_out[b_off + i] += bi;
                    if bi != 0.0 || dbi != 0.0 {
                        let g = &mut grad_theta_out[w_off + i * w_in..w_off + (i + 1) * w_in];
                        for j in 0..w_in {
                            g[j] += bi * a[j] + dbi * d[j];
                        }
                    }
                }
                // a_bar = W^T bar; d_bar = W^T dbar
                let mut prev_bar = vec![0.0; w_in];
                let mut prev_dbar = vec![0.0; w_in];
                self.matvec_t(l, &bar, &mut prev_bar);
                self.matvec_t(l, &dbar, &mut prev_dbar);
                bar = prev_bar;
                dbar = prev_dbar;
            }
            for (o, b) in grad_x_out.iter_mut().zip(&bar[feat..feat + self.data_dim]) {
                *o += b;
            }
        }
        Ok(())
    }

    /// Serializes architecture and parameters (magic, widths, activation id,
    /// time-feature count, condition size, then little-endian f64 weights).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.activation.id().to_le_bytes());
        out.extend_from_slice(&(self.k_time as u32).to_le_bytes());
        out.extend_from_slice(&(self.cond_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Parses and validates a checkpoint produced by [`Mlp::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Mlp> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("bad checkpoint magic".into()));
        }
        let n_widths = cursor.u32()? as usize;
        if !(2..=64).contains(&n_widths) {
            return Err(Error::Parse(format!("implausible layer count {n_widths}")));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            let w = cursor.u32()? as usize;
            if w == 0 || w > MAX_WIDTH {
                return Err(Error::Parse(format!("width {w} out of range")));
            }
            widths.push(w);
        }
        let activation = Activation::from_id(cursor.u32()?)?;
        let k_time = cursor.u32()? as usize;
        let cond_dim = cursor.u32()? as usize;
        let param_count = cursor.u64()? as usize;

        let data_dim = *widths.last().expect("nonempty");
        let expected_input = 1 + 2 * k_time + data_dim + cond_dim;
        if widths[0] != expected_input {
            return Err(Error::Parse(format!(
                "input width {} inconsistent with features {} + data {} + cond {}",
                widths[0],
                1 + 2 * k_time,
                data_dim,
                cond_dim
            )));
        }
        let mut offsets = Vec::with_capacity(n_widths - 1);
        let mut count = 0usize;
        for l in 0..n_widths - 1 {
            let (w_in, w_out) = (widths[l], widths[l + 1]);
            let c = w_in
                .checked_mul(w_out)
                .and_then(|wo| wo.checked_add(w_out))
                .ok_or_else(|| Error::Parse("parameter count overflow".into()))?;
            offsets.push((count, count + w_in * w_out));
            count = count
                .checked_add(c)
                .ok_or_else(|| Error::Parse("parameter count overflow".into()))?;
        }
        if count != param_count || count > MAX_PARAMS {
            return Err(Error::Parse(format!(
                "parameter count {param_count} does not match architecture ({count})"
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let v = f64::from_le_bytes(cursor.take(8)?.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(Error::Parse("non-finite parameter".into()));
            }
            params.push(v);
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after parameters".into()));
        }
        Ok(Mlp {
            widths,
            k_time,
            data_dim,
            cond_dim,
            activation,
            offsets,
            params,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Mlp> {
        Mlp::from_bytes(&std::fs::read(path)?)
    }
}

struct Trace {
    /// Post-activation values per layer, `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pre: Vec<Vec<f64>>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Adam optimizer state (bias-corrected first/second moments).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(param_count: usize, step_size: f64) -> AdamState {
        AdamState {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `theta` against `gradient`.
    pub fn step(&mut self, theta: &mut [f64], gradient: &[f64]) -> Result<()> {
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged);
        }
        debug_assert_eq!(theta.len(), self.m.len());
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            let g = gradient[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= self.step_size * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
