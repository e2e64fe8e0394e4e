//! Time-conditioned denoiser `s(x, t)`.
//!
//! Layout of the fixed layer graph:
//!
//! ```text
//! temb = sinusoid(t)
//! [attention block, when enabled]
//!   U = tokens(x) + pos + (temb · attn.time.w + attn.time.b)   per token
//!   A = softmax(U Wq (U Wk)ᵀ / sqrt(p))                          row-wise
//!   x' = flatten(U + A U Wv)
//! h_1 = silu(x' W_1 + b_1 + temb · time.w)
//! h_k = silu(h_{k-1} W_k + b_k)
//! eps_hat = h_last W_out + b_out [+ skip.gain[t] · x, when enabled]
//! ```
//!
//! The mid-block feature is the post-activation of hidden layer `mid_index`.

use serde::{Deserialize, Serialize};

use super::mlp::{mlp_backward, mlp_forward, MlpCache, MlpSpec};
use super::params::{init_weight, ParamStore};
use crate::error::ensure;
use crate::numeric::{softmax_unchecked, Matrix, RngStream};
use crate::Result;

const NET: &str = "net";
const TIME_W: &str = "time.w";
const ATTN_POS: &str = "attn.pos";
const ATTN_TIME_W: &str = "attn.time.w";
const ATTN_TIME_B: &str = "attn.time.b";
const ATTN_Q: &str = "attn.q";
const ATTN_K: &str = "attn.k";
const ATTN_V: &str = "attn.v";
const SKIP_GAIN: &str = "skip.gain";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embedding_dim: usize,
    /// Which hidden layer is tapped as the mid-block feature.
    pub mid_index: usize,
    /// Number of timesteps the embedding is defined on (`t < time_steps`).
    pub time_steps: usize,
    /// Token count of the self-attention block; `None` disables it.
    #[serde(default)]
    pub attention_tokens: Option<usize>,
    /// Adds a learned per-timestep scalar multiple of the input to the output.
    #[serde(default)]
    pub skip: bool,
}

impl DenoiserArch {
    /// U-shaped perceptron whose narrowest layer is the tap.
    pub fn bottleneck(input_dim: usize, wide: usize, narrow: usize, time_steps: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![wide, narrow, wide],
            time_embedding_dim: 16,
            mid_index: 1,
            time_steps,
            attention_tokens: None,
            skip: false,
        }
    }

    pub fn with_skip(mut self) -> Self {
        self.skip = true;
        self
    }

    pub fn with_attention(mut self, tokens: usize) -> Self {
        self.attention_tokens = Some(tokens);
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim > 0, InvalidArgument, "input_dim must be positive");
        ensure!(
            !self.hidden_dims.is_empty(),
            InvalidArgument,
            "denoiser needs hidden layers"
        );
        ensure!(
            self.mid_index < self.hidden_dims.len(),
            InvalidArgument,
            "mid_index {} out of range for {} hidden layers",
            self.mid_index,
            self.hidden_dims.len()
        );
        ensure!(
            self.time_embedding_dim >= 2 && self.time_embedding_dim % 2 == 0,
            InvalidArgument,
            "time embedding dim must be even and >= 2, got {}",
            self.time_embedding_dim
        );
        ensure!(self.time_steps >= 1, InvalidArgument, "time_steps must be positive");
        if let Some(tokens) = self.attention_tokens {
            ensure!(
                tokens > 0 && self.input_dim % tokens == 0,
                InvalidArgument,
                "{tokens} tokens do not evenly split input dim {}",
                self.input_dim
            );
        }
        self.mlp_spec().validate()
    }

    pub fn mid_width(&self) -> usize {
        self.hidden_dims[self.mid_index]
    }

    pub fn token_dim(&self) -> Option<usize> {
        self.attention_tokens.map(|n| self.input_dim / n)
    }

    fn mlp_spec(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim, self.hidden_dims.clone(), self.input_dim)
    }

    /// Freshly initialised parameters.
    pub fn init(&self, rng: &mut RngStream) -> Result<ParamStore> {
        self.validate()?;
        let mut p = ParamStore::new();
        if let (Some(n), Some(d)) = (self.attention_tokens, self.token_dim()) {
            p.insert(ATTN_POS, Matrix::from_fn(n, d, |_, _| 0.1 * rng.normal()))?;
            p.insert(ATTN_TIME_W, init_weight(rng, self.time_embedding_dim, d))?;
            p.insert(ATTN_TIME_B, Matrix::zeros(1, d))?;
            p.insert(ATTN_Q, init_weight(rng, d, d))?;
            p.insert(ATTN_K, init_weight(rng, d, d))?;
            p.insert(ATTN_V, init_weight(rng, d, d))?;
        }
        p.insert(TIME_W, init_weight(rng, self.time_embedding_dim, self.hidden_dims[0]))?;
        self.mlp_spec().init_params(NET, rng, &mut p)?;
        if self.skip {
            p.insert(SKIP_GAIN, Matrix::zeros(1, self.time_steps))?;
        }
        Ok(p)
    }
}

/// Sinusoidal embedding: `[sin(t f_k) for k] ++ [cos(t f_k) for k]` with
/// `f_k = 10000^(-k / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    ensure!(
        dim >= 2 && dim % 2 == 0,
        InvalidArgument,
        "time embedding dim must be even, got {dim}"
    );
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let phase = t as f64 * freq;
        out[k] = phase.sin();
        out[half + k] = phase.cos();
    }
    Ok(out)
}

fn embed_batch(t: &[usize], dim: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(t.len(), dim);
    for (r, &ti) in t.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&time_embedding(ti, dim)?);
    }
    Ok(m)
}

/// Batch-averaged attention weights (`tokens x tokens`); rows sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub map: Matrix,
}

impl AttentionRecord {
    pub fn tokens(&self) -> usize {
        self.map.rows()
    }

    /// `1 - mean diagonal weight`.
    pub fn off_diagonal_mass(&self) -> f64 {
        let n = self.map.rows();
        1.0 - self.map.trace() / n as f64
    }
}

#[derive(Debug, Clone)]
struct AttentionCache {
    /// Per sample: token matrix U (n x p), attention A (n x n), values V = U Wv.
    u: Vec<Matrix>,
    a: Vec<Matrix>,
    v: Vec<Matrix>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct DenoiserCache {
    x: Matrix,
    t: Vec<usize>,
    temb: Matrix,
    attn: Option<AttentionCache>,
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_hat: Matrix,
    pub z_mid: Matrix,
    pub attn: Option<AttentionRecord>,
    pub cache: DenoiserCache,
}

fn check_inputs(arch: &DenoiserArch, x: &Matrix, t: &[usize]) -> Result<()> {
    ensure!(
        x.cols() == arch.input_dim,
        Shape,
        "denoiser input has {} columns, arch expects {}",
        x.cols(),
        arch.input_dim
    );
    ensure!(
        t.len() == x.rows(),
        Shape,
        "{} timesteps for a batch of {}",
        t.len(),
        x.rows()
    );
    if let Some(&bad) = t.iter().find(|&&ti| ti >= arch.time_steps) {
        return Err(crate::Error::InvalidArgument(format!(
            "timestep {bad} outside [0, {})",
            arch.time_steps
        )));
    }
    Ok(())
}

/// Forward pass on a batch with one timestep per row.
pub fn denoiser_forward(params: &ParamStore, arch: &DenoiserArch, x: &Matrix, t: &[usize]) -> Result<DenoiserOutput> {
    check_inputs(arch, x, t)?;
    let temb = embed_batch(t, arch.time_embedding_dim)?;
    let (mlp_in, attn_cache) = match arch.attention_tokens {
        Some(n) => {
            let (out, cache) = attention_forward(params, n, x, &temb)?;
            (out, Some(cache))
        }
        None => (x.clone(), None),
    };
    let cond = temb.matmul(params.get(TIME_W)?)?;
    let mlp = mlp_forward(params, NET, &arch.mlp_spec(), &mlp_in, Some(&cond))?;
    let attn = attn_cache.as_ref().map(|c| {
        let n = c.a[0].rows();
        let mut map = Matrix::zeros(n, n);
        for a in &c.a {
            map.axpy(1.0, a).expect("attention maps share a shape");
        }
        AttentionRecord {
            map: map.scale(1.0 / c.a.len() as f64),
        }
    });
    let mut eps_hat = mlp.output().clone();
    if arch.skip {
        let gain = params.get(SKIP_GAIN)?.as_slice();
        for (r, &ti) in t.iter().enumerate() {
            for (o, &xv) in eps_hat.row_mut(r).iter_mut().zip(x.row(r)) {
                *o += gain[ti] * xv;
            }
        }
    }
    Ok(DenoiserOutput {
        eps_hat,
        z_mid: mlp.hidden(arch.mid_index).clone(),
        attn,
        cache: DenoiserCache {
            x: x.clone(),
            t: t.to_vec(),
            temb,
            attn: attn_cache,
            mlp,
        },
    })
}

fn attention_forward(
    params: &ParamStore,
    tokens: usize,
    x: &Matrix,
    temb: &Matrix,
) -> Result<(Matrix, AttentionCache)> {
    let p = x.cols() / tokens;
    let pos = params.get(ATTN_POS)?;
    let wq = params.get(ATTN_Q)?;
    let wk = params.get(ATTN_K)?;
    let wv = params.get(ATTN_V)?;
    let mut tshift = temb.matmul(params.get(ATTN_TIME_W)?)?;
    tshift.add_row_vector(params.get(ATTN_TIME_B)?.as_slice())?;
    let scale = 1.0 / (p as f64).sqrt();

    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut cache = AttentionCache {
        u: Vec::with_capacity(x.rows()),
        a: Vec::with_capacity(x.rows()),
        v: Vec::with_capacity(x.rows()),
    };
    for b in 0..x.rows() {
        let mut u = Matrix::from_vec(tokens, p, x.row(b).to_vec())?;
        u = u.add(pos)?;
        u.add_row_vector(tshift.row(b))?;
        let q = u.matmul(wq)?;
        let k = u.matmul(wk)?;
        let v = u.matmul(wv)?;
        let mut a = q.matmul_t(&k)?.scale(scale);
        for r in 0..tokens {
            let row = softmax_unchecked(a.row(r));
            a.row_mut(r).copy_from_slice(&row);
        }
        let y = u.add(&a.matmul(&v)?)?;
        y.check_finite("attention block output")?;
        out.row_mut(b).copy_from_slice(y.as_slice());
        cache.u.push(u);
        cache.a.push(a);
        cache.v.push(v);
    }
    Ok((out, cache))
}

/// Backward pass. `d_eps` is the gradient at the output; `d_mid` optionally
/// injects a gradient at the mid-block feature. Returns parameter gradients.
pub fn denoiser_backward(
    params: &ParamStore,
    arch: &DenoiserArch,
    cache: &DenoiserCache,
    d_eps: Option<&Matrix>,
    d_mid: Option<&Matrix>,
) -> Result<ParamStore> {
    let mut grads = params.zeros_like();
    let taps: Vec<(usize, &Matrix)> = d_mid.map(|g| (arch.mid_index, g)).into_iter().collect();
    let back = mlp_backward(params, NET, &arch.mlp_spec(), &cache.mlp, d_eps, &taps, &mut grads)?;
    let d_cond = back.d_cond.expect("denoiser has hidden layers");
    grads.accumulate(TIME_W, &cache.temb.t_matmul(&d_cond)?)?;
    if let (true, Some(d)) = (arch.skip, d_eps) {
        let mut d_gain = Matrix::zeros(1, arch.time_steps);
        for (r, &ti) in cache.t.iter().enumerate() {
            d_gain[(0, ti)] += d.row(r).iter().zip(cache.x.row(r)).map(|(a, b)| a * b).sum::<f64>();
        }
        grads.accumulate(SKIP_GAIN, &d_gain)?;
    }
    if let Some(ac) = &cache.attn {
        attention_backward(params, ac, &cache.temb, &back.d_input, &mut grads)?;
    }
    Ok(grads)
}

fn attention_backward(
    params: &ParamStore,
    cache: &AttentionCache,
    temb: &Matrix,
    d_out: &Matrix,
    grads: &mut ParamStore,
) -> Result<()> {
    let wq = params.get(ATTN_Q)?;
    let wk = params.get(ATTN_K)?;
    let wv = params.get(ATTN_V)?;
    let (tokens, p) = cache.u[0].shape();
    let scale = 1.0 / (p as f64).sqrt();
    let mut d_pos = Matrix::zeros(tokens, p);
    let mut d_wq = Matrix::zeros(p, p);
    let mut d_wk = Matrix::zeros(p, p);
    let mut d_wv = Matrix::zeros(p, p);
    let mut d_shift = Matrix::zeros(temb.rows(), p);
    for b in 0..d_out.rows() {
        let (u, a, v) = (&cache.u[b], &cache.a[b], &cache.v[b]);
        let dy = Matrix::from_vec(tokens, p, d_out.row(b).to_vec())?;
        let d_a = dy.matmul_t(v)?;
        let d_v = a.t_matmul(&dy)?;
        // softmax backward, row-wise
        let mut d_s = Matrix::zeros(tokens, tokens);
        for r in 0..tokens {
            let inner: f64 = a.row(r).iter().zip(d_a.row(r)).map(|(x, y)| x * y).sum();
            for c in 0..tokens {
                d_s[(r, c)] = a[(r, c)] * (d_a[(r, c)] - inner) * scale;
            }
        }
        let q = u.matmul(wq)?;
        let k = u.matmul(wk)?;
        let d_q = d_s.matmul(&k)?;
        let d_k = d_s.t_matmul(&q)?;
        d_wq.axpy(1.0, &u.t_matmul(&d_q)?)?;
        d_wk.axpy(1.0, &u.t_matmul(&d_k)?)?;
        d_wv.axpy(1.0, &u.t_matmul(&d_v)?)?;
        let mut d_u = dy;
        d_u.axpy(1.0, &d_q.matmul_t(wq)?)?;
        d_u.axpy(1.0, &d_k.matmul_t(wk)?)?;
        d_u.axpy(1.0, &d_v.matmul_t(wv)?)?;
        d_pos.axpy(1.0, &d_u)?;
        d_shift.row_mut(b).copy_from_slice(&d_u.col_sums());
    }
    grads.accumulate(ATTN_POS, &d_pos)?;
    grads.accumulate(ATTN_Q, &d_wq)?;
    grads.accumulate(ATTN_K, &d_wk)?;
    grads.accumulate(ATTN_V, &d_wv)?;
    grads.accumulate(ATTN_TIME_W, &temb.t_matmul(&d_shift)?)?;
    grads.accumulate(ATTN_TIME_B, &Matrix::from_vec(1, p, d_shift.col_sums())?)?;
    Ok(())
}
