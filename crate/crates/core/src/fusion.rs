//! Instruction-query interaction strategies: concatenation and cross-attention
//! over token-level embedding matrices, with analytic gradients for training.
//!
//! The cross-attention map is
//!
//! ```text
//! A = row_softmax((E_I W_I)(E_Q W_Q1)^T / sqrt(d))
//! O = A (E_Q W_Q2)
//! iq = normalize(mean_rows(O) [ @ proj_iq ])
//! ```
//!
//! Token-level matrices are used because the same map over single vectors
//! degenerates to a 1x1 softmax that ignores the instruction entirely; mean
//! pooling over the `m` output rows produces the final vector.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::embedding::{PooledVector, TokenMatrix};
use crate::error::{Error, Result};

/// Learnable interaction parameters. `proj_p` / `proj_iq` are optional
/// projection heads that give the concatenation interaction a trainable path
/// over frozen providers; both act as the identity when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_i: Array2<f64>,
    pub w_q1: Array2<f64>,
    pub w_q2: Array2<f64>,
    pub proj_p: Option<Array2<f64>>,
    pub proj_iq: Option<Array2<f64>>,
    dim: usize,
}

impl FusionParams {
    pub fn new(
        w_i: Array2<f64>,
        w_q1: Array2<f64>,
        w_q2: Array2<f64>,
        proj_p: Option<Array2<f64>>,
        proj_iq: Option<Array2<f64>>,
    ) -> Result<Self> {
        let d = w_i.nrows();
        for (name, m) in [("w_i", &w_i), ("w_q1", &w_q1), ("w_q2", &w_q2)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: m.nrows().max(m.ncols()),
                    context: format!("fusion matrix {name}"),
                });
            }
        }
        for (name, m) in [("proj_p", &proj_p), ("proj_iq", &proj_iq)] {
            if let Some(m) = m {
                if m.nrows() != d || m.ncols() != d {
                    return Err(Error::DimMismatch {
                        expected: d,
                        got: m.nrows().max(m.ncols()),
                        context: format!("fusion matrix {name}"),
                    });
                }
            }
        }
        let all_finite = w_i.iter().chain(w_q1.iter()).chain(w_q2.iter()).all(|v| v.is_finite())
            && proj_p.iter().flat_map(|m| m.iter()).all(|v| v.is_finite())
            && proj_iq.iter().flat_map(|m| m.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite {
                stage: "fusion params".into(),
            });
        }
        Ok(FusionParams {
            w_i,
            w_q1,
            w_q2,
            proj_p,
            proj_iq,
            dim: d,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Named parameter blocks, in checkpoint order.
    pub fn blocks(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let mut out = vec![
            ("w_i", &self.w_i),
            ("w_q1", &self.w_q1),
            ("w_q2", &self.w_q2),
        ];
        if let Some(p) = &self.proj_p {
            out.push(("proj_p", p));
        }
        if let Some(p) = &self.proj_iq {
            out.push(("proj_iq", p));
        }
        out
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        match name {
            "w_i" => Some(&mut self.w_i),
            "w_q1" => Some(&mut self.w_q1),
            "w_q2" => Some(&mut self.w_q2),
            "proj_p" => self.proj_p.as_mut(),
            "proj_iq" => self.proj_iq.as_mut(),
            _ => None,
        }
    }
}

/// Gradient (or optimizer-moment) storage with the same shape as the params.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w_i: Array2<f64>,
    pub w_q1: Array2<f64>,
    pub w_q2: Array2<f64>,
    pub proj_p: Option<Array2<f64>>,
    pub proj_iq: Option<Array2<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &FusionParams) -> Self {
        let d = params.dim();
        let z = || Array2::zeros((d, d));
        ParamGrads {
            w_i: z(),
            w_q1: z(),
            w_q2: z(),
            proj_p: params.proj_p.as_ref().map(|_| z()),
            proj_iq: params.proj_iq.as_ref().map(|_| z()),
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let mut out = vec![
            ("w_i", &self.w_i),
            ("w_q1", &self.w_q1),
            ("w_q2", &self.w_q2),
        ];
        if let Some(p) = &self.proj_p {
            out.push(("proj_p", p));
        }
        if let Some(p) = &self.proj_iq {
            out.push(("proj_iq", p));
        }
        out
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        match name {
            "w_i" => Some(&mut self.w_i),
            "w_q1" => Some(&mut self.w_q1),
            "w_q2" => Some(&mut self.w_q2),
            "proj_p" => self.proj_p.as_mut(),
            "proj_iq" => self.proj_iq.as_mut(),
            _ => None,
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.w_i += &other.w_i;
        self.w_q1 += &other.w_q1;
        self.w_q2 += &other.w_q2;
        if let (Some(a), Some(b)) = (self.proj_p.as_mut(), other.proj_p.as_ref()) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.proj_iq.as_mut(), other.proj_iq.as_ref()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_i *= factor;
        self.w_q1 *= factor;
        self.w_q2 *= factor;
        if let Some(p) = self.proj_p.as_mut() {
            *p *= factor;
        }
        if let Some(p) = self.proj_iq.as_mut() {
            *p *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, m)| m.iter())
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

/// Trims both parts and joins them with a single space:
/// `"<Instruction> <Query>"`.
pub fn concat_iq(i_text: &str, q_text: &str) -> Result<String> {
    let i = i_text.trim();
    let q = q_text.trim();
    if i.is_empty() || q.is_empty() {
        return Err(Error::InvalidInput(
            "concat_iq requires non-empty instruction and query".into(),
        ));
    }
    Ok(format!("{i} {q}"))
}

/// Saved intermediates from [`cross_attention_forward`].
#[derive(Debug, Clone)]
pub struct FusionCache {
    e_i: Array2<f64>,
    e_q: Array2<f64>,
    x: Array2<f64>,
    y: Array2<f64>,
    attn: Array2<f64>,
    v: Array2<f64>,
    mean_out: Array1<f64>,
    z_norm: f64,
    out: Array1<f64>,
    with_proj: bool,
    dim: usize,
}

impl FusionCache {
    /// Row-stochastic attention matrix (m x n).
    pub fn attention(&self) -> &Array2<f64> {
        &self.attn
    }
}

/// Gradients produced by [`cross_attention_backward`].
#[derive(Debug, Clone)]
pub struct CrossAttnGrads {
    pub w_i: Array2<f64>,
    pub w_q1: Array2<f64>,
    pub w_q2: Array2<f64>,
    pub proj_iq: Option<Array2<f64>>,
}

fn row_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Cross-attention forward pass. See the module docs for the exact map.
pub fn cross_attention_forward(
    e_i: &TokenMatrix,
    e_q: &TokenMatrix,
    params: &FusionParams,
) -> Result<(PooledVector, FusionCache)> {
    forward_inner(e_i, e_q, params, 0.0)
}

/// Identical to the public forward, with a constant added to every attention
/// logit. Softmax shift invariance makes the output independent of the shift;
/// kept as a validation hook.
pub(crate) fn forward_inner(
    e_i: &TokenMatrix,
    e_q: &TokenMatrix,
    params: &FusionParams,
    logit_shift: f64,
) -> Result<(PooledVector, FusionCache)> {
    let d = params.dim();
    if e_i.dim() != d || e_q.dim() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: e_i.dim().max(e_q.dim()),
            context: "cross_attention_forward inputs".into(),
        });
    }
    let x = e_i.rows().dot(&params.w_i);
    let y = e_q.rows().dot(&params.w_q1);
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = x.dot(&y.t());
    logits.mapv_inplace(|v| v * scale + logit_shift);
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "attention logits".into(),
        });
    }
    let attn = row_softmax(&logits);
    let v = e_q.rows().dot(&params.w_q2);
    let o = attn.dot(&v);
    let mean_out = o.mean_axis(Axis(0)).expect("m >= 1");
    let z = match &params.proj_iq {
        Some(p) => mean_out.dot(p),
        None => mean_out.clone(),
    };
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "fusion output".into(),
        });
    }
    let pooled = PooledVector::new(z)?;
    let cache = FusionCache {
        e_i: e_i.rows().clone(),
        e_q: e_q.rows().clone(),
        x,
        y,
        attn,
        v,
        mean_out,
        z_norm: pooled.original_norm(),
        out: pooled.as_array().clone(),
        with_proj: params.proj_iq.is_some(),
        dim: d,
    };
    Ok((pooled, cache))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(r, c)| a[r] * b[c])
}

/// Backward through normalization, the optional projection: given
/// `z = raw [@ proj]`, `out = z / |z|` and `g = dL/d out`, returns
/// (dL/d raw, dL/d proj).
pub(crate) fn normalize_proj_backward(
    raw: &Array1<f64>,
    proj: Option<&Array2<f64>>,
    out: &Array1<f64>,
    z_norm: f64,
    g: &Array1<f64>,
) -> (Array1<f64>, Option<Array2<f64>>) {
    let g_dot_out = g.dot(out);
    let gz = (g - &(out * g_dot_out)) / z_norm;
    match proj {
        Some(p) => {
            let d_proj = outer(raw, &gz);
            let g_raw = p.dot(&gz);
            (g_raw, Some(d_proj))
        }
        None => (gz, None),
    }
}

/// Exact analytic gradients of the cross-attention forward map composed with
/// mean pooling, the optional projection, and normalization.
pub fn cross_attention_backward(
    cache: &FusionCache,
    upstream: &Array1<f64>,
    params: &FusionParams,
) -> Result<CrossAttnGrads> {
    if upstream.len() != cache.dim {
        return Err(Error::CacheMismatch(format!(
            "upstream has dim {}, cache has dim {}",
            upstream.len(),
            cache.dim
        )));
    }
    if params.proj_iq.is_some() != cache.with_proj {
        return Err(Error::CacheMismatch(
            "projection presence differs between cache and params".into(),
        ));
    }
    let (g_u, d_proj) = normalize_proj_backward(
        &cache.mean_out,
        params.proj_iq.as_ref(),
        &cache.out,
        cache.z_norm,
        upstream,
    );
    let m = cache.attn.nrows();
    // d mean over rows: every O row receives g_u / m.
    let g_row = &g_u / m as f64;
    let d_o = Array2::from_shape_fn((m, cache.dim), |(_, c)| g_row[c]);
    let d_attn = d_o.dot(&cache.v.t());
    let d_v = cache.attn.t().dot(&d_o);
    let w_q2 = cache.e_q.t().dot(&d_v);

    // softmax rows: dS = A .* (dA - rowsum(dA .* A))
    let mut d_logits = Array2::zeros(d_attn.raw_dim());
    for r in 0..m {
        let a_row = cache.attn.row(r);
        let da_row = d_attn.row(r);
        let dot: f64 = da_row.dot(&a_row);
        for c in 0..a_row.len() {
            d_logits[[r, c]] = a_row[c] * (da_row[c] - dot);
        }
    }
    let scale = 1.0 / (cache.dim as f64).sqrt();
    d_logits.mapv_inplace(|v| v * scale);

    let d_x = d_logits.dot(&cache.y);
    let d_y = d_logits.t().dot(&cache.x);
    let w_i = cache.e_i.t().dot(&d_x);
    let w_q1 = cache.e_q.t().dot(&d_y);

    Ok(CrossAttnGrads {
        w_i,
        w_q1,
        w_q2,
        proj_iq: d_proj,
    })
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Entries uniform in +/- sqrt(6 / (2 d)).
    UniformFan,
    /// Identity plus `scale` times a uniform-fan draw.
    IdentityNoise { scale: f64 },
}

impl InitScheme {
    pub fn parse(name: &str, noise_scale: f64) -> Result<Self> {
        match name {
            "uniform-fan" => Ok(InitScheme::UniformFan),
            "identity-noise" => Ok(InitScheme::IdentityNoise { scale: noise_scale }),
            other => Err(Error::UnknownScheme(other.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InitScheme::UniformFan => "uniform-fan",
            InitScheme::IdentityNoise { .. } => "identity-noise",
        }
    }
}

fn draw_matrix(rng: &mut ChaCha8Rng, d: usize, scheme: InitScheme) -> Array2<f64> {
    let bound = (6.0 / (2.0 * d as f64)).sqrt();
    let mut m = Array2::zeros((d, d));
    for r in 0..d {
        for c in 0..d {
            let u: f64 = rng.random_range(-bound..bound);
            m[[r, c]] = match scheme {
                InitScheme::UniformFan => u,
                InitScheme::IdentityNoise { scale } => {
                    (if r == c { 1.0 } else { 0.0 }) + scale * u
                }
            };
        }
    }
    m
}

/// Deterministic parameter initialization; draw order is w_i, w_q1, w_q2,
/// then the projection heads when requested.
pub fn init_params(d: usize, seed: u64, scheme: InitScheme, with_proj: bool) -> Result<FusionParams> {
    if d < 2 {
        return Err(Error::InvalidConfig("fusion dim must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_i = draw_matrix(&mut rng, d, scheme);
    let w_q1 = draw_matrix(&mut rng, d, scheme);
    let w_q2 = draw_matrix(&mut rng, d, scheme);
    let (proj_p, proj_iq) = if with_proj {
        (
            Some(draw_matrix(&mut rng, d, scheme)),
            Some(draw_matrix(&mut rng, d, scheme)),
        )
    } else {
        (None, None)
    };
    FusionParams::new(w_i, w_q1, w_q2, proj_p, proj_iq)
}

/// Checkpoint header; `annotations` carries free-form training metadata
/// (variant, interaction, provider settings) in deterministic key order.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub dim: usize,
    pub scheme: String,
    pub seed: u64,
    pub step_count: u64,
    pub has_proj_p: bool,
    pub has_proj_iq: bool,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
}

/// Writes a JSON header line followed by little-endian f64 matrices in block
/// order (w_i, w_q1, w_q2, proj_p, proj_iq).
pub fn save_checkpoint(path: &Path, params: &FusionParams, meta: &CheckpointMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.dim = params.dim();
    meta.has_proj_p = params.proj_p.is_some();
    meta.has_proj_iq = params.proj_iq.is_some();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = serde_json::to_string(&meta)?;
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))?;
    for (_, m) in params.blocks() {
        for v in m.iter() {
            f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FusionParams, CheckpointMeta)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let newline = raw.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint {
        path: path.into(),
        msg: "missing header line".into(),
    })?;
    let meta: CheckpointMeta = serde_json::from_slice(&raw[..newline])?;
    let d = meta.dim;
    let mut offset = newline + 1;
    let mut read_matrix = |raw: &[u8]| -> Result<Array2<f64>> {
        let bytes = d * d * 8;
        let slice = raw.get(offset..offset + bytes).ok_or_else(|| Error::Checkpoint {
            path: path.into(),
            msg: "truncated matrix block".into(),
        })?;
        offset += bytes;
        let mut m = Array2::zeros((d, d));
        for r in 0..d {
            for c in 0..d {
                let i = (r * d + c) * 8;
                m[[r, c]] = f64::from_le_bytes(slice[i..i + 8].try_into().unwrap());
            }
        }
        Ok(m)
    };
    let w_i = read_matrix(&raw)?;
    let w_q1 = read_matrix(&raw)?;
    let w_q2 = read_matrix(&raw)?;
    let proj_p = if meta.has_proj_p {
        Some(read_matrix(&raw)?)
    } else {
        None
    };
    let proj_iq = if meta.has_proj_iq {
        Some(read_matrix(&raw)?)
    } else {
        None
    };
    Ok((FusionParams::new(w_i, w_q1, w_q2, proj_p, proj_iq)?, meta))
}
