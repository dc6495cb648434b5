//! Contrastive objective engine: in-batch NCE with marginal negative
//! sampling, fourteen loss variants, analytic gradients, and a brute-force
//! reference path.
//!
//! For an anchor row `i` in a batch of coherent (passage, instruction, query)
//! rows, three marginal score tables are built:
//!
//! ```text
//! s_P[i][m]  = sim(p_m, iq_{i,i}) / tau     passage marginals
//! s_I[i][j]  = sim(p_i, iq_{j,i}) / tau     instruction marginals
//! s_IQ[i][k] = sim(p_i, iq_{k,k}) / tau     instruction-query marginals
//! ```
//!
//! Univariate variants sum one NCE term per selected table, each with its own
//! marginal denominator; multivariate variants pool the selected marginal
//! sums into a single denominator, so the positive score appears once per
//! selected term. Marginal sampling keeps the cost linear in the batch size
//! per anchor instead of enumerating all index combinations.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::embedding::{PooledVector, Pooling};
use crate::error::{Error, Result};
use crate::fusion::{cross_attention_backward, ParamGrads};
use crate::model::{Interaction, IqCache, PassageCache, ScoringModel};

/// One coherent training row: the passage is the designated relevant passage
/// for the (instruction, query) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRow {
    pub passage: String,
    pub instruction: String,
    pub query: String,
}

/// Which marginal tables a variant contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Terms {
    pub p: bool,
    pub i: bool,
    pub iq: bool,
}

impl Terms {
    pub const fn new(p: bool, i: bool, iq: bool) -> Self {
        Terms { p, i, iq }
    }

    pub fn is_empty(&self) -> bool {
        !(self.p || self.i || self.iq)
    }

    pub fn count(&self) -> usize {
        usize::from(self.p) + usize::from(self.i) + usize::from(self.iq)
    }

    /// The seven non-empty subsets, in canonical order.
    pub fn all_nonempty() -> [Terms; 7] {
        [
            Terms::new(true, false, false),
            Terms::new(false, true, false),
            Terms::new(false, false, true),
            Terms::new(true, true, false),
            Terms::new(true, false, true),
            Terms::new(false, true, true),
            Terms::new(true, true, true),
        ]
    }
}

impl std::fmt::Display for Terms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.p {
            parts.push("P");
        }
        if self.i {
            parts.push("I");
        }
        if self.iq {
            parts.push("IQ");
        }
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Uni,
    Multi,
}

/// A loss variant: family plus a non-empty term subset. Fourteen in total.
/// Serializes as its CLI name, e.g. `"multi:P,I"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LossVariant {
    pub family: Family,
    pub terms: Terms,
}

impl Serialize for LossVariant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LossVariant {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl LossVariant {
    pub const fn new(family: Family, terms: Terms) -> Self {
        LossVariant { family, terms }
    }

    pub fn all() -> Vec<LossVariant> {
        let mut out = Vec::with_capacity(14);
        for family in [Family::Uni, Family::Multi] {
            for terms in Terms::all_nonempty() {
                out.push(LossVariant { family, terms });
            }
        }
        out
    }

    pub fn valid_names() -> String {
        LossVariant::all()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let family = match self.family {
            Family::Uni => "uni",
            Family::Multi => "multi",
        };
        write!(f, "{family}:{}", self.terms)
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::UnknownVariant {
            got: s.to_string(),
            valid: LossVariant::valid_names(),
        };
        let (family_str, terms_str) = s.split_once(':').ok_or_else(err)?;
        let family = match family_str.to_ascii_lowercase().as_str() {
            "uni" => Family::Uni,
            "multi" => Family::Multi,
            _ => return Err(err()),
        };
        let mut terms = Terms::new(false, false, false);
        for tok in terms_str.split(',') {
            match tok.trim().to_ascii_uppercase().as_str() {
                "P" if !terms.p => terms.p = true,
                "I" if !terms.i => terms.i = true,
                "IQ" if !terms.iq => terms.iq = true,
                _ => return Err(err()),
            }
        }
        if terms.is_empty() {
            return Err(err());
        }
        Ok(LossVariant { family, terms })
    }
}

/// Per-anchor marginal score tables for a minibatch, already divided by the
/// temperature. All three tables are `|B| x |B|` and share their diagonal
/// (the positive score, seen from three views).
#[derive(Debug, Clone)]
pub struct ScoreBundle {
    s_p: Array2<f64>,
    s_i: Array2<f64>,
    s_iq: Array2<f64>,
    tau: f64,
}

impl ScoreBundle {
    pub fn new(s_p: Array2<f64>, s_i: Array2<f64>, s_iq: Array2<f64>, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        let b = s_p.nrows();
        for (name, t) in [("s_p", &s_p), ("s_i", &s_i), ("s_iq", &s_iq)] {
            if t.nrows() != b || t.ncols() != b {
                return Err(Error::InvalidInput(format!(
                    "score table {name} is not {b}x{b}"
                )));
            }
        }
        if b == 0 {
            return Err(Error::InvalidInput("empty score bundle".into()));
        }
        for i in 0..b {
            let d1 = (s_p[[i, i]] - s_i[[i, i]]).abs();
            let d2 = (s_p[[i, i]] - s_iq[[i, i]]).abs();
            if d1 > 1e-9 || d2 > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "bundle diagonal disagrees at anchor {i}: the positive score must be shared"
                )));
            }
        }
        Ok(ScoreBundle { s_p, s_i, s_iq, tau })
    }

    pub fn batch_size(&self) -> usize {
        self.s_p.nrows()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn tables(&self) -> [&Array2<f64>; 3] {
        [&self.s_p, &self.s_i, &self.s_iq]
    }

    fn table(&self, which: Table) -> &Array2<f64> {
        match which {
            Table::P => &self.s_p,
            Table::I => &self.s_i,
            Table::Iq => &self.s_iq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Table {
    P,
    I,
    Iq,
}

fn selected_tables(terms: Terms) -> Vec<Table> {
    let mut out = Vec::new();
    if terms.p {
        out.push(Table::P);
    }
    if terms.i {
        out.push(Table::I);
    }
    if terms.iq {
        out.push(Table::Iq);
    }
    out
}

/// `cos(p, iq) / tau`.
pub fn score(p: &PooledVector, iq: &PooledVector, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be > 0".into()));
    }
    Ok(crate::embedding::cosine_sim(p, iq) / tau)
}

/// `-log(exp(pos) / sum(exp(negs)))` via max-shifted log-sum-exp. The
/// positive is part of `negs` whenever the variant convention includes it.
pub fn nce_core(pos: f64, negs: &[f64]) -> f64 {
    debug_assert!(!negs.is_empty());
    let max = negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + negs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - pos
}

fn multi_anchor_term(terms: Terms, bundle: &ScoreBundle, i: usize) -> f64 {
    let pos = bundle.s_p[[i, i]];
    let tables = selected_tables(terms);
    let mut union: Vec<f64> = Vec::with_capacity(tables.len() * bundle.batch_size());
    for t in &tables {
        union.extend(bundle.table(*t).row(i).iter());
    }
    nce_core(pos, &union)
}

/// Mean over anchors of the variant's objective. The uni family is computed
/// as a sum of per-term batch means, which makes term additivity exact:
/// `loss(uni:{P,I}) == loss(uni:{P}) + loss(uni:{I})` bit for bit.
pub fn loss(variant: LossVariant, bundle: &ScoreBundle) -> f64 {
    let b = bundle.batch_size();
    match variant.family {
        Family::Uni => selected_tables(variant.terms)
            .iter()
            .map(|t| {
                (0..b)
                    .map(|i| {
                        let row: Vec<f64> = bundle.table(*t).row(i).to_vec();
                        nce_core(bundle.s_p[[i, i]], &row)
                    })
                    .sum::<f64>()
                    / b as f64
            })
            .sum(),
        Family::Multi => {
            (0..b)
                .map(|i| multi_anchor_term(variant.terms, bundle, i))
                .sum::<f64>()
                / b as f64
        }
    }
}

/// Everything needed to run the backward pass for a bundle.
pub struct BundleContext {
    pub bundle: ScoreBundle,
    p_caches: Vec<PassageCache>,
    p_vecs: Vec<Array1<f64>>,
    /// Indexed `[j][i]`: instruction from row j, query from row i.
    iq_caches: Vec<Vec<IqCache>>,
    iq_vecs: Vec<Vec<Array1<f64>>>,
}

/// Builds the three marginal score tables for a batch of coherent rows.
///
/// Embedding cost per anchor is linear in the batch size: the passage side is
/// embedded once per row, and the instruction-marginal table reuses the
/// cached token matrices under cross-attention. Under the concat interaction
/// each (instruction j, query i) pair needs its own encoder call, which is
/// the documented cost asymmetry between the two interactions.
pub fn build_bundle_context(rows: &[BatchRow], model: &ScoringModel) -> Result<BundleContext> {
    let b = rows.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut p_caches = Vec::with_capacity(b);
    let mut p_vecs = Vec::with_capacity(b);
    for row in rows {
        let (p, cache) = model.embed_passage(&row.passage)?;
        p_vecs.push(p.as_array().clone());
        p_caches.push(cache);
    }
    let mut iq_caches: Vec<Vec<IqCache>> = Vec::with_capacity(b);
    let mut iq_vecs: Vec<Vec<Array1<f64>>> = Vec::with_capacity(b);
    for j in 0..b {
        let mut row_caches = Vec::with_capacity(b);
        let mut row_vecs = Vec::with_capacity(b);
        for i in 0..b {
            let (iq, cache) = model.embed_iq(&rows[j].instruction, &rows[i].query)?;
            row_vecs.push(iq.as_array().clone());
            row_caches.push(cache);
        }
        iq_caches.push(row_caches);
        iq_vecs.push(row_vecs);
    }
    let tau = model.tau;
    let mut s_p = Array2::zeros((b, b));
    let mut s_i = Array2::zeros((b, b));
    let mut s_iq = Array2::zeros((b, b));
    for i in 0..b {
        for m in 0..b {
            s_p[[i, m]] = p_vecs[m].dot(&iq_vecs[i][i]) / tau;
        }
        for j in 0..b {
            s_i[[i, j]] = p_vecs[i].dot(&iq_vecs[j][i]) / tau;
        }
        for k in 0..b {
            s_iq[[i, k]] = p_vecs[i].dot(&iq_vecs[k][k]) / tau;
        }
    }
    let bundle = ScoreBundle::new(s_p, s_i, s_iq, tau)?;
    Ok(BundleContext {
        bundle,
        p_caches,
        p_vecs,
        iq_caches,
        iq_vecs,
    })
}

/// Convenience wrapper returning only the score tables.
pub fn build_score_bundle(rows: &[BatchRow], model: &ScoringModel) -> Result<ScoreBundle> {
    Ok(build_bundle_context(rows, model)?.bundle)
}

/// Loss plus gradients with respect to the fusion parameters.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Per-entry derivatives of the mean loss with respect to each score table.
fn score_gradients(
    variant: LossVariant,
    bundle: &ScoreBundle,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let b = bundle.batch_size();
    let inv_b = 1.0 / b as f64;
    let mut d_p = Array2::zeros((b, b));
    let mut d_i = Array2::zeros((b, b));
    let mut d_iq = Array2::zeros((b, b));
    let tables = selected_tables(variant.terms);
    for i in 0..b {
        match variant.family {
            Family::Uni => {
                for t in &tables {
                    let row = bundle.table(*t).row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    let dst = match t {
                        Table::P => &mut d_p,
                        Table::I => &mut d_i,
                        Table::Iq => &mut d_iq,
                    };
                    for m in 0..b {
                        dst[[i, m]] += inv_b * (exps[m] / total);
                    }
                    dst[[i, i]] -= inv_b;
                }
            }
            Family::Multi => {
                let mut max = f64::NEG_INFINITY;
                for t in &tables {
                    for v in bundle.table(*t).row(i) {
                        max = max.max(*v);
                    }
                }
                let mut total = 0.0;
                for t in &tables {
                    for v in bundle.table(*t).row(i) {
                        total += (v - max).exp();
                    }
                }
                if !total.is_finite() {
                    return Err(Error::NonFinite {
                        stage: format!("multi denominator, anchor {i}"),
                    });
                }
                for t in &tables {
                    let row = bundle.table(*t).row(i);
                    let dst = match t {
                        Table::P => &mut d_p,
                        Table::I => &mut d_i,
                        Table::Iq => &mut d_iq,
                    };
                    for m in 0..b {
                        dst[[i, m]] += inv_b * ((row[m] - max).exp() / total);
                    }
                }
                // The numerator's -pos: the diagonal is one shared node, so
                // the attribution to a single table is arbitrary.
                d_p[[i, i]] -= inv_b;
            }
        }
    }
    Ok((d_p, d_i, d_iq))
}

/// Analytic gradients of `loss(variant, bundle(rows))` with respect to the
/// fusion parameters, chaining through cosine normalization, pooling, the
/// projections, and the interaction. Under the concat interaction with
/// frozen providers only the projection heads receive gradient.
#[allow(clippy::needless_range_loop)]
pub fn loss_and_grad(
    variant: LossVariant,
    rows: &[BatchRow],
    model: &ScoringModel,
) -> Result<GradAccumulator> {
    let ctx = build_bundle_context(rows, model)?;
    let b = ctx.bundle.batch_size();
    let tau = ctx.bundle.tau();
    let loss_value = loss(variant, &ctx.bundle);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            stage: "loss".into(),
        });
    }
    let (d_p, d_i, d_iq) = score_gradients(variant, &ctx.bundle)?;

    let dim = model.dim();
    let mut g_p: Vec<Array1<f64>> = vec![Array1::zeros(dim); b];
    let mut g_iq: Vec<Vec<Array1<f64>>> = vec![vec![Array1::zeros(dim); b]; b];

    for i in 0..b {
        for m in 0..b {
            let w = d_p[[i, m]] / tau;
            if w != 0.0 {
                g_p[m] += &(&ctx.iq_vecs[i][i] * w);
                g_iq[i][i] += &(&ctx.p_vecs[m] * w);
            }
        }
        for j in 0..b {
            let w = d_i[[i, j]] / tau;
            if w != 0.0 {
                g_p[i] += &(&ctx.iq_vecs[j][i] * w);
                g_iq[j][i] += &(&ctx.p_vecs[i] * w);
            }
        }
        for k in 0..b {
            let w = d_iq[[i, k]] / tau;
            if w != 0.0 {
                g_p[i] += &(&ctx.iq_vecs[k][k] * w);
                g_iq[k][k] += &(&ctx.p_vecs[i] * w);
            }
        }
    }

    let mut grads = ParamGrads::zeros_like(&model.params);
    for (m, upstream) in g_p.iter().enumerate() {
        if let Some(d_proj) = model.passage_backward(&ctx.p_caches[m], upstream) {
            let acc = grads.block_mut("proj_p").expect("proj_p present");
            *acc += &d_proj;
        }
    }
    for j in 0..b {
        for i in 0..b {
            let upstream = &g_iq[j][i];
            match &ctx.iq_caches[j][i] {
                IqCache::Cross(cache) => {
                    let g = cross_attention_backward(cache, upstream, &model.params)?;
                    grads.w_i += &g.w_i;
                    grads.w_q1 += &g.w_q1;
                    grads.w_q2 += &g.w_q2;
                    if let Some(dp) = g.proj_iq {
                        let acc = grads.block_mut("proj_iq").expect("proj_iq present");
                        *acc += &dp;
                    }
                }
                IqCache::Concat { raw, out, z_norm } => {
                    let (_, d_proj) = crate::fusion::normalize_proj_backward(
                        raw,
                        model.params.proj_iq.as_ref(),
                        out,
                        *z_norm,
                        upstream,
                    );
                    if let Some(dp) = d_proj {
                        let acc = grads.block_mut("proj_iq").expect("proj_iq present");
                        *acc += &dp;
                    }
                }
            }
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            stage: "gradients".into(),
        });
    }
    Ok(GradAccumulator {
        loss: loss_value,
        grads,
    })
}

const BRUTE_FORCE_LIMIT: usize = 6;

/// Reference loss: every score recomputed by direct formula with explicit
/// loops and no shared intermediates. Guarded to small batches; this is the
/// oracle the fast path is validated against.
pub fn brute_force_loss(
    variant: LossVariant,
    rows: &[BatchRow],
    model: &ScoringModel,
) -> Result<f64> {
    if rows.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::BatchTooLarge {
            got: rows.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let b = rows.len();
    let tau = model.tau;
    let sim = |p_row: usize, i_row: usize, q_row: usize| -> Result<f64> {
        let p = brute::passage_vec(model, &rows[p_row].passage)?;
        let iq = brute::iq_vec(model, &rows[i_row].instruction, &rows[q_row].query)?;
        Ok(brute::dot(&p, &iq) / tau)
    };
    let mut total = 0.0;
    for i in 0..b {
        let pos = sim(i, i, i)?;
        let mut term = 0.0;
        let mut union = 0.0;
        if variant.terms.p {
            let mut denom = 0.0;
            for m in 0..b {
                denom += sim(m, i, i)?.exp();
            }
            match variant.family {
                Family::Uni => term += denom.ln() - pos,
                Family::Multi => union += denom,
            }
        }
        if variant.terms.i {
            let mut denom = 0.0;
            for j in 0..b {
                denom += sim(i, j, i)?.exp();
            }
            match variant.family {
                Family::Uni => term += denom.ln() - pos,
                Family::Multi => union += denom,
            }
        }
        if variant.terms.iq {
            let mut denom = 0.0;
            for k in 0..b {
                denom += sim(i, k, k)?.exp();
            }
            match variant.family {
                Family::Uni => term += denom.ln() - pos,
                Family::Multi => union += denom,
            }
        }
        if variant.family == Family::Multi {
            term = union.ln() - pos;
        }
        total += term;
    }
    Ok(total / b as f64)
}

/// Straight-line scalar math for the brute-force path.
mod brute {
    use super::*;

    pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn matrix(rows: &crate::embedding::TokenMatrix) -> Vec<Vec<f64>> {
        (0..rows.token_count())
            .map(|r| rows.rows().row(r).to_vec())
            .collect()
    }

    fn pool_rows(rows: &[Vec<f64>], mode: Pooling) -> Vec<f64> {
        match mode {
            Pooling::Mean => {
                let d = rows[0].len();
                let mut out = vec![0.0; d];
                for row in rows {
                    for c in 0..d {
                        out[c] += row[c];
                    }
                }
                for v in &mut out {
                    *v /= rows.len() as f64;
                }
                out
            }
            Pooling::Last => rows[rows.len() - 1].clone(),
        }
    }

    fn project(v: &[f64], proj: Option<&ndarray::Array2<f64>>) -> Vec<f64> {
        match proj {
            Some(p) => {
                let d = v.len();
                let mut out = vec![0.0; d];
                for c in 0..d {
                    for r in 0..d {
                        out[c] += v[r] * p[[r, c]];
                    }
                }
                out
            }
            None => v.to_vec(),
        }
    }

    fn normalize(mut v: Vec<f64>) -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        v
    }

    pub(super) fn passage_vec(model: &ScoringModel, text: &str) -> Result<Vec<f64>> {
        let rows = matrix(&model.passage_provider().embed(text)?);
        let pooled = pool_rows(&rows, model.pooling);
        Ok(normalize(project(&pooled, model.params.proj_p.as_ref())))
    }

    #[allow(clippy::needless_range_loop)]
    pub(super) fn iq_vec(model: &ScoringModel, instruction: &str, query: &str) -> Result<Vec<f64>> {
        match model.interaction {
            Interaction::Concat => {
                let text = crate::fusion::concat_iq(instruction, query)?;
                let rows = matrix(&model.iq_provider().embed(&text)?);
                let pooled = pool_rows(&rows, model.pooling);
                Ok(normalize(project(&pooled, model.params.proj_iq.as_ref())))
            }
            Interaction::CrossAttention => {
                let e_i = matrix(&model.iq_provider().embed(instruction)?);
                let e_q = matrix(&model.iq_provider().embed(query)?);
                let d = model.dim();
                let p = &model.params;
                let linear = |rows: &[Vec<f64>], w: &ndarray::Array2<f64>| -> Vec<Vec<f64>> {
                    rows.iter()
                        .map(|row| {
                            (0..d)
                                .map(|c| (0..d).map(|k| row[k] * w[[k, c]]).sum())
                                .collect()
                        })
                        .collect()
                };
                let x = linear(&e_i, &p.w_i);
                let y = linear(&e_q, &p.w_q1);
                let v = linear(&e_q, &p.w_q2);
                let m = x.len();
                let n = y.len();
                let mut mean = vec![0.0; d];
                for r in 0..m {
                    let logits: Vec<f64> =
                        (0..n).map(|c| dot(&x[r], &y[c]) / (d as f64).sqrt()).collect();
                    let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
                    let total: f64 = exps.iter().sum();
                    for c in 0..n {
                        let a = exps[c] / total;
                        for k in 0..d {
                            mean[k] += a * v[c][k] / m as f64;
                        }
                    }
                }
                Ok(normalize(project(&mean, p.proj_iq.as_ref())))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::fusion::{init_params, InitScheme};
    use std::str::FromStr;
    use std::sync::Arc;

    fn make_model(interaction: Interaction, with_proj: bool, tau: f64, dim: usize) -> ScoringModel {
        let provider = Arc::new(HashEmbedder::new(dim, 7));
        let params = init_params(dim, 3, InitScheme::UniformFan, with_proj).unwrap();
        ScoringModel::new(
            params,
            interaction,
            Pooling::Mean,
            tau,
            provider.clone(),
            provider,
            "hash/test",
        )
        .unwrap()
    }

    fn sample_rows(n: usize, tag: u64) -> Vec<BatchRow> {
        (0..n)
            .map(|i| BatchRow {
                passage: format!("passage p{tag}x{i} common words body"),
                instruction: format!("focus on aspect a{tag}x{i}"),
                query: format!("query about q{tag}x{i} topic"),
            })
            .collect()
    }

    #[test]
    fn variant_parsing_and_names() {
        assert_eq!(LossVariant::all().len(), 14);
        let v = LossVariant::from_str("multi:P,I,IQ").unwrap();
        assert_eq!(v.to_string(), "multi:P,I,IQ");
        assert_eq!(
            LossVariant::from_str("uni:iq").unwrap().to_string(),
            "uni:IQ"
        );
        assert!(LossVariant::from_str("uni:").is_err());
        assert!(LossVariant::from_str("both:P").is_err());
        assert!(LossVariant::from_str("uni:P,P").is_err());
        match LossVariant::from_str("nope") {
            Err(Error::UnknownVariant { valid, .. }) => {
                assert_eq!(valid.split(", ").count(), 14);
            }
            other => panic!("expected UnknownVariant, got {other:?}"),
        }
    }

    #[test]
    fn nce_core_hand_values() {
        assert_eq!(nce_core(1.3, &[1.3]), 0.0);
        let four = nce_core(0.5, &[0.5, 0.5, 0.5, 0.5]);
        assert!((four - 4.0_f64.ln()).abs() < 1e-12);
        // -ln(e^0.9 / (e^0.9 + e^0.1)) = ln(1 + e^-0.8)
        let v = nce_core(0.9, &[0.9, 0.1]);
        assert!((v - 0.3711006659477778).abs() < 1e-12);
    }

    fn uniform_bundle(b: usize, value: f64) -> ScoreBundle {
        let t = Array2::from_elem((b, b), value);
        ScoreBundle::new(t.clone(), t.clone(), t, 1.0).unwrap()
    }

    #[test]
    fn equal_scores_give_log_batch_size() {
        let bundle = uniform_bundle(4, 0.25);
        let v = loss(
            LossVariant::from_str("uni:P").unwrap(),
            &bundle,
        );
        assert!((v - 4.0_f64.ln()).abs() < 1e-12);
    }

    // Encodes the positive-in-denominator convention: with all three
    // marginal sums pooled, the positive appears once per selected term.
    #[test]
    fn multi_full_worked_value() {
        let mut s_p = Array2::from_elem((2, 2), 0.9);
        let mut s_i = s_p.clone();
        let mut s_iq = s_p.clone();
        s_p[[0, 1]] = 0.1;
        s_i[[0, 1]] = 0.2;
        s_iq[[0, 1]] = 0.3;
        // Mirror the pattern for anchor 2 so the mean equals the anchor term.
        s_p[[1, 0]] = 0.1;
        s_i[[1, 0]] = 0.2;
        s_iq[[1, 0]] = 0.3;
        let bundle = ScoreBundle::new(s_p, s_i, s_iq, 1.0).unwrap();
        let v = loss(LossVariant::from_str("multi:P,I,IQ").unwrap(), &bundle);
        let expected = -(0.9_f64.exp()
            / (3.0 * 0.9_f64.exp() + 0.1_f64.exp() + 0.2_f64.exp() + 0.3_f64.exp()))
        .ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((expected - 1.5029046880894144).abs() < 1e-12);
    }

    #[test]
    fn uni_terms_are_additive() {
        let model = make_model(Interaction::CrossAttention, false, 1.0, 8);
        let rows = sample_rows(3, 5);
        let bundle = build_score_bundle(&rows, &model).unwrap();
        let l_pi = loss(LossVariant::from_str("uni:P,I").unwrap(), &bundle);
        let l_p = loss(LossVariant::from_str("uni:P").unwrap(), &bundle);
        let l_i = loss(LossVariant::from_str("uni:I").unwrap(), &bundle);
        assert_eq!(l_pi, l_p + l_i);
    }

    #[test]
    fn singleton_bundle_tables_agree() {
        let model = make_model(Interaction::Concat, false, 1.0, 8);
        let rows = sample_rows(1, 2);
        let bundle = build_score_bundle(&rows, &model).unwrap();
        assert_eq!(bundle.batch_size(), 1);
        let [p, i, iq] = bundle.tables();
        assert_eq!(p[[0, 0]], i[[0, 0]]);
        assert_eq!(p[[0, 0]], iq[[0, 0]]);
        // The positive is the sole denominator entry.
        let fast = loss(LossVariant::from_str("uni:P").unwrap(), &bundle);
        assert_eq!(fast, 0.0);
        let brute = brute_force_loss(LossVariant::from_str("uni:P").unwrap(), &rows, &model).unwrap();
        assert!(brute.abs() <= 1e-12);
    }

    #[test]
    fn bundle_matches_direct_formula_for_two_rows() {
        let model = make_model(Interaction::CrossAttention, false, 0.5, 8);
        let rows = sample_rows(2, 9);
        let bundle = build_score_bundle(&rows, &model).unwrap();
        let (p0, _) = model.embed_passage(&rows[0].passage).unwrap();
        let (p1, _) = model.embed_passage(&rows[1].passage).unwrap();
        let (iq00, _) = model.embed_iq(&rows[0].instruction, &rows[0].query).unwrap();
        let (iq10, _) = model.embed_iq(&rows[1].instruction, &rows[0].query).unwrap();
        let [s_p, s_i, _] = bundle.tables();
        let expect_p01 = crate::embedding::cosine_sim(&p1, &iq00) / 0.5;
        assert!((s_p[[0, 1]] - expect_p01).abs() < 1e-12);
        let expect_i01 = crate::embedding::cosine_sim(&p0, &iq10) / 0.5;
        assert!((s_i[[0, 1]] - expect_i01).abs() < 1e-12);
    }

    #[test]
    fn marginal_tables_stay_linear_in_batch() {
        let model = make_model(Interaction::CrossAttention, false, 1.0, 8);
        let rows = sample_rows(8, 3);
        let bundle = build_score_bundle(&rows, &model).unwrap();
        for t in bundle.tables() {
            assert_eq!(t.nrows(), 8);
            assert_eq!(t.ncols(), 8);
        }
    }

    #[test]
    fn fast_loss_matches_brute_force_all_variants() {
        for (i, interaction) in [Interaction::Concat, Interaction::CrossAttention]
            .into_iter()
            .enumerate()
        {
            let model = make_model(interaction, i == 0, 1.0, 8);
            for (run, b) in [(0u64, 2usize), (1, 3), (2, 5)] {
                let rows = sample_rows(b, 100 + run);
                let bundle = build_score_bundle(&rows, &model).unwrap();
                for variant in LossVariant::all() {
                    let fast = loss(variant, &bundle);
                    let brute = brute_force_loss(variant, &rows, &model).unwrap();
                    assert!(
                        (fast - brute).abs() <= 1e-12,
                        "{variant}: fast {fast} brute {brute}"
                    );
                }
            }
        }
    }

    #[test]
    fn brute_force_guard() {
        let model = make_model(Interaction::Concat, false, 1.0, 8);
        let rows = sample_rows(7, 1);
        assert!(matches!(
            brute_force_loss(LossVariant::from_str("uni:P").unwrap(), &rows, &model),
            Err(Error::BatchTooLarge { got: 7, limit: 6 })
        ));
    }

    #[test]
    fn raising_positive_strictly_decreases_every_variant() {
        let b = 3;
        let mut s = Array2::zeros((b, b));
        for i in 0..b {
            for m in 0..b {
                s[[i, m]] = 0.1 * (i as f64) - 0.2 * (m as f64);
            }
        }
        for i in 0..b {
            s[[i, i]] = 0.4;
        }
        let bundle = ScoreBundle::new(s.clone(), s.clone(), s.clone(), 1.0).unwrap();
        let mut s_up = s.clone();
        for i in 0..b {
            s_up[[i, i]] = 0.6;
        }
        let bundle_up = ScoreBundle::new(s_up.clone(), s_up.clone(), s_up, 1.0).unwrap();
        for variant in LossVariant::all() {
            let before = loss(variant, &bundle);
            let after = loss(variant, &bundle_up);
            assert!(after < before, "{variant}: {after} !< {before}");
        }
    }

    // Loss is continuous and strictly monotone in each negative score: any
    // single off-diagonal entry raised in a selected table raises the loss.
    #[test]
    fn raising_any_negative_strictly_increases_loss() {
        let b = 3;
        let base = Array2::from_elem((b, b), 0.2);
        for variant in LossVariant::all() {
            let bundle =
                ScoreBundle::new(base.clone(), base.clone(), base.clone(), 1.0).unwrap();
            let before = loss(variant, &bundle);
            for (table_idx, selected) in
                [variant.terms.p, variant.terms.i, variant.terms.iq].into_iter().enumerate()
            {
                if !selected {
                    continue;
                }
                let mut tables = [base.clone(), base.clone(), base.clone()];
                tables[table_idx][[0, 1]] += 0.05;
                let [p, i, iq] = tables;
                let bumped = ScoreBundle::new(p, i, iq, 1.0).unwrap();
                let after = loss(variant, &bumped);
                assert!(
                    after > before,
                    "{variant}: raising table {table_idx} negative did not increase loss"
                );
            }
        }
    }

    #[test]
    fn loss_nonnegative_with_positive_in_denominator() {
        let model = make_model(Interaction::CrossAttention, false, 0.5, 8);
        for tag in 0..5 {
            let rows = sample_rows(3, 200 + tag);
            let bundle = build_score_bundle(&rows, &model).unwrap();
            for variant in LossVariant::all() {
                assert!(loss(variant, &bundle) >= 0.0);
            }
        }
    }

    #[test]
    fn batch_permutation_symmetry_of_loss_and_grads() {
        let model = make_model(Interaction::CrossAttention, false, 1.0, 8);
        let rows = sample_rows(3, 77);
        let mut rev = rows.clone();
        rev.reverse();
        let variant = LossVariant::from_str("multi:P,I").unwrap();
        let a = loss_and_grad(variant, &rows, &model).unwrap();
        let b = loss_and_grad(variant, &rev, &model).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for ((_, ga), (_, gb)) in a.grads.blocks().iter().zip(b.grads.blocks().iter()) {
            let diff = *ga - *gb;
            assert!(diff.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn large_temperature_flattens_loss_and_gradients() {
        let model = make_model(Interaction::CrossAttention, false, 1e6, 8);
        let rows = sample_rows(3, 42);
        let variant = LossVariant::from_str("multi:P,I,IQ").unwrap();
        let acc = loss_and_grad(variant, &rows, &model).unwrap();
        // Scores ~ 0, so the loss approaches ln(denominator count) = ln(9).
        assert!((acc.loss - 9.0_f64.ln()).abs() < 1e-4);
        assert!(acc.grads.max_abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences_spot() {
        let h = 1e-5;
        for (interaction, with_proj) in [
            (Interaction::CrossAttention, false),
            (Interaction::CrossAttention, true),
            (Interaction::Concat, true),
        ] {
            let model = make_model(interaction, with_proj, 0.7, 6);
            let rows = sample_rows(3, 11);
            let variant = LossVariant::from_str("multi:P,IQ").unwrap();
            let acc = loss_and_grad(variant, &rows, &model).unwrap();
            for (name, grad) in acc.grads.blocks() {
                for r in 0..6 {
                    for c in 0..6 {
                        let mut plus = make_model(interaction, with_proj, 0.7, 6);
                        plus.params = model.params.clone();
                        plus.params.block_mut(name).unwrap()[[r, c]] += h;
                        let mut minus = make_model(interaction, with_proj, 0.7, 6);
                        minus.params = model.params.clone();
                        minus.params.block_mut(name).unwrap()[[r, c]] -= h;
                        let fp = loss(variant, &build_score_bundle(&rows, &plus).unwrap());
                        let fm = loss(variant, &build_score_bundle(&rows, &minus).unwrap());
                        let fd = (fp - fm) / (2.0 * h);
                        let a = grad[[r, c]];
                        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                        assert!(rel <= 1e-4, "{name}[{r},{c}]: analytic {a} vs fd {fd}");
                    }
                }
            }
        }
    }

    // Under concat with frozen providers and no projection heads there is
    // nothing to train; the gradient is identically zero.
    #[test]
    fn concat_without_proj_has_zero_gradient() {
        let model = make_model(Interaction::Concat, false, 1.0, 8);
        let rows = sample_rows(3, 8);
        let acc = loss_and_grad(LossVariant::from_str("uni:P").unwrap(), &rows, &model).unwrap();
        assert_eq!(acc.grads.max_abs(), 0.0);
    }

    #[test]
    fn score_rejects_bad_temperature() {
        let model = make_model(Interaction::Concat, false, 1.0, 8);
        let (p, _) = model.embed_passage("some passage text").unwrap();
        let (iq, _) = model.embed_iq("an instruction", "a query").unwrap();
        assert!(score(&p, &iq, 0.0).is_err());
        let s = score(&p, &iq, 0.05).unwrap();
        let s1 = score(&p, &iq, 1.0).unwrap();
        assert!((s - s1 / 0.05).abs() < 1e-12);
    }
}
