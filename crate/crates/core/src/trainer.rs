//! Minibatch training over flattened tuples with a from-scratch AdamW
//! optimizer, seeded shuffling, per-epoch checkpointing, and the
//! finite-difference gradient checker.
//!
//! Each retained family contributes its positive row plus, by default, its
//! two coherent poisoned rows ((passage_neg1, instruction_neg, query_pos) and
//! (passage_neg2, instruction_pos, query_neg)); rows are shuffled per epoch
//! and chunked into batches, where every row is an anchor and an in-batch
//! marginal negative for the others.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::corpus::{flatten_training_tuples, Corpus, FlattenedCorpus, TrainTuple};
use crate::embedding::{Pooling, ProviderConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    init_params, load_checkpoint, save_checkpoint, CheckpointMeta, FusionParams, InitScheme,
    ParamGrads,
};
use crate::model::{Interaction, ScoringModel};
use crate::objectives::{loss_and_grad, BatchRow, LossVariant};

fn default_lr() -> f64 {
    5e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.01
}
fn default_batch() -> usize {
    4
}
fn default_epochs() -> usize {
    2
}
fn default_tau() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_scheme() -> String {
    "uniform-fan".into()
}
fn default_noise() -> f64 {
    0.01
}
fn default_accum() -> usize {
    1
}
fn default_variant() -> LossVariant {
    "multi:P,I".parse().expect("valid")
}

/// Mirrors the `train.toml` file. `pooling` and `share_encoder` here are
/// authoritative and are copied into the provider config when the model is
/// built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Rows per minibatch.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: LossVariant,
    #[serde(default)]
    pub interaction: Interaction,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_true")]
    pub share_encoder: bool,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_scheme")]
    pub init_scheme: String,
    #[serde(default = "default_noise")]
    pub init_noise_scale: f64,
    /// Enable the trainable projection heads (the only trainable path under
    /// the concat interaction).
    #[serde(default)]
    pub trainable_proj: bool,
    /// Expand each family into its positive plus two poisoned rows.
    #[serde(default = "default_true")]
    pub include_hard_negative_rows: bool,
    /// Shuffle families as units, keeping each family's rows adjacent so its
    /// poisoned rows land in the same minibatch as in-batch marginal
    /// negatives. With the flag off, rows shuffle independently.
    #[serde(default = "default_true")]
    pub group_family_rows: bool,
    /// Micro-batches averaged per optimizer step.
    #[serde(default = "default_accum")]
    pub grad_accum: usize,
    pub provider: ProviderConfig,
}

impl TrainConfig {
    pub fn with_provider(provider: ProviderConfig) -> Self {
        TrainConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            variant: default_variant(),
            interaction: Interaction::default(),
            tau: default_tau(),
            share_encoder: true,
            pooling: Pooling::Mean,
            init_scheme: default_scheme(),
            init_noise_scale: default_noise(),
            trainable_proj: false,
            include_hard_negative_rows: true,
            group_family_rows: true,
            grad_accum: default_accum(),
            provider,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 for contrastive variants".into(),
            ));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig("tau must be > 0".into()));
        }
        if self.grad_accum < 1 {
            return Err(Error::InvalidConfig("grad_accum must be >= 1".into()));
        }
        InitScheme::parse(&self.init_scheme, self.init_noise_scale)?;
        self.effective_provider().validate()
    }

    /// Provider config with this trainer's pooling and encoder sharing
    /// applied.
    pub fn effective_provider(&self) -> ProviderConfig {
        let mut p = self.provider.clone();
        p.pooling = self.pooling;
        p.share_encoder = self.share_encoder;
        p
    }

    pub fn init_scheme(&self) -> Result<InitScheme> {
        InitScheme::parse(&self.init_scheme, self.init_noise_scale)
    }

    /// Untrained model with freshly initialized parameters.
    pub fn init_model(&self) -> Result<ScoringModel> {
        self.validate()?;
        let params = init_params(
            self.provider.dim,
            self.seed,
            self.init_scheme()?,
            self.trainable_proj,
        )?;
        ScoringModel::from_provider_config(
            params,
            self.interaction,
            self.tau,
            &self.effective_provider(),
        )
    }

    fn annotations(&self) -> BTreeMap<String, String> {
        let mut a = BTreeMap::new();
        a.insert("variant".into(), self.variant.to_string());
        a.insert("interaction".into(), self.interaction.to_string());
        a.insert("pooling".into(), self.pooling.to_string());
        a.insert("tau".into(), self.tau.to_string());
        a.insert(
            "provider".into(),
            serde_json::to_string(&self.effective_provider()).expect("serializable"),
        );
        a.insert("lr".into(), self.lr.to_string());
        a.insert("batch_size".into(), self.batch_size.to_string());
        a.insert("epochs".into(), self.epochs.to_string());
        a.insert(
            "include_hard_negative_rows".into(),
            self.include_hard_negative_rows.to_string(),
        );
        a
    }
}

/// First/second-moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
    pub skipped_nonfinite: u64,
}

impl AdamWState {
    pub fn new(params: &FusionParams) -> Self {
        AdamWState {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            step: 0,
            skipped_nonfinite: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamWConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One decoupled-weight-decay update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected, then
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
/// Non-finite gradients skip the step and bump the counter; returns whether
/// the step was applied.
pub fn adamw_step(
    params: &mut FusionParams,
    grads: &ParamGrads,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> bool {
    if !grads.is_finite() {
        state.skipped_nonfinite += 1;
        tracing::warn!("skipping optimizer step: non-finite gradient");
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<&'static str> = grads.blocks().iter().map(|(n, _)| *n).collect();
    for name in names {
        let g = match name {
            "w_i" => &grads.w_i,
            "w_q1" => &grads.w_q1,
            "w_q2" => &grads.w_q2,
            "proj_p" => grads.proj_p.as_ref().expect("shape match"),
            "proj_iq" => grads.proj_iq.as_ref().expect("shape match"),
            _ => unreachable!(),
        }
        .clone();
        let m = state.m.block_mut(name).expect("shape match");
        *m = &*m * cfg.beta1 + &(&g * (1.0 - cfg.beta1));
        let m = m.clone();
        let v = state.v.block_mut(name).expect("shape match");
        *v = &*v * cfg.beta2 + &(&g * &g * (1.0 - cfg.beta2));
        let v = v.clone();
        let theta = params.block_mut(name).expect("shape match");
        let decay = &*theta * (cfg.lr * cfg.weight_decay);
        let mut update = m / bc1;
        update.zip_mut_with(&v, |u, vv| {
            *u = cfg.lr * *u / ((vv / bc2).sqrt() + cfg.eps);
        });
        *theta = &*theta - &update - &decay;
    }
    true
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub model: ScoringModel,
    pub history: Vec<StepRecord>,
    pub state: AdamWState,
    pub skipped_degenerate: usize,
    pub checkpoint: Option<PathBuf>,
}

fn tuple_row(flat: &FlattenedCorpus, t: &TrainTuple) -> BatchRow {
    BatchRow {
        passage: flat.passages[t.passage_idx].clone(),
        instruction: flat.instructions[t.instruction_idx].clone(),
        query: flat.queries[t.query_idx].clone(),
    }
}

/// All coherent training rows of a flattened corpus, in deterministic order.
pub fn training_rows(flat: &FlattenedCorpus, include_hard_negatives: bool) -> Vec<BatchRow> {
    let mut rows = Vec::new();
    for (f, tuple) in flat.tuples.iter().enumerate() {
        rows.push(tuple_row(flat, tuple));
        if include_hard_negatives {
            for t in flat.hard_negative_tuples(f) {
                rows.push(tuple_row(flat, &t));
            }
        }
    }
    rows
}

/// Epochs of seeded-shuffled minibatches; history records every optimizer
/// step. Fully deterministic given (seed, config, corpus, provider).
pub fn train(corpus: &Corpus, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let flat = flatten_training_tuples(corpus);
    let rows = training_rows(&flat, cfg.include_hard_negative_rows);
    if rows.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "corpus yields {} trainable rows; need at least 2",
            rows.len()
        )));
    }
    let mut model = cfg.init_model()?;
    let mut state = AdamWState::new(&model.params);
    let optim: AdamWConfig = cfg.into();
    let mut history = Vec::new();
    let mut skipped_degenerate = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut global_step = 0usize;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let rows_per_family = if cfg.include_hard_negative_rows { 3 } else { 1 };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = if cfg.group_family_rows {
            let mut families: Vec<usize> = (0..rows.len() / rows_per_family).collect();
            families.shuffle(&mut rng);
            families
                .into_iter()
                .flat_map(|f| (0..rows_per_family).map(move |r| f * rows_per_family + r))
                .collect()
        } else {
            (0..rows.len()).collect()
        };
        if !cfg.group_family_rows {
            order.shuffle(&mut rng);
        }
        let mut pending_grads: Option<ParamGrads> = None;
        let mut pending_losses: Vec<f64> = Vec::new();

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<BatchRow> = chunk.iter().map(|&i| rows[i].clone()).collect();
            if batch.iter().all(|r| *r == batch[0]) {
                tracing::warn!(epoch, "skipping degenerate all-identical batch");
                skipped_degenerate += 1;
                continue;
            }
            let acc = loss_and_grad(cfg.variant, &batch, &model)?;
            pending_losses.push(acc.loss);
            match pending_grads.as_mut() {
                Some(g) => g.add_assign(&acc.grads),
                None => pending_grads = Some(acc.grads),
            }
            if pending_losses.len() == cfg.grad_accum {
                let mut grads = pending_grads.take().expect("accumulated");
                grads.scale(1.0 / pending_losses.len() as f64);
                let mean_loss =
                    pending_losses.iter().sum::<f64>() / pending_losses.len() as f64;
                adamw_step(&mut model.params, &grads, &mut state, &optim);
                history.push(StepRecord {
                    epoch,
                    step: global_step,
                    loss: mean_loss,
                });
                global_step += 1;
                pending_losses.clear();
            }
        }
        // Flush a trailing partial accumulation at epoch end.
        if let Some(mut grads) = pending_grads.take() {
            grads.scale(1.0 / pending_losses.len() as f64);
            let mean_loss = pending_losses.iter().sum::<f64>() / pending_losses.len() as f64;
            adamw_step(&mut model.params, &grads, &mut state, &optim);
            history.push(StepRecord {
                epoch,
                step: global_step,
                loss: mean_loss,
            });
            global_step += 1;
            pending_losses.clear();
        }

        if let Some(dir) = out_dir {
            let meta = CheckpointMeta {
                dim: model.params.dim(),
                scheme: cfg.init_scheme.clone(),
                seed: cfg.seed,
                step_count: state.step,
                has_proj_p: model.params.proj_p.is_some(),
                has_proj_iq: model.params.proj_iq.is_some(),
                annotations: cfg.annotations(),
            };
            save_checkpoint(&dir.join(format!("epoch-{epoch}.ckpt")), &model.params, &meta)?;
        }
    }

    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        let meta = CheckpointMeta {
            dim: model.params.dim(),
            scheme: cfg.init_scheme.clone(),
            seed: cfg.seed,
            step_count: state.step,
            has_proj_p: model.params.proj_p.is_some(),
            has_proj_iq: model.params.proj_iq.is_some(),
            annotations: cfg.annotations(),
        };
        let path = dir.join("model.ckpt");
        save_checkpoint(&path, &model.params, &meta)?;
        save_optimizer_state(&dir.join("model.optim"), &state)?;
        let mut csv = String::from("step,loss\n");
        for r in &history {
            csv.push_str(&format!("{},{}\n", r.step, r.loss));
        }
        let hist_path = dir.join("history.csv");
        std::fs::write(&hist_path, csv).map_err(|e| Error::io(&hist_path, e))?;
        checkpoint = Some(path);
    }

    Ok(TrainOutcome {
        model,
        history,
        state,
        skipped_degenerate,
        checkpoint,
    })
}

/// Rebuilds a scoring model from a training checkpoint using its header
/// annotations (provider, interaction, pooling, temperature).
pub fn model_from_checkpoint(path: &Path) -> Result<ScoringModel> {
    let (params, meta) = load_checkpoint(path)?;
    let missing = |key: &str| Error::Checkpoint {
        path: path.into(),
        msg: format!("annotation `{key}` missing"),
    };
    let provider_json = meta
        .annotations
        .get("provider")
        .ok_or_else(|| missing("provider"))?;
    let provider: ProviderConfig = serde_json::from_str(provider_json)?;
    let interaction: Interaction = meta
        .annotations
        .get("interaction")
        .ok_or_else(|| missing("interaction"))?
        .parse()?;
    let tau: f64 = meta
        .annotations
        .get("tau")
        .ok_or_else(|| missing("tau"))?
        .parse()
        .map_err(|e| Error::Checkpoint {
            path: path.into(),
            msg: format!("bad tau annotation: {e}"),
        })?;
    ScoringModel::from_provider_config(params, interaction, tau, &provider)
}

/// Optimizer-state file: JSON header line, then the little-endian f64 moment
/// matrices (all first moments in block order, then all second moments).
pub fn save_optimizer_state(path: &Path, state: &AdamWState) -> Result<()> {
    #[derive(Serialize)]
    struct Header {
        step: u64,
        skipped_nonfinite: u64,
        blocks: Vec<String>,
        dim: usize,
    }
    let blocks: Vec<String> = state.m.blocks().iter().map(|(n, _)| n.to_string()).collect();
    let dim = state.m.w_i.nrows();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = serde_json::to_string(&Header {
        step: state.step,
        skipped_nonfinite: state.skipped_nonfinite,
        blocks,
        dim,
    })?;
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))?;
    for grads in [&state.m, &state.v] {
        for (_, m) in grads.blocks() {
            for v in m.iter() {
                f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    Ok(())
}

/// Analytic-vs-central-difference comparison settings.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub variant: LossVariant,
    pub interaction: Interaction,
    pub dim: usize,
    pub batch: usize,
    pub tau: f64,
    pub n_instances: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub fd_step: f64,
    /// Added to every analytic gradient entry before comparison; a nonzero
    /// value must make the check fail (validation hook).
    pub perturbation: f64,
    pub trainable_proj: bool,
}

impl GradCheckConfig {
    pub fn new(variant: LossVariant, interaction: Interaction) -> Self {
        GradCheckConfig {
            variant,
            interaction,
            dim: 6,
            batch: 3,
            tau: 0.7,
            n_instances: 10,
            tolerance: 1e-4,
            seed: 0,
            fd_step: 1e-5,
            perturbation: 0.0,
            trainable_proj: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub variant: String,
    pub interaction: String,
    pub n_instances: usize,
    pub tolerance: f64,
    pub per_matrix_max_rel_err: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn random_rows(rng: &mut ChaCha8Rng, batch: usize) -> Vec<BatchRow> {
    use rand::Rng;
    let mut word = |tag: &str| -> String {
        let n: u32 = rng.random_range(0..1_000_000);
        format!("{tag}{n}")
    };
    (0..batch)
        .map(|_| BatchRow {
            passage: format!("{} {} {} shared", word("p"), word("p"), word("f")),
            instruction: format!("focus on {} {}", word("f"), word("i")),
            query: format!("about {} {}", word("q"), word("f")),
        })
        .collect()
}

/// Compares analytic gradients against central finite differences on random
/// instances. Relative error uses a 1e-6 floor so genuinely-zero gradients
/// compare cleanly.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    use crate::objectives::{build_score_bundle, loss};
    if cfg.tolerance <= 0.0 {
        return Err(Error::InvalidConfig("tolerance must be > 0".into()));
    }
    let mut per_matrix: BTreeMap<String, f64> = BTreeMap::new();
    let mut max_rel: f64 = 0.0;
    for instance in 0..cfg.n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (instance as u64) << 8);
        let rows = random_rows(&mut rng, cfg.batch);
        let provider = ProviderConfig::hash(cfg.dim, cfg.seed.wrapping_add(instance as u64));
        let params = init_params(
            cfg.dim,
            cfg.seed.wrapping_add(1000 + instance as u64),
            InitScheme::UniformFan,
            cfg.trainable_proj,
        )?;
        let model =
            ScoringModel::from_provider_config(params, cfg.interaction, cfg.tau, &provider)?;
        let acc = loss_and_grad(cfg.variant, &rows, &model)?;
        for (name, grad) in acc.grads.blocks() {
            let entry = per_matrix.entry(name.to_string()).or_insert(0.0);
            for r in 0..cfg.dim {
                for c in 0..cfg.dim {
                    let mut plus = ScoringModel::from_provider_config(
                        model.params.clone(),
                        cfg.interaction,
                        cfg.tau,
                        &provider,
                    )?;
                    plus.params.block_mut(name).expect("block")[[r, c]] += cfg.fd_step;
                    let mut minus = ScoringModel::from_provider_config(
                        model.params.clone(),
                        cfg.interaction,
                        cfg.tau,
                        &provider,
                    )?;
                    minus.params.block_mut(name).expect("block")[[r, c]] -= cfg.fd_step;
                    let fp = loss(cfg.variant, &build_score_bundle(&rows, &plus)?);
                    let fm = loss(cfg.variant, &build_score_bundle(&rows, &minus)?);
                    let fd = (fp - fm) / (2.0 * cfg.fd_step);
                    let analytic = grad[[r, c]] + cfg.perturbation;
                    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                    if rel > *entry {
                        *entry = rel;
                    }
                    if rel > max_rel {
                        max_rel = rel;
                    }
                }
            }
        }
    }
    Ok(GradCheckReport {
        variant: cfg.variant.to_string(),
        interaction: cfg.interaction.to_string(),
        n_instances: cfg.n_instances,
        tolerance: cfg.tolerance,
        per_matrix_max_rel_err: per_matrix,
        max_rel_err: max_rel,
        passed: max_rel <= cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::mock::{mock_seed_pairs, MockJudge, SeededMockClient};
    use crate::synth::{run_pipeline, PipelineConfig};
    use ndarray::Array2;

    fn small_params(d: usize) -> FusionParams {
        init_params(d, 1, InitScheme::UniformFan, false).unwrap()
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut params = small_params(4);
        let before = params.clone();
        let grads = ParamGrads::zeros_like(&params);
        let mut state = AdamWState::new(&params);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        assert!(adamw_step(&mut params, &grads, &mut state, &cfg));
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_zero_grad_with_decay_scales_exactly() {
        let mut params = small_params(4);
        let before = params.clone();
        let grads = ParamGrads::zeros_like(&params);
        let mut state = AdamWState::new(&params);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        adamw_step(&mut params, &grads, &mut state, &cfg);
        let factor = 1.0 - 0.1 * 0.5;
        let diff = &params.w_i - &(&before.w_i * factor);
        assert!(diff.iter().all(|v| v.abs() < 1e-15));
    }

    // First step with unit gradient: bias corrections cancel to
    // m_hat = g and v_hat = g^2, so the update is lr * g/(|g| + eps) plus
    // the decay term.
    #[test]
    fn adamw_first_step_hand_value() {
        let mut params = small_params(4);
        let theta0 = params.w_i[[0, 0]];
        let mut grads = ParamGrads::zeros_like(&params);
        grads.w_i = Array2::from_elem((4, 4), 1.0);
        grads.w_q1 = Array2::zeros((4, 4));
        grads.w_q2 = Array2::zeros((4, 4));
        let mut state = AdamWState::new(&params);
        let cfg = AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        adamw_step(&mut params, &grads, &mut state, &cfg);
        let expected = theta0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 0.01 * theta0;
        assert!((params.w_i[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_nonfinite_grads() {
        let mut params = small_params(4);
        let before = params.clone();
        let mut grads = ParamGrads::zeros_like(&params);
        grads.w_i[[0, 0]] = f64::NAN;
        let mut state = AdamWState::new(&params);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        assert!(!adamw_step(&mut params, &grads, &mut state, &cfg));
        assert_eq!(state.skipped_nonfinite, 1);
        assert_eq!(state.step, 0);
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_lr_zero_is_identity_for_any_gradient() {
        let mut params = small_params(4);
        let before = params.clone();
        let mut grads = ParamGrads::zeros_like(&params);
        grads.w_i = Array2::from_elem((4, 4), 3.7);
        grads.w_q2 = Array2::from_elem((4, 4), -0.4);
        let mut state = AdamWState::new(&params);
        let cfg = AdamWConfig {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.3,
        };
        adamw_step(&mut params, &grads, &mut state, &cfg);
        assert_eq!(params, before);
    }

    fn mock_corpus(n: usize, seed: u64) -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        let seeds = mock_seed_pairs(n, seed);
        let gen = SeededMockClient::new(seed, MockJudge::AlwaysCorrect);
        let judge = SeededMockClient::new(seed, MockJudge::AlwaysCorrect);
        let cfg = PipelineConfig {
            out_dir: dir.path().to_path_buf(),
            k_distractors: 2,
            max_parallel: 2,
            source: "mock".into(),
        };
        run_pipeline(&seeds, &gen, &judge, &cfg).unwrap().0
    }

    fn toy_config(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::with_provider(ProviderConfig::hash(32, 0));
        cfg.seed = seed;
        cfg.interaction = Interaction::CrossAttention;
        cfg.variant = "multi:P,I".parse().unwrap();
        cfg.tau = 0.05;
        cfg.lr = 1e-2;
        cfg.epochs = 4;
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn epochs_zero_is_a_config_error() {
        let mut cfg = toy_config(1);
        cfg.epochs = 0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn training_reduces_loss_on_toy_corpus() {
        let corpus = mock_corpus(20, 21);
        let cfg = toy_config(5);
        let out = train(&corpus, &cfg, None).unwrap();
        let first: Vec<f64> = out
            .history
            .iter()
            .filter(|r| r.epoch == 0)
            .map(|r| r.loss)
            .collect();
        let last: Vec<f64> = out
            .history
            .iter()
            .filter(|r| r.epoch == cfg.epochs - 1)
            .map(|r| r.loss)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&last) < mean(&first),
            "expected decreasing loss, first {} last {}",
            mean(&first),
            mean(&last)
        );
    }

    #[test]
    fn degenerate_all_identical_batches_are_skipped() {
        // Families with identical texts but distinct ids: with hard-negative
        // rows off every batch is all-identical and gets skipped.
        let families: Vec<crate::corpus::TripletFamily> = (0..4)
            .map(|i| {
                let mut f = crate::corpus::sample_family(&format!("fam-{i}"), true);
                f.instruction_pos = "same instruction".into();
                f.query_pos = "same query".into();
                f.passage_pos = "same passage text".into();
                f
            })
            .collect();
        let corpus = Corpus::new(families);
        let mut cfg = toy_config(1);
        cfg.include_hard_negative_rows = false;
        cfg.epochs = 1;
        let out = train(&corpus, &cfg, None).unwrap();
        assert!(out.history.is_empty());
        assert!(out.skipped_degenerate > 0);
    }

    #[test]
    fn same_seed_gives_byte_identical_checkpoints() {
        let corpus = mock_corpus(8, 13);
        let mut cfg = toy_config(3);
        cfg.epochs = 2;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        train(&corpus, &cfg, Some(d1.path())).unwrap();
        train(&corpus, &cfg, Some(d2.path())).unwrap();
        for name in ["model.ckpt", "history.csv", "epoch-0.ckpt"] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_into_model() {
        let corpus = mock_corpus(8, 13);
        let mut cfg = toy_config(3);
        cfg.epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = train(&corpus, &cfg, Some(dir.path())).unwrap();
        let restored = model_from_checkpoint(&dir.path().join("model.ckpt")).unwrap();
        assert_eq!(restored.params, out.model.params);
        assert_eq!(restored.tau, cfg.tau);
        assert_eq!(restored.interaction, cfg.interaction);
        // Identical scores from the restored model.
        let f = &corpus.families()[0];
        let a = out
            .model
            .score(&f.instruction_pos, &f.query_pos, &f.passage_pos)
            .unwrap();
        let b = restored
            .score(&f.instruction_pos, &f.query_pos, &f.passage_pos)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grad_check_passes_and_perturbation_fails() {
        let cfg = GradCheckConfig {
            n_instances: 2,
            ..GradCheckConfig::new(
                "multi:P,I".parse().unwrap(),
                Interaction::CrossAttention,
            )
        };
        let report = grad_check(&cfg).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);

        let bad = GradCheckConfig {
            perturbation: 1e-2,
            ..cfg
        };
        let report = grad_check(&bad).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn grad_check_zero_instances_is_empty_pass() {
        let cfg = GradCheckConfig {
            n_instances: 0,
            ..GradCheckConfig::new("uni:P".parse().unwrap(), Interaction::Concat)
        };
        let report = grad_check(&cfg).unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn optimizer_state_file_is_written() {
        let corpus = mock_corpus(6, 2);
        let mut cfg = toy_config(1);
        cfg.epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = train(&corpus, &cfg, Some(dir.path())).unwrap();
        let raw = std::fs::read(dir.path().join("model.optim")).unwrap();
        let newline = raw.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&raw[..newline]).unwrap();
        assert_eq!(header["step"].as_u64().unwrap(), out.state.step);
        let d = out.model.params.dim();
        assert_eq!(raw.len() - newline - 1, 2 * 3 * d * d * 8);
    }
}
