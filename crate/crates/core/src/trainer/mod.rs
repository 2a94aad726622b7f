//! The training loop.
//!
//! One step decouples a batch of paired images and texts, builds x-semantic
//! components from the sparsified correlation matrix, evaluates the weighted
//! objective, and applies one AdamW update. Every random draw comes from a
//! ChaCha stream derived from the run seed and the epoch or step index, so a
//! run can be resumed from a checkpoint without replaying earlier steps.

pub mod checkpoint;
pub mod model;
pub mod optim;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use model::{CddsModel, Modality};
pub use optim::{adamw_update, optimizer_step, AdamConfig, AdamState, Moments};

use crate::decoupler::DecouplerConfig;
use crate::embed_io::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::nn::Binding;
use crate::objectives::{
    loss_integrity, loss_modal, loss_semantic, loss_x_integrity, pooled_contrastive, total_loss, LossBreakdown,
    LossTerms, LossWeights, ModalForm, SemanticForm,
};
use crate::semalign::{threshold_gate, transport_mix, Axis, CorrelationState, Sparsified, TransportPlan};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationMode {
    /// Recompute distributions and scores from every batch.
    EachBatch,
    /// Compute once on the whole training set, then refresh a random subset
    /// of columns from the first batch of each epoch.
    Random,
    /// Compute once on the whole training set before training.
    All,
}

impl CorrelationMode {
    pub const ALL: [CorrelationMode; 3] = [CorrelationMode::EachBatch, CorrelationMode::Random, CorrelationMode::All];

    pub fn as_str(&self) -> &'static str {
        match self {
            CorrelationMode::EachBatch => "each-batch",
            CorrelationMode::Random => "random",
            CorrelationMode::All => "all",
        }
    }
}

impl fmt::Display for CorrelationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorrelationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown correlation mode {s:?}")))
    }
}

/// Components that can be switched off for comparison runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// No decoupler: semantic = raw embedding, modal = 0.
    Dec,
    /// No modality-consistency term.
    Mod,
    /// No reconstruction terms.
    Int,
    /// No noise perturbation.
    Gau,
    /// No distribution sampling: pooled contrastive loss instead.
    Sam,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Dec, Ablation::Mod, Ablation::Int, Ablation::Gau, Ablation::Sam];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Dec => "dec",
            Ablation::Mod => "mod",
            Ablation::Int => "int",
            Ablation::Gau => "gau",
            Ablation::Sam => "sam",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == lower)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub decoupler: DecouplerConfig,
    pub weights: LossWeights,
    pub semantic_form: SemanticForm,
    pub modal_form: ModalForm,
    pub correlation_mode: CorrelationMode,
    pub ablations: BTreeSet<Ablation>,
    pub bins: usize,
    /// Initial value of every sparsity parameter.
    pub alpha_init: f64,
    /// Share of columns re-estimated per epoch in `random` mode.
    pub refresh_fraction: f64,
    pub adam: AdamConfig,
    /// Stop early after this many steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 8,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            seed: 1,
            decoupler: DecouplerConfig::default(),
            weights: LossWeights::default(),
            semantic_form: SemanticForm::Literal,
            modal_form: ModalForm::Consistency,
            correlation_mode: CorrelationMode::EachBatch,
            ablations: BTreeSet::new(),
            bins: crate::semalign::DEFAULT_BINS,
            alpha_init: 1.0,
            refresh_fraction: 0.25,
            adam: AdamConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.ablations.insert(a);
        self
    }

    pub fn noise_std(&self) -> f64 {
        if self.has(Ablation::Gau) {
            0.0
        } else {
            self.decoupler.noise_std
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("bins must be at least 2".into()));
        }
        if !(self.refresh_fraction > 0.0 && self.refresh_fraction <= 1.0) {
            return Err(Error::Config("refresh_fraction must lie in (0, 1]".into()));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::Config("alpha_init must be finite".into()));
        }
        if let SemanticForm::InfoNce { temperature } = self.semantic_form {
            if temperature.is_nan() || temperature <= 0.0 {
                return Err(Error::Config("InfoNCE temperature must be positive".into()));
            }
        }
        self.decoupler.validate()?;
        self.weights.validate()
    }

    /// Hex SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub loss: LossBreakdown,
    pub wall_ms: f64,
    /// Time spent estimating distributions, scoring and sparsifying.
    pub corr_ms: f64,
}

/// Loss columns only, so identical runs give identical bytes.
pub fn metrics_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,l_s,l_m,l_f,l_x,total\n");
    for r in history {
        let l = &r.loss;
        out.push_str(&format!("{},{},{},{},{},{}\n", r.step, l.l_s, l.l_m, l.l_f, l.l_x, l.total));
    }
    out
}

pub fn timing_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,wall_ms,corr_ms\n");
    for r in history {
        out.push_str(&format!("{},{:.4},{:.4}\n", r.step, r.wall_ms, r.corr_ms));
    }
    out
}

pub fn write_metrics_csv(history: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, metrics_csv(history))?;
    Ok(())
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub v_semantic: Tensor,
    pub v_modal: Tensor,
    pub t_semantic: Tensor,
    pub t_modal: Tensor,
    pub v_x: Option<Tensor>,
    pub t_x: Option<Tensor>,
    pub correlation: Option<Tensor>,
    pub sparse_v: Option<Sparsified>,
    pub sparse_t: Option<Sparsified>,
    pub loss: LossBreakdown,
}

struct Forward {
    tape: Tape,
    bind: Binding,
    total: Var,
    trace: StepTrace,
    corr_ms: f64,
}

/// RNG streams: even for epoch shuffles, odd for per-step noise.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64);
    rng
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step as u64 + 1);
    rng
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged { step, op },
        other => other,
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: CddsModel,
    pub adam: AdamState,
    /// Steps completed so far.
    pub step: usize,
    /// Correlation state carried across steps in `all` and `random` modes.
    pub frozen: Option<CorrelationState>,
    /// Full correlation-matrix computations performed by this trainer.
    pub correlation_calls: usize,
    pub correlation_refreshes: usize,
    /// Time of the one-off full-dataset computation, if any.
    pub setup_corr_ms: f64,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &EmbeddingBatch) -> Result<Self> {
        config.validate()?;
        Self::check_data(&config, data)?;
        let model = CddsModel::new(&config, data.n_v, data.n_t)?;
        let adam = AdamState::new(&model.store);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            frozen: None,
            correlation_calls: 0,
            correlation_refreshes: 0,
            setup_corr_ms: 0.0,
            history: Vec::new(),
        })
    }

    fn check_data(config: &TrainConfig, data: &EmbeddingBatch) -> Result<()> {
        data.validate_for_training()?;
        if data.d != config.decoupler.d {
            return Err(Error::Config(format!(
                "data has d = {}, model expects {}",
                data.d, config.decoupler.d
            )));
        }
        if data.pairs.len() < config.batch_size {
            return Err(Error::Config(format!(
                "{} pairs cannot fill one batch of {}",
                data.pairs.len(),
                config.batch_size
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, data: &EmbeddingBatch) -> usize {
        data.pairs.len() / self.config.batch_size
    }

    pub fn total_steps(&self, data: &EmbeddingBatch) -> usize {
        let full = self.config.epochs * self.steps_per_epoch(data);
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    fn epoch_plan(&self, data: &EmbeddingBatch, epoch: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..data.pairs.len()).collect();
        order.shuffle(&mut rng);
        let d = self.model.d;
        let k = ((self.config.refresh_fraction * d as f64).ceil() as usize).clamp(1, d);
        let mut cols = sample(&mut rng, d, k).into_vec();
        cols.sort_unstable();
        (order, cols)
    }

    fn batch_rows(data: &EmbeddingBatch, pair_ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let images: Vec<&Tensor> = pair_ids.iter().map(|&p| &data.images[data.pairs[p].0 as usize]).collect();
        let texts: Vec<&Tensor> = pair_ids.iter().map(|&p| &data.texts[data.pairs[p].1 as usize]).collect();
        Ok((Tensor::vstack(&images)?, Tensor::vstack(&texts)?))
    }

    /// Scores on the whole training set with the current (noise-free) model.
    fn full_correlation(&self, data: &EmbeddingBatch) -> Result<CorrelationState> {
        let all: Vec<usize> = (0..data.pairs.len()).collect();
        let (v, t) = Self::batch_rows(data, &all)?;
        let vs = self.model.semantic(&v, Modality::Image)?;
        let ts = self.model.semantic(&t, Modality::Text)?;
        CorrelationState::compute(&vs, &ts, self.config.bins)
    }

    fn needs_correlation(&self) -> bool {
        !self.config.has(Ablation::Sam)
    }

    /// Computes the frozen state if the mode needs one and none exists yet.
    pub fn prepare(&mut self, data: &EmbeddingBatch) -> Result<()> {
        if self.config.correlation_mode == CorrelationMode::EachBatch || !self.needs_correlation() {
            return Ok(());
        }
        if self.frozen.is_none() {
            let start = Instant::now();
            self.frozen = Some(self.full_correlation(data)?);
            self.correlation_calls += 1;
            self.setup_corr_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        Ok(())
    }

    fn forward(&mut self, data: &EmbeddingBatch, step: usize, mutate: bool) -> Result<Forward> {
        let spe = self.steps_per_epoch(data);
        let (epoch, in_epoch) = (step / spe, step % spe);
        let (order, refresh_cols) = self.epoch_plan(data, epoch);
        let bs = self.config.batch_size;
        let pair_ids = &order[in_epoch * bs..(in_epoch + 1) * bs];
        let (v_rows, t_rows) = Self::batch_rows(data, pair_ids)?;
        let (n_v, n_t) = (self.model.n_v, self.model.n_t);

        let mut tape = Tape::new();
        let bind = self.model.store.bind(&mut tape);
        let v = tape.constant(v_rows.clone());
        let t = tape.constant(t_rows.clone());
        let mut rng = step_rng(self.config.seed, step);
        let noise = self.config.noise_std();
        let (vs, vm) = match &self.model.image {
            Some(dec) => {
                let out = dec.decouple(&mut tape, &bind, v, n_v, noise, &mut rng)?;
                (out.semantic, out.modal)
            }
            None => (v, tape.constant(Tensor::zeros(v_rows.shape()))),
        };
        let (ts, tm) = match &self.model.text {
            Some(dec) => {
                let out = dec.decouple(&mut tape, &bind, t, n_t, noise, &mut rng)?;
                (out.semantic, out.modal)
            }
            None => (t, tape.constant(Tensor::zeros(t_rows.shape()))),
        };

        let mut corr_ms = 0.0;
        let mut correlation = None;
        let mut sparse = (None, None);
        let (l_s, vx, tx) = if self.needs_correlation() {
            let start = Instant::now();
            let vs_val = tape.value(vs).clone();
            let ts_val = tape.value(ts).clone();
            let s = match self.config.correlation_mode {
                CorrelationMode::EachBatch => {
                    if mutate {
                        self.correlation_calls += 1;
                    }
                    CorrelationState::compute(&vs_val, &ts_val, self.config.bins)?.s
                }
                mode => {
                    let Some(frozen) = self.frozen.as_mut() else {
                        return Err(Error::Contract("frozen correlation state missing; call prepare".into()));
                    };
                    if mode == CorrelationMode::Random && in_epoch == 0 {
                        if mutate {
                            frozen.refresh_columns(&vs_val, &ts_val, &refresh_cols)?;
                            self.correlation_refreshes += 1;
                            frozen.s.clone()
                        } else {
                            let mut copy = frozen.clone();
                            copy.refresh_columns(&vs_val, &ts_val, &refresh_cols)?;
                            copy.s
                        }
                    } else {
                        frozen.s.clone()
                    }
                }
            };
            let (wv, sp_v) = threshold_gate(&mut tape, &s, bind.var(self.model.alpha_v), Axis::Row)?;
            let (wt, sp_t) = threshold_gate(&mut tape, &s, bind.var(self.model.alpha_t), Axis::Column)?;
            corr_ms = start.elapsed().as_secs_f64() * 1e3;
            let wt = tape.transpose(wt)?;
            let items: Vec<usize> = (0..bs).collect();
            let plan_v = TransportPlan { group_s: n_v, group_t: n_t, pairing: items.clone(), pooled_source: false };
            let plan_t = TransportPlan { group_s: n_t, group_t: n_v, pairing: items, pooled_source: false };
            let vx = transport_mix(&mut tape, &vs_val, ts, wv, plan_v)?;
            let tx = transport_mix(&mut tape, &ts_val, vs, wt, plan_t)?;
            let l_s = loss_semantic(&mut tape, vx, vs, tx, ts, self.config.semantic_form)?;
            correlation = Some(s);
            sparse = (Some(sp_v), Some(sp_t));
            (l_s, vx, tx)
        } else {
            let l_s = pooled_contrastive(&mut tape, vs, n_v, ts, n_t, self.config.semantic_form)?;
            (l_s, vs, ts)
        };

        let mut terms = LossTerms { l_s: Some(l_s), ..LossTerms::default() };
        if !self.config.has(Ablation::Mod) {
            terms.l_m = Some(loss_modal(&mut tape, vm, tm, self.config.modal_form)?);
        }
        if !self.config.has(Ablation::Int) {
            let (w_m, w_s, w_x) = (
                bind.var(self.model.w_m),
                bind.var(self.model.w_s),
                bind.var(self.model.w_x),
            );
            terms.l_f = Some(loss_integrity(&mut tape, vm, vs, v, tm, ts, t, w_m, w_s)?);
            terms.l_x = Some(loss_x_integrity(&mut tape, vm, vx, v, tm, tx, t, w_m, w_x)?);
        }
        let mut weights = self.config.weights;
        if self.config.has(Ablation::Mod) {
            weights.alpha_m = 0.0;
        }
        let (total, loss) = total_loss(&mut tape, &terms, &weights)?;
        let sam = self.config.has(Ablation::Sam);
        let trace = StepTrace {
            v_semantic: tape.value(vs).clone(),
            v_modal: tape.value(vm).clone(),
            t_semantic: tape.value(ts).clone(),
            t_modal: tape.value(tm).clone(),
            v_x: (!sam).then(|| tape.value(vx).clone()),
            t_x: (!sam).then(|| tape.value(tx).clone()),
            correlation,
            sparse_v: sparse.0,
            sparse_t: sparse.1,
            loss,
        };
        Ok(Forward { tape, bind, total, trace, corr_ms })
    }

    /// Forward pass of the next step without updating anything.
    pub fn trace_next(&mut self, data: &EmbeddingBatch) -> Result<StepTrace> {
        self.prepare(data)?;
        let step = self.step;
        Ok(self.forward(data, step, false).map_err(diverged(step + 1))?.trace)
    }

    /// Runs one optimisation step.
    pub fn step(&mut self, data: &EmbeddingBatch) -> Result<StepRecord> {
        // one-off setup of the random/all modes is not per-batch time
        self.prepare(data)?;
        let start = Instant::now();
        let step = self.step;
        let err = diverged(step + 1);
        let mut fwd = self.forward(data, step, true).map_err(&err)?;
        fwd.tape.backward(fwd.total).map_err(&err)?;
        self.model.store.collect_grads(&fwd.tape, &fwd.bind)?;
        optimizer_step(
            &mut self.model.store,
            &mut self.adam,
            self.config.learning_rate,
            self.config.weight_decay,
            &self.config.adam,
        );
        if let Some(p) = self.model.store.iter().find(|p| !p.tensor.all_finite()) {
            return Err(Error::Contract(format!("step {}: parameter {} became non-finite", step + 1, p.name)));
        }
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            loss: fwd.trace.loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            corr_ms: fwd.corr_ms,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Trains until `target` steps have been completed (or the configured
    /// total, whichever is smaller).
    pub fn run_until(&mut self, data: &EmbeddingBatch, target: usize) -> Result<()> {
        Self::check_data(&self.config, data)?;
        let end = target.min(self.total_steps(data));
        while self.step < end {
            self.step(data)?;
        }
        Ok(())
    }

    pub fn run(&mut self, data: &EmbeddingBatch) -> Result<()> {
        let total = self.total_steps(data);
        self.run_until(data, total)
    }
}

/// Trains from scratch with `config`.
pub fn train(data: &EmbeddingBatch, config: TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.run(data)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_io::{generate_synthetic, SyntheticConfig};

    fn data() -> EmbeddingBatch {
        let cfg = SyntheticConfig {
            n_pairs: 24,
            n_v: 3,
            n_t: 4,
            d: 8,
            d_latent: 2,
            seed: 3,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg).unwrap().0
    }

    fn config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            decoupler: DecouplerConfig { n_layers: 1, z: 2, noise_std: 0.1, d: 8 },
            bins: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let d = data();
        assert!(Trainer::new(TrainConfig { batch_size: 1, ..config() }, &d).is_err());
        assert!(Trainer::new(TrainConfig { batch_size: 100, ..config() }, &d).is_err());
        let mut wrong_d = config();
        wrong_d.decoupler.d = 6;
        assert!(Trainer::new(wrong_d, &d).is_err());
    }

    #[test]
    fn parsing_modes_and_ablations() {
        assert_eq!("each-batch".parse::<CorrelationMode>().unwrap(), CorrelationMode::EachBatch);
        assert!("sometimes".parse::<CorrelationMode>().is_err());
        assert_eq!("Sam".parse::<Ablation>().unwrap(), Ablation::Sam);
        assert!("xyz".parse::<Ablation>().is_err());
    }

    #[test]
    fn same_seed_same_metrics() {
        let d = data();
        let a = train(&d, config()).unwrap();
        let b = train(&d, config()).unwrap();
        assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
        assert_eq!(a.history.len(), 12);
    }

    #[test]
    fn correlation_call_counts_per_mode() {
        let d = data();
        let each = train(&d, config()).unwrap();
        assert_eq!(each.correlation_calls, each.history.len());
        let all = train(&d, TrainConfig { correlation_mode: CorrelationMode::All, ..config() }).unwrap();
        assert_eq!(all.correlation_calls, 1);
        let random = train(&d, TrainConfig { correlation_mode: CorrelationMode::Random, ..config() }).unwrap();
        assert_eq!(random.correlation_calls, 1);
        assert_eq!(random.correlation_refreshes, 2);
    }

    #[test]
    fn ablations_report_switched_off_terms_as_zero() {
        let d = data();
        let run = |a: Ablation| {
            let cfg = TrainConfig { max_steps: Some(2), ..config() }.with_ablation(a);
            train(&d, cfg).unwrap().history
        };
        assert!(run(Ablation::Mod).iter().all(|r| r.loss.l_m == 0.0));
        assert!(run(Ablation::Int).iter().all(|r| r.loss.l_f == 0.0 && r.loss.l_x == 0.0));
        for a in [Ablation::Dec, Ablation::Gau, Ablation::Sam] {
            assert!(run(a).iter().all(|r| r.loss.total.is_finite()));
        }
    }
}
