//! The variational training objective, Adadelta, and the training loop.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Batch, Batcher, ParallelCorpus, Side, Vocabulary};
use crate::decoder::{self, Decoder, LATENT_MATRICES};
use crate::encoder;
use crate::error::{Error, Result};
use crate::inferer::{self, Inferer, Sampling};
use crate::model::{max_output_len, Mode, Model, ModelDims};
use crate::params::{NoiseSource, ParameterStore};
use crate::tensor::{Axis, Graph, Precision, Var};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub src_vocab_cap: usize,
    pub tgt_vocab_cap: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    /// Monte-Carlo samples per sentence pair.
    pub samples: usize,
    pub kl_weight: f64,
    /// Linear KL warm-up from 0 to `kl_weight` over this many steps; 0 disables.
    pub kl_warmup_steps: usize,
    pub rho: f64,
    pub delta: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub seed: u64,
    pub mode: Mode,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dims: ModelDims::desk(),
            src_vocab_cap: 1000,
            tgt_vocab_cap: 1000,
            batch_size: 32,
            max_len: 50,
            epochs: 10,
            samples: 1,
            kl_weight: 1.0,
            kl_warmup_steps: 0,
            rho: 0.95,
            delta: 1e-6,
            clip: 1.0,
            seed: 1,
            mode: Mode::Vnmt,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Sizes and batch settings of the published large-scale setup.
    pub fn paper_scale() -> Self {
        TrainConfig {
            dims: ModelDims::paper(),
            src_vocab_cap: 30_000,
            tgt_vocab_cap: 30_000,
            batch_size: 80,
            max_len: 50,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.samples < 1 {
            return Err(Error::contract("need at least one Monte-Carlo sample"));
        }
        if !(0.0..=1.0).contains(&self.kl_weight) {
            return Err(Error::contract(format!("kl_weight {} outside [0, 1]", self.kl_weight)));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.delta > 0.0) {
            return Err(Error::contract("Adadelta needs 0 <= rho < 1 and delta > 0"));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::contract("batch size and max length must be positive"));
        }
        if self.src_vocab_cap < 5 || self.tgt_vocab_cap < 5 {
            return Err(Error::contract("vocabulary caps must be at least 5"));
        }
        Ok(())
    }

    /// KL weight in force at optimizer step `step` (0-based).
    pub fn kl_weight_at(&self, step: u64) -> f64 {
        if self.kl_warmup_steps == 0 {
            self.kl_weight
        } else {
            self.kl_weight * ((step + 1) as f64 / self.kl_warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub mode: Mode,
    pub kl_weight: f64,
    pub samples: usize,
    /// Replace posterior samples with the prior mean in `Mode::Vnmt`.
    pub force_prior_mean: bool,
}

impl LossOptions {
    pub fn new(mode: Mode) -> Self {
        LossOptions {
            mode,
            kl_weight: 1.0,
            samples: 1,
            force_prior_mean: false,
        }
    }
}

/// The batch objective and its two parts, each averaged over sentences.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub loss: Var,
    pub kl: f64,
    pub nll: f64,
}

/// Negative variational bound of a batch.
///
/// Per pair: `nll = -(1/L) Σ_l Σ_j log p(y_j | y_<j, x, h_z^(l))` with
/// `h_z^(l) = μ + σ ⊙ ε^(l)` drawn from the posterior, `kl = KL(q || p)`,
/// and the loss `nll + kl_weight · kl`, averaged over the batch.
/// `VnmtWoKl` fixes `h_z` to the prior mean and drops the KL term;
/// `Baseline` skips the latent altogether.
pub fn elbo_loss(g: &mut Graph, model: &Model, batch: &Batch, noise: &mut NoiseSource, opts: LossOptions) -> Result<LossTerms> {
    if batch.size() == 0 {
        return Err(Error::contract("empty batch"));
    }
    if opts.samples == 0 {
        return Err(Error::contract("need at least one Monte-Carlo sample"));
    }
    let m = batch.size();
    let store = &model.store;
    let dec = Decoder::bind(g, store)?;

    let (nll, kl) = match opts.mode {
        Mode::Baseline => {
            let ann = model.encode_source(g, &batch.src, &batch.src_mask)?;
            let nll = decoder::teacher_forced_nll(g, &dec, &ann, None, &batch.tgt, &batch.tgt_mask)?;
            (nll, None)
        }
        Mode::VnmtWoKl => {
            let (ann, _, p) = model.source_prior(g, &batch.src, &batch.src_mask)?;
            let inf = Inferer::bind(g, store)?;
            let s = inferer::reparameterize(g, &p, Sampling::PriorMean)?;
            let h = inferer::project_latent(g, &inf, &s)?;
            let nll = decoder::teacher_forced_nll(g, &dec, &ann, Some(h), &batch.tgt, &batch.tgt_mask)?;
            (nll, None)
        }
        Mode::Vnmt => {
            let (ann, h_f, p) = model.source_prior(g, &batch.src, &batch.src_mask)?;
            let tgt_ann = model.encode_target(g, &batch.tgt, &batch.tgt_mask)?;
            let h_e = encoder::mean_pool(g, &tgt_ann)?;
            let inf = Inferer::bind(g, store)?;
            let q = inferer::posterior(g, &inf, h_f, h_e)?;
            let kl = inferer::kl_diag_gaussians(g, &q, &p)?;
            let mut sum: Option<Var> = None;
            for _ in 0..opts.samples {
                let s = if opts.force_prior_mean {
                    inferer::reparameterize(g, &p, Sampling::PriorMean)?
                } else {
                    inferer::reparameterize(g, &q, Sampling::Noise(noise))?
                };
                let h = inferer::project_latent(g, &inf, &s)?;
                let nll = decoder::teacher_forced_nll(g, &dec, &ann, Some(h), &batch.tgt, &batch.tgt_mask)?;
                sum = Some(match sum {
                    Some(t) => g.add(t, nll)?,
                    None => nll,
                });
            }
            let nll = g.scale(sum.expect("samples >= 1"), 1.0 / opts.samples as f64);
            (nll, Some(kl))
        }
    };

    let nll_mean = g.mean_axis(nll, Axis::Rows);
    let (per_pair, kl_mean) = match kl {
        Some(kl) => {
            let kl_mean = g.mean_axis(kl, Axis::Rows);
            let weighted = g.scale(kl, opts.kl_weight);
            (g.add(nll, weighted)?, g.scalar(kl_mean))
        }
        None => (nll, 0.0),
    };
    let loss = g.mean_axis(per_pair, Axis::Rows);
    let terms = LossTerms {
        loss,
        kl: kl_mean,
        nll: g.scalar(nll_mean),
    };
    if !g.scalar(loss).is_finite() {
        return Err(Error::Numerical {
            batch: 0,
            detail: format!("loss {} (nll {}, kl {}) over {m} pairs", g.scalar(loss), terms.nll, terms.kl),
        });
    }
    Ok(terms)
}

/// Adadelta: running averages of squared gradients and squared updates with
/// decay `rho`; each weight moves by `-sqrt(E[Δ²] + δ) / sqrt(E[g²] + δ) · g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub delta: f64,
    pub sq_grad: IndexMap<String, Vec<f64>>,
    pub sq_update: IndexMap<String, Vec<f64>>,
}

impl Adadelta {
    pub fn new(store: &ParameterStore, rho: f64, delta: f64) -> Self {
        let zeros = |s: &ParameterStore| s.iter().map(|(n, p)| (n.to_string(), vec![0.0; p.len()])).collect();
        Adadelta {
            rho,
            delta,
            sq_grad: zeros(store),
            sq_update: zeros(store),
        }
    }

    /// Applies one update from the gradients in `store`, then clears them.
    pub fn step(&mut self, store: &mut ParameterStore) {
        let (rho, delta) = (self.rho, self.delta);
        let precision = store.precision();
        for (name, p) in store.iter_mut() {
            let eg = self.sq_grad.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let ex = self.sq_update.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.value.len() {
                let gi = p.grad[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
                let dx = -((ex[i] + delta).sqrt() / (eg[i] + delta).sqrt()) * gi;
                ex[i] = rho * ex[i] + (1.0 - rho) * dx * dx;
                p.value[i] = precision.round(p.value[i] + dx);
                p.grad[i] = 0.0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub kl: f64,
    pub nll: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_kl: f64,
    pub valid_nll: f64,
}

pub const STEP_LOG_HEADER: &str = "epoch\tstep\tloss\tkl\tnll";
pub const EPOCH_LOG_HEADER: &str = "epoch\ttrain_loss\tvalid_loss\tvalid_kl\tvalid_nll";

pub fn format_step_log(records: &[StepRecord]) -> String {
    let mut out = format!("{STEP_LOG_HEADER}\n");
    for r in records {
        out.push_str(&format!("{}\t{}\t{:e}\t{:e}\t{:e}\n", r.epoch, r.step, r.loss, r.kl, r.nll));
    }
    out
}

pub fn format_epoch_log(records: &[EpochRecord]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\n",
            r.epoch, r.train_loss, r.valid_loss, r.valid_kl, r.valid_nll
        ));
    }
    out
}

/// Mutable state of a run: model, optimizer, counters and noise.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub model: Model,
    pub optimizer: Adadelta,
    pub noise: NoiseSource,
    pub epoch: usize,
    pub step: u64,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation loss seen.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

const VALID_SEED_SALT: u64 = 0x5EED_0F_7A11D;

impl Trainer {
    pub fn new(config: TrainConfig, corpus: &ParallelCorpus) -> Result<Self> {
        config.validate()?;
        let src_vocab = Vocabulary::build(corpus, Side::Source, config.src_vocab_cap)?;
        let tgt_vocab = Vocabulary::build(corpus, Side::Target, config.tgt_vocab_cap)?;
        Self::with_vocabularies(config, src_vocab, tgt_vocab)
    }

    /// Fresh model over given vocabularies, e.g. those of a checkpoint being
    /// warm-started from.
    pub fn with_vocabularies(config: TrainConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.dims, src_vocab.len(), tgt_vocab.len(), config.precision, config.seed)?;
        let optimizer = Adadelta::new(&model.store, config.rho, config.delta);
        let noise = NoiseSource::new(config.seed.wrapping_add(1));
        Ok(Trainer {
            config,
            src_vocab,
            tgt_vocab,
            model,
            optimizer,
            noise,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Trainer {
            config: ck.config,
            src_vocab: ck.src_vocab,
            tgt_vocab: ck.tgt_vocab,
            model: ck.model,
            optimizer: ck.optimizer,
            noise: ck.noise,
            epoch: ck.epoch,
            step: ck.step,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            noise: self.noise.clone(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    /// Copies every parameter of `other` whose name and shape match.
    /// Returns how many tensors were taken over.
    pub fn warm_start(&mut self, other: &Model) -> Result<usize> {
        let mut n = 0;
        for (name, p) in other.store.iter() {
            if let Some(mine) = self.model.store.get(name) {
                if mine.rows == p.rows && mine.cols == p.cols {
                    self.model.store.set(name, p.value.clone())?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            mode: self.config.mode,
            kl_weight: self.config.kl_weight_at(self.step),
            samples: self.config.samples,
            force_prior_mean: false,
        }
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, batch: &Batch, batch_index: usize) -> Result<StepRecord> {
        let opts = self.loss_options();
        let mut g = Graph::new(self.model.precision());
        let terms = elbo_loss(&mut g, &self.model, batch, &mut self.noise, opts).map_err(|e| match e {
            Error::Numerical { detail, .. } => Error::Numerical { batch: batch_index, detail },
            other => other,
        })?;
        g.backward(terms.loss)?;
        self.model.store.zero_grads();
        self.model.store.absorb_grads(&g);
        if self.config.clip > 0.0 {
            self.model.store.clip_grad_norm(self.config.clip);
        }
        self.optimizer.step(&mut self.model.store);
        let rec = StepRecord {
            epoch: self.epoch,
            step: self.step,
            loss: g.scalar(terms.loss),
            kl: terms.kl,
            nll: terms.nll,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Mean loss/kl/nll over a corpus with a fixed noise seed.
    pub fn validate(&self, corpus: &ParallelCorpus) -> Result<(f64, f64, f64)> {
        let batcher = Batcher::new(corpus, &self.src_vocab, &self.tgt_vocab, self.config.batch_size, usize::MAX, 0)?;
        let mut noise = NoiseSource::new(self.config.seed ^ VALID_SEED_SALT);
        let opts = LossOptions {
            kl_weight: self.config.kl_weight,
            ..self.loss_options()
        };
        let (mut loss, mut kl, mut nll, mut n) = (0.0, 0.0, 0.0, 0usize);
        for batch in batcher.in_order() {
            let mut g = Graph::new(self.model.precision());
            let t = elbo_loss(&mut g, &self.model, &batch, &mut noise, opts)?;
            let m = batch.size() as f64;
            loss += g.scalar(t.loss) * m;
            kl += t.kl * m;
            nll += t.nll * m;
            n += batch.size();
        }
        let n = n as f64;
        Ok((loss / n, kl / n, nll / n))
    }
}

/// Trains for `config.epochs` epochs, validating after each on `dev` (or on
/// the training data when `dev` is `None`).
pub fn train(config: TrainConfig, corpus: &ParallelCorpus, dev: Option<&ParallelCorpus>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config, corpus)?;
    train_from(trainer, corpus, dev)
}

pub fn train_from(trainer: Trainer, corpus: &ParallelCorpus, dev: Option<&ParallelCorpus>) -> Result<TrainOutcome> {
    train_with_progress(trainer, corpus, dev, |_| {})
}

/// [`train_from`] calling `on_epoch` after each validation.
pub fn train_with_progress(
    mut trainer: Trainer,
    corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let batcher = Batcher::new(
        corpus,
        &trainer.src_vocab,
        &trainer.tgt_vocab,
        trainer.config.batch_size,
        trainer.config.max_len,
        trainer.config.seed,
    )?;
    let dev = dev.unwrap_or(corpus);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut batch_index = 0usize;
    while trainer.epoch < trainer.config.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in batcher.epoch(trainer.epoch as u64) {
            let rec = trainer.train_step(&batch, batch_index)?;
            batch_index += 1;
            sum += rec.loss;
            count += 1;
            steps.push(rec);
        }
        let (valid_loss, valid_kl, valid_nll) = trainer.validate(dev)?;
        epochs.push(EpochRecord {
            epoch: trainer.epoch,
            train_loss: sum / count as f64,
            valid_loss,
            valid_kl,
            valid_nll,
        });
        on_epoch(epochs.last().expect("just pushed"));
        trainer.epoch += 1;
        if best.as_ref().is_none_or(|(b, _)| valid_loss < *b) {
            best = Some((valid_loss, trainer.checkpoint()));
        }
    }
    let last = trainer.checkpoint();
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    Ok(TrainOutcome { best, last, steps, epochs })
}

/// Held-out NLL per target token (EOS included) with the latent at the prior
/// mean, i.e. under the distribution used for translation.
pub fn heldout_token_nll(model: &Model, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, corpus: &ParallelCorpus, mode: Mode) -> Result<f64> {
    let batcher = Batcher::new(corpus, src_vocab, tgt_vocab, 64, usize::MAX, 0)?;
    let (mut total, mut tokens) = (0.0, 0usize);
    for batch in batcher.in_order() {
        let mut g = Graph::new(model.precision());
        let nll = model.decode_time_nll(&mut g, &batch, mode)?;
        let s = g.sum_all(nll);
        total += g.scalar(s);
        tokens += batch.tgt_len.iter().sum::<usize>();
    }
    Ok(total / tokens as f64)
}

/// Fraction of pairs whose greedy translation equals the reference exactly.
pub fn greedy_accuracy(model: &Model, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, corpus: &ParallelCorpus, mode: Mode) -> Result<f64> {
    let mut hits = 0usize;
    for (src, tgt) in corpus.pairs() {
        let ids = src_vocab.encode(src);
        let h = model.translate_greedy(&ids, mode, max_output_len(ids.len(), 2))?;
        if tgt_vocab.encode(tgt) == h.output() {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len() as f64)
}

/// Zeroes the three matrices that feed the latent into the decoder.
pub fn zero_latent_matrices(store: &mut ParameterStore) -> Result<()> {
    for name in LATENT_MATRICES {
        let n = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing `{name}`")))?
            .len();
        store.set(name, vec![0.0; n])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adadelta_first_step_matches_closed_form() {
        let mut s = ParameterStore::new(Precision::F64);
        s.insert("w", 1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        s.get_mut("w").unwrap().grad = vec![0.3, -1.2, 0.0];
        let mut opt = Adadelta::new(&s, 0.95, 1e-6);
        opt.step(&mut s);
        let expect = |x: f64, g: f64| x - (1e-6f64).sqrt() / ((1.0 - 0.95) * g * g + 1e-6).sqrt() * g;
        let w = &s.get("w").unwrap().value;
        assert_eq!(w[0], expect(1.0, 0.3));
        assert_eq!(w[1], expect(-2.0, -1.2));
        assert_eq!(w[2], 0.5);
        assert!(s.get("w").unwrap().grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_warmup_ramps_linearly() {
        let c = TrainConfig {
            kl_warmup_steps: 4,
            ..TrainConfig::default()
        };
        assert_eq!(c.kl_weight_at(0), 0.25);
        assert_eq!(c.kl_weight_at(3), 1.0);
        assert_eq!(c.kl_weight_at(100), 1.0);
        assert_eq!(TrainConfig::default().kl_weight_at(0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::paper_scale().validate().is_ok());
        let bad = TrainConfig {
            samples: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            kl_weight: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut dims = ModelDims::desk();
        dims.tgt_hidden = 16;
        let bad = TrainConfig { dims, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
