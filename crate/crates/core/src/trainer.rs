//! Training loop, accuracy metric, ablation ladder and metrics logging.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DomainPair;
use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients};
use crate::losses::{total_loss, Batch, LossBreakdown, LossGraph, LossWeights};
use crate::models::{ArchConfig, ModelSuite, Net};
use crate::nn::Parameterized;
use crate::optim::{SgdConfig, SgdState};
use crate::tensor::Tensor;

const SOURCE_BATCH_STREAM: u64 = 10;
const TARGET_BATCH_STREAM: u64 = 11;

/// Which loss terms a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationMode {
    /// Classification only.
    S0,
    /// S0 plus the conditional domain term.
    S1,
    /// S1 plus the translation terms.
    S2,
    /// S2 plus the cycle term: the full model.
    S3,
    /// S3 without the conditional domain term.
    S4,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [Self::S0, Self::S1, Self::S2, Self::S3, Self::S4];

    /// Loss weights this mode trains with, taking nonzero values from `base`.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let (dom, trans, cyc) = match self {
            Self::S0 => (false, false, false),
            Self::S1 => (true, false, false),
            Self::S2 => (true, true, false),
            Self::S3 => (true, true, true),
            Self::S4 => (false, true, true),
        };
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        LossWeights { lambda: on(dom, base.lambda), beta: base.beta, eta1: on(trans, base.eta1), eta2: on(cyc, base.eta2) }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::S0 => "S0",
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
            Self::S4 => "S4",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?} (expected S0..S4)")))
    }
}

/// How the min-max game is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimaxMode {
    /// One backward pass through gradient reversal nodes, one joint update.
    Grl,
    /// A discriminator ascent step, then a step for everything else.
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr / (1 + 10·t/T)^0.75`.
    InverseDecay,
}

/// Coefficient of the gradient reversal nodes over training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    /// `grl_coeff` throughout.
    Constant,
    /// `grl_coeff · (2 / (1 + exp(−10·t/T)) − 1)`: near zero while the
    /// predictor is still unreliable, approaching `grl_coeff` later.
    Progressive,
}

/// Everything that determines a run. Serialized as one flat JSON object;
/// `seed` (from the architecture) is the only source of randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub arch: ArchConfig,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub total_steps: usize,
    pub ablation_mode: AblationMode,
    pub minimax_mode: MinimaxMode,
    pub grl_coeff: f64,
    pub grl_schedule: GrlSchedule,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            arch: ArchConfig::default(),
            weights: LossWeights::default(),
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            lr_schedule: LrSchedule::Constant,
            batch_size: 32,
            total_steps: 5000,
            ablation_mode: AblationMode::S3,
            minimax_mode: MinimaxMode::Grl,
            grl_coeff: 1.0,
            grl_schedule: GrlSchedule::Progressive,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn seed(&self) -> u64 {
        self.arch.seed
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    /// Loss weights after applying the ablation mode.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation_mode.weights(&self.weights)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        self.sgd().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.grl_coeff >= 0.0 && self.grl_coeff.is_finite()) {
            return Err(Error::Config(format!("grl_coeff must be >= 0, got {}", self.grl_coeff)));
        }
        Ok(())
    }

    /// Reversal coefficient for the update after `step` completed steps.
    pub fn grl_at(&self, step: usize) -> f64 {
        match self.grl_schedule {
            GrlSchedule::Constant => self.grl_coeff,
            GrlSchedule::Progressive => {
                let t = step as f64 / self.total_steps.max(1) as f64;
                self.grl_coeff * (2.0 / (1.0 + (-10.0 * t).exp()) - 1.0)
            }
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InverseDecay => {
                let t = step as f64 / self.total_steps.max(1) as f64;
                self.lr / (1.0 + 10.0 * t).powf(0.75)
            }
        }
    }
}

/// One logged evaluation. Losses are those of the step's mini-batch before
/// the update; accuracies are measured on the full domains after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_cls: f64,
    pub l_dom: f64,
    pub l_con: f64,
    pub l_s2t: f64,
    pub l_t2s: f64,
    pub l_cyc: f64,
    pub l_total: f64,
    pub source_acc: f64,
    /// Absent when the target has no evaluation labels.
    pub target_acc: Option<f64>,
    /// Mean D_d output over equal numbers of source and target samples;
    /// absent when the domain discriminator is not trained.
    pub d_d_mean_out: Option<f64>,
}

impl MetricsRow {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_cls: self.l_cls,
            l_dom: self.l_dom,
            l_con: self.l_con,
            l_s2t: self.l_s2t,
            l_t2s: self.l_t2s,
            l_cyc: self.l_cyc,
            l_total: self.l_total,
        }
    }
}

/// Cycles through a shuffled index set, reshuffling only after every index
/// has been served once.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    epochs: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, epochs: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epochs += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    /// Completed passes over the index set.
    pub fn epochs(&self) -> usize {
        self.epochs
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub suite: ModelSuite,
    pub history: Vec<MetricsRow>,
    pub steps: usize,
    /// Target rows handed to any loss computation.
    pub target_rows_read: usize,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.history.last()
    }
}

/// Fraction of rows whose predicted class equals the label.
pub fn evaluate(suite: &ModelSuite, x: &Tensor, labels: Option<&[usize]>) -> Result<f64> {
    let labels = labels.ok_or_else(|| Error::Contract("evaluation needs labels, and none were provided".into()))?;
    if labels.len() != x.shape()[0] {
        return Err(Error::shape("evaluate", format!("{} labels for {} rows", labels.len(), x.shape()[0])));
    }
    let pred = suite.predict_labels(x)?;
    Ok(accuracy(&pred, labels))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Mean D_d output over the first `min(n_s, n_t)` rows of each domain.
pub fn domain_disc_mean(suite: &ModelSuite, data: &DomainPair) -> Result<f64> {
    let m = data.n_source().min(data.n_target());
    let idx: Vec<usize> = (0..m).collect();
    let s = suite.domain_scores(&data.source_inputs().gather_rows(&idx))?;
    let t = suite.domain_scores(&data.target_inputs().gather_rows(&idx))?;
    Ok((s.sum() + t.sum()) / (2 * m) as f64)
}

fn abort(step: usize, err: Error, last: &Option<LossBreakdown>) -> Error {
    if matches!(err, Error::Aborted { .. }) {
        return err;
    }
    let diagnostic = serde_json::to_string(last).unwrap_or_default();
    Error::Aborted { step, reason: err.to_string(), diagnostic }
}

fn take_slots(suite_slots: Vec<Option<crate::graph::Var>>, grads: &mut Gradients, keep: impl Fn(usize) -> bool) -> Vec<Option<Tensor>> {
    suite_slots
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.filter(|_| keep(i)).and_then(|v| grads.take(v)))
        .collect()
}

struct Stepper<'a> {
    cfg: &'a TrainConfig,
    weights: LossWeights,
    active: Vec<Net>,
    /// For each parameter tensor, whether it belongs to a discriminator.
    is_disc: Vec<bool>,
}

impl Stepper<'_> {
    fn build(&self, suite: &ModelSuite, g: &mut Graph, batch: Batch<'_>, grl: Option<f64>) -> Result<(LossGraph, Vec<Option<crate::graph::Var>>)> {
        let bound = suite.bind(g, &self.active);
        let lg = total_loss(g, &bound, suite.conditioner(), batch, &self.weights, grl)?;
        Ok((lg, bound.param_vars()))
    }

    fn step(&self, suite: &mut ModelSuite, opt: &mut SgdState, batch: Batch<'_>, grl: f64) -> Result<LossBreakdown> {
        match self.cfg.minimax_mode {
            MinimaxMode::Grl => {
                let mut g = Graph::new();
                let (lg, vars) = self.build(suite, &mut g, batch, Some(grl))?;
                let mut grads = g.backward(lg.objective)?;
                let mut slots = take_slots(vars, &mut grads, |_| true);
                opt.step(&mut suite.params_mut(), &mut slots)?;
                Ok(lg.breakdown)
            }
            MinimaxMode::Alternating => {
                let mut g = Graph::new();
                let (lg, vars) = self.build(suite, &mut g, batch, None)?;
                let breakdown = lg.breakdown;
                if let Some(adv) = lg.adversarial {
                    let ascend = g.scale(adv, -1.0)?;
                    let mut grads = g.backward(ascend)?;
                    let mut slots = take_slots(vars, &mut grads, |i| self.is_disc[i]);
                    opt.step(&mut suite.params_mut(), &mut slots)?;
                }
                let mut g = Graph::new();
                let (lg, vars) = self.build(suite, &mut g, batch, None)?;
                let mut grads = g.backward(lg.total)?;
                let mut slots = take_slots(vars, &mut grads, |i| !self.is_disc[i]);
                opt.step(&mut suite.params_mut(), &mut slots)?;
                Ok(breakdown)
            }
        }
    }
}

fn disc_mask(suite: &ModelSuite) -> Vec<bool> {
    let mut mask = vec![false; suite.params().len()];
    for (net, range) in suite.param_ranges() {
        mask[range].iter_mut().for_each(|m| *m = net.is_discriminator());
    }
    mask
}

/// Runs `cfg.total_steps` updates on `data` and logs a [`MetricsRow`] every
/// `eval_every` steps and after the last step.
pub fn train(cfg: &TrainConfig, data: &DomainPair) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.num_classes() != cfg.arch.num_classes || data.input_dim() != cfg.arch.input_dim {
        return Err(Error::Config(format!(
            "data has {} features and {} classes, architecture expects {} and {}",
            data.input_dim(),
            data.num_classes(),
            cfg.arch.input_dim,
            cfg.arch.num_classes
        )));
    }
    let mut suite = ModelSuite::build(&cfg.arch)?;
    let mut opt = SgdState::new(cfg.sgd(), &suite.params())?;
    let weights = cfg.effective_weights();
    let stepper = Stepper { cfg, weights, active: weights.active_nets(), is_disc: disc_mask(&suite) };

    let mut src = BatchStream::new(data.n_source(), cfg.seed(), SOURCE_BATCH_STREAM);
    let mut tgt = BatchStream::new(data.n_target(), cfg.seed(), TARGET_BATCH_STREAM);
    let mut history = Vec::new();
    let mut target_rows_read = 0;
    let mut last: Option<LossBreakdown> = None;

    for step in 1..=cfg.total_steps {
        opt.set_lr(cfg.lr_at(step - 1));
        let idx = src.next_batch(cfg.batch_size);
        let x_s = data.source_inputs().gather_rows(&idx);
        let y_s: Vec<usize> = idx.iter().map(|&i| data.source_labels()[i]).collect();
        let x_t = weights.needs_target().then(|| {
            target_rows_read += cfg.batch_size;
            data.target_inputs().gather_rows(&tgt.next_batch(cfg.batch_size))
        });
        let batch = Batch { x_s: &x_s, y_s: &y_s, x_t: x_t.as_ref() };
        let breakdown = stepper.step(&mut suite, &mut opt, batch, cfg.grl_at(step - 1)).map_err(|e| abort(step, e, &last))?;
        if let Some(index) = suite.params().iter().find_map(|p| p.first_non_finite()) {
            let err = Error::NonFinite { op: "sgd_step", index };
            return Err(abort(step, err, &Some(breakdown)));
        }
        last = Some(breakdown);

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let source_acc = evaluate(&suite, data.source_inputs(), Some(data.source_labels()))?;
            let target_acc = match data.target_eval_labels() {
                Some(y) => Some(evaluate(&suite, data.target_inputs(), Some(y))?),
                None => None,
            };
            let d_d_mean_out = if weights.lambda > 0.0 { Some(domain_disc_mean(&suite, data)?) } else { None };
            let b = breakdown;
            history.push(MetricsRow {
                step,
                l_cls: b.l_cls,
                l_dom: b.l_dom,
                l_con: b.l_con,
                l_s2t: b.l_s2t,
                l_t2s: b.l_t2s,
                l_cyc: b.l_cyc,
                l_total: b.l_total,
                source_acc,
                target_acc,
                d_d_mean_out,
            });
        }
    }
    Ok(TrainOutcome { suite, history, steps: cfg.total_steps, target_rows_read })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "l_cls",
    "l_dom",
    "l_con",
    "l_s2t",
    "l_t2s",
    "l_cyc",
    "l_total",
    "source_acc",
    "target_acc",
    "d_d_mean_out",
];

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Schema(format!("metrics csv: {other:?}")),
    }
}

/// Spread (max − min) of the trailing `window`-row mean of target accuracy,
/// taken over rows logged in the final `tail` fraction of training.
pub fn stability_band(history: &[MetricsRow], total_steps: usize, tail: f64, window: usize) -> Option<f64> {
    let acc: Vec<f64> = history.iter().map(|r| r.target_acc).collect::<Option<_>>()?;
    let start = total_steps as f64 * (1.0 - tail);
    let window = window.max(1);
    let means: Vec<f64> = history
        .iter()
        .enumerate()
        .filter(|(_, r)| r.step as f64 > start)
        .map(|(i, _)| {
            let lo = (i + 1).saturating_sub(window);
            acc[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect();
    if means.is_empty() {
        return None;
    }
    let max = means.iter().copied().fold(f64::MIN, f64::max);
    let min = means.iter().copied().fold(f64::MAX, f64::min);
    Some(max - min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub mean: f64,
    pub std: f64,
    /// Final target accuracy per seed, in seed order.
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean(&self, mode: AblationMode) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.mean)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["mode".to_string(), "mean".into(), "std".into()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.mode.name().to_string(), r.mean.to_string(), r.std.to_string()];
            rec.extend(r.per_seed.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every mode in `modes` for every seed (in parallel) and reports the
/// final target accuracy per mode.
pub fn ablation_run(base: &TrainConfig, data: &DomainPair, seeds: &[u64], modes: &[AblationMode]) -> Result<AblationTable> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("an ablation needs at least 2 seeds, got {}", seeds.len())));
    }
    let labels = data
        .target_eval_labels()
        .ok_or_else(|| Error::Contract("ablation needs target evaluation labels".into()))?;
    let jobs: Vec<(AblationMode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let accs = jobs
        .par_iter()
        .map(|&(mode, seed)| {
            let mut cfg = base.clone();
            cfg.ablation_mode = mode;
            cfg.arch.seed = seed;
            let out = train(&cfg, data)?;
            evaluate(&out.suite, data.target_inputs(), Some(labels))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = modes
        .iter()
        .zip(accs.chunks(seeds.len()))
        .map(|(&mode, per_seed)| {
            let (mean, std) = mean_std(per_seed);
            AblationRow { mode, mean, std, per_seed: per_seed.to_vec() }
        })
        .collect();
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}
