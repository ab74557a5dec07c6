//! Loss terms of the transfer objective and their assembly.
//!
//! Reported values follow the game's sign convention: the adversarial terms
//! are log-likelihoods that discriminators maximize and the other networks
//! minimize. Every expectation is a mini-batch mean.
//!
//! ```text
//! l_con   = l_cls + λ·l_dom
//! l_s2t   = E[log D_t(f_t)] + E[log(1 − D_t(T_s2t(f_s)))] + β·CE(P(T_s2t(f_s)), y_s)
//! l_t2s   = E[log D_s(f_s)] + E[log(1 − D_s(T_t2s(f_t)))]
//! l_cyc   = E‖T_t2s(T_s2t(f_s)) − f_s‖² + E‖T_s2t(T_t2s(f_t)) − f_t‖²
//! l_total = l_con + η1·(l_s2t + l_t2s) + η2·l_cyc
//! ```
//!
//! With gradient reversal enabled, every discriminator input passes through a
//! reversal node and the scalar handed to `backward` is
//! `objective = l_total − 2·A`, where `A` collects the weighted adversarial
//! log-likelihoods. A single descent step on `objective` then moves the
//! discriminators up the gradient of `l_total` and every other network down it.

use serde::{Deserialize, Serialize};

use crate::conditioning::Conditioner;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{BoundSuite, Direction, Net};
use crate::nn::BoundMlp;
use crate::tensor::Tensor;

/// Lower bound on every log argument.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub eta1: f64,
    pub eta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.0, beta: 1.0, eta1: 0.01, eta2: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("eta1", self.eta1), ("eta2", self.eta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Networks that take part in a graph built with these weights.
    pub fn active_nets(&self) -> Vec<Net> {
        let mut nets = vec![Net::Feature, Net::Predictor];
        if self.lambda > 0.0 {
            nets.push(Net::DomainDisc);
        }
        if self.eta1 > 0.0 || self.eta2 > 0.0 {
            nets.extend([Net::S2t, Net::T2s]);
        }
        if self.eta1 > 0.0 {
            nets.extend([Net::SourceDisc, Net::TargetDisc]);
        }
        nets.sort();
        nets
    }

    pub fn needs_target(&self) -> bool {
        self.lambda > 0.0 || self.eta1 > 0.0 || self.eta2 > 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_dom: f64,
    pub l_con: f64,
    pub l_s2t: f64,
    pub l_t2s: f64,
    pub l_cyc: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Largest deviation from the two additivity identities.
    pub fn identity_residual(&self, w: &LossWeights) -> f64 {
        let con = self.l_cls + w.lambda * self.l_dom;
        let total = self.l_con + w.eta1 * (self.l_s2t + self.l_t2s) + w.eta2 * self.l_cyc;
        (self.l_con - con).abs().max((self.l_total - total).abs())
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_dom, self.l_con, self.l_s2t, self.l_t2s, self.l_cyc, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `-mean_i log_probs[i, labels[i]]`.
pub fn cross_entropy(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    let [rows, classes] = shape[..] else {
        return Err(Error::shape("cross_entropy", format!("expected [batch, C], got {shape:?}")));
    };
    if labels.len() != rows {
        return Err(Error::shape("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    let picked = g.pick(log_probs, labels)?;
    let m = g.mean(picked)?;
    g.scale(m, -1.0)
}

fn maybe_reverse(g: &mut Graph, x: Var, grl: Option<f64>) -> Result<Var> {
    match grl {
        Some(c) => g.grad_reversal(x, c),
        None => Ok(x),
    }
}

/// `E[log D(real)] + E[log(1 − D(fake))]` computed from logits, with both
/// inputs passed through gradient reversal when `grl` is set.
pub fn binary_log_likelihood(g: &mut Graph, disc: &BoundMlp, real: Var, fake: Var, grl: Option<f64>) -> Result<Var> {
    let real = maybe_reverse(g, real, grl)?;
    let fake = maybe_reverse(g, fake, grl)?;
    let z_real = disc.forward_logits(g, real)?;
    let z_fake = disc.forward_logits(g, fake)?;
    let log_d_real = g.log_sigmoid(z_real, LOG_FLOOR)?;
    // log(1 − σ(z)) = log σ(−z)
    let neg_fake = g.scale(z_fake, -1.0)?;
    let log_not_d_fake = g.log_sigmoid(neg_fake, LOG_FLOOR)?;
    let a = g.mean(log_d_real)?;
    let b = g.mean(log_not_d_fake)?;
    g.add(a, b)
}

/// Conditional domain term: D_d sees `δ(f_s, p_s)` as real and `δ(f_t, p_t)`
/// as fake.
#[allow(clippy::too_many_arguments)]
pub fn domain_adversarial_loss(
    g: &mut Graph,
    bound: &BoundSuite,
    conditioner: &Conditioner,
    f_s: Var,
    p_s: Var,
    f_t: Var,
    p_t: Var,
    grl: Option<f64>,
) -> Result<Var> {
    let h_s = conditioner.apply(g, f_s, p_s)?;
    let h_t = conditioner.apply(g, f_t, p_t)?;
    binary_log_likelihood(g, bound.get(Net::DomainDisc)?, h_s, h_t, grl)
}

/// Pieces of the source-to-target translation loss.
#[derive(Clone, Copy, Debug)]
pub struct S2tTerms {
    pub adversarial: Var,
    /// Cross-entropy of the predictor on translated source features against
    /// the source labels.
    pub semantic: Var,
    pub total: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn translation_loss_s2t(
    g: &mut Graph,
    bound: &BoundSuite,
    f_s: Var,
    y_s: &[usize],
    f_t: Var,
    beta: f64,
    grl: Option<f64>,
) -> Result<S2tTerms> {
    let translated = bound.translate(g, Direction::S2t, f_s)?;
    let adversarial = binary_log_likelihood(g, bound.get(Net::TargetDisc)?, f_t, translated, grl)?;
    let log_probs = bound.get(Net::Predictor)?.forward(g, translated)?;
    let semantic = cross_entropy(g, log_probs, y_s)?;
    let weighted = g.scale(semantic, beta)?;
    let total = g.add(adversarial, weighted)?;
    Ok(S2tTerms { adversarial, semantic, total })
}

pub fn translation_loss_t2s(g: &mut Graph, bound: &BoundSuite, f_s: Var, f_t: Var, grl: Option<f64>) -> Result<Var> {
    let translated = bound.translate(g, Direction::T2s, f_t)?;
    binary_log_likelihood(g, bound.get(Net::SourceDisc)?, f_s, translated, grl)
}

fn mean_sq_dist(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let per_row = g.row_sum(sq)?;
    g.mean(per_row)
}

/// Round-trip reconstruction error through both translators.
pub fn cycle_loss(g: &mut Graph, bound: &BoundSuite, f_s: Var, f_t: Var) -> Result<Var> {
    let ft_hat = bound.translate(g, Direction::S2t, f_s)?;
    let fs_back = bound.translate(g, Direction::T2s, ft_hat)?;
    let fs_hat = bound.translate(g, Direction::T2s, f_t)?;
    let ft_back = bound.translate(g, Direction::S2t, fs_hat)?;
    let a = mean_sq_dist(g, fs_back, f_s)?;
    let b = mean_sq_dist(g, ft_back, f_t)?;
    g.add(a, b)
}

/// One mini-batch: labeled source rows and (optionally) unlabeled target rows.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x_s: &'a Tensor,
    pub y_s: &'a [usize],
    pub x_t: Option<&'a Tensor>,
}

/// Graph handles produced by [`total_loss`].
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub breakdown: LossBreakdown,
    /// `l_total` as a node.
    pub total: Var,
    /// Weighted adversarial log-likelihoods (`A`), if any term is active.
    pub adversarial: Option<Var>,
    /// Scalar to differentiate. Equals `total` when `grl` is `None`.
    pub objective: Var,
    /// Source features and predictions, for reuse by callers.
    pub f_s: Var,
    pub p_s: Var,
    /// Weighted pieces whose sum is `total`. Differencing each piece on its
    /// own avoids rounding small changes against the full loss value.
    pub summands: Vec<Var>,
}

/// Builds every active loss term for one batch. Terms whose weight is zero
/// are not built and report 0. `grl = Some(c)` inserts reversal nodes with
/// coefficient `c` before each discriminator; `None` builds the plain
/// function `l_total`, which is what finite differences can check.
pub fn total_loss(
    g: &mut Graph,
    bound: &BoundSuite,
    conditioner: &Conditioner,
    batch: Batch<'_>,
    weights: &LossWeights,
    grl: Option<f64>,
) -> Result<LossGraph> {
    let x_s = g.leaf(batch.x_s.clone(), false)?;
    let f_s = bound.features(g, x_s)?;
    let logp_s = bound.get(Net::Predictor)?.forward(g, f_s)?;
    let p_s = g.exp(logp_s)?;
    let l_cls = cross_entropy(g, logp_s, batch.y_s)?;

    let target = if weights.needs_target() {
        let x_t = batch
            .x_t
            .ok_or_else(|| Error::Contract("active transfer terms need a target batch".into()))?;
        let x_t = g.leaf(x_t.clone(), false)?;
        let f_t = bound.features(g, x_t)?;
        Some(f_t)
    } else {
        None
    };

    let zero = g.constant(Tensor::scalar(0.0));
    let mut adversarial: Vec<Var> = Vec::new();
    let mut semantic_weighted: Option<Var> = None;

    let l_dom = match target {
        Some(f_t) if weights.lambda > 0.0 => {
            let logp_t = bound.get(Net::Predictor)?.forward(g, f_t)?;
            let p_t = g.exp(logp_t)?;
            let l = domain_adversarial_loss(g, bound, conditioner, f_s, p_s, f_t, p_t, grl)?;
            adversarial.push(g.scale(l, weights.lambda)?);
            l
        }
        _ => zero,
    };

    let mut summands = vec![l_cls];
    if weights.lambda > 0.0 && target.is_some() {
        summands.push(g.scale(l_dom, weights.lambda)?);
    }

    let (l_s2t, l_t2s) = match target {
        Some(f_t) if weights.eta1 > 0.0 => {
            let s2t = translation_loss_s2t(g, bound, f_s, batch.y_s, f_t, weights.beta, grl)?;
            let t2s = translation_loss_t2s(g, bound, f_s, f_t, grl)?;
            let adv = g.add(s2t.adversarial, t2s)?;
            adversarial.push(g.scale(adv, weights.eta1)?);
            let sem = g.scale(s2t.semantic, weights.eta1 * weights.beta)?;
            semantic_weighted = Some(sem);
            summands.push(g.scale(s2t.adversarial, weights.eta1)?);
            summands.push(sem);
            summands.push(g.scale(t2s, weights.eta1)?);
            (s2t.total, t2s)
        }
        _ => (zero, zero),
    };

    let l_cyc = match target {
        Some(f_t) if weights.eta2 > 0.0 => cycle_loss(g, bound, f_s, f_t)?,
        _ => zero,
    };

    let dom_w = g.scale(l_dom, weights.lambda)?;
    let l_con = g.add(l_cls, dom_w)?;
    let trans = g.add(l_s2t, l_t2s)?;
    let trans_w = g.scale(trans, weights.eta1)?;
    let cyc_w = g.scale(l_cyc, weights.eta2)?;
    if weights.eta2 > 0.0 && target.is_some() {
        summands.push(cyc_w);
    }
    let total = g.add(l_con, trans_w)?;
    let total = g.add(total, cyc_w)?;

    let adversarial = match adversarial.as_slice() {
        [] => None,
        [a] => Some(*a),
        [a, b] => Some(g.add(*a, *b)?),
        _ => unreachable!("at most two adversarial groups"),
    };

    let objective = match (grl, adversarial) {
        (Some(_), Some(adv)) => {
            // l_cls + η1·β·CE(translated) + η2·l_cyc − A
            let mut obj = l_cls;
            if let Some(sem) = semantic_weighted {
                obj = g.add(obj, sem)?;
            }
            if weights.eta2 > 0.0 {
                obj = g.add(obj, cyc_w)?;
            }
            g.sub(obj, adv)?
        }
        _ => total,
    };

    let v = |g: &Graph, x: Var| g.value(x).item();
    let breakdown = LossBreakdown {
        l_cls: v(g, l_cls),
        l_dom: v(g, l_dom),
        l_con: v(g, l_con),
        l_s2t: v(g, l_s2t),
        l_t2s: v(g, l_t2s),
        l_cyc: v(g, l_cyc),
        l_total: v(g, total),
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFinite { op: "total_loss", index: 0 });
    }
    Ok(LossGraph { breakdown, total, adversarial, objective, f_s, p_s, summands })
}
