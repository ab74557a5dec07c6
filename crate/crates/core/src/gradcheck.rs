//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{multilinear_condition, randomized_condition, RandomizedMaps};
use crate::data::{gen_two_moons_pair, ShiftSpec};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::losses::{
    cross_entropy, cycle_loss, domain_adversarial_loss, total_loss, translation_loss_s2t, translation_loss_t2s, Batch,
    LossWeights, LOG_FLOOR,
};
use crate::models::{ArchConfig, ModelSuite, Net};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that two gradients that are
/// both ~0 do not produce a spurious large ratio.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub eps: f64,
    pub tol: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4 }
    }
}

/// Result for one input tensor.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_error: f64,
    /// Element index of the worst relative error.
    pub worst_element: usize,
    pub analytic_max: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub components: Vec<InputReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Input index and element of the worst mismatch.
    pub fn worst(&self) -> Option<&InputReport> {
        self.components.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_terms<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<(Var, Vec<Var>)>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), false))
        .collect::<Result<_>>()?;
    let (_, terms) = f(&mut g, &vars)?;
    terms
        .iter()
        .map(|&t| {
            let v = g.value(t);
            if v.is_scalar() {
                Ok(v.item())
            } else {
                Err(Error::Contract(format!("checked function must return scalars, got {:?}", v.shape())))
            }
        })
        .collect()
}

/// Compares the analytic gradient of the scalar function `f` with respect to
/// every element of every input against the central difference
/// `(f(x+eps) - f(x-eps)) / 2eps`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], settings: CheckSettings) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_sum(
        |g, v| {
            let out = f(g, v)?;
            Ok((out, vec![out]))
        },
        inputs,
        settings,
    )
}

/// Like [`finite_diff_check`] for a function that is a sum of scalar terms.
/// `f` returns the sum node and its summands; the analytic gradient comes
/// from the sum, while the numeric one differences each summand separately
/// and adds the results. When one term changes by far less than the rounding
/// unit of the whole sum, this keeps the reference from being swamped.
pub fn finite_diff_check_sum<F>(f: F, inputs: &[Tensor], settings: CheckSettings) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<(Var, Vec<Var>)>,
{
    if !(settings.eps > 0.0 && settings.eps <= 1e-2) {
        return Err(Error::Contract(format!("eps must lie in (0, 1e-2], got {}", settings.eps)));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect::<Result<_>>()?;
    let (out, terms) = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::Contract(format!("checked function must return a scalar, got {:?}", g.shape(out))));
    }
    let term_sum: f64 = terms.iter().map(|&t| g.value(t).item()).sum();
    let out_value = g.value(out).item();
    if (term_sum - out_value).abs() > 1e-12 * out_value.abs().max(1.0) {
        return Err(Error::Contract(format!("summands add to {term_sum}, but the function is {out_value}")));
    }
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut work = inputs.to_vec();
    let mut components = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut rep = InputReport {
            input: i,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic_max: a.data().iter().fold(0.0f64, |m, x| m.max(x.abs())),
        };
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            let wrap = |e: Error| Error::GradCheck { input: i, element: j, source: Box::new(e) };
            work[i].data_mut()[j] = orig + settings.eps;
            let plus = eval_terms(&f, &work).map_err(wrap)?;
            work[i].data_mut()[j] = orig - settings.eps;
            let minus = eval_terms(&f, &work).map_err(wrap)?;
            work[i].data_mut()[j] = orig;
            let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
            let numeric = diff / (2.0 * settings.eps);
            let err = relative_error(a.data()[j], numeric);
            if err > rep.max_rel_error || err.is_nan() {
                rep.max_rel_error = err;
                rep.worst_element = j;
            }
        }
        components.push(rep);
    }
    let max_rel_error = components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { passed: max_rel_error < settings.tol, max_rel_error, components })
}

/// Named scalar function plus the inputs it is checked at.
type CheckFn<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>;

/// Outcome of one named component of [`run_suite`].
#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub name: &'static str,
    pub report: GradCheckReport,
    /// Human-readable location of the worst element, e.g.
    /// `feature.layer1.weight[7]`.
    pub worst_location: String,
}

/// Every component name understood by [`run_suite`], in run order.
pub const COMPONENTS: &[&str] = &[
    "matmul",
    "matmul_t",
    "add_row",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "relu",
    "tanh",
    "sigmoid",
    "log_sigmoid",
    "log_softmax",
    "pick",
    "sum",
    "mean",
    "row_sum",
    "outer_product",
    "row_outer",
    "row_normalize",
    "grad_reversal",
    "conditioning_exact",
    "conditioning_randomized",
    "classification",
    "domain",
    "s2t",
    "t2s",
    "cycle",
    "total",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

/// Weighted sum so that each output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, g.shape(y)));
    let m = g.mul(y, w)?;
    g.sum(m)
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Result<Option<(CheckFn<'static>, Vec<Tensor>)>> {
    let a = rand_tensor(rng, &[3, 4]);
    let case: (CheckFn<'static>, Vec<Tensor>) = match name {
        "matmul" => (Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y, 1) }), vec![a, rand_tensor(rng, &[4, 5])]),
        "matmul_t" => (Box::new(|g, v| { let y = g.matmul_t(v[0], v[1])?; weighted_sum(g, y, 2) }), vec![a, rand_tensor(rng, &[5, 4])]),
        "add_row" => (Box::new(|g, v| { let y = g.add_row(v[0], v[1])?; weighted_sum(g, y, 3) }), vec![a, rand_tensor(rng, &[4])]),
        "transpose" => (Box::new(|g, v| { let y = g.transpose(v[0])?; weighted_sum(g, y, 4) }), vec![a]),
        "add" => (Box::new(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y, 5) }), vec![a, rand_tensor(rng, &[3, 4])]),
        "sub" => (Box::new(|g, v| { let y = g.sub(v[0], v[1])?; weighted_sum(g, y, 6) }), vec![a, rand_tensor(rng, &[3, 4])]),
        "mul" => (Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y, 7) }), vec![a, rand_tensor(rng, &[3, 4])]),
        "scale" => (Box::new(|g, v| { let y = g.scale(v[0], -2.5)?; weighted_sum(g, y, 8) }), vec![a]),
        "exp" => (Box::new(|g, v| { let y = g.exp(v[0])?; weighted_sum(g, y, 9) }), vec![a]),
        // Inputs are drawn from (-1, 1); a kink within eps of an entry has
        // negligible probability.
        "relu" => (Box::new(|g, v| { let y = g.relu(v[0])?; weighted_sum(g, y, 10) }), vec![a]),
        "tanh" => (Box::new(|g, v| { let y = g.tanh(v[0])?; weighted_sum(g, y, 11) }), vec![a]),
        "sigmoid" => (Box::new(|g, v| { let y = g.sigmoid(v[0])?; weighted_sum(g, y, 12) }), vec![a]),
        "log_sigmoid" => {
            (Box::new(|g, v| { let y = g.log_sigmoid(v[0], LOG_FLOOR)?; weighted_sum(g, y, 13) }), vec![a.map(|x| 4.0 * x)])
        }
        "log_softmax" => (Box::new(|g, v| { let y = g.log_softmax(v[0])?; weighted_sum(g, y, 14) }), vec![a]),
        "pick" => (Box::new(|g, v| { let y = g.pick(v[0], &[1, 3, 0])?; weighted_sum(g, y, 15) }), vec![a]),
        "sum" => (Box::new(|g, v| { let y = g.tanh(v[0])?; g.sum(y) }), vec![a]),
        "mean" => (Box::new(|g, v| { let y = g.tanh(v[0])?; g.mean(y) }), vec![a]),
        "row_sum" => (Box::new(|g, v| { let y = g.row_sum(v[0])?; weighted_sum(g, y, 16) }), vec![a]),
        "outer_product" => {
            (Box::new(|g, v| { let y = g.outer_product(v[0], v[1])?; weighted_sum(g, y, 17) }), vec![rand_tensor(rng, &[3]), rand_tensor(rng, &[2])])
        }
        "row_outer" => (Box::new(|g, v| { let y = g.row_outer(v[0], v[1])?; weighted_sum(g, y, 18) }), vec![a, rand_tensor(rng, &[3, 2])]),
        "row_normalize" => (Box::new(|g, v| { let y = g.row_normalize(v[0], 2.0, 1e-8)?; weighted_sum(g, y, 19) }), vec![a]),
        // Reversal deliberately breaks agreement with finite differences, so
        // it is checked through a pair whose coefficients cancel: a wrong sign
        // or an ignored coefficient leaves a factor other than 1.
        "grad_reversal" => (
            Box::new(|g, v| {
                let r = g.grad_reversal(v[0], 0.5)?;
                let r = g.grad_reversal(r, 2.0)?;
                let y = g.tanh(r)?;
                weighted_sum(g, y, 20)
            }),
            vec![a],
        ),
        "conditioning_exact" => (
            Box::new(|g, v| {
                let y = multilinear_condition(g, v[0], v[1], usize::MAX)?;
                weighted_sum(g, y, 21)
            }),
            vec![a, rand_tensor(rng, &[3, 2])],
        ),
        "conditioning_randomized" => {
            let maps = RandomizedMaps::from_seed(4, 2, 8, 22)?;
            (
                Box::new(move |g, v| {
                    let y = randomized_condition(g, v[0], v[1], &maps)?;
                    weighted_sum(g, y, 23)
                }),
                vec![a, rand_tensor(rng, &[3, 2])],
            )
        }
        _ => return Ok(None),
    };
    Ok(Some(case))
}

/// Architecture for the per-term loss checks. Smooth activations keep every
/// parameter away from kinks.
fn compact_arch(seed: u64) -> ArchConfig {
    ArchConfig {
        feature_dim: 4,
        feature_hidden: 6,
        domain_hidden: 5,
        translator_hidden: 5,
        sample_disc_hidden: 5,
        feature_activation: Activation::Tanh,
        disc_activation: Activation::Tanh,
        translator_activation: Activation::Tanh,
        seed,
        ..Default::default()
    }
}

fn param_location(suite: &ModelSuite, input: usize, element: usize) -> String {
    for (net, range) in suite.param_ranges() {
        if range.contains(&input) {
            let k = input - range.start;
            let part = if k % 2 == 0 { "weight" } else { "bias" };
            return format!("{}.layer{}.{part}[{element}]", net.name(), k / 2);
        }
    }
    format!("input{input}[{element}]")
}

fn loss_case(name: &str, suite: &ModelSuite, x_s: &Tensor, y_s: &[usize], x_t: &Tensor, settings: CheckSettings) -> Result<Option<GradCheckReport>> {
    let params: Vec<Tensor> = suite.params().into_iter().cloned().collect();
    let w = LossWeights::default();
    let f = |g: &mut Graph, vars: &[Var]| -> Result<(Var, Vec<Var>)> {
        let b = suite.bind_vars(vars)?;
        let xs = g.constant(x_s.clone());
        let xt = g.constant(x_t.clone());
        let f_s = b.features(g, xs)?;
        let f_t = b.features(g, xt)?;
        let pred = b.get(Net::Predictor)?;
        let single = |v: Var| (v, vec![v]);
        match name {
            "classification" => {
                let lp = pred.forward(g, f_s)?;
                cross_entropy(g, lp, y_s).map(single)
            }
            "domain" => {
                let lp_s = pred.forward(g, f_s)?;
                let lp_t = pred.forward(g, f_t)?;
                let p_s = g.exp(lp_s)?;
                let p_t = g.exp(lp_t)?;
                domain_adversarial_loss(g, &b, suite.conditioner(), f_s, p_s, f_t, p_t, None).map(single)
            }
            "s2t" => Ok(single(translation_loss_s2t(g, &b, f_s, y_s, f_t, w.beta, None)?.total)),
            "t2s" => translation_loss_t2s(g, &b, f_s, f_t, None).map(single),
            "cycle" => cycle_loss(g, &b, f_s, f_t).map(single),
            "total" => {
                let batch = Batch { x_s, y_s, x_t: Some(x_t) };
                let lg = total_loss(g, &b, suite.conditioner(), batch, &w, None)?;
                Ok((lg.total, lg.summands))
            }
            other => Err(Error::Contract(format!("unknown loss component {other}"))),
        }
    };
    if !["classification", "domain", "s2t", "t2s", "cycle", "total"].contains(&name) {
        return Ok(None);
    }
    finite_diff_check_sum(f, &params, settings).map(Some)
}

/// Runs the named components (all of them when `filter` is empty). Loss
/// components use a seeded 4-sample batch; `total` checks the full objective
/// at the default widths (with tanh activations) and default loss weights.
pub fn run_suite(filter: &[String], settings: CheckSettings, seed: u64) -> Result<Vec<ComponentReport>> {
    if let Some(bad) = filter.iter().find(|f| !COMPONENTS.contains(&f.as_str())) {
        return Err(Error::Config(format!("unknown gradcheck component {bad:?}; known: {}", COMPONENTS.join(", "))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = gen_two_moons_pair(4, &ShiftSpec::default(), seed)?;
    let (x_s, x_t) = (data.source_inputs(), data.target_inputs());
    let y_s = data.source_labels();
    let compact = ModelSuite::build(&compact_arch(seed))?;
    // Default widths, smooth activations: a ReLU kink inside the stencil
    // makes the central difference meaningless. ReLU is checked on its own.
    let full = ModelSuite::build(&ArchConfig {
        feature_activation: Activation::Tanh,
        disc_activation: Activation::Tanh,
        translator_activation: Activation::Tanh,
        seed,
        ..Default::default()
    })?;

    let mut out = Vec::new();
    for &name in COMPONENTS {
        if !filter.is_empty() && !filter.iter().any(|f| f == name) {
            continue;
        }
        let (report, suite) = match op_case(name, &mut rng)? {
            Some((f, inputs)) => (finite_diff_check(f, &inputs, settings)?, None),
            None => {
                let suite = if name == "total" { &full } else { &compact };
                let report = loss_case(name, suite, x_s, y_s, x_t, settings)?.expect("every component is an op or a loss");
                (report, Some(suite))
            }
        };
        let worst_location = match (report.worst(), suite) {
            (Some(w), Some(s)) => param_location(s, w.input, w.worst_element),
            (Some(w), None) => format!("input{}[{}]", w.input, w.worst_element),
            (None, _) => String::new(),
        };
        out.push(ComponentReport { name, report, worst_location });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0, 7.0]);
        let report = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.scale(sq, 1.5)?;
                g.sum(s)
            },
            &[x],
            CheckSettings::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn corrupted_gradient_fails() {
        // grad_reversal leaves the forward value alone but flips the
        // backward sign, so the analytic gradient is wrong by construction.
        let x = Tensor::vector(vec![0.5, 1.0, -0.25]);
        let report = finite_diff_check(
            |g, v| {
                let r = g.grad_reversal(v[0], 1.0)?;
                let sq = g.mul(r, r)?;
                g.sum(sq)
            },
            &[x],
            CheckSettings::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 1.0);
    }

    #[test]
    fn non_finite_intermediate_reports_location() {
        // exp overflows once the perturbation pushes x past ln(f64::MAX) ~ 709.7827.
        let x = Tensor::vector(vec![0.0, 709.78]);
        let err = finite_diff_check(
            |g, v| {
                let e = g.exp(v[0])?;
                g.sum(e)
            },
            &[x],
            CheckSettings { eps: 1e-2, tol: 1e-4 },
        )
        .unwrap_err();
        match err {
            Error::GradCheck { input: 0, element: 1, source } => {
                assert!(matches!(*source, Error::NonFinite { op: "exp", .. }))
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let x = Tensor::scalar(1.0);
        for eps in [0.0, 0.1, -1e-5] {
            let r = finite_diff_check(|g, v| g.sum(v[0]), &[x.clone()], CheckSettings { eps, tol: 1e-4 });
            assert!(matches!(r, Err(Error::Contract(_))));
        }
    }
}
