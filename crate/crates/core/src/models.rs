//! The seven networks of the transfer model and their wiring.
//!
//! ```text
//! x ─ F ─ f ─ P ─ p
//!          \      \
//!           └─ δ(f, p) ─ D_d
//! f_s ─ T_s2t ─ f̂_t ─ D_t ← f_t        f̂_t ─ T_t2s ─ (cycle back to f_s)
//! f_t ─ T_t2s ─ f̂_s ─ D_s ← f_s        f̂_s ─ T_s2t ─ (cycle back to f_t)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionPolicy, Conditioner};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::nn::{BoundMlp, Mlp, MlpSpec, OutputActivation, Parameterized};
use crate::tensor::Tensor;

/// Stream reserved for the randomized conditioning maps.
const MAP_STREAM: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Net {
    /// Feature learner F.
    Feature,
    /// Predictor P.
    Predictor,
    /// Domain discriminator D_d.
    DomainDisc,
    /// Source-to-target translator T_s2t.
    S2t,
    /// Target-to-source translator T_t2s.
    T2s,
    /// Source sample discriminator D_s.
    SourceDisc,
    /// Target sample discriminator D_t.
    TargetDisc,
}

impl Net {
    pub const ALL: [Net; 7] =
        [Net::Feature, Net::Predictor, Net::DomainDisc, Net::S2t, Net::T2s, Net::SourceDisc, Net::TargetDisc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, Net::DomainDisc | Net::SourceDisc | Net::TargetDisc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Net::Feature => "feature",
            Net::Predictor => "predictor",
            Net::DomainDisc => "domain_disc",
            Net::S2t => "translator_s2t",
            Net::T2s => "translator_t2s",
            Net::SourceDisc => "source_disc",
            Net::TargetDisc => "target_disc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    S2t,
    T2s,
}

impl Direction {
    pub fn net(self) -> Net {
        match self {
            Direction::S2t => Net::S2t,
            Direction::T2s => Net::T2s,
        }
    }
}

/// Widths, activations and conditioning policy. Depths are fixed: F has two
/// hidden layers, D_d three affine layers, each translator four, and each
/// sample discriminator three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub feature_hidden: usize,
    pub domain_hidden: usize,
    pub translator_hidden: usize,
    pub sample_disc_hidden: usize,
    pub feature_activation: Activation,
    pub disc_activation: Activation,
    pub translator_activation: Activation,
    pub conditioning: ConditionPolicy,
    /// When set, every feature vector is rescaled to this Euclidean length.
    pub feature_radius: Option<f64>,
    /// Translators compute `f + T(f)` instead of `T(f)`.
    pub residual_translators: bool,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            feature_dim: 16,
            num_classes: 2,
            feature_hidden: 64,
            domain_hidden: 64,
            translator_hidden: 32,
            sample_disc_hidden: 32,
            feature_activation: Activation::Relu,
            disc_activation: Activation::Relu,
            translator_activation: Activation::Relu,
            conditioning: ConditionPolicy::default(),
            feature_radius: None,
            residual_translators: true,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let dims = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("feature_hidden", self.feature_hidden),
            ("domain_hidden", self.domain_hidden),
            ("translator_hidden", self.translator_hidden),
            ("sample_disc_hidden", self.sample_disc_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if let Some(r) = self.feature_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("feature_radius must be positive, got {r}")));
            }
        }
        self.conditioning.validate()
    }

    pub fn conditioned_dim(&self) -> usize {
        self.conditioning.output_dim(self.feature_dim, self.num_classes)
    }

    /// Architecture of one network.
    pub fn spec(&self, net: Net) -> MlpSpec {
        let (df, c) = (self.feature_dim, self.num_classes);
        match net {
            Net::Feature => MlpSpec::new(
                vec![self.input_dim, self.feature_hidden, self.feature_hidden, df],
                self.feature_activation,
                OutputActivation::None,
            ),
            Net::Predictor => MlpSpec::new(vec![df, c], self.feature_activation, OutputActivation::LogSoftmax),
            Net::DomainDisc => {
                let h = self.domain_hidden;
                MlpSpec::new(vec![self.conditioned_dim(), h, h, 1], self.disc_activation, OutputActivation::Sigmoid)
            }
            Net::S2t | Net::T2s => {
                let h = self.translator_hidden;
                MlpSpec::new(vec![df, h, h, h, df], self.translator_activation, OutputActivation::None)
            }
            Net::SourceDisc | Net::TargetDisc => {
                let h = self.sample_disc_hidden;
                MlpSpec::new(vec![df, h, h, 1], self.disc_activation, OutputActivation::Sigmoid)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSuite {
    arch: ArchConfig,
    nets: Vec<Mlp>,
    conditioner: Conditioner,
}

impl ModelSuite {
    /// Builds and initializes all seven networks. Each network draws from its
    /// own stream of `arch.seed`, so widths of one network never perturb the
    /// initialization of another.
    pub fn build(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let nets = Net::ALL
            .iter()
            .map(|&net| {
                let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
                rng.set_stream(net.index() as u64);
                Mlp::new(arch.spec(net), &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let map_seed = arch.seed ^ (MAP_STREAM << 56);
        let conditioner = Conditioner::new(arch.conditioning.clone(), arch.feature_dim, arch.num_classes, map_seed)?;
        let suite = Self { arch: arch.clone(), nets, conditioner };
        suite.check_wiring()?;
        Ok(suite)
    }

    /// Replaces the networks, keeping this suite's architecture. Used by the
    /// checkpoint loader and by tests that install hand-made weights.
    pub fn with_nets(arch: &ArchConfig, nets: Vec<Mlp>) -> Result<Self> {
        let mut suite = Self::build(arch)?;
        if nets.len() != suite.nets.len() {
            return Err(Error::Config(format!("expected 7 networks, got {}", nets.len())));
        }
        for (&net, mlp) in Net::ALL.iter().zip(&nets) {
            if mlp.spec().dims != arch.spec(net).dims {
                return Err(Error::Config(format!(
                    "{} has widths {:?}, architecture requires {:?}",
                    net.name(),
                    mlp.spec().dims,
                    arch.spec(net).dims
                )));
            }
        }
        suite.nets = nets;
        Ok(suite)
    }

    fn check_wiring(&self) -> Result<()> {
        let df = self.arch.feature_dim;
        let f = self.net(Net::Feature);
        let widths_ok = f.out_dim() == df
            && self.net(Net::Predictor).in_dim() == df
            && [Net::S2t, Net::T2s].iter().all(|&n| self.net(n).in_dim() == df && self.net(n).out_dim() == df)
            && [Net::SourceDisc, Net::TargetDisc].iter().all(|&n| self.net(n).in_dim() == df)
            && self.net(Net::DomainDisc).in_dim() == self.conditioner.output_dim();
        if widths_ok {
            Ok(())
        } else {
            Err(Error::Config("network widths do not chain".into()))
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn net(&self, net: Net) -> &Mlp {
        &self.nets[net.index()]
    }

    pub fn net_mut(&mut self, net: Net) -> &mut Mlp {
        &mut self.nets[net.index()]
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    /// Index range of each network's tensors within [`Parameterized::params`].
    pub fn param_ranges(&self) -> Vec<(Net, std::ops::Range<usize>)> {
        let mut start = 0;
        Net::ALL
            .iter()
            .map(|&net| {
                let n = self.net(net).params().len();
                let r = start..start + n;
                start += n;
                (net, r)
            })
            .collect()
    }

    fn param_counts(&self) -> Vec<usize> {
        self.nets.iter().map(|m| m.params().len()).collect()
    }

    /// Registers the parameters of `active` networks in `g`.
    pub fn bind(&self, g: &mut Graph, active: &[Net]) -> BoundSuite {
        let nets = Net::ALL
            .iter()
            .map(|&net| active.contains(&net).then(|| self.net(net).bind(g)))
            .collect();
        BoundSuite { nets, counts: self.param_counts(), feature_radius: self.arch.feature_radius, residual: self.arch.residual_translators }
    }

    /// Wraps leaves already registered for every parameter, in
    /// [`Parameterized::params`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundSuite> {
        let ranges = self.param_ranges();
        let total = ranges.last().map_or(0, |(_, r)| r.end);
        if vars.len() != total {
            return Err(Error::Contract(format!("expected {total} parameter vars, got {}", vars.len())));
        }
        let nets = ranges
            .into_iter()
            .map(|(net, r)| self.net(net).bind_vars(&vars[r]).map(Some))
            .collect::<Result<_>>()?;
        Ok(BoundSuite { nets, counts: self.param_counts(), feature_radius: self.arch.feature_radius, residual: self.arch.residual_translators })
    }

    /// `f = F(x)` and class probabilities `p = exp(log_softmax(P(f)))`.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let f_net = self.net(Net::Feature).bind_frozen(&mut g);
        let p_net = self.net(Net::Predictor).bind_frozen(&mut g);
        let xv = g.leaf(x.clone(), false)?;
        let f = f_net.forward(&mut g, xv)?;
        let f = normalize_features(&mut g, f, self.arch.feature_radius)?;
        let logp = p_net.forward(&mut g, f)?;
        let p = g.exp(logp)?;
        Ok((g.value(f).clone(), g.value(p).clone()))
    }

    /// Predicted class per row (argmax, ties to the lowest index).
    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(x)?.1.argmax_rows())
    }

    pub fn translate(&self, f: &Tensor, direction: Direction) -> Result<Tensor> {
        let out = self.net(direction.net()).forward_value(f)?;
        if !self.arch.residual_translators {
            return Ok(out);
        }
        let data = out.data().iter().zip(f.data()).map(|(a, b)| a + b).collect();
        Tensor::new(out.shape().to_vec(), data)
    }

    /// D_d output on conditioned features of `x`.
    pub fn domain_scores(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f_net = self.net(Net::Feature).bind_frozen(&mut g);
        let p_net = self.net(Net::Predictor).bind_frozen(&mut g);
        let d_net = self.net(Net::DomainDisc).bind_frozen(&mut g);
        let xv = g.leaf(x.clone(), false)?;
        let f = f_net.forward(&mut g, xv)?;
        let f = normalize_features(&mut g, f, self.arch.feature_radius)?;
        let logp = p_net.forward(&mut g, f)?;
        let p = g.exp(logp)?;
        let h = self.conditioner.apply(&mut g, f, p)?;
        let d = d_net.forward(&mut g, h)?;
        Ok(g.value(d).clone())
    }
}

impl Parameterized for ModelSuite {
    fn params(&self) -> Vec<&Tensor> {
        self.nets.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets.params_mut()
    }
}

/// The networks of a [`ModelSuite`] registered in one graph. Networks that
/// were not activated are absent.
pub struct BoundSuite {
    nets: Vec<Option<BoundMlp>>,
    /// Parameter tensors per network, active or not.
    counts: Vec<usize>,
    feature_radius: Option<f64>,
    residual: bool,
}

const FEATURE_NORM_EPS: f64 = 1e-12;

fn normalize_features(g: &mut Graph, f: Var, radius: Option<f64>) -> Result<Var> {
    match radius {
        Some(r) => g.row_normalize(f, r, FEATURE_NORM_EPS),
        None => Ok(f),
    }
}

impl BoundSuite {
    /// Applies the translator for `direction` to feature rows `f`.
    pub fn translate(&self, g: &mut Graph, direction: Direction, f: Var) -> Result<Var> {
        let out = self.get(direction.net())?.forward(g, f)?;
        if self.residual {
            g.add(f, out)
        } else {
            Ok(out)
        }
    }

    /// Feature vectors of the rows of `x`, normalized if the architecture
    /// asks for it.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = self.get(Net::Feature)?.forward(g, x)?;
        normalize_features(g, f, self.feature_radius)
    }

    pub fn get(&self, net: Net) -> Result<&BoundMlp> {
        self.nets[net.index()]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("network {} is not active in this graph", net.name())))
    }

    pub fn is_active(&self, net: Net) -> bool {
        self.nets[net.index()].is_some()
    }

    /// One slot per suite parameter; `None` for inactive networks.
    pub fn param_vars(&self) -> Vec<Option<Var>> {
        self.nets
            .iter()
            .zip(&self.counts)
            .flat_map(|(b, &n)| match b {
                Some(b) => b.vars().into_iter().map(Some).collect::<Vec<_>>(),
                None => vec![None; n],
            })
            .collect()
    }

    /// Vars of active networks paired with their network, in parameter order.
    pub fn vars_by_net(&self) -> Vec<(Net, Vec<Var>)> {
        Net::ALL
            .iter()
            .filter_map(|&n| self.nets[n.index()].as_ref().map(|b| (n, b.vars())))
            .collect()
    }
}
