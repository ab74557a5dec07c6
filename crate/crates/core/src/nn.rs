//! Fully-connected layers and multilayer perceptrons.
//!
//! Networks own their parameter tensors. To run one inside a training step,
//! [`Mlp::bind`] registers every parameter as a leaf of the step's graph and
//! returns a [`BoundMlp`] that builds the forward pass on that graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    GlorotUniform,
    /// U(-b, b) with b = sqrt(6 / fan_in).
    HeUniform,
}

impl InitScheme {
    pub fn bound(self, in_dim: usize, out_dim: usize) -> f64 {
        match self {
            InitScheme::GlorotUniform => (6.0 / (in_dim + out_dim) as f64).sqrt(),
            InitScheme::HeUniform => (6.0 / in_dim as f64).sqrt(),
        }
    }

    /// He for ReLU networks, Glorot for saturating ones.
    pub fn for_activation(act: Activation) -> Self {
        match act {
            Activation::Relu => InitScheme::HeUniform,
            Activation::Tanh | Activation::Sigmoid => InitScheme::GlorotUniform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Sigmoid,
    LogSoftmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `[out_dim, in_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Uniform weights from `scheme`, zero bias.
pub fn init_linear<R: Rng + ?Sized>(
    in_dim: usize,
    out_dim: usize,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<LinearLayer> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::Config(format!("layer dims must be >= 1, got {in_dim} -> {out_dim}")));
    }
    let b = scheme.bound(in_dim, out_dim);
    let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-b..=b)).collect();
    Ok(LinearLayer {
        weight: Tensor::new(vec![out_dim, in_dim], w)?,
        bias: Tensor::zeros(&[out_dim]),
    })
}

/// Architecture of an [`Mlp`]: layer widths from input to output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>, hidden: Activation, output: OutputActivation) -> Self {
        Self { dims, hidden, output }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.dims.windows(2).flat_map(|w| [vec![w[1], w[0]], vec![w[1]]]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Config(format!("an MLP needs at least 2 widths, got {:?}", self.dims)));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("MLP widths must be >= 1, got {:?}", self.dims)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LinearLayer>,
}

impl Mlp {
    /// Initializes every layer with the scheme matching the hidden activation.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let scheme = InitScheme::for_activation(spec.hidden);
        let layers = spec
            .dims
            .windows(2)
            .map(|w| init_linear(w[0], w[1], scheme, rng))
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    /// Assembles a network from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<LinearLayer>, hidden: Activation, output: OutputActivation) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        };
        let mut dims = vec![first.in_dim()];
        for l in &layers {
            if l.in_dim() != *dims.last().unwrap() || l.bias.shape() != [l.out_dim()] {
                return Err(Error::Config(format!(
                    "layer {:?}/{:?} does not chain after width {}",
                    l.weight.shape(),
                    l.bias.shape(),
                    dims.last().unwrap()
                )));
            }
            dims.push(l.out_dim());
        }
        Ok(Self { spec: MlpSpec { dims, hidden, output }, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let layers = self.layers.iter().map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone()))).collect();
        BoundMlp { layers, hidden: self.spec.hidden, output: self.spec.output, in_dim: self.in_dim() }
    }

    /// Registers parameters as non-trainable leaves.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect();
        BoundMlp { layers, hidden: self.spec.hidden, output: self.spec.output, in_dim: self.in_dim() }
    }

    /// Wraps already-registered leaves, given in [`Parameterized::params`]
    /// order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundMlp> {
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter vars, got {}",
                2 * self.layers.len(),
                vars.len()
            )));
        }
        let layers = vars.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(BoundMlp { layers, hidden: self.spec.hidden, output: self.spec.output, in_dim: self.in_dim() })
    }

    /// Inference outside of training: runs the network on a constant input.
    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind_frozen(&mut g);
        let xv = g.leaf(x.clone(), false)?;
        let y = m.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Anything that owns an ordered list of trainable tensors.
pub trait Parameterized {
    /// Parameters in a fixed order: network by network, layer by layer,
    /// weight before bias.
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

impl Parameterized for [Mlp] {
    fn params(&self) -> Vec<&Tensor> {
        self.iter().flat_map(Parameterized::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().flat_map(Parameterized::params_mut).collect()
    }
}

/// Ordered parameter list of a model.
pub fn collect_params<M: Parameterized + ?Sized>(model: &M) -> Vec<&Tensor> {
    model.params()
}

/// An [`Mlp`] whose parameters live in a particular graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    hidden: Activation,
    output: OutputActivation,
    in_dim: usize,
}

impl BoundMlp {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Affine layers with hidden activations in between; no output head.
    pub fn forward_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let width = g.shape(x).get(1).copied();
        if g.shape(x).len() != 2 || width != Some(self.in_dim) {
            return Err(Error::shape(
                "mlp_forward",
                format!("input {:?} does not match in_dim {}", g.shape(x), self.in_dim),
            ));
        }
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.matmul_t(h, w)?;
            h = g.add_row(h, b)?;
            if i + 1 < self.layers.len() {
                h = g.activation(h, self.hidden)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.forward_logits(g, x)?;
        match self.output {
            OutputActivation::None => Ok(z),
            OutputActivation::Sigmoid => g.sigmoid(z),
            OutputActivation::LogSoftmax => g.log_softmax(z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, CheckSettings};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bound_and_zero_bias() {
        assert!((InitScheme::GlorotUniform.bound(4, 4) - 0.75f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = init_linear(4, 4, InitScheme::GlorotUniform, &mut rng).unwrap();
        let b = 0.75f64.sqrt();
        assert!(l.weight.data().iter().all(|w| w.abs() <= b));
        assert!(l.bias.data().iter().all(|&v| v == 0.0));
        assert!(init_linear(0, 4, InitScheme::HeUniform, &mut rng).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_linear(5, 3, InitScheme::HeUniform, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_linear(5, 3, InitScheme::HeUniform, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let c = init_linear(5, 3, InitScheme::HeUniform, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = LinearLayer { weight: Tensor::identity(3), bias: Tensor::zeros(&[3]) };
        let m = Mlp::from_layers(vec![layer], Activation::Relu, OutputActivation::None).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -0.5]]);
        assert_eq!(m.forward_value(&x).unwrap(), x);
    }

    #[test]
    fn log_softmax_head_rows_normalize() {
        let spec = MlpSpec::new(vec![3, 5, 4], Activation::Tanh, OutputActivation::LogSoftmax);
        let m = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -0.5]]);
        let y = m.forward_value(&x).unwrap();
        for r in 0..2 {
            let s: f64 = y.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn input_width_mismatch_is_a_dimension_error() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu, OutputActivation::None);
        let m = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let err = m.forward_value(&Tensor::zeros(&[2, 4])).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "mlp_forward", .. }));
    }

    #[test]
    fn mis_chained_layers_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = init_linear(2, 3, InitScheme::HeUniform, &mut rng).unwrap();
        let b = init_linear(4, 1, InitScheme::HeUniform, &mut rng).unwrap();
        assert!(Mlp::from_layers(vec![a, b], Activation::Relu, OutputActivation::None).is_err());
    }

    #[test]
    fn collect_params_counts_and_order() {
        let spec = MlpSpec::new(vec![4, 8, 2], Activation::Relu, OutputActivation::None);
        let m = Mlp::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = collect_params(&m);
        assert_eq!(p.len(), 4);
        assert_eq!(m.num_scalars(), 58);
        assert_eq!(m.param_count(), 58);
        let shapes: Vec<Vec<usize>> = p.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, spec.param_shapes());

        let empty: Vec<Mlp> = Vec::new();
        assert!(collect_params(empty.as_slice()).is_empty());

        let m2 = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(collect_params(&m2), p);
    }

    #[test]
    fn mlp_gradients_pass_finite_differences() {
        for (hidden, output) in [
            (Activation::Tanh, OutputActivation::LogSoftmax),
            (Activation::Relu, OutputActivation::Sigmoid),
            (Activation::Sigmoid, OutputActivation::None),
        ] {
            let spec = MlpSpec::new(vec![3, 6, 5, 2], hidden, output);
            let m = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![-0.2, 0.4, 0.9], vec![1.3, 0.1, -0.6]]);
            let mut inputs: Vec<Tensor> = m.params().into_iter().cloned().collect();
            inputs.push(x);
            let n = inputs.len();
            let report = finite_diff_check(
                |g, v| {
                    let bound = m.bind_vars(&v[..n - 1])?;
                    let y = bound.forward(g, v[n - 1])?;
                    let y = g.mul(y, y)?;
                    g.mean(y)
                },
                &inputs,
                CheckSettings::default(),
            )
            .unwrap();
            assert!(report.passed, "{hidden:?}/{output:?}: {report:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn param_count_matches_closed_form(dims in proptest::collection::vec(1usize..20, 2..6)) {
                let spec = MlpSpec::new(dims.clone(), Activation::Relu, OutputActivation::None);
                let m = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
                prop_assert_eq!(m.num_scalars(), expected);
                prop_assert_eq!(m.params().len(), 2 * (dims.len() - 1));
            }
        }
    }
}
