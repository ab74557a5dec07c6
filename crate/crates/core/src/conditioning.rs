//! Conditioning the domain discriminator on classifier predictions.
//!
//! A feature row `f` and its prediction row `p` are combined either exactly,
//! as the flattened outer product `f ⊗ p` (width `df·dp`), or through a
//! randomized multilinear map `(R_f f) ⊙ (R_p p) / √d` (width `d`) whose inner
//! products match the exact map's in expectation. The exact map is used
//! whenever `df·dp` does not exceed the policy threshold.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: usize = 4096;
pub const DEFAULT_RANDOM_DIM: usize = 1024;
/// Largest exact-branch width accepted before refusing to allocate.
pub const DEFAULT_EXACT_CAP: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Exact,
    Randomized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionPolicy {
    pub threshold: usize,
    /// Output width `d` of the randomized branch.
    pub random_dim: usize,
    pub exact_cap: usize,
    /// Stop gradients from the conditioning path into the predictor.
    pub detach_predictions: bool,
}

impl Default for ConditionPolicy {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            random_dim: DEFAULT_RANDOM_DIM,
            exact_cap: DEFAULT_EXACT_CAP,
            detach_predictions: false,
        }
    }
}

impl ConditionPolicy {
    pub fn branch(&self, dim_f: usize, dim_p: usize) -> Branch {
        if dim_f * dim_p <= self.threshold {
            Branch::Exact
        } else {
            Branch::Randomized
        }
    }

    pub fn output_dim(&self, dim_f: usize, dim_p: usize) -> usize {
        match self.branch(dim_f, dim_p) {
            Branch::Exact => dim_f * dim_p,
            Branch::Randomized => self.random_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.random_dim == 0 {
            return Err(Error::Config("randomized conditioning width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed Gaussian projections for the randomized branch. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomizedMaps {
    /// `[d, dim_f]`
    pub r_f: Tensor,
    /// `[d, dim_p]`
    pub r_p: Tensor,
}

impl RandomizedMaps {
    pub fn sample<R: rand::Rng + ?Sized>(dim_f: usize, dim_p: usize, d: usize, rng: &mut R) -> Result<Self> {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let r_f = Tensor::new(vec![d, dim_f], draw(d * dim_f))?;
        let r_p = Tensor::new(vec![d, dim_p], draw(d * dim_p))?;
        Ok(Self { r_f, r_p })
    }

    pub fn from_seed(dim_f: usize, dim_p: usize, d: usize, seed: u64) -> Result<Self> {
        Self::sample(dim_f, dim_p, d, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn dim(&self) -> usize {
        self.r_f.shape()[0]
    }

    pub fn dim_f(&self) -> usize {
        self.r_f.shape()[1]
    }

    pub fn dim_p(&self) -> usize {
        self.r_p.shape()[1]
    }
}

/// Row-wise flattened outer product `[b, df] × [b, dp] -> [b, df·dp]`.
pub fn multilinear_condition(g: &mut Graph, f: Var, p: Var, cap: usize) -> Result<Var> {
    let width = g.shape(f).get(1).copied().unwrap_or(0) * g.shape(p).get(1).copied().unwrap_or(0);
    if width > cap {
        return Err(Error::shape(
            "multilinear_condition",
            format!("output width {width} exceeds cap {cap}"),
        ));
    }
    g.row_outer(f, p)
}

/// `(1/√d)·(f R_fᵀ) ⊙ (p R_pᵀ)` per row.
pub fn randomized_condition(g: &mut Graph, f: Var, p: Var, maps: &RandomizedMaps) -> Result<Var> {
    let (wf, wp) = (g.shape(f).get(1).copied(), g.shape(p).get(1).copied());
    if wf != Some(maps.dim_f()) || wp != Some(maps.dim_p()) {
        return Err(Error::shape(
            "randomized_condition",
            format!(
                "inputs {:?}/{:?} vs maps for dim_f={} dim_p={}",
                g.shape(f),
                g.shape(p),
                maps.dim_f(),
                maps.dim_p()
            ),
        ));
    }
    let rf = g.constant(maps.r_f.clone());
    let rp = g.constant(maps.r_p.clone());
    let a = g.matmul_t(f, rf)?;
    let b = g.matmul_t(p, rp)?;
    let h = g.mul(a, b)?;
    g.scale(h, 1.0 / (maps.dim() as f64).sqrt())
}

/// A policy together with the maps its randomized branch needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioner {
    pub policy: ConditionPolicy,
    pub dim_f: usize,
    pub dim_p: usize,
    maps: Option<RandomizedMaps>,
}

impl Conditioner {
    /// Samples maps only when the randomized branch is selected.
    pub fn new(policy: ConditionPolicy, dim_f: usize, dim_p: usize, map_seed: u64) -> Result<Self> {
        policy.validate()?;
        let maps = match policy.branch(dim_f, dim_p) {
            Branch::Exact => None,
            Branch::Randomized => Some(RandomizedMaps::from_seed(dim_f, dim_p, policy.random_dim, map_seed)?),
        };
        Ok(Self { policy, dim_f, dim_p, maps })
    }

    pub fn branch(&self) -> Branch {
        self.policy.branch(self.dim_f, self.dim_p)
    }

    pub fn output_dim(&self) -> usize {
        self.policy.output_dim(self.dim_f, self.dim_p)
    }

    pub fn maps(&self) -> Option<&RandomizedMaps> {
        self.maps.as_ref()
    }

    /// Applies the selected branch to `(f, p)`.
    pub fn apply(&self, g: &mut Graph, f: Var, p: Var) -> Result<Var> {
        let p = if self.policy.detach_predictions { g.detach(p) } else { p };
        match &self.maps {
            None => multilinear_condition(g, f, p, self.policy.exact_cap),
            Some(maps) => randomized_condition(g, f, p, maps),
        }
    }
}

/// Branch-dispatching convenience over a policy and optional maps.
pub fn condition(
    g: &mut Graph,
    f: Var,
    p: Var,
    policy: &ConditionPolicy,
    maps: Option<&RandomizedMaps>,
) -> Result<Var> {
    let (df, dp) = (g.shape(f)[1], g.shape(p)[1]);
    match policy.branch(df, dp) {
        Branch::Exact => multilinear_condition(g, f, p, policy.exact_cap),
        Branch::Randomized => {
            let maps = maps.ok_or_else(|| {
                Error::Contract(format!("randomized branch selected for {df}x{dp} but no maps supplied"))
            })?;
            randomized_condition(g, f, p, maps)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, CheckSettings};
    use rand::Rng;

    fn run(f: &Tensor, p: &Tensor, op: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Tensor {
        let mut g = Graph::new();
        let (vf, vp) = (g.constant(f.clone()), g.constant(p.clone()));
        let out = op(&mut g, vf, vp).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn exact_definition() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let p = Tensor::from_rows(&[vec![0.75, 0.25]]);
        let out = run(&f, &p, |g, f, p| multilinear_condition(g, f, p, DEFAULT_EXACT_CAP));
        assert_eq!(out.data(), &[0.75, 0.25, 1.5, 0.5]);
    }

    #[test]
    fn one_hot_prediction_places_features_in_its_block() {
        // Row-major f ⊗ p: element (i, c) sits at i·dp + c.
        let f = Tensor::from_rows(&[vec![3.0, -1.0, 2.0]]);
        let p = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]);
        let out = run(&f, &p, |g, f, p| multilinear_condition(g, f, p, DEFAULT_EXACT_CAP));
        for i in 0..3 {
            for c in 0..4 {
                let expected = if c == 1 { f.data()[i] } else { 0.0 };
                assert_eq!(out.data()[i * 4 + c], expected);
            }
        }
    }

    #[test]
    fn batch_shape() {
        let f = Tensor::zeros(&[3, 5]);
        let p = Tensor::full(&[3, 2], 0.5);
        let out = run(&f, &p, |g, f, p| multilinear_condition(g, f, p, DEFAULT_EXACT_CAP));
        assert_eq!(out.shape(), &[3, 10]);
    }

    #[test]
    fn exact_cap_enforced() {
        let f = Tensor::zeros(&[1, 5]);
        let p = Tensor::zeros(&[1, 3]);
        let mut g = Graph::new();
        let (vf, vp) = (g.constant(f), g.constant(p));
        assert!(multilinear_condition(&mut g, vf, vp, 14).is_err());
        assert!(multilinear_condition(&mut g, vf, vp, 15).is_ok());
    }

    #[test]
    fn randomized_zero_features_give_zero() {
        let maps = RandomizedMaps::from_seed(4, 3, 8, 1).unwrap();
        let f = Tensor::zeros(&[2, 4]);
        let p = Tensor::full(&[2, 3], 1.0 / 3.0);
        let out = run(&f, &p, |g, f, p| randomized_condition(g, f, p, &maps));
        assert_eq!(out.shape(), &[2, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn randomized_all_ones_rank_one_map() {
        let maps = RandomizedMaps { r_f: Tensor::full(&[1, 3], 1.0), r_p: Tensor::full(&[1, 2], 1.0) };
        let f = Tensor::from_rows(&[vec![1.0, 2.0, -0.5]]);
        let p = Tensor::from_rows(&[vec![0.3, 0.7]]);
        let out = run(&f, &p, |g, f, p| randomized_condition(g, f, p, &maps));
        assert!((out.item() - 2.5 * 1.0).abs() < 1e-15);
    }

    #[test]
    fn randomized_dimension_mismatch() {
        let maps = RandomizedMaps::from_seed(4, 3, 8, 1).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[2, 5]));
        let p = g.constant(Tensor::zeros(&[2, 3]));
        assert!(randomized_condition(&mut g, f, p, &maps).is_err());
    }

    #[test]
    fn maps_are_seed_deterministic() {
        let a = RandomizedMaps::from_seed(6, 3, 10, 42).unwrap();
        let b = RandomizedMaps::from_seed(6, 3, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, RandomizedMaps::from_seed(6, 3, 10, 43).unwrap());
    }

    #[test]
    fn dispatch_examples() {
        let pol = ConditionPolicy::default();
        assert_eq!(pol.branch(64, 10), Branch::Exact);
        assert_eq!(pol.output_dim(64, 10), 640);
        assert_eq!(pol.branch(512, 31), Branch::Randomized);
        assert_eq!(pol.output_dim(512, 31), DEFAULT_RANDOM_DIM);
        assert_eq!(pol.branch(64, 64), Branch::Exact);
        assert_eq!(pol.branch(64, 65), Branch::Randomized);

        let small = ConditionPolicy { threshold: 10, ..Default::default() };
        assert_eq!(small.branch(4, 2), Branch::Exact);
        assert_eq!(small.branch(4, 3), Branch::Randomized);
    }

    #[test]
    fn conditioner_samples_maps_only_when_needed() {
        let pol = ConditionPolicy { threshold: 10, random_dim: 7, ..Default::default() };
        let exact = Conditioner::new(pol.clone(), 4, 2, 0).unwrap();
        assert!(exact.maps().is_none());
        assert_eq!(exact.output_dim(), 8);
        let rand = Conditioner::new(pol, 4, 3, 0).unwrap();
        assert_eq!(rand.maps().unwrap().dim(), 7);
        assert_eq!(rand.output_dim(), 7);
    }

    #[test]
    fn condition_requires_maps_for_randomized_branch() {
        let pol = ConditionPolicy { threshold: 4, random_dim: 5, ..Default::default() };
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 3]));
        let p = g.constant(Tensor::zeros(&[1, 2]));
        assert!(condition(&mut g, f, p, &pol, None).is_err());
        let maps = RandomizedMaps::from_seed(3, 2, 5, 0).unwrap();
        let out = condition(&mut g, f, p, &pol, Some(&maps)).unwrap();
        assert_eq!(g.shape(out), &[1, 5]);
    }

    #[test]
    fn both_branches_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![3, 12], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let maps = RandomizedMaps::from_seed(4, 3, 6, 2).unwrap();
        let w6 = Tensor::new(vec![3, 6], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let exact = finite_diff_check(
            |g, v| {
                let h = multilinear_condition(g, v[0], v[1], DEFAULT_EXACT_CAP)?;
                let w = g.constant(w.clone());
                let m = g.mul(h, w)?;
                let m = g.tanh(m)?;
                g.sum(m)
            },
            &[f.clone(), p.clone()],
            CheckSettings::default(),
        )
        .unwrap();
        assert!(exact.passed, "{exact:?}");
        let randomized = finite_diff_check(
            |g, v| {
                let h = randomized_condition(g, v[0], v[1], &maps)?;
                let w = g.constant(w6.clone());
                let m = g.mul(h, w)?;
                let m = g.tanh(m)?;
                g.sum(m)
            },
            &[f, p],
            CheckSettings::default(),
        )
        .unwrap();
        assert!(randomized.passed, "{randomized:?}");
    }

    #[test]
    fn detach_predictions_blocks_gradient_to_p() {
        let pol = ConditionPolicy { detach_predictions: true, ..Default::default() };
        let c = Conditioner::new(pol, 2, 2, 0).unwrap();
        let mut g = Graph::new();
        let f = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let p = g.param(Tensor::from_rows(&[vec![0.4, 0.6]]));
        let h = c.apply(&mut g, f, p).unwrap();
        let s = g.sum(h).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).is_none());
        assert!(grads.get(f).is_some());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn exact_branch_width_and_homogeneity(
                df in 1usize..6, dp in 2usize..5, alpha in -3.0f64..3.0, seed in 0u64..1000,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = Tensor::new(vec![2, df], (0..2 * df).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                let p = Tensor::new(vec![2, dp], (0..2 * dp).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
                let pol = ConditionPolicy::default();
                let base = run(&f, &p, |g, f, p| condition(g, f, p, &pol, None));
                let scaled = run(&f.map(|x| alpha * x), &p, |g, f, p| condition(g, f, p, &pol, None));
                prop_assert_eq!(base.shape(), &[2, df * dp]);
                for (s, b) in scaled.data().iter().zip(base.data()) {
                    prop_assert!((s - alpha * b).abs() < 1e-12);
                }
            }

            #[test]
            fn dispatch_is_a_pure_function_of_dims(df in 1usize..200, dp in 1usize..200, t in 1usize..10000) {
                let pol = ConditionPolicy { threshold: t, ..Default::default() };
                let expected = if df * dp <= t { Branch::Exact } else { Branch::Randomized };
                prop_assert_eq!(pol.branch(df, dp), expected);
                prop_assert_eq!(pol.branch(df, dp), pol.branch(df, dp));
            }
        }
    }
}
