//! Sieve features: the state basis `phi`, the action-indexed feature `z(x, a)`
//! and the policy-averaged feature `u(pi, x)`.
//!
//! Both `z` and `u` have `J * M` entries laid out as `M` consecutive blocks of
//! length `J`, block `a - 1` belonging to action `a`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{policy_probs, Policy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutOfBox {
    #[default]
    Clamp,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    Identity {
        state_dim: usize,
        intercept: bool,
    },
    TensorBspline {
        degree: usize,
        /// Interior knot count per coordinate; each coordinate has `knots + degree + 1` functions.
        knots: Vec<usize>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default)]
        out_of_box: OutOfBox,
    },
}

impl BasisSpec {
    pub fn identity(state_dim: usize, intercept: bool) -> Self {
        Self::Identity { state_dim, intercept }
    }

    pub fn bspline(degree: usize, knots: Vec<usize>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Config("B-spline degree must be at least 1".into()));
        }
        if knots.len() != lo.len() || lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config("B-spline knots/lo/hi must have one entry per coordinate".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Config("B-spline domain box needs finite lo < hi".into()));
        }
        Ok(Self::TensorBspline {
            degree,
            knots,
            lo,
            hi,
            out_of_box: OutOfBox::Clamp,
        })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Identity { state_dim, .. } => *state_dim,
            Self::TensorBspline { lo, .. } => lo.len(),
        }
    }

    /// Basis dimension `J`.
    pub fn dim(&self) -> usize {
        match self {
            Self::Identity { state_dim, intercept } => state_dim + usize::from(*intercept),
            Self::TensorBspline { degree, knots, .. } => knots.iter().map(|k| k + degree + 1).product(),
        }
    }

    /// Evaluate `phi(x)`.
    pub fn phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                got: x.len(),
                context: "basis input",
            });
        }
        match self {
            Self::Identity { intercept, .. } => {
                let mut out = Vec::with_capacity(x.len() + 1);
                if *intercept {
                    out.push(1.0);
                }
                out.extend_from_slice(x);
                Ok(out)
            }
            Self::TensorBspline {
                degree,
                knots,
                lo,
                hi,
                out_of_box,
            } => {
                let mut out = vec![1.0];
                for (c, &xc) in x.iter().enumerate() {
                    let inside = xc >= lo[c] && xc <= hi[c];
                    if !inside && *out_of_box == OutOfBox::Error {
                        return Err(Error::Domain(format!(
                            "coordinate {c} value {xc} outside basis box [{}, {}]",
                            lo[c], hi[c]
                        )));
                    }
                    let u = xc.clamp(lo[c], hi[c]);
                    let vals = bspline_1d(*degree, knots[c], lo[c], hi[c], u);
                    let mut next = Vec::with_capacity(out.len() * vals.len());
                    for a in &out {
                        next.extend(vals.iter().map(|b| a * b));
                    }
                    out = next;
                }
                Ok(out)
            }
        }
    }

    /// Number of states that fall outside the B-spline box (always 0 for identity).
    pub fn count_out_of_box<'a>(&self, states: impl IntoIterator<Item = &'a Vec<f64>>) -> usize {
        match self {
            Self::Identity { .. } => 0,
            Self::TensorBspline { lo, hi, .. } => states
                .into_iter()
                .filter(|x| x.iter().enumerate().any(|(c, &v)| v < lo[c] || v > hi[c]))
                .count(),
        }
    }
}

/// Open uniform knot vector on `[lo, hi]` with `interior` interior knots.
fn open_uniform_knots(degree: usize, interior: usize, lo: f64, hi: f64) -> Vec<f64> {
    let segments = interior + 1;
    let mut k = vec![lo; degree + 1];
    k.extend((1..segments).map(|s| lo + (hi - lo) * s as f64 / segments as f64));
    k.extend(std::iter::repeat_n(hi, degree + 1));
    k
}

/// All `interior + degree + 1` basis values at `x` (de Boor's triangular scheme).
fn bspline_1d(degree: usize, interior: usize, lo: f64, hi: f64, x: f64) -> Vec<f64> {
    let knots = open_uniform_knots(degree, interior, lo, hi);
    let n_basis = interior + degree + 1;
    // span index s with knots[s] <= x < knots[s+1]; the right end belongs to the last span
    let span = if x >= hi {
        n_basis - 1
    } else {
        let mut s = degree;
        while s < n_basis - 1 && x >= knots[s + 1] {
            s += 1;
        }
        s
    };
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    let mut out = vec![0.0; n_basis];
    for (r, v) in n.into_iter().enumerate() {
        out[span - degree + r] = v;
    }
    out
}

/// Unresolved basis choice as written on the command line; B-spline boxes are
/// filled in from data by [`BasisChoice::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisChoice {
    Identity { intercept: bool },
    Bspline { degree: usize, knots: usize },
}

impl Default for BasisChoice {
    fn default() -> Self {
        Self::Identity { intercept: true }
    }
}

impl BasisChoice {
    /// Fix the B-spline box to the empirical per-coordinate range expanded by 5%.
    pub fn resolve<'a>(&self, state_dim: usize, states: impl IntoIterator<Item = &'a Vec<f64>>) -> Result<BasisSpec> {
        match *self {
            Self::Identity { intercept } => Ok(BasisSpec::identity(state_dim, intercept)),
            Self::Bspline { degree, knots } => {
                let mut lo = vec![f64::INFINITY; state_dim];
                let mut hi = vec![f64::NEG_INFINITY; state_dim];
                for x in states {
                    for (c, &v) in x.iter().enumerate().take(state_dim) {
                        lo[c] = lo[c].min(v);
                        hi[c] = hi[c].max(v);
                    }
                }
                for c in 0..state_dim {
                    let width = (hi[c] - lo[c]).max(1e-8);
                    lo[c] -= 0.05 * width;
                    hi[c] += 0.05 * width;
                }
                BasisSpec::bspline(degree, vec![knots; state_dim], lo, hi)
            }
        }
    }
}

impl FromStr for BasisChoice {
    type Err = Error;

    /// `identity`, `identity:intercept=false`, `bspline:degree=3:knots=5`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let mut kv = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("basis option {p:?} is not key=value")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let take_usize = |kv: &mut std::collections::BTreeMap<String, String>, key: &str, default: usize| -> Result<usize> {
            kv.remove(key)
                .map(|v| v.parse::<usize>().map_err(|_| Error::Config(format!("basis {key}={v:?} is not an integer"))))
                .unwrap_or(Ok(default))
        };
        let choice = match kind {
            "identity" => {
                let intercept = match kv.remove("intercept").as_deref() {
                    None | Some("true") => true,
                    Some("false") => false,
                    Some(v) => return Err(Error::Config(format!("basis intercept={v:?} is not a boolean"))),
                };
                Self::Identity { intercept }
            }
            "bspline" => {
                let degree = take_usize(&mut kv, "degree", 3)?;
                let knots = take_usize(&mut kv, "knots", 5)?;
                if degree < 1 {
                    return Err(Error::Config("B-spline degree must be at least 1".into()));
                }
                Self::Bspline { degree, knots }
            }
            other => return Err(Error::Config(format!("unknown basis kind {other:?}"))),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown basis option {k:?}")));
        }
        Ok(choice)
    }
}

/// Basis plus action count; produces `z` and `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureContext {
    pub spec: BasisSpec,
    pub n_actions: usize,
}

impl FeatureContext {
    pub fn new(spec: BasisSpec, n_actions: usize) -> Self {
        Self { spec, n_actions }
    }

    pub fn basis_dim(&self) -> usize {
        self.spec.dim()
    }

    /// `J * M`.
    pub fn dim(&self) -> usize {
        self.spec.dim() * self.n_actions
    }

    pub fn phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.spec.phi(x)
    }

    pub fn z(&self, x: &[f64], action: usize) -> Result<Vec<f64>> {
        let phi = self.phi(x)?;
        self.z_from_phi(&phi, action)
    }

    pub fn z_from_phi(&self, phi: &[f64], action: usize) -> Result<Vec<f64>> {
        if action == 0 || action > self.n_actions {
            return Err(Error::Domain(format!("action {action} outside 1..={}", self.n_actions)));
        }
        let j = phi.len();
        let mut out = vec![0.0; j * self.n_actions];
        out[(action - 1) * j..action * j].copy_from_slice(phi);
        Ok(out)
    }

    pub fn u(&self, policy: &Policy, x: &[f64]) -> Result<Vec<f64>> {
        let phi = self.phi(x)?;
        let probs = policy_probs(policy, x)?;
        self.u_from_parts(&phi, &probs)
    }

    pub fn u_from_parts(&self, phi: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
        if probs.len() != self.n_actions {
            return Err(Error::Dimension {
                expected: self.n_actions,
                got: probs.len(),
                context: "policy action count",
            });
        }
        let mut out = Vec::with_capacity(phi.len() * self.n_actions);
        for &p in probs {
            out.extend(phi.iter().map(|v| v * p));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SoftmaxPolicy, TabularPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook Cox-de Boor recursion on half-open spans, used only as an
    /// independent reference for `x < hi`.
    fn cox_de_boor(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + k] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, x);
        }
        let d2 = knots[i + k + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + k + 1] - x) / d2 * cox_de_boor(knots, i + 1, k - 1, x);
        }
        v
    }

    fn reference_1d(degree: usize, interior: usize, lo: f64, hi: f64, x: f64) -> Vec<f64> {
        let knots = open_uniform_knots(degree, interior, lo, hi);
        (0..interior + degree + 1).map(|i| cox_de_boor(&knots, i, degree, x)).collect()
    }

    #[test]
    fn identity_passes_state_through() {
        let spec = BasisSpec::identity(2, false);
        assert_eq!(spec.phi(&[1.25, 0.77]).unwrap(), vec![1.25, 0.77]);
        let spec = BasisSpec::identity(2, true);
        assert_eq!(spec.phi(&[1.25, 0.77]).unwrap(), vec![1.0, 1.25, 0.77]);
        assert_eq!(spec.dim(), 3);
    }

    #[test]
    fn hat_functions_at_quarter() {
        let spec = BasisSpec::bspline(1, vec![1], vec![0.0], vec![1.0]).unwrap();
        assert_eq!(spec.dim(), 3);
        let v = spec.phi(&[0.25]).unwrap();
        let expect = [0.5, 0.5, 0.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{v:?}");
        }
        let oracle = reference_1d(1, 1, 0.0, 1.0, 0.25);
        assert_eq!(oracle, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn de_boor_matches_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for degree in 1..=3 {
            for interior in 0..=4 {
                for _ in 0..50 {
                    let x: f64 = rng.random_range(-1.0..1.999);
                    let fast = bspline_1d(degree, interior, -1.0, 2.0, x);
                    let slow = reference_1d(degree, interior, -1.0, 2.0, x);
                    for (a, b) in fast.iter().zip(&slow) {
                        assert!((a - b).abs() < 1e-12, "deg {degree} k {interior} x {x}: {fast:?} vs {slow:?}");
                    }
                }
                let fast = bspline_1d(degree, interior, -1.0, 2.0, 2.0);
                assert!((fast.last().unwrap() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tensor_partition_of_unity() {
        let spec = BasisSpec::bspline(3, vec![4, 2], vec![-2.0, 0.0], vec![2.0, 5.0]).unwrap();
        assert_eq!(spec.dim(), 8 * 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(0.0..5.0)];
            let v = spec.phi(&x).unwrap();
            assert!(v.iter().all(|&b| b >= 0.0));
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let norm = v.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(norm.is_finite() && norm <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn out_of_box_clamps_or_errors() {
        let spec = BasisSpec::bspline(2, vec![3], vec![0.0], vec![1.0]).unwrap();
        let inside = spec.phi(&[1.0]).unwrap();
        assert_eq!(spec.phi(&[1.7]).unwrap(), inside);
        assert_eq!(spec.count_out_of_box(&[vec![1.7], vec![0.5], vec![-0.1]]), 2);
        let strict = match spec {
            BasisSpec::TensorBspline { degree, knots, lo, hi, .. } => BasisSpec::TensorBspline {
                degree,
                knots,
                lo,
                hi,
                out_of_box: OutOfBox::Error,
            },
            _ => unreachable!(),
        };
        assert!(matches!(strict.phi(&[1.7]), Err(Error::Domain(_))));
    }

    #[test]
    fn z_layout() {
        let ctx = FeatureContext::new(BasisSpec::identity(2, false), 2);
        assert_eq!(ctx.z(&[1.0, 2.0], 1).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(ctx.z(&[1.0, 2.0], 2).unwrap(), vec![0.0, 0.0, 1.0, 2.0]);
        assert!(matches!(ctx.z(&[1.0, 2.0], 3), Err(Error::Domain(_))));
        assert!(matches!(ctx.z(&[1.0, 2.0], 0), Err(Error::Domain(_))));
    }

    #[test]
    fn u_uniform_and_deterministic() {
        let ctx = FeatureContext::new(BasisSpec::identity(2, false), 2);
        let uniform = Policy::Tabular(TabularPolicy::uniform(2));
        assert_eq!(ctx.u(&uniform, &[1.0, 2.0]).unwrap(), vec![0.5, 1.0, 0.5, 1.0]);
        let target = Policy::Tabular(TabularPolicy::sim_target());
        assert_eq!(ctx.u(&target, &[1.0, 2.0]).unwrap(), ctx.z(&[1.0, 2.0], 1).unwrap());
    }

    #[test]
    fn u_is_policy_expectation_of_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = FeatureContext::new(BasisSpec::identity(2, true), 3);
        for _ in 0..50 {
            let alpha = (0..2).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let pol = Policy::Softmax(SoftmaxPolicy { alpha, intercept: true });
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let u = ctx.u(&pol, &x).unwrap();
            let probs = policy_probs(&pol, &x).unwrap();
            let mut expect = vec![0.0; ctx.dim()];
            for a in 1..=3 {
                let z = ctx.z(&x, a).unwrap();
                for (e, zi) in expect.iter_mut().zip(z) {
                    *e += probs[a - 1] * zi;
                }
            }
            for (a, b) in u.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_norm_equals_phi_norm() {
        let ctx = FeatureContext::new(BasisSpec::identity(3, true), 4);
        let x = [0.3, -2.0, 5.5];
        let phi = ctx.phi(&x).unwrap();
        let pn: f64 = phi.iter().map(|v| v * v).sum();
        for a in 1..=4 {
            let zn: f64 = ctx.z(&x, a).unwrap().iter().map(|v| v * v).sum();
            assert_eq!(zn, pn);
        }
    }

    #[test]
    fn parse_grammar() {
        assert_eq!("identity".parse::<BasisChoice>().unwrap(), BasisChoice::Identity { intercept: true });
        assert_eq!(
            "identity:intercept=false".parse::<BasisChoice>().unwrap(),
            BasisChoice::Identity { intercept: false }
        );
        assert_eq!(
            "bspline:degree=3:knots=5".parse::<BasisChoice>().unwrap(),
            BasisChoice::Bspline { degree: 3, knots: 5 }
        );
        assert!("bspline:degree=0".parse::<BasisChoice>().is_err());
        assert!("bspline:order=2".parse::<BasisChoice>().is_err());
        assert!("wavelet".parse::<BasisChoice>().is_err());
    }

    #[test]
    fn resolve_expands_box() {
        let states = [vec![0.0, 10.0], vec![1.0, 20.0]];
        let spec = BasisChoice::Bspline { degree: 1, knots: 1 }.resolve(2, &states).unwrap();
        match spec {
            BasisSpec::TensorBspline { lo, hi, .. } => {
                assert!((lo[0] + 0.05).abs() < 1e-12 && (hi[0] - 1.05).abs() < 1e-12);
                assert!((lo[1] - 9.5).abs() < 1e-12 && (hi[1] - 20.5).abs() < 1e-12);
            }
            _ => panic!("expected bspline"),
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = BasisSpec::bspline(2, vec![3, 1], vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: BasisSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
