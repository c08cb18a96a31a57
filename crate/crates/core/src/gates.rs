//! Hard-concrete gates: stochastic sampling, the L1 mask penalty and
//! threshold binarization.
//!
//! A gate over a dimension of extent `k` owns `k` logits (`log α`). During
//! training each logit is turned into a relaxed mask value
//!
//! ```text
//! s = sigmoid((logit(u) + log α) / β),   u ~ U(0, 1)
//! z = clamp(γ + s·(η − γ), 0, 1)
//! ```
//!
//! and at inference the mask is `1` exactly when `log α ≥ 0`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::PrunePlan;
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, Real, Tensor};

/// Uniform draws are confined to `[ε, 1 − ε]` so `logit(u)` stays finite.
pub const UNIFORM_EPS: f64 = 1e-6;

/// Form of the mask penalty summed into the regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// L1 norm of the sampled masks.
    #[default]
    Sampled,
    /// Closed-form probability that each gate is non-zero. Needs `gamma < 0`.
    Expected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub init_log_alpha: f64,
    pub penalty: Penalty,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.0,
            eta: 1.0,
            init_log_alpha: 2.5,
            penalty: Penalty::Sampled,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::GateConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma <= 0.0) {
            return Err(Error::GateConfig(format!("gamma must be <= 0, got {}", self.gamma)));
        }
        if !(self.eta >= 1.0) {
            return Err(Error::GateConfig(format!("eta must be >= 1, got {}", self.eta)));
        }
        if !self.init_log_alpha.is_finite() {
            return Err(Error::GateConfig("init_log_alpha must be finite".into()));
        }
        if self.penalty == Penalty::Expected && self.gamma >= 0.0 {
            return Err(Error::GateConfig(
                "expected penalty needs gamma < 0 (with gamma = 0 every gate is non-zero almost surely)".into(),
            ));
        }
        Ok(())
    }

    fn unstretched(&self) -> bool {
        self.gamma == 0.0 && self.eta == 1.0
    }
}

/// Learnable logits over one prunable dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParam<T> {
    pub name: String,
    pub log_alpha: Tensor<T>,
    pub config: GateConfig,
}

impl<T: Real> GateParam<T> {
    pub fn new(name: impl Into<String>, extent: usize, config: GateConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            name: name.into(),
            log_alpha: Tensor::full(&[extent], T::lit(config.init_log_alpha)),
            config,
        })
    }

    pub fn with_logits(name: impl Into<String>, log_alpha: Tensor<T>, config: GateConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            name: name.into(),
            log_alpha,
            config,
        })
    }

    pub fn extent(&self) -> usize {
        self.log_alpha.len()
    }

    /// Keep probabilities `sigmoid(log α / β)`.
    pub fn probabilities(&self) -> Vec<f64> {
        let beta = self.config.beta;
        self.log_alpha
            .data()
            .iter()
            .map(|&a| sigmoid(a.as_f64() / beta))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSample<T> {
    pub u: Tensor<T>,
    pub s: Tensor<T>,
    pub z: Tensor<T>,
}

/// Draws `k` uniforms in `[ε, 1 − ε]`.
pub fn draw_uniform(rng: &mut impl RngCore, k: usize) -> Vec<f64> {
    (0..k)
        .map(|_| UNIFORM_EPS + (1.0 - 2.0 * UNIFORM_EPS) * rng.gen::<f64>())
        .collect()
}

/// Noise for one gate at one training step, fixed by `(seed, step, name)`.
pub fn step_uniform(seed: u64, step: u64, name: &str, k: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, name));
    draw_uniform(&mut rng, k)
}

pub(crate) fn mix(seed: u64, step: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded with seed and step through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = seed ^ h.rotate_left(17) ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn sample_gate<T: Real>(gate: &GateParam<T>, rng: &mut impl RngCore) -> Result<GateSample<T>> {
    let u = draw_uniform(rng, gate.extent());
    sample_gate_with_noise(gate, &u)
}

/// Deterministic part of the sampler: maps given uniforms to `(s, z)`.
pub fn sample_gate_with_noise<T: Real>(gate: &GateParam<T>, u: &[f64]) -> Result<GateSample<T>> {
    let cfg = &gate.config;
    if u.len() != gate.extent() {
        return Err(Error::Shape {
            op: "sample_gate",
            lhs: vec![gate.extent()],
            rhs: vec![u.len()],
        });
    }
    if let Some(&bad) = u.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::SamplerContract(bad));
    }
    let mut s = Vec::with_capacity(u.len());
    let mut z = Vec::with_capacity(u.len());
    for (&ui, &la) in u.iter().zip(gate.log_alpha.data()) {
        let logit = T::lit(ui.ln() - (1.0 - ui).ln());
        let si = sigmoid((logit + la) / T::lit(cfg.beta));
        let zi = stretch_clamp(si, cfg);
        s.push(si);
        z.push(zi);
    }
    Ok(GateSample {
        u: Tensor::vector(u.iter().map(|&v| T::lit(v)).collect())?,
        s: Tensor::vector(s)?,
        z: Tensor::vector(z)?,
    })
}

fn stretch_clamp<T: Real>(s: T, cfg: &GateConfig) -> T {
    if cfg.unstretched() {
        return s;
    }
    let v = T::lit(cfg.gamma) + s * T::lit(cfg.eta - cfg.gamma);
    v.max(T::zero()).min(T::one())
}

/// Records the sampler on a tape so that `z` is differentiable in `log α`.
pub fn gate_on_tape<T: Real>(tape: &mut Tape<T>, log_alpha: Var, u: &[f64], cfg: &GateConfig) -> Result<Var> {
    if let Some(&bad) = u.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::SamplerContract(bad));
    }
    let noise = Tensor::vector(u.iter().map(|&v| T::lit(v.ln() - (1.0 - v).ln())).collect())?;
    let noise = tape.constant(noise);
    let pre = tape.add(log_alpha, noise)?;
    let pre = tape.scale(pre, T::lit(1.0 / cfg.beta));
    let s = tape.sigmoid(pre);
    Ok(stretch_on_tape(tape, s, cfg))
}

/// Noise-free gate `clamp(γ + sigmoid(log α / β)(η − γ), 0, 1)`, used to
/// monitor convergence without sampling.
pub fn mean_gate_on_tape<T: Real>(tape: &mut Tape<T>, log_alpha: Var, cfg: &GateConfig) -> Var {
    let pre = tape.scale(log_alpha, T::lit(1.0 / cfg.beta));
    let s = tape.sigmoid(pre);
    stretch_on_tape(tape, s, cfg)
}

pub fn mean_gate<T: Real>(gate: &GateParam<T>) -> Tensor<T> {
    let beta = T::lit(gate.config.beta);
    gate.log_alpha.map(|a| stretch_clamp(sigmoid(a / beta), &gate.config))
}

fn stretch_on_tape<T: Real>(tape: &mut Tape<T>, s: Var, cfg: &GateConfig) -> Var {
    if cfg.unstretched() {
        return s;
    }
    let k = tape.value(s).len();
    let stretched = tape.scale(s, T::lit(cfg.eta - cfg.gamma));
    let offset = tape.constant(Tensor::full(&[k], T::lit(cfg.gamma)));
    let shifted = tape.add(stretched, offset).expect("same shape");
    tape.clamp(shifted, T::zero(), T::one())
}

/// `P(z > 0) = sigmoid(log α − β·ln(−γ/η))` on the tape.
pub fn expected_nonzero_on_tape<T: Real>(tape: &mut Tape<T>, log_alpha: Var, cfg: &GateConfig) -> Result<Var> {
    if cfg.gamma >= 0.0 {
        return Err(Error::GateConfig("expected penalty needs gamma < 0".into()));
    }
    let k = tape.value(log_alpha).len();
    let shift = tape.constant(Tensor::full(&[k], T::lit(-cfg.beta * (-cfg.gamma / cfg.eta).ln())));
    let pre = tape.add(log_alpha, shift)?;
    Ok(tape.sigmoid(pre))
}

/// Inference mask: 1 iff `sigmoid(log α / β) ≥ 0.5`, i.e. iff `log α ≥ 0`.
pub fn binarize<T: Real>(gate: &GateParam<T>) -> Tensor<T> {
    gate.log_alpha
        .map(|a| if a >= T::zero() { T::one() } else { T::zero() })
}

/// Fraction of keep probabilities strictly inside (0.05, 0.95).
pub fn gate_polarization<'a, T: Real + 'a>(gates: impl IntoIterator<Item = &'a GateParam<T>>) -> Result<f64> {
    let mut total = 0usize;
    let mut undecided = 0usize;
    for g in gates {
        for p in g.probabilities() {
            total += 1;
            if p > 0.05 && p < 0.95 {
                undecided += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyGateSet);
    }
    Ok(undecided as f64 / total as f64)
}

/// Regularizer `Σ ‖z‖₁` over every composed per-tensor mask, recorded on the
/// tape. `z[dim]` holds the gate vector of each enabled dimension.
///
/// Gate values are nonnegative, so the L1 norm of an outer-product mask
/// factorizes into the product of the per-axis sums.
pub fn mask_l1_on_tape<T: Real>(tape: &mut Tape<T>, plan: &PrunePlan, z: &[Option<Var>]) -> Result<Var> {
    let mut sums: Vec<Option<Var>> = vec![None; plan.dims.len()];
    let mut heads: Vec<Vec<Option<Var>>> = plan.dims.iter().map(|d| vec![None; d.extent]).collect();
    let mut total: Option<Var> = None;
    for binding in plan.bindings.iter().filter(|b| plan.is_active(b)) {
        let mut factor = 1.0f64;
        let mut term: Option<Var> = None;
        for (axis, dim) in binding.axes.iter().enumerate() {
            match dim.filter(|&d| plan.dims[d].enabled) {
                Some(d) => {
                    let zv = z[d].ok_or_else(|| Error::MissingSample(plan.dims[d].name.clone()))?;
                    let s = match sums[d] {
                        Some(s) => s,
                        None => {
                            let s = tape.sum(zv);
                            sums[d] = Some(s);
                            s
                        }
                    };
                    term = Some(match term {
                        Some(t) => tape.mul(t, s)?,
                        None => s,
                    });
                }
                None => factor *= binding.shape[axis] as f64,
            }
        }
        if let Some((d, idx)) = binding.head.filter(|&(d, _)| plan.dims[d].enabled) {
            let zv = z[d].ok_or_else(|| Error::MissingSample(plan.dims[d].name.clone()))?;
            let h = match heads[d][idx] {
                Some(h) => h,
                None => {
                    let h = tape.select(zv, idx)?;
                    heads[d][idx] = Some(h);
                    h
                }
            };
            term = Some(match term {
                Some(t) => tape.mul(t, h)?,
                None => h,
            });
        }
        let term = term.expect("active binding has an enabled gate");
        let term = if factor != 1.0 { tape.scale(term, T::lit(factor)) } else { term };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    })
}

/// Value of the regularizer for given per-dimension gate samples.
pub fn mask_l1<T: Real>(plan: &PrunePlan, samples: &[Option<GateSample<T>>]) -> Result<T> {
    let z: Vec<Option<Tensor<T>>> = samples.iter().map(|s| s.as_ref().map(|s| s.z.clone())).collect();
    mask_l1_values(plan, &z)
}

pub fn mask_l1_values<T: Real>(plan: &PrunePlan, z: &[Option<Tensor<T>>]) -> Result<T> {
    if z.len() != plan.dims.len() {
        return Err(Error::Plan(format!(
            "{} gate vectors for {} dimensions",
            z.len(),
            plan.dims.len()
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Option<Var>> = z
        .iter()
        .zip(&plan.dims)
        .map(|(t, d)| match t {
            Some(t) if d.enabled => {
                if t.len() != d.extent {
                    return Err(Error::Shape {
                        op: "mask_l1",
                        lhs: vec![d.extent],
                        rhs: t.shape().to_vec(),
                    });
                }
                Ok(Some(tape.constant(t.clone())))
            }
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let out = mask_l1_on_tape(&mut tape, plan, &vars)?;
    Ok(tape.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gate(vals: &[f64], cfg: GateConfig) -> GateParam<f64> {
        GateParam::with_logits("g", Tensor::vector(vals.to_vec()).unwrap(), cfg).unwrap()
    }

    #[test]
    fn sampler_examples() {
        let d = GateConfig::default();
        let s = sample_gate_with_noise(&gate(&[0.0], d.clone()), &[0.5]).unwrap();
        assert_eq!(s.s.data(), &[0.5]);
        assert_eq!(s.z.data(), &[0.5]);

        let s = sample_gate_with_noise(&gate(&[20.0], d), &[0.5]).unwrap();
        assert!(s.z.data()[0] >= 1.0 - 1e-8);

        let stretched = GateConfig {
            gamma: -0.1,
            eta: 1.1,
            ..GateConfig::default()
        };
        let s = sample_gate_with_noise(&gate(&[0.0], stretched), &[0.5]).unwrap();
        assert_eq!(s.s.data(), &[0.5]);
        assert_abs_diff_eq!(s.z.data()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn sampler_rejects_endpoint_noise() {
        let g = gate(&[0.0, 0.0], GateConfig::default());
        assert!(matches!(
            sample_gate_with_noise(&g, &[0.0, 0.5]),
            Err(Error::SamplerContract(_))
        ));
        assert!(matches!(
            sample_gate_with_noise(&g, &[0.5, 1.0]),
            Err(Error::SamplerContract(_))
        ));
    }

    #[test]
    fn seeded_samples_lie_strictly_inside_unit_interval() {
        let g = GateParam::<f64>::new("g", 64, GateConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_gate(&g, &mut rng).unwrap();
        assert!(s.u.data().iter().all(|&u| u > 0.0 && u < 1.0));
        assert!(s.z.data().iter().all(|&z| z > 0.0 && z < 1.0));
    }

    #[test]
    fn step_noise_is_replayable_and_name_dependent() {
        assert_eq!(step_uniform(1, 2, "a", 5), step_uniform(1, 2, "a", 5));
        assert_ne!(step_uniform(1, 2, "a", 5), step_uniform(1, 2, "b", 5));
        assert_ne!(step_uniform(1, 2, "a", 5), step_uniform(1, 3, "a", 5));
    }

    #[test]
    fn binarize_examples() {
        let d = GateConfig::default();
        assert_eq!(binarize(&gate(&[0.0], d.clone())).data(), &[1.0]);
        assert_eq!(binarize(&gate(&[-0.1], d.clone())).data(), &[0.0]);
        assert_eq!(binarize(&gate(&[-3.0, 0.0, 3.0], d)).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn polarization_examples() {
        let d = GateConfig::default();
        let saturated = gate(&[20.0, -20.0, 20.0], d.clone());
        assert_eq!(gate_polarization([&saturated]).unwrap(), 0.0);
        let undecided = gate(&[0.0, 0.0], d.clone());
        assert_eq!(gate_polarization([&undecided]).unwrap(), 1.0);
        let mixed = gate(&[0.0, 20.0, -20.0, 20.0], d);
        assert_eq!(gate_polarization([&mixed]).unwrap(), 0.25);
        assert!(matches!(
            gate_polarization(std::iter::empty::<&GateParam<f64>>()),
            Err(Error::EmptyGateSet)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        for bad in [
            GateConfig { beta: 0.0, ..Default::default() },
            GateConfig { gamma: 0.1, ..Default::default() },
            GateConfig { eta: 0.9, ..Default::default() },
            GateConfig { penalty: Penalty::Expected, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn z_is_monotone_in_log_alpha(u in 1e-6f64..(1.0 - 1e-6), a in -10.0f64..10.0, delta in 0.0f64..5.0,
                                      gamma in -0.5f64..=0.0, eta in 1.0f64..1.5) {
            let cfg = GateConfig { gamma, eta, ..GateConfig::default() };
            let lo = sample_gate_with_noise(&gate(&[a], cfg.clone()), &[u]).unwrap();
            let hi = sample_gate_with_noise(&gate(&[a + delta], cfg), &[u]).unwrap();
            proptest::prop_assert!(hi.z.data()[0] >= lo.z.data()[0]);
            proptest::prop_assert!((0.0..=1.0).contains(&lo.z.data()[0]));
        }

        #[test]
        fn binarize_ignores_beta_scale(vals in proptest::collection::vec(-5.0f64..5.0, 1..8), beta in 0.05f64..20.0) {
            let a = gate(&vals, GateConfig::default());
            let b = gate(&vals, GateConfig { beta, ..GateConfig::default() });
            proptest::prop_assert_eq!(binarize(&a), binarize(&b));
        }

        #[test]
        fn default_clamp_is_identity(u in 1e-6f64..(1.0 - 1e-6), a in -30.0f64..30.0) {
            let s = sample_gate_with_noise(&gate(&[a], GateConfig::default()), &[u]).unwrap();
            proptest::prop_assert_eq!(s.s.data()[0], s.z.data()[0]);
        }
    }
}
