//! Which dimensions of the model can be pruned and which axes of which
//! parameter tensors each of them masks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{binarize, GateConfig, GateParam};
use crate::model::{param_layout, DimKey, ModelConfig, ParamSpec, Stack};
use crate::tape::{outer_product, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PrunableDim {
    pub key: DimKey,
    pub name: String,
    pub extent: usize,
    pub enabled: bool,
}

impl PrunableDim {
    pub fn new(key: DimKey, extent: usize) -> Self {
        Self {
            key,
            name: key.to_string(),
            extent,
            enabled: true,
        }
    }

    /// Whether a dimension pruned to nothing keeps its best index instead.
    /// Heads and per-head widths may vanish: a layer without heads still
    /// computes its output bias.
    pub fn keeps_at_least_one(&self) -> bool {
        !matches!(self.key, DimKey::HeadCount(..) | DimKey::HeadDk(..))
    }
}

/// Gating of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBinding {
    pub tensor: String,
    pub shape: Vec<usize>,
    /// Dimension index masking each axis, if any.
    pub axes: Vec<Option<usize>>,
    /// Head gate `(dimension index, head index)` scaling this tensor's
    /// contribution as a whole.
    pub head: Option<(usize, usize)>,
}

impl MaskBinding {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunePlan {
    pub dims: Vec<PrunableDim>,
    pub bindings: Vec<MaskBinding>,
    /// Total scalar parameter count of the unpruned model.
    pub lambda: usize,
    by_tensor: HashMap<String, usize>,
    by_key: HashMap<DimKey, usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Also gate the residual-stream width `d`.
    pub prune_model_d: bool,
}

/// Enumerates the prunable dimensions of `config` and binds them.
pub fn build_plan(config: &ModelConfig, options: PlanOptions) -> Result<PrunePlan> {
    let mut dims = vec![PrunableDim {
        enabled: options.prune_model_d,
        ..PrunableDim::new(DimKey::ModelD, config.d)
    }];
    for stack in [Stack::Encoder, Stack::Decoder] {
        for (l, block) in config.stack(stack).iter().enumerate() {
            if !block.head_dims.is_empty() {
                dims.push(PrunableDim::new(DimKey::HeadCount(stack, l), block.head_dims.len()));
            }
            for (h, &w) in block.head_dims.iter().enumerate() {
                dims.push(PrunableDim::new(DimKey::HeadDk(stack, l, h), w));
            }
            dims.push(PrunableDim::new(DimKey::FfnDf(stack, l), block.d_f));
        }
    }
    for (i, &h) in config.adaptor_hidden.iter().enumerate() {
        dims.push(PrunableDim::new(DimKey::AdaptorHidden(i), h));
    }
    for (i, &h) in config.postnet_hidden.iter().enumerate() {
        dims.push(PrunableDim::new(DimKey::PostnetHidden(i), h));
    }
    PrunePlan::from_layout(&param_layout(config), dims)
}

impl PrunePlan {
    /// Binds every tensor of `layout` against `dims`. Every gated axis must
    /// name a declared dimension of matching extent.
    pub fn from_layout(layout: &[ParamSpec], dims: Vec<PrunableDim>) -> Result<Self> {
        let mut by_key = HashMap::new();
        for (i, d) in dims.iter().enumerate() {
            if d.extent == 0 {
                return Err(Error::Plan(format!("dimension `{}` has zero extent", d.name)));
            }
            if by_key.insert(d.key, i).is_some() {
                return Err(Error::Plan(format!("duplicate dimension `{}`", d.name)));
            }
        }
        let mut bindings = Vec::with_capacity(layout.len());
        let mut by_tensor = HashMap::new();
        for spec in layout {
            if spec.axes.len() != spec.shape.len() {
                return Err(Error::Plan(format!(
                    "`{}` declares {} axis bindings for rank {}",
                    spec.name,
                    spec.axes.len(),
                    spec.shape.len()
                )));
            }
            let mut axes = Vec::with_capacity(spec.axes.len());
            for (axis, key) in spec.axes.iter().enumerate() {
                axes.push(match key {
                    None => None,
                    Some(key) => {
                        let &d = by_key.get(key).ok_or_else(|| {
                            Error::Plan(format!("axis {axis} of `{}` is bound to unknown dimension `{key}`", spec.name))
                        })?;
                        if dims[d].extent != spec.shape[axis] {
                            return Err(Error::Plan(format!(
                                "axis {axis} of `{}` has extent {} but `{}` has {}",
                                spec.name, spec.shape[axis], dims[d].name, dims[d].extent
                            )));
                        }
                        Some(d)
                    }
                });
            }
            let head = match spec.head {
                None => None,
                Some(slot) => {
                    let key = DimKey::HeadCount(slot.stack, slot.layer);
                    let &d = by_key
                        .get(&key)
                        .ok_or_else(|| Error::Plan(format!("`{}` names missing head gate `{key}`", spec.name)))?;
                    if slot.head >= dims[d].extent {
                        return Err(Error::Plan(format!("`{}` names head {} beyond `{key}`", spec.name, slot.head)));
                    }
                    Some((d, slot.head))
                }
            };
            if by_tensor.insert(spec.name.clone(), bindings.len()).is_some() {
                return Err(Error::Plan(format!("duplicate tensor `{}`", spec.name)));
            }
            bindings.push(MaskBinding {
                tensor: spec.name.clone(),
                shape: spec.shape.clone(),
                axes,
                head,
            });
        }
        let lambda = bindings.iter().map(MaskBinding::numel).sum();
        Ok(Self {
            dims,
            bindings,
            lambda,
            by_tensor,
            by_key,
        })
    }

    pub fn binding(&self, tensor: &str) -> Result<&MaskBinding> {
        self.by_tensor
            .get(tensor)
            .map(|&i| &self.bindings[i])
            .ok_or_else(|| Error::Plan(format!("no binding for tensor `{tensor}`")))
    }

    pub fn dim_id(&self, key: DimKey) -> Option<usize> {
        self.by_key.get(&key).copied()
    }

    pub fn dim_by_name(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    fn enabled_dim(&self, d: Option<usize>) -> Option<usize> {
        d.filter(|&d| self.dims[d].enabled)
    }

    /// Whether any enabled gate touches this binding.
    pub fn is_active(&self, b: &MaskBinding) -> bool {
        b.axes.iter().any(|&d| self.enabled_dim(d).is_some()) || self.enabled_dim(b.head.map(|h| h.0)).is_some()
    }

    /// Number of parameters under at least one enabled gate.
    pub fn maskable_count(&self) -> usize {
        self.bindings.iter().filter(|b| self.is_active(b)).map(MaskBinding::numel).sum()
    }

    pub fn enabled_dims(&self) -> impl Iterator<Item = (usize, &PrunableDim)> {
        self.dims.iter().enumerate().filter(|(_, d)| d.enabled)
    }

    /// Puts per-dimension gate vectors on the tape as constants, checking
    /// lengths. Disabled dimensions map to `None`.
    pub fn gate_constants<T: Real>(&self, tape: &mut Tape<T>, z: &[Option<Tensor<T>>]) -> Result<Vec<Option<Var>>> {
        self.check_gates(z)?;
        Ok(z
            .iter()
            .zip(&self.dims)
            .map(|(t, d)| match t {
                Some(t) if d.enabled => Some(tape.constant(t.clone())),
                _ => None,
            })
            .collect())
    }

    fn check_gates<T: Real>(&self, z: &[Option<Tensor<T>>]) -> Result<()> {
        if z.len() != self.dims.len() {
            return Err(Error::Plan(format!("{} gate vectors for {} dimensions", z.len(), self.dims.len())));
        }
        for (t, d) in z.iter().zip(&self.dims) {
            match t {
                Some(t) if t.shape() != [d.extent] => {
                    return Err(Error::Shape {
                        op: "gate vector",
                        lhs: vec![d.extent],
                        rhs: t.shape().to_vec(),
                    })
                }
                None if d.enabled => return Err(Error::MissingSample(d.name.clone())),
                _ => {}
            }
        }
        Ok(())
    }

    /// Full mask of one tensor: the outer product of its axis gates, times
    /// its head gate. Axes without an enabled gate contribute ones.
    pub fn compose_mask<T: Real>(&self, binding: &MaskBinding, z: &[Option<Tensor<T>>]) -> Result<Tensor<T>> {
        self.check_gates(z)?;
        let vec_of = |d: Option<usize>| self.enabled_dim(d).and_then(|d| z[d].as_ref());
        let mut mask = outer_product(&binding.shape, |axis| vec_of(binding.axes[axis]).map(|t| t.data()));
        if let Some((d, h)) = binding.head {
            if let Some(g) = vec_of(Some(d)) {
                let g = g.data()[h];
                mask = mask.map(|m| m * g);
            }
        }
        Ok(mask)
    }

    /// Serializable description of the plan.
    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            lambda: self.lambda,
            maskable: self.maskable_count(),
            dims: self
                .dims
                .iter()
                .map(|d| DimSummary {
                    name: d.name.clone(),
                    extent: d.extent,
                    enabled: d.enabled,
                })
                .collect(),
            bindings: self
                .bindings
                .iter()
                .map(|b| BindingSummary {
                    tensor: b.tensor.clone(),
                    axes: b.axes.iter().map(|d| d.map(|d| self.dims[d].name.clone())).collect(),
                    head: b.head.map(|(d, h)| (self.dims[d].name.clone(), h)),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimSummary {
    pub name: String,
    pub extent: usize,
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingSummary {
    pub tensor: String,
    pub axes: Vec<Option<String>>,
    pub head: Option<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub lambda: usize,
    pub maskable: usize,
    pub dims: Vec<DimSummary>,
    pub bindings: Vec<BindingSummary>,
}

/// Learnable gates for the enabled dimensions of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet<T> {
    /// Indexed like `plan.dims`; `None` for disabled dimensions.
    pub gates: Vec<Option<GateParam<T>>>,
}

impl<T: Real> GateSet<T> {
    pub fn new(plan: &PrunePlan, config: &GateConfig) -> Result<Self> {
        let gates = plan
            .dims
            .iter()
            .map(|d| {
                d.enabled
                    .then(|| GateParam::new(d.name.clone(), d.extent, config.clone()))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self { gates })
    }

    pub fn iter(&self) -> impl Iterator<Item = &GateParam<T>> {
        self.gates.iter().flatten()
    }

    /// Binary masks from logit signs, keeping the best index of any
    /// dimension that would otherwise be pruned away entirely.
    pub fn binarize(&self, plan: &PrunePlan) -> BinaryMasks {
        let keep = self
            .gates
            .iter()
            .map(|g| g.as_ref().map(|g| binarize(g).data().iter().map(|&v| v > T::zero()).collect()))
            .collect();
        let scores: Vec<Option<Vec<f64>>> = self
            .gates
            .iter()
            .map(|g| g.as_ref().map(|g| g.log_alpha.data().iter().map(|v| v.as_f64()).collect()))
            .collect();
        BinaryMasks::new(plan, keep, |d| scores[d].as_deref())
    }
}

/// Kept indices per dimension after binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMasks {
    /// Indexed like `plan.dims`; `None` for disabled dimensions (all kept).
    pub keep: Vec<Option<Vec<bool>>>,
    /// Dimensions that lost every index and got one back.
    pub forced: Vec<String>,
}

impl BinaryMasks {
    /// Keeps everything.
    pub fn all_kept(plan: &PrunePlan) -> Self {
        Self {
            keep: plan.dims.iter().map(|d| d.enabled.then(|| vec![true; d.extent])).collect(),
            forced: Vec::new(),
        }
    }

    /// Applies the keep-at-least-one rule to `keep`, restoring the index
    /// with the highest score (first on ties, or index 0 without scores).
    pub fn new<'a>(
        plan: &PrunePlan,
        mut keep: Vec<Option<Vec<bool>>>,
        scores: impl Fn(usize) -> Option<&'a [f64]>,
    ) -> Self {
        let mut forced = Vec::new();
        for (d, dim) in plan.dims.iter().enumerate() {
            let Some(k) = keep[d].as_mut() else { continue };
            if !dim.keeps_at_least_one() || k.iter().any(|&b| b) {
                continue;
            }
            let best = scores(d).map_or(0, |s| {
                s.iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > s[best] { i } else { best })
            });
            k[best] = true;
            forced.push(dim.name.clone());
        }
        Self { keep, forced }
    }

    pub fn kept(&self, d: usize) -> Option<usize> {
        self.keep[d].as_ref().map(|k| k.iter().filter(|&&b| b).count())
    }

    /// Masks as 0/1 gate vectors.
    pub fn z<T: Real>(&self) -> Vec<Option<Tensor<T>>> {
        self.keep
            .iter()
            .map(|k| {
                k.as_ref().map(|k| {
                    Tensor::vector(k.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())
                        .expect("non-empty dimension")
                })
            })
            .collect()
    }
}

/// Parameters surviving compaction under `masks`, counted in closed form.
pub fn surviving_params(plan: &PrunePlan, masks: &BinaryMasks) -> usize {
    plan.bindings
        .iter()
        .map(|b| {
            let head_alive = match b.head {
                Some((d, h)) => masks.keep[d].as_ref().map_or(true, |k| k[h]),
                None => true,
            };
            if !head_alive {
                return 0;
            }
            b.axes
                .iter()
                .zip(&b.shape)
                .map(|(d, &n)| d.and_then(|d| masks.kept(d)).unwrap_or(n))
                .product::<usize>()
        })
        .sum()
}

/// Percentage of all parameters removed by compaction under `masks`.
pub fn sparsity_of(plan: &PrunePlan, masks: &BinaryMasks) -> f64 {
    100.0 * (1.0 - surviving_params(plan, masks) as f64 / plan.lambda as f64)
}
