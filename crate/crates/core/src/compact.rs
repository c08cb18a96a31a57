//! Physical removal of pruned channels and heads.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateParam;
use crate::model::{head_param_name, param_layout, BlockShape, DimKey, Model, ModelConfig, Stack};
use crate::plan::{build_plan, sparsity_of, surviving_params, BinaryMasks, GateSet, PlanOptions, PrunePlan};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub name: String,
    pub kept: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactionReport {
    pub dims: Vec<DimReport>,
    pub params_before: usize,
    pub params_after: usize,
    pub sparsity_pct: f64,
    pub ratio: f64,
    /// Largest |masked − compacted| output difference over the probes.
    pub residual: f64,
    /// Dimensions that kept one index only by the keep-at-least-one rule.
    pub forced: Vec<String>,
}

impl CompactionReport {
    pub fn is_identity(&self) -> bool {
        self.params_before == self.params_after
    }

    /// Report of applying `next` to a model already compacted as `self`.
    pub fn then(&self, next: &CompactionReport) -> CompactionReport {
        if next.is_identity() {
            return CompactionReport {
                residual: self.residual.max(next.residual),
                ..self.clone()
            };
        }
        let mut forced = self.forced.clone();
        forced.extend(next.forced.iter().cloned());
        CompactionReport {
            dims: next.dims.clone(),
            params_before: self.params_before,
            params_after: next.params_after,
            sparsity_pct: 100.0 * (1.0 - next.params_after as f64 / self.params_before as f64),
            ratio: self.params_before as f64 / next.params_after as f64,
            residual: self.residual.max(next.residual),
            forced,
        }
    }
}

/// A compacted model with gates re-indexed to its surviving channels.
#[derive(Clone, Debug)]
pub struct Compacted<T> {
    pub model: Model<T>,
    pub plan: PrunePlan,
    pub gates: GateSet<T>,
    pub report: CompactionReport,
}

fn kept_indices(masks: &BinaryMasks, d: Option<usize>, extent: usize) -> Vec<usize> {
    match d.and_then(|d| masks.keep[d].as_ref()) {
        Some(k) => k.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
        None => (0..extent).collect(),
    }
}

/// Surviving heads of one layer as `(old index, kept channel indices)`.
fn surviving_heads(
    plan: &PrunePlan,
    masks: &BinaryMasks,
    shape: &BlockShape,
    stack: Stack,
    layer: usize,
) -> Vec<(usize, Vec<usize>)> {
    let head_gate = plan.dim_id(DimKey::HeadCount(stack, layer));
    let alive = kept_indices(masks, head_gate, shape.head_dims.len());
    alive
        .into_iter()
        .filter_map(|h| {
            let dk = plan.dim_id(DimKey::HeadDk(stack, layer, h));
            let ch = kept_indices(masks, dk, shape.head_dims[h]);
            (!ch.is_empty()).then_some((h, ch))
        })
        .collect()
}

/// Deletes every pruned row, column, bias entry and head.
///
/// `masks` must come from `plan` (see [`GateSet::binarize`]); the result
/// computes the same function as the model run under those binary masks.
pub fn compact<T: Real>(
    model: &Model<T>,
    plan: &PrunePlan,
    gates: &GateSet<T>,
    masks: &BinaryMasks,
) -> Result<Compacted<T>> {
    model.validate()?;
    let config = &model.config;
    if plan.lambda != config.param_count() || masks.keep.len() != plan.dims.len() {
        return Err(Error::Plan("plan, masks and model do not belong together".into()));
    }
    let idx = |key: DimKey, extent: usize| kept_indices(masks, plan.dim_id(key), extent);

    let d_keep = idx(DimKey::ModelD, config.d);
    let mut heads_of = Vec::new();
    let mut new_stacks = [Vec::new(), Vec::new()];
    for (si, stack) in [Stack::Encoder, Stack::Decoder].into_iter().enumerate() {
        for (l, shape) in config.stack(stack).iter().enumerate() {
            let heads = surviving_heads(plan, masks, shape, stack, l);
            new_stacks[si].push(BlockShape {
                head_dims: heads.iter().map(|(_, ch)| ch.len()).collect(),
                d_f: idx(DimKey::FfnDf(stack, l), shape.d_f).len(),
            });
            heads_of.push(((stack, l), heads));
        }
    }
    let [encoder, decoder] = new_stacks;
    let new_config = ModelConfig {
        d: d_keep.len(),
        encoder,
        decoder,
        adaptor_hidden: (0..config.adaptor_hidden.len())
            .map(|i| idx(DimKey::AdaptorHidden(i), config.adaptor_hidden[i]).len())
            .collect(),
        postnet_hidden: (0..config.postnet_hidden.len())
            .map(|i| idx(DimKey::PostnetHidden(i), config.postnet_hidden[i]).len())
            .collect(),
        pos_channels: d_keep.iter().map(|&c| config.pos_channels[c]).collect(),
        ..config.clone()
    };
    new_config.validate()?;

    let heads_for = |stack: Stack, layer: usize| -> &Vec<(usize, Vec<usize>)> {
        &heads_of.iter().find(|(k, _)| *k == (stack, layer)).expect("every layer listed").1
    };

    let mut params = IndexMap::new();
    for spec in param_layout(&new_config) {
        let (source, head_channels) = match spec.head {
            Some(slot) => {
                let (old_head, ch) = &heads_for(slot.stack, slot.layer)[slot.head];
                (head_param_name(slot.stack, slot.layer, *old_head, slot.part), Some(ch))
            }
            None => (spec.name.clone(), None),
        };
        let binding = plan.binding(&source)?;
        let mut t = model.param(&source)?.clone();
        for (axis, d) in binding.axes.iter().enumerate() {
            let keep = match (d, head_channels) {
                (Some(d), Some(ch)) if matches!(plan.dims[*d].key, DimKey::HeadDk(..)) => ch.clone(),
                _ => kept_indices(masks, *d, binding.shape[axis]),
            };
            if keep.len() != binding.shape[axis] {
                t = t.select_axis(axis, &keep)?;
            }
        }
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::Plan(format!(
                "compacted `{}` has shape {:?}, layout expects {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
        params.insert(spec.name, t);
    }
    let small = Model {
        config: new_config,
        params,
    };
    small.validate()?;

    let options = PlanOptions {
        prune_model_d: plan.dim_id(DimKey::ModelD).is_some_and(|d| plan.dims[d].enabled),
    };
    let new_plan = build_plan(&small.config, options)?;
    let new_gates = carry_gates(plan, gates, masks, &new_plan, &heads_of)?;

    let params_after = small.param_count();
    let expected_after = surviving_params(plan, masks);
    if params_after != expected_after {
        return Err(Error::Plan(format!(
            "compacted model has {params_after} parameters, closed form gives {expected_after}"
        )));
    }
    let report = CompactionReport {
        dims: plan
            .enabled_dims()
            .map(|(i, d)| DimReport {
                name: d.name.clone(),
                kept: masks.kept(i).unwrap_or(d.extent),
                total: d.extent,
            })
            .collect(),
        params_before: plan.lambda,
        params_after,
        sparsity_pct: sparsity_of(plan, masks),
        ratio: plan.lambda as f64 / params_after as f64,
        residual: 0.0,
        forced: masks.forced.clone(),
    };
    Ok(Compacted {
        model: small,
        plan: new_plan,
        gates: new_gates,
        report,
    })
}

/// Gate logits of surviving indices, re-indexed like the compacted model.
/// Indices kept only by the keep-at-least-one rule get logit `max(·, 0)` so
/// binarizing the compacted gates keeps everything.
fn carry_gates<T: Real>(
    plan: &PrunePlan,
    gates: &GateSet<T>,
    masks: &BinaryMasks,
    new_plan: &PrunePlan,
    heads_of: &[((Stack, usize), Vec<(usize, Vec<usize>)>)],
) -> Result<GateSet<T>> {
    let mut out = Vec::with_capacity(new_plan.dims.len());
    for nd in &new_plan.dims {
        if !nd.enabled {
            out.push(None);
            continue;
        }
        // map the new dimension back to its source dimension and indices
        let (old_key, keep) = match nd.key {
            DimKey::HeadCount(s, l) => {
                let heads = &heads_of.iter().find(|(k, _)| *k == (s, l)).expect("layer").1;
                (nd.key, heads.iter().map(|(h, _)| *h).collect::<Vec<_>>())
            }
            DimKey::HeadDk(s, l, h) => {
                let heads = &heads_of.iter().find(|(k, _)| *k == (s, l)).expect("layer").1;
                let (old_h, ch) = &heads[h];
                (DimKey::HeadDk(s, l, *old_h), ch.clone())
            }
            key => {
                let d = plan.dim_id(key).ok_or_else(|| Error::Plan(format!("no source for `{key}`")))?;
                (key, kept_indices(masks, Some(d), plan.dims[d].extent))
            }
        };
        let d = plan
            .dim_id(old_key)
            .ok_or_else(|| Error::Plan(format!("no source for `{old_key}`")))?;
        let src = gates.gates[d]
            .as_ref()
            .ok_or_else(|| Error::MissingSample(plan.dims[d].name.clone()))?;
        let logits: Vec<T> = keep.iter().map(|&i| src.log_alpha.data()[i].max(T::zero())).collect();
        out.push(Some(GateParam::with_logits(
            nd.name.clone(),
            Tensor::vector(logits)?,
            src.config.clone(),
        )?));
    }
    Ok(GateSet { gates: out })
}

/// Random `(tokens, speaker)` probes for equivalence checks.
pub fn probe_inputs(config: &ModelConfig, n: usize, seed: u64) -> Vec<(Vec<usize>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..=12);
            let tokens = (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect();
            (tokens, rng.gen_range(0..config.n_speakers))
        })
        .collect()
}

/// Largest output difference between `model` under binary `masks` and its
/// compacted form on `probes`.
pub fn equivalence_residual<T: Real>(
    model: &Model<T>,
    plan: &PrunePlan,
    masks: &BinaryMasks,
    small: &Model<T>,
    probes: &[(Vec<usize>, usize)],
) -> Result<f64> {
    let z = masks.z::<T>();
    let diffs = crate::par::map_ordered(probes, |(tokens, speaker)| {
        let masked = model.forward_masked(plan, &z, tokens, *speaker)?;
        let compacted = small.forward(tokens, *speaker)?;
        masked.max_abs_diff(&compacted)
    });
    let mut worst = 0.0f64;
    for d in diffs {
        worst = worst.max(d?);
    }
    Ok(worst)
}

/// Binarizes `gates`, compacts, and measures the residual on `n_probes`
/// random inputs.
pub fn compact_checked<T: Real>(
    model: &Model<T>,
    plan: &PrunePlan,
    gates: &GateSet<T>,
    n_probes: usize,
    seed: u64,
) -> Result<Compacted<T>> {
    let masks = gates.binarize(plan);
    let mut out = compact(model, plan, gates, &masks)?;
    let probes = probe_inputs(&model.config, n_probes, seed);
    out.report.residual = equivalence_residual(model, plan, &masks, &out.model, &probes)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::GateConfig;
    use crate::model::{ModelSpec, ParamSpec};
    use crate::plan::PrunableDim;

    fn setup(prune_d: bool) -> (Model<f64>, PrunePlan, GateSet<f64>) {
        let config = ModelSpec {
            vocab_size: 10,
            d: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_k: 8,
            d_f: 12,
            adaptor_hidden: 5,
            postnet_hidden: 6,
            n_mel: 4,
            n_speakers: 3,
            ..ModelSpec::default()
        }
        .build()
        .unwrap();
        let mut model = Model::init(config, 11).unwrap();
        model.perturb(12, 0.1);
        let plan = build_plan(&model.config, PlanOptions { prune_model_d: prune_d }).unwrap();
        let gates = GateSet::new(&plan, &GateConfig::default()).unwrap();
        (model, plan, gates)
    }

    #[test]
    fn all_kept_is_identity() {
        let (model, plan, gates) = setup(true);
        let out = compact_checked(&model, &plan, &gates, 5, 0).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.report.params_after, out.report.params_before);
        assert_eq!(out.report.ratio, 1.0);
        assert_eq!(out.report.residual, 0.0);
    }

    #[test]
    fn two_layer_chain_halves() {
        // 4 → 4 → 4 without biases, middle gate [1, 0, 1, 0]
        let hidden = Some(DimKey::AdaptorHidden(0));
        let layout = vec![
            ParamSpec {
                name: "a".into(),
                shape: vec![4, 4],
                axes: vec![None, hidden],
                head: None,
            },
            ParamSpec {
                name: "b".into(),
                shape: vec![4, 4],
                axes: vec![hidden, None],
                head: None,
            },
        ];
        let plan = PrunePlan::from_layout(&layout, vec![PrunableDim::new(DimKey::AdaptorHidden(0), 4)]).unwrap();
        let masks = BinaryMasks {
            keep: vec![Some(vec![true, false, true, false])],
            forced: vec![],
        };
        assert_eq!(plan.lambda, 32);
        assert_eq!(surviving_params(&plan, &masks), 16);
        assert_eq!(sparsity_of(&plan, &masks), 50.0);
    }

    fn prune_some(plan: &PrunePlan, gates: &mut GateSet<f64>) {
        for (d, g) in gates.gates.iter_mut().enumerate() {
            if let Some(g) = g {
                for (i, v) in g.log_alpha.data_mut().iter_mut().enumerate() {
                    if (i + d) % 3 == 0 {
                        *v = -1.0;
                    }
                }
            }
        }
        let _ = plan;
    }

    #[test]
    fn compacted_forward_matches_masked_forward() {
        for prune_d in [false, true] {
            let (model, plan, mut gates) = setup(prune_d);
            prune_some(&plan, &mut gates);
            let out = compact_checked(&model, &plan, &gates, 10, 1).unwrap();
            assert!(out.report.params_after < out.report.params_before);
            assert!(out.report.residual < 1e-10, "residual {}", out.report.residual);
        }
    }

    #[test]
    fn compaction_is_idempotent() {
        let (model, plan, mut gates) = setup(true);
        prune_some(&plan, &mut gates);
        let once = compact_checked(&model, &plan, &gates, 4, 2).unwrap();
        let twice = compact_checked(&once.model, &once.plan, &once.gates, 4, 2).unwrap();
        assert_eq!(twice.model, once.model);
        assert_eq!(twice.gates, once.gates);
        assert!(twice.report.is_identity());
        assert_eq!(once.report.then(&twice.report), once.report);
    }

    #[test]
    fn whole_layer_of_heads_can_vanish() {
        let (model, plan, mut gates) = setup(false);
        let hc = plan.dim_id(DimKey::HeadCount(Stack::Encoder, 0)).unwrap();
        gates.gates[hc].as_mut().unwrap().log_alpha = Tensor::vector(vec![-1.0, -2.0]).unwrap();
        let out = compact_checked(&model, &plan, &gates, 6, 3).unwrap();
        assert!(out.model.config.encoder[0].head_dims.is_empty());
        assert!(out.plan.dim_id(DimKey::HeadCount(Stack::Encoder, 0)).is_none());
        assert!(out.report.residual < 1e-10);
        assert!(out.report.forced.is_empty());
    }

    #[test]
    fn empty_dimension_keeps_best_index() {
        let (model, plan, mut gates) = setup(false);
        let f = plan.dim_id(DimKey::FfnDf(Stack::Decoder, 0)).unwrap();
        let mut logits = vec![-3.0; 12];
        logits[7] = -0.5;
        gates.gates[f].as_mut().unwrap().log_alpha = Tensor::vector(logits).unwrap();
        let out = compact_checked(&model, &plan, &gates, 6, 4).unwrap();
        assert_eq!(out.model.config.decoder[0].d_f, 1);
        assert_eq!(out.report.forced, vec!["dec.0.ffn_df".to_string()]);
        let nf = out.plan.dim_id(DimKey::FfnDf(Stack::Decoder, 0)).unwrap();
        assert_eq!(out.gates.gates[nf].as_ref().unwrap().log_alpha.data(), &[0.0]);
        assert!(out.report.residual < 1e-10);
    }
}
