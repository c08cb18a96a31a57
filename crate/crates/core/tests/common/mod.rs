//! Harnesses shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prunekit::compact::{compact, equivalence_residual, probe_inputs};
use prunekit::data::Example;
use prunekit::gates::{expected_nonzero_on_tape, gate_on_tape, mask_l1_on_tape, mean_gate_on_tape, GateConfig};
use prunekit::model::{forward_on_tape, Gating, Model, ModelConfig, ModelSpec, ParamVars};
use prunekit::plan::{build_plan, GateSet, PlanOptions, PrunePlan};
use prunekit::tape::{Tape, Var};
use prunekit::tensor::Tensor;
use prunekit::train::tts_loss_on_tape;
use prunekit::Result;

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-4;
pub const AUDIT_POINTS: usize = 10;

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>)>;
type Build = Box<dyn Fn(&mut Tape<f64>, &[Var], &[Tensor<f64>]) -> Result<Var>>;

/// One differentiable operation under audit: `gen` draws the differentiated
/// inputs and any constants, `build` records the operation.
pub struct AuditCase {
    pub name: &'static str,
    gen: Gen,
    build: Build,
}

impl AuditCase {
    fn new(
        name: &'static str,
        gen: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) + 'static,
        build: impl Fn(&mut Tape<f64>, &[Var], &[Tensor<f64>]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            gen: Box::new(gen),
            build: Box::new(build),
        }
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn noise(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.gen_range(0.05..0.95)).collect()
}

/// Scalar objective: output weighted elementwise by fixed random weights.
fn objective(case: &AuditCase, xs: &[Tensor<f64>], consts: &[Tensor<f64>], w: Option<&Tensor<f64>>) -> (f64, Vec<Tensor<f64>>, Vec<usize>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars, consts).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let Some(w) = w else {
        return (0.0, Vec::new(), shape);
    };
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.grad(loss, &vars).unwrap();
    (tape.scalar(loss), grads, shape)
}

/// Largest relative error between analytic and central-difference gradients
/// over `AUDIT_POINTS` random points.
pub fn audit(case: &AuditCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..AUDIT_POINTS {
        let (xs, consts) = (case.gen)(&mut rng);
        let (_, _, shape) = objective(case, &xs, &consts, None);
        let w = uniform(&mut rng, &shape, -1.0, 1.0);
        let (_, grads, _) = objective(case, &xs, &consts, Some(&w));
        let coords = xs.iter().enumerate().flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)));
        for (i, j) in coords {
            let at = |delta: f64| {
                let mut moved = xs.clone();
                moved[i].data_mut()[j] += delta;
                objective(case, &moved, &consts, Some(&w)).0
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            let analytic = grads[i].data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn stretched() -> GateConfig {
    GateConfig {
        beta: 2.0 / 3.0,
        gamma: -0.1,
        eta: 1.1,
        ..GateConfig::default()
    }
}

/// Tiny model used by the model-level audit cases.
pub fn toy_spec() -> ModelSpec {
    ModelSpec {
        vocab_size: 6,
        d: 4,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        d_k: 4,
        d_f: 5,
        adaptor_hidden: 3,
        adaptor_layers: 1,
        postnet_hidden: 3,
        n_mel: 3,
        n_speakers: 2,
        ..ModelSpec::default()
    }
}

fn gated_model_case(name: &'static str, sampled: bool) -> AuditCase {
    let config = toy_spec().build().unwrap();
    let plan = build_plan(&config, PlanOptions { prune_model_d: true }).unwrap();
    let names: Vec<String> = Model::<f64>::init(config.clone(), 0).unwrap().params.keys().cloned().collect();
    let n_params = names.len();
    let enabled: Vec<usize> = plan.enabled_dims().map(|(i, _)| i).collect();
    let gen_plan = plan.clone();
    let gen_config = config.clone();
    let gen = move |rng: &mut ChaCha8Rng| {
        let mut model = Model::<f64>::init(gen_config.clone(), rng.gen()).unwrap();
        model.perturb(rng.gen(), 0.1);
        let mut xs: Vec<Tensor<f64>> = model.params.values().cloned().collect();
        let mut consts = Vec::new();
        for (_, d) in gen_plan.enabled_dims() {
            xs.push(uniform(rng, &[d.extent], -2.0, 3.0));
            consts.push(Tensor::vector(noise(rng, d.extent)).unwrap());
        }
        let len = 5;
        consts.push(Tensor::vector((0..len).map(|_| rng.gen_range(0..6) as f64).collect()).unwrap());
        consts.push(uniform(rng, &[len, 3], -1.0, 1.0));
        consts.push(uniform(rng, &[len], -1.0, 1.0));
        (xs, consts)
    };
    let build = move |tape: &mut Tape<f64>, vars: &[Var], consts: &[Tensor<f64>]| {
        let pv = ParamVars(names.iter().cloned().zip(vars[..n_params].iter().copied()).collect::<IndexMap<_, _>>());
        let mut z = vec![None; plan.dims.len()];
        for (k, &d) in enabled.iter().enumerate() {
            let la = vars[n_params + k];
            z[d] = Some(if sampled {
                gate_on_tape(tape, la, consts[k].data(), &GateConfig::default())?
            } else {
                mean_gate_on_tape(tape, la, &GateConfig::default())
            });
        }
        let m = enabled.len();
        let tokens: Vec<usize> = consts[m].data().iter().map(|&t| t as usize).collect();
        let ex = Example {
            tokens: tokens.clone(),
            speaker: 1,
            mel: consts[m + 1].clone(),
            aux: consts[m + 2].clone(),
        };
        let out = forward_on_tape(tape, &config, &pv, Some(Gating { plan: &plan, z: &z }), &tokens, 1)?;
        let tts = tts_loss_on_tape(tape, out, &ex, 0.1)?;
        let reg = mask_l1_on_tape(tape, &plan, &z)?;
        let reg = tape.scale(reg, 1.0 / plan.lambda as f64);
        tape.add(tts, reg)
    };
    AuditCase::new(name, gen, build)
}

/// Every differentiable operation, plus composite models built from them.
pub fn audit_cases() -> Vec<AuditCase> {
    let mat = |r: usize, c: usize| move |rng: &mut ChaCha8Rng| uniform(rng, &[r, c], -1.5, 1.5);
    let mut cases = vec![
        AuditCase::new("matmul", move |rng| (vec![mat(3, 4)(rng), mat(4, 2)(rng)], vec![]), |t, v, _| t.matmul(v[0], v[1])),
        AuditCase::new("matmul_bt", move |rng| (vec![mat(3, 4)(rng), mat(5, 4)(rng)], vec![]), |t, v, _| t.matmul_bt(v[0], v[1])),
        AuditCase::new("add", move |rng| (vec![mat(2, 3)(rng), mat(2, 3)(rng)], vec![]), |t, v, _| t.add(v[0], v[1])),
        AuditCase::new("sub", move |rng| (vec![mat(2, 3)(rng), mat(2, 3)(rng)], vec![]), |t, v, _| t.sub(v[0], v[1])),
        AuditCase::new("mul", move |rng| (vec![mat(2, 3)(rng), mat(2, 3)(rng)], vec![]), |t, v, _| t.mul(v[0], v[1])),
        AuditCase::new("scale", move |rng| (vec![mat(2, 3)(rng)], vec![]), |t, v, _| Ok(t.scale(v[0], -1.7))),
        AuditCase::new("add_row", move |rng| (vec![mat(3, 4)(rng), uniform(rng, &[4], -1.0, 1.0)], vec![]), |t, v, _| t.add_row(v[0], v[1])),
        AuditCase::new("mul_row", move |rng| (vec![mat(3, 4)(rng), uniform(rng, &[4], -1.0, 1.0)], vec![]), |t, v, _| t.mul_row(v[0], v[1])),
        AuditCase::new(
            "axis_mask",
            move |rng| (vec![mat(3, 4)(rng), uniform(rng, &[3], 0.0, 1.0), uniform(rng, &[4], 0.0, 1.0)], vec![]),
            |t, v, _| t.axis_mask(v[0], &[Some(v[1]), Some(v[2])]),
        ),
        AuditCase::new(
            "axis_mask_one_axis",
            move |rng| (vec![mat(3, 4)(rng), uniform(rng, &[4], 0.0, 1.0)], vec![]),
            |t, v, _| t.axis_mask(v[0], &[None, Some(v[1])]),
        ),
        AuditCase::new("relu", |rng| (vec![away_from(rng, &[3, 4], -2.0, 2.0, &[0.0], 0.01)], vec![]), |t, v, _| Ok(t.relu(v[0]))),
        AuditCase::new("tanh", move |rng| (vec![mat(3, 4)(rng)], vec![]), |t, v, _| Ok(t.tanh(v[0]))),
        AuditCase::new("sigmoid", move |rng| (vec![mat(3, 4)(rng)], vec![]), |t, v, _| Ok(t.sigmoid(v[0]))),
        AuditCase::new(
            "clamp",
            |rng| (vec![away_from(rng, &[3, 4], -1.0, 1.0, &[-0.5, 0.5], 0.01)], vec![]),
            |t, v, _| Ok(t.clamp(v[0], -0.5, 0.5)),
        ),
        AuditCase::new("softmax_rows", move |rng| (vec![mat(3, 5)(rng)], vec![]), |t, v, _| t.softmax_rows(v[0])),
        AuditCase::new(
            "layer_norm",
            move |rng| (vec![mat(3, 5)(rng), uniform(rng, &[5], 0.5, 1.5), uniform(rng, &[5], -0.5, 0.5)], vec![]),
            |t, v, _| t.layer_norm(v[0], None, v[1], v[2], 1e-5),
        ),
        AuditCase::new(
            "layer_norm_weighted",
            move |rng| {
                let xs = vec![
                    mat(3, 5)(rng),
                    uniform(rng, &[5], 0.2, 1.0),
                    uniform(rng, &[5], 0.5, 1.5),
                    uniform(rng, &[5], -0.5, 0.5),
                ];
                (xs, vec![])
            },
            |t, v, _| t.layer_norm(v[0], Some(v[1]), v[2], v[3], 1e-5),
        ),
        AuditCase::new("sum", move |rng| (vec![mat(3, 4)(rng)], vec![]), |t, v, _| Ok(t.sum(v[0]))),
        AuditCase::new(
            "mse",
            move |rng| (vec![mat(3, 4)(rng)], vec![mat(3, 4)(rng)]),
            |t, v, c| t.mse(v[0], &c[0]),
        ),
        AuditCase::new("gather_rows", move |rng| (vec![mat(5, 3)(rng)], vec![]), |t, v, _| t.gather_rows(v[0], &[4, 0, 4, 2])),
        AuditCase::new("unfold", move |rng| (vec![mat(6, 3)(rng)], vec![]), |t, v, _| t.unfold(v[0], 3)),
        AuditCase::new("reshape", move |rng| (vec![mat(2, 6)(rng)], vec![]), |t, v, _| t.reshape(v[0], &[3, 4])),
        AuditCase::new("select", |rng| (vec![uniform(rng, &[5], -1.0, 1.0)], vec![]), |t, v, _| t.select(v[0], 3)),
        AuditCase::new(
            "scale_by_elem",
            move |rng| (vec![mat(2, 3)(rng), uniform(rng, &[4], -1.0, 1.0)], vec![]),
            |t, v, _| t.scale_by_elem(v[0], v[1], 2),
        ),
        AuditCase::new(
            "gate_sample",
            |rng| (vec![uniform(rng, &[6], -3.0, 3.0)], vec![Tensor::vector(noise(rng, 6)).unwrap()]),
            |t, v, c| gate_on_tape(t, v[0], c[0].data(), &GateConfig::default()),
        ),
        AuditCase::new(
            "gate_sample_stretched",
            |rng| {
                // keep the stretched value away from the clamp at 0 and 1
                let cfg = stretched();
                let k = 6;
                let u = noise(rng, k);
                let la: Vec<f64> = u
                    .iter()
                    .map(|&ui| loop {
                        let a: f64 = rng.gen_range(-3.0..3.0);
                        let s = 1.0 / (1.0 + (-((ui.ln() - (1.0 - ui).ln() + a) / cfg.beta)).exp());
                        let z = cfg.gamma + s * (cfg.eta - cfg.gamma);
                        if z.abs() > 0.01 && (z - 1.0).abs() > 0.01 {
                            break a;
                        }
                    })
                    .collect();
                (vec![Tensor::vector(la).unwrap()], vec![Tensor::vector(u).unwrap()])
            },
            |t, v, c| gate_on_tape(t, v[0], c[0].data(), &stretched()),
        ),
        AuditCase::new(
            "mean_gate",
            |rng| (vec![uniform(rng, &[6], -3.0, 3.0)], vec![]),
            |t, v, _| Ok(mean_gate_on_tape(t, v[0], &GateConfig::default())),
        ),
        AuditCase::new(
            "expected_nonzero",
            |rng| (vec![uniform(rng, &[6], -3.0, 3.0)], vec![]),
            |t, v, _| expected_nonzero_on_tape(t, v[0], &stretched()),
        ),
        mask_l1_case(),
        AuditCase::new(
            "two_layer_net",
            move |rng| {
                let xs = vec![mat(4, 6)(rng), uniform(rng, &[6], -0.5, 0.5), mat(6, 2)(rng), uniform(rng, &[2], -0.5, 0.5)];
                (xs, vec![mat(5, 4)(rng), mat(5, 2)(rng)])
            },
            |t, v, c| {
                let x = t.constant(c[0].clone());
                let h = t.matmul(x, v[0])?;
                let h = t.add_row(h, v[1])?;
                let h = t.relu(h);
                let y = t.matmul(h, v[2])?;
                let y = t.add_row(y, v[3])?;
                t.mse(y, &c[1])
            },
        ),
    ];
    cases.push(gated_model_case("model_sampled_gates", true));
    cases.push(gated_model_case("model_mean_gates", false));
    cases
}

/// The regularizer through sampled gates, with `u` held fixed.
fn mask_l1_case() -> AuditCase {
    let config = toy_spec().build().unwrap();
    let plan = build_plan(&config, PlanOptions { prune_model_d: true }).unwrap();
    let enabled: Vec<usize> = plan.enabled_dims().map(|(i, _)| i).collect();
    let gen_plan = plan.clone();
    AuditCase::new(
        "mask_l1",
        move |rng| {
            let mut xs = Vec::new();
            let mut consts = Vec::new();
            for (_, d) in gen_plan.enabled_dims() {
                xs.push(uniform(rng, &[d.extent], -3.0, 3.0));
                consts.push(Tensor::vector(noise(rng, d.extent)).unwrap());
            }
            (xs, consts)
        },
        move |t, v, c| {
            let mut z = vec![None; plan.dims.len()];
            for (k, &d) in enabled.iter().enumerate() {
                z[d] = Some(gate_on_tape(t, v[k], c[k].data(), &GateConfig::default())?);
            }
            let l = mask_l1_on_tape(t, &plan, &z)?;
            Ok(t.scale(l, 1.0 / plan.lambda as f64))
        },
    )
}

/// A random small architecture for the equivalence sweep.
pub fn random_config(rng: &mut ChaCha8Rng) -> (ModelConfig, PlanOptions) {
    let heads = rng.gen_range(1..=3);
    let spec = ModelSpec {
        vocab_size: rng.gen_range(3..8),
        d: rng.gen_range(2..7),
        n_enc_layers: rng.gen_range(1..=2),
        n_dec_layers: rng.gen_range(1..=2),
        n_heads: heads,
        d_k: heads * rng.gen_range(1..4),
        d_f: rng.gen_range(1..7),
        adaptor_hidden: rng.gen_range(1..5),
        adaptor_layers: rng.gen_range(1..=2),
        postnet_hidden: rng.gen_range(1..5),
        n_mel: rng.gen_range(1..5),
        n_speakers: rng.gen_range(1..4),
        ..ModelSpec::default()
    };
    let options = PlanOptions {
        prune_model_d: rng.gen_bool(0.5),
    };
    (spec.build().unwrap(), options)
}

/// Random logits whose signs drop each index with probability `drop`.
pub fn random_gates(plan: &PrunePlan, rng: &mut ChaCha8Rng, drop: f64) -> GateSet<f32> {
    let mut gates = GateSet::new(plan, &GateConfig::default()).unwrap();
    for g in gates.gates.iter_mut().flatten() {
        for v in g.log_alpha.data_mut() {
            let mag: f32 = rng.gen_range(0.1..4.0);
            *v = if rng.gen_bool(drop) { -mag } else { mag };
        }
    }
    gates
}

/// Worst |masked − compacted| output difference in 32-bit over
/// `models × assignments × probes` random cases.
pub fn equivalence_sweep(models: usize, assignments: usize, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..models {
        let (config, options) = random_config(&mut rng);
        let plan = build_plan(&config, options).unwrap();
        let mut model = Model::<f32>::init(config.clone(), rng.gen()).unwrap();
        model.perturb(rng.gen(), 0.3);
        for _ in 0..assignments {
            let drop = rng.gen_range(0.0..0.9);
            let gates = random_gates(&plan, &mut rng, drop);
            let masks = gates.binarize(&plan);
            let small = compact(&model, &plan, &gates, &masks).unwrap();
            let inputs = probe_inputs(&config, probes, rng.gen());
            let r = equivalence_residual(&model, &plan, &masks, &small.model, &inputs).unwrap();
            worst = worst.max(r);
        }
    }
    worst
}
