//! Runtime invariant suites: finite-difference gradient checks, mask sampler
//! statistics, masked-loss contracts, and the single-modal export oracle.
//!
//! Each suite returns one result per check; the CLI prints a pass/fail line
//! apiece and fails the process if anything failed.

use crate::data::generate_scene_with;
use crate::gradcheck::{central_diff, max_rel_err};
use crate::loss::{
    build_targets, masked_cross_entropy, masked_l1, masked_mse, masked_positions,
    pretrain_losses,
};
use crate::mask::{allocate_counts, build_mask_plan, sample_proportions, Alpha, DirichletParams, MaskPlan};
use crate::model::{
    export_single_modal_vit, forward_pretrain, single_modal_forward, encode_visible,
    DecoderConfig, EncoderConfig, Model, ModelConfig,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenize::{Modality, Sample};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

pub const SUITES: [&str; 4] = ["grads", "mask", "losses", "export"];

/// Run one suite by name, or `all`.
pub fn run_suite(suite: &str) -> Option<Vec<CheckResult>> {
    match suite {
        "grads" => Some(suite_grads()),
        "mask" => Some(suite_mask()),
        "losses" => Some(suite_losses()),
        "export" => Some(suite_export()),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s).unwrap());
            }
            Some(out)
        }
        _ => None,
    }
}

// ---- grads ------------------------------------------------------------------

fn randoms(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::from_seed(seed);
    (0..n).map(|_| rng.normal()).collect()
}

/// Check analytic gradients of `build` against central differences for every
/// leaf; returns the worst relative error.
fn op_fd_error(
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
    leaves: &[(Vec<usize>, Vec<f64>)],
) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|(shape, data)| tape.leaf(Tensor::from_f64(shape, data).unwrap(), true))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("scalar loss");

    let mut worst = 0.0f64;
    for (li, (_, data)) in leaves.iter().enumerate() {
        let analytic = tape.grad(vars[li]).expect("leaf grad").to_f64_vec();
        let numeric = central_diff(
            |perturbed| {
                let mut t2 = Tape::<f64>::new();
                let vars2: Vec<Var> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, (s, d))| {
                        let vals = if j == li { perturbed } else { d.as_slice() };
                        t2.leaf(Tensor::from_f64(s, vals).unwrap(), false)
                    })
                    .collect();
                let l = build(&mut t2, &vars2);
                t2.value(l).item()
            },
            data,
            1e-4,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

type OpCase = (
    &'static str,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>,
    Vec<(Vec<usize>, Vec<f64>)>,
);

fn op_cases() -> Vec<OpCase> {
    let w5 = randoms(5, 100);
    let w8 = randoms(8, 101);
    vec![
        (
            "matmul",
            Box::new(|t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                t.sum(c)
            }),
            vec![(vec![3, 3], randoms(9, 1)), (vec![3, 3], randoms(9, 2))],
        ),
        (
            "matmul_batched",
            Box::new(|t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                let g = t.gelu(c);
                t.sum(g)
            }),
            vec![(vec![2, 2, 3], randoms(12, 3)), (vec![3, 2], randoms(6, 4))],
        ),
        (
            "softmax",
            Box::new(move |t, v| {
                let s = t.softmax(v[0]).unwrap();
                let w = t.constant(Tensor::from_f64(&[5], &w5).unwrap());
                let p = t.mul(s, w).unwrap();
                t.sum(p)
            }),
            vec![(vec![5], randoms(5, 5))],
        ),
        (
            "log_softmax_pick",
            Box::new(|t, v| {
                let ls = t.log_softmax(v[0]).unwrap();
                let picked = t.pick(ls, &[1, 0]).unwrap();
                let m = t.mean(picked);
                t.scale(m, -1.0)
            }),
            vec![(vec![2, 3], randoms(6, 6))],
        ),
        (
            "layer_norm",
            Box::new(move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
                let w = t.constant(Tensor::from_f64(&[8], &w8).unwrap());
                let p = t.mul(y, w).unwrap();
                t.sum(p)
            }),
            vec![
                (vec![2, 8], randoms(16, 7)),
                (vec![8], randoms(8, 8)),
                (vec![8], randoms(8, 9)),
            ],
        ),
        (
            "gelu",
            Box::new(|t, v| {
                let g = t.gelu(v[0]);
                t.sum(g)
            }),
            vec![(vec![4], vec![-2.0, -0.5, 0.5, 2.0])],
        ),
        (
            "elementwise_chain",
            Box::new(|t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.sub(a, v[2]).unwrap();
                let c = t.mul(b, b).unwrap();
                let d = t.scale(c, 0.5);
                let e = t.add_scalar(d, 1.0);
                let f = t.abs(e);
                t.mean(f)
            }),
            vec![
                (vec![2, 3], randoms(6, 10)),
                (vec![3], randoms(3, 11)),
                (vec![2, 3], randoms(6, 12)),
            ],
        ),
        (
            "transpose_reshape",
            Box::new(|t, v| {
                let tr = t.transpose(v[0], 0, 2).unwrap();
                let rs = t.reshape(tr, &[4, 3]).unwrap();
                let sq = t.mul(rs, rs).unwrap();
                t.sum(sq)
            }),
            vec![(vec![3, 2, 2], randoms(12, 13))],
        ),
        (
            "concat",
            Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1]], 1).unwrap();
                let g = t.gelu(c);
                t.mean(g)
            }),
            vec![(vec![2, 2], randoms(4, 14)), (vec![2, 3], randoms(6, 15))],
        ),
        (
            "index_select_embedding",
            Box::new(|t, v| {
                let rows = t.index_select(v[0], 0, &[2, 0, 2]).unwrap();
                let sq = t.mul(rows, rows).unwrap();
                t.sum(sq)
            }),
            vec![(vec![3, 2], randoms(6, 16))],
        ),
        (
            "scatter_rows",
            Box::new(|t, v| {
                let s = t.scatter_rows(v[0], &[1, 3], v[1]).unwrap();
                let sq = t.mul(s, s).unwrap();
                t.sum(sq)
            }),
            vec![(vec![4, 2], randoms(8, 17)), (vec![2, 2], randoms(4, 18))],
        ),
    ]
}

fn fd_model() -> (Model<f64>, Sample, MaskPlan) {
    // the gradient-check geometry: 16px inputs give one token per modality
    let mut config = ModelConfig::desk(16);
    config.encoder = EncoderConfig {
        dim: 32,
        depth: 2,
        heads: 4,
        mlp_ratio: 2,
    };
    config.decoder = DecoderConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let model = Model::<f64>::init(config, 42).unwrap();
    let sample = generate_scene_with(7, 16, 2, 0.0);
    // rgb and depth visible, semseg masked: the loss reads the semseg decoder
    let plan = MaskPlan {
        counts: vec![1, 1, 0],
        visible: vec![vec![0], vec![0], vec![]],
        seed: 0,
    };
    (model, sample, plan)
}

fn rich_model() -> (Model<f64>, Sample, MaskPlan) {
    // 32px gives a 2x2 grid so every task has visible and masked tokens
    let mut config = ModelConfig::desk(32);
    config.encoder = EncoderConfig {
        dim: 32,
        depth: 2,
        heads: 4,
        mlp_ratio: 2,
    };
    config.decoder = DecoderConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let model = Model::<f64>::init(config, 43).unwrap();
    let sample = generate_scene_with(8, 32, 3, 0.0);
    let plan = MaskPlan {
        counts: vec![2, 2, 2],
        visible: vec![vec![0, 3], vec![1, 2], vec![0, 1]],
        seed: 0,
    };
    (model, sample, plan)
}

fn model_total_loss(model: &Model<f64>, sample: &Sample, plan: &MaskPlan) -> f64 {
    let mut tape = Tape::<f64>::new();
    let bound = model.bind(&mut tape, false);
    let batch = model.tokenize(&mut tape, sample, &bound).unwrap();
    let output = forward_pretrain(&mut tape, model, &bound, &batch, plan).unwrap();
    let targets = build_targets(sample, model).unwrap();
    let (total, _) = pretrain_losses(&mut tape, model, &output, &targets, plan, 0).unwrap();
    tape.value(total).item()
}

/// Worst sampled-coordinate relative error over every parameter tensor.
/// Small tensors are checked at every coordinate; larger ones at
/// `samples_per_tensor` deterministically drawn coordinates.
fn model_fd_error(
    model: &Model<f64>,
    sample: &Sample,
    plan: &MaskPlan,
    samples_per_tensor: usize,
) -> (f64, String) {
    let mut tape = Tape::<f64>::new();
    let bound = model.bind(&mut tape, true);
    let batch = model.tokenize(&mut tape, sample, &bound).unwrap();
    let output = forward_pretrain(&mut tape, model, &bound, &batch, plan).unwrap();
    let targets = build_targets(sample, model).unwrap();
    let (total, _) = pretrain_losses(&mut tape, model, &output, &targets, plan, 0).unwrap();
    tape.backward(total).unwrap();

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut coord_rng = Rng::from_seed(4242);
    for (name, tensor) in &model.params {
        let analytic = tape
            .grad(bound.get(name))
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let coords: Vec<usize> = if tensor.numel() <= samples_per_tensor {
            (0..tensor.numel()).collect()
        } else {
            (0..samples_per_tensor)
                .map(|_| coord_rng.below(tensor.numel()))
                .collect()
        };
        for &c in &coords {
            let mut probe = model.clone();
            let base = tensor.data()[c].to_f64().unwrap();
            probe.params.get_mut(name).unwrap().data_mut()[c] = base + h;
            let plus = model_total_loss(&probe, sample, plan);
            probe.params.get_mut(name).unwrap().data_mut()[c] = base - h;
            let minus = model_total_loss(&probe, sample, plan);
            let numeric = (plus - minus) / (2.0 * h);
            let err = max_rel_err(&[analytic[c]], &[numeric]);
            if err > worst {
                worst = err;
                worst_name = format!("{name}[{c}]");
            }
        }
    }
    (worst, worst_name)
}

pub fn suite_grads() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (name, build, leaves) in op_cases() {
        let err = op_fd_error(build.as_ref(), &leaves);
        out.push(CheckResult::new(
            &format!("grads/op/{name}"),
            err < 1e-5,
            format!("max rel err {err:.2e} (tol 1e-5)"),
        ));
    }
    let (model, sample, plan) = fd_model();
    let (err, worst) = model_fd_error(&model, &sample, &plan, 6);
    out.push(CheckResult::new(
        "grads/model/16px_depth2_dim32",
        err < 1e-4,
        format!("max rel err {err:.2e} at {worst} (tol 1e-4)"),
    ));
    let (model, sample, plan) = rich_model();
    let (err, worst) = model_fd_error(&model, &sample, &plan, 4);
    out.push(CheckResult::new(
        "grads/model/32px_all_tasks",
        err < 1e-4,
        format!("max rel err {err:.2e} at {worst} (tol 1e-4)"),
    ));
    out
}

// ---- mask -------------------------------------------------------------------

pub fn suite_mask() -> Vec<CheckResult> {
    let mut out = Vec::new();

    let params = DirichletParams::new(Alpha::Concentration(1.0), 3, 98).unwrap();
    let mut rng = Rng::from_seed(1000);
    let n = 100_000;
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for _ in 0..n {
        let p = sample_proportions(&params, &mut rng);
        for (i, &v) in p.iter().enumerate() {
            sums[i] += v;
            sq[i] += v * v;
        }
    }
    let mut mean_err = 0.0f64;
    let mut var_err = 0.0f64;
    for i in 0..3 {
        let mean = sums[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        mean_err = mean_err.max((mean - 1.0 / 3.0).abs());
        var_err = var_err.max((var - 1.0 / 18.0).abs());
    }
    out.push(CheckResult::new(
        "mask/dirichlet_mean",
        mean_err < 0.005,
        format!("max |mean - 1/3| = {mean_err:.4} (tol 0.005)"),
    ));
    out.push(CheckResult::new(
        "mask/dirichlet_variance",
        var_err < 0.003,
        format!("max |var - 1/18| = {var_err:.4} (tol 0.003)"),
    ));

    let equal = DirichletParams::new(Alpha::Equal, 3, 98).unwrap();
    let plan = build_mask_plan(&equal, &[196; 3], 1).unwrap();
    out.push(CheckResult::new(
        "mask/equal_partition",
        plan.counts == vec![33, 33, 32],
        format!("counts {:?} (want [33, 33, 32])", plan.counts),
    ));

    let cases = [
        (vec![1.0 / 3.0; 3], vec![33, 33, 32]),
        (vec![1.0, 0.0, 0.0], vec![98, 0, 0]),
        (vec![0.5, 0.25, 0.25], vec![49, 25, 24]),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (p, want) in &cases {
        let got = allocate_counts(p, 98, &[196; 3]).unwrap();
        if &got != want {
            ok = false;
            detail = format!("{p:?} -> {got:?}, want {want:?}");
        }
    }
    out.push(CheckResult::new(
        "mask/apportionment",
        ok,
        if ok { "3 forced cases".into() } else { detail },
    ));

    // uniformity of the without-replacement draw
    let mut rng = Rng::from_seed(1001);
    let trials = 100_000;
    let mut hits = vec![0usize; 196];
    for _ in 0..trials {
        for i in rng.sample_without_replacement(49, 196) {
            hits[i] += 1;
        }
    }
    let worst = hits
        .iter()
        .map(|&h| (h as f64 / trials as f64 - 0.25).abs())
        .fold(0.0, f64::max);
    out.push(CheckResult::new(
        "mask/uniform_without_replacement",
        worst < 0.01,
        format!("max |freq - 0.25| = {worst:.4} (tol 0.01)"),
    ));

    // smaller alpha concentrates mass on fewer modalities
    let concentrated = |alpha: f64, base: u64| {
        let params = DirichletParams::new(Alpha::Concentration(alpha), 3, 98).unwrap();
        let mut count = 0;
        for i in 0..10_000u64 {
            let plan = build_mask_plan(&params, &[196; 3], base + i).unwrap();
            if plan.max_share() > 0.9 {
                count += 1;
            }
        }
        count
    };
    let low = concentrated(0.2, 50_000);
    let one = concentrated(1.0, 70_000);
    out.push(CheckResult::new(
        "mask/alpha_concentration",
        low > one,
        format!("share>0.9 plans: alpha 0.2 -> {low}, alpha 1.0 -> {one}"),
    ));
    out
}

// ---- losses -----------------------------------------------------------------

pub fn suite_losses() -> Vec<CheckResult> {
    let mut out = Vec::new();

    let mut tape = Tape::<f64>::new();
    let pred = tape.leaf(Tensor::zeros(&[4, 4]), true);
    let target = Tensor::filled(&[4, 4], 1.0);
    let mse = masked_mse(&mut tape, pred, &target, &[1, 3]).unwrap().unwrap();
    let v = tape.value(mse).item();
    out.push(CheckResult::new(
        "losses/mse_analytic",
        v == 1.0,
        format!("pred 0 vs target 1 -> {v} (want 1)"),
    ));

    let mut tape = Tape::<f64>::new();
    let pred = tape.leaf(Tensor::zeros(&[3, 2]), true);
    let target = Tensor::filled(&[3, 2], -2.0);
    let l1 = masked_l1(&mut tape, pred, &target, None, &[0, 2]).unwrap().unwrap();
    let v = tape.value(l1).item();
    out.push(CheckResult::new(
        "losses/l1_analytic",
        v == 2.0,
        format!("pred 0 vs target -2 -> {v} (want 2)"),
    ));

    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(&[2, 4 * 133]), true);
    let ce = masked_cross_entropy(&mut tape, logits, &vec![5; 8], &[0, 1], 4, 133)
        .unwrap()
        .unwrap();
    let v = tape.value(ce).item();
    let expect = 133f64.ln();
    out.push(CheckResult::new(
        "losses/ce_uniform_is_ln_133",
        (v - expect).abs() < 1e-9,
        format!("{v:.6} vs ln(133) = {expect:.6}"),
    ));

    // locality: gradient exactly zero at visible rows
    let mut tape = Tape::<f64>::new();
    let pred = tape.leaf(Tensor::from_f64(&[4, 3], &randoms(12, 2000)).unwrap(), true);
    let target = Tensor::zeros(&[4, 3]);
    let loss = masked_mse(&mut tape, pred, &target, &[0, 2]).unwrap().unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(pred).unwrap();
    let visible_zero = grad.data()[3..6].iter().all(|&g| g == 0.0)
        && grad.data()[9..12].iter().all(|&g| g == 0.0);
    let masked_nonzero = grad.data()[..3].iter().any(|&g| g != 0.0);
    out.push(CheckResult::new(
        "losses/gradient_locality",
        visible_zero && masked_nonzero,
        format!("visible rows zero: {visible_zero}, masked rows live: {masked_nonzero}"),
    ));

    // perturbing targets at visible positions leaves the loss bit-identical
    let eval = |target: &Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::from_f64(&[4, 3], &randoms(12, 2001)).unwrap(), true);
        let loss = masked_mse(&mut tape, pred, target, &[1]).unwrap().unwrap();
        tape.value(loss).item()
    };
    let base_target = Tensor::from_f64(&[4, 3], &randoms(12, 2002)).unwrap();
    let mut edited = base_target.clone();
    edited.data_mut()[0] = 99.0; // row 0 is visible
    let bit_identical = eval(&base_target).to_bits() == eval(&edited).to_bits();
    out.push(CheckResult::new(
        "losses/visible_target_invariance",
        bit_identical,
        format!("bit-identical: {bit_identical}"),
    ));

    // extreme plans evaluate without division by zero
    let (model, sample, _) = rich_model();
    let grid = model.config.grid().unwrap();
    let cap = grid * grid;
    let all_masked = MaskPlan {
        counts: vec![0; 3],
        visible: vec![vec![], vec![], vec![]],
        seed: 0,
    };
    let nearly_visible = MaskPlan {
        counts: vec![cap, cap, cap - 1],
        visible: vec![
            (0..cap).collect(),
            (0..cap).collect(),
            (0..cap - 1).collect(),
        ],
        seed: 0,
    };
    let mut ok = true;
    let mut detail = String::new();
    for (name, plan) in [("all_masked", &all_masked), ("one_token_masked", &nearly_visible)] {
        let v = model_total_loss(&model, &sample, plan);
        if !v.is_finite() {
            ok = false;
            detail = format!("{name} produced {v}");
        }
    }
    out.push(CheckResult::new(
        "losses/extreme_plans_finite",
        ok,
        if ok { "all-masked and one-token-masked both finite".into() } else { detail },
    ));
    out
}

// ---- export -----------------------------------------------------------------

pub fn suite_export() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut config = ModelConfig::desk(32);
    config.encoder = EncoderConfig {
        dim: 32,
        depth: 2,
        heads: 4,
        mlp_ratio: 4,
    };
    let model = Model::<f32>::init(config, 77).unwrap();
    let sample = generate_scene_with(9, 32, 3, 0.0);
    let grid = model.config.grid().unwrap();

    let mut worst = 0.0f32;
    let mut clean = true;
    for modality in [Modality::Rgb, Modality::Depth, Modality::Semseg] {
        let exported = export_single_modal_vit(&model, modality).unwrap();
        if exported.keys().any(|n| n.starts_with("decoder.")) {
            clean = false;
        }
        let cfg = model.config.modality_config(modality).unwrap().clone();
        let single = single_modal_forward(&exported, &model.config.encoder, &cfg, &sample).unwrap();

        let mut plan = MaskPlan {
            counts: vec![0; 3],
            visible: vec![vec![], vec![], vec![]],
            seed: 0,
        };
        plan.counts[modality.index()] = grid * grid;
        plan.visible[modality.index()] = (0..grid * grid).collect();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, false);
        let batch = model.tokenize(&mut tape, &sample, &bound).unwrap();
        let restricted = encode_visible(&mut tape, &model, &bound, &batch, &plan).unwrap();
        for (&a, &b) in single.data().iter().zip(tape.value(restricted.seq).data()) {
            worst = worst.max((a - b).abs());
        }
    }
    out.push(CheckResult::new(
        "export/no_decoder_tensors",
        clean,
        "exports carry only the trunk".into(),
    ));
    out.push(CheckResult::new(
        "export/vit_equivalence",
        worst < 1e-6,
        format!("max |exported - restricted| = {worst:.2e} (tol 1e-6)"),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_and_losses_and_export_suites_pass() {
        for suite in ["mask", "losses", "export"] {
            for result in run_suite(suite).unwrap() {
                assert!(result.passed, "{}: {}", result.name, result.detail);
            }
        }
    }

    #[test]
    fn unknown_suite_is_none() {
        assert!(run_suite("zebra").is_none());
    }

    #[test]
    fn grads_suite_passes() {
        for result in suite_grads() {
            assert!(result.passed, "{}: {}", result.name, result.detail);
        }
    }
}
