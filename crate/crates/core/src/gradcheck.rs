//! Finite-difference verification of every differentiable operation and of a
//! full gated block stack. Shared by the test suite and the `grad-check` CLI
//! subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::MemoryState;
use crate::blocks::{stack_forward_on_tape, StackConfig, StackParams};
use crate::error::Result;
use crate::tensor::{finite_diff_grad, rel_err, ActKind, Tape, Tensor, Var};

const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    // keep values away from 0 so ReLU kinks do not fall inside the FD step
    let data = (0..numel)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.2);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
}

/// FD-checks the gradient of sum(w ⊙ f(inputs)) for every input slot.
fn check_op<F>(name: &str, inputs: &[Tensor], build: F, tol: f64, rng: &mut ChaCha8Rng) -> CheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let out_numel = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).numel()
    };
    let weights: Vec<f64> = (0..out_numel).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(
        Tensor::from_vec(tape.shape(out).to_vec(), weights.clone()).expect("weights match"),
    );
    let prod = tape.mul(out, w).expect("same shape");
    let loss = tape.sum(prod);
    tape.backward(loss).expect("scalar loss");

    let mut worst: f64 = 0.0;
    for (slot, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[slot]).expect("input gradient").to_vec();
        let eval = |probe: &Tensor| -> f64 {
            let mut t2 = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == slot {
                        t2.constant(probe.clone())
                    } else {
                        t2.constant(t.clone())
                    }
                })
                .collect();
            let o = build(&mut t2, &vs);
            t2.value(o).data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let numeric = finite_diff_grad(eval, x, FD_STEP);
        for (a, n) in analytic.iter().zip(&numeric.data) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    CheckReport { name: name.to_string(), max_rel_err: worst, tol }
}

/// FD checks for every primitive differentiable operation, one report each.
pub fn check_primitives(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng);
    reports.push(check_op(
        "add",
        &[a.clone(), b.clone()],
        |t, v| t.add(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "sub",
        &[a.clone(), b.clone()],
        |t, v| t.sub(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "mul",
        &[a.clone(), b.clone()],
        |t, v| t.mul(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "scale",
        &[a.clone()],
        |t, v| t.scale(v[0], -1.7),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    let s = rand_tensor(&[1], &mut rng);
    reports.push(check_op(
        "add_scalar",
        &[a.clone(), s],
        |t, v| t.add_scalar(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    let row = rand_tensor(&[4], &mut rng);
    reports.push(check_op(
        "add_row",
        &[a.clone(), row],
        |t, v| t.add_row(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    let m1 = rand_tensor(&[3, 4], &mut rng);
    let m2 = rand_tensor(&[4, 2], &mut rng);
    reports.push(check_op(
        "matmul",
        &[m1, m2],
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    let q = rand_tensor(&[2, 3, 4], &mut rng);
    let k = rand_tensor(&[2, 5, 4], &mut rng);
    reports.push(check_op(
        "batched_contract_qk",
        &[q.clone(), k.clone()],
        |t, v| t.batched_contract_qk(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    let w3 = rand_tensor(&[2, 3, 5], &mut rng);
    reports.push(check_op(
        "batched_contract_av",
        &[w3, k.clone()],
        |t, v| t.batched_contract_av(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    // relative score terms: mem 2, T 3 -> 5 distances
    let r = rand_tensor(&[2, 5, 4], &mut rng);
    reports.push(check_op(
        "rel_scores_qr",
        &[q.clone(), r.clone()],
        |t, v| t.rel_scores_qr(v[0], v[1], 2).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    let u = rand_tensor(&[2, 4], &mut rng);
    reports.push(check_op(
        "bias_scores_uk",
        &[u.clone(), k.clone()],
        |t, v| t.bias_scores_uk(v[0], v[1], 3).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "bias_scores_vr",
        &[u, r],
        |t, v| t.bias_scores_vr(v[0], v[1], 2, 3).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    reports.push(check_op(
        "split_heads",
        &[rand_tensor(&[3, 6], &mut rng)],
        |t, v| t.split_heads(v[0], 2).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "merge_heads",
        &[rand_tensor(&[2, 3, 4], &mut rng)],
        |t, v| t.merge_heads(v[0]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "concat_rows",
        &[rand_tensor(&[2, 3], &mut rng), rand_tensor(&[4, 3], &mut rng)],
        |t, v| t.concat_rows(v[0], v[1]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    let x = rand_tensor(&[4, 6], &mut rng);
    let gain = rand_tensor(&[6], &mut rng);
    let bias = rand_tensor(&[6], &mut rng);
    reports.push(check_op(
        "layer_norm",
        &[x, gain, bias],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    let logits = rand_tensor(&[2, 3, 5], &mut rng);
    let mask: Vec<Vec<bool>> = (0..3).map(|t| (0..5).map(|m| m <= t + 2).collect()).collect();
    let mask_clone = mask.clone();
    reports.push(check_op(
        "masked_softmax",
        &[logits],
        move |t, v| t.masked_softmax(v[0], &mask_clone).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    for (label, kind) in [
        ("sigmoid", ActKind::Sigmoid),
        ("tanh", ActKind::Tanh),
        ("relu", ActKind::Relu),
    ] {
        reports.push(check_op(
            label,
            &[rand_tensor(&[3, 5], &mut rng)],
            move |t, v| t.activation(kind, v[0]),
            PRIMITIVE_TOL,
            &mut rng,
        ));
    }
    reports.push(check_op(
        "exp",
        &[rand_tensor(&[7], &mut rng)],
        |t, v| t.exp(v[0]),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "log_softmax_rows",
        &[rand_tensor(&[3, 6], &mut rng)],
        |t, v| t.log_softmax_rows(v[0]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "row_pick",
        &[rand_tensor(&[4, 5], &mut rng)],
        |t, v| t.row_pick(v[0], &[1, 0, 4, 2]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "gather_rows",
        &[rand_tensor(&[5, 3], &mut rng)],
        |t, v| t.gather_rows(v[0], &[4, 0, 0, 2]).unwrap(),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "sum",
        &[rand_tensor(&[3, 3], &mut rng)],
        |t, v| t.sum(v[0]),
        PRIMITIVE_TOL,
        &mut rng,
    ));
    reports.push(check_op(
        "mean",
        &[rand_tensor(&[3, 3], &mut rng)],
        |t, v| t.mean(v[0]),
        PRIMITIVE_TOL,
        &mut rng,
    ));

    reports
}

fn stack_loss(
    params: &StackParams,
    memory: &MemoryState,
    e0: &Tensor,
    weights: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let e0v = tape.input(e0.clone());
    let vars = params.inject(&mut tape);
    let (out, _) = stack_forward_on_tape(&mut tape, &params.config, &vars, memory, e0v)?;
    let w = tape.constant(Tensor::from_vec(tape.shape(out).to_vec(), weights.to_vec())?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let mut param_grads = Vec::new();
    for v in vars.param_vars() {
        match tape.grad(v) {
            Some(g) => param_grads.extend_from_slice(g),
            None => param_grads.extend(std::iter::repeat(0.0).take(tape.value(v).numel())),
        }
    }
    let e0_grad = tape.grad(e0v).expect("input gradient").to_vec();
    Ok((tape.value(loss).data[0], e0_grad, param_grads))
}

/// Full FD check of a 2-layer gated stack (GRU gating, D=8, H=2, T=3,
/// mem 2): gradient w.r.t. the input embedding and every parameter.
pub fn check_gtrxl_stack(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = StackConfig::gtrxl(2, 8, 2, 2);
    let params = StackParams::init(config, &mut rng)?;

    // fill the memory with one warmup segment so it is non-trivial
    let warm = rand_tensor(&[2, 8], &mut rng);
    let memory = params.fresh_memory();
    let (_, memory) = crate::blocks::stack_forward(&params, &memory, &warm)?;

    let e0 = rand_tensor(&[3, 8], &mut rng);
    let weights: Vec<f64> = (0..e0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (_, e0_grad, param_grads) = stack_loss(&params, &memory, &e0, &weights)?;

    let mut worst: f64 = 0.0;

    // input gradient
    let numeric = finite_diff_grad(
        |probe| forward_loss(&params, &memory, probe, &weights),
        &e0,
        FD_STEP,
    );
    for (a, n) in e0_grad.iter().zip(&numeric.data) {
        worst = worst.max(rel_err(*a, *n));
    }

    // parameter gradients, probed through a flattened copy
    let flat: Vec<f64> = params
        .param_entries()
        .iter()
        .flat_map(|(_, t)| t.data.iter().copied())
        .collect();
    let flat_tensor = Tensor::from_vec(vec![flat.len()], flat)?;
    let numeric = finite_diff_grad(
        |probe| {
            let mut p = params.clone();
            let mut offset = 0;
            for (_, t) in p.param_entries_mut() {
                let n = t.data.len();
                t.data.copy_from_slice(&probe.data[offset..offset + n]);
                offset += n;
            }
            forward_loss(&p, &memory, &e0, &weights)
        },
        &flat_tensor,
        FD_STEP,
    );
    for (a, n) in param_grads.iter().zip(&numeric.data) {
        worst = worst.max(rel_err(*a, *n));
    }

    Ok(CheckReport { name: "gtrxl_2layer_full".to_string(), max_rel_err: worst, tol: MODEL_TOL })
}

fn forward_loss(params: &StackParams, memory: &MemoryState, e0: &Tensor, weights: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let e0v = tape.constant(e0.clone());
    let vars = params.inject(&mut tape);
    let (out, _) = stack_forward_on_tape(&mut tape, &params.config, &vars, memory, e0v)
        .expect("forward succeeds");
    tape.value(out).data.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// The whole suite: primitives plus the full-stack check.
pub fn run_full_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = check_primitives(seed);
    reports.push(check_gtrxl_stack(seed)?);
    Ok(reports)
}
