//! Central finite-difference verification of every tape operation plus
//! end-to-end model checks.
//!
//! Each check builds a scalar loss from seeded random inputs, compares the
//! tape's gradients against (f(x+eps) - f(x-eps)) / 2eps elementwise, and
//! reports the worst relative error. Non-scalar outputs are scalarized with
//! a fixed random weighting so permutation bugs cannot cancel out.

use crate::discriminator::{Discriminator, DiscriminatorConfig, Variant};
use crate::error::Result;
use crate::generator::{tts_loss, DurationSequence, Generator, GeneratorConfig, TokenSequence};
use crate::rng::{mix, Rng};
use crate::spectrogram::Spectrogram;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

type BuildFn = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

/// One finite-difference check over a set of differentiable inputs.
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    /// Multiplies the analytic gradients before comparison. 1.0 in normal
    /// operation; tests set it != 1 as a negative control to prove the suite
    /// rejects corrupted backward rules.
    pub tamper_factor: f64,
    inputs: Vec<Tensor>,
    build: BuildFn,
}

impl Check {
    fn new(
        name: &str,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'static,
    ) -> Self {
        Check {
            name: name.to_string(),
            tolerance: TOLERANCE,
            tamper_factor: 1.0,
            inputs,
            build: Box::new(build),
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Probes one parameter element with central differences, refining the step
/// when the first probe fails: a kink crossing inside the probe window
/// shrinks with eps, a wrong analytic gradient does not. `eval_at` writes
/// the value and returns the loss; the original value is restored at the
/// end.
fn probed_err(analytic: f64, original: f64, mut eval_at: impl FnMut(f64) -> f64) -> f64 {
    let mut best = f64::INFINITY;
    for eps in [EPSILON, EPSILON / 10.0] {
        let up = eval_at(original + eps);
        let down = eval_at(original - eps);
        let numeric = (up - down) / (2.0 * eps);
        best = best.min(rel_err(analytic, numeric));
        if best < TOLERANCE {
            break;
        }
    }
    eval_at(original);
    best
}

/// Runs one check and reports its worst relative error.
pub fn run_check(check: &Check, seed: u64) -> CheckReport {
    let mut rng = Rng::substream(seed, mix(0x5ca1e, check.name.len() as u64));

    // scalarizing weights are fixed across analytic and FD evaluations
    let mut weights: Option<Vec<f64>> = None;
    let mut eval = |inputs: &[Tensor], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(&format!("p{i}"), t).expect("bind input"))
            .collect();
        let out = (check.build)(&mut tape, &ids).expect("check builds");
        let loss = if tape.shape(out).iter().product::<usize>() == 1 {
            out
        } else {
            let n = tape.shape(out).iter().product::<usize>();
            let w = weights.get_or_insert_with(|| {
                (0..n).map(|_| rng.f64_in(0.25, 1.0) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 }).collect()
            });
            let w_node = tape.constant_owned(tape.shape(out).to_vec(), w.clone());
            let prod = tape.mul(out, w_node).expect("scalarize");
            tape.sum(prod)
        };
        let value = tape.item(loss);
        let grads = if want_grads {
            tape.backward(loss).expect("backward");
            inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    tape.param_grad(&format!("p{i}"))
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };

    let (_, analytic) = eval(&check.inputs, true);
    let mut worst = 0.0f64;
    let mut probe = check.inputs.to_vec();
    for (pi, input) in check.inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let original = input.data()[idx];
            probe[pi].data_mut()[idx] = original + EPSILON;
            let (up, _) = eval(&probe, false);
            probe[pi].data_mut()[idx] = original - EPSILON;
            let (down, _) = eval(&probe, false);
            probe[pi].data_mut()[idx] = original;
            let numeric = (up - down) / (2.0 * EPSILON);
            let a = analytic[pi][idx] * check.tamper_factor;
            worst = worst.max(rel_err(a, numeric));
        }
    }
    CheckReport {
        name: check.name.clone(),
        max_rel_err: worst,
        passed: worst < check.tolerance,
    }
}

fn tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.f64_in(lo, hi)).collect();
    let mut t = Tensor::new(shape.to_vec(), data).expect("valid shape");
    t.requires_grad = true;
    t
}

/// Values bounded away from zero (for kinked activations).
fn tensor_off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.f64_in(0.05, 1.0)
        })
        .collect();
    let mut t = Tensor::new(shape.to_vec(), data).expect("valid shape");
    t.requires_grad = true;
    t
}

/// One check per registered tape operation.
pub fn standard_checks(seed: u64) -> Vec<Check> {
    let mut r = Rng::substream(seed, 0x6c4d);
    let mut checks = Vec::new();

    checks.push(Check::new(
        "add",
        vec![tensor(&mut r, &[3, 4], -1.0, 1.0), tensor(&mut r, &[3, 4], -1.0, 1.0)],
        |t, ids| t.add(ids[0], ids[1]),
    ));
    checks.push(Check::new(
        "sub",
        vec![tensor(&mut r, &[3, 4], -1.0, 1.0), tensor(&mut r, &[1], -1.0, 1.0)],
        |t, ids| t.sub(ids[0], ids[1]),
    ));
    checks.push(Check::new(
        "mul",
        vec![tensor(&mut r, &[3, 4], -1.0, 1.0), tensor(&mut r, &[3, 4], -1.0, 1.0)],
        |t, ids| t.mul(ids[0], ids[1]),
    ));
    checks.push(Check::new(
        "scale",
        vec![tensor(&mut r, &[2, 5], -1.0, 1.0)],
        |t, ids| Ok(t.scale(ids[0], -1.7)),
    ));
    checks.push(Check::new(
        "matmul",
        vec![tensor(&mut r, &[3, 4], -1.0, 1.0), tensor(&mut r, &[4, 2], -1.0, 1.0)],
        |t, ids| t.matmul(ids[0], ids[1]),
    ));
    checks.push(Check::new(
        "linear",
        vec![
            tensor(&mut r, &[5, 3], -1.0, 1.0),
            tensor(&mut r, &[3, 2], -1.0, 1.0),
            tensor(&mut r, &[2], -0.5, 0.5),
        ],
        |t, ids| t.linear(ids[0], ids[1], ids[2]),
    ));
    checks.push(Check::new(
        "mse",
        vec![tensor(&mut r, &[3, 4], -1.0, 1.0)],
        |t, ids| {
            let target = t.full(&[3, 4], 0.3);
            t.mse(ids[0], target)
        },
    ));
    checks.push(Check::new(
        "mae",
        vec![tensor_off_zero(&mut r, &[3, 4])],
        |t, ids| {
            // inputs are bounded away from zero, so ties cannot occur
            let target = t.full(&[3, 4], 0.0);
            t.mae(ids[0], target)
        },
    ));
    checks.push(Check::new(
        "sum",
        vec![tensor(&mut r, &[7], -1.0, 1.0)],
        |t, ids| Ok(t.sum(ids[0])),
    ));
    checks.push(Check::new(
        "mean",
        vec![tensor(&mut r, &[2, 6], -1.0, 1.0)],
        |t, ids| Ok(t.mean(ids[0])),
    ));
    checks.push(Check::new(
        "leaky_relu",
        vec![tensor_off_zero(&mut r, &[4, 5])],
        |t, ids| Ok(t.leaky_relu(ids[0], 0.2)),
    ));
    checks.push(Check::new(
        "weight_norm",
        vec![tensor_off_zero(&mut r, &[3, 8]), tensor(&mut r, &[3], 0.5, 2.0)],
        |t, ids| t.weight_norm(ids[0], ids[1]),
    ));
    checks.push(Check::new(
        "conv2d",
        vec![
            tensor(&mut r, &[2, 5, 5], -1.0, 1.0),
            tensor(&mut r, &[3, 2, 3, 3], -0.7, 0.7),
            tensor(&mut r, &[3], -0.3, 0.3),
        ],
        |t, ids| t.conv2d(ids[0], ids[1], ids[2], (2, 1), (1, 1)),
    ));
    checks.push(Check::new(
        "conv_transpose2d",
        vec![
            tensor(&mut r, &[2, 4, 3], -1.0, 1.0),
            tensor(&mut r, &[2, 3, 4, 4], -0.7, 0.7),
            tensor(&mut r, &[3], -0.3, 0.3),
        ],
        |t, ids| t.conv_transpose2d(ids[0], ids[1], ids[2], (2, 2), (1, 1), (1, 0)),
    ));
    checks.push(Check::new(
        "conv1d",
        vec![
            tensor(&mut r, &[3, 7], -1.0, 1.0),
            tensor(&mut r, &[4, 3, 3], -0.7, 0.7),
            tensor(&mut r, &[4], -0.3, 0.3),
        ],
        |t, ids| t.conv1d(ids[0], ids[1], ids[2], 2, 1),
    ));
    checks.push(Check::new(
        "conv_transpose1d",
        vec![
            tensor(&mut r, &[3, 5], -1.0, 1.0),
            tensor(&mut r, &[3, 2, 4], -0.7, 0.7),
            tensor(&mut r, &[2], -0.3, 0.3),
        ],
        |t, ids| t.conv_transpose1d(ids[0], ids[1], ids[2], 2, 1, 0),
    ));
    checks.push(Check::new(
        "concat",
        vec![tensor(&mut r, &[2, 3], -1.0, 1.0), tensor(&mut r, &[4, 3], -1.0, 1.0)],
        |t, ids| t.concat0(ids[0], ids[1]),
    ));
    checks.push(Check::new(
        "embedding",
        vec![tensor(&mut r, &[5, 3], -1.0, 1.0)],
        |t, ids| t.embedding(ids[0], &[0, 2, 4, 2]),
    ));
    checks.push(Check::new(
        "repeat_rows",
        vec![tensor(&mut r, &[3, 4], -1.0, 1.0)],
        |t, ids| t.repeat_rows(ids[0], &[2, 1, 3]),
    ));
    checks.push(Check::new(
        "transpose",
        vec![tensor(&mut r, &[3, 5], -1.0, 1.0)],
        |t, ids| t.transpose2(ids[0]),
    ));
    checks.push(Check::new(
        "reshape",
        vec![tensor(&mut r, &[2, 6], -1.0, 1.0)],
        |t, ids| t.reshape(ids[0], &[3, 4]),
    ));
    checks.push(Check::new(
        "pad_tail",
        vec![tensor(&mut r, &[2, 3, 4], -1.0, 1.0)],
        |t, ids| t.pad_tail(ids[0], &[5, 6]),
    ));
    checks.push(Check::new(
        "crop_tail",
        vec![tensor(&mut r, &[2, 5, 6], -1.0, 1.0)],
        |t, ids| t.crop_tail(ids[0], &[3, 4]),
    ));
    checks
}

/// Tiny discriminator config for the end-to-end checks.
fn tiny_disc_config(variant: Variant) -> DiscriminatorConfig {
    DiscriminatorConfig {
        variant,
        channels: vec![2, 3, 4, 5],
        enc_kernel: 4,
        head_kernel: 3,
        enc_strides: vec![2, 2, 2],
        leaky_alpha: 0.2,
        mel_bins: 6,
    }
}

fn random_spectrogram(rng: &mut Rng, t: usize, n: usize) -> Spectrogram {
    let data = (0..t * n).map(|_| rng.f64_in(-2.0, 1.0)).collect();
    Spectrogram::new(Tensor::new(vec![1, t, n], data).expect("shape")).expect("finite")
}

/// Full discriminator forward/backward against finite differences on a few
/// elements of every parameter tensor.
pub fn disc_end_to_end(seed: u64) -> CheckReport {
    let mut rng = Rng::substream(seed, 0xd15c_e2e);
    let mut disc = Discriminator::build(tiny_disc_config(Variant::MTF), mix(seed, 3)).expect("build");
    // zero-initialized biases leave the zero-padded tail sitting exactly on
    // the LeakyReLU kink, where central differences are ill-defined; probe
    // at a generic point instead
    for (name, t) in disc.named_params_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = rng.f64_in(-0.2, 0.2);
            }
        }
    }
    let sample = random_spectrogram(&mut rng, 10, 6);
    let probe = disc.discriminate(&sample).expect("probe");
    let coarse_shape = probe.coarse.shape().to_vec();
    let fine_shape = probe.fine.as_ref().expect("fine").shape().to_vec();
    let wc: Vec<f64> = (0..probe.coarse.numel()).map(|_| rng.f64_in(-1.0, 1.0)).collect();
    let wf: Vec<f64> = (0..probe.fine.as_ref().expect("fine").numel())
        .map(|_| rng.f64_in(-1.0, 1.0))
        .collect();

    let weighted_loss = |tape: &mut Tape,
                         disc: &Discriminator,
                         trainable: bool|
     -> NodeId {
        let x = tape.constant(sample.tensor());
        let bind = disc.bind(tape, trainable).expect("bind");
        let out = disc.forward(tape, &bind, x).expect("forward");
        let wc_node = tape.constant_owned(coarse_shape.clone(), wc.clone());
        let c = tape.mul(out.coarse, wc_node).expect("mul");
        let c = tape.sum(c);
        let wf_node = tape.constant_owned(fine_shape.clone(), wf.clone());
        let f = tape.mul(out.fine.expect("fine"), wf_node).expect("mul");
        let f = tape.sum(f);
        tape.add(c, f).expect("add")
    };

    let loss_value = |disc: &Discriminator| -> f64 {
        let mut tape = Tape::new();
        let loss = weighted_loss(&mut tape, disc, false);
        tape.item(loss)
    };

    // analytic gradients
    let mut tape = Tape::new();
    let loss = weighted_loss(&mut tape, &disc, true);
    tape.backward(loss).expect("backward");
    let analytic: Vec<(String, Vec<f64>)> = disc
        .named_params()
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                tape.param_grad(name)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()]),
            )
        })
        .collect();
    drop(tape);

    // five sampled elements per parameter tensor
    let mut worst = 0.0f64;
    for (name, grads) in &analytic {
        let numel = grads.len();
        for _ in 0..5.min(numel) {
            let idx = rng.int_in(0, numel - 1);
            let original = disc
                .named_params()
                .iter()
                .find(|(n, _)| n == name)
                .expect("param")
                .1
                .data()[idx];
            let err = probed_err(grads[idx], original, |value| {
                {
                    let mut params = disc.named_params_mut();
                    let (_, t) = params.iter_mut().find(|(n, _)| n == name).expect("param");
                    t.data_mut()[idx] = value;
                }
                loss_value(&disc)
            });
            worst = worst.max(err);
        }
    }
    CheckReport {
        name: "disc_end_to_end".to_string(),
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    }
}

fn tiny_generator(seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        vocab_size: 6,
        embed_dim: 4,
        width: 5,
        kernel: 3,
        mel_bins: 6,
        leaky_alpha: 0.2,
    };
    Generator::build(cfg, mix(seed, 4)).expect("build")
}

/// Generator + supervised loss against finite differences.
pub fn generator_end_to_end(seed: u64) -> CheckReport {
    let mut rng = Rng::substream(seed, 0x9e4e_e2e);
    let mut gen = tiny_generator(seed);
    let tokens = TokenSequence(vec![1, 4, 2]);
    let durations = DurationSequence(vec![3, 2, 4]);
    let target = random_spectrogram(&mut rng, 9, 6);

    let loss_value = |gen: &Generator| -> f64 {
        let mut tape = Tape::new();
        let bind = gen.bind(&mut tape, false).expect("bind");
        let fwd = gen.forward(&mut tape, &bind, &tokens, &durations).expect("forward");
        let loss = tts_loss(&mut tape, fwd.spec, &target, fwd.dur_pred, &durations, 0.02)
            .expect("loss");
        tape.item(loss.l_tts)
    };

    let mut tape = Tape::new();
    let bind = gen.bind(&mut tape, true).expect("bind");
    let fwd = gen.forward(&mut tape, &bind, &tokens, &durations).expect("forward");
    let loss =
        tts_loss(&mut tape, fwd.spec, &target, fwd.dur_pred, &durations, 0.02).expect("loss");
    tape.backward(loss.l_tts).expect("backward");
    let analytic: Vec<(String, Vec<f64>)> = gen
        .named_params()
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                tape.param_grad(name)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()]),
            )
        })
        .collect();
    drop(tape);

    let mut worst = 0.0f64;
    for (name, grads) in &analytic {
        let numel = grads.len();
        for _ in 0..5.min(numel) {
            let idx = rng.int_in(0, numel - 1);
            let original = gen
                .named_params()
                .iter()
                .find(|(n, _)| n == name)
                .expect("param")
                .1
                .data()[idx];
            let err = probed_err(grads[idx], original, |value| {
                {
                    let mut params = gen.named_params_mut();
                    let (_, t) = params.iter_mut().find(|(n, _)| n == name).expect("param");
                    t.data_mut()[idx] = value;
                }
                loss_value(&gen)
            });
            worst = worst.max(err);
        }
    }
    CheckReport {
        name: "generator_end_to_end".to_string(),
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    }
}

/// Full L_g = L_tts + lambda_a L_a + lambda_f L_f through the generator and
/// a frozen discriminator, checked on sampled generator parameters.
pub fn lg_end_to_end(seed: u64) -> CheckReport {
    let mut rng = Rng::substream(seed, 0x19_e2e);
    let mut gen = tiny_generator(seed);
    let disc = Discriminator::build(tiny_disc_config(Variant::MTF), mix(seed, 5)).expect("build");
    let tokens = TokenSequence(vec![0, 3, 5]);
    let durations = DurationSequence(vec![2, 4, 3]);
    let target = random_spectrogram(&mut rng, 9, 6);
    let real = disc.discriminate(&target).expect("features");

    let loss_value = |gen: &Generator, want_grads: bool| -> (f64, Vec<(String, Vec<f64>)>) {
        let mut tape = Tape::new();
        let gbind = gen.bind(&mut tape, want_grads).expect("bind");
        let dbind = disc.bind(&mut tape, false).expect("bind");
        let fwd = gen.forward(&mut tape, &gbind, &tokens, &durations).expect("forward");
        let tts = tts_loss(&mut tape, fwd.spec, &target, fwd.dur_pred, &durations, 0.02)
            .expect("tts");
        let out_f = disc.forward(&mut tape, &dbind, fwd.spec).expect("disc");
        let real_hidden: Vec<NodeId> = real.hidden.iter().map(|h| tape.constant(h)).collect();
        let (l_a, l_f) =
            crate::trainer::generator_adv_losses(&mut tape, &out_f, &real_hidden).expect("adv");
        let a_w = tape.scale(l_a, 0.2);
        let f_w = tape.scale(l_f, 2.0);
        let partial = tape.add(tts.l_tts, a_w).expect("add");
        let l_g = tape.add(partial, f_w).expect("add");
        let value = tape.item(l_g);
        let grads = if want_grads {
            tape.backward(l_g).expect("backward");
            gen.named_params()
                .iter()
                .map(|(name, t)| {
                    (
                        name.clone(),
                        tape.param_grad(name)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0.0; t.numel()]),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };

    let (_, analytic) = loss_value(&gen, true);
    let mut worst = 0.0f64;
    for (name, grads) in &analytic {
        let numel = grads.len();
        let idx = rng.int_in(0, numel - 1);
        let original = gen
            .named_params()
            .iter()
            .find(|(n, _)| n == name)
            .expect("param")
            .1
            .data()[idx];
        let err = probed_err(grads[idx], original, |value| {
            {
                let mut params = gen.named_params_mut();
                let (_, t) = params.iter_mut().find(|(n, _)| n == name).expect("param");
                t.data_mut()[idx] = value;
            }
            loss_value(&gen, false).0
        });
        worst = worst.max(err);
    }
    CheckReport {
        name: "l_g_end_to_end".to_string(),
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    }
}

/// The full suite: every registered op plus the end-to-end checks.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    let mut reports: Vec<CheckReport> = standard_checks(seed)
        .iter()
        .map(|c| run_check(c, seed))
        .collect();
    reports.push(disc_end_to_end(seed));
    reports.push(generator_end_to_end(seed));
    reports.push(lg_end_to_end(seed));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let reports = run_all(17);
        for r in &reports {
            assert!(r.passed, "{} failed: {:.3e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn op_names_are_unique_and_complete() {
        let reports = run_all(3);
        let mut names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
        let expected = [
            "add", "sub", "mul", "scale", "matmul", "linear", "mse", "mae", "sum", "mean",
            "leaky_relu", "weight_norm", "conv2d", "conv_transpose2d", "conv1d",
            "conv_transpose1d", "concat", "embedding", "repeat_rows", "transpose", "reshape",
            "pad_tail", "crop_tail", "disc_end_to_end", "generator_end_to_end", "l_g_end_to_end",
        ];
        names.sort_unstable();
        let mut want: Vec<&str> = expected.to_vec();
        want.sort_unstable();
        assert_eq!(names, want);
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let mut rng = Rng::new(5);
        let mut check = Check::new(
            "tampered_mul",
            vec![
                tensor(&mut rng, &[3, 3], -1.0, 1.0),
                tensor(&mut rng, &[3, 3], -1.0, 1.0),
            ],
            |t, ids| t.mul(ids[0], ids[1]),
        );
        check.tamper_factor = 1.25;
        let report = run_check(&check, 5);
        assert!(!report.passed, "tampered gradients must fail the suite");
    }
}
