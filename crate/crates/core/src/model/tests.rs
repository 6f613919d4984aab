use super::*;
use crate::dataio::{Example, Vocab};
use crate::embedding::sigmoid;
use crate::session_graph::SessionGraph;
use approx::assert_abs_diff_eq;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(d: usize, steps: usize, kind: ReadoutKind) -> ModelConfig {
    ModelConfig {
        dim: d,
        steps,
        readout: ReadoutConfig { kind, tau: 1.0 },
        loss: LossKind::CrossEntropy,
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Loss straight from the forward pass, computed independently of the
/// gradient code.
fn objective(c: &ModelConfig, params: &ModelParams, phi: &Array2<f64>, prefix: &[usize], label: usize) -> f64 {
    let table = phi + &params.beta;
    let t = forward(c, &params.net, &table, prefix).unwrap();
    match c.loss {
        LossKind::CrossEntropy => loss(&t.probs, label),
        LossKind::CatalogBinary => t
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                if i == label {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum(),
    }
}

/// Largest normalized deviation between analytic and central-difference
/// gradients over every parameter entry, β included.
fn gradient_error(c: &ModelConfig, params: &ModelParams, phi: &Array2<f64>, prefix: &[usize], label: usize) -> f64 {
    let table = phi + &params.beta;
    let trace = forward(c, &params.net, &table, prefix).unwrap();
    let g = backward(c, &params.net, &table, &trace, label);
    let analytic = ModelParams {
        beta: g.table_grad(),
        net: g.net.clone(),
    };
    let eps = 1e-6;
    let mut probe = params.clone();
    let mut num = Vec::new();
    let mut ana = Vec::new();
    let names: Vec<&str> = params.tensors().iter().map(|(n, _)| *n).collect();
    for (ti, name) in names.iter().enumerate() {
        let len = params.tensors()[ti].1.len();
        for k in 0..len {
            let orig = params.tensors()[ti].1.iter().nth(k).copied().unwrap();
            let set = |p: &mut ModelParams, v: f64| {
                let mut ts = p.tensors_mut();
                *ts[ti].1.iter_mut().nth(k).unwrap() = v;
            };
            set(&mut probe, orig + eps);
            let up = objective(c, &probe, phi, prefix, label);
            set(&mut probe, orig - eps);
            let down = objective(c, &probe, phi, prefix, label);
            set(&mut probe, orig);
            num.push((up - down) / (2.0 * eps));
            ana.push(analytic.tensors()[ti].1.iter().nth(k).copied().unwrap());
        }
        assert_eq!(analytic.tensors()[ti].0, *name);
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(ana.iter().map(|a| a * a).sum::<f64>().sqrt());
    diff / scale.max(1e-300)
}

#[test]
fn node_states_add_embedding_and_bias() {
    let phi = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
    let beta = array![[0.5, 0.5], [0.0, 0.0], [-1.0, 1.0]];
    let sg = SessionGraph::build(&[2, 0, 2]).unwrap();
    let h = init_node_states(&sg, phi.view(), beta.view());
    assert_eq!(h, array![[1.0, 3.0], [1.5, 0.5]]);
}

/// Scalar-loop implementation of one gated step.
fn step_oracle(sg: &SessionGraph, h: &Array2<f64>, net: &NetParams) -> Array2<f64> {
    let (n, d) = h.dim();
    let mut out = Array2::zeros((n, d));
    for v in 0..n {
        let mut msg = vec![0.0; 2 * d];
        for u in 0..n {
            for k in 0..d {
                msg[k] += sg.w_out[[v, u]] * h[[u, k]];
                msg[d + k] += sg.w_in[[v, u]] * h[[u, k]];
            }
        }
        for (k, m) in msg.iter_mut().enumerate() {
            *m += net.b_msg[k];
        }
        let affine = |p: &Array2<f64>, q: &Array2<f64>, state: &[f64], row: usize| {
            let mut s = 0.0;
            for k in 0..2 * d {
                s += p[[row, k]] * msg[k];
            }
            for k in 0..d {
                s += q[[row, k]] * state[k];
            }
            s
        };
        let hv: Vec<f64> = h.row(v).to_vec();
        let z: Vec<f64> = (0..d).map(|i| sigmoid(affine(&net.p_z, &net.q_z, &hv, i))).collect();
        let r: Vec<f64> = (0..d).map(|i| sigmoid(affine(&net.p_r, &net.q_r, &hv, i))).collect();
        let rh: Vec<f64> = (0..d).map(|i| r[i] * hv[i]).collect();
        for i in 0..d {
            let cand = affine(&net.p_h, &net.q_h, &rh, i).tanh();
            out[[v, i]] = (1.0 - z[i]) * hv[i] + z[i] * cand;
        }
    }
    out
}

#[test]
fn step_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for prefix in [vec![0, 1, 2, 1], vec![3, 3, 0], vec![4], vec![0, 1, 2, 3, 4, 0]] {
        let net = NetParams::init(4, ReadoutKind::ExpDecay, &mut rng);
        let sg = SessionGraph::build(&prefix).unwrap();
        let h = random_matrix(sg.node_count(), 4, 1.0, &mut rng);
        let fast = message_pass_step(&sg, &h, &net);
        let slow = step_oracle(&sg, &h, &net);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn isolated_node_with_zero_weights() {
    // single node, all weights and bias zero: z = r = 1/2, candidate = 0
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = NetParams::init(3, ReadoutKind::Last, &mut rng).zeros_like();
    let sg = SessionGraph::build(&[5]).unwrap();
    let h = array![[1.0, -2.0, 4.0]];
    assert_eq!(message_pass_step(&sg, &h, &net), array![[0.5, -1.0, 2.0]]);
}

#[test]
fn gates_stay_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = NetParams::init(6, ReadoutKind::Last, &mut rng);
    net.p_z.mapv_inplace(|x| 30.0 * x);
    let sg = SessionGraph::build(&[0, 1, 2, 0]).unwrap();
    let h = random_matrix(3, 6, 5.0, &mut rng);
    let (_, cache) = forward::step_cached(&sg, &h, &net);
    assert!(cache.z.iter().chain(cache.r.iter()).all(|&g| (0.0..=1.0).contains(&g)));
    assert!(cache.cand.iter().all(|&c| (-1.0..=1.0).contains(&c)));
}

#[test]
fn exp_decay_weights_for_three_positions() {
    let w = forward::exp_decay_weights(3, 1.0);
    assert_abs_diff_eq!(w[0], 0.0900, epsilon = 1e-4);
    assert_abs_diff_eq!(w[1], 0.2447, epsilon = 1e-4);
    assert_abs_diff_eq!(w[2], 0.6652, epsilon = 1e-4);
    assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
}

#[test]
fn temperature_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = NetParams::init(4, ReadoutKind::ExpDecay, &mut rng);
    let sg = SessionGraph::build(&[0, 1, 2, 1, 3]).unwrap();
    let h = random_matrix(4, 4, 1.0, &mut rng);
    let wide = ReadoutConfig {
        kind: ReadoutKind::ExpDecay,
        tau: 1e6,
    };
    let mean = ReadoutConfig {
        kind: ReadoutKind::Mean,
        tau: 1.0,
    };
    let (a, _) = readout(&sg, &h, &wide, &net).unwrap();
    let (b, _) = readout(&sg, &h, &mean, &net).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-4);
    }
    let w = forward::exp_decay_weights(5, 1e-3);
    assert!(w[4] > 0.999);
}

#[test]
fn repeated_item_gets_summed_weight() {
    // prefix [a, b, a]: a holds positions 1 and 3
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = NetParams::init(2, ReadoutKind::ExpDecay, &mut rng);
    let sg = SessionGraph::build(&[0, 1, 0]).unwrap();
    let h = array![[1.0, 0.0], [0.0, 1.0]];
    let (s, _) = readout(&sg, &h, &ReadoutConfig::default(), &net).unwrap();
    let w = forward::exp_decay_weights(3, 1.0);
    assert_abs_diff_eq!(s[0], w[0] + w[2], epsilon = 1e-15);
    assert_abs_diff_eq!(s[1], w[1], epsilon = 1e-15);
}

#[test]
fn score_and_loss_examples() {
    let table = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let s = array![2.0, -1.0];
    assert_eq!(score(&s, &table), array![2.0, -1.0, 1.0]);
    let uniform = Array1::from_elem(4, 0.25);
    assert_abs_diff_eq!(loss(&uniform, 2), 1.386294, epsilon = 1e-6);
    assert_eq!(loss(&array![0.0, 1.0], 1), 0.0);
    assert_abs_diff_eq!(loss(&array![0.0, 1.0], 0), -(1e-12f64).ln(), epsilon = 1e-9);
}

#[test]
fn softmax_sums_to_one_and_ignores_shifts() {
    let l = array![1.0, -3.0, 700.0, 2.5];
    let p = softmax(&l);
    assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
    let q = softmax(&(&l + 123.0));
    for (a, b) in p.iter().zip(q.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in ReadoutKind::ALL {
        for steps in [0, 1, 2] {
            for loss_kind in [LossKind::CrossEntropy, LossKind::CatalogBinary] {
                let mut c = cfg(5, steps, kind);
                c.loss = loss_kind;
                let m = 6;
                let params = ModelParams::init(m, &c, rng.random());
                let phi = random_matrix(m, 5, 0.5, &mut rng);
                let prefix: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..4)).collect();
                let label = rng.random_range(0..m);
                let err = gradient_error(&c, &params, &phi, &prefix, label);
                assert!(err < 1e-6, "{kind} T={steps} {loss_kind:?}: {err}");
            }
        }
    }
}

#[test]
fn unpropagated_mean_readout_closed_form() {
    // T = 0, mean readout: s = mean of table rows, logits = table s.
    // dL/dβ = outer(p - e_y, s) + (1/L) Σ_pos tableᵀ (p - e_y) at each position's row.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cfg(3, 0, ReadoutKind::Mean);
    let m = 4;
    let params = ModelParams::init(m, &c, 1);
    let phi = random_matrix(m, 3, 0.5, &mut rng);
    let prefix = [2, 0, 2];
    let label = 1;
    let table = &phi + &params.beta;
    let s = (&table.row(2) + &table.row(0) + table.row(2)) / 3.0;
    let logits = table.dot(&s);
    let mut dl = softmax(&logits);
    dl[label] -= 1.0;
    let back = table.t().dot(&dl) / 3.0;
    let mut expect = Array2::zeros((m, 3));
    for i in 0..m {
        for k in 0..3 {
            expect[[i, k]] = dl[i] * s[k];
        }
    }
    for &p in &prefix {
        let mut r = expect.row_mut(p);
        r += &back;
    }
    let trace = forward(&c, &params.net, &table, &prefix).unwrap();
    let g = backward(&c, &params.net, &table, &trace, label);
    for (a, b) in g.table_grad().iter().zip(expect.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
    assert!(g.net.tensors().iter().all(|(_, t)| t.iter().all(|&x| x == 0.0)));
}

#[test]
fn near_certain_prediction_has_vanishing_gradient() {
    // logits ≈ [0, 40, 0]: p[label] = 1 - 2e^-40
    let c = cfg(2, 0, ReadoutKind::Last);
    let mut params = ModelParams::init(3, &c, 0);
    params.beta.fill(0.0);
    let phi = array![[0.0, 0.0], [40f64.sqrt(), 0.0], [0.0, 0.0]];
    let table = &phi + &params.beta;
    let trace = forward(&c, &params.net, &table, &[1]).unwrap();
    assert!(1.0 - trace.probs[1] < 1e-15);
    let g = backward(&c, &params.net, &table, &trace, 1);
    assert!(g.table_grad().iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn message_passing_is_local_in_hops() {
    // chain a b c d: with T steps the last node only sees nodes within T hops
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = 4;
    let phi = random_matrix(m, 3, 1.0, &mut rng);
    let mut moved = phi.clone();
    moved.row_mut(0).fill(7.0);
    for (steps, affected) in [(1, false), (2, false), (3, true)] {
        let c = cfg(3, steps, ReadoutKind::Last);
        let params = ModelParams::init(m, &c, 2);
        let s1 = forward(&c, &params.net, &(&phi + &params.beta), &[0, 1, 2, 3]).unwrap().session;
        let s2 = forward(&c, &params.net, &(&moved + &params.beta), &[0, 1, 2, 3]).unwrap().session;
        assert_eq!(s1 != s2, affected, "T={steps}");
    }
}

#[test]
fn recommend_breaks_ties_by_index() {
    let c = cfg(2, 1, ReadoutKind::ExpDecay);
    let mut params = ModelParams::init(5, &c, 0);
    params.beta.fill(0.0);
    let model = SessionModel::new(c, Array2::zeros((5, 2)), params).unwrap();
    let top = model.recommend(&[3, 1], 3).unwrap();
    assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(model.recommend(&[0], 0).is_err());
    assert!(model.recommend(&[0], 6).is_err());
    assert!(model.recommend(&[9], 1).is_err());
}

#[test]
fn top_k_orders_descending() {
    let got = top_k(&[0.5, 2.0, -1.0, 2.0, 1.0], 4);
    assert_eq!(got.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 3, 4, 0]);
}

fn chain_examples() -> Vec<Example> {
    // items 0..6 visited in a cycle; every prefix predicts the successor
    let mut out = Vec::new();
    for start in 0..6 {
        let seq: Vec<usize> = (0..5).map(|k| (start + k) % 6).collect();
        for cut in 1..seq.len() {
            out.push(Example {
                prefix: seq[..cut].to_vec(),
                label: seq[cut],
            });
        }
    }
    out
}

#[test]
fn learns_a_deterministic_chain() {
    let c = cfg(8, 1, ReadoutKind::ExpDecay);
    let data = chain_examples();
    let phi = Array2::zeros((6, 8));
    let params = ModelParams::init(6, &c, 1);
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 8,
        patience: 200,
        select_k: 1,
        adam: AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let (params, _) = train(&data, &data, &phi, params, &c, &tc).unwrap();
    let model = SessionModel::new(c, phi, params).unwrap();
    assert_eq!(model.recommend(&[0, 1], 1).unwrap()[0].0, 2);
    assert_eq!(model.recommend(&[3, 4], 1).unwrap()[0].0, 5);
    assert_eq!(model.recommend(&[5], 1).unwrap()[0].0, 0);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let c = cfg(4, 1, ReadoutKind::Attention);
    let data = chain_examples();
    let phi = Array2::from_elem((6, 4), 0.1);
    let params = ModelParams::init(6, &c, 3);
    let tc = TrainConfig {
        epochs: 2,
        adam: AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let (after, rep) = train(&data, &[], &phi, params.clone(), &c, &tc).unwrap();
    assert_eq!(after, params);
    assert_eq!(rep.epochs.len(), 2);
}

#[test]
fn full_batch_gives_one_update_per_epoch() {
    let c = cfg(4, 1, ReadoutKind::Mean);
    let data = chain_examples();
    let phi = Array2::zeros((6, 4));
    let tc = TrainConfig {
        epochs: 3,
        batch_size: data.len(),
        ..TrainConfig::default()
    };
    let (_, rep) = train(&data, &[], &phi, ModelParams::init(6, &c, 0), &c, &tc).unwrap();
    assert_eq!(rep.updates, 3);
}

#[test]
fn training_ignores_thread_count() {
    let c = cfg(4, 1, ReadoutKind::ExpDecay);
    let data = chain_examples();
    let phi = Array2::from_elem((6, 4), 0.05);
    let run = |threads| {
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 10,
            threads,
            ..TrainConfig::default()
        };
        train(&data, &data, &phi, ModelParams::init(6, &c, 4), &c, &tc).unwrap()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let c = cfg(2, 1, ReadoutKind::Last);
    let mut params = ModelParams::init(3, &c, 0);
    let start = params.clone();
    let mut grads = params.clone();
    grads.beta.fill(0.0);
    grads.net = grads.net.zeros_like();
    grads.beta[[1, 0]] = 3.0;
    grads.beta[[2, 1]] = -0.5;
    let mut adam = Adam::new(AdamConfig::default(), &params);
    adam.step(&mut params, &grads);
    // bias-corrected first step is lr · g / (|g| + eps)
    assert_abs_diff_eq!(params.beta[[1, 0]], start.beta[[1, 0]] - 1e-3, epsilon = 1e-10);
    assert_abs_diff_eq!(params.beta[[2, 1]], start.beta[[2, 1]] + 1e-3, epsilon = 1e-10);
    assert_eq!(params.beta[[0, 0]], start.beta[[0, 0]]);
    assert_eq!(params.net, start.net);
}

#[test]
fn checkpoint_round_trip() {
    for kind in ReadoutKind::ALL {
        let c = ModelConfig {
            dim: 3,
            steps: 2,
            readout: ReadoutConfig { kind, tau: 0.75 },
            loss: LossKind::CrossEntropy,
        };
        let phi = Array2::from_shape_fn((4, 3), |(i, k)| (i * 3 + k) as f64 * 0.125);
        let model = SessionModel::new(c, phi, ModelParams::init(4, &c, 9)).unwrap();
        let vocab: Vocab = ["a", "b c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &vocab).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.model.config, c);
        assert_eq!(back.model.phi, model.phi);
        for ((n1, a), (n2, b)) in back.model.params.tensors().iter().zip(model.params.tensors()) {
            assert_eq!(*n1, n2);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, "hello\n\n").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

proptest! {
    #[test]
    fn readout_weights_are_distributions(len in 1usize..30, tau in 0.01f64..100.0) {
        let w = forward::exp_decay_weights(len, tau);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn probabilities_are_distributions(logits in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&Array1::from(logits));
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }
}
