use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::error::Error;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Random-weighted sum, so every output element carries a distinct cotangent.
fn probe(g: &mut Graph, rng: &mut ChaCha8Rng, y: NodeId) -> NodeId {
    let w = randn(rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn identity_graph_passes_input_through() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![1.0, 2.0]));
    g.mark_output("y", x);
    let out = g.forward(&[]).unwrap();
    assert_eq!(out["y"].data(), &[1.0, 2.0]);
}

#[test]
fn matmul_with_identity() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let b = g.input("b", Tensor::matrix(2, 1, vec![3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::vector(vec![0.0, 0.0]));
    let s = g.softmax(a).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::zeros(&[2, 3]));
    let b = g.input("b", Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { node, op, .. }) => {
            assert_eq!(node, 2);
            assert_eq!(op, "matmul");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn forward_rejects_wrong_input_shape_and_unknown_names() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::zeros(&[2]));
    g.sum(x).unwrap();
    assert!(matches!(
        g.forward(&[("x", Tensor::zeros(&[3]))]),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        g.forward(&[("nope", Tensor::zeros(&[2]))]),
        Err(Error::MissingInput(_))
    ));
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![0.3, -1.0, 2.0]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get("x").unwrap().item(), 6.0);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn dead_parameter_gets_exact_zero() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
    g.param("dead", Tensor::vector(vec![5.0, 6.0, 7.0]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("dead").unwrap().data(), &[0.0, 0.0, 0.0]);
    let report = finite_difference_check(&mut g, s, 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-7);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::scalar(2.0));
    let d = g.detach(x).unwrap();
    let y = g.mul(x, d).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get("x").unwrap().item(), 2.0);
}

#[test]
fn linear_model_fd_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.input("x", randn(&mut rng, &[5, 4]));
    let w = g.param("w", randn(&mut rng, &[4, 3]));
    let b = g.param("b", randn(&mut rng, &[3]));
    let y = g.matmul(x, w).unwrap();
    let y = g.add_row(y, b).unwrap();
    let loss = probe(&mut g, &mut rng, y);
    let report = finite_difference_check(&mut g, loss, 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-7, "{report:?}");
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.input("x", randn(&mut rng, &[6, 5]));
    let w1 = g.param("w1", randn(&mut rng, &[5, 8]));
    let b1 = g.param("b1", randn(&mut rng, &[8]));
    let w2 = g.param("w2", randn(&mut rng, &[8, 3]));
    let h = g.matmul(x, w1).unwrap();
    let h = g.add_row(h, b1).unwrap();
    let h = g.gelu(h).unwrap();
    let y = g.matmul(h, w2).unwrap();
    let y = g.log_softmax(y).unwrap();
    let loss = probe(&mut g, &mut rng, y);
    let report = finite_difference_check(&mut g, loss, 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn fd_rejects_nonpositive_step() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::scalar(1.0));
    assert!(finite_difference_check(&mut g, x, 0.0).is_err());
}

type OpBuilder = fn(&mut Graph, &mut ChaCha8Rng) -> NodeId;

fn op_cases() -> Vec<(&'static str, OpBuilder)> {
    vec![
        ("matmul", |g, r| {
            let a = g.param("a", randn(r, &[3, 4]));
            let b = g.param("b", randn(r, &[4, 2]));
            g.matmul(a, b).unwrap()
        }),
        ("matmul_t", |g, r| {
            let a = g.param("a", randn(r, &[3, 4]));
            let b = g.param("b", randn(r, &[5, 4]));
            g.matmul_t(a, b).unwrap()
        }),
        ("transpose", |g, r| {
            let a = g.param("a", randn(r, &[3, 4]));
            g.transpose(a).unwrap()
        }),
        ("add_sub_mul", |g, r| {
            let a = g.param("a", randn(r, &[3, 4]));
            let b = g.param("b", randn(r, &[3, 4]));
            let s = g.add(a, b).unwrap();
            let d = g.sub(a, b).unwrap();
            g.mul(s, d).unwrap()
        }),
        ("add_row_mul_row", |g, r| {
            let a = g.param("a", randn(r, &[3, 4]));
            let b = g.param("b", randn(r, &[4]));
            let c = g.param("c", randn(r, &[4]));
            let y = g.add_row(a, b).unwrap();
            g.mul_row(y, c).unwrap()
        }),
        ("repeat_cols", |g, r| {
            let a = g.param("a", randn(r, &[3]));
            g.repeat_cols(a, 4).unwrap()
        }),
        ("scale_shift_exp", |g, r| {
            let a = g.param("a", randn(r, &[2, 3]));
            let y = g.scale(a, 0.7).unwrap();
            let y = g.shift(y, -0.2).unwrap();
            g.exp(y).unwrap()
        }),
        ("log", |g, r| {
            let a = g.param("a", randn(r, &[2, 3]));
            let y = g.exp(a).unwrap();
            let y = g.shift(y, 0.5).unwrap();
            g.log(y).unwrap()
        }),
        ("tanh", |g, r| {
            let a = g.param("a", randn(r, &[2, 3]));
            g.tanh(a).unwrap()
        }),
        ("gelu", |g, r| {
            let a = g.param("a", randn(r, &[2, 5]));
            g.gelu(a).unwrap()
        }),
        ("layer_norm", |g, r| {
            let a = g.param("a", randn(r, &[3, 6]));
            g.layer_norm(a, 1e-5).unwrap()
        }),
        ("softmax", |g, r| {
            let a = g.param("a", randn(r, &[3, 5]));
            g.softmax(a).unwrap()
        }),
        ("log_softmax", |g, r| {
            let a = g.param("a", randn(r, &[3, 5]));
            g.log_softmax(a).unwrap()
        }),
        ("logsumexp", |g, r| {
            let a = g.param("a", randn(r, &[3, 5]));
            g.logsumexp(a).unwrap()
        }),
        ("gather_rows", |g, r| {
            let a = g.param("a", randn(r, &[4, 3]));
            g.gather_rows(a, vec![2, 0, 2]).unwrap()
        }),
        ("slice_concat", |g, r| {
            let a = g.param("a", randn(r, &[3, 5]));
            let b = g.param("b", randn(r, &[3, 2]));
            let s = g.slice_cols(a, 1, 3).unwrap();
            g.concat_cols(vec![b, s, b]).unwrap()
        }),
        ("reshape_row_sum", |g, r| {
            let a = g.param("a", randn(r, &[2, 6]));
            let y = g.reshape(a, &[4, 3]).unwrap();
            g.row_sum(y).unwrap()
        }),
        ("mean", |g, r| {
            let a = g.param("a", randn(r, &[2, 6]));
            let m = g.mean(a).unwrap();
            g.reshape(m, &[1]).unwrap()
        }),
        ("lowrank_sqdist", |g, r| {
            let z = g.param("z", randn(r, &[3, 4]));
            let mu = g.param("mu", randn(r, &[3, 2 * 2]));
            let m = g.param("m", randn(r, &[2, 4, 2]));
            let s = g.param("s", randn(r, &[2, 4]));
            g.lowrank_sqdist(z, mu, m, s).unwrap()
        }),
        ("attention", |g, r| {
            let x = g.param("x", randn(r, &[6, 12]));
            g.attention(x, 2, 2).unwrap()
        }),
    ]
}

#[test]
fn every_op_matches_finite_differences_on_100_instances() {
    for (name, build) in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut g = Graph::new();
            let y = build(&mut g, &mut rng);
            let loss = probe(&mut g, &mut rng, y);
            let report = finite_difference_check(&mut g, loss, 1e-5).unwrap();
            worst = worst.max(report.max_rel_err);
        }
        assert!(worst < 1e-4, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.param("a", randn(&mut rng, &[4, 6]));
        let b = g.param("b", randn(&mut rng, &[6, 6]));
        let y = g.matmul(a, b).unwrap();
        let y = g.layer_norm(y, 1e-5).unwrap();
        let y = g.softmax(y).unwrap();
        let loss = probe(&mut g, &mut rng, y);
        g.backward(loss).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn logsumexp_is_stable_for_large_logits() {
    let v = kernels::logsumexp(&[1000.0, 1000.0]);
    assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    let mut g = Graph::new();
    let a = g.input("a", Tensor::vector(vec![800.0, -800.0, 799.0]));
    let s = g.softmax(a).unwrap();
    assert!(g.value(s).all_finite());
}

/// Scaled dot-product attention for one head, written out with loops.
fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..v[0].len())
                .map(|c| w.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

#[test]
fn attention_matches_loop_oracle_and_keeps_groups_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (groups, seq, heads, hd) = (3, 4, 2, 3);
    let width = heads * hd;
    let x = randn(&mut rng, &[groups * seq, 3 * width]);
    let mut g = Graph::new();
    let xi = g.input("x", x.clone());
    let y = g.attention(xi, groups, heads).unwrap();
    for grp in 0..groups {
        for h in 0..heads {
            let block = |off: usize| -> Vec<Vec<f64>> {
                (0..seq)
                    .map(|r| x.row(grp * seq + r)[off + h * hd..off + (h + 1) * hd].to_vec())
                    .collect()
            };
            let want = naive_attention(&block(0), &block(width), &block(2 * width));
            for r in 0..seq {
                for c in 0..hd {
                    let got = g.value(y).row(grp * seq + r)[h * hd + c];
                    assert!((got - want[r][c]).abs() < 1e-12);
                }
            }
        }
    }
    assert!(g.attention(xi, 5, 2).is_err());
}
