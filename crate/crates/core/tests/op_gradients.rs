//! Finite-difference verification of every differentiable tape operation
//! on random small inputs: dims <= 8, 5 seeds, tolerance 1e-5 at
//! fd_step 1e-5.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clmrc_core::gradcheck::{grad_check, GradCheckSettings};
use clmrc_core::params::{GradMap, ParamBag, ParamGroup};
use clmrc_core::tape::{NodeId, Tape};
use clmrc_core::tensor::Tensor;
use clmrc_core::Result;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Reduce any output to a scalar with a fixed random weighting so every
/// element contributes to the loss.
fn readout(tape: &mut Tape, x: NodeId, weights: &Tensor) -> NodeId {
    let (rows, cols) = weights.shape();
    let weighted = tape.mul_const(x, weights.clone()).unwrap();
    let left = tape.leaf(Tensor::filled(1, rows, 1.0));
    let right = tape.leaf(Tensor::filled(cols, 1, 1.0));
    let summed = tape.matmul(left, weighted).unwrap();
    tape.matmul(summed, right).unwrap()
}

/// Run grad_check over `forward` for 5 seeds; `make_bag` draws the inputs.
fn check_op(
    name: &str,
    make_bag: impl Fn(&mut ChaCha8Rng) -> ParamBag,
    forward: impl Fn(&mut Tape, &IndexMap<String, NodeId>, &Tensor) -> Result<NodeId>,
    out_shape: (usize, usize),
) {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        let bag = make_bag(&mut rng);
        let weights = random_tensor(&mut rng, out_shape.0, out_shape.1);
        let loss_fn = |p: &ParamBag| -> Result<(f64, GradMap)> {
            let mut tape = Tape::new();
            let mut ids: IndexMap<String, NodeId> = IndexMap::new();
            p.for_each(&mut |n, t| {
                ids.insert(n.to_string(), tape.leaf(t.clone()));
            });
            let out = forward(&mut tape, &ids, &weights)?;
            let loss = readout(&mut tape, out, &weights);
            tape.backward(loss)?;
            let mut grads = GradMap::new();
            for (n, &id) in &ids {
                grads.insert(n.clone(), tape.grad_or_zeros(id));
            }
            Ok((tape.value(loss).item(), grads))
        };
        let report = grad_check(loss_fn, &bag, &GradCheckSettings::default()).unwrap();
        assert!(
            report.passed,
            "{name} seed {seed}: max relative error {:.3e}",
            report.max_relative_error
        );
    }
}

#[test]
fn add_gradients() {
    check_op(
        "add",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("a", random_tensor(rng, 4, 5));
            bag.insert("b", random_tensor(rng, 4, 5));
            bag
        },
        |tape, ids, _| tape.add(ids["a"], ids["b"]),
        (4, 5),
    );
}

#[test]
fn add_row_gradients() {
    check_op(
        "add_row",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("mat", random_tensor(rng, 5, 3));
            bag.insert("row", random_tensor(rng, 1, 3));
            bag
        },
        |tape, ids, _| tape.add_row(ids["mat"], ids["row"]),
        (5, 3),
    );
}

#[test]
fn mul_const_gradients() {
    check_op(
        "mul_const",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 3, 4));
            bag
        },
        |tape, ids, _| {
            let mask = Tensor::from_vec(
                3,
                4,
                (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect(),
            )
            .unwrap();
            tape.mul_const(ids["x"], mask)
        },
        (3, 4),
    );
}

#[test]
fn scale_gradients() {
    check_op(
        "scale",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 2, 6));
            bag
        },
        |tape, ids, _| Ok(tape.scale(ids["x"], -0.37)),
        (2, 6),
    );
}

#[test]
fn matmul_gradients() {
    check_op(
        "matmul",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("a", random_tensor(rng, 4, 3));
            bag.insert("b", random_tensor(rng, 3, 5));
            bag
        },
        |tape, ids, _| tape.matmul(ids["a"], ids["b"]),
        (4, 5),
    );
}

#[test]
fn transpose_gradients() {
    check_op(
        "transpose",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 3, 7));
            bag
        },
        |tape, ids, _| Ok(tape.transpose(ids["x"])),
        (7, 3),
    );
}

#[test]
fn masked_softmax_gradients() {
    let mask = [true, false, true, true, false, true];
    check_op(
        "masked_softmax",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 4, 6));
            bag
        },
        move |tape, ids, _| tape.masked_softmax(ids["x"], &mask),
        (4, 6),
    );
}

#[test]
fn layer_norm_gradients() {
    check_op(
        "layer_norm",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 4, 6));
            bag.insert("gain", random_tensor(rng, 1, 6));
            bag.insert("bias", random_tensor(rng, 1, 6));
            bag
        },
        |tape, ids, _| tape.layer_norm(ids["x"], ids["gain"], ids["bias"], 1e-12),
        (4, 6),
    );
}

#[test]
fn gelu_gradients() {
    check_op(
        "gelu",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 4, 4));
            bag
        },
        |tape, ids, _| Ok(tape.gelu(ids["x"])),
        (4, 4),
    );
}

#[test]
fn cross_entropy_through_softmax_gradients() {
    check_op(
        "cross_entropy",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("logits", random_tensor(rng, 1, 6));
            bag
        },
        |tape, ids, _| {
            let probs = tape.masked_softmax(ids["logits"], &[true; 6])?;
            tape.cross_entropy(probs, 2)
        },
        (1, 1),
    );
}

#[test]
fn cosine_gradients() {
    check_op(
        "cosine",
        |rng| {
            let mut bag = ParamBag::new();
            // Keep vectors away from zero norm.
            let mut u = random_tensor(rng, 1, 5);
            let mut v = random_tensor(rng, 1, 5);
            u.data_mut()[0] += 2.0;
            v.data_mut()[1] += 2.0;
            bag.insert("u", u);
            bag.insert("v", v);
            bag
        },
        |tape, ids, _| tape.cosine(ids["u"], ids["v"]),
        (1, 1),
    );
}

#[test]
fn gather_gradients() {
    check_op(
        "gather",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("table", random_tensor(rng, 6, 4));
            bag
        },
        |tape, ids, _| tape.gather(ids["table"], &[0, 3, 3, 5, 1]),
        (5, 4),
    );
}

#[test]
fn slice_rows_gradients() {
    check_op(
        "slice_rows",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 6, 3));
            bag
        },
        |tape, ids, _| tape.slice_rows(ids["x"], 2, 3),
        (3, 3),
    );
}

#[test]
fn slice_cols_gradients() {
    check_op(
        "slice_cols",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 3, 8));
            bag
        },
        |tape, ids, _| tape.slice_cols(ids["x"], 1, 4),
        (3, 4),
    );
}

#[test]
fn concat_cols_gradients() {
    check_op(
        "concat_cols",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("a", random_tensor(rng, 4, 2));
            bag.insert("b", random_tensor(rng, 4, 3));
            bag
        },
        |tape, ids, _| tape.concat_cols(ids["a"], ids["b"]),
        (4, 5),
    );
}

#[test]
fn mean_rows_gradients() {
    check_op(
        "mean_rows",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 5, 4));
            bag
        },
        |tape, ids, _| Ok(tape.mean_rows(ids["x"])),
        (1, 4),
    );
}

#[test]
fn composite_chain_gradients() {
    // A deeper composition mixing several ops, closer to model usage.
    check_op(
        "composite",
        |rng| {
            let mut bag = ParamBag::new();
            bag.insert("x", random_tensor(rng, 4, 6));
            bag.insert("w", random_tensor(rng, 6, 6));
            bag.insert("gain", random_tensor(rng, 1, 6));
            bag.insert("bias", random_tensor(rng, 1, 6));
            bag
        },
        |tape, ids, _| {
            let xw = tape.matmul(ids["x"], ids["w"])?;
            let activated = tape.gelu(xw);
            let residual = tape.add(ids["x"], activated)?;
            let normed = tape.layer_norm(residual, ids["gain"], ids["bias"], 1e-12)?;
            let probs = tape.masked_softmax(normed, &[true, true, false, true, true, true])?;
            tape.matmul(probs, ids["w"])
        },
        (4, 6),
    );
}
