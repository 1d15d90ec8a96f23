//! Every differentiable tape op wrapped as a gradient-check case. Each case
//! draws its inputs as parameters from a seed and reduces the op output to a
//! scalar through a fixed random weighting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub type LossFn = Box<dyn Fn(&mut Tape, &ParamSet) -> Result<Var> + Send + Sync>;

pub struct OpCase {
    pub name: &'static str,
    pub build: fn(u64) -> (ParamSet, LossFn),
}

fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.mul_const(out, weights.clone())?;
    Ok(tape.sum(w))
}

fn ids(ps: &ParamSet) -> Vec<ParamId> {
    ps.ids().collect()
}

/// Case whose inputs are `shapes` standard-normal parameters.
fn unary_like(
    seed: u64,
    shapes: &[(usize, usize)],
    out_shape: (usize, usize),
    f: fn(&mut Tape, &[Var]) -> Result<Var>,
) -> (ParamSet, LossFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        ps.add(format!("x{i}"), Tensor::randn(r, c, 1.0, &mut rng));
    }
    let weights = Tensor::randn(out_shape.0, out_shape.1, 1.0, &mut rng);
    let loss: LossFn = Box::new(move |tape, ps| {
        let vars: Vec<Var> = ids(ps).into_iter().map(|id| tape.param(ps, id)).collect();
        let out = f(tape, &vars)?;
        weighted_sum(tape, out, &weights)
    });
    (ps, loss)
}

fn recip_case(seed: u64) -> (ParamSet, LossFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let x = Tensor::uniform(3, 4, 1.0, &mut rng).map(|v| if v >= 0.0 { v + 0.5 } else { v - 0.5 });
    ps.add("x", x);
    let weights = Tensor::randn(3, 4, 1.0, &mut rng);
    let loss: LossFn = Box::new(move |tape, ps| {
        let x = tape.param(ps, ids(ps)[0]);
        let r = tape.recip(x)?;
        weighted_sum(tape, r, &weights)
    });
    (ps, loss)
}

fn kl_case(seed: u64) -> (ParamSet, LossFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.add("p_logits", Tensor::randn(3, 5, 1.0, &mut rng));
    ps.add("q_logits", Tensor::randn(3, 5, 1.0, &mut rng));
    let weights = Tensor::randn(3, 1, 1.0, &mut rng);
    let loss: LossFn = Box::new(move |tape, ps| {
        let v = ids(ps);
        let pl = tape.param(ps, v[0]);
        let ql = tape.param(ps, v[1]);
        let p = tape.row_softmax(pl)?;
        let q = tape.row_softmax(ql)?;
        let kl = tape.kl_rows(p, q)?;
        weighted_sum(tape, kl, &weights)
    });
    (ps, loss)
}

fn focal_case(seed: u64) -> (ParamSet, LossFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.add("logits", Tensor::randn(4, 5, 1.5, &mut rng));
    let targets = Tensor::uniform(4, 5, 1.0, &mut rng).map(|v| if v > 0.4 { 1.0 } else { 0.0 });
    let loss: LossFn = Box::new(move |tape, ps| {
        let x = tape.param(ps, ids(ps)[0]);
        let f = tape.sigmoid_focal(x, targets.clone(), 0.25, 2.0)?;
        Ok(tape.mean(f))
    });
    (ps, loss)
}

pub fn differentiable_ops() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            build: |s| unary_like(s, &[(3, 4), (4, 2)], (3, 2), |t, v| t.matmul(v[0], v[1])),
        },
        OpCase {
            name: "add",
            build: |s| unary_like(s, &[(3, 4), (3, 4)], (3, 4), |t, v| t.add(v[0], v[1])),
        },
        OpCase {
            name: "sub",
            build: |s| unary_like(s, &[(3, 4), (3, 4)], (3, 4), |t, v| t.sub(v[0], v[1])),
        },
        OpCase {
            name: "add_row",
            build: |s| unary_like(s, &[(3, 4), (1, 4)], (3, 4), |t, v| t.add_row(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            build: |s| unary_like(s, &[(3, 4), (3, 4)], (3, 4), |t, v| t.mul(v[0], v[1])),
        },
        OpCase {
            name: "mul_row",
            build: |s| unary_like(s, &[(3, 4), (1, 4)], (3, 4), |t, v| t.mul_row(v[0], v[1])),
        },
        OpCase {
            name: "mul_col",
            build: |s| unary_like(s, &[(3, 4), (3, 1)], (3, 4), |t, v| t.mul_col(v[0], v[1])),
        },
        OpCase {
            name: "scale",
            build: |s| unary_like(s, &[(3, 4)], (3, 4), |t, v| Ok(t.scale(v[0], -1.7))),
        },
        OpCase {
            name: "mul_const",
            build: |s| {
                unary_like(s, &[(2, 3)], (2, 3), |t, v| {
                    t.mul_const(v[0], Tensor::raw(2, 3, vec![1., -2., 0.5, 3., 0., 1.]))
                })
            },
        },
        OpCase {
            name: "add_const",
            build: |s| {
                unary_like(s, &[(2, 3)], (2, 3), |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    t.add_const(sq, &Tensor::full(2, 3, 0.3))
                })
            },
        },
        OpCase {
            name: "relu",
            build: |s| unary_like(s, &[(3, 4)], (3, 4), |t, v| Ok(t.relu(v[0]))),
        },
        OpCase {
            name: "abs",
            build: |s| unary_like(s, &[(3, 4)], (3, 4), |t, v| Ok(t.abs(v[0]))),
        },
        OpCase {
            name: "recip",
            build: recip_case,
        },
        OpCase {
            name: "row_softmax",
            build: |s| unary_like(s, &[(3, 5)], (3, 5), |t, v| t.row_softmax(v[0])),
        },
        OpCase {
            name: "l2_normalize_rows",
            build: |s| unary_like(s, &[(3, 5)], (3, 5), |t, v| Ok(t.l2_normalize_rows(v[0]))),
        },
        OpCase {
            name: "transpose",
            build: |s| unary_like(s, &[(3, 5)], (5, 3), |t, v| Ok(t.transpose(v[0]))),
        },
        OpCase {
            name: "cosine_similarity",
            build: |s| {
                unary_like(s, &[(3, 6), (4, 6)], (3, 4), |t, v| {
                    t.cosine_similarity(v[0], v[1])
                })
            },
        },
        OpCase {
            name: "select_col",
            build: |s| unary_like(s, &[(4, 3)], (4, 1), |t, v| t.select_col(v[0], 1)),
        },
        OpCase {
            name: "gather_rows",
            build: |s| unary_like(s, &[(4, 3)], (5, 3), |t, v| t.gather_rows(v[0], &[3, 0, 3, 1, 2])),
        },
        OpCase {
            name: "scatter_rows",
            build: |s| unary_like(s, &[(2, 3)], (5, 3), |t, v| t.scatter_rows(v[0], &[4, 1], 5)),
        },
        OpCase {
            name: "sum",
            build: |s| unary_like(s, &[(3, 4)], (1, 1), |t, v| Ok(t.sum(v[0]))),
        },
        OpCase {
            name: "mean",
            build: |s| unary_like(s, &[(3, 4)], (1, 1), |t, v| Ok(t.mean(v[0]))),
        },
        OpCase {
            name: "col_mean",
            build: |s| unary_like(s, &[(3, 4)], (1, 4), |t, v| Ok(t.col_mean(v[0]))),
        },
        OpCase {
            name: "row_sum",
            build: |s| unary_like(s, &[(3, 4)], (3, 1), |t, v| Ok(t.row_sum(v[0]))),
        },
        OpCase {
            name: "kl_rows",
            build: kl_case,
        },
        OpCase {
            name: "sigmoid_focal",
            build: focal_case,
        },
    ]
}
