//! Every differentiable op against central finite differences, 20 random
//! inputs each, at 64-bit.

use fiber_tensor::{finite_diff_check, Result, Rng, Tensor, Var, LAYER_NORM_EPS};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const TRIALS: u64 = 20;

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.5, 1.5))
}

fn check(name: &str, shape: &[usize], f: impl Fn(&Var, &mut Rng) -> Result<Var>) {
    for trial in 0..TRIALS {
        let mut rng = Rng::new(1000 + trial);
        let x = rand_tensor(&mut rng, shape);
        let seed = rng.next_u64();
        let r = finite_diff_check(|v| f(v, &mut Rng::new(seed)), &x, H).unwrap();
        assert!(
            r.max_rel_err < TOL,
            "{name} trial {trial}: rel err {} (analytic {:?}, numeric {:?})",
            r.max_rel_err,
            r.analytic,
            r.numeric
        );
    }
}

/// Random weighting so every output element carries a distinct gradient.
fn weighted_sum(y: &Var, rng: &mut Rng) -> Result<Var> {
    let w = Var::constant(rand_tensor(rng, y.shape()));
    Ok(y.mul(&w)?.sum_all())
}

fn other(rng: &mut Rng, shape: &[usize]) -> Var {
    Var::constant(rand_tensor(rng, shape))
}

#[test]
fn add_sub_mul_div_with_broadcast() {
    check("add", &[2, 3], |x, r| {
        let b = other(r, &[3]);
        weighted_sum(&x.add(&b)?, r)
    });
    check("add-rhs", &[3], |x, r| {
        let a = other(r, &[2, 3]);
        weighted_sum(&a.add(x)?, r)
    });
    check("sub", &[2, 3], |x, r| {
        let b = other(r, &[2, 3]);
        weighted_sum(&b.sub(x)?, r)
    });
    check("mul", &[4, 2], |x, r| {
        let b = other(r, &[2]);
        weighted_sum(&x.mul(&b)?.mul(x)?, r)
    });
    check("div", &[3], |x, r| {
        let b = Var::constant(Tensor::from_fn(vec![3], |_| r.uniform_range(1.0, 2.0)));
        weighted_sum(&b.div(&x.exp())?.add(&x.div(&b)?)?, r)
    });
    check("scale/add_scalar/neg", &[5], |x, r| weighted_sum(&x.scale(2.5).add_scalar(1.0).neg(), r));
}

#[test]
fn unary_ops() {
    check("exp", &[6], |x, r| weighted_sum(&x.exp(), r));
    check("ln", &[6], |x, r| weighted_sum(&x.mul(x)?.add_scalar(0.5).ln(), r));
    check("sqrt", &[6], |x, r| weighted_sum(&x.mul(x)?.add_scalar(0.5).sqrt(), r));
    check("sigmoid", &[6], |x, r| weighted_sum(&x.scale(3.0).sigmoid(), r));
    check("softplus", &[6], |x, r| weighted_sum(&x.scale(3.0).softplus(), r));
    check("gelu", &[6], |x, r| weighted_sum(&x.scale(2.0).gelu(), r));
    // Kinks at 0 are measure-zero for continuous random inputs.
    check("relu", &[6], |x, r| weighted_sum(&x.relu(), r));
}

#[test]
fn min_max() {
    check("maximum", &[8], |x, r| {
        let b = other(r, &[8]);
        weighted_sum(&x.maximum(&b)?, r)
    });
    check("minimum", &[8], |x, r| {
        let b = other(r, &[8]);
        weighted_sum(&b.minimum(x)?, r)
    });
}

#[test]
fn matmul_forms() {
    check("matmul-lhs", &[3, 4], |x, r| {
        let b = other(r, &[4, 2]);
        weighted_sum(&x.matmul(&b)?, r)
    });
    check("matmul-rhs", &[4, 2], |x, r| {
        let a = other(r, &[3, 4]);
        weighted_sum(&a.matmul(x)?, r)
    });
    check("matmul-batched-shared", &[3, 2], |x, r| {
        let a = other(r, &[2, 5, 3]);
        weighted_sum(&a.matmul(x)?, r)
    });
    check("matmul_t", &[2, 3, 4], |x, r| {
        let b = other(r, &[2, 5, 4]);
        let c = x.matmul_t(&b)?;
        weighted_sum(&c.add(&b.matmul_t(x)?.transpose()?)?, r)
    });
    check("matmul_t-shared", &[5, 4], |x, r| {
        let a = other(r, &[2, 3, 4]);
        weighted_sum(&a.matmul_t(x)?, r)
    });
}

#[test]
fn structural_ops() {
    check("reshape+permute", &[2, 3, 4], |x, r| weighted_sum(&x.permute(&[2, 0, 1])?.reshape(vec![4, 6])?, r));
    check("transpose", &[3, 5], |x, r| weighted_sum(&x.transpose()?, r));
    check("concat", &[2, 3], |x, r| {
        let b = other(r, &[2, 2]);
        weighted_sum(&Var::concat(&[x, &b, x], 1)?, r)
    });
    check("narrow", &[4, 3], |x, r| weighted_sum(&x.narrow(0, 1, 2)?, r));
    check("gather_rows", &[4, 3], |x, r| {
        weighted_sum(&x.gather_rows(&[Some(2), None, Some(2), Some(0)])?, r)
    });
}

#[test]
fn reductions() {
    check("sum_all", &[3, 2], |x, _| Ok(x.sum_all()));
    check("mean_all", &[3, 2], |x, _| Ok(x.mean_all()));
    check("sum_axis", &[3, 4, 2], |x, r| weighted_sum(&x.sum_axis(1)?, r));
    check("mean_axis", &[3, 4], |x, r| weighted_sum(&x.mean_axis(0)?, r));
}

#[test]
fn softmax_family() {
    check("softmax-last", &[3, 5], |x, r| weighted_sum(&x.scale(2.0).softmax(1)?, r));
    check("softmax-inner", &[4, 3, 2], |x, r| weighted_sum(&x.softmax(1)?, r));
    check("log_softmax", &[3, 5], |x, r| weighted_sum(&x.log_softmax(1)?, r));
}

#[test]
fn layer_norm_all_inputs() {
    check("layer_norm-x", &[4, 8], |x, r| {
        let g = other(r, &[8]);
        let b = other(r, &[8]);
        weighted_sum(&x.layer_norm(&g, &b, LAYER_NORM_EPS)?, r)
    });
    check("layer_norm-gain", &[8], |g, r| {
        let x = other(r, &[4, 8]);
        let b = other(r, &[8]);
        weighted_sum(&x.layer_norm(g, &b, LAYER_NORM_EPS)?, r)
    });
    check("layer_norm-bias", &[8], |b, r| {
        let x = other(r, &[4, 8]);
        let g = other(r, &[8]);
        weighted_sum(&x.layer_norm(&g, b, LAYER_NORM_EPS)?, r)
    });
}

#[test]
fn composed_linear_gelu_mean() {
    check("linear-gelu-mean", &[3, 4], |w, r| {
        let x = other(r, &[5, 4]);
        let b = other(r, &[3]);
        Ok(x.matmul_t(w)?.add(&b)?.gelu().mean_all())
    });
}
