//! Finite-difference checks of every differentiable op, in float64.

use fungnet::autodiff::{grad_check, DEFAULT_STEP};
use fungnet::nn::{Conv2dGeometry, NormStats, PoolSpec};
use fungnet::{Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Entries pairwise at least 0.01 apart so max-pool winners stay put under
/// the finite-difference step.
pub fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::from_vec(v, shape).unwrap()
}

/// `Σ c ⊙ y` with fixed random `c`, so a constant-sum op is still probed.
fn weighted(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let c = t.constant(random(t.shape(y), seed));
    t.mul(y, c)
}

fn away_from_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

/// `(name, max relative error)` for each checked op.
pub fn run() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut check = |name: String, op: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: Vec<Tensor<f64>>| {
        let r = grad_check(op, &inputs, DEFAULT_STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
        out.push((name, r.max_rel_error));
    };

    check("matmul".into(), &|t, v| t.matmul(v[0], v[1]), vec![random(&[3, 4], 1), random(&[4, 2], 2)]);
    check(
        "linear".into(),
        &|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted(t, y, 9)
        },
        vec![random(&[3, 5], 3), random(&[4, 5], 4), random(&[4], 5)],
    );
    check("relu".into(), &|t, v| t.relu(v[0]), vec![away_from_kink(&[4, 6], 6)]);
    for stride in [1, 2] {
        for padding in [0, 1] {
            check(
                format!("conv2d stride {stride} padding {padding}"),
                &move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dGeometry::new(stride, padding))?;
                    weighted(t, y, 10)
                },
                vec![random(&[1, 2, 5, 5], 7), random(&[3, 2, 3, 3], 8), random(&[3], 11)],
            );
        }
    }
    for (name, spec) in [
        ("max pool 3/2/1", PoolSpec::max(3, 2, 1)),
        ("max pool 2/2/0", PoolSpec::max(2, 2, 0)),
        ("average pool 3/2/1", PoolSpec::average(3, 2, 1)),
        ("average pool 2/2/0", PoolSpec::average(2, 2, 0)),
        ("global average pool", PoolSpec::global_average()),
    ] {
        check(
            name.into(),
            &move |t, v| {
                let y = t.pool2d(v[0], &spec)?;
                weighted(t, y, 12)
            },
            vec![distinct(&[2, 2, 6, 6], 13)],
        );
    }
    check(
        "batch norm (train)".into(),
        &|t, v| {
            let (y, _) = t.batch_norm2d(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
            weighted(t, y, 14)
        },
        vec![random(&[3, 2, 3, 3], 15), random(&[2], 16), random(&[2], 17)],
    );
    check(
        "dropout (fixed mask)".into(),
        &|t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(18);
            let y = t.dropout(v[0], 0.5, true, &mut rng)?;
            weighted(t, y, 19)
        },
        vec![random(&[4, 5], 20)],
    );
    check(
        "softmax cross-entropy".into(),
        &|t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]),
        vec![random(&[4, 3], 21)],
    );
    check(
        "add".into(),
        &|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y, 22)
        },
        vec![random(&[2, 3, 2, 2], 23), random(&[2, 3, 2, 2], 24)],
    );
    check(
        "concat".into(),
        &|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted(t, y, 25)
        },
        vec![random(&[2, 3, 2, 2], 26), random(&[2, 1, 2, 2], 27)],
    );
    out
}
