//! Per-op gradient checks and algebraic properties of the autodiff graph.

use embgate_core::gradcheck::grad_check;
use embgate_core::{Graph, ParamId, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const DRAWS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar through a fixed random weighting, so ops whose
/// plain sum is constant (softmax, layer norm) still get a real gradient.
fn weighted_sum(g: &mut Graph<'_>, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Runs `DRAWS` checks of one op. `inputs` are the parameter shapes,
/// `out_shape` the op's output shape; `op` maps the parameter vars to it.
fn check_op<F>(name: &str, inputs: &[&[usize]], out_shape: &[usize], op: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    for draw in 0..DRAWS {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .iter()
            .enumerate()
            .map(|(i, shape)| store.add(format!("x{i}"), random(&mut rng, shape)).unwrap())
            .collect();
        let weights = random(&mut rng, out_shape);
        let report = grad_check(&store, 1e-5, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = op(g, &vars)?;
            assert_eq!(g.value(out).shape(), out_shape, "{name}");
            weighted_sum(g, out, &weights)
        })
        .unwrap();
        let worst: Vec<_> = report
            .params
            .iter()
            .map(|p| (&p.name, p.max_rel_error, p.worst))
            .collect();
        assert!(report.max_rel_error < TOL, "{name} draw {draw}: {worst:?}");
    }
}

#[test]
fn matmul() {
    check_op("matmul", &[&[3, 4], &[4, 2]], &[3, 2], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn matmul_nt() {
    check_op("matmul_nt", &[&[3, 4], &[2, 4]], &[3, 2], |g, v| {
        g.matmul_nt(v[0], v[1])
    });
}

#[test]
fn transpose() {
    check_op("transpose", &[&[3, 4]], &[4, 3], |g, v| g.transpose(v[0]));
}

#[test]
fn add_and_mul() {
    check_op("add", &[&[2, 5], &[2, 5]], &[2, 5], |g, v| g.add(v[0], v[1]));
    check_op("mul", &[&[2, 5], &[2, 5]], &[2, 5], |g, v| g.mul(v[0], v[1]));
}

#[test]
fn row_broadcasts() {
    check_op("add_row", &[&[3, 4], &[4]], &[3, 4], |g, v| g.add_row(v[0], v[1]));
    check_op("mul_row", &[&[3, 4], &[4]], &[3, 4], |g, v| g.mul_row(v[0], v[1]));
}

#[test]
fn scale() {
    check_op("scale", &[&[2, 3]], &[2, 3], |g, v| g.scale(v[0], -0.7));
}

#[test]
fn tanh_and_gelu() {
    check_op("tanh", &[&[3, 3]], &[3, 3], |g, v| g.tanh(v[0]));
    check_op("gelu", &[&[3, 3]], &[3, 3], |g, v| g.gelu(v[0]));
}

#[test]
fn layer_norm() {
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], &[3, 6], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-12)
    });
}

#[test]
fn softmax() {
    check_op("softmax", &[&[3, 4]], &[3, 4], |g, v| g.softmax(v[0]));
}

#[test]
fn cross_entropy() {
    check_op("cross_entropy", &[&[3, 4]], &[], |g, v| {
        g.cross_entropy(v[0], &[2, 0, 3])
    });
}

#[test]
fn gather() {
    check_op("gather", &[&[5, 3]], &[4, 3], |g, v| g.gather(v[0], &[4, 0, 4, 2]));
}

#[test]
fn slice_concat_select() {
    check_op("slice_cols", &[&[3, 5]], &[3, 2], |g, v| g.slice_cols(v[0], 2, 2));
    check_op("concat_cols", &[&[3, 2], &[3, 3]], &[3, 5], |g, v| {
        g.concat_cols(&[v[0], v[1]])
    });
    check_op("select_row", &[&[3, 4]], &[1, 4], |g, v| g.select_row(v[0], 1));
}

#[test]
fn sum() {
    check_op("sum", &[&[2, 3]], &[], |g, v| g.sum(v[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new([3, 4], x).unwrap());
        let p = g.softmax(v).unwrap();
        let out = g.value(p);
        for r in 0..3 {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_matmul_is_exact(data in prop::collection::vec(-1e3f64..1e3, 12)) {
        let a = Tensor::new([4, 3], data).unwrap();
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let i3 = g.constant(Tensor::identity(3));
        let i4 = g.constant(Tensor::identity(4));
        let right = g.matmul(x, i3).unwrap();
        let left = g.matmul(i4, x).unwrap();
        prop_assert_eq!(g.value(right), &a);
        prop_assert_eq!(g.value(left), &a);
    }

    #[test]
    fn tanh_stays_open(x in prop::num::f64::NORMAL) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![x]));
        let t = g.tanh(v).unwrap();
        prop_assert!(g.value(t).data()[0].abs() < 1.0);
    }
}
