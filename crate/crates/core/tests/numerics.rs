use pcolab::numerics::gradcheck::{gradcheck, gradcheck_multi, DEFAULT_STEP};
use pcolab::numerics::rng::{derive_seed, rng_for};
use pcolab::numerics::{topk_indices, Graph, Tensor, Var};
use pcolab::Result;
use proptest::prelude::*;
use rand::Rng as _;

type Op = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng_for(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces an op's output to a scalar with fixed random weights.
fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n: usize = g.shape(y).to_vec().iter().product();
    let w = random(99, &[n], -1.0, 1.0);
    let w = g.constant(g.shape(y).to_vec(), w.data().to_vec())?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(name: &str, op: Op, shapes: &[&[usize]], lo: f64, hi: f64) {
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let inputs: Vec<Tensor<f64>> =
            shapes.iter().enumerate().map(|(j, s)| random(derive_seed(i, &[j as u64]), s, lo, hi)).collect();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = op(g, v)?;
            weighted(g, y)
        };
        worst = worst.max(gradcheck_multi(f, &inputs, DEFAULT_STEP).unwrap().max_rel_error);
    }
    assert!(worst < 1e-4, "{name}: {worst}");
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    let m: &[usize] = &[3, 4];
    let ops: Vec<(&str, Op, Vec<&[usize]>, f64, f64)> = vec![
        ("add", |g, v| g.add(v[0], v[1]), vec![m, m], -2.0, 2.0),
        ("add_broadcast", |g, v| g.add(v[0], v[1]), vec![m, &[4]], -2.0, 2.0),
        ("sub", |g, v| g.sub(v[0], v[1]), vec![m, m], -2.0, 2.0),
        ("mul", |g, v| g.mul(v[0], v[1]), vec![m, m], -2.0, 2.0),
        ("scale", |g, v| g.scale(v[0], 1.7), vec![m], -2.0, 2.0),
        ("neg", |g, v| g.neg(v[0]), vec![m], -2.0, 2.0),
        ("add_scalar", |g, v| g.add_scalar(v[0], 0.3), vec![m], -2.0, 2.0),
        ("gelu", |g, v| g.gelu(v[0]), vec![m], -3.0, 3.0),
        ("sigmoid", |g, v| g.sigmoid(v[0]), vec![m], -3.0, 3.0),
        ("exp", |g, v| g.exp(v[0]), vec![m], -2.0, 2.0),
        ("log", |g, v| g.log(v[0]), vec![m], 0.5, 3.0),
        ("softplus", |g, v| g.softplus(v[0]), vec![m], -3.0, 3.0),
        ("matmul", |g, v| g.matmul(v[0], v[1]), vec![m, &[4, 2]], -2.0, 2.0),
        ("transpose", |g, v| g.transpose(v[0]), vec![m], -2.0, 2.0),
        ("reshape", |g, v| g.reshape(v[0], vec![2, 6]), vec![m], -2.0, 2.0),
        ("embedding", |g, v| g.embedding(v[0], &[2, 0, 2, 1]), vec![m], -2.0, 2.0),
        ("layer_norm", |g, v| g.layer_norm(v[0], 1e-5), vec![m], -2.0, 2.0),
        ("softmax", |g, v| g.softmax(v[0]), vec![m], -2.0, 2.0),
        ("log_softmax", |g, v| g.log_softmax(v[0]), vec![m], -2.0, 2.0),
        ("gather_last", |g, v| g.gather_last(v[0], &[3, 0, 1]), vec![m], -2.0, 2.0),
        ("gather_last_k", |g, v| g.gather_last_k(v[0], &[3, 0, 1, 1, 2, 0], 2), vec![m], -2.0, 2.0),
        ("topk", |g, v| g.topk(v[0], 2).map(|(x, _)| x), vec![m], -2.0, 2.0),
        ("slice_cols", |g, v| g.slice_cols(v[0], 1, 3), vec![m], -2.0, 2.0),
        ("concat_cols", |g, v| g.concat_cols(&[v[0], v[1]]), vec![m, &[3, 2]], -2.0, 2.0),
        ("masked_sum", |g, v| g.masked_sum(v[0], &[true, false, true]), vec![&[3]], -2.0, 2.0),
        ("masked_mean", |g, v| g.masked_mean(v[0], &[true, false, true]), vec![&[3]], -2.0, 2.0),
    ];
    for (name, op, shapes, lo, hi) in ops {
        check(name, op, &shapes, lo, hi);
    }
}

#[test]
fn sum_of_squares_gradient() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(vec![3], x.data().to_vec(), true).unwrap();
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);
    let err = gradcheck(
        |g, v| {
            let sq = g.mul(v, v)?;
            g.sum(sq)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-7);
}

#[test]
fn small_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(vec![2], vec![0.0, 0.0], true).unwrap();
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);
    let z = g.leaf(vec![1], vec![0.0], true).unwrap();
    let sg = g.sigmoid(z).unwrap();
    let t = g.sum(sg).unwrap();
    g.backward(t).unwrap();
    assert_eq!(g.grad(z).unwrap(), &[0.25]);
    assert_eq!(topk_indices(&[5.0, 4.0, 3.0, 2.0, 1.0], 2), vec![0, 1]);
}

#[test]
fn nodes_off_the_loss_path_get_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
    let b = g.leaf(vec![2], vec![3.0, 4.0], true).unwrap();
    let _unused = g.exp(b).unwrap();
    let l = g.sum(a).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(b).is_none_or(|x| x.iter().all(|&v| v == 0.0)));
}

proptest! {
    #[test]
    fn topk_prefers_lower_index_on_ties(row in prop::collection::vec(0u8..4, 2..12), k in 1usize..6) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let k = k.min(row.len());
        let got = topk_indices(&row, k);
        let mut expected: Vec<usize> = (0..row.len()).collect();
        expected.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        prop_assert_eq!(got, expected[..k].to_vec());
    }
}
