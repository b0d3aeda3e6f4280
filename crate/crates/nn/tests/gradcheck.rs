//! Central finite-difference checks for every differentiable op.

use groundiff_nn::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type BuildFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Builds `sum(op(inputs) * probe)` and compares analytic gradients of every
/// input against central differences.
fn check(name: &str, shapes: &[Vec<usize>], build: &BuildFn, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| rand_vec(&mut rng, s.iter().product())).collect();

    let eval = |inputs: &[Vec<f64>], probe: Option<&[f64]>| -> (f64, Vec<Option<Vec<f64>>>, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().zip(shapes).map(|(d, s)| g.param(d.clone(), s)).collect();
        let out = build(&mut g, &vars);
        let n = g.value(out).len();
        let probe_vals: Vec<f64> = match probe {
            Some(p) => p.to_vec(),
            None => (0..n).map(|i| ((i as f64) * 0.618).sin() + 0.3).collect(),
        };
        let shape = g.shape(out).to_vec();
        let pv = g.constant(probe_vals.clone(), &shape);
        let prod = g.mul(out, pv);
        let loss = g.sum(prod);
        let mut grads = g.backward(loss);
        let gs = vars.iter().map(|&v| grads.take(v)).collect();
        (g.scalar(loss), gs, probe_vals)
    };

    let (_, analytic, probe) = eval(&inputs, None);
    let h = 1e-5;
    for (ii, input) in inputs.iter().enumerate() {
        let ga = analytic[ii].clone().unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[ii][j] += h;
            let mut minus = inputs.clone();
            minus[ii][j] -= h;
            let fp = eval(&plus, Some(&probe)).0;
            let fm = eval(&minus, Some(&probe)).0;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - ga[j]).abs() / (1.0f64).max(fd.abs().max(ga[j].abs()));
            assert!(err < tol, "{name}: input {ii} elem {j}: fd {fd} vs analytic {}", ga[j]);
        }
    }
}

#[test]
fn elementwise_ops() {
    check("add", &[vec![2, 3], vec![2, 3]], &|g, v| g.add(v[0], v[1]), 1e-7);
    check("mul", &[vec![2, 3], vec![2, 3]], &|g, v| g.mul(v[0], v[1]), 1e-7);
    check("mul_self", &[vec![5]], &|g, v| g.mul(v[0], v[0]), 1e-7);
    check("scale", &[vec![4]], &|g, v| g.scale(v[0], -2.5), 1e-7);
    check("silu", &[vec![7]], &|g, v| g.silu(v[0]), 1e-7);
    check("relu", &[vec![7]], &|g, v| g.relu(v[0]), 1e-6);
    check("reshape", &[vec![2, 3]], &|g, v| g.reshape(v[0], &[3, 2]), 1e-7);
}

#[test]
fn broadcast_ops() {
    check("add_bias", &[vec![2, 3, 4], vec![4]], &|g, v| g.add_bias(v[0], v[1]), 1e-7);
    check("add_per_sample", &[vec![2, 3, 3, 4], vec![2, 4]], &|g, v| g.add_per_sample(v[0], v[1]), 1e-7);
    check("tile", &[vec![2, 3]], &|g, v| g.tile(v[0], 3), 1e-7);
    check("mean_middle", &[vec![2, 3, 2, 4]], &|g, v| g.mean_middle(v[0]), 1e-7);
    check(
        "substitute",
        &[vec![3, 2, 2], vec![2, 2]],
        &|g, v| g.substitute(v[0], v[1], &[true, false, true]),
        1e-7,
    );
    check("concat", &[vec![2, 3], vec![2, 2]], &|g, v| g.concat_last(v[0], v[1]), 1e-7);
    check("slice", &[vec![2, 5]], &|g, v| g.slice_last(v[0], 1, 3), 1e-7);
    check("embedding", &[vec![5, 3]], &|g, v| g.embedding(v[0], &[4, 1, 4, 0]), 1e-7);
    check("upsample", &[vec![1, 2, 3, 2]], &|g, v| g.upsample2x(v[0]), 1e-7);
}

#[test]
fn matmul_all_transposes() {
    for ta in [false, true] {
        for tb in [false, true] {
            let sa = if ta { vec![4, 3] } else { vec![3, 4] };
            let sb = if tb { vec![5, 4] } else { vec![4, 5] };
            check("matmul", &[sa, sb], &move |g, v| g.matmul(v[0], v[1], ta, tb), 1e-7);
            let sa = if ta { vec![2, 4, 3] } else { vec![2, 3, 4] };
            let sb = if tb { vec![2, 5, 4] } else { vec![2, 4, 5] };
            check("bmm", &[sa, sb], &move |g, v| g.batch_matmul(v[0], v[1], ta, tb), 1e-7);
        }
    }
    // leading dims flattened into rows
    check("matmul_3d", &[vec![2, 3, 4], vec![4, 2]], &|g, v| g.matmul(v[0], v[1], false, false), 1e-7);
}

#[test]
fn convolution() {
    check("conv3x3", &[vec![2, 5, 4, 3], vec![27, 2]], &|g, v| g.conv2d(v[0], v[1], 3, 1, 1), 1e-7);
    check("conv_stride2", &[vec![1, 6, 6, 2], vec![18, 3]], &|g, v| g.conv2d(v[0], v[1], 3, 2, 1), 1e-7);
    check("conv1x1", &[vec![1, 3, 3, 2], vec![2, 2]], &|g, v| g.conv2d(v[0], v[1], 1, 1, 0), 1e-7);
}

#[test]
fn normalisation() {
    check(
        "group_norm",
        &[vec![2, 3, 3, 4], vec![4], vec![4]],
        &|g, v| g.group_norm(v[0], v[1], v[2], 2),
        1e-6,
    );
    check("layer_norm", &[vec![3, 5], vec![5], vec![5]], &|g, v| g.layer_norm(v[0], v[1], v[2]), 1e-6);
}

#[test]
fn softmax_and_losses() {
    check("softmax", &[vec![3, 4]], &|g, v| g.softmax(v[0]), 1e-7);
    check("causal_softmax", &[vec![2, 4, 4]], &|g, v| g.causal_softmax(v[0]), 1e-7);
    check("mse", &[vec![6], vec![6]], &|g, v| g.mse(v[0], v[1]), 1e-7);
    check("xent", &[vec![3, 5]], &|g, v| g.cross_entropy(v[0], &[Some(1), None, Some(4)]), 1e-7);
    check("bce", &[vec![2, 3]], &|g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.5, 1.0, 0.0, 0.0]), 1e-7);
}

#[test]
fn causal_softmax_masks_future_exactly() {
    let mut g = Graph::<f64>::new();
    let x = g.constant((0..9).map(|i| i as f64 * 0.1).collect(), &[1, 3, 3]);
    let y = g.causal_softmax(x);
    let v = g.value(y);
    assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
    assert_eq!(v[5], 0.0);
    for row in v.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.param(vec![1.0, 2.0], &[2]);
    let c = g.constant(vec![3.0, 4.0], &[2]);
    let y = g.mul(a, c);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert_eq!(grads.wrt(a).unwrap(), &[3.0, 4.0]);
    assert!(grads.wrt(c).is_none());
}
