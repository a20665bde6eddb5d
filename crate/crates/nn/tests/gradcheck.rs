//! Analytic gradients of every graph op against central finite differences.

use latseg_nn::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Check d(loss)/d(input_k) for every element of every input.
fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            assert!((a - numeric).abs() / denom < REL_TOL, "input {k} element {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

/// Reduce any tensor to a scalar with a fixed random projection so every
/// output element contributes a distinct weight.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.value(v).shape(), &mut rng);
    let wv = g.constant(w);
    let prod = g.mul(v, wv)?;
    Ok(g.mean(prod))
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng);
    check(vec![a, b], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let t = g.tanh(m);
        let u = g.silu(t);
        let sc = g.scale(u, 1.7);
        project(g, sc, 9)
    });
}

#[test]
fn conv2d_same_and_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, k) in &[(1usize, 3usize), (2, 3), (1, 1)] {
        let x = rand_tensor(&[2, 3, 5, 6], &mut rng);
        let w = rand_tensor(&[4, 3, k, k], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        check(vec![x, w, b], move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)?;
            project(g, y, 11)
        });
    }
}

#[test]
fn group_norm_and_channel_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 4, 3, 3], &mut rng);
    let gamma = rand_tensor(&[4], &mut rng);
    let beta = rand_tensor(&[4], &mut rng);
    let bias = rand_tensor(&[2, 4], &mut rng);
    check(vec![x, gamma, beta, bias], |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
        let y = g.add_channel_bias(y, v[3])?;
        project(g, y, 12)
    });
}

#[test]
fn linear_tokens_upsample_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 2, 2, 3], &mut rng);
    let b = rand_tensor(&[2, 1, 2, 3], &mut rng);
    let w = rand_tensor(&[5, 3], &mut rng);
    let bias = rand_tensor(&[5], &mut rng);
    check(vec![a, b, w, bias], |g, v| {
        let c = g.concat_channels(&[v[0], v[1]])?;
        let u = g.upsample2x(c)?;
        let t = g.to_tokens(u)?;
        let y = g.linear(t, v[2], Some(v[3]))?;
        project(g, y, 13)
    });
}

#[test]
fn channel_slice_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[2, 5, 2, 2], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    check(vec![x, b], |g, v| {
        let s = g.slice_channels(v[0], 1, 3)?;
        let y = g.add_bias(s, v[1])?;
        project(g, y, 14)
    });
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[3, 4], &mut rng);
    let target = rand_tensor(&[3, 4], &mut rng);
    let h = rand_tensor(&[3, 4], &mut rng);
    check(vec![x], move |g, v| {
        let l1 = g.mean_abs_diff(v[0], target.clone())?;
        let l2 = g.mean_squared_diff(v[0], target.clone())?;
        let lc = g.cosine_distill(v[0], h.clone(), 1e-8)?;
        let s = g.add(l1, l2)?;
        g.add(s, lc)
    });
}

#[test]
fn zero_scale_branch_leaves_other_gradients_bitwise_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[4, 3], &mut rng);
    let h = rand_tensor(&[4, 3], &mut rng);
    let target = rand_tensor(&[4, 3], &mut rng);

    let mut g1 = Graph::new();
    let v1 = g1.variable(x.clone());
    let l1 = g1.mean_abs_diff(v1, target.clone()).unwrap();
    let grad1 = g1.backward(l1).unwrap().wrt(v1).unwrap().clone();

    let mut g2 = Graph::new();
    let v2 = g2.variable(x);
    let lp = g2.mean_abs_diff(v2, target).unwrap();
    let ld = g2.cosine_distill(v2, h, 1e-8).unwrap();
    let zero = g2.scale(ld, 0.0);
    let total = g2.add(lp, zero).unwrap();
    let grad2 = g2.backward(total).unwrap().wrt(v2).unwrap().clone();

    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&grad1), bits(&grad2));
}
