use std::rc::Rc;

use lipcycle_grad::nn::{alibi_bias, Conv1d, DepthwiseConv1d, LayerNorm, Linear};
use lipcycle_grad::{Graph, Mat, ParamSet, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

/// Compares the tape gradient of `f` with central differences for every input.
fn check(inputs: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |vals: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.input(v.clone())).collect();
        let loss = f(&mut g, &vars);
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(&inputs);
    let grads = g.backward(loss);
    let h = 1e-6;
    for (k, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(inp.dim()));
        for idx in 0..inp.len() {
            let (r, c) = (idx / inp.ncols(), idx % inp.ncols());
            let mut plus = inputs.clone();
            plus[k][[r, c]] += h;
            let mut minus = inputs.clone();
            minus[k][[r, c]] -= h;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-5 || (a - numeric).abs() < 1e-8,
                "input {k} entry ({r},{c}): analytic {a} numeric {numeric}"
            );
        }
    }
}

fn weights(g: &mut Graph, rng: &mut ChaCha8Rng, r: usize, c: usize) -> Var {
    g.constant(randn(rng, r, c))
}

#[test]
fn elementwise_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, 3, 4);
    let b = randn(&mut rng, 4, 2);
    let c = randn(&mut rng, 3, 2);
    check(vec![a, b, c], |g, v| {
        let m = g.matmul(v[0], v[1]);
        let p = g.mul(m, v[2]);
        let s = g.sub(p, v[2]);
        let t = g.gelu(s);
        let u = g.silu(t);
        let w = g.add(u, m);
        let z = g.scale(w, 0.7);
        let q = g.mul(z, z);
        g.sum(q)
    });
}

#[test]
fn row_broadcasts_and_glu() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, 5, 6);
    let r1 = randn(&mut rng, 1, 6);
    let r2 = randn(&mut rng, 1, 3);
    check(vec![a, r1, r2], |g, v| {
        let x = g.add_row(v[0], v[1]);
        let y = g.mul_row(x, v[1]);
        let z = g.glu(y);
        let w = g.mul_row(z, v[2]);
        let rep = g.repeat_row(v[2], 5);
        let o = g.add(w, rep);
        let sq = g.mul(o, o);
        g.mean(sq)
    });
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, 4, 7);
    let gam = randn(&mut rng, 1, 7);
    let bet = randn(&mut rng, 1, 7);
    check(vec![x, gam, bet], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
        let w = weights(g, &mut ChaCha8Rng::seed_from_u64(9), 4, 7);
        let p = g.mul(y, w);
        g.sum(p)
    });
}

#[test]
fn attention_with_alibi_and_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = randn(&mut rng, 5, 8);
    let k = randn(&mut rng, 6, 8);
    let v = randn(&mut rng, 6, 8);
    check(vec![q.clone(), k.clone(), v.clone()], |g, vs| {
        let bias: Vec<Mat> = alibi_bias(6, 2)
            .into_iter()
            .map(|b| b.slice(ndarray::s![..5, ..]).to_owned())
            .collect();
        let a = g.attention(vs[0], vs[1], vs[2], 2, &bias);
        let w = weights(g, &mut ChaCha8Rng::seed_from_u64(8), 5, 8);
        let p = g.mul(a, w);
        g.sum(p)
    });
    // Masked keys: query i sees key i and the last key only.
    check(vec![q, k, v], |g, vs| {
        let mask = Mat::from_shape_fn((5, 6), |(i, j)| {
            if j == i || j == 5 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let a = g.attention(vs[0], vs[1], vs[2], 4, &[mask]);
        let w = weights(g, &mut ChaCha8Rng::seed_from_u64(7), 5, 8);
        let p = g.mul(a, w);
        g.sum(p)
    });
}

#[test]
fn gathers_and_concats() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = randn(&mut rng, 4, 3);
    let b = randn(&mut rng, 2, 3);
    check(vec![a, b], |g, v| {
        let idx: Rc<[Option<usize>]> = Rc::from(vec![Some(0), None, Some(3), Some(3), Some(1)]);
        let r = g.gather_rows(v[0], idx);
        let c = g.concat_rows(&[r, v[1]]);
        let cols: Rc<[usize]> = Rc::from(vec![2, 0, 2]);
        let s = g.gather_cols(c, cols);
        let cc = g.concat_cols(&[s, c]);
        let sq = g.mul(cc, cc);
        g.sum(sq)
    });
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = randn(&mut rng, 4, 5);
    let b = randn(&mut rng, 4, 5);
    check(vec![a, b], |g, v| {
        let m = g.mse(v[0], v[1]);
        let l = g.l1(v[0], v[1]);
        let ce = g.cross_entropy(v[0], Rc::from(vec![0, 4, 2, 2]));
        let s = g.add(m, l);
        let s2 = g.scale(ce, 3.0);
        g.add(s, s2)
    });
}

#[test]
fn conv_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    let conv = Conv1d::new(&mut ps, "c", 3, 4, 4, 2, 1, &mut rng);
    let dw = DepthwiseConv1d::new(&mut ps, "d", 4, 3, &mut rng);
    let ln = LayerNorm::new(&mut ps, "ln", 4);
    let lin = Linear::new(&mut ps, "l", 4, 2, &mut rng);
    let x = randn(&mut rng, 8, 3);
    check(vec![x], |g, v| {
        let p = ps.bind(g, false);
        let h = conv.forward(g, &p, v[0]);
        assert_eq!(g.shape(h), (4, 4));
        let h = dw.forward(g, &p, h);
        let h = ln.forward(g, &p, h);
        let h = lin.forward(g, &p, h);
        let sq = g.mul(h, h);
        g.sum(sq)
    });
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.constant(Mat::from_elem((2, 2), 1.0));
    let b = g.input(Mat::from_elem((2, 2), 2.0));
    let c = g.mul(a, b);
    let s = g.sum(c);
    let grads = g.backward(s);
    assert!(grads.get(a).is_none());
    assert_eq!(grads.get(b).unwrap(), &Mat::from_elem((2, 2), 1.0));
}
