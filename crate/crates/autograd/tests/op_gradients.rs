use facedepth_autograd::gradcheck::{numerical_input_grad, relative_error};
use facedepth_autograd::nn::{im2col_table, Conv2d, LayerNorm};
use facedepth_autograd::params::normal_tensor;
use facedepth_autograd::tensor::tensor;
use facedepth_autograd::{Graph, ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-7;

/// Check d(sum(w * f(x)))/dx against central differences, with `w` a fixed
/// random weighting so that every output element matters.
fn check_unary(shape: &[usize], seed: u64, f: impl Fn(&mut Graph, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = normal_tensor(&mut rng, shape, 1.0);
    let eval = |g: &mut Graph, x: Var| -> Var {
        let y = f(g, x);
        let wshape = g.shape(y).to_vec();
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let w = g.constant(normal_tensor(&mut wrng, &wshape, 1.0));
        let p = g.mul(y, w);
        g.sum_all(p)
    };
    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let loss = eval(&mut g, x);
    let grads = g.backward(loss);
    let analytic = grads.get(x).expect("grad").clone();
    let numeric = numerical_input_grad(&x0, STEP, |t| {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let l = eval(&mut g, x);
        g.scalar(l)
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    check_unary(&[3, 4], 1, |g, x| g.gelu(x));
    check_unary(&[3, 4], 2, |g, x| g.sigmoid(x));
    check_unary(&[3, 4], 3, |g, x| g.relu(x));
    check_unary(&[3, 4], 4, |g, x| g.abs(x));
    check_unary(&[3, 4], 5, |g, x| {
        let y = g.mul(x, x);
        let z = g.add_scalar(y, 1.0);
        g.div(x, z)
    });
}

#[test]
fn broadcasting_binary_ops() {
    check_unary(&[2, 3, 4], 6, |g, x| {
        let m = g.mean_axis(x, 2, true);
        let c = g.sub(x, m);
        let v = g.sum_axis(c, 1, true);
        g.mul(c, v)
    });
}

#[test]
fn matmul_family() {
    check_unary(&[2, 3, 4], 7, |g, x| {
        let w = g.constant(tensor(&[4, 2], vec![0.3, -0.2, 1.1, 0.5, -0.7, 0.9, 0.4, 0.1]));
        g.matmul(x, w)
    });
    check_unary(&[2, 3, 4], 8, |g, x| {
        let xt = g.transpose_last(x);
        g.bmm(x, xt)
    });
}

#[test]
fn softmax_and_layer_norm() {
    check_unary(&[2, 5], 9, |g, x| g.softmax_last(x));
    check_unary(&[3, 6], 10, |g, x| g.layer_norm_last(x, 1e-6));
}

#[test]
fn shape_ops() {
    check_unary(&[2, 3, 4], 11, |g, x| g.permute(x, &[2, 0, 1]));
    check_unary(&[2, 3, 4], 12, |g, x| {
        let y = g.reshape(x, &[6, 4]);
        let z = g.scale(x, 2.0);
        let z = g.reshape(z, &[6, 4]);
        g.concat(&[y, z], 1)
    });
}

#[test]
fn cross_entropy() {
    check_unary(&[4, 3], 13, |g, x| g.cross_entropy(x, &[0, 2, 1, 1]));
}

#[test]
fn gather_with_padding() {
    let table = im2col_table(1, 3, 3, 2, 3, 1, 1);
    let table: std::sync::Arc<[u32]> = table.into();
    check_unary(&[1, 3, 3, 2], 14, move |g, x| g.gather(x, table.clone(), &[1, 3, 3, 18]));
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut g = Graph::new();
    let x = g.constant(normal_tensor(&mut rng, &[7, 9], 10.0));
    let y = g.softmax_last(x);
    for row in g.value(y).rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, &mut rng).unwrap();
    let x = normal_tensor(&mut rng, &[2, 5, 5, 2], 1.0);
    let mut s = Session::inference(&store);
    let xv = s.input(x.clone());
    let y = conv.forward(&mut s, xv);
    let out = s.value(y).clone();
    assert_eq!(out.shape(), &[2, 3, 3, 3]);
    let w = store.get(conv.weight);
    for b in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x[[b, iy as usize, ix as usize, ci]] * w[[(ky * 3 + kx) * 2 + ci, co]];
                            }
                        }
                    }
                    assert!((out[[b, oy, ox, co]] - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn layer_norm_params_receive_gradients() {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    let mut s = Session::train(&store);
    let x = s.input(tensor(&[2, 4], vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.0, 2.0, 2.0]));
    let y = ln.forward(&mut s, x);
    let w = s.input(Tensor::from_elem(ndarray::IxDyn(&[2, 4]), 0.5));
    let p = s.mul(y, w);
    let loss = s.sum_all(p);
    let grads = s.param_grads(loss);
    assert!(grads.get(ln.gamma).is_some());
    let gb = grads.get(ln.beta).unwrap();
    assert!(gb.iter().all(|&v| (v - 1.0).abs() < 1e-12));
}
