use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn leaf(v: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::leaf(v, shape).unwrap()
}

/// Central differences of `f` at `x`.
fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn grad_of_sum_is_ones() {
    let x = leaf(vec![1.0, -2.0, 3.0, 0.5], &[2, 2]);
    let g = grad(&x.sum().unwrap(), &[&x], GradOptions::default()).unwrap();
    assert_eq!(g[0].to_vec(), vec![1.0; 4]);
    assert_eq!(g[0].shape(), &[2, 2]);
}

#[test]
fn grad_of_square() {
    let x = leaf(vec![3.0], &[1]);
    let y = x.mul(&x).unwrap().sum().unwrap();
    let g = grad(&y, &[&x], GradOptions::default()).unwrap();
    assert_eq!(g[0].to_vec(), vec![6.0]);
}

#[test]
fn grad_rejects_non_scalar_output() {
    let x = leaf(vec![1.0, 2.0], &[2]);
    let y = x.square().unwrap();
    assert!(matches!(
        grad(&y, &[&x], GradOptions::default()),
        Err(Error::NonScalarOutput(_))
    ));
}

#[test]
fn disconnected_input_is_an_error_unless_allowed() {
    let x = leaf(vec![1.0], &[1]);
    let z = leaf(vec![2.0], &[1]);
    let y = x.square().unwrap().sum().unwrap();
    assert!(matches!(
        grad(&y, &[&x, &z], GradOptions::default()),
        Err(Error::Disconnected(1))
    ));
    let g = grad(&y, &[&x, &z], GradOptions::default().allow_unused()).unwrap();
    assert_eq!(g[1].to_vec(), vec![0.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let x = Tensor::<f64>::from_vec(vec![-1.0], &[1]).unwrap();
    assert!(matches!(x.ln(), Err(Error::NonFinite(_))));
    let big = Tensor::<f64>::from_vec(vec![1e300], &[1]).unwrap();
    assert!(big.square().is_err());
}

#[test]
fn no_grad_disables_recording() {
    let x = leaf(vec![1.0, 2.0], &[2]);
    let y = no_grad(|| x.square().unwrap());
    assert!(!y.requires_grad());
    assert!(x.square().unwrap().requires_grad());
}

#[test]
fn shared_subexpressions_accumulate() {
    // y = x*x + x*x*x  ->  dy/dx = 2x + 3x^2
    let x = leaf(vec![2.0], &[1]);
    let x2 = x.mul(&x).unwrap();
    let y = x2.add(&x2.mul(&x).unwrap()).unwrap().sum().unwrap();
    let g = grad(&y, &[&x], GradOptions::default()).unwrap();
    assert_eq!(g[0].to_vec(), vec![16.0]);
}

fn direct_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let r = (i * stride + di) as isize - pad as isize;
                                let q = (j * stride + dj) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                s += x[((b * c + ic) * h + r as usize) * wd + q as usize]
                                    * w[((oc * c + ic) * k + di) * k + dj];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    (out, [n, o, ho, wo])
}

#[test]
fn conv_of_ones() {
    let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
    let y = conv2d(&x, &w, None, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.to_vec(), vec![9.0]);

    let y = conv2d(&x, &w, None, 2, 1).unwrap();
    let (expect, shape) = direct_conv(&[1.0; 9], [1, 1, 3, 3], &[1.0; 9], [1, 1, 3, 3], 2, 1);
    assert_eq!(y.shape(), &shape);
    assert_eq!(y.to_vec(), expect);
    assert_eq!(expect, vec![4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (3, 0, 3), (2, 0, 2), (1, 0, 1), (4, 0, 4)] {
        let xs = [3, 2, 9, 8];
        let ws = [4, 2, k, k];
        let xv = rand_vec(&mut rng, xs.iter().product(), 1.0);
        let wv = rand_vec(&mut rng, ws.iter().product(), 1.0);
        let x = Tensor::from_vec(xv.clone(), &xs).unwrap();
        let w = Tensor::from_vec(wv.clone(), &ws).unwrap();
        let y = conv2d(&x, &w, None, stride, pad).unwrap();
        let (expect, shape) = direct_conv(&xv, xs, &wv, ws, stride, pad);
        assert_eq!(y.shape(), &shape);
        assert!(max_rel_err(&y.to_vec(), &expect) < 1e-12, "stride {stride} pad {pad} k {k}");
    }
}

#[test]
fn conv_bias_broadcasts_per_channel() {
    let x = Tensor::<f64>::zeros(&[2, 1, 4, 4]);
    let w = Tensor::<f64>::ones(&[3, 1, 3, 3]);
    let b = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, ((i / 16) % 3 + 1) as f64);
    }
}

#[test]
fn conv_is_linear_in_input() {
    // Small integers keep every partial sum exact.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ints = |rng: &mut ChaCha8Rng, n| (0..n).map(|_| rng.random_range(-8..=8) as f64).collect::<Vec<_>>();
    let x = Tensor::from_vec(ints(&mut rng, 2 * 3 * 6 * 6), &[2, 3, 6, 6]).unwrap();
    let d = Tensor::from_vec(ints(&mut rng, 2 * 3 * 6 * 6), &[2, 3, 6, 6]).unwrap();
    let w = Tensor::from_vec(ints(&mut rng, 4 * 3 * 3 * 3), &[4, 3, 3, 3]).unwrap();
    let lhs = conv2d(&x.add(&d).unwrap(), &w, None, 2, 1)
        .unwrap()
        .sub(&conv2d(&x, &w, None, 2, 1).unwrap())
        .unwrap();
    let rhs = conv2d(&d, &w, None, 2, 1).unwrap();
    assert_eq!(lhs.to_vec(), rhs.to_vec());
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::<f64>::ones(&[1, 2, 3, 3]);
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
    assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Shape { .. })));
    let w = Tensor::<f64>::ones(&[1, 2, 5, 5]);
    assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Shape { .. })));
    let w = Tensor::<f64>::ones(&[1, 2, 3, 3]);
    assert!(conv2d(&x, &w, None, 0, 0).is_err());
}

#[test]
fn softplus_values() {
    let sp = |x: f64, a: f64| {
        Tensor::from_vec(vec![x], &[1]).unwrap().softplus_param(a).unwrap().to_vec()[0]
    };
    assert!((sp(0.0, 1.0) - 2f64.ln()).abs() < 1e-12);
    assert!((sp(0.0, 2.0) - 2f64.ln() / 2.0).abs() < 1e-12);
    assert!((sp(100.0, 2.0) - 100.0).abs() < 1e-9);
    assert!(sp(-100.0, 2.0) >= 0.0);
    let x = Tensor::<f64>::from_vec(vec![0.0], &[1]).unwrap();
    assert!(x.softplus_param(0.0).is_err());
    assert!(x.softplus_param(-1.0).is_err());
}

#[test]
fn cross_entropy_values() {
    let l = Tensor::<f64>::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
    assert!((cross_entropy(&l, &[1]).unwrap().item().unwrap() - 2f64.ln()).abs() < 1e-15);

    let l = Tensor::<f64>::from_vec(vec![1000.0, 0.0], &[1, 2]).unwrap();
    let v = cross_entropy(&l, &[0]).unwrap().item().unwrap();
    assert!(v.abs() < 1e-12);

    assert!(cross_entropy(&l, &[2]).is_err());
    assert!(cross_entropy(&l, &[0, 1]).is_err());
}

#[test]
fn cross_entropy_matches_direct_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = rand_vec(&mut rng, 12, 3.0);
    let labels = [2, 0, 3];
    let mut expect = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &v[i * 4..(i + 1) * 4];
        let z: f64 = row.iter().map(|r| r.exp()).sum();
        expect -= (row[y].exp() / z).ln();
    }
    expect /= 3.0;
    let got = cross_entropy(&Tensor::from_vec(v.clone(), &[3, 4]).unwrap(), &labels)
        .unwrap()
        .item()
        .unwrap();
    assert!((got - expect).abs() < 1e-10);
    let per = cross_entropy_per_example(&Tensor::from_vec(v, &[3, 4]).unwrap(), &labels).unwrap();
    assert!((per.iter().sum::<f64>() / 3.0 - expect).abs() < 1e-10);
}

#[test]
fn l2_norm_values() {
    let x = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2]).unwrap();
    assert_eq!(l2_norm(&x).unwrap().item().unwrap(), 5.0);

    let z = leaf(vec![0.0; 5], &[5]);
    let n = l2_norm(&z).unwrap();
    assert_eq!(n.item().unwrap(), 0.0);
    let g = grad(&n, &[&z], GradOptions::default()).unwrap();
    assert_eq!(g[0].to_vec(), vec![0.0; 5]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = rand_vec(&mut rng, 37, 10.0);
    let mut s = 0.0;
    for x in &v {
        s += x * x;
    }
    let expect = s.sqrt();
    let got = l2_norm(&Tensor::from_vec(v, &[37]).unwrap()).unwrap().item().unwrap();
    assert!((got - expect).abs() / expect < 1e-12);
}

#[test]
fn cosine_similarity_rows_values() {
    let a = Tensor::<f64>::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0], &[3, 2]).unwrap();
    let b = Tensor::<f64>::from_vec(vec![2.0, 0.0, -1.0, -1.0, 1.0, 0.0], &[3, 2]).unwrap();
    let c = cosine_similarity_rows(&a, &b).unwrap().to_vec();
    assert!((c[0] - 1.0).abs() < 1e-15);
    assert!((c[1] + 1.0).abs() < 1e-15);
    assert_eq!(c[2], 0.0);
}

#[test]
fn batch_norm_train_normalises() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_vec(rand_vec(&mut rng, 4 * 3 * 2 * 2, 5.0), &[4, 3, 2, 2]).unwrap();
    let gamma = Tensor::ones(&[3]);
    let beta = Tensor::zeros(&[3]);
    let (y, stats) = batch_norm_train(&x, &gamma, &beta, 0.0).unwrap();
    let d = y.data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..4).map(move |p| (n * 3 + c) * 4 + p))
            .map(|i| d[i])
            .collect();
        let m = vals.iter().sum::<f64>() / 16.0;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-10);
    }
    assert_eq!(stats.mean.len(), 3);

    let rm = Tensor::from_vec(stats.mean.clone(), &[3]).unwrap();
    let rv = Tensor::from_vec(stats.var_unbiased.clone(), &[3]).unwrap();
    let e1 = batch_norm_eval(&x, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
    let e2 = batch_norm_eval(&x, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
    assert_eq!(e1.to_vec(), e2.to_vec());
}

#[test]
fn pooling_values() {
    let x = Tensor::<f64>::from_vec((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]).unwrap();
    let y = avg_pool2d(&x, 2, 2).unwrap();
    assert_eq!(y.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
    let g = global_avg_pool(&x).unwrap();
    assert_eq!(g.shape(), &[1, 1]);
    assert_eq!(g.to_vec(), vec![7.5]);
    let a = adaptive_avg_pool2d(&x, 2, 2).unwrap();
    assert_eq!(a.to_vec(), y.to_vec());
}

#[test]
fn sign_is_detached_with_zero_at_zero() {
    let x = leaf(vec![-2.0, 0.0, 3.0], &[3]);
    let s = x.sign();
    assert!(!s.requires_grad());
    assert_eq!(s.to_vec(), vec![-1.0, 0.0, 1.0]);
}

struct Net {
    x: Tensor<f64>,
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    labels: Vec<usize>,
    act: UnaryKind,
}

impl Net {
    fn new(seed: u64, act: UnaryKind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Net {
            x: leaf(rand_vec(&mut rng, 3 * 4, 1.0), &[3, 4]),
            w1: leaf(rand_vec(&mut rng, 4 * 5, 1.0), &[4, 5]),
            b1: leaf(rand_vec(&mut rng, 5, 0.5), &[1, 5]),
            w2: leaf(rand_vec(&mut rng, 5 * 3, 1.0), &[5, 3]),
            labels: vec![0, 2, 1],
            act,
        }
    }

    fn loss(&self, x: &Tensor<f64>, w1: &Tensor<f64>, b1: &Tensor<f64>, w2: &Tensor<f64>) -> Tensor<f64> {
        let h = x.matmul(w1).unwrap().add(b1).unwrap().unary(self.act).unwrap();
        cross_entropy(&h.matmul(w2).unwrap(), &self.labels).unwrap()
    }

    fn params(&self) -> [&Tensor<f64>; 4] {
        [&self.x, &self.w1, &self.b1, &self.w2]
    }
}

fn replaced(params: [&Tensor<f64>; 4], which: usize, v: &[f64]) -> Vec<Tensor<f64>> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == which {
                Tensor::from_vec(v.to_vec(), p.shape()).unwrap()
            } else {
                p.detach()
            }
        })
        .collect()
}

#[test]
fn two_layer_net_matches_finite_differences() {
    for (seed, act) in [
        (1, UnaryKind::Gelu),
        (2, UnaryKind::Silu),
        (3, UnaryKind::Softplus { alpha: 2.0 }),
        (4, UnaryKind::Elu),
        (5, UnaryKind::Relu),
    ] {
        let net = Net::new(seed, act);
        let p = net.params();
        let l = net.loss(p[0], p[1], p[2], p[3]);
        let g = grad(&l, &p, GradOptions::default()).unwrap();
        for which in 0..4 {
            let num = numeric_grad(p[which].data(), 1e-4, |v| {
                let q = replaced(p, which, v);
                net.loss(&q[0], &q[1], &q[2], &q[3]).item().unwrap()
            });
            let err = max_rel_err(g[which].data(), &num);
            assert!(err < 1e-4, "{act:?} param {which}: {err}");
        }
    }
}

/// conv -> batch norm -> activation -> adaptive pool -> linear -> cross entropy.
fn conv_net_loss(x: &Tensor<f64>, w: &Tensor<f64>, gamma: &Tensor<f64>, fc: &Tensor<f64>) -> Tensor<f64> {
    let h = conv2d(x, w, None, 2, 1).unwrap();
    let h = batch_norm_train(&h, gamma, &Tensor::zeros(&[3]), 1e-5).unwrap().0;
    let h = h.softplus_param(2.0).unwrap();
    let h = adaptive_avg_pool2d(&h, 2, 2).unwrap().flatten().unwrap();
    cross_entropy(&h.matmul(fc).unwrap(), &[1, 0, 3]).unwrap()
}

fn conv_net() -> [Tensor<f64>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    [
        leaf(rand_vec(&mut rng, 3 * 2 * 6 * 6, 1.0), &[3, 2, 6, 6]),
        leaf(rand_vec(&mut rng, 3 * 2 * 3 * 3, 0.5), &[3, 2, 3, 3]),
        leaf(rand_vec(&mut rng, 3, 1.0).iter().map(|v| v + 1.5).collect(), &[3]),
        leaf(rand_vec(&mut rng, 3 * 2 * 2 * 4, 1.0), &[12, 4]),
    ]
}

#[test]
fn conv_net_matches_finite_differences() {
    let p = conv_net();
    let refs = [&p[0], &p[1], &p[2], &p[3]];
    let l = conv_net_loss(refs[0], refs[1], refs[2], refs[3]);
    let g = grad(&l, &refs, GradOptions::default()).unwrap();
    for which in 0..4 {
        let num = numeric_grad(refs[which].data(), 1e-4, |v| {
            let q = replaced(refs, which, v);
            conv_net_loss(&q[0], &q[1], &q[2], &q[3]).item().unwrap()
        });
        let err = max_rel_err(g[which].data(), &num);
        assert!(err < 1e-4, "param {which}: {err}");
    }
}

/// `||grad_x L(x)||_2` evaluated without a graph.
fn input_grad_norm(p: &[Tensor<f64>; 4], x: &[f64]) -> f64 {
    let x = leaf(x.to_vec(), p[0].shape());
    let l = conv_net_loss(&x, &p[1].detach(), &p[2].detach(), &p[3].detach());
    let g = grad(&l, &[&x], GradOptions::default()).unwrap();
    l2_norm(&g[0]).unwrap().item().unwrap()
}

#[test]
fn second_order_matches_finite_differences() {
    let p = conv_net();
    let l = conv_net_loss(&p[0], &p[1], &p[2], &p[3]);
    let gx = grad(&l, &[&p[0]], GradOptions::create_graph()).unwrap();
    assert!(gx[0].requires_grad());
    let n = l2_norm(&gx[0]).unwrap();
    let h = grad(&n, &[&p[0], &p[1]], GradOptions::create_graph()).unwrap();
    let num_x = numeric_grad(p[0].data(), 1e-4, |v| input_grad_norm(&p, v));
    let err = max_rel_err(h[0].data(), &num_x);
    assert!(err < 1e-3, "d/dx: {err}");

    let num_w = numeric_grad(p[1].data(), 1e-4, |v| {
        let q = [p[0].detach(), Tensor::from_vec(v.to_vec(), p[1].shape()).unwrap(), p[2].detach(), p[3].detach()];
        let x = leaf(q[0].to_vec(), q[0].shape());
        let l = conv_net_loss(&x, &q[1], &q[2], &q[3]);
        let g = grad(&l, &[&x], GradOptions::default()).unwrap();
        l2_norm(&g[0]).unwrap().item().unwrap()
    });
    let err = max_rel_err(h[1].data(), &num_w);
    assert!(err < 1e-3, "d/dw: {err}");
}

#[test]
fn third_order_is_rejected() {
    let x = leaf(vec![0.3, -0.2], &[2]);
    let y = x.gelu().unwrap().sum().unwrap();
    let g1 = grad(&y, &[&x], GradOptions::create_graph()).unwrap();
    let g2 = grad(&g1[0].sum().unwrap(), &[&x], GradOptions::create_graph()).unwrap();
    let r = grad(&g2[0].sum().unwrap(), &[&x], GradOptions::default());
    assert!(matches!(r, Err(Error::HigherOrderUnsupported(_))));
}

#[test]
fn batch_gradient_is_sum_of_example_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let xv = rand_vec(&mut rng, 4 * 2 * 5 * 5, 1.0);
    let w = leaf(rand_vec(&mut rng, 3 * 2 * 3 * 3, 0.5), &[3, 2, 3, 3]);
    let fc = leaf(rand_vec(&mut rng, 27 * 4, 0.5), &[27, 4]);
    let labels = [0, 3, 1, 2];
    let loss = |x: &Tensor<f64>, y: &[usize]| {
        let h = conv2d(x, &w, None, 2, 1).unwrap().silu().unwrap().flatten().unwrap();
        cross_entropy_sum(&h.matmul(&fc).unwrap(), y).unwrap()
    };
    let x = Tensor::from_vec(xv.clone(), &[4, 2, 5, 5]).unwrap();
    let total = grad(&loss(&x, &labels), &[&w, &fc], GradOptions::default()).unwrap();
    let mut acc_w = vec![0.0; w.numel()];
    let mut acc_fc = vec![0.0; fc.numel()];
    for i in 0..4 {
        let xi = Tensor::from_vec(xv[i * 50..(i + 1) * 50].to_vec(), &[1, 2, 5, 5]).unwrap();
        let g = grad(&loss(&xi, &labels[i..=i]), &[&w, &fc], GradOptions::default()).unwrap();
        acc_w.iter_mut().zip(g[0].data()).for_each(|(a, b)| *a += b);
        acc_fc.iter_mut().zip(g[1].data()).for_each(|(a, b)| *a += b);
    }
    assert!(max_rel_err(total[0].data(), &acc_w) < 1e-12);
    assert!(max_rel_err(total[1].data(), &acc_fc) < 1e-12);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::from_vec(rand_vec(&mut rng, 20 * 3 * 8 * 8, 1.0), &[20, 3, 8, 8]).unwrap();
    let w = leaf(rand_vec(&mut rng, 4 * 3 * 3 * 3, 0.5), &[4, 3, 3, 3]);
    let run = || {
        let y = conv2d(&x, &w, None, 1, 1).unwrap().square().unwrap().sum().unwrap();
        grad(&y, &[&w], GradOptions::default()).unwrap()[0].to_vec()
    };
    let a = run();
    let b = crate::par::sequential(run);
    assert_eq!(a, b);
}

#[test]
fn graph_stats_count_higher_order_nodes() {
    let x = leaf(vec![0.5, 1.5], &[2]);
    let before = GraphStats::current();
    let y = x.softplus_param(2.0).unwrap().sum().unwrap();
    let _ = grad(&y, &[&x], GradOptions::default()).unwrap();
    let first = GraphStats::current().since(before);
    assert_eq!(first.higher_order_nodes, 0);
    let before = GraphStats::current();
    let y = x.softplus_param(2.0).unwrap().sum().unwrap();
    let _ = grad(&y, &[&x], GradOptions::create_graph()).unwrap();
    let second = GraphStats::current().since(before);
    assert!(second.higher_order_nodes > 0);
}

proptest! {
    #[test]
    fn sign_in_unit_set_and_scale_invariant(
        v in prop::collection::vec(-1e3f64..1e3, 1..40),
        c in 1e-3f64..1e3,
    ) {
        let x = Tensor::from_vec(v.clone(), &[v.len()]).unwrap();
        let s = x.sign().to_vec();
        prop_assert!(s.iter().all(|&t| t == -1.0 || t == 0.0 || t == 1.0));
        let scaled = x.scale(c).unwrap().sign().to_vec();
        prop_assert_eq!(s, scaled);
    }

    #[test]
    fn softplus_gap_bounds(u in -30f64..30.0, log_a in (0.1f64).ln()..(10f64).ln()) {
        let a = log_a.exp();
        let x = u / a;
        let y = Tensor::from_vec(vec![x], &[1]).unwrap().softplus_param(a).unwrap().to_vec()[0];
        let gap = y - x.max(0.0);
        prop_assert!(gap > 0.0);
        prop_assert!(gap <= 2f64.ln() / a * (1.0 + 1e-12));
    }

    #[test]
    fn broadcast_add_grad_sums_over_broadcast_axes(rows in 1usize..5, cols in 1usize..5) {
        let a = leaf(vec![1.0; rows * cols], &[rows, cols]);
        let b = leaf(vec![2.0; cols], &[1, cols]);
        let y = a.add(&b).unwrap().sum().unwrap();
        let g = grad(&y, &[&a, &b], GradOptions::default()).unwrap();
        prop_assert_eq!(g[1].to_vec(), vec![rows as f64; cols]);
        prop_assert_eq!(g[0].to_vec(), vec![1.0; rows * cols]);
    }
}
