use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snr_core::diffcore::{self, grad_check, Graph, Tensor, Var, NORM_EPS};
use snr_core::Result;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts a tensor-valued op with a fixed random tensor so every output
/// coordinate contributes a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.value(y).shape(), 1.0, &mut rng(seed ^ 0xabcdef));
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    Ok(g.sum_all(prod))
}

/// Keeps values away from the relu kink so finite differences stay smooth.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

fn check_all<F>(name: &str, step: f64, make: F)
where
    F: Fn(u64) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>),
{
    for seed in 0..SEEDS {
        let (inputs, op) = make(seed);
        let report = grad_check(|g, v| op(g, v), &inputs, step, TOL).unwrap();
        assert!(report.passed, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn instance_norm_two_point_example() {
    let f = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
    let one = Tensor::full(&[1], 1.0);
    let zero = Tensor::zeros(&[1]);
    let y = diffcore::instance_norm(&f, &one, &zero, 1e-12).unwrap();
    let expected = [-1.0, 1.0, -1.0, 1.0];
    for (a, b) in y.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-9, "{y:?}");
    }
}

#[test]
fn instance_norm_constant_channel_gives_beta() {
    let mut f = Tensor::zeros(&[2, 3, 2, 2]);
    for (i, v) in f.data_mut().iter_mut().enumerate() {
        *v = (i / 4) as f64 * 1.5 - 2.0;
    }
    let gamma = Tensor::new(&[3], vec![2.0, -1.0, 0.5]).unwrap();
    let beta = Tensor::new(&[3], vec![0.3, -0.7, 4.0]).unwrap();
    let y = diffcore::instance_norm(&f, &gamma, &beta, NORM_EPS).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, beta.data()[(i / 4) % 3]);
    }
}

#[test]
fn instance_norm_output_statistics() {
    let mut r = rng(7);
    let f = Tensor::randn(&[1, 3, 4, 4], 2.0, &mut r).map(|v| v + 3.0);
    let y = diffcore::instance_norm(&f, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), NORM_EPS)
        .unwrap();
    for chunk in y.data().chunks(16) {
        let mean = chunk.iter().sum::<f64>() / 16.0;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-3);
    }
}

#[test]
fn instance_norm_rejects_bad_input() {
    let f = Tensor::zeros(&[1, 2, 0, 3]);
    let p = Tensor::zeros(&[2]);
    assert!(diffcore::instance_norm(&f, &p, &p, NORM_EPS).is_err());
    let f = Tensor::zeros(&[1, 2, 2, 2]);
    assert!(diffcore::instance_norm(&f, &Tensor::zeros(&[3]), &p, NORM_EPS).is_err());
    assert!(diffcore::instance_norm(&f, &p, &p, 0.0).is_err());
}

#[test]
fn global_avg_pool_examples() {
    let c = Tensor::full(&[1, 2, 3, 3], 7.0);
    assert_eq!(diffcore::global_avg_pool(&c).unwrap().data(), &[7.0, 7.0]);
    let f = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(diffcore::global_avg_pool(&f).unwrap().data(), &[2.5]);

    let x = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng(3));
    let pooled = diffcore::global_avg_pool(&x).unwrap();
    assert_eq!(pooled.shape(), &[2, 4]);
    for s in 0..2 {
        for k in 0..4 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += x.data()[((s * 4 + k) * 3 + i) * 3 + j];
                }
            }
            assert!((pooled.data()[s * 4 + k] - acc / 9.0).abs() < 1e-12);
        }
    }
    assert!(diffcore::global_avg_pool(&Tensor::zeros(&[1, 1, 0, 2])).is_err());
}

#[test]
fn softplus_derivative_is_sigmoid() {
    let mut g = Graph::new();
    let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.75).collect();
    let x = g.input(Tensor::new(&[xs.len()], xs.clone()).unwrap());
    let y = g.softplus(x);
    let s = g.sum_all(y);
    let grads = g.backward(s).unwrap();
    for (d, x) in grads.get(x).unwrap().data().iter().zip(&xs) {
        assert!((d - diffcore::sigmoid(*x)).abs() < 1e-10);
    }
}

#[test]
fn grad_instance_norm_sum_of_squares() {
    check_all("instance_norm", 1e-4, |seed| {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r),
            Tensor::uniform(&[2], 0.5, 1.5, &mut r),
            Tensor::randn(&[2], 0.5, &mut r),
        ];
        (
            inputs,
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.instance_norm(v[0], v[1], v[2], NORM_EPS)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
        )
    });
}

#[test]
fn grad_batch_norm_train_and_frozen() {
    check_all("batch_norm", 1e-4, |seed| {
        let mut r = rng(seed);
        let rank4 = seed % 2 == 0;
        let x = if rank4 {
            Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r)
        } else {
            Tensor::randn(&[5, 3], 1.0, &mut r)
        };
        let c = x.shape()[1];
        let inputs = vec![
            x,
            Tensor::uniform(&[c], 0.5, 1.5, &mut r),
            Tensor::randn(&[c], 0.5, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], NORM_EPS)?;
                project(g, y, seed)
            }),
        )
    });
    check_all("batch_norm_frozen", 1e-4, |seed| {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r),
            Tensor::uniform(&[3], 0.5, 1.5, &mut r),
            Tensor::randn(&[3], 0.5, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.batch_norm_frozen(
                    v[0],
                    v[1],
                    v[2],
                    &[0.1, -0.2, 0.3],
                    &[1.0, 0.5, 2.0],
                    NORM_EPS,
                )?;
                project(g, y, seed)
            }),
        )
    });
}

#[test]
fn grad_conv2d() {
    check_all("conv2d", 1e-4, |seed| {
        let mut r = rng(seed);
        let stride = 1 + (seed % 2) as usize;
        let (kh, pad) = if seed % 3 == 0 { (1, 0) } else { (3, 1) };
        let inputs = vec![
            Tensor::randn(&[2, 2, 5, 4], 1.0, &mut r),
            Tensor::randn(&[3, 2, kh, kh], 0.5, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                project(g, y, seed)
            }),
        )
    });
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng(11);
    let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, 2, 1).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[2, 4, 3, 3]);
    for n in 0..2 {
        for o in 0..4 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..6).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.data()
                                        [((n * 3 + c) * 6 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 3 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = y.data()[((n * 4 + o) * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn grad_linear_and_pool() {
    check_all("linear", 1e-4, |seed| {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r),
            Tensor::randn(&[4, 2], 1.0, &mut r),
            Tensor::randn(&[4], 1.0, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let p = g.global_avg_pool(v[0])?;
                let y = g.linear(p, v[1], Some(v[2]))?;
                project(g, y, seed)
            }),
        )
    });
}

#[test]
fn grad_elementwise() {
    check_all("elementwise", 1e-6, |seed| {
        let mut r = rng(seed);
        let inputs = vec![
            away_from_zero(Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r)),
            Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let a = g.relu(v[0]);
                let b = g.sigmoid(v[1]);
                let c = g.softplus(v[0]);
                let ab = g.mul(a, b)?;
                let d = g.sub(ab, c)?;
                let e = g.affine(d, -1.5, 0.25);
                let f = g.add(e, v[1])?;
                let y = g.mul(f, f)?;
                g.mean_all(y)
            }),
        )
    });
}

#[test]
fn grad_scale_channels_and_gather() {
    check_all("scale_channels", 1e-4, |seed| {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[2, 3, 2, 3], 1.0, &mut r),
            Tensor::uniform(&[2, 3], 0.0, 1.0, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.scale_channels(v[0], v[1])?;
                let p = g.global_avg_pool(y)?;
                let rows = g.gather_rows(p, &[1, 0, 1])?;
                project(g, rows, seed)
            }),
        )
    });
}

#[test]
fn grad_distances() {
    check_all("row_cosine_distance", 1e-5, |seed| {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[4, 5], 1.0, &mut r),
            Tensor::randn(&[4, 5], 1.0, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let d = g.row_cosine_distance(v[0], v[1])?;
                project(g, d, seed)
            }),
        )
    });
    check_all("row_euclidean", 1e-5, |seed| {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[4, 3], 1.0, &mut r),
            Tensor::randn(&[4, 3], 1.0, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let d = g.row_euclidean(v[0], v[1])?;
                let s = g.softplus(d);
                project(g, s, seed)
            }),
        )
    });
}

#[test]
fn grad_smoothed_cross_entropy() {
    check_all("cross_entropy", 1e-5, |seed| {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
        let eps = if seed % 2 == 0 { 0.1 } else { 0.0 };
        let inputs = vec![Tensor::randn(&[5, 4], 2.0, &mut r)];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| g.smoothed_cross_entropy(v[0], &labels, eps)),
        )
    });
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros(&[3, 5]));
    for eps in [0.0, 0.1, 0.4] {
        let l = g.smoothed_cross_entropy(uniform, &[0, 3, 4], eps).unwrap();
        assert!((g.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }
    let bad = g.smoothed_cross_entropy(uniform, &[0, 5, 1], 0.1);
    assert!(bad.is_err());
}
