//! Operators checked against direct loops written from their definitions.

use carafe::baselines::{depth_to_space, space_to_depth, Deconv};
use carafe::carafe::{carafe_forward, predict_kernels, reassemble, reassemble_mask, staged_upsample};
use carafe::conv::{conv2d_forward, ConvSpec};
use carafe::interp::{bilinear, bilinear_resize};
use carafe::rng::Rng;
use carafe::{CarafeConfig, CarafeParams, Error, KernelField, Tensor};

fn random(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![c, h, w], rng.normal(c * h * w, 1.0)).unwrap()
}

fn conv_by_definition(x: &Tensor, weight: &Tensor, bias: &[f64], k: usize) -> Tensor {
    let (cin, h, w) = x.chw().unwrap();
    let cout = bias.len();
    let pad = (k / 2) as isize;
    let wt = weight.data();
    Tensor::from_fn3(cout, h, w, |o, y, xx| {
        let mut acc = bias[o];
        for c in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    let sx = xx as isize + dx as isize - pad;
                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                        acc += wt[((o * cin + c) * k + dy) * k + dx] * x.at3(c, sy as usize, sx as usize);
                    }
                }
            }
        }
        acc
    })
}

fn reassemble_by_definition(x: &Tensor, field: &KernelField) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let (s, k) = (field.sigma, field.k_up);
    let r = (k / 2) as isize;
    Tensor::from_fn3(c, s * h, s * w, |ci, oy, ox| {
        let (i, j) = (oy / s, ox / s);
        let p = (oy % s) * s + ox % s;
        let mut acc = 0.0;
        for n in 0..k {
            for m in 0..k {
                let si = i as isize + n as isize - r;
                let sj = j as isize + m as isize - r;
                if si >= 0 && sj >= 0 && si < h as isize && sj < w as isize {
                    acc += field.normalized.at3(p * k * k + n * k + m, i, j) * x.at3(ci, si as usize, sj as usize);
                }
            }
        }
        acc
    })
}

fn deconv_by_scatter(x: &Tensor, d: &Deconv) -> Tensor {
    let (cin, h, w) = x.chw().unwrap();
    let cout = d.bias.len();
    let mut out = Tensor::from_fn3(cout, 2 * h, 2 * w, |o, _, _| d.bias[o]);
    for c in 0..cin {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            // output index = stride·input - padding + tap
                            let y = 2 * i as isize - 1 + ky as isize;
                            let xx = 2 * j as isize - 1 + kx as isize;
                            if y < 0 || xx < 0 || y >= 2 * h as isize || xx >= 2 * w as isize {
                                continue;
                            }
                            let wv = d.weight.data()[((c * cout + o) * 3 + ky) * 3 + kx];
                            let (y, xx) = (y as usize, xx as usize);
                            out.set3(o, y, xx, out.at3(o, y, xx) + wv * x.at3(c, i, j));
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = Rng::new(3);
    for (cin, cout, k, h, w) in [(1, 1, 1, 4, 5), (3, 2, 3, 5, 4), (2, 4, 5, 3, 6), (4, 3, 3, 1, 1)] {
        let spec = ConvSpec::new(cin, cout, k).unwrap();
        let x = random(&mut rng, cin, h, w);
        let weight = Tensor::new(spec.weight_dims().to_vec(), rng.normal(cout * cin * k * k, 1.0)).unwrap();
        let bias = rng.normal(cout, 1.0);
        let fast = conv2d_forward(&x, &weight, &bias, &spec).unwrap();
        let slow = conv_by_definition(&x, &weight, &bias, k);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }
}

#[test]
fn reassembly_matches_direct_loop() {
    let mut rng = Rng::new(5);
    for (s, k) in [(1, 3), (2, 1), (2, 5), (3, 3), (4, 7)] {
        let cfg = CarafeConfig::new(3, s, k, 3, Some(2)).unwrap();
        let params = CarafeParams::init(&cfg, &mut rng).unwrap();
        let x = random(&mut rng, 3, 4, 5);
        let field = predict_kernels(&x, &params, &cfg).unwrap();
        let fast = reassemble(&x, &field, &cfg).unwrap();
        assert!(fast.max_abs_diff(&reassemble_by_definition(&x, &field)).unwrap() < 1e-12);
    }
}

#[test]
fn half_masked_region_keeps_mask_range() {
    let mut rng = Rng::new(8);
    let cfg = CarafeConfig::new(2, 2, 5, 3, None).unwrap();
    let params = CarafeParams::init(&cfg, &mut rng).unwrap();
    let x = random(&mut rng, 2, 6, 10);
    let mask = Tensor::from_fn3(1, 6, 10, |_, _, j| if j < 5 { 1.0 } else { 0.0 });
    let field = predict_kernels(&x, &params, &cfg).unwrap();
    let up = reassemble_mask(&mask, &field, &cfg).unwrap();
    assert!(up.max_abs_diff(&reassemble_by_definition(&mask, &field)).unwrap() < 1e-12);
    let (lo, hi) = up.min_max();
    assert!(lo >= 0.0 && hi <= 1.0 + 1e-12);
    // windows that lie wholly on one side of the edge reproduce the mask
    for y in 4..8 {
        for x in [4, 5] {
            assert!((up.at3(0, y, x) - 1.0).abs() < 1e-12);
            assert!(up.at3(0, y, x + 10).abs() < 1e-12);
        }
    }
}

#[test]
fn mask_outside_unit_interval_is_rejected() {
    let cfg = CarafeConfig::new(1, 2, 3, 3, None).unwrap();
    let mask = Tensor::full(&[1, 2, 2], 1.5);
    let field = KernelField::uniform(2, 3, 2, 2);
    assert!(matches!(reassemble_mask(&mask, &field, &cfg), Err(Error::Contract(_))));
}

#[test]
fn deconv_matches_scatter() {
    let mut rng = Rng::new(11);
    for (cin, cout, h, w) in [(1, 1, 1, 1), (2, 3, 3, 4), (3, 2, 5, 2)] {
        let mut d = Deconv::init(cin, cout, &mut rng);
        d.bias = rng.normal(cout, 1.0);
        let x = random(&mut rng, cin, h, w);
        let fast = d.forward(&x).unwrap();
        assert_eq!(fast.dims(), [cout, 2 * h, 2 * w]);
        assert!(fast.max_abs_diff(&deconv_by_scatter(&x, &d)).unwrap() < 1e-12);
    }
}

#[test]
fn deconv_single_pixel_paints_three_by_three_patch() {
    let d = Deconv {
        weight: Tensor::full(&[1, 1, 3, 3], 1.0),
        bias: vec![0.0],
    };
    let x = Tensor::from_fn3(1, 3, 3, |_, i, j| if (i, j) == (1, 1) { 1.0 } else { 0.0 });
    let y = d.forward(&x).unwrap();
    for oy in 0..6 {
        for ox in 0..6 {
            let inside = (1..=3).contains(&oy) && (1..=3).contains(&ox);
            assert_eq!(y.at3(0, oy, ox), if inside { 1.0 } else { 0.0 }, "({oy},{ox})");
        }
    }
}

#[test]
fn depth_to_space_follows_index_formula() {
    let (c, s, h, w) = (2, 3, 2, 4);
    let x = Tensor::from_fn3(c * s * s, h, w, |ch, i, j| (ch * 1000 + i * 10 + j) as f64);
    let y = depth_to_space(&x, s).unwrap();
    for ci in 0..c {
        for oy in 0..s * h {
            for ox in 0..s * w {
                let src = ci * s * s + (oy % s) * s + ox % s;
                assert_eq!(y.at3(ci, oy, ox), x.at3(src, oy / s, ox / s));
            }
        }
    }
    // every source value lands exactly once
    let mut values: Vec<f64> = y.data().to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    assert_eq!(values.len(), x.len());
    assert_eq!(space_to_depth(&y, s).unwrap(), x);
}

#[test]
fn staged_upsample_is_resize_then_carafe() {
    let mut rng = Rng::new(13);
    let cfg = CarafeConfig::new(3, 2, 5, 3, Some(2)).unwrap();
    let params = CarafeParams::init(&cfg, &mut rng).unwrap();
    let x = random(&mut rng, 3, 5, 7);
    let staged = staged_upsample(&x, (18, 10), &params, &cfg).unwrap();
    let (two_step, _) = carafe_forward(&bilinear_resize(&x, 9, 5).unwrap(), &params, &cfg).unwrap();
    assert_eq!(staged.dims(), [3, 18, 10]);
    assert!(staged.max_abs_diff(&two_step).unwrap() < 1e-12);
    assert!(matches!(staged_upsample(&x, (9, 10), &params, &cfg), Err(Error::Config(_))));
}

#[test]
fn bilinear_reproduces_linear_ramp_away_from_edges() {
    let w = 6;
    let x = Tensor::from_fn3(1, 3, w, |_, _, j| 2.0 * j as f64 + 1.0);
    let y = bilinear(&x, 2).unwrap();
    for ox in 1..2 * w - 1 {
        let s = (ox as f64 + 0.5) / 2.0 - 0.5;
        for oy in 0..6 {
            assert!((y.at3(0, oy, ox) - (2.0 * s + 1.0)).abs() < 1e-12);
        }
    }
    // edges clamp to the border sample
    assert_eq!(y.at3(0, 0, 0), 1.0);
    assert_eq!(y.at3(0, 0, 2 * w - 1), x.at3(0, 0, w - 1));
}
