//! Library kernels against straightforward reference implementations.

use mgflow::boxes::{box_stats, generate_boxes, BoxHistogram, MockDetector, SceneTags};
use mgflow::sampling::resize_plan;
use mgflow::{BoxConfig, SceneDescriptor, SeedTree, SyntheticImage, Tape, Tensor};
use rand::Rng;

fn random(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SeedTree::new(1).stream("matmul");
    for _ in 0..50 {
        let (n, k, m) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let a = random(&mut rng, vec![n, k]);
        let b = random(&mut rng, vec![k, m]);
        let mut want = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for t in 0..k {
                    want[i * m + j] += a.data()[i * k + t] * b.data()[t * m + j];
                }
            }
        }
        assert!(max_diff(a.matmul(&b).unwrap().data(), &want) < 1e-12);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let out = tape.matmul(va, vb).unwrap();
        assert!(max_diff(tape.value(out).data(), &want) < 1e-12);
    }
}

#[test]
fn conv1d_matches_padded_sum() {
    let mut rng = SeedTree::new(2).stream("conv");
    for _ in 0..40 {
        let (n, cin, cout) = (rng.gen_range(1..12), rng.gen_range(1..5), rng.gen_range(1..5));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x = random(&mut rng, vec![n, cin]);
        let w = random(&mut rng, vec![cout, cin, k]);
        let b = random(&mut rng, vec![cout]);
        let half = (k / 2) as isize;
        let mut want = vec![0.0; n * cout];
        for t in 0..n {
            for o in 0..cout {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for j in 0..k {
                        let src = t as isize + j as isize - half;
                        if (0..n as isize).contains(&src) {
                            acc += w.data()[(o * cin + i) * k + j] * x.data()[src as usize * cin + i];
                        }
                    }
                }
                want[t * cout + o] = acc;
            }
        }
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let out = tape.conv1d(vx, vw, vb).unwrap();
        assert_eq!(tape.shape(out), [n, cout]);
        assert!(max_diff(tape.value(out).data(), &want) < 1e-12);
    }
}

#[test]
fn resize_matches_half_pixel_bilinear() {
    let mut rng = SeedTree::new(3).stream("resize");
    for _ in 0..30 {
        let (h, w, c) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..4));
        let (oh, ow) = (h * rng.gen_range(1..5), w * rng.gen_range(1..5));
        let src = random(&mut rng, vec![h * w, c]);
        let coord = |d: usize, inn: usize, out: usize| {
            ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64)
        };
        let mut want = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = (coord(y, h, oh), coord(x, w, ow));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                for ch in 0..c {
                    let v = |yy: usize, xx: usize| src.data()[(yy * w + xx) * c + ch];
                    want.push(
                        (1.0 - fy) * (1.0 - fx) * v(y0, x0)
                            + (1.0 - fy) * fx * v(y0, x1)
                            + fy * (1.0 - fx) * v(y1, x0)
                            + fy * fx * v(y1, x1),
                    );
                }
            }
        }
        let got = resize_plan(h, w, oh, ow).apply(&src).unwrap();
        assert!(max_diff(got.data(), &want) < 1e-12);
    }
}

#[test]
fn histogram_recount_over_corpus() {
    let mut rng = SeedTree::new(4).stream("corpus");
    let cfg = BoxConfig::default();
    let sets: Vec<_> = (0..500u64)
        .map(|i| {
            let scene = SceneDescriptor::random(i, 96, 96, rng.gen_range(0..40));
            let image = SyntheticImage::render(&scene).unwrap();
            generate_boxes(&image, &SceneTags, &MockDetector::new(i), &cfg).unwrap()
        })
        .collect();
    let mut bins = [0usize; 6];
    for s in &sets {
        let n = s.detections.len();
        let b = if n == 0 {
            0
        } else if n <= 10 {
            1
        } else if n <= 20 {
            2
        } else if n <= 30 {
            3
        } else if n <= 50 {
            4
        } else {
            5
        };
        bins[b] += 1;
    }
    let h = box_stats(&sets);
    assert_eq!(h, BoxHistogram { images: 500, bins });
    assert_eq!(bins.iter().sum::<usize>(), 500);
}
