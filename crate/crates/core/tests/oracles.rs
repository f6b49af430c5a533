//! Reference values computed by hand or by plain scalar loops.

use facemark_core::adversary::PatchScoreMap;
use facemark_core::config::{ModelConfig, Normalization};
use facemark_core::converter::LatentCode;
use facemark_core::data::{default_identities, render_with_labels, Expression};
use facemark_core::detector::{dsnt, dsnt_var};
use facemark_core::evaluation::{metric_id, ssim, ConstantEmbedder, Embedder, ToyEmbedder};
use facemark_core::generator::{pixel_shuffle, Generator, UpscaleBlock};
use facemark_core::geometry::{
    normalize, unit_l2, Frame, LandmarkTopology, LandmarkVector, Region,
};
use facemark_core::image::ImageTensor;
use facemark_core::losses::{
    loss_gan, loss_l2i, loss_l2l, loss_overall, loss_xl2l, GanForm, LandmarkReduction, LossTerms,
    LossWeights,
};
use facemark_tensor::{check_inputs, GradCheckOptions, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn random_image(r: &mut ChaCha8Rng, h: usize) -> ImageTensor {
    ImageTensor::new(Tensor::new(&[3, h, h], random_vec(r, 3 * h * h, -1.0, 1.0))).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn log_sigmoid(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s.ln()
}

#[test]
fn out_of_frame_point_is_clamped_and_counted() {
    let out = normalize(&[[300.0, 10.0]], Frame::square(256)).unwrap();
    assert_eq!(out.landmarks.points()[0], [1.0, 0.0390625]);
    assert_eq!(out.clamped, 1);
}

#[test]
fn unit_l2_matches_scalar_loop() {
    let v = random_vec(&mut rng(1), 196, -2.0, 2.0);
    let n = norm(&v);
    let u = unit_l2(&LandmarkVector::new(v.clone())).unwrap();
    for (a, b) in u.values().iter().zip(&v) {
        assert!((a - b / n).abs() < 1e-7);
    }
}

#[test]
fn dsnt_spike_lands_on_its_pixel_center() {
    let mut raw = Tensor::zeros(&[1, 16, 16]);
    raw.data_mut()[4 * 16 + 10] = 30.0;
    let p = dsnt(&raw, 1.0).unwrap().points()[0];
    assert!(
        (p[0] - 0.65625).abs() < 1e-3 && (p[1] - 0.28125).abs() < 1e-3,
        "{p:?}"
    );
}

#[test]
fn dsnt_gradient_matches_finite_differences() {
    let raw = Tensor::new(&[1, 2, 8, 8], random_vec(&mut rng(2), 128, -2.0, 2.0));
    let w = Tensor::new(&[1, 4], vec![0.7, -1.3, 0.4, 2.1]);
    let report = check_inputs(
        &[raw],
        |g, x| {
            let xy = dsnt_var(g, x[0], 1.0);
            g.sum(g.mul(xy, g.input(w.clone())))
        },
        GradCheckOptions::default(),
    );
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn upscale_block_with_replicating_kernel_is_a_pixel_shuffle() {
    let (cin, cout) = (2, 3);
    let mut block = UpscaleBlock::new(cin, cout, Normalization::None, &mut rng(3));
    // output channel k copies input channel k % cin at the center tap
    let mut w = Tensor::zeros(&[4 * cout, cin, 3, 3]);
    for k in 0..4 * cout {
        w.data_mut()[((k * cin) + k % cin) * 9 + 4] = 1.0;
    }
    block.conv.weight.set(w);
    let x = Tensor::new(&[1, cin, 4, 4], random_vec(&mut rng(4), cin * 16, 0.0, 1.0));
    let g = Graph::new();
    let y = block.forward(&g, g.input(x.clone())).unwrap();
    let replicated = Tensor::from_fn(&[1, 4 * cout, 4, 4], |i| {
        let (k, p) = (i / 16, i % 16);
        x.data()[(k % cin) * 16 + p]
    });
    assert_eq!(*g.value(y), pixel_shuffle(&replicated, 2).unwrap());
}

#[test]
fn full_size_generator_maps_98_points_to_256_square() {
    let cfg = ModelConfig::full();
    assert_eq!(cfg.topology().unwrap().point_count, 98);
    assert_eq!(cfg.generator.upscale_channels.len(), 6);
    assert_eq!(cfg.image_size(), 256);
    // building the full network is cheap; running it once checks the shape
    let gen = Generator::new(196, &cfg.generator, &mut rng(5));
    let img = gen
        .synthesize(&LandmarkVector::new(vec![0.5; 196]))
        .unwrap();
    assert_eq!((img.height(), img.width()), (256, 256));
}

#[test]
fn image_loss_matches_scalar_loop() {
    let mut r = rng(6);
    let (a, b) = (random_image(&mut r, 9), random_image(&mut r, 9));
    let want: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data().len() as f64;
    assert!((loss_l2i(&a, &b).unwrap() - want).abs() < 1e-7);
}

#[test]
fn landmark_terms_match_scalar_loops() {
    let mut r = rng(7);
    let l = random_vec(&mut r, 24, 0.0, 1.0);
    let recon = random_vec(&mut r, 24, 0.0, 1.0);
    let z = random_vec(&mut r, 24, -1.0, 1.0);
    let n = norm(&l);
    let d1: Vec<f64> = l.iter().zip(&recon).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = l.iter().zip(&z).map(|(a, b)| a / n - b).collect();
    let got = loss_l2l(
        &LandmarkVector::new(l.clone()),
        &LandmarkVector::new(recon.clone()),
        &LatentCode::new(z),
        LandmarkReduction::Norm,
    )
    .unwrap();
    assert!((got - (norm(&d1) + norm(&d2))).abs() < 1e-7);

    let x = loss_xl2l(
        &LandmarkVector::new(l),
        &LandmarkVector::new(recon),
        LandmarkReduction::Norm,
    )
    .unwrap();
    assert!((x - norm(&d1)).abs() < 1e-7);
    let per_point: f64 = d1.chunks(2).map(norm).sum::<f64>() / 12.0;
    let l2 = LandmarkVector::new(d1.iter().map(|_| 0.0).collect());
    let p = loss_xl2l(
        &l2,
        &LandmarkVector::new(d1.clone()),
        LandmarkReduction::PerPoint,
    )
    .unwrap();
    assert!((p - per_point).abs() < 1e-7);
}

#[test]
fn gan_losses_at_saturation_and_zero() {
    let map = |v: f64| PatchScoreMap::new(Tensor::full(&[1, 1, 7, 7], v)).unwrap();
    let l = loss_gan(&map(30.0), &map(-30.0), GanForm::NonSaturating);
    assert!(l.d_loss < 1e-12 && (l.g_loss - 30.0).abs() < 1e-9, "{l:?}");
    let l = loss_gan(&map(0.0), &map(0.0), GanForm::NonSaturating);
    assert!((l.d_loss - 2.0 * 2f64.ln()).abs() < 1e-12 && (l.g_loss - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn gan_losses_match_explicit_sigmoid() {
    let mut r = rng(8);
    let real = random_vec(&mut r, 49, -4.0, 4.0);
    let fake = random_vec(&mut r, 49, -4.0, 4.0);
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let d = -real.iter().map(|&x| sig(x).ln()).sum::<f64>() / 49.0
        - fake.iter().map(|&x| (1.0 - sig(x)).ln()).sum::<f64>() / 49.0;
    let gn = -fake.iter().map(|&x| log_sigmoid(x)).sum::<f64>() / 49.0;
    let gl = fake.iter().map(|&x| (1.0 - sig(x)).ln()).sum::<f64>() / 49.0;
    let m = |v: &[f64]| PatchScoreMap::new(Tensor::new(&[1, 1, 7, 7], v.to_vec())).unwrap();
    let ns = loss_gan(&m(&real), &m(&fake), GanForm::NonSaturating);
    assert!((ns.d_loss - d).abs() < 1e-6 && (ns.g_loss - gn).abs() < 1e-6);
    let lit = loss_gan(&m(&real), &m(&fake), GanForm::Literal);
    assert!((lit.g_loss - gl).abs() < 1e-6);
}

#[test]
fn overall_loss_is_a_dot_product() {
    let mut r = rng(9);
    for _ in 0..20 {
        let t = random_vec(&mut r, 6, 0.0, 3.0);
        let w = random_vec(&mut r, 5, 0.0, 2.0);
        let terms = LossTerms {
            l2i: t[0],
            i2l: t[1],
            l2l: t[2],
            x_l2l: t[3],
            gan_g: t[4],
            gan_d: t[5],
        };
        let weights = LossWeights {
            l2i: w[0],
            i2l: w[1],
            l2l: w[2],
            x_l2l: w[3],
            gan: w[4],
        };
        let want: f64 = (0..5).map(|i| t[i] * w[i]).sum();
        assert!((loss_overall(terms, weights).unwrap().overall - want).abs() < 1e-9);
    }
    let ones = LossTerms {
        l2i: 1.0,
        i2l: 1.0,
        l2l: 1.0,
        x_l2l: 1.0,
        gan_g: 1.0,
        gan_d: 7.0,
    };
    assert_eq!(
        loss_overall(ones, LossWeights::default()).unwrap().overall,
        5.0
    );
}

#[test]
fn sampled_contour_width_matches_the_identity_scale() {
    let topo = LandmarkTopology::toy12();
    let contour: Vec<usize> = topo.group("contour").unwrap().indices().collect();
    let width = |pts: &[[f64; 2]]| {
        let xs = contour.iter().map(|&i| pts[i][0]);
        xs.clone().fold(f64::MIN, f64::max) - xs.fold(f64::MAX, f64::min)
    };
    let mut r = rng(10);
    for spec in default_identities(&topo).unwrap() {
        let mean = (0..1000)
            .map(|_| width(spec.sample_landmarks(&mut r).unwrap().points()))
            .sum::<f64>()
            / 1000.0;
        let want = spec.scale * spec.aspect * width(spec.canonical.points());
        assert!(
            (mean / want - 1.0).abs() < 0.02,
            "{}: {mean} vs {want}",
            spec.target_id
        );
    }
}

#[test]
fn moving_the_mouth_moves_its_rendered_pixels() {
    let topo = LandmarkTopology::toy12();
    let spec = &default_identities(&topo).unwrap()[0];
    let base = spec.landmarks(&Expression::neutral(12)).unwrap();
    let mouth: Vec<usize> = topo.group("mouth").unwrap().indices().collect();
    let (moved, clamped) = base.map_clamped(|i, p| {
        if mouth.contains(&i) {
            [p[0], p[1] + 0.1]
        } else {
            p
        }
    });
    assert_eq!(clamped, 0);
    let a = render_with_labels(&base, spec, 64)
        .unwrap()
        .centroid(Region::Mouth)
        .unwrap();
    let b = render_with_labels(&moved, spec, 64)
        .unwrap()
        .centroid(Region::Mouth)
        .unwrap();
    assert!((b[1] - a[1] - 6.4).abs() <= 1.0, "{a:?} -> {b:?}");
    assert!((b[0] - a[0]).abs() <= 1.0);
}

#[test]
fn identities_with_shared_landmarks_differ_only_in_color() {
    let topo = LandmarkTopology::toy12();
    let ids = default_identities(&topo).unwrap();
    let lms = ids[0].landmarks(&Expression::neutral(12)).unwrap();
    let a = render_with_labels(&lms, &ids[0], 64).unwrap();
    let b = render_with_labels(&lms, &ids[1], 64).unwrap();
    assert_eq!(a.labels, b.labels);
    // edge pixels blend neighbouring regions, so only look at interiors
    let shared = |y: usize, x: usize| {
        let r = a.labels[y * 64 + x];
        ids[0].palette.color(r) == ids[1].palette.color(r)
    };
    let mut checked = 0;
    for y in 1..63 {
        for x in 1..63 {
            if (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| shared(yy, xx))) {
                assert_eq!(
                    a.image.pixel(y, x),
                    b.image.pixel(y, x),
                    "pixel ({x}, {y}) differs"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
    assert_ne!(a.image.data(), b.image.data());
}

#[test]
fn ssim_of_opposite_constants_is_near_zero() {
    let black = ImageTensor::filled(16, 16, [-1.0; 3]);
    let white = ImageTensor::filled(16, 16, [1.0; 3]);
    let s = ssim(&black, &white).unwrap();
    assert!(s < 0.05, "{s}");
    assert_eq!(ssim(&white, &white).unwrap(), 1.0);
}

#[test]
fn ssim_suite_on_random_pairs() {
    let mut r = rng(11);
    for _ in 0..100 {
        let (a, b) = (random_image(&mut r, 16), random_image(&mut r, 16));
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn constant_embedder_scores_zero() {
    let mut r = rng(12);
    let imgs: Vec<ImageTensor> = (0..3).map(|_| random_image(&mut r, 8)).collect();
    let score = metric_id(&imgs, &imgs[0], &ConstantEmbedder(vec![1.0, 2.0])).unwrap();
    assert_eq!((score.mean, score.n), (0.0, 3));
    assert!(score.failures.is_empty());
}

#[test]
fn toy_embedder_separates_identities() {
    let topo = LandmarkTopology::toy12();
    let ids = default_identities(&topo).unwrap();
    let emb = ToyEmbedder::default();
    let mut r = rng(13);
    let dist =
        |a: &[f64], b: &[f64]| norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    let render = |k: usize, r: &mut ChaCha8Rng| {
        let lms = ids[k].sample_landmarks(r).unwrap();
        emb.embed(&render_with_labels(&lms, &ids[k], 64).unwrap().image)
            .unwrap()
    };
    for n in 0..100 {
        let (a, b) = (n % 5, (n + 1 + n / 5 % 4) % 5);
        let anchor = render(a, &mut r);
        let same = render(a, &mut r);
        let other = render(b, &mut r);
        assert!(
            dist(&anchor, &same) < dist(&anchor, &other),
            "pair {n}: {} vs {}",
            ids[a].target_id,
            ids[b].target_id
        );
    }
}
