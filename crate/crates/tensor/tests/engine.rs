use facemark_tensor::{
    check_inputs, check_module, GradCheckOptions, Graph, Module, Padding, Param, RmsProp, Tensor,
};
use proptest::prelude::*;

struct Layer {
    w: Param,
    b: Param,
}

impl Module for Layer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

fn layer() -> Layer {
    Layer {
        w: Param::new(Tensor::from_fn(&[3, 2, 3, 3], |i| {
            ((i * 13) % 7) as f64 * 0.1 - 0.3
        })),
        b: Param::new(Tensor::new(&[3], vec![0.1, -0.2, 0.05])),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn conv_pool_stack_gradients_match_differences(x in prop::collection::vec(-1.0f64..1.0, 2 * 2 * 6 * 6)) {
        let x = Tensor::new(&[2, 2, 6, 6], x);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.37).sin());
        let r = check_inputs(
            &[x, w],
            |g, v| {
                let h = g.conv2d(v[0], v[1], 1, Padding::Reflect(1));
                let h = g.max_pool2(g.leaky_relu(h, 0.2));
                g.mean(g.square(g.upsample2(h)))
            },
            GradCheckOptions { coords_per_tensor: 6, directions: 2, ..Default::default() },
        );
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }
}

#[test]
fn module_check_covers_every_parameter() {
    let mut m = layer();
    let x = Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64 * 0.21).cos());
    let r = check_module(
        &mut m,
        |m, g| {
            let h = g.conv2d(g.input(x.clone()), g.param(&m.w), 2, Padding::Zero(1));
            g.sum(g.tanh(g.add_bias(h, g.param(&m.b))))
        },
        GradCheckOptions::default(),
    );
    assert!(r.max_rel_err < 1e-6, "{r:?}");
    let fresh = layer();
    assert_eq!(m.w.value(), fresh.w.value());
    assert_eq!(m.b.value(), fresh.b.value());
}

#[test]
fn a_reused_parameter_accumulates_one_gradient() {
    let p = Param::new(Tensor::new(&[2], vec![1.5, -0.5]));
    let g = Graph::new();
    let a = g.param(&p);
    let b = g.param(&p);
    let loss = g.sum(g.add(g.square(a), g.scale(b, 3.0)));
    let grads = g.backward(loss);
    assert_eq!(
        grads.param(&p).unwrap().data(),
        &[2.0 * 1.5 + 3.0, 2.0 * -0.5 + 3.0]
    );
}

#[test]
fn frozen_modules_pass_gradients_through_but_get_none() {
    let m = layer();
    let g = Graph::new();
    g.freeze(&m);
    let x = g.variable(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 * 0.1));
    let h = g.conv2d(x, g.param(&m.w), 1, Padding::Zero(1));
    let grads = g.backward(g.sum(g.add_bias(h, g.param(&m.b))));
    assert!(grads.param(&m.w).is_none() && grads.param(&m.b).is_none());
    assert!(grads.get(x).unwrap().sq_norm() > 0.0);
}

#[test]
fn rmsprop_descends_a_quadratic_and_reports_the_preclip_norm() {
    let mut m = layer();
    let target = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64).sin());
    let loss_of = |m: &Layer, g: &Graph| {
        let d = g.sub(g.param(&m.w), g.input(target.clone()));
        g.add(g.sum(g.square(d)), g.sum(g.square(g.param(&m.b))))
    };
    let value = |m: &Layer| {
        let g = Graph::new();
        let l = loss_of(m, &g);
        g.value(l).item()
    };
    let start = value(&m);
    let mut opt = RmsProp::new(0.01, 0.9, 1e-8);
    for _ in 0..300 {
        let g = Graph::new();
        let l = loss_of(&m, &g);
        let grads = g.backward(l);
        let want =
            (grads.param(&m.w).unwrap().sq_norm() + grads.param(&m.b).unwrap().sq_norm()).sqrt();
        let norm = opt.step(&mut [&mut m], &grads, Some(1.0));
        assert!((norm - want).abs() < 1e-12);
    }
    assert!(value(&m) < 0.01 * start, "{start} -> {}", value(&m));
}
