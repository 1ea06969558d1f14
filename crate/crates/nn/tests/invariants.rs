use advinv_nn::loss::{soft_cross_entropy, softmax};
use advinv_nn::{LayerSpec, Mode, Network, Tensor};
use proptest::prelude::*;

fn smooth_net(seed: u64) -> Network {
    let recipe = vec![
        LayerSpec::Conv2d { in_ch: 1, out_ch: 3, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Tanh,
        LayerSpec::Conv2d { in_ch: 3, out_ch: 2, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Tanh,
        LayerSpec::Flatten,
        LayerSpec::Linear { inputs: 2 * 3 * 3, outputs: 4 },
    ];
    Network::new(recipe, &[1, 6, 6], seed).unwrap()
}

fn weighted_sum(net: &Network, x: &Tensor, w: &[f32]) -> f64 {
    let y = net.forward(x).unwrap();
    y.data().iter().zip(w).map(|(a, b)| *a as f64 * *b as f64).sum()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f32..30.0, 12)) {
        let p = softmax(&Tensor::new(vec![3, 4], v).unwrap()).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_ignores_a_constant_shift(v in prop::collection::vec(-10.0f32..10.0, 5), s in -20.0f32..20.0) {
        let a = softmax(&Tensor::new(vec![1, 5], v.clone()).unwrap()).unwrap();
        let b = softmax(&Tensor::new(vec![1, 5], v.iter().map(|x| x + s).collect()).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn soft_cross_entropy_gradient_rows_sum_to_zero(
        l in prop::collection::vec(-5.0f32..5.0, 8),
        t in prop::collection::vec(0.01f32..1.0, 8),
    ) {
        let logits = Tensor::new(vec![2, 4], l).unwrap();
        let targets = softmax(&Tensor::new(vec![2, 4], t.iter().map(|x| x.ln()).collect()).unwrap()).unwrap();
        let (_, g) = soft_cross_entropy(&logits, &targets, 1e-12).unwrap();
        for row in g.data().chunks(4) {
            prop_assert!(row.iter().map(|&x| x as f64).sum::<f64>().abs() < 1e-5);
        }
    }

    #[test]
    fn input_gradient_matches_central_differences(seed in 0u64..1000, xs in prop::collection::vec(0.0f32..1.0, 36)) {
        let net = smooth_net(seed);
        let x = Tensor::new(vec![1, 1, 6, 6], xs).unwrap();
        let w = [0.7f32, -0.4, 0.25, 1.0];
        let (_, tape) = net.forward_tape(&x, Mode::Eval).unwrap();
        let g = net.backward(&tape, Tensor::new(vec![1, 4], w.to_vec()).unwrap(), None, true).unwrap().unwrap();
        let norm = g.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        // directional derivative along the gradient itself
        let h = 1e-2f32;
        let dir: Vec<f32> = g.data().iter().map(|v| (*v as f64 / norm) as f32).collect();
        let shifted = |s: f32| Tensor::new(vec![1, 1, 6, 6], x.data().iter().zip(&dir).map(|(a, d)| a + s * d).collect()).unwrap();
        let fd = (weighted_sum(&net, &shifted(h), &w) - weighted_sum(&net, &shifted(-h), &w)) / (2.0 * h as f64);
        prop_assert!((fd - norm).abs() <= 1e-2 * norm, "fd {fd} analytic {norm}");
    }

    #[test]
    fn select_then_cat_restores_the_batch(n in 1usize..6) {
        let t = Tensor::from_fn(&[n, 3], |i| i as f32);
        let parts: Vec<Tensor> = (0..n).map(|i| t.select(&[i])).collect();
        prop_assert_eq!(Tensor::cat(&parts).unwrap(), t);
    }
}
