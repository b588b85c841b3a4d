use bninvert_core::graph::Graph;
use bninvert_core::nn::checkpoint::{decode, encode};
use bninvert_core::nn::{record_bn_stats, tiny_resnet, Mode};
use bninvert_core::optim::{Adam, CosineSchedule};
use bninvert_core::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_schedule_is_non_increasing(eta_max in 1e-4f64..1.0, frac in 0.0f64..1.0, total in 1usize..300) {
        let s = CosineSchedule::new(eta_max, eta_max * frac, total);
        prop_assert_eq!(s.lr(0), eta_max);
        prop_assert!((s.lr(total) - eta_max * frac).abs() < 1e-12);
        for t in 0..total {
            prop_assert!(s.lr(t + 1) <= s.lr(t) + 1e-15);
        }
    }

    #[test]
    fn adam_first_step_ignores_gradient_scale(seed in 0u64..1000, c in 1e-3f64..1e3) {
        let g = Tensor::<f64>::randn(&[12], 0.0, 1.0, seed).unwrap();
        let run = |scale: f64| {
            let mut p = Tensor::<f64>::zeros(&[12]).with_grad(true);
            let mut g2 = Graph::new();
            let pv = g2.leaf(&p);
            let w = g2.constant(&[12], g.data().iter().map(|v| v * scale).collect()).unwrap();
            let prod = g2.mul(pv, w).unwrap();
            let loss = g2.sum(prod);
            g2.backward(loss).unwrap().accumulate_into(pv, &mut p).unwrap();
            let mut adam = Adam::new(0.1, 0.9, 0.999).unwrap();
            adam.step(&mut [&mut p]).unwrap();
            assert_eq!(adam.step_count(), 1);
            p.into_data()
        };
        let (a, b) = (run(1.0), run(c));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_forward_is_pure(seed in 0u64..200) {
        let mut m = tiny_resnet::<f32>([3, 8, 8], 4, 4, seed).unwrap();
        let before = m.clone();
        let x = Tensor::<f32>::randn(&[3, 3, 8, 8], 0.0, 1.0, seed + 1).unwrap();
        let mut outs = Vec::new();
        for mode in [Mode::Eval, Mode::Eval, Mode::SynthEval] {
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let f = m.forward(&mut g, xv, mode).unwrap();
            outs.push(g.value(f.logits).to_vec());
        }
        prop_assert_eq!(&m, &before);
        prop_assert_eq!(&outs[0], &outs[1]);
        prop_assert_eq!(&outs[0], &outs[2]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_recorded_stats(seed in 0u64..200) {
        let mut m = tiny_resnet::<f32>([3, 8, 8], 4, 4, seed).unwrap();
        // move the running stats away from their initial values
        for step in 0..2 {
            let x = Tensor::<f32>::randn(&[4, 3, 8, 8], 0.5, 2.0, seed * 7 + step).unwrap();
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            m.forward(&mut g, xv, Mode::Train).unwrap();
        }
        let back = decode(&encode(&m)).unwrap();
        prop_assert_eq!(record_bn_stats(&back).unwrap(), record_bn_stats(&m).unwrap());
        prop_assert_eq!(encode(&back), encode(&m));
    }

    #[test]
    fn fresh_tensors_have_zero_grad(dims in proptest::collection::vec(1usize..5, 1..4), seed in 0u64..100) {
        let t = Tensor::<f32>::randn(&dims, 0.0, 1.0, seed).unwrap().with_grad(true);
        prop_assert_eq!(t.grad().len(), t.len());
        prop_assert!(t.grad().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn training_gradients_are_bitwise_reproducible() {
    let x = Tensor::<f32>::randn(&[4, 3, 8, 8], 0.0, 1.0, 5).unwrap();
    let grads = || {
        let mut m = tiny_resnet::<f32>([3, 8, 8], 4, 4, 6).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let f = m.forward(&mut g, xv, Mode::Train).unwrap();
        let loss = bninvert_core::synthesis::cross_entropy(&mut g, f.logits, &[0, 1, 2, 3]).unwrap();
        let gr = g.backward(loss).unwrap();
        let mut params = m.params_mut();
        for (v, p) in f.params.iter().zip(params.iter_mut()) {
            gr.accumulate_into(*v, p).unwrap();
        }
        drop(params);
        m.params_mut().iter().map(|p| p.grad().to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(grads(), grads());
}
