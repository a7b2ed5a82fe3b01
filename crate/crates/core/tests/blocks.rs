mod common;

use common::{builder, param_gradcheck, project, random};
use dpgan::blocks::*;
use dpgan_autograd::{Bound, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn norm_stats_of_constant_map() {
    let s = compute_norm_stats(&Tensor::<f64>::full(&[2, 1, 3, 3], 4.5)).unwrap();
    assert_eq!(s.mu, vec![4.5]);
    assert_eq!(s.sigma, vec![NORM_EPS.sqrt()]);
}

#[test]
fn norm_stats_two_values() {
    let s = compute_norm_stats(&t(&[1, 1, 1, 2], &[1.0, 3.0])).unwrap();
    assert_eq!(s.mu, vec![2.0]);
    assert!((s.sigma[0] - (1.0 + NORM_EPS).sqrt()).abs() < 1e-15);
}

#[test]
fn norm_stats_are_per_channel_over_batch_and_space() {
    // channel 0 holds {0, 2} across the two samples, channel 1 holds {10, 10}
    let s = compute_norm_stats(&t(&[2, 2, 1, 1], &[0.0, 10.0, 2.0, 10.0])).unwrap();
    assert_eq!(s.mu, vec![1.0, 10.0]);
    assert!((s.sigma[0] - (1.0 + NORM_EPS).sqrt()).abs() < 1e-15);
    assert_eq!(s.sigma[1], NORM_EPS.sqrt());
}

#[test]
fn spade_with_zero_gamma_returns_beta() {
    let h = random(&[2, 3, 4, 4], 1);
    let s = compute_norm_stats(&h).unwrap();
    let out = spade_modulate(&h, &Tensor::zeros(h.shape()), &Tensor::full(h.shape(), 0.7), &s).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.7));
}

#[test]
fn spade_two_value_example() {
    let h = t(&[1, 1, 1, 2], &[1.0, 3.0]);
    let s = compute_norm_stats(&h).unwrap();
    let out = spade_modulate(&h, &Tensor::full(h.shape(), 2.0), &Tensor::full(h.shape(), 1.0), &s).unwrap();
    let z = 1.0 / (1.0 + NORM_EPS).sqrt();
    assert!((out.data()[0] - (1.0 - 2.0 * z)).abs() < 1e-12);
    assert!((out.data()[1] - (1.0 + 2.0 * z)).abs() < 1e-12);
    assert!((out.data()[0] + 1.0).abs() < 1e-4 && (out.data()[1] - 3.0).abs() < 1e-4);
}

#[test]
fn spade_rejects_mismatched_shapes() {
    let h = random(&[1, 2, 4, 4], 2);
    let s = compute_norm_stats(&h).unwrap();
    let bad = Tensor::zeros(&[1, 2, 2, 2]);
    assert!(spade_modulate(&h, &bad, &Tensor::zeros(h.shape()), &s).is_err());
    assert!(spade_modulate(&h, &Tensor::zeros(h.shape()), &bad, &s).is_err());
}

/// Graph-level SPADE normalization matches the value-level reference.
#[test]
fn graph_spade_matches_reference() {
    let mut store = ParamStore::new();
    let spade = Spade::build(&mut builder(&mut store, 3), "s", 2, 3).unwrap();
    let x = random(&[2, 3, 4, 4], 4);
    let c = random(&[2, 2, 4, 4], 5);
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let mut f = Fwd::new(&mut g, &bound, &store);
    let (xv, cv) = (f.g.constant(x.clone()), f.g.constant(c));
    let out = spade.forward(&mut f, xv, cv).unwrap();
    let (gamma, beta) = spade.params(&mut f, cv).unwrap();
    let expect = spade_modulate(&x, g.value(gamma), g.value(beta), &compute_norm_stats(&x).unwrap()).unwrap();
    for (a, b) in g.value(out).data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn spade_rejects_conditioning_at_other_resolution() {
    let mut store = ParamStore::new();
    let spade = Spade::build(&mut builder(&mut store, 3), "s", 2, 3).unwrap();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let mut f = Fwd::new(&mut g, &bound, &store);
    let x = f.g.constant(random(&[1, 3, 8, 8], 1));
    let c = f.g.constant(random(&[1, 2, 4, 4], 2));
    let err = spade.forward(&mut f, x, c).unwrap_err().to_string();
    assert!(err.contains("4x4") && err.contains("8x8"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn standardization_has_zero_mean_unit_std(seed in any::<u64>(), scale in 0.5f64..20.0, shift in -5.0f64..5.0) {
        let h = random(&[3, 2, 4, 4], seed).map(|v| v * scale + shift);
        let s = compute_norm_stats(&h).unwrap();
        let out = spade_modulate(&h, &Tensor::full(h.shape(), 1.0), &Tensor::zeros(h.shape()), &s).unwrap();
        let post = compute_norm_stats(&out).unwrap();
        for c in 0..2 {
            prop_assert!(post.mu[c].abs() < 1e-4);
            let std = (post.sigma[c].powi(2) - NORM_EPS).sqrt();
            prop_assert!((std - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn norm_stats_ignore_pixel_order(seed in any::<u64>(), rot in 1usize..16) {
        let h = random(&[1, 1, 4, 4], seed);
        let mut d = h.data().to_vec();
        d.rotate_left(rot);
        let a = compute_norm_stats(&h).unwrap();
        let b = compute_norm_stats(&Tensor::new(h.shape(), d).unwrap()).unwrap();
        prop_assert!((a.mu[0] - b.mu[0]).abs() < 1e-12);
        prop_assert!((a.sigma[0] - b.sigma[0]).abs() < 1e-12);
    }
}

#[test]
fn conv_block_shapes_and_relu() {
    for stride in [1, 2] {
        let mut store = ParamStore::new();
        let block = ConvBlock::build(&mut builder(&mut store, 7), "b", 3, 5, stride).unwrap();
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &store, false);
        let mut f = Fwd::new(&mut g, &bound, &store);
        let x = f.g.constant(random(&[2, 3, 8, 8], 8));
        let y = block.forward(&mut f, x).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 8 / stride, 8 / stride]);
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn conv_block_gradients() {
    let mut store = ParamStore::new();
    let block = ConvBlock::build(&mut builder(&mut store, 9), "b", 2, 3, 1).unwrap();
    let x = random(&[1, 2, 4, 4], 10);
    let err = param_gradcheck(&store, 64, |f| {
        let xv = f.g.constant(x.clone());
        let y = block.forward(f, xv).unwrap();
        project(f.g, y, 11)
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn spade_resblock_gradients() {
    let mut store = ParamStore::new();
    let block = SpadeResBlock::build(&mut builder(&mut store, 12), "r", 3, 2, 2).unwrap();
    let x = random(&[2, 3, 4, 4], 13);
    let c = random(&[2, 2, 4, 4], 14);
    let err = param_gradcheck(&store, 16, |f| {
        let (xv, cv) = (f.g.constant(x.clone()), f.g.constant(c.clone()));
        let y = block.forward(f, xv, cv).unwrap();
        project(f.g, y, 15)
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn resblock_gradients_with_spectral_norm() {
    let mut store = ParamStore::new();
    let mut b = builder(&mut store, 16);
    b.spectral = true;
    let down = ResBlockDown::build(&mut b, "d", 2, 3, false).unwrap();
    let up = ResBlockUp::build(&mut b, "u", 3, 2).unwrap();
    let x = random(&[1, 2, 4, 4], 17);
    let err = param_gradcheck(&store, 16, |f| {
        let xv = f.g.constant(x.clone());
        let h = down.forward(f, xv).unwrap();
        let y = up.forward(f, h).unwrap();
        project(f.g, y, 18)
    });
    assert!(err < 1e-4, "relative error {err}");
}

fn spade_block_shape(cin: usize, cout: usize, size: usize) -> Vec<usize> {
    let mut store = ParamStore::<f32>::new();
    let mut b = Builder::new(&mut store, dpgan::rng::stream(0, &[]));
    let block = SpadeResBlock::build(&mut b, "r", cin, cout, 4).unwrap();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let mut f = Fwd::new(&mut g, &bound, &store);
    let x = f.g.constant(Tensor::full(&[1, cin, size, size], 0.5));
    let c = f.g.constant(Tensor::full(&[1, 4, size, size], 0.1));
    let y = block.forward(&mut f, x, c).unwrap();
    g.shape(y).to_vec()
}

#[test]
fn spade_resblock_bottom_rung_at_full_width() {
    assert_eq!(spade_block_shape(1024, 1024, 8), vec![1, 1024, 16, 16]);
}

#[test]
fn spade_resblock_top_rung() {
    assert_eq!(spade_block_shape(128, 64, 16), vec![1, 64, 32, 32]);
}

#[test]
fn spade_resblock_zero_in_zero_out() {
    let mut store = ParamStore::<f64>::new();
    let block = SpadeResBlock::build(&mut builder(&mut store, 19), "r", 3, 4, 2).unwrap();
    for norm in [&block.norm_0, &block.norm_1] {
        let w = norm.gamma.weight;
        store.get_mut(w).data_mut().fill(0.0);
        store.get_mut(norm.gamma.bias.unwrap()).data_mut().fill(-1.0);
        store.get_mut(norm.beta.weight).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let mut f = Fwd::new(&mut g, &bound, &store);
    let x = f.g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let c = f.g.constant(random(&[1, 2, 4, 4], 20));
    let (gamma, beta) = block.norm_0.params(&mut f, c).unwrap();
    let y = block.forward(&mut f, x, c).unwrap();
    assert!(g.value(gamma).data().iter().all(|&v| v == 0.0));
    assert!(g.value(beta).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(y), &[1, 4, 8, 8]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn resblock_down_first_encoder_block_at_full_width() {
    let mut store = ParamStore::<f32>::new();
    let mut b = Builder::new(&mut store, dpgan::rng::stream(0, &[]));
    b.spectral = true;
    let block = ResBlockDown::build(&mut b, "d", 3, 128, true).unwrap();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let mut f = Fwd::new(&mut g, &bound, &store);
    let x = f.g.constant(Tensor::full(&[1, 3, 256, 256], 0.25));
    let y = block.forward(&mut f, x).unwrap();
    assert_eq!(g.shape(y), &[1, 128, 128, 128]);
}

#[test]
fn resblock_up_after_skip_concat_at_full_width() {
    let mut store = ParamStore::<f32>::new();
    let mut b = Builder::new(&mut store, dpgan::rng::stream(0, &[]));
    b.spectral = true;
    let block = ResBlockUp::build(&mut b, "u", 1024, 256).unwrap();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let mut f = Fwd::new(&mut g, &bound, &store);
    let up_1 = f.g.constant(Tensor::full(&[1, 512, 8, 8], 0.1));
    let down_5 = f.g.constant(Tensor::full(&[1, 512, 8, 8], -0.1));
    let cat = f.g.concat(&[up_1, down_5], 1).unwrap();
    let y = block.forward(&mut f, cat).unwrap();
    assert_eq!(g.shape(y), &[1, 256, 16, 16]);
}

#[test]
fn encoder_ladder_at_desk_scale() {
    let mut store = ParamStore::<f32>::new();
    let mut b = Builder::new(&mut store, dpgan::rng::stream(0, &[]));
    let widths = [16, 32, 32, 64];
    let mut cin = 3;
    let blocks: Vec<_> = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let blk = ResBlockDown::build(&mut b, &format!("d{i}"), cin, w, i == 0).unwrap();
            cin = w;
            blk
        })
        .collect();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let mut f = Fwd::new(&mut g, &bound, &store);
    let mut h = f.g.constant(Tensor::full(&[1, 3, 64, 64], 0.3));
    let mut sizes = Vec::new();
    for blk in &blocks {
        h = blk.forward(&mut f, h).unwrap();
        sizes.push(f.g.shape(h)[2]);
    }
    assert_eq!(sizes, vec![32, 16, 8, 4]);
}

#[test]
fn nearest_resampling_examples() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::full(&[1, 1, 1, 1], 2.5));
    let up = g.upsample_nearest(v, 2).unwrap();
    assert_eq!(g.value(up).data(), &[2.5; 4]);

    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let up = g.upsample_nearest(x, 2).unwrap();
    #[rustfmt::skip]
    let expect = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(g.value(up).data(), &expect);

    let c = g.constant(Tensor::full(&[1, 2, 8, 8], -0.75));
    let down = g.downsample_nearest(c, 4).unwrap();
    let back = g.upsample_nearest(down, 4).unwrap();
    assert_eq!(g.value(back), g.value(c));
}

#[test]
fn resampling_rejects_non_integer_ratio() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
    assert!(g.downsample_nearest(x, 4).is_err());
    assert!(g.upsample_nearest(x, 0).is_err());
}

#[test]
fn spectral_norm_bounds_top_singular_value() {
    let mut store = ParamStore::<f64>::new();
    let mut b = builder(&mut store, 21);
    b.spectral = true;
    let conv = b.conv("c", ConvSpec::new(6, 5, 3).gain(3.0)).unwrap();
    refresh_spectral(&mut store, 50);
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, false);
    let w = bound.var(conv.weight);
    let wn = g.spectral_normalize(w, store.get(conv.sn_u.unwrap()).data()).unwrap();
    let m = nalgebra::DMatrix::from_row_slice(5, 54, g.value(wn).data());
    let sigma = m.singular_values().max();
    assert!(sigma <= 1.0 + 1e-2 && sigma > 0.99, "top singular value {sigma}");
}
