use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::{check_block, Precision};
use super::*;
use crate::error::Error;
use crate::tensor::{GradCheck, Tensor};

fn build<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<ChaCha8Rng>) -> crate::Result<B>) -> (B, ParamStore<f32>) {
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
    (block, store)
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn eval<B: Block>(block: &B, store: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut s = Session::new(store, Mode::Eval);
    let xv = s.input(x.clone(), false);
    let y = block.forward(&mut s, xv).unwrap();
    s.tape.value(y).clone()
}

fn zero_params(store: &mut ParamStore<f32>, prefix: &str) {
    let ids: Vec<_> = store.param_ids().collect();
    for id in ids {
        let name = store.params().nth(id.0).unwrap().0.to_string();
        if name.starts_with(prefix) && name.ends_with("weight") && !name.contains("bn.") {
            store.param_mut(id).data_mut().fill(0.0);
        }
    }
}

#[test]
fn ghost_parameter_counts_match_hand_formula() {
    let k1 = GhostConvSpec::new(4, 8, 2, 1, 3, 1).unwrap();
    assert_eq!(k1.intrinsic(), 4);
    assert_eq!(k1.param_count(), 4 * 4 + 4 * 9);
    assert_eq!(k1.param_count(), 52);
    assert_eq!(k1.plain_param_count(), 32);
    let k3 = GhostConvSpec::new(4, 8, 2, 3, 3, 1).unwrap();
    assert_eq!(k3.param_count(), 180);
    assert_eq!(k3.plain_param_count(), 288);

    let (g, store) = build(0, |pb| GhostConv::build(pb, k1, false));
    assert_eq!(store.param_count(), 52);
    assert_eq!(store.param(g.primary).shape(), &[4, 4, 1, 1]);
    assert_eq!(store.param(g.cheap).shape(), &[4, 1, 3, 3]);
}

#[test]
fn ghost_flop_ratio_near_one_over_s() {
    let spec = GhostConvSpec::new(64, 128, 2, 3, 3, 1).unwrap();
    let ratio = spec.macs(20, 20) as f64 / spec.plain_macs(20, 20) as f64;
    let expected = 0.5 + 1.0 / (2.0 * 64.0);
    assert!((ratio - expected).abs() < 1e-12, "{ratio}");
    assert!(spec.param_count() < spec.plain_param_count());
}

#[test]
fn ghost_rejects_bad_specs() {
    assert!(matches!(GhostConvSpec::new(4, 8, 1, 1, 3, 1), Err(Error::Spec(_))));
    assert!(matches!(GhostConvSpec::new(4, 1, 2, 1, 3, 1), Err(Error::Spec(_))));
    assert!(GhostConvSpec::new(4, 2, 2, 1, 3, 1).is_ok());
}

#[test]
fn ghost_truncates_odd_output_count() {
    let spec = GhostConvSpec::new(3, 7, 3, 3, 3, 1).unwrap();
    assert_eq!(spec.intrinsic(), 3);
    assert_eq!(spec.cheap(), 4);
    assert_eq!(spec.cheap_map(), vec![0, 0, 1, 1]);
    let (g, store) = build(1, |pb| GhostConv::build(pb, spec, false));
    let y = eval(&g, &store, &random_input(&[2, 3, 6, 6], 2));
    assert_eq!(y.shape(), &[2, 7, 6, 6]);
}

#[test]
fn ghost_with_null_cheap_branch_is_plain_conv_then_zeros() {
    let spec = GhostConvSpec::new(4, 8, 2, 3, 3, 1).unwrap();
    let (g, mut store) = build(3, |pb| GhostConv::build(pb, spec, true));
    store.param_mut(g.cheap).data_mut().fill(0.0);
    let x = random_input(&[1, 4, 5, 5], 4);
    let y = eval(&g, &store, &x);

    let mut tape = crate::tensor::Tape::new();
    let xv = tape.leaf(x, false);
    let w = tape.leaf(store.param(g.primary).clone(), false);
    let b = tape.leaf(store.param(g.bias.unwrap()).clone(), false);
    let plain = tape.conv2d(xv, w, Some(b), 1, 1).unwrap();
    let plain = tape.value(plain);
    let hw = 25;
    assert_eq!(&y.data()[..4 * hw], plain.data());
    assert!(y.data()[4 * hw..].iter().all(|&v| v == 0.0));
}

#[test]
fn ghost_cheap_maps_filter_their_intrinsic_map() {
    let spec = GhostConvSpec::new(2, 4, 2, 1, 3, 1).unwrap();
    let (g, store) = build(5, |pb| GhostConv::build(pb, spec, false));
    let y = eval(&g, &store, &random_input(&[1, 2, 4, 4], 6));
    // Output channels [0, 2) are the intrinsic maps themselves; channel 2 + q
    // must equal a 3x3 zero-padded filter of intrinsic channel q.
    let w = store.param(g.cheap);
    for q in 0..2 {
        for yy in 0..4 {
            for xx in 0..4 {
                let mut acc = 0.0f32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (yy as isize + dy - 1, xx as isize + dx - 1);
                        if (0..4).contains(&sy) && (0..4).contains(&sx) {
                            acc += w.data()[q * 9 + (dy * 3 + dx) as usize]
                                * y.at4(0, q, sy as usize, sx as usize);
                        }
                    }
                }
                assert!((acc - y.at4(0, 2 + q, yy, xx)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn focus_960_shape_law() {
    let (f, _) = build(0, |pb| Focus::build(pb, 3, 32, 3));
    let mut cost = Cost::default();
    assert_eq!(f.trace([1, 3, 960, 960], &mut cost), [1, 32, 480, 480]);
    assert_eq!(cost.macs, (480 * 480 * 32 * 12 * 9) as u64);
}

#[test]
fn focus_smallest_case_order() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = crate::tensor::Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let y = tape.focus_slice(xv).unwrap();
    // [[a,b],[c,d]] -> a, c, b, d
    assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
    assert_eq!(focus_deslice(tape.value(y)).unwrap(), x);
}

#[test]
fn focus_deslice_rejects_bad_channels() {
    assert!(focus_deslice(&Tensor::<f32>::zeros(&[1, 3, 2, 2])).is_err());
}

#[test]
fn conv_bn_act_stride_two_halves() {
    let (c, store) = build(0, |pb| ConvLayer::cba(pb, 3, 8, 3, 2, ConvStyle::Standard));
    let y = eval(&c, &store, &random_input(&[1, 3, 8, 6], 1));
    assert_eq!(y.shape(), &[1, 8, 4, 3]);
    assert_eq!(c.modules(), 3);
}

#[test]
fn ghost_style_preserves_shapes() {
    for style in [ConvStyle::Standard, ConvStyle::Ghost] {
        let (b, store) = build(0, |pb| BottleneckCsp::build(pb, CspSpec::new(8, 16, 2, true), style));
        let y = eval(&b, &store, &random_input(&[2, 8, 6, 6], 1));
        assert_eq!(y.shape(), &[2, 16, 6, 6]);
        let mut cost = Cost::default();
        assert_eq!(b.trace([2, 8, 6, 6], &mut cost), [2, 16, 6, 6]);
    }
}

#[test]
fn bottleneck_rejects_shortcut_channel_mismatch() {
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let r = Bottleneck::build(&mut pb, 4, 8, true, 1.0, ConvStyle::Standard);
    assert!(matches!(r, Err(Error::Spec(_))));
}

#[test]
fn bottleneck_zero_residual_is_identity_with_unit_stats() {
    let (b, mut store) = build(0, |pb| Bottleneck::build(pb, 4, 4, true, 0.5, ConvStyle::Standard));
    zero_params(&mut store, "");
    let x = random_input(&[1, 4, 5, 5], 2);
    // f(x) = silu(0) = 0 everywhere, so y = x exactly.
    assert_eq!(eval(&b, &store, &x), x);
}

#[test]
fn bottleneck_without_shortcut_ignores_residual() {
    let (b, mut store) = build(0, |pb| Bottleneck::build(pb, 4, 4, false, 0.5, ConvStyle::Standard));
    zero_params(&mut store, "");
    let y = eval(&b, &store, &random_input(&[1, 4, 5, 5], 2));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn csp_rejects_invalid_spec() {
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    assert!(BottleneckCsp::build(&mut pb, CspSpec::new(4, 1, 1, true), ConvStyle::Standard).is_err());
    assert!(C3::build(&mut pb, CspSpec::new(4, 8, 0, true), ConvStyle::Standard).is_err());
}

/// Silence path A at `silence`, then re-randomise everything upstream of it
/// on that path: the output must not change.
fn path_isolation<B: Block>(block: &B, store: &mut ParamStore<f32>, silence: &str, upstream: &[&str], cin: usize) {
    zero_params(store, silence);
    let x = random_input(&[1, cin, 6, 6], 3);
    let y0 = eval(block, store, &x);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<_> = store.param_ids().collect();
    let mut touched = 0;
    for id in ids {
        let name = store.params().nth(id.0).unwrap().0.to_string();
        if upstream.iter().any(|p| name.starts_with(p)) {
            let n = store.param(id).numel();
            let t = Tensor::uniform(&[n], -1.0, 1.0, &mut rng);
            store.param_mut(id).data_mut().copy_from_slice(t.data());
            touched += 1;
        }
    }
    assert!(touched > 0);
    assert_eq!(eval(block, store, &x), y0);
}

#[test]
fn csp_path_a_isolation() {
    let (b, mut store) = build(0, |pb| BottleneckCsp::build(pb, CspSpec::new(8, 8, 1, true), ConvStyle::Standard));
    path_isolation(&b, &mut store, "cv3", &["cv1", "m."], 8);
}

#[test]
fn c3_path_a_isolation() {
    let (b, mut store) = build(0, |pb| C3::build(pb, CspSpec::new(8, 8, 1, false), ConvStyle::Standard));
    path_isolation(&b, &mut store, "m.0.cv2", &["cv1", "m.0.cv1"], 8);
}

#[test]
fn spp_constant_input_gives_constant_output() {
    let (s, store) = build(0, |pb| Spp::build(pb, 4, 6));
    let x = Tensor::full(&[1, 4, 7, 7], 0.3f32);
    let y = eval(&s, &store, &x);
    assert_eq!(y.shape(), &[1, 6, 7, 7]);
    for c in 0..6 {
        let v = y.at4(0, c, 0, 0);
        for yy in 0..7 {
            for xx in 0..7 {
                assert!((y.at4(0, c, yy, xx) - v).abs() < 1e-6);
            }
        }
    }
    assert_eq!(s.modules(), 3 + 3 + 1 + 3);
}

#[test]
fn module_counts_follow_rule() {
    let (c3, _) = build(0, |pb| C3::build(pb, CspSpec::new(8, 8, 2, true), ConvStyle::Standard));
    assert_eq!(c3.modules(), 10 + 6 * 2);
    let (csp, _) = build(0, |pb| BottleneckCsp::build(pb, CspSpec::new(8, 8, 2, true), ConvStyle::Standard));
    assert_eq!(csp.modules(), 11 + 6 * 2);
    let (f, _) = build(0, |pb| Focus::build(pb, 3, 8, 3));
    assert_eq!(f.modules(), 4);
}

fn grad_err<B: Block>(block: &B, store: &ParamStore<f32>, shape: &[usize], seed: u64, p: Precision) -> f64 {
    let x = super::check::tie_free_input(block, store, shape, seed + 100, 1e-3).unwrap();
    check_block(block, store, &x, p, GradCheck::new(1e-3).five_point(), seed).unwrap()
}

#[test]
fn blocks_gradcheck_double() {
    let (c, s) = build(0, |pb| ConvLayer::cba(pb, 3, 4, 3, 2, ConvStyle::Standard));
    assert!(grad_err(&c, &s, &[2, 3, 6, 6], 0, Precision::Double) < 1e-6);
    let (g, s) = build(0, |pb| ConvLayer::cba(pb, 4, 6, 3, 1, ConvStyle::Ghost));
    assert!(grad_err(&g, &s, &[1, 4, 8, 8], 0, Precision::Double) < 1e-6);
    let (b, s) = build(0, |pb| Bottleneck::build(pb, 8, 8, true, 0.5, ConvStyle::Ghost));
    assert!(grad_err(&b, &s, &[1, 8, 8, 8], 0, Precision::Double) < 1e-6);
    let (b, s) = build(0, |pb| BottleneckCsp::build(pb, CspSpec::new(8, 8, 1, true), ConvStyle::Ghost));
    assert!(grad_err(&b, &s, &[1, 8, 8, 8], 0, Precision::Double) < 1e-6);
    let (sp, s) = build(0, |pb| Spp::build(pb, 8, 8));
    assert!(grad_err(&sp, &s, &[1, 8, 16, 16], 0, Precision::Double) < 1e-6);
}

#[test]
fn single_precision_gradients_track_double() {
    let (b, s) = build(1, |pb| C3::build(pb, CspSpec::new(8, 8, 1, true), ConvStyle::Standard));
    assert!(grad_err(&b, &s, &[1, 8, 8, 8], 1, Precision::Single) < 1e-3);
}

#[test]
fn tie_free_input_has_clear_pool_winners() {
    let (sp, s) = build(2, |pb| Spp::build(pb, 4, 4));
    let x = super::check::tie_free_input(&sp, &s, &[1, 4, 16, 16], 7, 1e-3).unwrap();
    assert!(super::check::pool_margin(&sp, &s, &x).unwrap() >= 1e-3);
    let (c, s) = build(2, |pb| ConvLayer::cba(pb, 4, 4, 1, 1, ConvStyle::Standard));
    assert_eq!(super::check::pool_margin(&c, &s, &random_input(&[1, 4, 4, 4], 0)).unwrap(), f64::INFINITY);
}
