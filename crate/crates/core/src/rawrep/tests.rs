use super::*;
use crate::isp::CfaPattern;
use crate::nn::gradcheck::{check_layer, random_input};
use crate::util::derive_rng;
use rand::Rng;

fn random_mosaic(seed: u64, width: usize, height: usize) -> CfaMosaic {
    let mut rng = derive_rng(seed, 0, 0);
    let samples = (0..width * height).map(|_| rng.gen_range(0..=65535u16)).collect();
    CfaMosaic::new(width, height, CfaPattern::Rggb, 16, 100, 65000, samples).unwrap()
}

#[test]
fn pack_40x40_gives_20x20x4() {
    let m = random_mosaic(1, 40, 40);
    let p = pack_mosaic(&m).unwrap();
    assert_eq!((p.width, p.height), (20, 20));
    assert_eq!(p.values.len(), 20 * 20 * 4);
}

#[test]
fn pack_2x2_is_one_quad() {
    let img = LinearImage::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let p = pack_image(&img).unwrap();
    assert_eq!(p.values, vec![0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn pack_rejects_odd_dimensions() {
    let img = LinearImage::new(2, 2, 1, vec![0.0; 4]).unwrap();
    let mut odd = img.clone();
    odd.width = 1;
    odd.height = 4;
    assert!(matches!(pack_image(&odd), Err(RawRepError::OddDimensions { .. })));
}

#[test]
fn pack_unpack_round_trips_random_mosaics() {
    for seed in 0..50 {
        let m = random_mosaic(seed, 16, 16);
        let p = pack_mosaic(&m).unwrap();
        let back = unpack(&p);
        let want: Vec<f64> = m.samples.iter().map(|&s| s as f64).collect();
        assert_eq!(back.values, want, "seed {seed}");
    }
}

#[test]
fn unpack_pack_round_trips_random_quads() {
    let mut rng = derive_rng(0x0417, 1, 0);
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..8usize), rng.gen_range(1..8usize));
        let values: Vec<f64> = (0..w * h * 4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p = PackedQuads::new(w, h, values).unwrap();
        let img = unpack(&p);
        assert_eq!(pack_image(&img).unwrap(), p);
    }
}

#[test]
fn pack_preserves_multiset_and_sum() {
    let m = random_mosaic(7, 12, 8);
    let p = pack_mosaic(&m).unwrap();
    let mut original: Vec<u16> = m.samples.clone();
    let mut packed: Vec<u16> = p.values.iter().map(|&v| v as u16).collect();
    original.sort_unstable();
    packed.sort_unstable();
    assert_eq!(original, packed);
    let sum_orig: f64 = m.samples.iter().map(|&s| s as f64).sum();
    let sum_packed: f64 = p.values.iter().sum();
    assert_eq!(sum_orig, sum_packed);
}

fn gates_filled(f: usize, weight: f64, bias: f64) -> BcaGates {
    BcaGates {
        spatial_weight: Tensor::filled(&[f, f], weight),
        spatial_bias: Tensor::filled(&[f], bias),
        color_weight: Tensor::filled(&[f, f], weight),
        color_bias: Tensor::filled(&[f], bias),
    }
}

#[test]
fn fuse_zero_gates_halve_inputs_exactly() {
    let spatial = random_input(&[2, 3, 4, 4], 11);
    let color = random_input(&[2, 3, 4, 4], 12);
    let (new_s, new_c) = bca_fuse(&spatial, &color, &gates_filled(3, 0.0, 0.0)).unwrap();
    for (y, &x) in new_s.data().iter().zip(spatial.data().iter()) {
        assert_eq!(*y, 0.5 * x);
    }
    for (y, &x) in new_c.data().iter().zip(color.data().iter()) {
        assert_eq!(*y, 0.5 * x);
    }
}

#[test]
fn fuse_zero_spatial_stays_zero() {
    let spatial = Tensor::zeros(&[1, 2, 3, 3]);
    let color = random_input(&[1, 2, 3, 3], 13);
    let (new_s, _) = bca_fuse(&spatial, &color, &gates_filled(2, 0.7, -0.3)).unwrap();
    assert!(new_s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fuse_scalar_case_by_hand() {
    // 1x1x1 maps: new_spatial = 2 * sigmoid(1*1 + 0) ≈ 1.4621.
    let spatial = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]);
    let color = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
    let (new_s, _) = bca_fuse(&spatial, &color, &gates_filled(1, 1.0, 0.0)).unwrap();
    assert!((new_s.data()[0] - 1.4621).abs() < 1e-4);
    let exact = 2.0 / (1.0 + (-1.0f64).exp());
    assert!((new_s.data()[0] - exact).abs() < 1e-12);
}

#[test]
fn fuse_output_never_exceeds_input_magnitude() {
    let spatial = random_input(&[2, 4, 5, 5], 21);
    let color = random_input(&[2, 4, 5, 5], 22);
    let gates = BcaGates {
        spatial_weight: random_input(&[4, 4], 23).reshape(&[4, 4]),
        spatial_bias: random_input(&[4], 24).reshape(&[4]),
        color_weight: random_input(&[4, 4], 25).reshape(&[4, 4]),
        color_bias: random_input(&[4], 26).reshape(&[4]),
    };
    let (new_s, new_c) = bca_fuse(&spatial, &color, &gates).unwrap();
    for (y, x) in new_s.data().iter().zip(spatial.data().iter()) {
        assert!(y.abs() <= x.abs());
    }
    for (y, x) in new_c.data().iter().zip(color.data().iter()) {
        assert!(y.abs() <= x.abs());
    }
}

#[test]
fn fuse_is_symmetric_under_branch_swap() {
    let a = random_input(&[1, 3, 4, 4], 31);
    let b = random_input(&[1, 3, 4, 4], 32);
    let gates = BcaGates {
        spatial_weight: random_input(&[3, 3], 33).reshape(&[3, 3]),
        spatial_bias: random_input(&[3], 34).reshape(&[3]),
        color_weight: random_input(&[3, 3], 35).reshape(&[3, 3]),
        color_bias: random_input(&[3], 36).reshape(&[3]),
    };
    let swapped = BcaGates {
        spatial_weight: gates.color_weight.clone(),
        spatial_bias: gates.color_bias.clone(),
        color_weight: gates.spatial_weight.clone(),
        color_bias: gates.spatial_bias.clone(),
    };
    let (s1, c1) = bca_fuse(&a, &b, &gates).unwrap();
    let (s2, c2) = bca_fuse(&b, &a, &swapped).unwrap();
    assert_eq!(s1, c2);
    assert_eq!(c1, s2);
}

#[test]
fn fuse_rejects_shape_mismatch() {
    let a = Tensor::zeros(&[1, 2, 4, 4]);
    let b = Tensor::zeros(&[1, 2, 2, 2]);
    assert!(matches!(
        bca_fuse(&a, &b, &gates_filled(2, 0.0, 0.0)),
        Err(RawRepError::FusionShape(_))
    ));
}

#[test]
fn pack_layer_matches_pack_op_and_inverts_in_backward() {
    let m = random_mosaic(41, 8, 6);
    let norm: Vec<f64> = m.samples.iter().map(|&s| s as f64).collect();
    let x = Tensor::from_vec(&[1, 1, 6, 8], norm);
    let mut layer = PackLayer::new();
    let y = layer.forward_train(x.clone());
    assert_eq!(y.shape(), &[1, 4, 3, 4]);
    // Planar channels agree with the interleaved op output.
    let p = pack_mosaic(&m).unwrap();
    for k in 0..4 {
        for py in 0..3 {
            for px in 0..4 {
                assert_eq!(y.data()[(k * 3 + py) * 4 + px], p.at(px, py, k));
            }
        }
    }
    // Packing is a permutation: backward of the packed tensor is the input.
    let dx = layer.backward(y);
    assert_eq!(dx, x);
}

#[test]
fn frontend_output_shape_matches_packed_dims() {
    let mut rng = derive_rng(1, 2, 3);
    let frontend = BcaFrontend::new(&mut rng);
    let x = random_input(&[2, 1, 40, 40], 55);
    let y = frontend.forward_eval(x);
    assert_eq!(y.shape(), &[2, BCA_MERGE_CHANNELS, 20, 20]);
}

#[test]
fn frontend_with_zero_gates_equals_gate_free_merge() {
    let mut rng = derive_rng(4, 5, 6);
    let mut frontend = BcaFrontend::new(&mut rng);
    frontend.gate_spatial.weight.value.fill(0.0);
    frontend.gate_spatial.bias.value.fill(0.0);
    frontend.gate_color.weight.value.fill(0.0);
    frontend.gate_color.bias.value.fill(0.0);

    let x = random_input(&[1, 1, 8, 8], 57);
    let got = frontend.forward_eval(x.clone());

    let mut spatial = frontend
        .downscale
        .forward_eval(frontend.spatial_stem.forward_eval(x.clone()));
    let mut color = frontend.color_stem.forward_eval(frontend.pack.forward_eval(x));
    spatial.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    color.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    let want = frontend.merge.forward_eval(concat_channels(&spatial, &color));
    assert_eq!(got, want);
}

#[test]
fn frontend_is_deterministic() {
    let mut rng = derive_rng(7, 8, 9);
    let frontend = BcaFrontend::new(&mut rng);
    let x = random_input(&[1, 1, 16, 16], 58);
    let a = frontend.forward_eval(x.clone());
    let b = frontend.forward_eval(x);
    assert_eq!(a, b);
}

#[test]
fn frontend_internal_fuse_matches_standalone_op() {
    let mut rng = derive_rng(10, 11, 12);
    let mut frontend = BcaFrontend::new(&mut rng);
    let x = random_input(&[1, 1, 8, 8], 59);
    let spatial = frontend
        .downscale
        .forward_eval(frontend.spatial_stem.forward_eval(x.clone()));
    let color = frontend.color_stem.forward_eval(frontend.pack.forward_eval(x.clone()));
    let (want_s, want_c) = bca_fuse(&spatial, &color, &frontend.fuse_gates()).unwrap();

    // Pull the fused maps out of forward_train's cache by recomputing the
    // gating exactly as the layer does.
    let _ = frontend.forward_train(x);
    let cache = frontend.cache.as_ref().unwrap();
    assert_eq!(cache.spatial.hadamard(&cache.gate_for_spatial), want_s);
    assert_eq!(cache.color.hadamard(&cache.gate_for_color), want_c);
}

#[test]
fn fuse_and_frontend_pass_gradient_checks() {
    let mut rng = derive_rng(13, 14, 15);
    let mut frontend = BcaFrontend::new(&mut rng);
    let x = random_input(&[2, 1, 8, 8], 60);
    let report = check_layer(&mut frontend, &x, 61, 1e-5);
    assert!(
        report.passes(1e-4),
        "worst {} rel err {:.3e}",
        report.worst,
        report.max_rel_err
    );
}
