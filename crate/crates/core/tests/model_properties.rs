use deshadow::model::{
    decompose, fuse, Decoder, FeatureBundle, Grid, Modality, ModelDims, ShadowRemover,
    SphereLinear, SwinBlock,
};
use deshadow::params::{ParamId, ParamStore, Params};
use deshadow::sphere::SphericalConfig;
use deshadow::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn set(store: &mut ParamStore, id: ParamId, data: Vec<f64>) {
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = Tensor::new(shape, data).unwrap().with_grad();
}

/// Perturbs a span of entries unevenly (a uniform shift would vanish under
/// layer normalisation).
fn nudge(t: &Tensor, range: std::ops::Range<usize>, by: f64) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |i| {
        t.data()[i]
            + if range.contains(&i) {
                by * (i - range.start + 1) as f64
            } else {
                0.0
            }
    })
}

fn small_dims() -> ModelDims {
    ModelDims {
        embed_dim: 8,
        num_heads: 2,
        window_size: 2,
        num_blocks: 2,
        patch_size: 2,
        decoder_blocks: 2,
    }
}

/// One 2x2 window, one head, Q = K = V = X and an identity projection:
/// the output must be softmax(X Xᵀ / √2) X computed by hand.
#[test]
fn two_by_two_attention_by_hand() {
    let mut store = ParamStore::new();
    let block = SwinBlock::new(&mut store, "b", 2, 1, 2, &mut rng(1)).unwrap();
    let qkv: Vec<f64> = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    set(&mut store, block.qkv.weight, qkv);
    set(&mut store, block.rel_bias, vec![0.0; 9]);
    set(&mut store, block.proj.weight, vec![1.0, 0.0, 0.0, 1.0]);

    let x = [[0.5, -1.0], [0.2, 0.3], [-0.7, 0.1], [1.0, 0.4]];
    let mut tape = Tape::new();
    let mut p = Params::frozen(&store);
    let xv = tape.constant(Tensor::new([4, 2], x.concat()).unwrap());
    let grid = Grid {
        height: 2,
        width: 2,
    };
    let (out, attn) = block.attention(&mut tape, &mut p, xv, grid, false).unwrap();

    for i in 0..4 {
        let scores: Vec<f64> = (0..4)
            .map(|j| (x[i][0] * x[j][0] + x[i][1] * x[j][1]) / 2f64.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, ej) in e.iter().enumerate() {
            assert!((tape.data(attn)[i * 4 + j] - ej / z).abs() < 1e-12);
        }
        for c in 0..2 {
            let want: f64 = e.iter().zip(&x).map(|(ej, xj)| ej / z * xj[c]).sum();
            assert!((tape.data(out)[i * 2 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn unshifted_windows_do_not_mix() {
    let mut store = ParamStore::new();
    let block = SwinBlock::new(&mut store, "b", 4, 2, 2, &mut rng(2)).unwrap();
    let grid = Grid {
        height: 4,
        width: 4,
    };
    let mut r = rng(3);
    let x = uniform(&mut r, &[16, 4], -1.0, 1.0);
    // Token (0, 0) lives in the top-left window with tokens 1, 4 and 5.
    let y = nudge(&x, 0..4, 0.5);
    let run = |t: &Tensor| {
        let mut tape = Tape::new();
        let mut p = Params::frozen(&store);
        let v = tape.constant(t.clone());
        let o = block
            .forward_tokens(&mut tape, &mut p, v, grid, false)
            .unwrap();
        tape.value(o).clone()
    };
    let (a, b) = (run(&x), run(&y));
    for tok in 0..16 {
        let same = a.data()[tok * 4..tok * 4 + 4] == b.data()[tok * 4..tok * 4 + 4];
        assert_eq!(same, ![0, 1, 4, 5].contains(&tok), "token {tok}");
    }
}

#[test]
fn shift_mask_stops_wraparound_mixing() {
    // After the cyclic shift the corner token (3, 3) shares a window with
    // (0, 0), (0, 3) and (3, 0), none of which are its spatial neighbours.
    let mut store = ParamStore::new();
    let block = SwinBlock::new(&mut store, "b", 4, 2, 2, &mut rng(4)).unwrap();
    let grid = Grid {
        height: 4,
        width: 4,
    };
    let mut r = rng(5);
    let x = uniform(&mut r, &[16, 4], -1.0, 1.0);
    let y = nudge(&x, 60..64, -0.8);
    let run = |t: &Tensor| {
        let mut tape = Tape::new();
        let mut p = Params::frozen(&store);
        let v = tape.constant(t.clone());
        let o = block
            .forward_tokens(&mut tape, &mut p, v, grid, true)
            .unwrap();
        tape.value(o).clone()
    };
    let (a, b) = (run(&x), run(&y));
    for tok in 0..15 {
        assert_eq!(
            a.data()[tok * 4..tok * 4 + 4],
            b.data()[tok * 4..tok * 4 + 4],
            "token {tok}"
        );
    }
}

#[test]
fn fused_output_ignores_private_infrared_features() {
    let dims = small_dims();
    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut store, "dec", &dims, &mut rng(6)).unwrap();
    let half = dims.half();
    let shape = [half, 2, 4];
    let mut r = rng(7);
    let va = uniform(&mut r, &shape, -1.0, 1.0);
    let vs = uniform(&mut r, &shape, -1.0, 1.0);
    let ia = uniform(&mut r, &shape, -1.0, 1.0);
    let skip = uniform(&mut r, &[3, 4, 8], 0.0, 1.0);
    let run = |is: &Tensor| {
        let mut tape = Tape::new();
        let mut p = Params::frozen(&store);
        let vis = FeatureBundle {
            align: tape.constant(va.clone()),
            separ: tape.constant(vs.clone()),
            modality: Modality::Visible,
        };
        let ir = FeatureBundle {
            align: tape.constant(ia.clone()),
            separ: tape.constant(is.clone()),
            modality: Modality::Infrared,
        };
        let out = fuse(&mut tape, &mut p, &decoder, &vis, &ir, Some(&skip)).unwrap();
        tape.value(out).clone()
    };
    let reference = run(&uniform(&mut r, &shape, -1.0, 1.0));
    for _ in 0..100 {
        let scale = r.random_range(0.1..100.0);
        let is = uniform(&mut r, &shape, -scale, scale);
        assert_eq!(run(&is).data(), reference.data());
    }
}

#[test]
fn fuse_rejects_swapped_modalities() {
    let dims = small_dims();
    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut store, "dec", &dims, &mut rng(8)).unwrap();
    let mut tape = Tape::new();
    let mut p = Params::frozen(&store);
    let f = tape.constant(Tensor::zeros([4, 2, 2]));
    let vis = FeatureBundle {
        align: f,
        separ: f,
        modality: Modality::Visible,
    };
    let ir = FeatureBundle {
        modality: Modality::Infrared,
        ..vis
    };
    assert!(fuse(&mut tape, &mut p, &decoder, &ir, &vis, None).is_err());
    assert!(fuse(&mut tape, &mut p, &decoder, &vis, &ir, None).is_ok());
}

#[test]
fn decomposition_splits_channels_in_half() {
    let mut store = ParamStore::new();
    let lin = SphereLinear::identity(&mut store, "s", 3);
    let cfg = SphericalConfig::new(1.0, 3).unwrap();
    let mut r = rng(9);
    let feat = uniform(&mut r, &[6, 2, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let mut p = Params::frozen(&store);
    let f = tape.constant(feat.clone());
    let d = decompose(&mut tape, &mut p, f, &lin, &cfg, Modality::Visible).unwrap();
    let joined = tape.concat(&[d.psi.align, d.psi.separ], 0).unwrap();
    assert_eq!(tape.data(joined), feat.data());
    assert_eq!(tape.shape(d.psi_hat.align), &[3, 2, 3]);
    assert_eq!(tape.shape(d.psi_hat.separ), &[3, 2, 3]);
    assert_eq!(d.psi_hat.modality, Modality::Visible);

    let odd = tape.constant(Tensor::zeros([5, 2, 2]));
    assert!(decompose(&mut tape, &mut p, odd, &lin, &cfg, Modality::Visible).is_err());
}

#[test]
fn identity_sphere_map_returns_columns_to_the_sphere() {
    // With W = I and b = 0 the transform is exp(log(x̂)): every output
    // column lies on the sphere of the configured radius.
    let mut store = ParamStore::new();
    let lin = SphereLinear::identity(&mut store, "s", 4);
    let cfg = SphericalConfig::new(2.5, 4).unwrap();
    let mut r = rng(10);
    let feat = uniform(&mut r, &[8, 3, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let mut p = Params::frozen(&store);
    let f = tape.constant(feat);
    let d = decompose(&mut tape, &mut p, f, &lin, &cfg, Modality::Infrared).unwrap();
    let v = tape.value(d.psi_hat.separ);
    for col in 0..9 {
        let n: f64 = (0..4)
            .map(|c| v.data()[c * 9 + col].powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((n - 2.5).abs() < 1e-9);
    }
}

#[test]
fn remover_handles_sizes_off_the_grid() {
    let mut store = ParamStore::new();
    let model = ShadowRemover::new(small_dims(), 1.0, &mut store, &mut rng(11)).unwrap();
    let mut r = rng(12);
    for (h, w) in [(5, 7), (8, 8), (9, 4)] {
        let vis = uniform(&mut r, &[3, h, w], 0.0, 1.0);
        let ir = uniform(&mut r, &[1, h, w], 0.0, 1.0);
        let out = model.infer(&store, &vis, &ir).unwrap();
        assert_eq!(out.shape(), &[3, h, w]);
        assert!(out
            .data()
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
    let vis = Tensor::zeros([3, 4, 4]);
    assert!(model
        .infer(&store, &vis, &Tensor::zeros([1, 4, 5]))
        .is_err());
}

#[test]
fn residual_remover_starts_near_identity() {
    let mut store = ParamStore::new();
    let model = ShadowRemover::new(small_dims(), 1.0, &mut store, &mut rng(13)).unwrap();
    let mut r = rng(14);
    let vis = uniform(&mut r, &[3, 8, 8], 0.1, 0.9);
    let ir = uniform(&mut r, &[1, 8, 8], 0.1, 0.9);
    let out = model.infer(&store, &vis, &ir).unwrap();
    assert!(out.max_abs_diff(&vis) < 0.1);
}
