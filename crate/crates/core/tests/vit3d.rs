use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volta_core::numcore::{grad_check, GradCheckConfig, NdArray, Tape, Var};
use volta_core::vit3d::*;
use volta_core::volio::Grid3;

fn cfg(patch: usize, dim: usize, out_dim: usize, depth: usize) -> ModelConfig {
    ModelConfig {
        patch,
        dim,
        depth,
        heads: 2,
        mlp_ratio: 2,
        out_dim,
        summariser_heads: 8,
        pos_grid: [4, 4, 4],
        init_std: 0.2,
    }
}

fn random_grid(extent: [usize; 3], seed: u64) -> Grid3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = extent.iter().product();
    Grid3::new(extent, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_array(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn embedding_shape_and_bias_rows() {
    let c = cfg(4, 8, 32, 1);
    let mut p = ModelParams::init(&c, 0).unwrap();
    p.embed_bias = NdArray::from_fn(&[8], |i| i as f64);
    p.pos_embed = NdArray::zeros(&[64, 8]);
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let tokens = patchify_embed(&mut t, &v, &c, &Grid3::filled([16; 3], 0.0)).unwrap();
    assert_eq!(t.value(tokens).shape(), &[64, 8]);
    for r in 0..64 {
        assert_eq!(t.value(tokens).row(r), p.embed_bias.data());
    }
}

#[test]
fn embedding_is_local_to_patches() {
    let c = cfg(4, 8, 32, 1);
    let p = ModelParams::init(&c, 1).unwrap();
    let a = random_grid([16; 3], 0);
    let mut b = a.clone();
    // Voxel (5, 9, 2) lies in patch (1, 2, 0), token 1 + 4 * 2 = 9.
    let i = b.index(5, 9, 2);
    b.data[i] += 0.5;
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let ta = patchify_embed(&mut t, &v, &c, &a).unwrap();
    let tb = patchify_embed(&mut t, &v, &c, &b).unwrap();
    for r in 0..64 {
        assert_eq!(t.value(ta).row(r) == t.value(tb).row(r), r != 9, "row {r}");
    }
}

#[test]
fn indivisible_extent_is_rejected() {
    let c = cfg(4, 8, 32, 1);
    let p = ModelParams::init(&c, 0).unwrap();
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    assert!(matches!(
        patchify_embed(&mut t, &v, &c, &Grid3::filled([16, 16, 10], 0.0)),
        Err(ModelError::Indivisible { .. })
    ));
}

#[test]
fn zero_depth_encoder_is_identity() {
    let c = cfg(4, 8, 32, 0);
    let p = ModelParams::init(&c, 2).unwrap();
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let x = t.constant(random_array(&[10, 8], &mut ChaCha8Rng::seed_from_u64(0)));
    assert_eq!(encode(&mut t, &v, &c, x).unwrap(), x);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let c = cfg(4, 16, 32, 2);
    let p = ModelParams::init(&c, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_array(&[12, 16], &mut rng);
    let perm: Vec<usize> = {
        let mut idx: Vec<usize> = (0..12).collect();
        idx.reverse();
        idx.swap(0, 5);
        idx
    };
    let px = NdArray::from_fn(&[12, 16], |i| x.get(&[perm[i / 16], i % 16]));
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let xa = t.constant(x);
    let xb = t.constant(px);
    let ya = encode(&mut t, &v, &c, xa).unwrap();
    let yb = encode(&mut t, &v, &c, xb).unwrap();
    for r in 0..12 {
        for (a, b) in t.value(ya).row(perm[r]).iter().zip(t.value(yb).row(r)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let c = cfg(2, 8, 4, 2);
    let p = ModelParams::init(&c, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_array(&[6, 8], &mut rng);
    let probe = random_array(&[6, 8], &mut rng);
    let block_params: Vec<NdArray> = p.blocks.iter().flat_map(p_block_values).collect();
    let depth = c.depth;
    let report = grad_check(
        |t: &mut Tape, vars: &[Var]| -> Result<Var, ModelError> {
            let mut m = p.to_tape(t, false);
            let mut it = vars.iter().copied();
            for b in 0..depth {
                m.blocks[b] = block_from(&mut it);
            }
            let xi = t.constant(x.clone());
            let y = encode(t, &m, &c, xi)?;
            let w = t.constant(probe.clone());
            let s = t.mul(y, w)?;
            Ok(t.sum(s))
        },
        &block_params,
        // Round-off in the summed output is ~1e-10 per step, so tiny gradients need a floor.
        &GradCheckConfig { max_samples: Some(300), abs_floor: 1e-5, ..GradCheckConfig::default() },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn p_block_values(b: &Block<NdArray>) -> Vec<NdArray> {
    vec![
        b.ln1_gain.clone(),
        b.ln1_bias.clone(),
        b.qkv_weight.clone(),
        b.qkv_bias.clone(),
        b.proj_weight.clone(),
        b.proj_bias.clone(),
        b.ln2_gain.clone(),
        b.ln2_bias.clone(),
        b.fc1_weight.clone(),
        b.fc1_bias.clone(),
        b.fc2_weight.clone(),
        b.fc2_bias.clone(),
    ]
}

fn block_from(it: &mut impl Iterator<Item = Var>) -> Block<Var> {
    let mut n = || it.next().unwrap();
    Block {
        ln1_gain: n(),
        ln1_bias: n(),
        qkv_weight: n(),
        qkv_bias: n(),
        proj_weight: n(),
        proj_bias: n(),
        ln2_gain: n(),
        ln2_bias: n(),
        fc1_weight: n(),
        fc1_bias: n(),
        fc2_weight: n(),
        fc2_bias: n(),
    }
}

#[test]
fn summariser_shapes_and_unit_features() {
    let c = cfg(4, 16, 32, 1);
    let p = ModelParams::init(&c, 7).unwrap();
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let x = t.constant(random_array(&[64, 16], &mut ChaCha8Rng::seed_from_u64(1)));
    let out = summarise(&mut t, &v, &c, x).unwrap();
    assert_eq!(t.value(out.global).shape(), &[1, 32]);
    assert_eq!(t.value(out.patches).shape(), &[64, 32]);
    let f = t.value(out.features);
    for r in 0..65 {
        let norm: f64 = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn cls_ignores_patches_when_attention_is_zeroed() {
    let c = cfg(4, 16, 32, 1);
    let mut p = ModelParams::init(&c, 8).unwrap();
    let s = &mut p.summariser;
    for a in
        [&mut s.qkv_weight, &mut s.qkv_bias, &mut s.proj_weight, &mut s.proj_bias, &mut s.fc2_weight, &mut s.fc2_bias]
    {
        *a = NdArray::zeros(a.shape());
    }
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xa = t.constant(random_array(&[64, 16], &mut rng));
    let xb = t.constant(random_array(&[8, 16], &mut rng));
    let ga = summarise(&mut t, &v, &c, xa).unwrap().global;
    let gb = summarise(&mut t, &v, &c, xb).unwrap().global;
    assert_eq!(t.value(ga), t.value(gb));
}

#[test]
fn decoder_restores_view_extent() {
    let c = cfg(4, 8, 32, 1);
    let p = ModelParams::init(&c, 9).unwrap();
    let view = random_grid([16, 8, 12], 3);
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let tokens = patchify_embed(&mut t, &v, &c, &view).unwrap();
    let rec = decode(&mut t, &v, tokens).unwrap();
    let grid = c.grid_for(view.extent).unwrap();
    assert_eq!(unpatchify(t.value(rec), grid, 4).unwrap().extent, view.extent);
}

#[test]
fn pseudo_inverse_decoder_reconstructs_input() {
    let c = ModelConfig { pos_grid: [4, 4, 4], ..cfg(2, 16, 32, 0) };
    let mut p = ModelParams::init(&c, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    p.embed_weight = random_array(&[8, 16], &mut rng);
    p.embed_bias = random_array(&[16], &mut rng);
    p.pos_embed = NdArray::zeros(&[64, 16]);
    let we = DMatrix::from_row_slice(8, 16, p.embed_weight.data());
    let pinv = we.clone().pseudo_inverse(1e-12).unwrap();
    let be = DMatrix::from_row_slice(1, 16, p.embed_bias.data());
    let bd = -(&be * &pinv);
    p.decoder_weight = NdArray::from_fn(&[16, 8], |i| pinv[(i / 8, i % 8)]);
    p.decoder_bias = NdArray::from_fn(&[8], |i| bd[(0, i)]);

    let view = random_grid([8, 8, 8], 12);
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let tokens = patchify_embed(&mut t, &v, &c, &view).unwrap();
    let encoded = encode(&mut t, &v, &c, tokens).unwrap();
    let rec = decode(&mut t, &v, encoded).unwrap();
    let back = unpatchify(t.value(rec), [4, 4, 4], 2).unwrap();
    for (a, b) in back.data.iter().zip(&view.data) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn masked_reconstruction_gradient_matches_finite_differences() {
    let c = cfg(2, 8, 4, 1);
    let p = ModelParams::init(&c, 13).unwrap();
    let view = random_grid([4, 4, 4], 14);
    let mask: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let target = patchify(&view, 2).unwrap();
    let mask_rows = patchify_mask(&mask, [4, 4, 4], 2).unwrap();
    let report = grad_check(
        |t: &mut Tape, vars: &[Var]| -> Result<Var, ModelError> {
            let mut m = p.to_tape(t, false);
            m.decoder_weight = vars[0];
            m.decoder_bias = vars[1];
            let tokens = patchify_embed(t, &m, &c, &view)?;
            let y = encode(t, &m, &c, tokens)?;
            let rec = decode(t, &m, y)?;
            let tgt = t.constant(target.clone());
            Ok(t.l2_loss(rec, tgt, Some(&mask_rows))?)
        },
        &[p.decoder_weight.clone(), p.decoder_bias.clone()],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn local_grids_interpolate_positional_embeddings() {
    let c = cfg(4, 8, 32, 1);
    let p = ModelParams::init(&c, 15).unwrap();
    let mut t = Tape::new();
    let v = p.to_tape(&mut t, false);
    let out = forward(&mut t, &v, &c, &random_grid([8, 8, 8], 0)).unwrap();
    assert_eq!(out.grid, [2, 2, 2]);
    assert_eq!(t.value(out.patches).shape(), &[8, 32]);
}

#[test]
fn forward_is_deterministic() {
    let c = cfg(4, 16, 32, 2);
    let p = ModelParams::init(&c, 16).unwrap();
    let view = random_grid([16; 3], 1);
    let run = || {
        let mut t = Tape::new();
        let v = p.to_tape(&mut t, false);
        let out = forward(&mut t, &v, &c, &view).unwrap();
        (t.value(out.global).clone(), t.value(out.patches).clone())
    };
    assert_eq!(run(), run());
}

/// Output shapes across extents, patch edges, widths and head sizes.
#[test]
fn shape_contract_grid() {
    for extent in [8usize, 16, 32] {
        for patch in [2usize, 4] {
            for dim in [16usize, 64] {
                for out_dim in [32usize, 256] {
                    let c = ModelConfig {
                        patch,
                        dim,
                        out_dim,
                        depth: 1,
                        pos_grid: [4, 4, 4],
                        ..cfg(patch, dim, out_dim, 1)
                    };
                    let p = ModelParams::init(&c, 0).unwrap();
                    let view = random_grid([extent; 3], 0);
                    let mut t = Tape::new();
                    let v = p.to_tape(&mut t, false);
                    let out = forward(&mut t, &v, &c, &view).unwrap();
                    let n = (extent / patch).pow(3);
                    assert_eq!(t.value(out.tokens).shape(), &[n, dim]);
                    assert_eq!(t.value(out.global).shape(), &[1, out_dim]);
                    assert_eq!(t.value(out.patches).shape(), &[n, out_dim]);
                    let rec = decode(&mut t, &v, out.tokens).unwrap();
                    assert_eq!(unpatchify(t.value(rec), out.grid, patch).unwrap().extent, [extent; 3]);
                }
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = cfg(4, 16, 32, 2);
    let s = ModelParams::init(&c, 1).unwrap();
    let te = ModelParams::init(&c, 2).unwrap();
    let mut ck = Checkpoint::from_models(&c, 42, &s, &te);
    ck.push("center.global", NdArray::from_fn(&[32], |i| i as f64 * 0.1));
    let bytes = write_checkpoint(&ck);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.step, 42);
    assert_eq!(back.model("student").unwrap(), s);
    assert_eq!(back.model("teacher").unwrap(), te);
    for (a, b) in back.model("student").unwrap().values().iter().zip(s.values()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for len in [0, 7, 20, bytes.len() - 1] {
        assert!(read_checkpoint(&bytes[..len]).is_err());
    }
}

#[test]
fn checkpoint_config_mismatch_names_both_shapes() {
    let c = cfg(4, 16, 32, 1);
    let ck = Checkpoint::from_models(&c, 0, &ModelParams::init(&c, 0).unwrap(), &ModelParams::init(&c, 0).unwrap());
    let other = ModelConfig { out_dim: 64, ..c };
    let err = ck.model_as("teacher", &other).unwrap_err().to_string();
    assert!(err.contains("[64, 16]") && err.contains("[32, 16]"), "{err}");
}
