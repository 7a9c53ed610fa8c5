use fas_core::backbone::{
    gpsa_attention, init_locality, positional_scores, spiral_offsets, vanilla_attention, AttentionMode,
    AttentionOptions, AttentionParams, Backbone, BackboneConfig, RelPosEncoding,
};
use fas_core::params::{Bound, ParamStore};
use fas_core::tensor::{check_gradients, GradCheckConfig, Real, Tape, Tensor};
use fas_core::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
    Image::new(size, size, 3, data).unwrap()
}

fn build<T: Real>(cfg: &BackboneConfig, seed: u64) -> (Backbone, ParamStore<T>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::new(cfg, &mut store, &mut rng).unwrap();
    (bb, store)
}

fn set_gates<T: Real>(bb: &Backbone, store: &mut ParamStore<T>, value: f64) {
    for block in bb.gpsa_blocks() {
        let gate = block.attn.positional.unwrap().gate;
        store
            .get_mut(gate)
            .data_mut()
            .iter_mut()
            .for_each(|g| *g = T::lit(value));
    }
}

#[test]
fn patch_embedding_counts_and_locality() {
    let cfg = BackboneConfig::default();
    let (bb, mut store) = build::<f64>(&cfg, 1);
    assert_eq!(bb.grid().num_patches(), 16);
    // non-zero bias so "equals the bias" is a real check
    let bias = bb.patch_embed.bias.unwrap();
    store
        .get_mut(bias)
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, b)| *b = 0.01 * i as f64 - 0.3);
    let bias_row = store.get(bias).data().to_vec();

    let zero = Image::zeros(32, 32, 3);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let emb = bb.patch_embed(&mut tape, &bound, &[&zero]).unwrap();
    let v = tape.value(emb);
    assert_eq!(v.shape(), &[16, 64]);
    for r in 0..16 {
        assert_eq!(v.row(r), bias_row.as_slice());
    }

    // single lit pixel at (y=13, x=21): grid cell (1, 2) -> patch 6
    let mut one_hot = Image::zeros(32, 32, 3);
    one_hot.set(13, 21, 1, 1.0);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let emb = bb.patch_embed(&mut tape, &bound, &[&one_hot]).unwrap();
    let v = tape.value(emb);
    let differing: Vec<usize> = (0..16).filter(|&r| v.row(r) != bias_row.as_slice()).collect();
    assert_eq!(differing, vec![6]);
}

#[test]
fn image_size_mismatch_is_config_error() {
    let (bb, store) = build::<f32>(&BackboneConfig::toy(), 2);
    let wrong = Image::zeros(32, 32, 3);
    let err = bb.features(&store, &wrong).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

/// Single-layer harness for the attention oracles.
struct Layer<T> {
    store: ParamStore<T>,
    attn: AttentionParams,
}

fn layer<T: Real>(dim: usize, heads: usize, seed: u64) -> Layer<T> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = AttentionParams::new(&mut store, "attn", dim, heads, true, &mut rng).unwrap();
    Layer { store, attn }
}

#[test]
fn two_patch_attention_by_enumeration() {
    // P = 2 patches side by side, d = 1, one head, hand-set weights.
    let mut l = layer::<f64>(1, 1, 3);
    let (wq, wk, wv, wo, bo) = (0.7, -1.3, 0.9, 1.5, 0.2);
    let v_pos = [-0.4, 1.1, 0.3];
    let lambda: f64 = 0.25;
    l.store.get_mut(l.attn.w_q).data_mut()[0] = wq;
    l.store.get_mut(l.attn.w_k).data_mut()[0] = wk;
    l.store.get_mut(l.attn.w_v).data_mut()[0] = wv;
    l.store.get_mut(l.attn.w_o.weight).data_mut()[0] = wo;
    l.store.get_mut(l.attn.w_o.bias.unwrap()).data_mut()[0] = bo;
    let gate = l.attn.positional.unwrap();
    l.store.get_mut(gate.v_pos).data_mut().copy_from_slice(&v_pos);
    l.store.get_mut(gate.gate).data_mut()[0] = lambda;

    let xs = [0.8, -0.5];
    // r_ij for patches at (0,0) and (0,1)
    let r = |i: usize, j: usize| -> [f64; 3] {
        let dx = j as f64 - i as f64;
        [dx * dx, dx, 0.0]
    };
    let rel_rows: Vec<f64> = (0..2).flat_map(|i| (0..2).flat_map(move |j| r(i, j))).collect();

    let mut tape = Tape::new();
    let bound = l.store.bind(&mut tape);
    let x = tape.constant(Tensor::new(vec![2, 1], xs.to_vec()).unwrap());
    let rel = tape.constant(Tensor::new(vec![4, 3], rel_rows).unwrap());
    let out = gpsa_attention(&mut tape, &bound, &l.attn, rel, x, 1, 2, AttentionOptions::default()).unwrap();
    let a = tape.value(out.maps[0]);

    let sigma = 1.0 / (1.0 + (-lambda).exp());
    let mut want_out = [0.0; 2];
    for i in 0..2 {
        let c: Vec<f64> = (0..2).map(|j| (xs[i] * wq * xs[j] * wk).exp()).collect();
        let cz: f64 = c.iter().sum();
        let p: Vec<f64> = (0..2)
            .map(|j| {
                let rij = r(i, j);
                (v_pos[0] * rij[0] + v_pos[1] * rij[1] + v_pos[2] * rij[2]).exp()
            })
            .collect();
        let pz: f64 = p.iter().sum();
        let mut acc = 0.0;
        for j in 0..2 {
            let aij = (1.0 - sigma) * c[j] / cz + sigma * p[j] / pz;
            assert!((a.at(i, j) - aij).abs() < 1e-14, "A[{i}][{j}]");
            acc += aij * xs[j] * wv;
        }
        want_out[i] = acc * wo + bo;
    }
    let got = tape.value(out.output).data();
    for i in 0..2 {
        assert!((got[i] - want_out[i]).abs() < 1e-14);
    }
}

#[test]
fn closed_gate_matches_vanilla_attention() {
    let mut l = layer::<f64>(8, 2, 4);
    let gate = l.attn.positional.unwrap().gate;
    l.store.get_mut(gate).data_mut().iter_mut().for_each(|g| *g = -30.0);
    let grid = fas_core::backbone::PatchGrid::new(16, 4, 3, 8).unwrap();
    let rel_table = RelPosEncoding::new(&grid).to_tensor::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x_data: Tensor<f64> = Tensor::from_fn(&[32, 8], |_| rng.random_range(-1.0..1.0));

    let mut tape = Tape::new();
    let bound = l.store.bind(&mut tape);
    let x = tape.constant(x_data);
    let rel = tape.constant(rel_table);
    let g = gpsa_attention(&mut tape, &bound, &l.attn, rel, x, 2, 16, AttentionOptions::default()).unwrap();
    let v = vanilla_attention(&mut tape, &bound, &l.attn, x, 2, 16, AttentionOptions::default()).unwrap();
    let diff = tape.value(g.output).max_abs_diff(tape.value(v.output));
    assert!(diff < 1e-6, "max diff {diff}");
}

#[test]
fn attention_rows_stochastic_and_convex() {
    let cfg = BackboneConfig::default();
    let (bb, mut store) = build::<f32>(&cfg, 6);
    // move gates away from the init so C and Pos both matter
    set_gates(&bb, &mut store, -0.3);
    let imgs = [random_image(32, 7), random_image(32, 8)];
    let refs: Vec<&Image> = imgs.iter().collect();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = bb.forward(&mut tape, &bound, &refs, AttentionMode::Configured).unwrap();
    let p = bb.grid().num_patches();
    for att in &out.attention {
        for (h, &map) in att.maps.iter().enumerate() {
            let a = tape.value(map);
            for r in 0..a.rows() {
                let s: f32 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            }
            if let Some(&pos) = att.positional.get(h) {
                let c = tape.value(att.content[h]);
                let pz = tape.value(pos);
                for r in 0..a.rows() {
                    for j in 0..p {
                        let (cv, pv, av) = (c.at(r, j), pz.at(r % p, j), a.at(r, j));
                        let slack = 1e-6;
                        assert!(av >= cv.min(pv) - slack && av <= cv.max(pv) + slack);
                    }
                }
            }
        }
    }
}

fn shuffle_patches(img: &Image, patch: usize, perm: &[usize]) -> Image {
    let grid = img.width() / patch;
    let mut out = img.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = (dst / grid * patch, dst % grid * patch);
        let (sy, sx) = (src / grid * patch, src % grid * patch);
        for y in 0..patch {
            for x in 0..patch {
                for c in 0..img.channels() {
                    out.set(dy + y, dx + x, c, img.get(sy + y, sx + x, c));
                }
            }
        }
    }
    out
}

#[test]
fn open_gate_attention_ignores_content() {
    let cfg = BackboneConfig::default();
    let (bb, mut store) = build::<f32>(&cfg, 9);
    set_gates(&bb, &mut store, 30.0);
    let img = random_image(32, 10);
    let perm: Vec<usize> = (0..16).rev().collect();
    let shuffled = shuffle_patches(&img, 8, &perm);

    let run = |image: &Image| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = bb
            .forward(&mut tape, &bound, &[image], AttentionMode::Configured)
            .unwrap();
        let gpsa: Vec<_> = out.attention[..cfg.n_gpsa_blocks]
            .iter()
            .map(|a| {
                (
                    a.maps.iter().map(|&m| tape.value(m).clone()).collect::<Vec<_>>(),
                    tape.value(a.content[0]).clone(),
                )
            })
            .collect();
        gpsa
    };
    let a = run(&img);
    let b = run(&shuffled);
    for ((maps_a, content_a), (maps_b, content_b)) in a.iter().zip(&b) {
        assert_eq!(maps_a, maps_b);
        // the content path did see the shuffle
        assert_ne!(content_a, content_b);
    }
}

#[test]
fn locality_init_argmax() {
    let grid = fas_core::backbone::PatchGrid::new(32, 4, 3, 8).unwrap();
    let rel = RelPosEncoding::new(&grid);
    let g = grid.grid as i64;
    let cases: &[((i32, i32), f64)] = &[((0, 0), 1.0), ((1, 0), 1.0), ((0, -1), 2.0), ((-1, 1), 2.0)];
    for &((dx, dy), alpha) in cases {
        let scores = positional_scores(&rel, [-alpha, 2.0 * alpha * dx as f64, 2.0 * alpha * dy as f64]);
        let n = grid.num_patches();
        for i in 0..n {
            let (r, c) = ((i as i64) / g, (i as i64) % g);
            let (tr, tc) = (r + dy as i64, c + dx as i64);
            if r == 0 || c == 0 || r == g - 1 || c == g - 1 {
                continue;
            }
            let row = &scores[i * n..(i + 1) * n];
            let best = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best as i64, tr * g + tc, "offset ({dx},{dy}) patch {i}");
        }
    }
}

#[test]
fn large_alpha_is_nearly_one_hot() {
    let mut l = layer::<f64>(8, 1, 11);
    init_locality(&mut l.store, &l.attn, 100.0, &[(1, 0)]).unwrap();
    let grid = fas_core::backbone::PatchGrid::new(16, 4, 3, 8).unwrap();
    let mut tape = Tape::new();
    let bound = l.store.bind(&mut tape);
    let rel = tape.constant(RelPosEncoding::new(&grid).to_tensor());
    let x = tape.constant(Tensor::zeros(&[16, 8]));
    let out = gpsa_attention(&mut tape, &bound, &l.attn, rel, x, 1, 16, AttentionOptions::default()).unwrap();
    let pos = tape.value(out.positional[0]);
    // patch 5 = (1,1); its right neighbour is patch 6
    assert!(pos.at(5, 6) > 1.0 - 1e-12);
    assert_eq!(l.store.get(l.attn.positional.unwrap().gate).data(), &[1.0]);
}

#[test]
fn spiral_offsets_are_default_centers() {
    let cfg = BackboneConfig::default();
    assert_eq!(cfg.offsets(), spiral_offsets(4));
    let mut bad = cfg.clone();
    bad.locality_offsets = Some(vec![[1, 0], [1, 0], [0, 1], [0, -1]]);
    assert!(bad.validate().is_err());
    let mut bad = cfg;
    bad.n_gpsa_blocks = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn forward_shape_and_batch_determinism() {
    let cfg = BackboneConfig::default();
    let (bb, store) = build::<f32>(&cfg, 12);
    let img = random_image(32, 13);
    let other = random_image(32, 14);
    let f = bb.features(&store, &img).unwrap();
    assert_eq!(f.shape(), &[64]);

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = bb
        .forward(&mut tape, &bound, &[&img, &other, &img], AttentionMode::Configured)
        .unwrap();
    let feats = tape.value(out.features);
    assert_eq!(feats.shape(), &[3, 64]);
    assert_eq!(feats.row(0), feats.row(2));
    assert_eq!(feats.row(0), f.data());
}

#[test]
fn closed_gates_match_vanilla_backbone() {
    let cfg = BackboneConfig::default();
    let (bb, mut store) = build::<f64>(&cfg, 15);
    set_gates(&bb, &mut store, -30.0);
    let img = random_image(32, 16);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let gated = bb
        .forward(&mut tape, &bound, &[&img], AttentionMode::Configured)
        .unwrap();
    let plain = bb
        .forward(&mut tape, &bound, &[&img], AttentionMode::AllVanilla)
        .unwrap();
    let diff = tape.value(gated.features).max_abs_diff(tape.value(plain.features));
    assert!(diff < 1e-5, "max diff {diff}");
}

#[test]
fn toy_backbone_gradients() {
    let cfg = BackboneConfig::toy();
    let (bb, store) = build::<f64>(&cfg, 17);
    let imgs = [random_image(16, 18), random_image(16, 19)];
    let target: Tensor<f64> = Tensor::from_fn(&[2, 8], |i| (i as f64 * 0.37).sin());
    let report = check_gradients(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let refs: Vec<&Image> = imgs.iter().collect();
            let out = bb
                .forward(tape, &bound, &refs, AttentionMode::Configured)
                .map_err(|e| match e {
                    fas_core::Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
            let t = tape.constant(target.clone());
            tape.mse(out.features, t, fas_core::tensor::Reduction::Sum)
        },
        store.tensors(),
        GradCheckConfig::default(),
    )
    .unwrap();
    println!("toy backbone: {report:?}");
    assert!(report.passed(), "{report:?}");
}
