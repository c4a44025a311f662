use facedepth::depth_gt::PatchGrid;
use facedepth::fdmt::{patchify, unpatchify, Fdmt, FdmtConfig, TransformerBlock};
use facedepth::mda::row_stochastic_violations;
use facedepth::raster::{batch_tensor, Image};
use facedepth_autograd::gradcheck::{numerical_input_grad, relative_error};
use facedepth_autograd::params::normal_tensor;
use facedepth_autograd::tensor::zeros;
use facedepth_autograd::{ParamStore, Session, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(position_embedding: bool) -> FdmtConfig {
    FdmtConfig {
        image_size: 4,
        patches_per_side: 2,
        embed_dim: 8,
        blocks: 2,
        heads: 2,
        mlp_ratio: 2,
        position_embedding,
    }
}

fn build(cfg: &FdmtConfig, seed: u64) -> (Fdmt, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Fdmt::new(&mut store, "fdmt", cfg, &mut rng).unwrap();
    // widen the default 0.02 init so every path carries signal
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.name(id).contains("norm") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, normal_tensor(&mut rng, &shape, 0.5)).unwrap();
        }
    }
    (f, store)
}

fn random_image(rng: &mut impl Rng, n: usize) -> Image {
    Image::new(n, n, (0..n * n * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn input_gradient_matches_finite_differences() {
    let cfg = tiny(true);
    let (fdmt, store) = build(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = normal_tensor(&mut rng, &[2, 4, 4, 3], 1.0);
    let wd = normal_tensor(&mut rng, &[2, 4], 1.0);
    let wf = normal_tensor(&mut rng, &[2, 4, 8], 1.0);
    let loss = |s: &mut Session, x| {
        let out = fdmt.forward(s, x).unwrap();
        let a = s.input(wd.clone());
        let b = s.input(wf.clone());
        let da = s.mul(out.depth, a);
        let fb = s.mul(out.features, b);
        let l1 = s.sum_all(da);
        let l2 = s.sum_all(fb);
        s.add(l1, l2)
    };
    let mut s = Session::inference(&store);
    let x = s.variable(x0.clone());
    let l = loss(&mut s, x);
    let analytic = s.backward(l).get(x).unwrap().clone();
    let numeric = numerical_input_grad(&x0, 1e-5, |t| {
        let mut s = Session::inference(&store);
        let x = s.input(t.clone());
        let l = loss(&mut s, x);
        s.scalar(l)
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn permuting_patches_permutes_depth_without_position_embedding() {
    let cfg = FdmtConfig {
        image_size: 8,
        ..tiny(false)
    };
    let grid = PatchGrid::square(8, 2).unwrap();
    let (fdmt, store) = build(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let img = random_image(&mut rng, 8);
        let patches = patchify(&img, &grid).unwrap();
        let mut perm: Vec<usize> = (0..4).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let shuffled: Vec<Vec<f32>> = perm.iter().map(|&p| patches[p].clone()).collect();
        let img2 = unpatchify(&shuffled, &grid).unwrap();
        let mut s = Session::inference(&store);
        let x = s.input(batch_tensor([&img, &img2]).unwrap());
        let out = fdmt.forward(&mut s, x).unwrap();
        let d = s.value(out.depth);
        for (i, &p) in perm.iter().enumerate() {
            assert!((d[[1, i]] - d[[0, p]]).abs() < 1e-12);
        }
    }
}

#[test]
fn zeroed_output_projections_make_a_block_the_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let block = TransformerBlock::new(&mut store, "b", 8, 2, 2, &mut rng).unwrap();
    for lin in [&block.attn.out, &block.mlp.fc2] {
        store.set(lin.weight, zeros(&[lin.in_dim, lin.out_dim])).unwrap();
        store.set(lin.bias.unwrap(), zeros(&[lin.out_dim])).unwrap();
    }
    let x0 = normal_tensor(&mut rng, &[3, 5, 8], 2.0);
    let mut s = Session::inference(&store);
    let x = s.input(x0.clone());
    let (y, attn) = block.forward(&mut s, x);
    assert_eq!(s.value(y), &x0);
    assert_eq!(row_stochastic_violations(s.value(attn), 1e-6), 0);
}

#[test]
fn zero_image_with_zero_projection_gives_position_embeddings() {
    let cfg = tiny(true);
    let (fdmt, mut store) = build(&cfg, 6);
    let pe = &fdmt.patch_embed;
    store.set(pe.weight, zeros(&[pe.in_dim, pe.out_dim])).unwrap();
    store.set(pe.bias.unwrap(), zeros(&[pe.out_dim])).unwrap();
    let mut s = Session::inference(&store);
    let x = s.input(zeros(&[1, 4, 4, 3]));
    let p = fdmt.patches(&mut s, x).unwrap();
    let tokens = fdmt.embed(&mut s, p);
    let pos = store.get(fdmt.position.unwrap());
    assert_eq!(s.value(tokens).index_axis(ndarray::Axis(0), 0), pos.view());
}

#[test]
fn embedding_is_local_to_the_changed_patch() {
    let cfg = FdmtConfig {
        image_size: 8,
        ..tiny(true)
    };
    let grid = PatchGrid::square(8, 2).unwrap();
    let (fdmt, store) = build(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_image(&mut rng, 8);
    let mut b = a.clone();
    // perturb one pixel inside patch 3
    b.set_pixel(6, 5, [0.9, 0.1, 0.3]);
    assert_eq!(grid.patch_of(6, 5), 3);
    let mut s = Session::inference(&store);
    let x = s.input(batch_tensor([&a, &b]).unwrap());
    let p = fdmt.patches(&mut s, x).unwrap();
    let t = fdmt.embed(&mut s, p);
    let t = s.value(t);
    for p in 0..4 {
        let same = t.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), p)
            == t.index_axis(ndarray::Axis(0), 1).index_axis(ndarray::Axis(0), p);
        assert_eq!(same, p != 3, "patch {p}");
    }
}

#[test]
fn depth_head_of_returned_features_is_returned_depth() {
    let cfg = FdmtConfig::mini();
    let mut store = ParamStore::new();
    let fdmt = Fdmt::new(&mut store, "f", &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let imgs: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 32)).collect();
    let mut s = Session::inference(&store);
    let x = s.input(batch_tensor(&imgs).unwrap());
    let out = fdmt.forward(&mut s, x).unwrap();
    let again = fdmt.depth_head(&mut s, out.features);
    assert_eq!(s.value(again), s.value(out.depth));
    assert_eq!(s.shape(out.depth), &[3, 16]);
    assert_eq!(s.shape(out.features), &[3, 16, 32]);
}

#[test]
fn full_profile_depth_length() {
    let cfg = FdmtConfig::full();
    assert_eq!(cfg.validate().unwrap().count(), 196);
    assert_eq!(cfg.patch_len(), 768);
}

fn extreme_input(seed: u64, scale: f64) -> Tensor {
    normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 4, 4, 3], scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn depth_in_unit_interval(seed in 0u64..1000, scale in 0.1f64..100.0) {
        let (fdmt, store) = build(&tiny(true), seed);
        let mut s = Session::inference(&store);
        let x = s.input(extreme_input(seed + 1, scale));
        let out = fdmt.forward(&mut s, x).unwrap();
        prop_assert!(s.value(out.depth).iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
