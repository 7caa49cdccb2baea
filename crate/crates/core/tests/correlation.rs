mod common;

use catagg::backbone::Backbone;
use catagg::correlation::{
    build_hypercorrelation, build_stack, cosine_correlation, load_feature_manifest, swap_in_graph, FeatureMap, TokenAxis,
};
use catagg::tensor::write_tensor_file;
use catagg::{Error, Graph, ParamStore, Tensor};
use common::{max_diff, rand_tensor, rng, to_f64};

fn fmap(level: usize, layer: usize, t: Tensor<f64>) -> FeatureMap<f64> {
    FeatureMap::new(level, layer, t).unwrap()
}

#[test]
fn cosine_hand_cases() {
    // position 0 = (1, 0), position 1..3 = (-1, 0)
    let a = Tensor::new(&[2, 2, 2], vec![1.0, 0.0, -1.0, 0.0, -1.0, 0.0, -1.0, 0.0]).unwrap();
    let c = cosine_correlation(&fmap(0, 3, a.clone()), &fmap(0, 3, a)).unwrap();
    assert_eq!(c.at(&[0, 0]), 1.0);
    assert_eq!(c.at(&[0, 1]), 0.0);
    assert!((c.at(&[1, 2]) - 1.0).abs() < 1e-15);
}

#[test]
fn cosine_matches_direct_oracle_and_zero_vectors_give_zero() {
    let mut r = rng(11);
    let a: Tensor<f64> = rand_tensor(&mut r, &[3, 3, 4], -1.0, 1.0);
    let mut b: Tensor<f64> = rand_tensor(&mut r, &[3, 3, 4], -1.0, 1.0);
    b.data_mut()[8..12].iter_mut().for_each(|v| *v = 0.0);
    let c = cosine_correlation(&fmap(0, 3, a.clone()), &fmap(0, 3, b.clone())).unwrap();
    let want = common::correlation(a.data(), b.data(), 9, 4);
    assert!(max_diff(c.data(), &want) < 1e-6);
    assert!((0..9).all(|i| c.at(&[i, 2]) == 0.0));
    assert!(c.data().iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
}

#[test]
fn cosine_channel_mismatch_is_dimension_error() {
    let a = fmap(0, 3, Tensor::zeros(&[2, 2, 3]));
    let b = fmap(0, 3, Tensor::zeros(&[2, 2, 4]));
    assert!(matches!(cosine_correlation(&a, &b), Err(Error::Dimension(_))));
}

#[test]
fn feature_map_rejects_degenerate_grids() {
    assert!(FeatureMap::new(0, 3, Tensor::<f32>::zeros(&[1, 4, 2])).is_err());
    assert!(FeatureMap::new(0, 3, Tensor::<f32>::zeros(&[4, 4, 0])).is_err());
}

#[test]
fn cosine_is_symmetric_under_transpose() {
    let mut r = rng(12);
    let a = fmap(0, 3, rand_tensor(&mut r, &[3, 4, 5], -1.0, 1.0));
    let b = fmap(0, 3, rand_tensor(&mut r, &[3, 4, 5], -1.0, 1.0));
    let ab = cosine_correlation(&a, &b).unwrap();
    let ba = cosine_correlation(&b, &a).unwrap();
    for i in 0..12 {
        for j in 0..12 {
            assert!((ab.at(&[i, j]) - ba.at(&[j, i])).abs() < 1e-6);
        }
    }
}

#[test]
fn self_stack_peaks_on_the_diagonal() {
    let mut r = rng(13);
    let a = fmap(0, 3, rand_tensor(&mut r, &[4, 4, 8], -1.0, 1.0));
    let s = build_stack(&[a.clone()], &[a], (4, 4)).unwrap();
    assert_eq!(s.token_axis, TokenAxis::Source);
    let m = s.level(0);
    for i in 0..16 {
        let row: Vec<f64> = (0..16).map(|j| m.at(&[i, j])).collect();
        let arg = (0..16).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
        assert_eq!(arg, i);
    }
}

#[test]
fn stack_levels_match_per_level_recomputation() {
    let mut r = rng(14);
    let shapes = [[8, 8, 3], [6, 5, 4], [4, 4, 2]];
    let src: Vec<_> = shapes.iter().enumerate().map(|(l, s)| fmap(l, 3, rand_tensor(&mut r, s, -1.0, 1.0))).collect();
    let tgt: Vec<_> = shapes.iter().enumerate().map(|(l, s)| fmap(l, 3, rand_tensor(&mut r, s, -1.0, 1.0))).collect();
    let stack = build_stack(&src, &tgt, (4, 4)).unwrap();
    assert_eq!(stack.levels(), 3);
    for (l, s) in shapes.iter().enumerate() {
        let a = common::resize2d(src[l].grid.data(), s[0], s[1], s[2], 4, 4);
        let b = common::resize2d(tgt[l].grid.data(), s[0], s[1], s[2], 4, 4);
        let want = common::correlation(&a, &b, 16, s[2]);
        assert!(max_diff(stack.level(l).data(), &want) < 1e-6, "level {l}");
    }
    assert!(stack.maps.data().iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
}

#[test]
fn stack_errors() {
    let a = fmap(0, 3, Tensor::zeros(&[4, 4, 2]));
    assert!(matches!(build_stack::<f64>(&[], &[], (4, 4)), Err(Error::Argument(_))));
    assert!(matches!(build_stack(&[a.clone()], &[a], (8, 8)), Err(Error::Dimension(_))));
}

#[test]
fn swap_is_an_involution_and_flips_the_token_axis() {
    let mut r = rng(15);
    let a = fmap(0, 3, rand_tensor(&mut r, &[3, 3, 4], -1.0, 1.0));
    let b = fmap(0, 3, rand_tensor(&mut r, &[3, 3, 4], -1.0, 1.0));
    let s = build_stack(&[a.clone(), b.clone()], &[b.clone(), a.clone()], (3, 3)).unwrap();
    let t = s.swap();
    assert_eq!(t.token_axis, TokenAxis::Target);
    assert_eq!(t.swap(), s);
    let ba = cosine_correlation(&b, &a).unwrap();
    assert!(max_diff(t.level(0).data(), ba.data()) < 1e-6);
}

#[test]
fn hyper_swap_matches_index_remap() {
    let mut r = rng(16);
    let vol: Tensor<f64> = rand_tensor(&mut r, &[2, 3, 4, 5, 2], 0.0, 1.0);
    let h = catagg::Hypercorrelation { layer: 3, levels: vec![1, 2], volume: vol.clone() };
    let s = h.swap();
    assert_eq!(s.volume.shape(), &[4, 5, 2, 3, 2]);
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                for d in 0..5 {
                    for k in 0..2 {
                        assert_eq!(s.volume.at(&[c, d, a, b, k]), vol.at(&[a, b, c, d, k]));
                    }
                }
            }
        }
    }
    assert_eq!(s.swap(), h);

    let mut g = Graph::<f64>::infer();
    let v = g.constant(vol.clone());
    let sv = swap_in_graph(&mut g, v).unwrap();
    assert_eq!(g.value(sv), &s.volume);
    let bad = g.constant(Tensor::zeros(&[2, 2]));
    assert!(swap_in_graph(&mut g, bad).is_err());
}

#[test]
fn hypercorrelation_channels_match_standalone_correlations() {
    let mut r = rng(17);
    let mk = |r: &mut _, level, layer, s: [usize; 3]| fmap(level, layer, rand_tensor(r, &s, -1.0, 1.0));
    let src = vec![mk(&mut r, 1, 3, [4, 4, 3]), mk(&mut r, 2, 3, [4, 4, 2]), mk(&mut r, 3, 4, [2, 2, 3])];
    let tgt = vec![mk(&mut r, 1, 3, [4, 4, 3]), mk(&mut r, 2, 3, [4, 4, 2]), mk(&mut r, 3, 4, [2, 2, 3])];
    let hyper = build_hypercorrelation(&src, &tgt, &[3, 4]).unwrap();
    assert_eq!(hyper[0].volume.shape(), &[4, 4, 4, 4, 2]);
    assert_eq!(hyper[0].levels, vec![1, 2]);
    assert_eq!(hyper[1].volume.shape(), &[2, 2, 2, 2, 1]);
    for (ch, l) in [(0usize, 0usize), (1, 1)] {
        let want = cosine_correlation(&src[l], &tgt[l]).unwrap();
        let got: Vec<f64> = hyper[0].volume.data().iter().skip(ch).step_by(2).copied().collect();
        assert!(max_diff(&got, want.data()) < 1e-12);
    }
    let single = cosine_correlation(&src[2], &tgt[2]).unwrap();
    assert_eq!(hyper[1].volume.data(), single.data());
    assert!(matches!(build_hypercorrelation(&src, &tgt, &[5]), Err(Error::Argument(_))));
}

#[test]
fn toy_backbone_hypercorrelation_extents() {
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut rng(18)).unwrap();
    let img: Tensor<f64> = rand_tensor(&mut rng(19), &[128, 128, 3], 0.0, 1.0);
    let mut g = Graph::<f64>::infer();
    let x = g.constant(img);
    let feats = bb.forward(&mut g, &store, x).unwrap();
    let maps: Vec<FeatureMap<f64>> = feats.iter().map(|f| fmap(f.level, f.layer, g.value(f.var).clone())).collect();
    let hyper = build_hypercorrelation(&maps, &maps, &[3, 4, 5]).unwrap();
    let extents: Vec<usize> = hyper.iter().map(|h| h.volume.shape()[0]).collect();
    assert_eq!(extents, vec![32, 16, 8]);
    for h in &hyper {
        assert!(h.levels.len() >= 2);
        let c = h.volume.shape()[4];
        for (ch, &level) in h.levels.iter().enumerate() {
            let m = maps.iter().find(|m| m.level == level).unwrap();
            let (e, n) = (m.extent(), m.extent().0 * m.extent().1);
            let want = common::correlation(&to_f64(&m.grid), &to_f64(&m.grid), n, m.channels());
            let got: Vec<f64> = h.volume.data().iter().skip(ch).step_by(c).copied().collect();
            assert!(max_diff(&got, &want) < 1e-6, "layer {} level {level} extent {e:?}", h.layer);
        }
    }
}

#[test]
fn feature_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(20);
    let a: Tensor<f32> = rand_tensor(&mut r, &[4, 4, 2], -1.0, 1.0);
    write_tensor_file(dir.path().join("a.catt"), &a).unwrap();
    std::fs::write(dir.path().join("m.txt"), "# maps\nlevel=2 layer=3 file=a.catt\n").unwrap();
    let maps = load_feature_manifest(dir.path().join("m.txt")).unwrap();
    assert_eq!(maps.len(), 1);
    assert_eq!((maps[0].level, maps[0].layer), (2, 3));
    assert_eq!(maps[0].grid, a);

    std::fs::write(dir.path().join("bad.txt"), "level=2 file=a.catt\n").unwrap();
    assert!(load_feature_manifest(dir.path().join("bad.txt")).is_err());
}
