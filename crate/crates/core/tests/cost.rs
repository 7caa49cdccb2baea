mod common;

use std::collections::BTreeMap;

use catagg::cost::{compare_layer, module_counts, module_key, standard_block_params, STANDARD_BUILD_LIMIT};
use catagg::gradcheck::small_catspp;
use catagg::model::Model;
use catagg::nn::TransformerBlock;
use catagg::{CatsppConfig, ParamStore, RunConfig};
use common::rng;

fn store_for(overrides: &[&str]) -> (ParamStore<f32>, Model) {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(overrides).unwrap();
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &mut rng(0), &cfg).unwrap();
    (store, model)
}

#[test]
fn module_keys() {
    assert_eq!(module_key("cats.enc0.intra.l0.q.w"), "cats.enc0.intra");
    assert_eq!(module_key("cats.pos"), "cats.pos");
    assert_eq!(module_key("cats.proj_out.w"), "cats.proj_out");
    assert_eq!(module_key("backbone.conv1.b"), "backbone.conv1");
}

#[test]
fn module_counts_match_an_independent_walk() {
    for model in ["model=cats", "model=catspp"] {
        let (store, _) = store_for(&[model]);
        let mut walk: BTreeMap<String, usize> = BTreeMap::new();
        for name in store.names() {
            let shape = store.value(name).unwrap().shape().to_vec();
            let parts: Vec<&str> = name.split('.').collect();
            let key = if parts.len() <= 2 { name.clone() } else { parts[..(parts.len() - 1).min(3)].join(".") };
            *walk.entry(key).or_default() += shape.iter().product::<usize>();
        }
        let counts: BTreeMap<String, usize> = module_counts(&store).into_iter().collect();
        assert_eq!(counts, walk);
        assert_eq!(counts.values().sum::<usize>(), store.num_scalars());
    }
}

#[test]
fn doubling_encoders_doubles_the_encoder_parameters() {
    for (model, key) in [("cats", "cats.n_encoders"), ("catspp", "catspp.n_encoders")] {
        let count = |n: usize| {
            let (store, m) = store_for(&[&format!("model={model}"), &format!("{key}={n}")]);
            let enc: usize = store.iter().filter(|(k, _)| k.contains(".enc")).map(|(_, p)| p.value.len()).sum();
            (enc, store.count_prefix(&format!("{}.", m.aggregator_prefix())))
        };
        let ((e1, a1), (e2, a2)) = (count(1), count(2));
        assert_eq!(e2, 2 * e1, "{model}");
        // everything outside the encoders is shared
        assert_eq!(a2 - a1, e1, "{model}");
    }
}

#[test]
fn standard_formula_matches_a_built_block() {
    for (f, r) in [(4usize, 2usize), (16, 2), (24, 3)] {
        let mut store = ParamStore::<f32>::new();
        TransformerBlock::new(&mut store, &mut rng(1), "std", f, 1, r).unwrap();
        assert_eq!(store.num_scalars(), standard_block_params(f, r));
    }
}

#[test]
fn efficient_block_against_standard_block() {
    // small dims: both blocks are built and measured
    let cfg = small_catspp(&[8, 4], 4);
    for layer in 0..2 {
        let c = compare_layer(&cfg, layer).unwrap();
        assert!(c.standard_measured);
        assert_eq!(c.features, c.tokens * cfg.d);
        assert!(c.efficient_peak_bytes <= c.standard_peak_bytes, "{c:?}");
    }
    // reference dims at the finest layer
    let cfg = CatsppConfig::default();
    let c = compare_layer(&cfg, 0).unwrap();
    assert_eq!((c.tokens, c.features), (256, 256 * 16));
    assert!(c.param_ratio() <= 0.30, "ratio {}", c.param_ratio());
    assert!(c.standard_params > STANDARD_BUILD_LIMIT && !c.standard_measured);
    assert!(c.efficient_peak_bytes <= c.standard_peak_bytes);
}
