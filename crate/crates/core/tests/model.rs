mod support;

use std::collections::BTreeSet;

use candle_core::{DType, Device};
use texsr_core::geometry::{build_query_set, output_size};
use texsr_core::{IsteModel, ModelConfig, Variant};

use support::fixtures::{model_with, noise_image, small_config, small_model};

#[test]
fn encoder_output_shape_and_determinism() {
    let model = IsteModel::new(ModelConfig::default(), 0, &Device::Cpu, DType::F32).unwrap();
    let img = noise_image(48, 48, 1);
    let f = model.encode(&img).unwrap();
    assert_eq!((f.channels, f.height, f.width), (64, 48, 48));
    assert!(f.data.iter().all(|v| v.is_finite()));
    assert_eq!(f, model.encode(&img).unwrap());
}

#[test]
fn encoder_is_translation_covariant_away_from_borders() {
    let model = small_model(3);
    let img = noise_image(32, 32, 2);
    let shifted = img.crop(0, 3, 32, 29).unwrap();
    let (a, b) = (model.encode(&img).unwrap(), model.encode(&shifted).unwrap());
    // Receptive field radius: head + 2 convs per block + tail.
    let r = 2 + 2 * small_config().encoder.n_blocks;
    for c in 0..64 {
        for y in r..32 - r {
            for x in r..29 - r {
                assert!((a.at(c, y, x + 3) - b.at(c, y, x)).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn default_model_doubles_a_48px_input() {
    let model = IsteModel::new(ModelConfig::default(), 0, &Device::Cpu, DType::F32).unwrap();
    let out = model.forward(&noise_image(48, 48, 4), 2.0).unwrap();
    assert_eq!(out.dims(), (96, 96));
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn one_model_renders_several_real_scales() {
    let model = small_model(5);
    let img = noise_image(48, 40, 6);
    for s in [1.0, 2.0, 3.7, 7.3] {
        let out = model.forward(&img, s).unwrap();
        assert_eq!(
            out.dims(),
            (output_size(48, s), output_size(40, s)),
            "scale {s}"
        );
    }
    assert_eq!(model.forward(&img, 7.3).unwrap().dims(), (350, 292));
    assert!(model.forward(&img, 0.9).is_err());
}

#[test]
fn query_results_do_not_depend_on_chunking() {
    let model = small_model(7);
    let img = noise_image(12, 10, 8);
    let q = build_query_set(12, 10, 2.5).unwrap();
    let all = model.query(&img, &q).unwrap();
    let mut pieces = Vec::new();
    for chunk in q.chunks(37) {
        pieces.extend(model.query(&img, &chunk).unwrap());
    }
    // Matmul blocking depends on the row count, so agreement is up to rounding.
    let worst = all
        .iter()
        .flatten()
        .zip(pieces.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert_eq!(all.len(), pieces.len());
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn ablations_are_live_paths() {
    let img = noise_image(16, 16, 9);
    let full = model_with(small_config(), 10)
        .forward_raw(&img, 2.0)
        .unwrap();
    for v in [
        Variant::NoLfi,
        Variant::NoStf,
        Variant::NoTl,
        Variant::NoLtd,
    ] {
        let out = model_with(v.apply(&small_config()), 10)
            .forward_raw(&img, 2.0)
            .unwrap();
        assert_eq!(out.dims(), full.dims());
        assert_ne!(
            out.data(),
            full.data(),
            "{} equals the full model",
            v.label()
        );
    }
    let all_off = ModelConfig {
        use_lfi: false,
        use_stf: false,
        use_tl: false,
        use_ltd: false,
        ..small_config()
    };
    assert_ne!(
        model_with(all_off, 10)
            .forward_raw(&img, 2.0)
            .unwrap()
            .data(),
        full.data()
    );
}

fn names(cfg: &ModelConfig) -> BTreeSet<String> {
    IsteModel::layout(cfg).unwrap().into_keys().collect()
}

#[test]
fn each_flag_changes_exactly_its_module() {
    let base = names(&small_config());
    let diff = |v: Variant| {
        let other = names(&v.apply(&small_config()));
        let removed: BTreeSet<String> = base.difference(&other).cloned().collect();
        let added: BTreeSet<String> = other.difference(&base).cloned().collect();
        (removed, added)
    };
    let all_with = |set: &BTreeSet<String>, prefixes: &[&str]| {
        !set.is_empty()
            && set
                .iter()
                .all(|n| prefixes.iter().any(|p| n.starts_with(p)))
    };
    let (r, a) = diff(Variant::NoLfi);
    assert!(all_with(&r, &["lfi."]) && a.is_empty());
    assert_eq!(
        r.len(),
        base.iter().filter(|n| n.starts_with("lfi.")).count()
    );
    let (r, a) = diff(Variant::NoStf);
    assert!(all_with(&r, &["stf."]) && a.is_empty());
    assert_eq!(
        r.len(),
        base.iter().filter(|n| n.starts_with("stf.")).count()
    );
    let (r, a) = diff(Variant::NoLtd);
    assert!(all_with(&r, &["ltd."]) && a.is_empty());
    assert_eq!(
        r.len(),
        base.iter().filter(|n| n.starts_with("ltd.")).count()
    );
    let (r, a) = diff(Variant::NoTl);
    assert!(all_with(
        &r,
        &["tl.amp.", "tl.freq_x.", "tl.freq_y.", "tl.phase."]
    ));
    assert_eq!(
        a,
        BTreeSet::from(["tl.conv.b".to_string(), "tl.conv.w".to_string()])
    );
    assert_eq!(diff(Variant::Full), (BTreeSet::new(), BTreeSet::new()));
}

#[test]
fn phase_and_texture_features_are_well_formed() {
    let model = small_model(11);
    let p1 = model.phase([0.5, 0.5]).unwrap();
    let p2 = model.phase([0.1, 0.2]).unwrap();
    assert_eq!(p1.len(), 16);
    assert!(p1.iter().all(|v| *v > 0.0 && *v < 1.0));
    assert_ne!(p1, p2);
    assert!(model.phase([0.0, 1.0]).is_err());
    let img = noise_image(6, 6, 12);
    let f = model.encode(&img).unwrap();
    let q = build_query_set(6, 6, 2.0).unwrap();
    let tl = model.synthesize(&f, &q).unwrap();
    assert_eq!((tl.len(), tl[0].len()), (144, 16));
    let ablated = model_with(Variant::NoTl.apply(&small_config()), 11);
    assert!(ablated.phase([0.5, 0.5]).is_err());
    assert!(ablated.texture_maps(&f).is_err());
}

#[test]
fn interaction_preserves_shape() {
    let model = small_model(13);
    let f = model.encode(&noise_image(5, 7, 14)).unwrap();
    let g = model.interact(&f).unwrap();
    assert_eq!((g.channels, g.height, g.width), (64, 5, 7));
    assert_ne!(f.data, g.data);
}

#[test]
fn f64_copy_agrees_with_f32_model() {
    let model = small_model(15);
    let img = noise_image(8, 8, 16);
    let a = model.forward_raw(&img, 2.0).unwrap();
    let b = model
        .with_dtype(DType::F64)
        .unwrap()
        .forward_raw(&img, 2.0)
        .unwrap();
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-4, "{worst}");
}
