use als_core::geometry::{objectness_analytic, ObjectMask};
use als_core::synthdata::{
    build_eval_sets, draw_training_item, generate_sample, remove_objects, Dataset, ItemKind,
    SamplerConfig, SceneSpec,
};

fn spec() -> SceneSpec {
    SceneSpec {
        seed: 77,
        ..SceneSpec::default()
    }
}

#[test]
fn generation_is_pure_in_seed_and_index() {
    let s = spec();
    assert_eq!(
        generate_sample(&s, 12).unwrap(),
        generate_sample(&s, 12).unwrap()
    );
    assert_ne!(
        generate_sample(&s, 12).unwrap(),
        generate_sample(&s, 13).unwrap()
    );
    let other = SceneSpec {
        seed: 78,
        ..s.clone()
    };
    assert_ne!(
        generate_sample(&s, 12).unwrap().image,
        generate_sample(&other, 12).unwrap().image
    );
    let a = Dataset::generate(&s, 40).unwrap();
    let b = Dataset::generate(&s, 40).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.mean_pixel, b.mean_pixel);
}

#[test]
fn ground_truth_is_consistent() {
    let s = spec();
    for i in 0..200 {
        let x = generate_sample(&s, i).unwrap();
        assert!(x.class < s.num_classes);
        assert_eq!(x.mask, ObjectMask::from_box(&x.bbox, x.frame));
        let o = objectness_analytic(&x.bbox, x.frame).unwrap();
        assert_eq!(x.mask.count() as f64 / x.frame.area(), o);
        let side = x.bbox.w / x.frame.width as f64;
        assert!((0.34..=0.86).contains(&side), "side {side}");
        assert!(x.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // pixels are exact multiples of 1/255
        assert!(x
            .image
            .data
            .iter()
            .all(|&v| ((v * 255.0).round() / 255.0 - v).abs() < 1e-7));
    }
}

#[test]
fn classes_are_balanced() {
    let s = spec();
    let n = 20_000;
    let mut counts = vec![0usize; s.num_classes];
    let mut matched = 0usize;
    for i in 0..n {
        let x = generate_sample(&s, i).unwrap();
        counts[x.class] += 1;
        matched += (x.texture == Some(s.texture_for_class(x.class))) as usize;
    }
    let p = 1.0 / s.num_classes as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (c, &k) in counts.iter().enumerate() {
        assert!(
            (k as f64 - n as f64 * p).abs() < 3.0 * sigma,
            "class {c}: {k}"
        );
    }
    // correlated texture 0.9 plus a 1/K chance of drawing the own texture
    let expect = 0.9 + 0.1 * p;
    let sd = (expect * (1.0 - expect) / n as f64).sqrt();
    let rate = matched as f64 / n as f64;
    assert!(
        (rate - expect).abs() < 4.0 * sd,
        "texture match rate {rate}"
    );
}

#[test]
fn context_rate_matches_config() {
    let data = Dataset::generate(
        &SceneSpec {
            image_size: (16, 16),
            ..spec()
        },
        50,
    )
    .unwrap();
    let cfg = SamplerConfig {
        output_size: (8, 8),
        seed: 5,
        ..SamplerConfig::default()
    };
    let n = 100_000;
    let ctx = (0..n)
        .filter(|&i| draw_training_item(&data, &cfg, i).unwrap().kind == ItemKind::Context)
        .count();
    let rate = ctx as f64 / n as f64;
    assert!((rate - 0.15).abs() <= 0.005, "context rate {rate}");
}

#[test]
fn context_items_carry_no_object_pixels() {
    let s = spec();
    let data = Dataset::generate(&s, 30).unwrap();
    let fill = data.mean_pixel as f32;
    for x in &data.samples {
        let r = remove_objects(x, data.mean_pixel);
        for (i, &m) in x.mask.bits().iter().enumerate() {
            if m {
                assert_eq!(r.data[i], fill);
            } else {
                assert_eq!(r.data[i], x.image.data[i]);
            }
        }
    }
    let cfg = SamplerConfig {
        seed: 3,
        ..SamplerConfig::default()
    };
    let (object, context) = build_eval_sets(&s, 20, &cfg, data.mean_pixel).unwrap();
    assert_eq!(object.len(), 20);
    assert!(context.items.iter().all(|it| it.objectness == 0.0));
    assert!(object
        .items
        .iter()
        .all(|it| it.objectness > 0.0 && it.objectness <= 1.0));
    // the validation stream is disjoint from training
    let val = Dataset::generate(&s.with_stream("val"), 30).unwrap();
    for v in &val.samples {
        assert!(data.samples.iter().all(|t| t.image != v.image));
    }
}

#[test]
fn training_draws_are_reproducible_and_share_crops() {
    let data = Dataset::generate(
        &SceneSpec {
            image_size: (16, 16),
            ..spec()
        },
        20,
    )
    .unwrap();
    let with_ctx = SamplerConfig {
        output_size: (8, 8),
        seed: 9,
        ..SamplerConfig::default()
    };
    let without = SamplerConfig {
        context_fraction: 0.0,
        ..with_ctx.clone()
    };
    for i in 0..200 {
        let a = draw_training_item(&data, &with_ctx, i).unwrap();
        let b = draw_training_item(&data, &without, i).unwrap();
        assert_eq!(a.sample_index, b.sample_index);
        assert_eq!(a.transform, b.transform);
        if a.kind != ItemKind::Context {
            assert_eq!(a.image, b.image);
            assert_eq!(a.kind, b.kind);
        }
        let again = draw_training_item(&data, &with_ctx, i).unwrap();
        assert_eq!(again.image, a.image);
    }
}
