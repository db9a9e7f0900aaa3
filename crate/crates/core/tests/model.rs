use nwcrf_core::depth_net::PATCH_FACTORS;
use nwcrf_core::oracle::{end_to_end_gradients, ppm_gradients};
use nwcrf_core::{DecoderKind, Error, Initializer, Model, ModelConfig, Tape, Tensor};

fn small(decoder: DecoderKind) -> ModelConfig {
    let mut cfg = ModelConfig {
        window_size: 3,
        heads: [2, 2, 1, 1],
        head_dim: 4,
        encoder_widths: [4, 6, 8, 8],
        decoder,
        ..ModelConfig::default()
    };
    cfg.fit_ppm_scales(64, 64);
    cfg
}

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    Initializer::new(seed).uniform(&[h, w, 3], 0.5).map(|v| v + 0.5)
}

#[test]
fn ppm_head_gradients() {
    let errors = ppm_gradients(1, None).unwrap();
    assert!(errors.iter().any(|(n, _)| n == "ppm.conv.kernel"), "{errors:?}");
    for (name, e) in &errors {
        assert!(*e < 1e-4, "{name}: {e}");
    }
}

#[test]
fn end_to_end_gradients_on_32x32() {
    let errors = end_to_end_gradients(2, Some(4)).unwrap();
    assert!(errors.len() > 50);
    for (name, e) in &errors {
        assert!(*e < 1e-3, "{name}: {e}");
    }
}

#[test]
fn depth_stays_inside_the_range() {
    for kind in [DecoderKind::NeuralCrf, DecoderKind::Convolutional] {
        let mut model = Model::new(small(kind)).unwrap();
        let depth = model.predict(&image(3, 64, 96)).unwrap();
        assert_eq!(depth.extents(), &[16, 24]);
        assert!(depth.data().iter().all(|&d| d > 0.0 && d < 10.0));
        // Large weights push the sigmoid to saturation but not past it.
        for t in model.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        }
        let depth = model.predict(&image(4, 64, 64).map(|v| v * 50.0)).unwrap();
        assert!(depth.data().iter().all(|&d| (0.0..=10.0).contains(&d) && d.is_finite()));
    }
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let a = Model::new(small(DecoderKind::NeuralCrf)).unwrap();
    let b = Model::new(small(DecoderKind::NeuralCrf)).unwrap();
    assert_eq!(a.params, b.params);
    let img = image(5, 64, 64);
    let (da, db) = (a.predict(&img).unwrap(), b.predict(&img).unwrap());
    assert!(da.data().iter().zip(db.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let mut cfg = small(DecoderKind::NeuralCrf);
    cfg.seed = 99;
    let c = Model::new(cfg).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn level_widths_follow_the_rearrange_contract() {
    let cfg = small(DecoderKind::NeuralCrf);
    let model = Model::new(cfg.clone()).unwrap();
    for level in 0..3 {
        let name = format!("decoder.{level}.project.weight");
        let id = model.params.find(&name).unwrap_or_else(|| panic!("missing {name}"));
        let extents = model.params.get(id).extents();
        assert_eq!(extents[0], cfg.prediction_width(level) / 4);
        assert_eq!(extents[extents.len() - 1], cfg.prediction_width(level + 1));
    }
    assert!(model.params.find("decoder.3.project.weight").is_none());
}

#[test]
fn identity_message_passing_stays_finite() {
    let mut model = Model::new(small(DecoderKind::NeuralCrf)).unwrap();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let zero = [".query", ".key", ".position_bias", ".unary.kernel", ".unary.bias"];
        if name.contains(".crf.") && zero.iter().any(|z| name.ends_with(z)) {
            let id = model.params.find(&name).unwrap();
            model.params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let depth = model.predict(&image(6, 64, 64)).unwrap();
    assert!(depth.all_finite());
}

#[test]
fn input_extents_must_be_multiples_of_32() {
    let model = Model::new(small(DecoderKind::NeuralCrf)).unwrap();
    assert!(matches!(model.predict(&image(1, 48, 64)), Err(Error::Shape(_))));
    assert!(model.predict(&Tensor::zeros(&[64, 64])).is_err());
}

#[test]
fn non_finite_input_is_a_numeric_failure() {
    let model = Model::new(small(DecoderKind::Convolutional)).unwrap();
    let mut img = image(7, 32, 32);
    img.data_mut()[5] = f64::NAN;
    assert!(matches!(model.predict(&img), Err(Error::Numeric { .. })));
}

#[test]
fn output_is_quarter_resolution() {
    let mut cfg = small(DecoderKind::NeuralCrf);
    cfg.fit_ppm_scales(32, 64);
    let model = Model::new(cfg).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let img = tape.leaf(image(8, 32, 64));
    let out = model.net.forward(&mut tape, &p, img).unwrap();
    assert_eq!(tape.value(out).extents(), &[32 / PATCH_FACTORS[0], 64 / PATCH_FACTORS[0]]);
}

#[test]
fn presets_validate() {
    for cfg in [ModelConfig::default(), ModelConfig::paper_faithful(), ModelConfig::compact()] {
        cfg.validate().unwrap();
    }
    let mut bad = ModelConfig::compact();
    bad.window_size = 0;
    assert!(bad.validate().is_err());
    assert_eq!(DecoderKind::parse("crf"), Some(DecoderKind::NeuralCrf));
    assert_eq!(DecoderKind::parse("conv"), Some(DecoderKind::Convolutional));
    assert_eq!(DecoderKind::parse("mlp"), None);
}
