use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbound::network::{ModelConfig, XBoundFormer, SCALES};

fn random_image(size: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, size, size), |_| rng.random_range(0.0..1.0))
}

pub fn assert_shape_law(config: ModelConfig) {
    let model = XBoundFormer::new(config.clone(), 1).unwrap();
    let out = model.forward(&random_image(config.input_size, 2)).unwrap();
    for l in 0..SCALES {
        let side = config.input_size >> (l + 2);
        let tokens = side * side;
        assert_eq!(out.encoded[l].dim(), (tokens, config.channels[l]));
        assert_eq!(out.learned[l].dim(), (tokens, config.channels[l]));
        assert_eq!(out.fused[l].dim(), (tokens, config.channels[l]));
        assert_eq!(out.seg_logits[l].dim(), (side, side));
    }
    assert_eq!(out.key_maps.len(), SCALES * (config.n_im + config.n_ex));
    for km in &out.key_maps {
        let side = config.input_size >> (km.scale + 1);
        assert_eq!(km.map.dims(), (side, side));
        assert!(km.map.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert_eq!(out.fused[SCALES - 1], out.learned[SCALES - 1]);
}

#[test]
fn desk_shapes_follow_scale_law() {
    assert_shape_law(ModelConfig::desk());
}

#[test]
fn large_input_shapes_follow_scale_law() {
    // Narrow channels and strong key/value pooling keep the 512 graph in memory.
    assert_shape_law(ModelConfig {
        input_size: 512,
        kv_strides: [8, 4, 2, 1],
        ..ModelConfig::micro()
    });
}

#[test]
fn zero_image_gives_finite_outputs() {
    let model = XBoundFormer::new(ModelConfig::desk(), 3).unwrap();
    let out = model.forward(&Array3::zeros((3, 64, 64))).unwrap();
    assert!(out.encoded.iter().all(|f| f.iter().all(|v| v.is_finite())));
}

#[test]
fn forward_is_deterministic() {
    let image = random_image(32, 4);
    let a = XBoundFormer::new(ModelConfig::micro(), 9).unwrap();
    let b = XBoundFormer::new(ModelConfig::micro(), 9).unwrap();
    let (oa, ob) = (a.forward(&image).unwrap(), b.forward(&image).unwrap());
    assert_eq!(oa.seg_logits, ob.seg_logits);
    assert_eq!(oa.fused, ob.fused);
    assert_eq!(a.forward(&image).unwrap().seg_logits, oa.seg_logits);
}

/// Ties every spatially indexed parameter to its mirror image so the model commutes
/// with horizontal reflection.
fn tie_horizontally(model: &mut XBoundFormer) {
    let cfg = model.config.clone();
    let ids: Vec<_> = model
        .params
        .iter()
        .map(|(id, name, _)| (id, name.to_string()))
        .collect();
    for (id, name) in ids {
        let p = model.params.get_mut(id);
        if name == "encoder.1.embed.weight" {
            // rows ordered (channel, dy, dx) over 4x4 patches
            for ch in 0..3 {
                for dy in 0..4 {
                    for dx in 0..2 {
                        let src = p.row(ch * 16 + dy * 4 + dx).to_owned();
                        p.row_mut(ch * 16 + dy * 4 + 3 - dx).assign(&src);
                    }
                }
            }
        } else if name.starts_with("encoder.") && name.ends_with(".embed.weight") {
            // rows ordered (dy, dx, channel) over 2x2 neighborhoods
            let c = p.nrows() / 4;
            for dy in 0..2 {
                for ch in 0..c {
                    let src = p.row(dy * 2 * c + ch).to_owned();
                    p.row_mut(dy * 2 * c + c + ch).assign(&src);
                }
            }
        } else if name.ends_with(".positions.table") {
            let side = (p.nrows() as f64).sqrt() as usize;
            for r in 0..side {
                for col in 0..side / 2 {
                    let src = p.row(r * side + col).to_owned();
                    p.row_mut(r * side + side - 1 - col).assign(&src);
                }
            }
        }
    }
    assert_eq!(model.config, cfg);
}

#[test]
fn mirrored_image_and_tied_parameters_give_mirrored_prediction() {
    let mut model = XBoundFormer::new(ModelConfig::micro(), 5).unwrap();
    tie_horizontally(&mut model);
    let base = random_image(32, 6);
    let image = Array3::from_shape_fn((3, 32, 32), |(c, r, x)| base[[c, r, x.min(31 - x)]]);
    let probs = model.predict_probabilities(&image).unwrap();
    for r in 0..32 {
        for c in 0..32 {
            assert!((probs[[r, c]] - probs[[r, 31 - c]]).abs() < 1e-9);
        }
    }
    let mask = model.predict(&image, 0.5).unwrap();
    assert_eq!(mask, mask.flip_horizontal());
}
