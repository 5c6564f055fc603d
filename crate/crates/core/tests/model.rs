use rand::{Rng, SeedableRng};
use stainforge_core::model::*;

fn tiny(markers: usize) -> TranslatorConfig {
    TranslatorConfig {
        vit: ViTConfig { patch_size: 8, depth: 1, width: 8, heads: 2, mlp_ratio: 2.0, dropout: 0.0, pos_grid: 2 },
        detail_channels: vec![4, 4, 4],
        decoder_channels: vec![4, 4, 4, 4],
        markers,
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn translator_gradients_match_finite_differences() {
    let mut model = Translator::new(tiny(2), 3).unwrap();
    // larger init so every layer carries signal through the check
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.entry(id).name.clone();
        if name.ends_with(".w") || name == "vit.pos" {
            let t = model.params.get_mut(id);
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
    }
    assert!(model.params.num_scalars() <= 10_000, "{}", model.params.num_scalars());
    let input = random(&[2, 3, 16, 16], 1, -2.0, 2.0);
    let target = random(&[2, 2, 16, 16], 2, -0.9, 0.9);
    let t0 = std::time::Instant::now();
    let report = check_gradients(&mut model, &input, &target, &[0.7, 1.3], 200, 5).unwrap();
    println!("{report:?} in {:?}", t0.elapsed());
    assert_eq!(report.checked, 200);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
