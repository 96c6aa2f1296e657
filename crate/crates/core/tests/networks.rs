use sadda::networks::{
    classifier_forward, clone_params, discriminator_forward, encoder_forward, init_params, unsupervised_score,
    ArchitecturePreset, NetworkRole, ParameterSet,
};
use sadda::tensor::{Graph, Tensor};

fn golden_preset() -> ArchitecturePreset {
    ArchitecturePreset::conv_image(8, 1, 3).with_encoder_widths(&[2, 3])
}

fn golden_input() -> Tensor<f64> {
    Tensor::from_fn(vec![2, 8, 8, 1], |i| (i % 7) as f64 / 6.0).unwrap()
}

/// Plain loops: stride-2 "same" cross-correlation (pad total split with the
/// odd cell after), bias, ReLU. Shares nothing with the library's conv code.
fn straight_line_encoder(p: &ParameterSet<f64>, x: &Tensor<f64>, widths: &[usize]) -> Vec<f64> {
    let (b, mut h, mut c) = (x.dims()[0], x.dims()[1], x.dims()[3]);
    let mut act = x.data().to_vec();
    for (layer, &co) in widths.iter().enumerate() {
        let k = p.get(&format!("enc.conv{}.kernel", layer + 1)).unwrap();
        let bias = p.get(&format!("enc.conv{}.bias", layer + 1)).unwrap().data();
        let ks = k.dims()[0];
        let out = h.div_ceil(2);
        let pad = ((out - 1) * 2 + ks).saturating_sub(h) / 2;
        let mut next = vec![0.0; b * out * out * co];
        for n in 0..b {
            for oy in 0..out {
                for ox in 0..out {
                    for o in 0..co {
                        let mut acc = bias[o];
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * 2 + ky) as i64 - pad as i64;
                                let ix = (ox * 2 + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= h as i64 {
                                    continue;
                                }
                                for ci in 0..c {
                                    let v = act[((n * h + iy as usize) * h + ix as usize) * c + ci];
                                    acc += v * k.data()[((ky * ks + kx) * c + ci) * co + o];
                                }
                            }
                        }
                        next[((n * out + oy) * out + ox) * co + o] = acc.max(0.0);
                    }
                }
            }
        }
        (act, h, c) = (next, out, co);
    }
    act
}

// Produced once by `straight_line_encoder` for seed 7 on `golden_input()`.
const GOLDEN: [f64; 24] = [
    0.30524088315415043,
    0.12467106786276054,
    0.2188885454110353,
    0.08466666105822197,
    0.0861547397985648,
    0.1271203577678008,
    0.1285133910655768,
    0.0,
    0.2547874089820175,
    0.051058072219968324,
    0.04980121590453792,
    0.0,
    0.2590239674943197,
    0.14273560342456218,
    0.4097542759128479,
    0.09693320836483521,
    0.1525603319175298,
    0.0,
    0.0,
    0.0,
    0.23092277383946777,
    0.006865017096345204,
    0.05144178072726496,
    0.0,
];

#[test]
fn encoder_matches_straight_line_reimplementation() {
    let preset = golden_preset();
    let p: ParameterSet<f64> = init_params(&preset, NetworkRole::Encoder, 7).unwrap();
    let x = golden_input();
    let oracle = straight_line_encoder(&p, &x, &preset.encoder_widths);
    let got = encoder_forward(&preset, &p, &x).unwrap();
    assert_eq!(got.dims(), &[2, 2, 2, 3]);
    for (i, (a, b)) in got.data().iter().zip(&oracle).enumerate() {
        assert!((a - b).abs() < 1e-12, "feature {i}: {a} vs {b}");
    }
    for (i, (a, b)) in got.data().iter().zip(GOLDEN).enumerate() {
        assert!((a - b).abs() < 1e-12, "feature {i}: {a} vs recorded {b}");
    }
}

fn random(dims: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi)).unwrap()
}

#[test]
fn untrained_classifier_is_near_uniform() {
    let preset = ArchitecturePreset::conv_image(16, 1, 10).with_encoder_widths(&[8, 16, 32, 64]);
    let mut total = 0.0;
    for seed in 0..10 {
        let enc: ParameterSet<f64> = init_params(&preset, NetworkRole::Encoder, seed).unwrap();
        let cls: ParameterSet<f64> = init_params(&preset, NetworkRole::Classifier, seed).unwrap();
        let x = random(vec![16, 16, 16, 1], 100 + seed, 0.0, 1.0);
        let p = classifier_forward(&preset, &cls, &encoder_forward(&preset, &enc, &x).unwrap()).unwrap();
        for row in p.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mean_max: f64 = p.data().chunks(10).map(|r| r.iter().copied().fold(0.0, f64::max)).sum::<f64>() / 16.0;
        total += mean_max;
    }
    let avg = total / 10.0;
    assert!(avg < 0.9, "seed-averaged max probability {avg}");
}

#[test]
fn discriminator_logits_stay_finite_for_large_features() {
    let preset = ArchitecturePreset::conv_image(16, 3, 10);
    let d: ParameterSet<f64> = init_params(&preset, NetworkRole::Discriminator, 3).unwrap();
    let f32_d: ParameterSet<f32> = d.cast();
    for scale in [1.0, 1e2, 1e3] {
        let f = random([vec![4], preset.feature_shape()].concat(), 9, -scale, scale);
        let logits = discriminator_forward(&preset, &d, &f).unwrap();
        assert_eq!(logits.dims(), &[4, 10]);
        assert!(logits.is_finite(), "scale {scale}");
        let score = unsupervised_score(&logits).unwrap();
        assert!(score.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        // training runs in single precision
        let l32 = discriminator_forward(&preset, &f32_d, &f.cast()).unwrap();
        assert!(l32.is_finite() && unsupervised_score(&l32).unwrap().is_finite(), "f32 scale {scale}");
    }
}

#[test]
fn both_heads_read_the_same_logits() {
    let preset = ArchitecturePreset::mlp_vector(2, 4);
    let d: ParameterSet<f64> = init_params(&preset, NetworkRole::Discriminator, 1).unwrap();
    let f = random(vec![5, 64], 2, 0.0, 2.0);
    let logits = discriminator_forward(&preset, &d, &f).unwrap();
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let s = g.softmax(l, 1).unwrap();
    let sup = sadda::networks::discriminator_supervised(&mut g, sadda::networks::DiscriminatorLogits(l)).unwrap();
    assert_eq!(g.value(s), g.value(sup));
    // D_unsup = Z / (Z + 1) from the very same rows
    let unsup = unsupervised_score(&logits).unwrap();
    for (row, &u) in logits.data().chunks(4).zip(unsup.data()) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((u - z / (z + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn cloned_target_encoder_starts_identical() {
    let preset = golden_preset();
    let m_s: ParameterSet<f32> = init_params(&preset, NetworkRole::Encoder, 5).unwrap();
    let mut m_t = clone_params(&m_s);
    let x = golden_input().cast::<f32>();
    assert_eq!(encoder_forward(&preset, &m_s, &x).unwrap(), encoder_forward(&preset, &m_t, &x).unwrap());
    m_t.values_mut("enc.conv1.bias").unwrap()[0] = 1.0;
    assert_eq!(m_s.get("enc.conv1.bias").unwrap().data()[0], 0.0);
}
