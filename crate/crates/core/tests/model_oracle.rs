mod common;

use common::*;
use rac_core::corpus::PAD;
use rac_core::model::{RacConfig, RacModel};
use rac_core::numerics::{Rng, Tensor};

fn check_against_oracle(model: &RacModel, ids: &[usize], titles: &rac_core::corpus::TitleMatrix) -> f64 {
    let act = model.predict(ids, titles, false, &mut Rng::new(0)).unwrap();
    let o = forward_oracle(model, ids, titles);
    let y_diff = o.y.iter().zip(&act.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    [
        max_abs_diff(&o.e_x, &act.e_x),
        max_abs_diff(&o.u_x, &act.u_x),
        max_abs_diff(&o.e_t, &act.e_t),
        max_abs_diff(&o.attention, &act.attention),
        max_abs_diff(&o.v_x, &act.v_x),
        y_diff,
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

#[test]
fn forward_matches_loop_oracle_across_configs() {
    let mut rng = Rng::new(2024);
    let configs = [
        tiny_config(13, 4, 7, 3, 5),
        RacConfig { conv_kernel: 4, ..tiny_config(11, 6, 9, 5, 3) },
        RacConfig { sam_layers: 0, reader_conv_layers: 1, ..tiny_config(9, 3, 5, 2, 2) },
        RacConfig { code_title_queries: false, output_bias: false, ..tiny_config(9, 5, 6, 4, 4) },
        RacConfig { mask_padding: true, ..tiny_config(10, 4, 8, 3, 3) },
    ];
    for config in configs {
        for _ in 0..5 {
            let model = random_model(config.clone(), &mut rng, 0.7);
            let mut ids = random_ids(&mut rng, config.n_x, config.vocab_size);
            ids[config.n_x - 1] = PAD;
            let titles = random_titles(&mut rng, config.n_y, config.n_t, config.vocab_size);
            let err = check_against_oracle(&model, &ids, &titles);
            assert!(err < 1e-10, "{config:?}: {err}");
        }
    }
}

#[test]
fn batched_scores_match_single_predictions() {
    let mut rng = Rng::new(5);
    let config = tiny_config(12, 4, 6, 3, 4);
    let model = random_model(config.clone(), &mut rng, 0.5);
    let titles = random_titles(&mut rng, 4, 3, 12);
    let examples: Vec<_> = (0..3)
        .map(|i| rac_core::corpus::EncodedExample {
            token_ids: random_ids(&mut rng, 6, 12),
            label_vector: vec![0; 4],
            source_id: format!("d{i}"),
        })
        .collect();
    let scores = model.predict_scores(&examples, &titles).unwrap();
    for (i, ex) in examples.iter().enumerate() {
        let y = model.predict(&ex.token_ids, &titles, false, &mut Rng::new(0)).unwrap().y;
        assert_eq!(scores.row(i), &y[..]);
    }
}

#[test]
fn row_permutation_of_embedded_input_leaves_output_unchanged() {
    let mut rng = Rng::new(77);
    let config = tiny_config(10, 5, 9, 3, 4);
    let model = random_model(config, &mut rng, 0.6);
    let titles = random_titles(&mut rng, 4, 3, 10);
    let e_x = random_tensor(&mut rng, &[9, 5], 1.0);
    let mut perm: Vec<usize> = (0..9).collect();
    rng.shuffle(&mut perm);
    let a = model.predict_from_embedded(&e_x, &titles).unwrap();
    let b = model.predict_from_embedded(&e_x.permute_rows(&perm).unwrap(), &titles).unwrap();
    let diff = a.y.iter().zip(&b.y).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
    // U_x rows move with the permutation
    let moved = a.u_x.permute_rows(&perm).unwrap();
    assert!(moved.max_abs_diff(&b.u_x).unwrap() < 1e-12);
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = Rng::new(3);
    for _ in 0..10 {
        let config = tiny_config(10, 4, 7, 3, 5);
        let model = random_model(config, &mut rng, 1.5);
        let ids = random_ids(&mut rng, 7, 10);
        let titles = random_titles(&mut rng, 5, 3, 10);
        let act = model.predict(&ids, &titles, false, &mut Rng::new(0)).unwrap();
        assert_eq!(act.attention.shape(), &[5, 7]);
        for r in 0..5 {
            let row = act.attention.row(r);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(act.y.iter().all(|&y| y > 0.0 && y < 1.0));
    }
}

#[test]
fn masked_padding_ignores_pad_positions() {
    let mut rng = Rng::new(8);
    let config = RacConfig { mask_padding: true, ..tiny_config(10, 4, 8, 3, 3) };
    let model = random_model(config, &mut rng, 0.5);
    let titles = random_titles(&mut rng, 3, 3, 10);
    let ids = vec![2, 3, 4, 5, PAD, PAD, PAD, PAD];
    let act = model.predict(&ids, &titles, false, &mut Rng::new(0)).unwrap();
    for r in 0..3 {
        assert!(act.attention.row(r)[4..].iter().all(|&w| w == 0.0));
    }
}

#[test]
fn loaded_checkpoint_predicts_identically() {
    let mut rng = Rng::new(31);
    let config = tiny_config(10, 4, 6, 3, 3);
    let model = random_model(config, &mut rng, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, "v", "t").unwrap();
    let (back, _) = RacModel::load(&path).unwrap();
    let ids = random_ids(&mut rng, 6, 10);
    let titles = random_titles(&mut rng, 3, 3, 10);
    let a = model.predict(&ids, &titles, false, &mut Rng::new(0)).unwrap();
    let b = back.predict(&ids, &titles, false, &mut Rng::new(0)).unwrap();
    assert_eq!(a, b);
    let bytes = std::fs::read(&path).unwrap();
    back.save(&path, "v", "t").unwrap();
    assert_eq!(bytes, std::fs::read(&path).unwrap());
}

#[test]
fn even_kernel_padding_matches_oracle() {
    let mut rng = Rng::new(4);
    let x = random_tensor(&mut rng, &[6, 3], 1.0);
    let k = random_tensor(&mut rng, &[4, 3, 2], 1.0);
    let b = random_tensor(&mut rng, &[2], 1.0);
    let mut tape = rac_core::numerics::Tape::new();
    let (xv, kv, bv) = (tape.constant_ref(&x), tape.constant_ref(&k), tape.constant_ref(&b));
    let out = tape.conv1d(xv, kv, bv).unwrap();
    let expect = conv_same(&mat(&x), &k, b.data());
    assert!(max_abs_diff(&expect, tape.value(out).unwrap()) < 1e-14);
    let _: &Tensor = tape.value(out).unwrap();
}
