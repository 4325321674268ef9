use super::*;
use crate::model::EncoderConfig;
use crate::noise::NoiseInit;
use crate::qa_data::{synthesize_toy_dataset, tokenize_and_align, ToyDatasetSpec, NUM_RESERVED};
use crate::rng::{seeded, standard_normal};
use proptest::prelude::*;
use rand::Rng;

fn identity(n: usize) -> EmbeddingTable {
    EmbeddingTable(Mat::eye(n))
}

fn brute_force(table: &EmbeddingTable, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for id in 0..table.vocab_size() {
        let mut s = 0.0;
        for (i, x) in v.iter().enumerate() {
            s += table.0[[id, i]] * x;
        }
        if s > best_score {
            best = id;
            best_score = s;
        }
    }
    best
}

#[test]
fn identity_table_self_projects() {
    let t = identity(6);
    for id in 0..6 {
        assert_eq!(back_project(&t, t.embedding(id)), id);
        let scaled = t.embedding(id).mapv(|x| x * 3.7);
        assert_eq!(back_project(&t, scaled.view()), id);
    }
}

#[test]
fn ties_go_to_the_smallest_id() {
    let t = EmbeddingTable(Mat::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
    assert_eq!(back_project(&t, ndarray::arr1(&[2.0, 0.0]).view()), 0);
}

#[test]
fn back_projection_matches_brute_force() {
    let mut rng = seeded(1);
    for _ in 0..200 {
        let t = EmbeddingTable(standard_normal(&mut rng, 20, 8));
        let v = standard_normal(&mut rng, 1, 8);
        assert_eq!(
            back_project(&t, v.row(0)),
            brute_force(&t, v.row(0).as_slice().unwrap())
        );
    }
}

#[test]
fn change_ratio_examples() {
    let t = identity(10);
    let ids: Vec<usize> = (0..10).collect();
    let e = Mat::eye(10);
    let r = word_change_ratio(&t, &ids, &e, &[true; 10]).unwrap();
    assert_eq!((r.raw, r.corrected), (0.0, 0.0));
    let mut moved = e.clone();
    moved.row_mut(3).assign(&t.embedding(7));
    let r = word_change_ratio(&t, &ids, &moved, &[true; 10]).unwrap();
    assert_eq!(r.raw, 0.1);
    let mut mask = [true; 10];
    mask[3] = false;
    assert_eq!(word_change_ratio(&t, &ids, &moved, &mask).unwrap().raw, 0.0);
    assert!(word_change_ratio(&t, &ids, &moved, &[false; 10]).is_err());
}

#[test]
fn corrected_ratio_discounts_non_self_projecting_tokens() {
    // Row 1 is dominated by row 0, so token 1 never projects to itself.
    let t = EmbeddingTable(Mat::from_shape_vec((2, 2), vec![2.0, 0.0, 1.0, 0.0]).unwrap());
    let e = t.0.clone();
    let r = word_change_ratio(&t, &[0, 1], &e, &[true, true]).unwrap();
    assert_eq!((r.raw, r.corrected), (0.5, 0.0));
}

#[test]
fn intensity_examples() {
    let mut rng = seeded(2);
    let e = standard_normal(&mut rng, 5, 4);
    let tokens = [3, 1, 4, 1, 5];
    let zero = perturbation_intensity(&e, &e, &tokens, &[true; 5]).unwrap();
    assert!(zero.iter().all(|&(_, d)| d == 0.0));
    let doubled = perturbation_intensity(&e, &(&e * 2.0), &tokens, &[true; 5]).unwrap();
    for (t, &(tok, d)) in doubled.iter().enumerate() {
        assert_eq!(tok, tokens[t]);
        let norm = e.row(t).dot(&e.row(t)).sqrt();
        assert!((d - norm).abs() < 1e-12);
    }
    let other = standard_normal(&mut rng, 5, 4);
    let got = perturbation_intensity(&e, &other, &tokens, &[true, false, true, true, false]).unwrap();
    assert_eq!(got.len(), 3);
    for (&(_, d), t) in got.iter().zip([0, 2, 3]) {
        let mut s = 0.0;
        for i in 0..4 {
            s += (e[[t, i]] - other[[t, i]]).powi(2);
        }
        assert!((d - s.sqrt()).abs() < 1e-6);
    }
}

#[test]
fn buckets_partition_the_ranks() {
    for n in [1, 64, 100, 101, 499, 501, 5_000, 9_999, 10_000, 12_345] {
        let b = rank_buckets(n);
        let covered: usize = b.iter().map(|x| x.hi - x.lo).sum();
        assert_eq!(covered, n, "{n}");
        assert!(b.windows(2).all(|w| w[0].hi == w[1].lo));
    }
    assert_eq!(rank_buckets(64)[0], RankBucket { lo: 0, hi: 64 });
}

fn toy() -> (Vocabulary, Vec<TokenizedExample>) {
    let (raw, vocab) = synthesize_toy_dataset(&ToyDatasetSpec {
        n_examples: 12,
        ..ToyDatasetSpec::default()
    })
    .unwrap();
    let ex = raw.iter().map(|r| tokenize_and_align(r, &vocab).unwrap()).collect();
    (vocab, ex)
}

fn observations(
    vocab: &Vocabulary,
    examples: &[TokenizedExample],
    table: &EmbeddingTable,
    mu: f64,
) -> Vec<NoiseObservation> {
    examples
        .iter()
        .map(|ex| {
            let e = Mat::from_shape_fn((ex.len(), table.dim()), |(t, c)| table.0[[ex.token_ids[t], c]]);
            let _ = vocab;
            NoiseObservation {
                id: ex.id.clone(),
                token_ids: ex.token_ids.clone(),
                mu: Mat::from_elem(e.dim(), mu),
                sigma2: Mat::from_elem(e.dim(), 0.1),
                perturbed: &e * mu,
                embeddings: e,
            }
        })
        .collect()
}

#[test]
fn degenerate_geometry_and_unit_mean() {
    let (vocab, ex) = toy();
    let table = EmbeddingTable(Mat::ones((vocab.len(), 4)));
    let stats = frequency_bucket_stats(&table, &vocab, &observations(&vocab, &ex, &table, 1.0), 5).unwrap();
    let first = &stats[0];
    assert_eq!(first.n_tokens, vocab.len() - NUM_RESERVED);
    assert_eq!(first.knn_l2, Some(0.0));
    assert_eq!(first.mean_mu, Some(1.0));
    assert_eq!(first.pre_post_l2, Some(0.0));
    for b in &stats[1..] {
        assert_eq!(b.n_tokens, 0);
        assert_eq!((b.knn_l2, b.pre_post_l2, b.mean_mu), (None, None, None));
    }
}

#[test]
fn knn_matches_exhaustive_loop() {
    let mut rng = seeded(3);
    let table = EmbeddingTable(standard_normal(&mut rng, 12, 3));
    let pool: Vec<usize> = (2..12).collect();
    let got = knn_distance(&table, 4, &pool, 3).unwrap();
    let mut d: Vec<f64> = pool
        .iter()
        .filter(|&&j| j != 4)
        .map(|&j| {
            (0..3)
                .map(|i| (table.0[[4, i]] - table.0[[j, i]]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!((got - (d[0] + d[1] + d[2]) / 3.0).abs() < 1e-12);
}

#[test]
fn trained_style_ratio_matches_oracle() {
    let (vocab, ex) = toy();
    let model = QaModel::new(
        EncoderConfig {
            d: 8,
            n_layers: 1,
            ..EncoderConfig::default()
        },
        vocab.len(),
    )
    .unwrap();
    let mut store = ParamStore::new();
    let mut rng = seeded(4);
    model.init_params(&mut store, &mut rng);
    let generator = NoiseGenerator::new(8);
    generator.init_params(
        &mut store,
        &mut rng,
        NoiseInit::at_prior(&PriorConfig::multiplicative(0.5)),
    );
    let obs = observe_noise(&model, &generator, &store, &ex, NoiseSource::Final, false, &mut rng).unwrap();
    let table = EmbeddingTable(store.get(crate::model::WORD_EMBEDDING).unwrap().clone());
    for o in &obs {
        let r = word_change_ratio(&table, &o.token_ids, &o.perturbed, &vec![true; o.token_ids.len()]).unwrap();
        let changed = o
            .token_ids
            .iter()
            .enumerate()
            .filter(|&(t, &id)| brute_force(&table, o.perturbed.row(t).as_slice().unwrap()) != id)
            .count();
        assert_eq!(r.raw, changed as f64 / o.token_ids.len() as f64);
    }
    let report = analyze(
        &model,
        &store,
        &vocab,
        &ex,
        Some(NoisePath {
            generator: &generator,
            source: NoiseSource::Final,
            additive: false,
            alpha: 0.5,
        }),
        &AnalysisConfig::default(),
        3,
        &mut seeded(5),
    )
    .unwrap();
    assert_eq!(report.word_change_ratio_series.len(), 5);
    assert!(report
        .word_change_ratio_series
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.raw_ratio) && r.step == 3));
    let tokens: usize = ex.iter().map(|e| e.len()).sum();
    assert_eq!(report.intensity_records.len(), tokens);
}

#[test]
fn report_roundtrip_and_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let empty = AnalysisReport::default();
    emit_report(&empty, dir.path()).unwrap();
    for (f, header) in [
        ("ratios.csv", "step,raw_ratio,corrected_ratio,method"),
        ("intensity.csv", "example_id,position,token,l2"),
        (
            "buckets.csv",
            "rank_lo,rank_hi,n_tokens,n_occurrences,knn_l2,pre_post_l2,mean_mu",
        ),
    ] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(text.trim_end(), header);
    }
    assert_eq!(read_report(&dir.path().join("report.json")).unwrap(), empty);

    let mut rng = seeded(6);
    let methods = ["swep", "word_dropout"];
    let report = AnalysisReport {
        word_change_ratio_series: (0..4)
            .flat_map(|s| {
                methods.map(|m| RatioRecord {
                    step: s * 10,
                    raw_ratio: rng.random(),
                    corrected_ratio: rng.random(),
                    method: m.into(),
                })
            })
            .collect(),
        intensity_records: vec![IntensityRecord {
            example_id: "q1".into(),
            position: 0,
            token: ",".into(),
            l2: 0.25,
        }],
        ..AnalysisReport::default()
    };
    emit_report(&report, dir.path()).unwrap();
    assert_eq!(read_report(&dir.path().join("report.json")).unwrap(), report);
    let rows = std::fs::read_to_string(dir.path().join("ratios.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(rows, 4 * methods.len());
    let intensity = std::fs::read_to_string(dir.path().join("intensity.csv")).unwrap();
    assert!(intensity.contains("q1,0,\",\",0.25"));
    let rendered = render_report(dir.path()).unwrap();
    assert!(rendered.iter().all(|p| p.exists()));
}

#[test]
fn reference_bucket_row_format() {
    // Reference values for the most frequent bucket of a large pretrained
    // model; they only pin down the output format here.
    let dir = tempfile::tempdir().unwrap();
    let report = AnalysisReport {
        bucket_stats: vec![BucketStats {
            bucket: RankBucket { lo: 0, hi: 100 },
            n_tokens: 100,
            n_occurrences: 5000,
            knn_l2: Some(0.6618),
            pre_post_l2: Some(0.2386),
            mean_mu: Some(1.2153),
        }],
        ..AnalysisReport::default()
    };
    emit_report(&report, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("buckets.csv")).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "0,100,100,5000,0.6618,0.2386,1.2153");
}

#[test]
fn unwritable_directory_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    assert!(emit_report(&AnalysisReport::default(), &file.join("sub")).is_err());
}

proptest! {
    #[test]
    fn ratios_ignore_example_order(seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let table = EmbeddingTable(standard_normal(&mut rng, 9, 3));
        let obs: Vec<NoiseObservation> = (0..4).map(|i| {
            let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..9)).collect();
            let e = Mat::from_shape_fn((5, 3), |(t, c)| table.0[[ids[t], c]]);
            NoiseObservation { id: i.to_string(), token_ids: ids, mu: Mat::zeros((5, 3)), sigma2: Mat::zeros((5, 3)), perturbed: &e + &standard_normal(&mut rng, 5, 3), embeddings: e }
        }).collect();
        let a = ratio_record(&table, &obs, |o| Ok(o.perturbed.clone()), "m", 0).unwrap();
        let rev: Vec<_> = obs.iter().rev().cloned().collect();
        let b = ratio_record(&table, &rev, |o| Ok(o.perturbed.clone()), "m", 0).unwrap();
        prop_assert!((a.raw_ratio - b.raw_ratio).abs() < 1e-12);
        prop_assert!((a.corrected_ratio - b.corrected_ratio).abs() < 1e-12);
    }
}
