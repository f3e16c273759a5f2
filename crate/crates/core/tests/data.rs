use std::io::Write;

use ice_mlp::data::{self, ColumnFilter, CsvOptions};
use ice_mlp::network::LabeledSample;
use ice_mlp::{Dataset, Network, NetworkTopology, SyntheticSpec};
use proptest::prelude::*;

fn within_sigmas(count: usize, n: usize, p: f64, sigmas: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= sigmas * sd
}

#[test]
fn zero_teacher_gives_uniform_labels() {
    let topo = NetworkTopology::new(vec![11, 5, 3]).unwrap();
    let data = data::generate_from_teacher(&Network::zeros(topo), 1.0, false, 10_000, 9).unwrap();
    for (class, &count) in data.class_frequencies().iter().enumerate() {
        assert!(within_sigmas(count, 10_000, 1.0 / 3.0, 3.0), "class {class}: {count}");
    }
}

#[test]
fn saturated_teacher_picks_its_class() {
    let topo = NetworkTopology::new(vec![4, 3]).unwrap();
    let mut teacher = Network::zeros(topo.clone());
    let (_, cols) = topo.layer_shape(0);
    teacher.layer_weights_mut(0)[0] = 25.0;
    teacher.layer_weights_mut(0)[2 * cols] = 0.5;
    let data = data::generate_from_teacher(&teacher, 1.0, false, 1_000, 3).unwrap();
    let freq = data.class_frequencies();
    assert!(freq[0] as f64 >= 0.99 * 1_000.0, "{freq:?}");
}

#[test]
fn features_lie_in_the_unit_interval_or_their_scaled_copy() {
    let spec = SyntheticSpec {
        scale_mixture: true,
        ..SyntheticSpec::default()
    };
    let data = data::generate_synthetic(&spec, 2_000, 1).unwrap();
    for s in data.iter() {
        for (j, x) in s.features.iter().enumerate() {
            let scale = 10f64.powi((j % 3) as i32);
            assert!((0.0..scale).contains(x));
        }
    }
}

#[test]
fn csv_round_trip_is_lossless() {
    let data = data::generate_synthetic(&SyntheticSpec::default(), 300, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    data::write_csv_file(&data, &path).unwrap();
    let (back, report) = data::load_csv(
        &path,
        &CsvOptions {
            label_column: "label".into(),
            ..CsvOptions::default()
        },
    )
    .unwrap();
    assert_eq!(report.rows_read, 300);
    assert_eq!(report.rows_kept, 300);
    assert_eq!(back.samples(), data.samples());
}

#[test]
fn csv_filters_and_named_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("named.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "income,age,outcome").unwrap();
    writeln!(f, "10.5,30,paid").unwrap();
    writeln!(f, "-1,40,default").unwrap();
    writeln!(f, "7,n/a,paid").unwrap();
    writeln!(f, "3,25,default").unwrap();
    writeln!(f, "4,95,paid").unwrap();
    drop(f);
    let options = CsvOptions {
        label_column: "outcome".into(),
        feature_columns: Some(vec!["age".into(), "income".into()]),
        filters: vec![
            "income>=0".parse::<ColumnFilter>().unwrap(),
            "age in [18,90]".parse().unwrap(),
        ],
        strict: false,
    };
    let (data, report) = data::load_csv(&path, &options).unwrap();
    assert_eq!(report.rows_read, 5);
    assert_eq!(report.dropped_by_filter, 2);
    assert_eq!(report.dropped_unparseable, 1);
    assert_eq!(data.len(), 2);
    assert_eq!(data[0], LabeledSample::new(vec![30.0, 10.5], 0));
    assert_eq!(data[1], LabeledSample::new(vec![25.0, 3.0], 1));
    assert_eq!(data.class_count(), 2);

    let strict = CsvOptions { strict: true, ..options };
    assert!(data::load_csv(&path, &strict).is_err());
}

#[test]
fn split_fraction_is_binomial() {
    let data = data::generate_synthetic(&SyntheticSpec::default(), 10_000, 2).unwrap();
    for seed in 0..5 {
        let (fit, test) = data::split(&data, 0.25, seed).unwrap();
        assert_eq!(fit.len() + test.len(), 10_000);
        assert!(within_sigmas(fit.len(), 10_000, 0.25, 4.0), "{}", fit.len());
    }
}

#[test]
fn split_partitions_the_samples() {
    let samples: Vec<LabeledSample> = (0..500).map(|i| LabeledSample::new(vec![i as f64], i % 2)).collect();
    let data = Dataset::new(samples, 1, 2).unwrap();
    let (fit, test) = data::split(&data, 0.4, 11).unwrap();
    let mut ids: Vec<f64> = fit.iter().chain(test.iter()).map(|s| s.features[0]).collect();
    ids.sort_by(f64::total_cmp);
    assert_eq!(ids, (0..500).map(|i| i as f64).collect::<Vec<_>>());
}

#[test]
fn subsample_is_uniform_over_indices() {
    let n = 40;
    let samples: Vec<LabeledSample> = (0..n).map(|i| LabeledSample::new(vec![i as f64], 0)).collect();
    let data = Dataset::new(samples, 1, 1).unwrap();
    let draws = 2_000;
    let mut hits = vec![0usize; n];
    for seed in 0..draws {
        let sub = data::subsample(&data, 10, seed).unwrap();
        assert_eq!(sub.len(), 10);
        for s in sub.iter() {
            hits[s.features[0] as usize] += 1;
        }
    }
    // each index is picked with probability 1/4 per draw
    for (i, &h) in hits.iter().enumerate() {
        assert!(within_sigmas(h, draws as usize, 0.25, 5.0), "index {i}: {h}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn subsample_keeps_order_without_duplicates(n in 1usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let samples: Vec<LabeledSample> = (0..n).map(|i| LabeledSample::new(vec![i as f64], 0)).collect();
        let data = Dataset::new(samples, 1, 1).unwrap();
        let target = (frac * n as f64) as usize;
        let sub = data::subsample(&data, target, seed).unwrap();
        prop_assert_eq!(sub.len(), target);
        prop_assert!(sub.windows(2).all(|w| w[0].features[0] < w[1].features[0]));
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let spec = SyntheticSpec::default();
        let a = data::generate_synthetic(&spec, 50, seed).unwrap();
        let b = data::generate_synthetic(&spec, 50, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
