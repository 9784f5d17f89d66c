use std::fs;

use kmp_core::data::Dataset;
use kmp_core::error::KmpError;
use kmp_core::io::{load_csv, read_chain, read_table, save_csv, wage_preprocess, wage_split, write_chain, Schema};
use kmp_core::prior::PriorConfig;
use kmp_core::sampler::{run_chain, McmcConfig};

#[test]
fn three_rows_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let x = vec![0.1, 1.0 / 3.0, 0.987_654_321_012_345_6];
    let y = vec![-2.5e-7, std::f64::consts::PI, 1e20];
    let data = Dataset::univariate(x, y).unwrap();
    let path = dir.path().join("toy.csv");
    save_csv(&path, &data).unwrap();
    let back = load_csv(&path, &Schema::univariate("x1", "y")).unwrap();
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.x), bits(&data.x));
    assert_eq!(bits(&back.y), bits(&data.y));

    let again = dir.path().join("again.csv");
    save_csv(&again, &back).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn na_cell_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("na.csv");
    fs::write(&path, "x,y\n0.2,1.0\n0.4,NA\n0.6,2.0\n").unwrap();
    match load_csv(&path, &Schema::univariate("x", "y")) {
        Err(KmpError::Data { row, column, message }) => {
            assert_eq!((row, column.as_str()), (3, "y"));
            assert!(message.contains("NA"), "{message}");
        }
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn out_of_range_design_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("range.csv");
    fs::write(&path, "x,y\n0.2,1.0\n1.4,2.0\n").unwrap();
    assert!(load_csv(&path, &Schema::univariate("x", "y")).is_err());
}

const WAGE_FIXTURE: &str = "\
wage,lwage,female,married,educ,tenure,exper
3.10,1.131,yes,no,11,0,2
3.24,1.175,no,yes,12,2,22
3.00,1.099,yes,no,11,0,2
6.00,1.792,no,yes,8,28,44
5.30,1.668,no,yes,12,2,7
8.75,2.169,no,yes,16,8,9
11.25,2.420,no,no,18,7,15
5.00,1.609,yes,yes,12,3,5
3.60,1.281,yes,no,12,3,26
18.18,2.900,no,yes,17,22,22
";

#[test]
fn wage_fixture_preprocessing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wage.csv");
    fs::write(&path, WAGE_FIXTURE).unwrap();
    let out = wage_preprocess(&read_table(&path).unwrap()).unwrap();
    let d = &out.data;
    assert_eq!((d.n(), d.p, d.q), (10, 1, 4));
    assert_eq!(d.z_names, ["female", "married", "educ", "tenure"]);
    assert_eq!(out.warnings.len(), 1);
    for j in 0..2 {
        assert!((0..10).all(|i| d.z_row(i)[j].abs() == 1.0));
    }
    assert_eq!(d.z_row(0)[0], 1.0);
    assert_eq!(d.z_row(0)[1], -1.0);
    for j in 2..4 {
        let s: f64 = (0..10).map(|i| d.z_row(i)[j]).sum();
        assert!(s.abs() < 1e-12, "column {j} sums to {s}");
    }
    assert!(d.x.iter().all(|&v| v > 0.0 && v < 1.0));
    let (lo, hi) = d.x.iter().fold((1.0_f64, 0.0_f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(lo < 1e-5 && hi > 1.0 - 1e-5);

    let split = wage_split(d, 3).unwrap();
    assert_eq!(split.train.n() + split.test.n(), 10);
    assert_eq!(split, wage_split(d, 3).unwrap());
}

#[test]
fn chain_file_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let x: Vec<f64> = (0..40).map(|i| (i as f64 + 0.5) / 40.0).collect();
    let y: Vec<f64> = x.iter().map(|v| (4.0 * v).cos()).collect();
    let data = Dataset::univariate(x, y).unwrap();
    let cfg = McmcConfig { burnin: 20, samples: 15, seed: 4, ..Default::default() };
    let draws = run_chain(&cfg, &PriorConfig::default(), 3, &data).unwrap();
    let path = dir.path().join("chain.csv");
    write_chain(&path, &draws).unwrap();
    let back = read_chain(&path).unwrap();
    assert_eq!(back, draws);
}
