use std::io::Write;
use std::path::PathBuf;

use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use tdamp_core::data::{
    batch_ranges, load_idx, load_regression_csv, partition_clients, shuffled_order, Dataset,
    Labels, Normalizer, Split,
};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn boston() -> (Dataset, Dataset) {
    let dir = data_dir().join("boston");
    (
        load_regression_csv(&dir.join("train.csv"), Split::Train).unwrap(),
        load_regression_csv(&dir.join("test.csv"), Split::Test).unwrap(),
    )
}

fn targets(d: &Dataset) -> &Array2<f64> {
    match &d.labels {
        Labels::Regression(y) => y,
        Labels::Classification { .. } => panic!("regression expected"),
    }
}

#[test]
fn boston_splits_have_the_expected_shape() {
    let (train, test) = boston();
    assert_eq!(
        (train.len(), train.n_features(), train.n_outputs()),
        (404, 13, 1)
    );
    assert_eq!((test.len(), test.n_features()), (102, 13));
    assert_eq!(batch_ranges(train.len(), 101).unwrap().len(), 4);
}

#[test]
fn mnist_splits_have_the_expected_shape() {
    let dir = data_dir().join("mnist");
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte.gz"),
        &dir.join("train-labels-idx1-ubyte.gz"),
        Split::Train,
    )
    .unwrap();
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte.gz"),
        &dir.join("t10k-labels-idx1-ubyte.gz"),
        Split::Test,
    )
    .unwrap();
    assert_eq!(
        (train.len(), train.n_features(), train.n_outputs()),
        (60_000, 784, 10)
    );
    assert_eq!(test.len(), 10_000);
    assert!(train.features.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(train.features.iter().any(|&p| p == 1.0));
    let classes = train
        .classes(&(0..train.len()).collect::<Vec<_>>())
        .unwrap();
    assert!((0..10).all(|c| classes.contains(&c)));
    let shards = partition_clients(&shuffled_order(train.len(), 0), 10).unwrap();
    assert!(shards.iter().all(|s| s.len() == 6000));
    assert_eq!(Normalizer::fit(&train).apply(&test), test);
}

#[test]
fn normalization_uses_training_statistics() {
    let (train, test) = boston();
    let norm = Normalizer::fit(&train);
    let z = norm.apply(&train);
    let n = z.len() as f64;
    for col in z
        .features
        .axis_iter(Axis(1))
        .chain(targets(&z).axis_iter(Axis(1)))
    {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(
            mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10,
            "mean {mean}, var {var}"
        );
    }
    let zt = norm.apply(&test);
    for j in 0..13 {
        let expected = (test.features[(0, j)] - norm.features.shift[j]) / norm.features.scale[j];
        assert_eq!(zt.features[(0, j)], expected);
    }
    let back = norm.invert(&zt);
    for (a, b) in back.features.iter().zip(test.features.iter()) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }
    for (a, b) in targets(&back).iter().zip(targets(&test).iter()) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }
}

#[test]
fn constant_columns_are_only_centred() {
    let x = array![[1.0, 4.0], [2.0, 4.0], [3.0, 4.0]];
    let d = Dataset::new(
        x,
        Labels::Regression(array![[0.0], [1.0], [2.0]]),
        Split::Train,
    )
    .unwrap();
    let norm = Normalizer::fit(&d);
    assert_eq!(norm.features.scale[1], 1.0);
    let z = norm.apply(&d);
    assert!(z.features.column(1).iter().all(|&v| v == 0.0));
    assert_eq!(norm.invert(&z).features, d.features);
}

#[test]
fn malformed_csv_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "a,b,y\n1,2,3\n4,x,6\n").unwrap();
    assert!(load_regression_csv(&path, Split::Train).is_err());
    std::fs::write(&path, "a,b,y\n1,2,3\n4,5\n").unwrap();
    assert!(load_regression_csv(&path, Split::Train).is_err());
    std::fs::write(&path, "a,b,y\n").unwrap();
    assert!(load_regression_csv(&path, Split::Train).is_err());
}

/// Two 2x3 images, digits 7 and 0, written byte by byte.
fn fixture_bytes() -> (Vec<u8>, Vec<u8>) {
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 10]);
    let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 0];
    (img, lab)
}

#[test]
fn idx_fixture_decodes_big_endian_headers() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = fixture_bytes();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, &img).unwrap();
    std::fs::write(&lp, &lab).unwrap();
    let d = load_idx(&ip, &lp, Split::Test).unwrap();
    assert_eq!((d.len(), d.n_features()), (2, 6));
    assert_eq!(
        d.features.row(0).to_vec(),
        vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    );
    assert_eq!((d.features.sum() * 255.0).round(), 1030.0);
    assert_eq!(d.classes(&[0, 1]).unwrap(), vec![7, 0]);

    let (gi, gl) = (dir.path().join("img.gz"), dir.path().join("lab.gz"));
    for (path, bytes) in [(&gi, &img), (&gl, &lab)] {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).unwrap();
        std::fs::write(path, enc.finish().unwrap()).unwrap();
    }
    assert_eq!(load_idx(&gi, &gl, Split::Test).unwrap(), d);

    let (wi, wl) = (dir.path().join("w-img"), dir.path().join("w-lab"));
    tdamp_core::data::write_idx(
        &wi,
        &wl,
        &[img[16..22].to_vec(), img[22..].to_vec()],
        2,
        3,
        &[7, 0],
    )
    .unwrap();
    assert_eq!(std::fs::read(&wi).unwrap(), img);
    assert_eq!(std::fs::read(&wl).unwrap(), lab);
}

#[test]
fn corrupt_idx_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = fixture_bytes();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    let cases: [(Vec<u8>, Vec<u8>); 4] = [
        (
            {
                let mut b = img.clone();
                b[3] = 1;
                b
            },
            lab.clone(),
        ),
        (img[..img.len() - 1].to_vec(), lab.clone()),
        (img[..10].to_vec(), lab.clone()),
        (img.clone(), {
            let mut b = lab.clone();
            b[8] = 12;
            b
        }),
    ];
    for (i, l) in cases {
        std::fs::write(&ip, i).unwrap();
        std::fs::write(&lp, l).unwrap();
        assert!(load_idx(&ip, &lp, Split::Train).is_err());
    }
    assert!(load_idx(&dir.path().join("missing"), &lp, Split::Train).is_err());
}

#[test]
fn partition_rejects_impossible_client_counts() {
    let order = shuffled_order(5, 1);
    assert!(partition_clients(&order, 0).is_err());
    assert!(partition_clients(&order, 6).is_err());
    assert_eq!(shuffled_order(100, 9), shuffled_order(100, 9));
    assert_ne!(shuffled_order(100, 9), shuffled_order(100, 10));
}

proptest! {
    #[test]
    fn partitions_are_exact_and_balanced(n in 1usize..500, k in 1usize..50, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let order = shuffled_order(n, seed);
        let shards = partition_clients(&order, k).unwrap();
        prop_assert_eq!(shards.len(), k);
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn batches_tile_the_range(n in 1usize..1000, bs in 1usize..200) {
        let ranges = batch_ranges(n, bs).unwrap();
        prop_assert_eq!(ranges.len(), n.div_ceil(bs));
        prop_assert_eq!(ranges[0].start, 0);
        prop_assert_eq!(ranges.last().unwrap().end, n);
        prop_assert!(ranges.windows(2).all(|w| w[0].end == w[1].start));
        prop_assert!(ranges.iter().all(|r| !r.is_empty() && r.len() <= bs));
    }
}
