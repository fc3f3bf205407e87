use std::fs;

use cyclic_dp::checkpoint;
use cyclic_dp::csv_io::{load_csv, write_csv, SINGLE_SITE};
use cyclic_dp::CliError;
use cyclic_dp_core::data::{generate_multisite, Provenance};
use cyclic_dp_core::nn::init_params;
use cyclic_dp_core::{Activation, ArchitectureSpec, ModelParams, SiteDataSpec};
use proptest::prelude::*;

#[test]
fn csv_rows_group_by_site() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x1,x2,y,site\n0.1,2,1,A\n0.3, 4 ,0,A\n0.5,6,1,B\n0.7,8,0,B\n").unwrap();
    let sites = load_csv(&path, "y", Some("site")).unwrap();
    assert_eq!(sites.len(), 2);
    assert_eq!(sites[0].site_id(), "A");
    assert_eq!(sites[1].site_id(), "B");
    assert_eq!(sites[0].len(), 2);
    assert_eq!(sites[1].len(), 2);
    assert_eq!(sites[0].features().row(1), &[0.3, 4.0]);
    assert_eq!(sites[1].labels(), &[1, 0]);
    assert_eq!(sites[0].provenance(), Provenance::Csv);

    let one = load_csv(&path, "y", None);
    // without a site column the site column itself is a (non-numeric) feature
    assert!(matches!(one, Err(CliError::Data { .. })));
    fs::write(&path, "x1,x2,y\n0.1,2,1\n0.3,4,0\n").unwrap();
    let one = load_csv(&path, "y", None).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].site_id(), SINGLE_SITE);
}

#[test]
fn csv_label_outside_binary_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x,y\n0.1,1\n0.2,2\n0.3,0\n").unwrap();
    let err = load_csv(&path, "y", None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let msg = err.to_string();
    assert!(msg.contains("line 3") && msg.contains("`2`"), "{msg}");
}

#[test]
fn csv_non_numeric_rows_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x,z,y\n0.1,1,1\nabc,2,0\n0.3,,1\n0.4,inf,0\n").unwrap();
    let msg = load_csv(&path, "y", None).unwrap_err().to_string();
    assert!(msg.contains("3 row(s)") && msg.contains("lines 3, 4, 5"), "{msg}");
}

#[test]
fn csv_missing_column_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x,y\n0.1,1\n").unwrap();
    let msg = load_csv(&path, "label", None).unwrap_err().to_string();
    assert!(msg.contains("missing column `label`"), "{msg}");
    let missing = dir.path().join("nope.csv");
    assert_eq!(load_csv(&missing, "y", None).unwrap_err().exit_code(), 3);
}

#[test]
fn synthetic_data_survives_a_csv_round_trip() {
    let d = 4;
    let mut a = SiteDataSpec::new("a", 120, d);
    a.feature_shift = vec![0.5, -1.0, 2.0, 0.0];
    let b = SiteDataSpec::new("b", 80, d);
    let data = generate_multisite(d, &[1.0, -0.5, 0.25, 2.0], &[a, b], 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out").join("synth.csv");
    write_csv(&path, &data, "label", "site").unwrap();
    let back = load_csv(&path, "label", Some("site")).unwrap();
    assert_eq!(back.len(), 2);
    for (x, y) in data.iter().zip(&back) {
        assert_eq!(x.site_id(), y.site_id());
        assert_eq!(x.labels(), y.labels());
        for (u, v) in x.features().as_slice().iter().zip(y.features().as_slice()) {
            assert!((u - v).abs() <= 1e-9);
        }
    }
}

fn arch_strategy() -> impl Strategy<Value = ArchitectureSpec> {
    (
        prop::collection::vec(1usize..8, 1..4),
        prop::bool::ANY,
    )
        .prop_map(|(mut sizes, tanh)| {
            sizes.push(1);
            let act = if tanh { Activation::Tanh } else { Activation::Relu };
            ArchitectureSpec::new(sizes, act).unwrap()
        })
}

proptest! {
    #[test]
    fn checkpoints_round_trip(arch in arch_strategy(), seed in any::<u64>()) {
        let p = init_params(&arch, seed);
        let bytes = checkpoint::encode(&p);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(
            back.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_checkpoints_are_rejected(arch in arch_strategy(), cut in 1usize..64) {
        let bytes = checkpoint::encode(&ModelParams::zeros(&arch));
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(checkpoint::decode(&bytes[..keep]).is_err());
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let arch = ArchitectureSpec::new(vec![3, 4, 1], Activation::Relu).unwrap();
    let p = init_params(&arch, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a").join("final.cdpw");
    checkpoint::save(&path, &p).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), p);
    assert!(!dir.path().join("a").join("final.cdpw.tmp").exists());
    fs::write(&path, b"CDPW").unwrap();
    assert_eq!(checkpoint::load(&path).unwrap_err().exit_code(), 3);
}
