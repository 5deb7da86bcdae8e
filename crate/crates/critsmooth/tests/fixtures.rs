//! The shipped model files describe exactly the built-in fixtures.

use std::path::Path;

use critsmooth::model::fixtures::{ball_2d, c14, rank1_2d, rank1_2d_b};
use critsmooth::model::EnsembleSpec;

fn load(name: &str) -> EnsembleSpec {
    EnsembleSpec::from_toml_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)).unwrap()
}

#[test]
fn fixture_files_match_builders() {
    assert_eq!(load("rank1_2d.toml"), rank1_2d(1.0));
    assert_eq!(load("rank1_2d_b.toml"), rank1_2d_b(1.0));
    assert_eq!(load("c14.toml"), c14(1.0));
    assert_eq!(load("ball_2d.toml"), ball_2d(1.0));
}

#[test]
fn written_specs_parse_back() {
    for spec in [rank1_2d(0.3), rank1_2d_b(0.5), ball_2d(2.0)] {
        assert_eq!(EnsembleSpec::from_toml_str(&spec.to_toml_string()).unwrap(), spec);
    }
}
