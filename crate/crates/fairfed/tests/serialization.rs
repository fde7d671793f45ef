//! Debug-output formats: tree CSV rows and the privacy-honouring default.

use fairfed::core::{NoiseMode, PrivacyBudget, RngStream};
use fairfed::threshold::{build_site_trees, dd_grid, write_trees_csv, SiteZ, ZScores};

fn toy_trees() -> Vec<fairfed::threshold::SiteTrees> {
    let z = ZScores {
        sites: vec![SiteZ {
            site_id: 3,
            n_calib: 6,
            z: [vec![-0.4, 0.1, 0.9], vec![0.2, 0.5, -0.8]],
        }],
    };
    build_site_trees(
        &z,
        2,
        &[PrivacyBudget::new(1.0, 1e-4).unwrap()],
        NoiseMode::Calibrated,
        &RngStream::new(5),
    )
    .unwrap()
}

#[test]
fn tree_csv_omits_clean_counts_by_default() {
    let trees = toy_trees();
    let mut buf = Vec::new();
    write_trees_csv(&trees, &mut buf, false).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("site,a,level,k,noisy_count"));
    assert!(!text.contains("clean_count"));
    // 2 groups x (2 + 4) nodes + header
    assert_eq!(text.lines().count(), 1 + 2 * 6);
}

#[test]
fn tree_csv_includes_clean_counts_when_asked() {
    let trees = toy_trees();
    let mut buf = Vec::new();
    write_trees_csv(&trees, &mut buf, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("site,a,level,k,clean_count,noisy_count"));
    // leaf counts of group 1: bins of {0.2, 0.5, -0.8} at depth 2
    assert!(text.contains("3,1,2,1,1,")); // -0.8 in leaf 1
    assert!(text.contains("3,1,2,3,1,")); // 0.2 in leaf 3
    assert!(text.contains("3,1,2,4,1,")); // 0.5 in the right-closed last leaf
}

#[test]
fn curve_csv_rows() {
    let trees = toy_trees();
    let mut curve = dd_grid(&trees, &[1.0]).unwrap();
    curve.dd_mono = Some(curve.dd.clone());
    let mut buf = Vec::new();
    curve.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("tau,dd,dd_mono"));
    assert_eq!(text.lines().count(), 1 + curve.grid.len());
}
