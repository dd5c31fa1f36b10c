use std::time::Instant;

use hdrev_core::harness::gradsuite::{case_names, run_suite};

#[test]
fn every_case_passes_on_a_few_points() {
    let start = Instant::now();
    let results = run_suite(10, 3, None).unwrap();
    assert_eq!(results.len(), case_names().len());
    for r in &results {
        println!(
            "{:<20} err {:.2e} checked {} kinks {}",
            r.name, r.max_rel_err, r.checked, r.kinks
        );
    }
    println!("{:?}", start.elapsed());
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
