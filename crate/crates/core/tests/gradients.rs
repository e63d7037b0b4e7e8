use lpae::gradcheck::suite;

#[test]
fn every_layer_and_loss_matches_finite_differences() {
    let entries = suite(7).unwrap();
    assert_eq!(entries.len(), 19);
    let failures: Vec<String> = entries
        .iter()
        .filter(|e| !e.passes())
        .map(|e| format!("{}: {:.3e} at {:?}", e.name, e.report.max_rel_error, e.report.worst))
        .collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn suite_is_seed_independent_in_outcome() {
    for seed in [1, 2] {
        assert!(suite(seed).unwrap().iter().all(|e| e.passes()));
    }
}
