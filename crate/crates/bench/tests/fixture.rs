use mwr_bench::Fixture;

#[test]
fn fixture_is_consistent() {
    let fx = Fixture::new();
    assert_eq!(fx.locals.len(), fx.manifest.partition.groups.len());
    assert!(!fx.test.is_empty());
    assert_eq!(fx.neural_db.domain, fx.dataset.rank_domain);
    assert_eq!(fx.oracle_db.scale, fx.manifest.scale());
    let batch = fx.batch(18);
    assert_eq!(batch.len(), 18);
    assert!(fx.global.loss_and_gradients(&batch).unwrap().0.is_finite());
}
