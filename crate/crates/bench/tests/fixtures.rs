use asd_bench::{clip, small_corpus, small_dims};

#[test]
fn fixtures_are_consistent() {
    let w = clip();
    assert_eq!(w.len(), 32_000);
    let m = small_corpus();
    assert_eq!(m.n_classes(), 4);
    assert!(small_dims(m.n_classes()).validate().is_ok());
}
