mod support;

use tnt::field::FieldKind;

use support::gradcheck::check_gradients;

#[test]
fn quad_field_gradients_match_finite_differences() {
    let r = check_gradients(FieldKind::Quad, 200, 1);
    println!("checked {} parameters, worst relative error {:.2e}", r.checked, r.worst_rel);
    assert_eq!(r.checked, 200);
    assert_eq!(r.segments_covered.len(), 6, "{:?}", r.segments_covered);
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
}

#[test]
fn single_field_gradients_match_finite_differences() {
    let r = check_gradients(FieldKind::Single, 200, 2);
    println!("checked {} parameters, worst relative error {:.2e}", r.checked, r.worst_rel);
    assert_eq!(r.segments_covered.len(), 2);
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
}
