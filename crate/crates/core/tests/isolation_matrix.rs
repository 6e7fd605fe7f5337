mod common;

#[test]
fn cross_tenant_operations_are_denied() {
    let cells = common::matrix::run().unwrap();
    assert_eq!(cells, 42);
}
