mod common;

#[test]
fn joint_loss_gradients_match_central_differences() {
    let r = common::joint_loss_grad_check(20, 6);
    println!("max relative error {:e}, unit-norm error {:e}", r.max_rel_error, r.max_norm_error);
    assert_eq!(r.checked, 120);
    assert!(r.max_rel_error < 1e-4, "max relative error {:e}", r.max_rel_error);
    assert!(r.max_norm_error < 1e-5, "unit-norm error {:e}", r.max_norm_error);
}
