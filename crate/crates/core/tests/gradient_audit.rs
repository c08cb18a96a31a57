//! Analytic gradients against central finite differences in 64-bit.

mod common;

use common::{audit, audit_cases};

const TOLERANCE: f64 = 1e-4;

fn check(name: &str) {
    let cases = audit_cases();
    let (i, case) = cases.iter().enumerate().find(|(_, c)| c.name == name).expect("known case");
    let err = audit(case, 1000 + i as u64);
    assert!(err < TOLERANCE, "{name}: relative error {err:.3e}");
}

macro_rules! audited {
    ($($test:ident),* $(,)?) => {
        $(
            #[test]
            fn $test() {
                check(stringify!($test));
            }
        )*

        #[test]
        fn every_case_has_a_test() {
            let names: Vec<&str> = vec![$(stringify!($test)),*];
            for case in audit_cases() {
                assert!(names.contains(&case.name), "{} is not audited", case.name);
            }
        }
    };
}

audited!(
    matmul,
    matmul_bt,
    add,
    sub,
    mul,
    scale,
    add_row,
    mul_row,
    axis_mask,
    axis_mask_one_axis,
    relu,
    tanh,
    sigmoid,
    clamp,
    softmax_rows,
    layer_norm,
    layer_norm_weighted,
    sum,
    mse,
    gather_rows,
    unfold,
    reshape,
    select,
    scale_by_elem,
    gate_sample,
    gate_sample_stretched,
    mean_gate,
    expected_nonzero,
    mask_l1,
    two_layer_net,
    model_sampled_gates,
    model_mean_gates,
);
