mod common;

use common::checks;

#[test]
fn weight_rows_sum_to_one() {
    let err = checks::attention_row_sum_error();
    assert!(err < 1e-12, "{err:e}");
}

#[test]
fn single_key_returns_its_value_row() {
    assert!(checks::single_key_error() < 1e-12);
}

#[test]
fn zero_query_averages_the_values() {
    assert!(checks::zero_query_error() < 1e-12);
}

#[test]
fn two_by_two_hand_example() {
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let s = std::f64::consts::SQRT_2;
    assert!((checks::HAND_WEIGHTS[0] - sigmoid(1.0 / s)).abs() < 1e-15);
    assert!((checks::HAND_WEIGHTS[3] - sigmoid(2.0 / s)).abs() < 1e-15);
    assert!(checks::hand_oracle_error() < 1e-12);
}
