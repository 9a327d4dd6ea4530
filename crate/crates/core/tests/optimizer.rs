use approx::assert_abs_diff_eq;
use rantrack::training::{adam_update, AdamConfig, AdamState};

/// Parameters after each of three scripted steps, from a 40-digit
/// evaluation of bias-corrected Adam (lr 1e-3, betas 0.9/0.99, eps 1e-8).
const EXPECTED: [[f64; 3]; 3] = [
    [0.49900000009999999, -1.1990000000499999975, 2.9990000000333333322],
    [0.49873330070470818345, -1.1993656077517907392, 2.9983284199177824136],
    [0.49807688790556697877, -1.1998848528769549222, 2.9980382338121883376],
];

#[test]
fn scripted_adam_steps_match_reference() {
    let grads = [[0.1, -0.2, 0.3], [-0.05, 0.4, 0.0], [0.2, 0.2, -0.1]];
    let mut params = vec![0.5, -1.2, 3.0];
    let mut state = AdamState::new(3);
    for (g, expected) in grads.iter().zip(EXPECTED) {
        adam_update(&mut params, g, &mut state, &AdamConfig::default()).unwrap();
        for (p, e) in params.iter().zip(expected) {
            assert_abs_diff_eq!(*p, e, epsilon = 1e-14);
        }
    }
    assert_eq!(state.step_count, 3);
}

#[test]
fn first_step_moves_each_coordinate_by_lr() {
    let mut params = vec![0.0; 4];
    let mut state = AdamState::new(4);
    adam_update(&mut params, &[3.0, -0.01, 250.0, -7.0], &mut state, &AdamConfig::default()).unwrap();
    for (p, sign) in params.iter().zip([-1.0, 1.0, -1.0, 1.0]) {
        assert_abs_diff_eq!(*p, sign * 1e-3, epsilon = 1e-9);
    }
}
