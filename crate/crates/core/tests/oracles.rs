//! Sanity checks of the brute-force references themselves.

mod common;

#[test]
fn fd_of_sum_is_ones() {
    let g = common::fd_gradient(|x| x.iter().sum(), &[1.0, -2.0, 3.0], 1e-4);
    assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-9));
}

#[test]
fn fd_of_square_at_three() {
    let g = common::fd_gradient(|x| x[0] * x[0], &[3.0], 1e-4);
    assert!((g[0] - 6.0).abs() < 1e-6);
}

#[test]
fn naive_conv_identity_kernel() {
    let x: Vec<f64> = (0..9).map(f64::from).collect();
    let (y, d) = common::naive_conv2d(&x, [1, 1, 3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.], [1, 1, 3, 3], None, 1, (1, 1, 1, 1));
    assert_eq!(d, [1, 1, 3, 3]);
    assert_eq!(y, x);
}

#[test]
fn loop_metrics_worked_pair() {
    // A = {(0,0),(0,1)}, B = {(0,1),(0,2)} on a 1×3 strip.
    let r = common::loop_metrics(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0], 1, 3);
    assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.dice - 0.5).abs() < 1e-15);
}
