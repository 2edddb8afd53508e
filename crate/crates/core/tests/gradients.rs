//! Autodiff against central finite differences, every op and composite.

mod common;

use common::{worst_error, H};
use mugennet::gradcheck::{composite_cases, op_cases, rel_error, Kind};
use mugennet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases(7) {
        assert_eq!(case.kind, Kind::Op);
        let err = worst_error(&case, 7);
        if err >= 1e-4 {
            failures.push(format!("{}: {err:.3e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn every_composite_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in composite_cases(11).unwrap() {
        let err = worst_error(&case, 11);
        if err >= 1e-3 {
            failures.push(format!("{}: {err:.3e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn a_corrupted_gradient_is_detected() {
    let case = op_cases(3).into_iter().find(|c| c.name == "sigmoid").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = case.output(&case.inputs, &case.store).unwrap();
    let c = Tensor::uniform(out.dims(), -1.0, 1.0, &mut rng);
    let mut analytic = case.analytic(&c).unwrap().remove(0);
    analytic[0] *= 1.01;
    let numeric = common::fd_gradient(
        |x| {
            let t = Tensor::new(case.inputs[0].dims(), x.to_vec()).unwrap();
            let y = case.output(&[t], &case.store).unwrap();
            y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        },
        case.inputs[0].data(),
        H,
    );
    assert!(rel_error(&analytic, &numeric) > 1e-4);
}

#[test]
fn conv2d_matches_naive_loops() {
    use mugennet::autodiff::Pad2d;
    use mugennet::Graph;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (xd, wd, stride, pad) in [
        ([1, 2, 5, 5], [3, 2, 3, 3], 1, Pad2d::uniform(1)),
        ([2, 3, 7, 6], [4, 3, 3, 3], 2, Pad2d::same(3)),
        ([1, 2, 8, 8], [2, 2, 4, 4], 4, Pad2d::default()),
        ([1, 1, 6, 5], [2, 1, 1, 1], 1, Pad2d::default()),
        ([1, 2, 5, 6], [2, 2, 3, 3], 1, Pad2d { top: 0, bottom: 2, left: 1, right: 0 }),
    ] {
        let x = Tensor::<f64>::randn(&xd, 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&wd, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[wd[0]], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d_padded(xv, wv, Some(bv), stride, pad).unwrap();
        let (want, dims) =
            common::naive_conv2d(x.data(), xd, w.data(), wd, Some(b.data()), stride, (pad.top, pad.bottom, pad.left, pad.right));
        assert_eq!(g.dims(y), dims);
        let diff = g.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "{xd:?} {wd:?}: {diff}");
    }
}

#[test]
fn conv2d_f32_matches_naive_loops() {
    use mugennet::Graph;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let mut g = Graph::<f32>::new();
    let (xv, wv) = (g.input(x.cast()), g.input(w.cast()));
    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
    let (want, _) = common::naive_conv2d(x.data(), [1, 2, 5, 5], w.data(), [3, 2, 3, 3], None, 1, (1, 1, 1, 1));
    let got = g.value(y).to_f64_vec();
    let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff}");
}

