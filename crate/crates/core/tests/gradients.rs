mod support {
    pub mod gradcheck;
}

use support::gradcheck::{cases, check, model_cases, rel_error};
use certiqa::{Tape, Tensor};

#[test]
fn every_primitive_and_model_matches_finite_differences() {
    for (name, case) in cases().into_iter().chain(model_cases()) {
        for index in 0..3 {
            let c = check(case, index);
            assert!(c.rel_error <= 1e-4, "{name} instance {index}: relative error {:e}", c.rel_error);
        }
    }
}

#[test]
fn conv_hand_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(t.value(y).data(), &[45.0]);

    let zeros = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let w2 = t.constant(Tensor::new(vec![1, 1, 3, 3], (0..9).map(|i| i as f64 - 4.0).collect()).unwrap());
    let y = t.conv2d(zeros, w2, b, 1, 1).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let one = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = t.conv2d(x, one, b, 1, 0).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn l2_norm_hand_value() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
    let n = t.l2_norm(x).unwrap();
    assert_eq!(t.value(n).item(), 5.0);
    t.backward(n).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.6, 0.8]);
}

#[test]
fn oracle_detects_kink_crossings() {
    let f = |t: &mut Tape, v: &[certiqa::Var]| {
        let r = t.relu(v[0]).unwrap();
        t.sum(r).unwrap()
    };
    // On the kink itself no step size helps.
    let x = Tensor::new(vec![3], vec![0.0, 0.5, -0.3]).unwrap();
    assert_eq!(rel_error(&[x], &f), None);
    // Straddled at h but not at h/10: the retry recovers the slope.
    let x = Tensor::new(vec![3], vec![-2e-6, 0.5, -0.3]).unwrap();
    assert!(rel_error(&[x], &f).unwrap() < 1e-9);
    let x = Tensor::new(vec![3], vec![-1e-3, 0.5, -0.3]).unwrap();
    assert!(rel_error(&[x], &f).unwrap() < 1e-9);
}
