//! Analytic gradients against a central finite-difference oracle.

use icct_autodiff::gradcheck::{primitives, relative_error as fd_rel_err, uniform, worst_error};
use icct_autodiff::{Graph, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_matches_finite_differences() {
    for case in primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(case.name.bytes().map(u64::from).sum());
        let worst = worst_error(&case, 100, &mut rng);
        assert!(worst <= 1e-4, "{}: worst relative error {worst:e}", case.name);
    }
}

#[test]
fn catalogue_covers_each_primitive_once() {
    let names: Vec<&str> = primitives().iter().map(|c| c.name).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    assert!(names.len() >= 25);
}

#[test]
fn matvec_gradient_on_5x5_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..20 {
        let inputs = vec![
            uniform(&mut rng, &[5, 5], -1.0, 1.0),
            uniform(&mut rng, &[5], -1.0, 1.0),
        ];
        let err = fd_rel_err(&inputs, &|g, x| g.matvec(x[0], x[1]).unwrap(), &mut rng);
        assert!(err <= 1e-6, "matvec relative error {err:e}");
    }
}

#[test]
fn sum_sigmoid_of_matvec_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = |g: &mut Graph, x: &[Var]| {
        let wx = g.matvec(x[0], x[1]).unwrap();
        let s = g.sigmoid(wx);
        g.sum(s)
    };
    for _ in 0..20 {
        let inputs = vec![
            uniform(&mut rng, &[4, 3], -1.0, 1.0),
            uniform(&mut rng, &[3], -1.0, 1.0),
        ];
        assert!(fd_rel_err(&inputs, &f, &mut rng) <= 1e-4);
    }
}

#[test]
fn chained_expression_accumulates_across_reuse() {
    // loss = sum(tanh(x) * x) + dot(x, x)
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = |g: &mut Graph, x: &[Var]| {
        let t = g.tanh(x[0]);
        let p = g.mul(t, x[0]).unwrap();
        let s = g.sum(p);
        let d = g.dot(x[0], x[0]).unwrap();
        g.add(s, d).unwrap()
    };
    for _ in 0..20 {
        let inputs = vec![uniform(&mut rng, &[6], -2.0, 2.0)];
        assert!(fd_rel_err(&inputs, &f, &mut rng) <= 1e-6);
    }
}
