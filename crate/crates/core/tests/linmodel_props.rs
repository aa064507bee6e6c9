use pgd_core::linmodel::{empirical_loss, loss_gradient, margin, rescale_to_unit_margin, Dataset, Loss};
use pgd_core::potential::WeightVector;
use pgd_core::Error;
use proptest::prelude::*;

const CASES: u32 = 10_000;

fn loss_kind() -> impl Strategy<Value = Loss> {
    prop_oneof![Just(Loss::Exponential), Just(Loss::Logistic)]
}

/// Up to 8 points in up to 6 dimensions plus a weight vector and a second one.
fn instance() -> impl Strategy<Value = (Dataset, Vec<f64>, Vec<f64>)> {
    (1usize..7, 1usize..9).prop_flat_map(|(d, n)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, d), n),
            prop::collection::vec(prop::bool::ANY, n),
            prop::collection::vec(-1.5..1.5f64, d),
            prop::collection::vec(-1.5..1.5f64, d),
        )
            .prop_map(move |(rows, signs, w, v)| {
                let labels = signs.iter().map(|s| if *s { 1.0 } else { -1.0 }).collect();
                (Dataset::new(d, rows, labels).unwrap(), w, v)
            })
    })
}

fn wv(x: &[f64]) -> WeightVector {
    WeightVector::new(x.to_vec()).unwrap()
}

/// The loss written out directly from its definition.
fn naive_loss(loss: Loss, data: &Dataset, w: &[f64]) -> f64 {
    let total: f64 = (0..data.len())
        .map(|i| {
            let (x, y) = data.point(i);
            let z = y * x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            match loss {
                Loss::Exponential => (-z).exp(),
                Loss::Logistic => (1.0 + (-z).exp()).ln(),
            }
        })
        .sum();
    total / data.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn loss_matches_definition(loss in loss_kind(), (data, w, _) in instance()) {
        let got = empirical_loss(loss, &data, &wv(&w)).unwrap();
        let want = naive_loss(loss, &data, &w);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert!(got > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences(loss in loss_kind(), (data, w, _) in instance()) {
        let g = loss_gradient(loss, &data, &wv(&w)).unwrap();
        let h = 1e-6;
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for j in 0..w.len() {
            let mut up = w.clone();
            let mut down = w.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (naive_loss(loss, &data, &up) - naive_loss(loss, &data, &down)) / (2.0 * h);
            err = err.max((fd - g.as_slice()[j]).abs());
            scale = scale.max(g.as_slice()[j].abs());
        }
        // Central differences carry about eps * L / h of rounding.
        let floor = 1e-9 * naive_loss(loss, &data, &w);
        prop_assert!(err <= 1e-5 * scale + floor, "fd error {err}, |g| {scale}");
    }

    #[test]
    fn loss_is_convex(loss in loss_kind(), (data, w, v) in instance(), lam in 0.0..=1.0f64) {
        let mix: Vec<f64> = w.iter().zip(&v).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let l = |x: &[f64]| empirical_loss(loss, &data, &wv(x)).unwrap();
        let lhs = l(&mix);
        let rhs = lam * l(&w) + (1.0 - lam) * l(&v);
        prop_assert!(lhs <= rhs + 1e-12 * (1.0 + rhs), "{lhs} > {rhs}");
    }

    #[test]
    fn per_sample_loss_is_monotone(loss in loss_kind(), a in -50.0..50.0f64, b in -50.0..50.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(loss.value(lo) >= loss.value(hi));
        prop_assert!(loss.derivative(lo) <= 0.0);
    }

    #[test]
    fn exponential_tail(loss in loss_kind(), z in 5.0..600.0f64) {
        let r = loss.value(z) * z.exp();
        prop_assert!((0.5..=2.0).contains(&r), "l({z}) e^z = {r}");
    }

    #[test]
    fn rescaling_gives_unit_margin((data, w, _) in instance()) {
        let m = margin(&data, &wv(&w)).unwrap();
        match rescale_to_unit_margin(&data, &wv(&w)) {
            Ok(r) => {
                prop_assert!(m > 0.0);
                prop_assert!((margin(&data, &r).unwrap() - 1.0).abs() <= 1e-12);
            }
            Err(Error::NotSeparating { .. }) => prop_assert!(m <= 0.0),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn fixed_values() {
    let one = Dataset::new(2, vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
    let w = wv(&[2f64.ln(), 5.0]);
    assert!((empirical_loss(Loss::Exponential, &one, &w).unwrap() - 0.5).abs() < 1e-15);
    let zero = wv(&[0.0, 0.0]);
    assert_eq!(empirical_loss(Loss::Exponential, &one, &zero).unwrap(), 1.0);
    assert!((empirical_loss(Loss::Logistic, &one, &zero).unwrap() - 2f64.ln()).abs() < 1e-15);

    let line = Dataset::new(1, vec![vec![1.0]], vec![1.0]).unwrap();
    assert_eq!(loss_gradient(Loss::Exponential, &line, &wv(&[0.0])).unwrap().as_slice(), &[-1.0]);

    let pair = Dataset::new(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0]).unwrap();
    assert_eq!(margin(&pair, &wv(&[1.0, 1.0])).unwrap(), 1.0);
    assert_eq!(margin(&pair, &wv(&[1.0, -1.0])).unwrap(), -1.0);
    assert_eq!(margin(&pair, &zero).unwrap(), 0.0);
    let r = rescale_to_unit_margin(&pair, &wv(&[2.0, 3.0])).unwrap();
    assert_eq!(r.as_slice(), &[1.0, 1.5]);

    // Far along a separating direction the gradient vanishes.
    let far = wv(&[40.0, 40.0]);
    let g = loss_gradient(Loss::Exponential, &pair, &far).unwrap();
    assert!(g.as_slice().iter().all(|v| v.abs() < 1e-6));
}
