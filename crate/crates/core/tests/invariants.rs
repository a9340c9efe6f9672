use deshadow::data::{crop_tensor, Coverage};
use deshadow::sphere::{
    exp_map, geodesic_distance, log_map, SpherePoint, SphericalConfig, TangentVector,
};
use deshadow::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    proptest::collection::vec(-2.0f64..2.0, n)
        .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn matrix_and_row() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 1usize..6).prop_flat_map(|(m, n)| (tensor(vec![m, n]), tensor(vec![n])))
}

proptest! {
    #[test]
    fn row_broadcast_matches_explicit_loops((a, b) in matrix_and_row()) {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone().with_grad());
        let bv = tape.leaf(b.clone().with_grad());
        let y = tape.mul(av, bv).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        for i in 0..m {
            for j in 0..n {
                prop_assert_eq!(tape.data(y)[i * n + j], a.data()[i * n + j] * b.data()[j]);
                prop_assert_eq!(tape.grad(av).unwrap()[i * n + j], b.data()[j]);
            }
        }
        for j in 0..n {
            let col: f64 = (0..m).map(|i| a.data()[i * n + j]).sum();
            prop_assert!((tape.grad(bv).unwrap()[j] - col).abs() < 1e-12);
        }
    }

    #[test]
    fn column_broadcast_matches_explicit_loops(a in tensor(vec![3, 4]), b in tensor(vec![3, 1])) {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone().with_grad());
        let y = tape.sub(av, bv).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                prop_assert_eq!(tape.data(y)[i * 4 + j], a.data()[i * 4 + j] - b.data()[i]);
            }
            prop_assert_eq!(tape.grad(bv).unwrap()[i], -4.0);
        }
    }

    #[test]
    fn matmul_transpose_identity(a in tensor(vec![3, 4]), b in tensor(vec![4, 2])) {
        // (AB)ᵀ = BᵀAᵀ
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let ab = tape.matmul(av, bv).unwrap();
        let lhs = tape.transpose(ab).unwrap();
        let (at, bt) = (tape.transpose(av).unwrap(), tape.transpose(bv).unwrap());
        let rhs = tape.matmul(bt, at).unwrap();
        for (x, y) in tape.data(lhs).iter().zip(tape.data(rhs)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn coverage_matches_direct_count(
        (h, w, bits) in (4usize..24, 4usize..24).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), proptest::collection::vec(any::<bool>(), h * w))
        }),
        seed in any::<u64>(),
    ) {
        let mask = Tensor::from_fn([1, h, w], |i| bits[i] as u8 as f64);
        let cov = Coverage::new(&mask);
        let size = 1 + (seed as usize) % h.min(w);
        let row = (seed as usize / 7) % (h - size + 1);
        let col = (seed as usize / 131) % (w - size + 1);
        let direct = crop_tensor(&mask, row, col, size).data().iter().sum::<f64>() / (size * size) as f64;
        prop_assert!((cov.window(row, col, size) - direct).abs() < 1e-12);
    }
}

fn sphere_case() -> impl Strategy<Value = (f64, Vec<f64>)> {
    (prop_oneof![Just(0.5), Just(1.0), Just(2.5)], 2usize..7)
        .prop_flat_map(|(r, n)| (Just(r), proptest::collection::vec(-1.0f64..1.0, n)))
        .prop_filter("not near the antipode", |(_, v)| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            norm > 1e-3 && v[v.len() - 1] / norm > -0.99
        })
}

proptest! {
    #[test]
    fn log_then_exp_returns_the_point((r, v) in sphere_case()) {
        let cfg = SphericalConfig::new(r, v.len()).unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let x = SpherePoint::new(v.iter().map(|c| r * c / norm).collect(), &cfg).unwrap();
        let m = log_map(&x, &cfg).unwrap();
        let back = exp_map(&m, &cfg).unwrap();
        for (a, b) in back.coords().iter().zip(x.coords()) {
            prop_assert!((a - b).abs() < 1e-9 * r);
        }
        let d = geodesic_distance(&cfg.north_pole(), &x, &cfg).unwrap();
        prop_assert!((m.norm() - d).abs() < 1e-9 * r);
    }

    #[test]
    fn geodesic_distance_is_a_metric((r, v) in sphere_case(), w in proptest::collection::vec(-1.0f64..1.0, 6)) {
        let n = v.len();
        let cfg = SphericalConfig::new(r, n).unwrap();
        let on = |u: &[f64]| {
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            SpherePoint::new(u.iter().map(|c| r * c / norm).collect(), &cfg).unwrap()
        };
        let x = on(&v);
        let y = on(&w[..n]);
        let pole = cfg.north_pole();
        let dxy = geodesic_distance(&x, &y, &cfg).unwrap();
        prop_assert!(dxy >= 0.0 && dxy <= std::f64::consts::PI * r + 1e-12);
        prop_assert!((dxy - geodesic_distance(&y, &x, &cfg).unwrap()).abs() < 1e-12);
        let via = geodesic_distance(&x, &pole, &cfg).unwrap() + geodesic_distance(&pole, &y, &cfg).unwrap();
        prop_assert!(dxy <= via + 1e-9);
    }

    #[test]
    fn exp_lands_on_the_sphere(r in prop_oneof![Just(0.5), Just(1.0), Just(2.5)], t in proptest::collection::vec(-3.0f64..3.0, 1..6)) {
        let cfg = SphericalConfig::new(r, t.len() + 1).unwrap();
        let x = exp_map(&TangentVector::new(t), &cfg).unwrap();
        let norm = x.coords().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - r).abs() < 1e-9 * r);
    }
}
