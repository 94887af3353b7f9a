use cdet::gca::{acc_statistic, logistic_loss};
use cdet::gp::{kernel_h, u_statistic, BinGrid, DiscretizedSample};
use cdet::mdn::head_transform;
use cdet::nn::Activation;
use proptest::prelude::*;

fn sample(cells: &[u128]) -> DiscretizedSample {
    DiscretizedSample { cells: cells.to_vec(), clamped: 0 }
}

/// Direct average of the kernel over ordered distinct pairs in each sample.
fn naive_u(a: &[u128], b: &[u128]) -> f64 {
    let m = a.len();
    let mut total = 0i64;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            for k in 0..m {
                for l in 0..m {
                    if k != l {
                        total += kernel_h(a[i], a[j], b[k], b[l]) as i64;
                    }
                }
            }
        }
    }
    let mm = (m * (m - 1)) as f64;
    total as f64 / (mm * mm)
}

fn paired_cells(max_len: usize) -> impl Strategy<Value = (Vec<u128>, Vec<u128>)> {
    (2..=max_len).prop_flat_map(|m| (prop::collection::vec(1u128..6, m), prop::collection::vec(1u128..6, m)))
}

proptest! {
    #[test]
    fn kernel_symmetries(u1 in 0u128..4, u2 in 0u128..4, v1 in 0u128..4, v2 in 0u128..4) {
        let h = kernel_h(u1, u2, v1, v2);
        prop_assert_eq!(h, kernel_h(u2, u1, v2, v1));
        prop_assert_eq!(h, kernel_h(v1, v2, u1, u2));
        prop_assert!((-2..=2).contains(&h));
    }

    #[test]
    fn count_form_matches_quadruple_sum((a, b) in paired_cells(7)) {
        let fast = u_statistic(&sample(&a), &sample(&b)).unwrap();
        prop_assert!((fast - naive_u(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn u_is_symmetric_in_samples_and_rows((a, b) in paired_cells(30), rot in 0usize..30) {
        let u = u_statistic(&sample(&a), &sample(&b)).unwrap();
        prop_assert_eq!(u, u_statistic(&sample(&b), &sample(&a)).unwrap());
        let mut a2 = a.clone();
        let r = rot % a2.len();
        a2.rotate_left(r);
        a2.reverse();
        prop_assert_eq!(u, u_statistic(&sample(&a2), &sample(&b)).unwrap());
    }

    #[test]
    fn u_invariant_under_cell_relabelling((a, b) in paired_cells(20), shift in 1u128..1000) {
        let u = u_statistic(&sample(&a), &sample(&b)).unwrap();
        let a2: Vec<u128> = a.iter().map(|c| c * 7 + shift).collect();
        let b2: Vec<u128> = b.iter().map(|c| c * 7 + shift).collect();
        prop_assert_eq!(u, u_statistic(&sample(&a2), &sample(&b2)).unwrap());
    }

    #[test]
    fn mixture_weights_on_simplex(raw in prop::collection::vec(-50.0f64..50.0, 3 * 4), floor in 1e-6f64..1e-1) {
        let mix = head_transform(&raw, 3, 2, floor);
        prop_assert!((mix.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(mix.alphas.iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert!(mix.sigmas.iter().all(|&s| s >= floor));
        prop_assert_eq!(&mix.means[..], &raw[3..9]);
    }

    #[test]
    fn leaky_relu_sandwich(z in -1e6f64..1e6, a in 0.0f64..0.99) {
        let act = Activation::LeakyRelu(a);
        let f = act.apply(z);
        prop_assert!(f >= z.min(a * z) && f <= z.max(a * z));
        prop_assert!(act.derivative(z) == 1.0 || act.derivative(z) == a);
        prop_assert!(Activation::Relu.apply(z) >= 0.0);
    }

    #[test]
    fn logistic_loss_positive_and_ordered(r in -60.0f64..60.0) {
        prop_assert!(logistic_loss(r, true) > 0.0 && logistic_loss(r, false) > 0.0);
        prop_assert!(logistic_loss(r, true) <= logistic_loss(r - 1.0, true));
        prop_assert!(logistic_loss(r, false) >= logistic_loss(r - 1.0, false));
    }

    #[test]
    fn accuracy_statistic_antisymmetric_and_monotone(e1 in 0.0f64..=1.0, e0 in 0.0f64..=1.0, n in 1usize..5000) {
        let s = acc_statistic(e1, e0, n);
        prop_assert!(s.is_finite());
        prop_assert!((s + acc_statistic(1.0 - e1, 1.0 - e0, n)).abs() < 1e-9);
        let step = 0.5 / n as f64;
        if e1 + step <= 1.0 - 0.5 / n as f64 && e1 >= 0.5 / n as f64 {
            prop_assert!(acc_statistic(e1 + step, e0, n) >= s);
        }
    }

    #[test]
    fn grid_assigns_every_point(z in prop::collection::vec(-0.5f64..1.5, 3), side in 0.05f64..=1.0) {
        let g = BinGrid::unit(3, side).unwrap();
        let (cell, clamped) = g.cell_of_unit(&z);
        let total = g.cell_count().unwrap();
        prop_assert!(cell >= 1 && cell <= total);
        prop_assert_eq!(clamped, z.iter().any(|v| !(0.0..=1.0).contains(v)));
    }
}
