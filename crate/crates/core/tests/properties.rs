use std::f64::consts::PI;

use frad_core::fixtures::random_chain;
use frad_core::geometry::noise::{perturb, perturbation_scale};
use frad_core::geometry::{dihedral, rotate_torsion, wrap_angle};
use frad_core::metrics::{mae, pearson, rmse, spearman};
use frad_core::molgraph::io::{emit_xyz, parse_xyz};
use frad_core::net::{Hyper, ModelParams};
use frad_core::rng::stream_id;
use frad_core::train::{learning_rate, OptimConfig};
use frad_core::{FradRng, NoiseSpec};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn torsion_rotations_compose(seed in any::<u64>(), n in 4usize..10, a in -PI..PI, b in -PI..PI) {
        let (mol, x) = random_chain(n, &mut FradRng::new(seed, 0));
        for rb in mol.rotatable() {
            let two = rotate_torsion(&rotate_torsion(&x, rb, a).unwrap(), rb, b).unwrap();
            let one = rotate_torsion(&x, rb, a + b).unwrap();
            for (p, q) in two.as_slice().iter().zip(one.as_slice()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
            let back = rotate_torsion(&rotate_torsion(&x, rb, a).unwrap(), rb, -a).unwrap();
            for (p, q) in back.as_slice().iter().zip(x.as_slice()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_shifts_the_reference_torsion(seed in any::<u64>(), n in 4usize..10, a in -3.0..3.0f64) {
        let (mol, x) = random_chain(n, &mut FradRng::new(seed, 1));
        for rb in mol.rotatable() {
            let (ra, rd) = rb.reference;
            let (b, c) = rb.axis;
            let y = rotate_torsion(&x, rb, a).unwrap();
            let before = dihedral(&x.pos(ra), &x.pos(b), &x.pos(c), &x.pos(rd));
            let after = dihedral(&y.pos(ra), &y.pos(b), &y.pos(c), &y.pos(rd));
            prop_assert!(wrap_angle(after - before - a).abs() < 1e-9);
        }
    }

    #[test]
    fn wrap_angle_range_and_period(x in -100.0..100.0f64) {
        let w = wrap_angle(x);
        prop_assert!((-PI..PI).contains(&w));
        let k = ((x - w) / std::f64::consts::TAU).round();
        prop_assert!((x - w - k * std::f64::consts::TAU).abs() < 1e-9);
    }

    #[test]
    fn xyz_round_trip(seed in any::<u64>(), n in 3usize..12) {
        let (mol, x) = random_chain(n, &mut FradRng::new(seed, 2));
        let text = emit_xyz(mol.atoms(), &x, "chain");
        let (el, y) = parse_xyz(&text).unwrap();
        prop_assert_eq!(el.as_slice(), mol.atoms());
        for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
            prop_assert!((p - q).abs() <= 5e-10 + 1e-15 * p.abs());
        }
        prop_assert_eq!(emit_xyz(&el, &y, "chain"), text);
    }

    #[test]
    fn rn_noise_keeps_bond_lengths(seed in any::<u64>(), n in 4usize..10, sigma in 0.0..20.0f64) {
        let (mol, x) = random_chain(n, &mut FradRng::new(seed, 3));
        let rec = perturb(&mol, &x, &NoiseSpec::rn(sigma, 0.0), &mut FradRng::new(seed, 4)).unwrap();
        prop_assert_eq!(&rec.x_med, &rec.x_fin);
        for b in mol.bonds() {
            prop_assert!((x.distance(b.i, b.j) - rec.x_med.distance(b.i, b.j)).abs() < 1e-9);
        }
        prop_assert!(perturbation_scale(&x, &rec.x_fin).unwrap() >= 0.0);
    }

    #[test]
    fn metric_ranges_and_invariances(
        xs in prop::collection::vec(-10.0..10.0f64, 3..60),
        noise in prop::collection::vec(-1.0..1.0f64, 60),
        scale in 0.1..5.0f64,
        shift in -5.0..5.0f64,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x + e).collect();
        prop_assert!(rmse(&xs, &ys).unwrap() >= 0.0);
        prop_assert!(mae(&xs, &ys).unwrap() >= 0.0);
        if let (Ok(r), Ok(s)) = (pearson(&xs, &ys), spearman(&xs, &ys)) {
            prop_assert!((-1.0..=1.0).contains(&r) && (-1.0..=1.0).contains(&s));
            let affine: Vec<f64> = ys.iter().map(|y| scale * y + shift).collect();
            prop_assert!(close(pearson(&xs, &affine).unwrap(), r, 1e-12));
            let monotone: Vec<f64> = ys.iter().map(|y| (y / 4.0).exp()).collect();
            prop_assert!(close(spearman(&xs, &monotone).unwrap(), s, 1e-12));
        }
        prop_assert!(close(rmse(&xs, &xs).unwrap(), 0.0, 0.0));
    }

    #[test]
    fn schedule_stays_in_range(warmup in 0usize..50, total in 1usize..500, step in 0usize..600, floor in 0.0..1.0f64) {
        let o = OptimConfig { warmup, floor, ..OptimConfig::default() };
        let lr = learning_rate(&o, step, total);
        prop_assert!(lr >= 0.0 && lr <= o.lr * (1.0 + 1e-12));
        if step >= warmup {
            prop_assert!(lr >= o.lr * floor * (1.0 - 1e-12));
        }
        if step == 0 && warmup > 0 {
            prop_assert_eq!(lr, 0.0);
        }
    }

    #[test]
    fn stream_ids_are_distinct(e1 in 0u64..1 << 31, i1 in 0u64..1 << 32, e2 in 0u64..1 << 31, i2 in 0u64..1 << 32) {
        prop_assert_eq!(stream_id(e1, i1) == stream_id(e2, i2), (e1, i1) == (e2, i2));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), layers in 1usize..3, features in 2usize..10, rbf in 2usize..6) {
        let h = Hyper { layers, features, rbf, cutoff: 4.5 };
        let mut p = ModelParams::init(h, &mut FradRng::new(seed, 0)).unwrap();
        p.prop_shift = -1.25;
        p.prop_scale = 3.5;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ModelParams::read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(q.flat(), p.flat());
        prop_assert_eq!(q.hyper, p.hyper);
        prop_assert_eq!((q.prop_shift, q.prop_scale), (p.prop_shift, p.prop_scale));
        buf.push(0);
        prop_assert!(ModelParams::read_checkpoint(buf.as_slice()).is_err());
    }
}
