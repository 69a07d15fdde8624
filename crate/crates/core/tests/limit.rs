// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use zoomcp::cpp_limit::{
    scale_argmin, simulate_argmins, ArgminPair, CppParams, CppPath, HorizonRule,
};
use zoomcp::model::ErrorDist;
use zoomcp::rng::StreamSeed;
use zoomcp::stats::{
    ks_one_sample, ks_one_sample_pvalue, ks_two_sample, ks_two_sample_pvalue, mean,
};

fn column(pairs: &[ArgminPair], f: impl Fn(&ArgminPair) -> f64) -> Vec<f64> {
    pairs.iter().map(f).collect()
}

#[test]
fn noiseless_argmins_are_exponential() {
    let p = CppParams::canonical(f64::INFINITY, ErrorDist::Normal).unwrap();
    let pairs = simulate_argmins(&p, 20_000, StreamSeed::new(5)).unwrap();
    let exp_cdf = |x: f64| if x <= 0.0 { 0.0 } else { 1.0 - (-x).exp() };
    let du = column(&pairs, |a| a.d_u);
    let dl = column(&pairs, |a| -a.d_l);
    for v in [&du, &dl] {
        let d = ks_one_sample(v, exp_cdf);
        assert!(ks_one_sample_pvalue(d, v.len()) > 0.01, "KS {d}");
    }
    let width = mean(&column(&pairs, |a| a.d_u - a.d_l));
    assert!((width - 2.0).abs() < 0.04 * 2.0, "mean width {width}");
}

#[test]
fn direct_and_rescaled_simulation_agree() {
    for (i, &(a, rho, lambda)) in [(1.0, 1.0, 1.0), (5.0, 1.0, 2.0), (2.0, 0.5, 0.5)]
        .iter()
        .enumerate()
    {
        let direct = CppParams::new(a, lambda, rho, ErrorDist::Normal).unwrap();
        let canon = CppParams::canonical(a / rho, ErrorDist::Normal).unwrap();
        let x = simulate_argmins(&direct, 20_000, StreamSeed::new(100 + i as u64)).unwrap();
        let y: Vec<ArgminPair> = simulate_argmins(&canon, 20_000, StreamSeed::new(200 + i as u64))
            .unwrap()
            .into_iter()
            .map(|p| scale_argmin(p, lambda).unwrap())
            .collect();
        for stat in [|p: &ArgminPair| p.d_l, |p: &ArgminPair| p.d_av()] {
            let (u, v) = (column(&x, stat), column(&y, stat));
            let d = ks_two_sample(&u, &v);
            assert!(
                ks_two_sample_pvalue(d, u.len(), v.len()) > 0.01,
                "params {a} {rho} {lambda}: KS {d}"
            );
        }
    }
}

#[test]
fn average_argmin_is_symmetric() {
    let p = CppParams::canonical(3.0, ErrorDist::Laplace).unwrap();
    let pairs = simulate_argmins(&p, 40_000, StreamSeed::new(9)).unwrap();
    let (a, b) = pairs.split_at(20_000);
    let pos = column(a, |p| p.d_av());
    let neg = column(b, |p| -p.d_av());
    let d = ks_two_sample(&pos, &neg);
    assert!(
        ks_two_sample_pvalue(d, pos.len(), neg.len()) > 0.01,
        "KS {d}"
    );
}

#[test]
fn longer_horizon_changes_no_argmin() {
    let p = CppParams::canonical(5.0, ErrorDist::Normal).unwrap();
    let long = HorizonRule::default().scaled(10);
    let seed = StreamSeed::new(77);
    let mismatches: usize = (0..10_000u64)
        .into_par_iter()
        .map(|r| {
            let short = CppPath::simulate_sides(
                &p,
                &HorizonRule::default(),
                &mut seed.stream(r, 0),
                &mut seed.stream(r, 1),
            )
            .unwrap()
            .argmin();
            let far =
                CppPath::simulate_sides(&p, &long, &mut seed.stream(r, 0), &mut seed.stream(r, 1))
                    .unwrap()
                    .argmin();
            (short != far) as usize
        })
        .sum();
    assert_eq!(mismatches, 0);
}

#[test]
fn minimum_is_attained_at_both_argmins() {
    let seed = StreamSeed::new(3);
    for snr in [0.5, 2.0, 8.0] {
        let p = CppParams::canonical(snr, ErrorDist::Normal).unwrap();
        let mut rng = seed.stream(snr.to_bits(), 0);
        for _ in 0..2000 {
            let path = CppPath::simulate(&p, &HorizonRule::default(), &mut rng).unwrap();
            let m = path.min_value();
            let am = path.argmin();
            assert!(am.d_l <= am.d_u);
            assert_eq!(path.value_at(am.d_l), m);
            assert_eq!(path.left_limit_at(am.d_u), m);
        }
    }
}
