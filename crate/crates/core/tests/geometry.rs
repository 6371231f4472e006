use std::f64::consts::{E, PI};

use normclash_core::geometry::{
    asymptotic_bound, asymptotic_rate, chernoff_bound, cramer_rate, dimension_table, equal_volume_radius, exact_ratio_2d,
    hoeffding_bound, hoeffding_crossover, log_volume, mc_intersection_ratio, sample_uniform_l2, sample_uniform_linf,
    stirling_radius, write_dimension_table_csv, BallSpec, Norm, TableBudget,
};
use normclash_core::rng;
use normclash_core::special::ln_gamma;
use proptest::prelude::*;

/// ln Γ(n/2) from the recurrences Γ(k+1) = kΓ(k) and Γ(1/2) = √π.
fn ln_gamma_half_oracle(n: usize) -> f64 {
    assert!(n >= 1);
    let (mut x, mut acc) = if n % 2 == 0 { (1.0, 0.0) } else { (0.5, 0.5 * PI.ln()) };
    while x < n as f64 / 2.0 - 1e-12 {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Lower-tail rate of x², x ~ U[-1,1], by quadrature for the moment function
/// and golden-section search over λ.
fn cramer_oracle(a: f64) -> (f64, f64) {
    let obj = |l: f64| l * a - simpson(|t| (l * t * t).exp(), 0.0, 1.0, 4000).ln();
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-60.0, 0.0);
    for _ in 0..200 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if obj(m1) > obj(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let l = 0.5 * (lo + hi);
    (obj(l), l)
}

#[test]
fn ln_gamma_matches_factorial_recurrence() {
    for n in 1..400 {
        let got = ln_gamma(n as f64 / 2.0);
        let want = ln_gamma_half_oracle(n);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "n/2 = {}: {got} vs {want}", n as f64 / 2.0);
    }
    for n in [1568usize, 6144, 301_056, 301_058] {
        let want = ln_gamma_half_oracle(n);
        assert!((ln_gamma(n as f64 / 2.0) - want).abs() <= 1e-12 * want.abs());
    }
}

#[test]
fn equal_volume_radius_values() {
    assert_eq!(equal_volume_radius(1), 1.0);
    assert!((equal_volume_radius(2) - 1.1283791671).abs() < 1e-9);
    assert!((equal_volume_radius(2) - 2.0 / PI.sqrt()).abs() < 1e-14);
    assert!((equal_volume_radius(3072) - 26.8628).abs() < 5e-4);
}

#[test]
fn volume_identity_holds() {
    let dims = (1..=200).chain([784, 3072, 150528]);
    for d in dims {
        let l2 = log_volume(Norm::L2, equal_volume_radius(d), d);
        let linf = log_volume(Norm::Linf, 1.0, d);
        assert!((l2 - linf).abs() <= 1e-9 * linf.abs().max(1.0), "d = {d}: {l2} vs {linf}");
        // independent route: ln Vol(B₂(r)) = (d/2) ln π + d ln r − ln Γ(d/2 + 1)
        let oracle = d as f64 / 2.0 * PI.ln() + d as f64 * equal_volume_radius(d).ln() - ln_gamma_half_oracle(d + 2);
        assert!((oracle - d as f64 * 2f64.ln()).abs() <= 1e-9 * oracle.abs().max(1.0), "d = {d}");
    }
}

#[test]
fn ball_volume_scales_with_radius() {
    let b = BallSpec::centered(Norm::L2, 2.0, 5).unwrap();
    let v1 = log_volume(Norm::L2, 1.0, 5);
    assert!((normclash_core::geometry::ball_log_volume(&b) - (v1 + 5.0 * 2f64.ln())).abs() < 1e-12);
}

#[test]
fn stirling_radius_tracks_exact() {
    let c = (2.0 / (PI * E)).sqrt();
    for d in [784usize, 3072, 150528] {
        let rel = (stirling_radius(d) - equal_volume_radius(d)).abs() / equal_volume_radius(d);
        assert!(rel < 5e-3, "d = {d}: rel {rel}");
        assert!((equal_volume_radius(d) / (d as f64).sqrt() - c).abs() < 0.01);
    }
}

#[test]
fn calibrated_l2_budgets() {
    let r = equal_volume_radius(3072);
    assert!((0.82..=0.84).contains(&(0.031 * r)));
    assert!((0.79..=0.81).contains(&(0.03 * r)));
}

#[test]
fn asymptotic_values() {
    let c = 2.0 / (PI * E) - 1.0 / 3.0;
    assert!((asymptotic_rate() - c * c).abs() < 1e-15);
    assert!((asymptotic_rate() - 0.009827).abs() < 1e-6);
    assert!((asymptotic_bound(2.0).value() - 0.98054).abs() < 1e-3);
}

#[test]
fn hoeffding_applicability() {
    let first = hoeffding_crossover();
    assert_eq!(first, 10);
    for d in 1..first {
        assert!(!hoeffding_bound(d).applicable, "d = {d}");
    }
    for d in first..300 {
        assert!(hoeffding_bound(d).applicable, "d = {d}");
    }
    // d = 2: exp(-(4/π - 2/3)²/2)
    let dev = 4.0 / PI - 2.0 / 3.0;
    assert!((hoeffding_bound(2).value() - (-dev * dev / 2.0).exp()).abs() < 1e-12);
    assert!((hoeffding_bound(2).value() - 0.8320).abs() < 1e-4);
}

#[test]
fn cramer_rate_matches_quadrature_oracle() {
    let a784 = equal_volume_radius(784).powi(2) / 784.0;
    for a in [a784, 2.0 / (PI * E), 0.1, 0.3] {
        let (rate, lambda) = cramer_rate(a).unwrap();
        let (want, wl) = cramer_oracle(a);
        assert!((rate - want).abs() < 1e-7, "a = {a}: {rate} vs {want}");
        assert!((lambda - wl).abs() < 1e-3, "a = {a}: λ {lambda} vs {wl}");
    }
    let (r, l) = cramer_rate(a784).unwrap();
    assert!((r - 0.05754).abs() < 5e-5 && (l + 1.2547).abs() < 1e-3);
    let (r, l) = cramer_rate(2.0 / (PI * E)).unwrap();
    assert!((r - 0.06052).abs() < 5e-5 && (l + 1.2910).abs() < 1e-3);
    assert_eq!(cramer_rate(0.5).unwrap().0, 0.0);
    assert!(cramer_rate(0.0).is_err());
}

#[test]
fn chernoff_beats_hoeffding() {
    for d in [10usize, 12, 50, 100, 784, 3072, 150528] {
        let c = chernoff_bound(d).unwrap();
        assert!(c.ln_value < hoeffding_bound(d).ln_value, "d = {d}");
    }
    assert!(chernoff_bound(2).is_err());
}

#[test]
fn sampler_moments() {
    let mut r = rng::from_seed(11);
    let n = 200_000;
    let d = 3;
    let mut m2 = 0.0;
    let mut inside = true;
    for _ in 0..n {
        let x = sample_uniform_l2(d, 2.0, &mut r);
        let s: f64 = x.iter().map(|v| v * v).sum();
        inside &= s <= 4.0 + 1e-12;
        m2 += s;
    }
    // E‖x‖² = r² d/(d+2) for the uniform ball
    assert!(inside);
    assert!((m2 / n as f64 - 4.0 * 0.6).abs() < 0.02);
    let mut sq = 0.0;
    let mut max = 0f64;
    for _ in 0..n {
        let x = sample_uniform_linf(4, 0.5, &mut r);
        max = max.max(x.iter().fold(0.0, |a: f64, v| a.max(v.abs())));
        sq += x.iter().map(|v| v * v).sum::<f64>();
    }
    assert!(max <= 0.5);
    assert!((sq / (4 * n) as f64 - 0.25 / 3.0).abs() < 1e-3);
}

#[test]
fn exact_ratio_2d_matches_quadrature() {
    for r in [0.3, 1.0, 1.05, 2.0 / PI.sqrt(), 1.3, 1.414, 2.0] {
        let q = simpson(|x| (r * r - x * x).max(0.0).sqrt().min(1.0), 0.0, 1.0, 200_000);
        assert!((exact_ratio_2d(r) - q).abs() < 1e-6, "r = {r}");
    }
    assert!((exact_ratio_2d(2.0 / PI.sqrt()) - 0.909454).abs() < 1e-6);
}

#[test]
fn monte_carlo_small_dims() {
    let e = mc_intersection_ratio(1, 0.5, 1.0, 100_000, 3).unwrap();
    assert!((e.value - 0.5).abs() < 3.0 * e.stderr + 1e-12);
    let exact = exact_ratio_2d(2.0 / PI.sqrt());
    let e = mc_intersection_ratio(2, equal_volume_radius(2), 1.0, 200_000, 5).unwrap();
    assert!((e.value - exact).abs() < 3.0 * e.stderr);
    assert!(mc_intersection_ratio(2, 1.0, 1.0, 10, 0).is_err());
}

#[test]
fn monte_carlo_is_deterministic() {
    let a = mc_intersection_ratio(5, equal_volume_radius(5), 1.0, 100_000, 9).unwrap();
    let b = mc_intersection_ratio(5, equal_volume_radius(5), 1.0, 100_000, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn table_is_monotone_and_bounds_hold() {
    let dims = [2, 5, 10, 12, 20, 50];
    let rows = dimension_table(&dims, TableBudget { mc_samples: 200_000, mc_max_dim: 100, seed: 1 }).unwrap();
    let mut prev = f64::INFINITY;
    for row in &rows {
        let mc = row.mc.as_ref().unwrap();
        assert!(mc.value < prev);
        prev = mc.value;
        if row.d >= 12 {
            assert!(mc.value <= row.hoeffding.value() + 3.0 * mc.stderr);
            assert!(mc.value <= row.chernoff.unwrap().value() + 3.0 * mc.stderr);
        }
    }
    let mut buf = Vec::new();
    write_dimension_table_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), dims.len() + 1);
    assert!(text.starts_with("d,r2,log10_hoeffding"));
}

proptest! {
    #[test]
    fn containment_agrees_with_norm(v in prop::collection::vec(-2.0f64..2.0, 1..20), r in 0.1f64..3.0) {
        for norm in [Norm::L2, Norm::Linf] {
            let b = BallSpec::centered(norm, r, v.len()).unwrap();
            prop_assert_eq!(b.contains(&v), norm.of(&v) <= r);
        }
    }

    #[test]
    fn radius_grows_like_sqrt_d(d in 1usize..5000) {
        let r = equal_volume_radius(d);
        prop_assert!(r >= 1.0 && r <= (d as f64).sqrt() + 1e-12);
    }
}
