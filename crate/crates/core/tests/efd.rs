use ggpm::efd::*;
use ggpm::numerics::special::{ln_factorial, ln_gamma, norm_cdf};
use ggpm::numerics::{discrete_expect, integrate_adaptive, CountCap};
use ggpm::GgpmError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Case {
    id: &'static str,
    phi: f64,
    ys: &'static [f64],
    etas: &'static [f64],
}

fn cases() -> Vec<Case> {
    vec![
        Case { id: "gaussian", phi: 0.7, ys: &[-1.3, 0.4, 2.0], etas: &[-1.0, 0.3, 1.5] },
        Case { id: "gamma_shape", phi: 0.6, ys: &[0.3, 1.2, 4.0], etas: &[-1.0, 0.2, 1.3] },
        Case { id: "gamma_scale", phi: 0.8, ys: &[0.3, 1.2, 4.0], etas: &[-0.5, 0.3, 1.2] },
        Case { id: "inv_gaussian", phi: 0.5, ys: &[0.4, 1.0, 2.5], etas: &[-0.5, 0.5, 1.5] },
        Case { id: "poisson", phi: 1.0, ys: &[0.0, 2.0, 7.0], etas: &[-1.0, 0.5, 2.0] },
        Case { id: "poisson_linear", phi: 1.0, ys: &[0.0, 2.0, 7.0], etas: &[-1.0, 0.5, 2.0] },
        Case { id: "com_poisson", phi: 1.4, ys: &[0.0, 2.0, 7.0], etas: &[-1.0, 0.5, 1.8] },
        Case { id: "com_poisson_linear", phi: 0.6, ys: &[0.0, 2.0, 7.0], etas: &[-1.0, 0.5, 1.8] },
        Case { id: "neg_binomial", phi: 0.5, ys: &[0.0, 2.0, 7.0], etas: &[-1.0, 0.5, 2.0] },
        Case { id: "binomial", phi: 0.2, ys: &[0.0, 0.4, 1.0], etas: &[-1.0, 0.3, 1.5] },
        Case { id: "bernoulli_logit", phi: 1.0, ys: &[0.0, 1.0], etas: &[-1.0, 0.3, 1.5] },
        Case { id: "bernoulli_probit", phi: 1.0, ys: &[0.0, 1.0], etas: &[-2.0, 0.3, 1.5] },
        Case { id: "beta", phi: 0.3, ys: &[0.1, 0.5, 0.85], etas: &[-1.0, 0.2, 1.2] },
    ]
}

fn lik(c: &Case) -> LikelihoodFamily {
    LikelihoodFamily::from_id(c.id, c.phi, 5).unwrap()
}

/// Density/pmf written directly in each distribution's usual parameters.
fn direct_log_density(l: &LikelihoodFamily, y: f64, eta: f64) -> f64 {
    let phi = l.dispersion();
    let theta = l.link.theta(eta).theta;
    match l.dist {
        Distribution::Gaussian => -0.5 * (2.0 * std::f64::consts::PI * phi).ln() - (y - theta).powi(2) / (2.0 * phi),
        Distribution::GammaShape => {
            let (k, mean) = (1.0 / phi, -1.0 / theta);
            let scale = mean / k;
            (k - 1.0) * y.ln() - y / scale - ln_gamma(k) - k * scale.ln()
        }
        Distribution::GammaScale => {
            let k = theta / phi;
            (k - 1.0) * y.ln() - y / phi - ln_gamma(k) - k * phi.ln()
        }
        Distribution::InverseGaussian => {
            let (mu, lam) = (1.0 / (-2.0 * theta).sqrt(), 1.0 / phi);
            0.5 * (lam / (2.0 * std::f64::consts::PI * y.powi(3))).ln() - lam * (y - mu).powi(2) / (2.0 * mu * mu * y)
        }
        Distribution::NegativeBinomial => {
            let (r, p) = (1.0 / phi, (theta / phi).exp());
            ln_gamma(y + r) - ln_gamma(r) - ln_factorial(y) + y * p.ln() + r * (1.0 - p).ln()
        }
        Distribution::Poisson => y * theta - theta.exp() - ln_factorial(y),
        Distribution::ComPoisson => {
            let nu = phi;
            let ls = com_poisson_log_partition(theta.exp(), nu).unwrap();
            nu * (y * theta - ln_factorial(y)) - ls
        }
        Distribution::Binomial { trials } => {
            let n = trials as f64;
            let k = (y * n).round();
            let p = 1.0 / (1.0 + (-theta).exp());
            ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k) + k * p.ln() + (n - k) * (1.0 - p).ln()
        }
        Distribution::Beta => {
            let (a, b) = (theta / phi, (1.0 - theta) / phi);
            ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * y.ln() + (b - 1.0) * (1.0 - y).ln()
        }
    }
}

#[test]
fn log_likelihood_examples() {
    let g = LikelihoodFamily::from_id("gaussian", 1.0, 1).unwrap();
    assert!((g.log_likelihood(0.0, 0.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
    let p = LikelihoodFamily::from_id("poisson", 1.0, 1).unwrap();
    assert!((p.log_likelihood(0.0, 0.0).unwrap() + 1.0).abs() < 1e-14);
    let want = 2.0 * 3f64.ln() - 3.0 - 2f64.ln();
    assert!((p.log_likelihood(2.0, 3f64.ln()).unwrap() - want).abs() < 1e-12);
    // direct pmf: 3^2 e^-3 / 2!
    assert!((want - (4.5 * (-3f64).exp()).ln()).abs() < 1e-14);
    assert!((want + 1.495922).abs() < 1e-6);
}

#[test]
fn log_likelihood_matches_direct_densities() {
    for c in cases() {
        let l = lik(&c);
        for &y in c.ys {
            for &eta in c.etas {
                let a = l.log_likelihood(y, eta).unwrap();
                let b = direct_log_density(&l, y, eta);
                assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "{} y={y} eta={eta}: {a} vs {b}", c.id);
            }
        }
    }
}

#[test]
fn domain_errors() {
    let p = LikelihoodFamily::from_id("poisson", 1.0, 1).unwrap();
    assert!(matches!(p.log_likelihood(-1.0, 0.0), Err(GgpmError::Domain { .. })));
    assert!(matches!(p.log_likelihood(1.5, 0.0), Err(GgpmError::Domain { .. })));
    assert!(matches!(p.log_likelihood(1.0, 800.0), Err(GgpmError::Overflow(_))));
    let b = LikelihoodFamily::from_id("beta", 0.3, 1).unwrap();
    assert!(b.log_likelihood(0.0, 0.0).is_err());
    assert!(b.log_likelihood(1.0, 0.0).is_err());
    let bin = LikelihoodFamily::from_id("binomial", 1.0, 4).unwrap();
    assert!(bin.log_likelihood(0.3, 0.0).is_err());
    assert!(bin.log_likelihood(0.75, 0.0).is_ok());
    assert!(LikelihoodFamily::from_id("student_t", 1.0, 1).is_err());
    assert!(LikelihoodFamily::new(Distribution::GammaShape, Link::Canonical, 1.0).is_err());
}

#[test]
fn derivative_function_examples() {
    let b = LikelihoodFamily::from_id("bernoulli_logit", 1.0, 1).unwrap();
    let (u, w) = b.derivative_functions(1.0, 0.0).unwrap();
    assert!((u - 0.5).abs() < 1e-15 && (w - 4.0).abs() < 1e-14);
    let p = LikelihoodFamily::from_id("poisson", 1.0, 1).unwrap();
    let (u, w) = p.derivative_functions(3.0, 0.0).unwrap();
    assert!((u - 2.0).abs() < 1e-15 && (w - 1.0).abs() < 1e-15);
    let g = LikelihoodFamily::from_id("gaussian", 1.0, 1).unwrap();
    let (u, w) = g.derivative_functions(1.0, 0.0).unwrap();
    assert!((u - 1.0).abs() < 1e-15 && (w - 1.0).abs() < 1e-15);
}

fn check_eta_derivatives(l: &LikelihoodFamily, y: f64, eta: f64) -> std::result::Result<(), String> {
    let t = l.terms(y, eta).map_err(|e| e.to_string())?;
    let f = |e: f64| l.terms(y, e).unwrap();
    // fourth-order central differences
    let h = 1e-3;
    let (p1, m1, p2, m2) = (f(eta + h), f(eta - h), f(eta + 2.0 * h), f(eta - 2.0 * h));
    let fd = |g: fn(&LikTerms) -> f64| (8.0 * (g(&p1) - g(&m1)) - (g(&p2) - g(&m2))) / (12.0 * h);
    let fd1 = fd(|t| t.logp);
    let fd2 = fd(|t| t.d1);
    let fd3 = fd(|t| t.d2);
    let rel = |a: f64, b: f64, floor: f64| (a - b).abs() / a.abs().max(b.abs()).max(floor);
    if rel(t.d1, fd1, 1e-3) > 1e-6 {
        return Err(format!("u {} vs {}", t.d1, fd1));
    }
    if rel(t.d2, fd2, 1e-3) > 1e-5 {
        return Err(format!("d2 {} vs {}", t.d2, fd2));
    }
    if rel(t.d3, fd3, 1e-3) > 1e-5 {
        return Err(format!("d3 {} vs {}", t.d3, fd3));
    }
    Ok(())
}

fn check_phi_derivatives(l: &LikelihoodFamily, y: f64, eta: f64) -> std::result::Result<(), String> {
    let t = l.terms(y, eta).map_err(|e| e.to_string())?;
    let phi = l.dispersion();
    let h = 1e-5 * phi;
    let at = |p: f64| {
        let mut l2 = l.clone();
        l2.set_dispersion(p).unwrap();
        l2.terms(y, eta).unwrap()
    };
    let (p, m) = (at(phi + h), at(phi - h));
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    for (name, a, n) in [
        ("logp", t.logp_phi, (p.logp - m.logp) / (2.0 * h)),
        ("d1", t.d1_phi, (p.d1 - m.d1) / (2.0 * h)),
        ("d2", t.d2_phi, (p.d2 - m.d2) / (2.0 * h)),
    ] {
        if rel(a, n) > 1e-6 {
            return Err(format!("phi-partial of {name}: {a} vs {n}"));
        }
    }
    Ok(())
}

#[test]
fn derivatives_match_finite_differences_on_grid() {
    for c in cases() {
        let l = lik(&c);
        for &y in c.ys {
            for &eta in c.etas {
                check_eta_derivatives(&l, y, eta).unwrap_or_else(|e| panic!("{} y={y} eta={eta}: {e}", c.id));
                if l.has_free_dispersion() {
                    check_phi_derivatives(&l, y, eta).unwrap_or_else(|e| panic!("{} y={y} eta={eta}: {e}", c.id));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derivatives_match_finite_differences_random(
        case_idx in 0usize..13, yi in 0usize..3, eta in -1.5f64..1.5, log_phi in -1.0f64..0.7
    ) {
        let c = &cases()[case_idx];
        let y = c.ys[yi % c.ys.len()];
        let l = LikelihoodFamily::from_id(c.id, log_phi.exp(), 5).unwrap();
        prop_assert!(check_eta_derivatives(&l, y, eta).is_ok(), "{} {:?}", c.id, check_eta_derivatives(&l, y, eta));
        if l.has_free_dispersion() {
            prop_assert!(check_phi_derivatives(&l, y, eta).is_ok(), "{} {:?}", c.id, check_phi_derivatives(&l, y, eta));
        }
    }

    #[test]
    fn canonical_point_zeroes_gradient(
        case_idx in 0usize..6, y_raw in 0.05f64..0.95, log_phi in -1.5f64..1.0, offset in 0.1f64..1.0
    ) {
        let (id, y) = match case_idx {
            0 => ("gaussian", 10.0 * y_raw - 5.0),
            1 => ("poisson", (20.0 * y_raw).floor()),
            2 => ("gamma_shape", 10.0 * y_raw),
            3 => ("gamma_scale", 10.0 * y_raw),
            4 => ("inv_gaussian", 10.0 * y_raw),
            _ => ("beta", y_raw),
        };
        let l = LikelihoodFamily::from_id(id, log_phi.exp(), 1).unwrap().with_count_offset(if y == 0.0 { offset } else { 0.0 }).unwrap();
        let p = l.canonical_expansion_point(y).unwrap();
        let mut u = l.terms(y, p.eta).unwrap().d1;
        if y == 0.0 && id == "poisson" {
            // the offset shifts the stationary point to T(y) + c
            u += offset;
        }
        prop_assert!(u.abs() < 1e-9, "{id} y={y} u={u}");
    }

    #[test]
    fn mean_inverse_round_trip(case_idx in 0usize..13, eta in -3.0f64..3.0, log_phi in -1.0f64..0.5) {
        let c = &cases()[case_idx];
        let l = LikelihoodFamily::from_id(c.id, log_phi.exp(), 5).unwrap();
        let th = l.link.theta(eta).theta;
        let mu = l.dist.partition(th, l.dispersion()).unwrap().b1;
        if matches!(l.dist, Distribution::ComPoisson) {
            return Ok(());
        }
        let (back, _) = l.dist.mean_to_theta(mu, l.dispersion()).unwrap();
        prop_assert!((back - th).abs() < 1e-10 * th.abs().max(1.0), "{} {th} {back}", c.id);
        let p = l.dist.partition(th, l.dispersion()).unwrap();
        prop_assert!(p.b2 * p.a > 0.0);
    }
}

#[test]
fn canonical_expansion_examples() {
    let p = LikelihoodFamily::from_id("poisson", 1.0, 1).unwrap();
    assert!((p.canonical_expansion_point(3.0).unwrap().eta - 3f64.ln()).abs() < 1e-15);
    assert!(matches!(p.canonical_expansion_point(0.0), Err(GgpmError::UndefinedPoint { .. })));
    let g = LikelihoodFamily::from_id("gamma_shape", 0.7, 1).unwrap();
    assert!((g.canonical_expansion_point(2.0).unwrap().eta - 2f64.ln()).abs() < 1e-15);
    let ig = LikelihoodFamily::from_id("inv_gaussian", 0.7, 1).unwrap();
    assert!((ig.canonical_expansion_point(1.0).unwrap().eta - 2f64.ln()).abs() < 1e-15);
    let b = LikelihoodFamily::from_id("bernoulli_probit", 1.0, 1).unwrap();
    let pt = b.canonical_expansion_point(1.0).unwrap();
    assert!(pt.agnostic && pt.eta == 0.0);
}

#[test]
fn expansion_point_dispersion_derivative() {
    for (id, y) in
        [("gamma_scale", 1.7), ("neg_binomial", 3.0), ("com_poisson", 2.0), ("beta", 0.3), ("com_poisson_linear", 4.0)]
    {
        let l = LikelihoodFamily::from_id(id, 0.8, 1).unwrap();
        let p = l.canonical_expansion_point(y).unwrap();
        let h = 1e-6;
        let at = |phi: f64| {
            let mut l2 = l.clone();
            l2.set_dispersion(phi).unwrap();
            l2.canonical_expansion_point(y).unwrap().eta
        };
        let fd = (at(0.8 + h) - at(0.8 - h)) / (2.0 * h);
        assert!((p.deta_dphi - fd).abs() < 1e-6 * fd.abs().max(1.0), "{id}: {} vs {fd}", p.deta_dphi);
    }
}

#[test]
fn canonical_link_simplification() {
    for (id, phi, y, eta) in [
        ("gaussian", 0.7, 1.1, 0.2),
        ("poisson", 1.0, 3.0, 0.4),
        ("binomial", 0.2, 0.6, -0.3),
        ("com_poisson", 1.3, 2.0, 0.5),
    ] {
        let l = LikelihoodFamily::from_id(id, phi, 5).unwrap();
        let (u, w) = l.derivative_functions(y, eta).unwrap();
        let p = l.dist.partition(eta, l.dispersion()).unwrap();
        let t = l.dist.stat(y);
        assert!((u - (t - p.b1) / p.a).abs() < 1e-12);
        assert!((w - p.a / p.b2).abs() < 1e-12 * w.abs());
    }
}

#[test]
fn bernoulli_agnostic_targets() {
    for n in [1u32, 3, 10] {
        let l = LikelihoodFamily::from_id("binomial", 1.0, n).unwrap();
        for k in 0..=n {
            let y = k as f64 / n as f64;
            let pt = l.canonical_expansion_point(y).unwrap();
            let (u, w) = l.derivative_functions(y, pt.eta).unwrap();
            let t = pt.eta + w * u;
            assert_eq!(w, 4.0 / n as f64);
            assert!((t - 4.0 * (y - 0.5)).abs() < 1e-14);
        }
    }
}

#[test]
fn mean_and_variance_examples() {
    let p = LikelihoodFamily::from_id("poisson", 1.0, 1).unwrap();
    assert_eq!(p.mean_and_variance(0.0).unwrap(), (1.0, 1.0));
    let g = LikelihoodFamily::from_id("gaussian", 0.3, 1).unwrap();
    assert_eq!(g.mean_and_variance(1.7).unwrap(), (1.7, 0.3));
    let gs = LikelihoodFamily::from_id("gamma_shape", 0.4, 1).unwrap();
    let (m, v) = gs.mean_and_variance(0.0).unwrap();
    assert!((m - 1.0).abs() < 1e-15 && (v - 0.4).abs() < 1e-15);
    let c = LikelihoodFamily::from_id("com_poisson", 2.0, 1).unwrap();
    let (m, v) = c.mean_and_variance(1.0).unwrap();
    assert!((m - (1f64.exp() + 0.25 - 0.5)).abs() < 1e-14);
    assert!(v > 0.0);
}

#[test]
fn link_round_trip_on_grid() {
    for c in cases() {
        let l = lik(&c);
        for i in 0..=40 {
            let eta = -10.0 + 0.5 * i as f64;
            if l.dist == Distribution::ComPoisson && eta > 2.5 {
                continue;
            }
            // Phi(eta) rounds to 1 in double precision beyond this
            if l.link == Link::Probit && eta.abs() > 5.0 {
                continue;
            }
            let Ok(mu) = l.exact_mean(eta) else { continue };
            let (th, _) = match l.dist.mean_to_theta(mu, l.dispersion()) {
                Ok(v) => v,
                Err(_) => continue,
            };
            if l.dist == Distribution::ComPoisson {
                continue;
            }
            let back = l.link.inverse(th).unwrap().0;
            assert!((back - eta).abs() < 1e-8 * eta.abs().max(1.0), "{} eta={eta} back={back}", c.id);
        }
    }
    // COM-Poisson: g inverts the approximate mean
    let l = LikelihoodFamily::from_id("com_poisson_linear", 0.9, 1).unwrap();
    for &eta in &[-2.0, 0.0, 1.5] {
        let mu = l.inverse_link(eta).unwrap();
        assert!((l.link_fn(mu).unwrap() - eta).abs() < 1e-8);
    }
}

fn total_mass(l: &LikelihoodFamily, eta: f64) -> f64 {
    let dens = |y: f64| l.log_likelihood_or_neg_inf(y, eta).exp();
    match l.support() {
        Support::Reals => {
            let (m, v) = l.mean_and_variance(eta).unwrap();
            let s = v.sqrt();
            integrate_adaptive(|y| [dens(y)], m - 40.0 * s, m + 40.0 * s, 1e-10, 0.0).unwrap()[0]
        }
        Support::PositiveReals => {
            let f = |s: f64| [dens(s.exp()) * s.exp()];
            let tail = integrate_adaptive(f, -700.0, -60.0, 1e-10, 1e-12).unwrap()[0];
            tail + (-60..8)
                .map(|k| integrate_adaptive(f, k as f64, k as f64 + 1.0, 1e-12, 1e-14).unwrap()[0])
                .sum::<f64>()
        }
        Support::UnitInterval => integrate_adaptive(
            |s| {
                let y = 1.0 / (1.0 + (-s).exp());
                [dens(y) * y * (1.0 - y)]
            },
            -60.0,
            33.0,
            1e-10,
            1e-13,
        )
        .unwrap()[0],
        Support::Counts => {
            let (m, v) = l.mean_and_variance(eta).unwrap();
            discrete_expect(|_| 1.0, |n| l.log_likelihood_or_neg_inf(n as f64, eta), &CountCap::new(m.max(0.0), v))
                .unwrap()
        }
        Support::Fractions(n) => (0..=n).map(|k| dens(k as f64 / n as f64)).sum(),
    }
}

#[test]
fn densities_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    use rand::Rng;
    for c in cases() {
        for _ in 0..5 {
            let eta = rng.random_range(-1.5..1.5);
            let mut phi = (rng.random_range(-1.0..0.5f64)).exp();
            if c.id == "beta" {
                // keep the mass away from 1 - 1e-16, where y is not representable
                phi *= 0.2;
            }
            let l = LikelihoodFamily::from_id(c.id, phi, 5).unwrap();
            let mass = total_mass(&l, eta);
            assert!((mass - 1.0).abs() < 1e-6, "{} eta={eta} phi={phi} mass={mass}", c.id);
        }
    }
}

#[test]
fn sampler_means_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    for c in cases() {
        let l = lik(&c);
        let eta = 0.4;
        let draws: Vec<f64> = (0..n).map(|_| l.sample_output(eta, &mut rng).unwrap()).collect();
        let stats: Vec<f64> = draws.iter().map(|y| l.dist.stat(*y)).collect();
        let mean = stats.iter().sum::<f64>() / n as f64;
        let want = l.exact_mean(eta).unwrap();
        let (_, var) = l.mean_and_variance(eta).unwrap();
        let se = (var / n as f64).sqrt();
        assert!((mean - want).abs() < 4.0 * se, "{}: {mean} vs {want} (se {se})", c.id);
        for y in &draws {
            l.check_support(*y).unwrap();
        }
    }
}

#[test]
fn sampler_examples() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = LikelihoodFamily::from_id("gaussian", 1.0, 1).unwrap();
    let m: f64 = (0..100_000).map(|_| g.sample_output(0.0, &mut rng).unwrap()).sum::<f64>() / 1e5;
    assert!(m.abs() < 0.013);
    let p = LikelihoodFamily::from_id("poisson", 1.0, 1).unwrap();
    let m: f64 = (0..100_000).map(|_| p.sample_output(4f64.ln(), &mut rng).unwrap()).sum::<f64>() / 1e5;
    assert!((m - 4.0).abs() < 4.0 * (4.0f64 / 1e5).sqrt());
    let gs = LikelihoodFamily::from_id("gamma_shape", 0.5, 1).unwrap();
    let m: f64 = (0..100_000).map(|_| gs.sample_output(1.0, &mut rng).unwrap()).sum::<f64>() / 1e5;
    let sd = (0.5f64).sqrt() * 1f64.exp();
    assert!((m - 1f64.exp()).abs() < 4.0 * sd / 1e5f64.sqrt());
    let _ = rng.random::<f64>();
}

#[test]
fn probit_matches_normal_cdf() {
    let l = LikelihoodFamily::from_id("bernoulli_probit", 1.0, 1).unwrap();
    for &eta in &[-3.0, -0.5, 0.0, 1.2, 4.0] {
        let p1 = l.log_likelihood(1.0, eta).unwrap().exp();
        assert!((p1 - norm_cdf(eta)).abs() < 1e-14);
    }
    // far tail stays finite
    assert!(l.terms(1.0, -30.0).unwrap().d2.is_finite());
    assert!(l.terms(0.0, 30.0).unwrap().logp.is_finite());
}
