mod support;

use dipole_asmc::kernels::{full_sweep, MoveParams, Particle, PosteriorTarget};
use dipole_asmc::rng::{stream, Purpose};
use dipole_asmc::{PriorParams, SourceConfig};
use support::*;

const CHAINS: usize = 100_000;
const SIGMA: f64 = 1e-13;

struct Outcome {
    nd: (f64, f64),
    pattern: (f64, f64),
}

/// Starts chains at exact draws from the tempered target under `prior`,
/// sweeps once with kernels built for `kernel_prior`, and compares the
/// result with an independent exact sample.
fn sweep_test(f: f64, prior: PriorParams, kernel_prior: PriorParams) -> Outcome {
    let t = tiny(6, 10, 2);
    let data = dipole_field(&t, 2, [0.0, 1.0, 0.0], 3e-8);
    let start = exact_draws(&t, &prior, &data, SIGMA, f, CHAINS, 11);
    let reference = exact_draws(&t, &prior, &data, SIGMA, f, CHAINS, 12);
    let target = PosteriorTarget {
        data: &data,
        leadfield: &t.lf,
        sigma: SIGMA,
        prior: &kernel_prior,
        exponent: f,
    };
    let moves = MoveParams::default();
    let swept: Vec<SourceConfig> = start
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = stream(7, Purpose::Sweep, 0, i as u64);
            let mut p = Particle::new(c, &target);
            full_sweep(&mut rng, &mut p, &target, &t.grid, &kernel_prior, &moves);
            p.config
        })
        .collect();
    let test = |key: fn(&SourceConfig) -> u64| {
        let (stat, df) = two_sample_chi2(
            &counts(swept.iter().map(key)),
            &counts(reference.iter().map(key)),
        );
        (stat, chi2_critical(df, 0.01))
    };
    Outcome {
        nd: test(|c| c.len() as u64),
        pattern: test(pattern),
    }
}

fn prior() -> PriorParams {
    PriorParams { max_dipoles: 2, ..PriorParams::default() }
}

#[test]
fn one_sweep_preserves_the_tempered_target() {
    for f in [0.1, 0.5, 1.0] {
        let o = sweep_test(f, prior(), prior());
        assert!(o.nd.0 < o.nd.1, "f = {f}: N_D chi-square {} >= {}", o.nd.0, o.nd.1);
        assert!(
            o.pattern.0 < o.pattern.1,
            "f = {f}: occupancy chi-square {} >= {}",
            o.pattern.0,
            o.pattern.1
        );
    }
}

#[test]
fn a_wrong_birth_rate_is_detected() {
    let wrong = PriorParams { rate: 1.0, ..prior() };
    let o = sweep_test(1.0, prior(), wrong);
    assert!(o.nd.0 > o.nd.1, "N_D chi-square {} < {}", o.nd.0, o.nd.1);
}
