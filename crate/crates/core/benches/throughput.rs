//! Sequential against data-parallel execution for the hot paths that
//! fan out: CA bootstrap, building update proofs, and both repair analyses.

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use certforest::authority::CertificateAuthority;
use certforest::forest::EpochConfig;
use certforest::hash_tree::{Digest, SmtHasher};
use certforest::par::Execution;
use certforest::sim::{lc_fail_monte_carlo, run_direct_repair_analysis};
use certforest::wire::crypto::StubSigner;

const WEEK: u32 = 604_800;
const T0: u32 = WEEK * 2900;
const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn certs(n: usize, seed: u64) -> Vec<(Digest, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (Digest(rng.gen()), T0 + rng.gen_range(0..52 * WEEK)))
        .collect()
}

fn ca(exec: Execution) -> CertificateAuthority {
    CertificateAuthority::new(EpochConfig::default(), SmtHasher::sha256(), Box::new(StubSigner::from_seed(1)), T0)
        .expect("valid config")
        .with_execution(exec)
}

fn bootstrap(c: &mut Criterion) {
    let list = certs(50_000, 1);
    let mut g = c.benchmark_group("ca_bootstrap_50k");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter_batched(
                || ca(exec),
                |mut ca| ca.bootstrap(list.iter().copied(), T0).expect("fresh"),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn build_update(c: &mut Criterion) {
    let list = certs(50_000, 2);
    let mut g = c.benchmark_group("ca_update_500_changes");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter_batched(
                || {
                    let mut ca = ca(exec);
                    ca.bootstrap(list.iter().copied(), T0).expect("fresh");
                    for (cert, _) in list.iter().step_by(100) {
                        ca.revoke(cert).expect("active");
                    }
                    ca
                },
                |mut ca| ca.build_update(T0 + 3600).expect("publishable"),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn direct_repair(c: &mut Criterion) {
    let mut g = c.benchmark_group("direct_repair_analysis");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, "2k leaves, m 8"), &exec, |b, &exec| {
            b.iter(|| run_direct_repair_analysis(SmtHasher::sha256(), 2_000, 8, 100, 100, 1, exec))
        });
    }
    g.finish();
}

fn lc_monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("lc_monte_carlo");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, "clvl 7, m 16"), &exec, |b, &exec| {
            b.iter(|| lc_fail_monte_carlo(7, 16, 50_000, 1, exec))
        });
    }
    g.finish();
}

criterion_group!(benches, bootstrap, build_update, direct_repair, lc_monte_carlo);
criterion_main!(benches);
