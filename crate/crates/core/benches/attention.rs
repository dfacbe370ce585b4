use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lam_core::attention::{full_attend, AttnCounters};
use lam_core::lam::{lam_attend, LamCounters, LamOptions};
use lam_core::ops::Eager;
use lam_core::random::{random_matrix, rng};
use lam_core::Exec;

const L: usize = 32;
const D: usize = 16;

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for n in [512usize, 1024, 2048, 4096] {
        let mut r = rng(n as u64);
        let (q, k, v) = (
            random_matrix(&mut r, n, D),
            random_matrix(&mut r, n, D),
            random_matrix(&mut r, n, D),
        );
        group.throughput(Throughput::Elements(n as u64));
        for (label, exec) in [
            ("sequential", Exec::Sequential),
            ("parallel", Exec::Parallel),
        ] {
            group.bench_with_input(BenchmarkId::new(format!("lam/{label}"), n), &n, |b, _| {
                let opts = LamOptions {
                    exec,
                    mask_padding: true,
                };
                b.iter(|| {
                    let mut ops = Eager { exec };
                    lam_attend(&mut ops, &q, &k, &v, L, opts, &mut LamCounters::default()).unwrap()
                })
            });
            group.bench_with_input(BenchmarkId::new(format!("full/{label}"), n), &n, |b, _| {
                b.iter(|| {
                    let mut ops = Eager { exec };
                    full_attend(&mut ops, &q, &k, &v, None, &mut AttnCounters::default()).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
