//! Element-parallel assembly against the sequential loop on the same data.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use thb_egg::assembly::{coons_patch, Disc, EggParams};
use thb_egg::boundary::AnnulusSector;
use thb_egg::par;
use thb_egg::thb::ThbSpace;

fn assembly(c: &mut Criterion) {
    let prm = EggParams::default();
    let mut g = c.benchmark_group("assembly");
    g.sample_size(20);
    for n in [8, 16, 32] {
        let d = Disc::new(Arc::new(ThbSpace::uniform(3, 2, n).unwrap()));
        let x = coons_patch(&d, &AnnulusSector).unwrap();
        for (label, seq) in [("parallel", false), ("sequential", true)] {
            par::set_sequential(seq);
            g.bench_with_input(BenchmarkId::new(format!("residual/{label}"), n), &n, |b, _| {
                b.iter(|| d.residual(&x.coeffs, &prm, None))
            });
            g.bench_with_input(BenchmarkId::new(format!("jacobian/{label}"), n), &n, |b, _| {
                b.iter(|| d.jacobian(&x.coeffs, &prm, None))
            });
        }
        par::set_sequential(false);
    }
    g.finish();
}

criterion_group!(benches, assembly);
criterion_main!(benches);
