use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use l1fuse::fixtures::{mobilenet_v1_025, pw_dw_stack, random_input};
use l1fuse::memsim::MemoryConfig;
use l1fuse::runtime;
use l1fuse::tiler::PlanOptions;
use l1fuse::verify::{self, VerifyOptions};
use l1fuse::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn mobilenet(c: &mut Criterion) {
    let net = mobilenet_v1_025(0).unwrap();
    let x = random_input(net.input_shape(), 1);
    let cfg = MemoryConfig::default();
    let opts = PlanOptions::default();
    let mut g = c.benchmark_group("mobilenet_v1_025 run");
    g.sample_size(20);
    for fuse in [true, false] {
        for (name, exec) in MODES {
            let id = format!("{}/{name}", if fuse { "fused" } else { "unfused" });
            g.bench_function(id, |b| {
                b.iter(|| runtime::run_network(&net, black_box(&x), fuse, &cfg, &opts, exec).unwrap())
            });
        }
    }
    g.bench_function("golden", |b| b.iter(|| runtime::golden(&net, black_box(&x)).unwrap()));
    g.finish();
}

fn planning(c: &mut Criterion) {
    let net = mobilenet_v1_025(0).unwrap();
    let cfg = MemoryConfig::with_l1(16384);
    c.bench_function("mobilenet_v1_025 plan_all", |b| {
        b.iter(|| {
            let mut g = runtime::fusion_pass(&net, true).unwrap();
            g.plan_all(
                &cfg,
                &PlanOptions {
                    fb_candidates: vec![1, 3, 8],
                },
            )
            .unwrap();
            g
        })
    });
}

fn verify_sweep(c: &mut Criterion) {
    let net = pw_dw_stack(0).unwrap();
    let mut g = c.benchmark_group("pw_dw_stack verify");
    g.sample_size(20);
    for (name, exec) in MODES {
        let opts = VerifyOptions {
            exec,
            ..Default::default()
        };
        g.bench_function(name, |b| b.iter(|| verify::verify(black_box(&net), &opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, mobilenet, planning, verify_sweep);
criterion_main!(benches);
