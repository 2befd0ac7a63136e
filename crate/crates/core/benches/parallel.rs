use std::hint::black_box;
use std::path::PathBuf;

use bagel_core::bootstrap::{refine, BootstrapConfig, BootstrapMode};
use bagel_core::lm::{PromptSet, ScriptedBackend};
use bagel_core::par;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn backend() -> ScriptedBackend {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/scripts/stochastic.json");
    ScriptedBackend::load(&path).expect("fixture loads")
}

fn refine_seeds(c: &mut Criterion) {
    let lm = backend();
    let prompts = PromptSet::default();
    let config = BootstrapConfig::new("choose_date", BootstrapMode::TrajectoryFirst);
    let seeds: Vec<u64> = (0..64).collect();
    let run = |&seed: &u64| refine("choose_date", seed, &lm, &prompts, &config).map(|r| r.diagnostics.len());

    let mut group = c.benchmark_group("refine_64_seeds");
    group.sample_size(20);
    group.bench_function("map_seq", |b| b.iter(|| black_box(par::map_seq(&seeds, run))));
    let mut jobs_list = vec![2, 4, par::available_jobs()];
    jobs_list.retain(|&j| j > 1);
    jobs_list.sort_unstable();
    jobs_list.dedup();
    for jobs in jobs_list {
        group.bench_with_input(BenchmarkId::new("map_par", jobs), &jobs, |b, &jobs| {
            b.iter(|| black_box(par::map_par(&seeds, jobs, run)))
        });
    }
    group.finish();
}

criterion_group!(benches, refine_seeds);
criterion_main!(benches);
