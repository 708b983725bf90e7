use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gift_core::gift::{gift_targets, objective_loss, teacher_logprobs, LossOptions, Objective};
use gift_core::model::{Matrix, MicroTransformer, TabularModel, TransformerConfig};
use gift_core::numerics::log_softmax;
use gift_core::oracle::{gibbs_policy, sequence_distribution, EnumerableTask};
use gift_core::{PolicyModel, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn transformer() -> PolicyModel {
    PolicyModel::Transformer(MicroTransformer::init(TransformerConfig::default(), 0).unwrap())
}

fn batch(vocab: u32, n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| {
            let p = (0..len / 2).map(|_| rng.gen_range(0..vocab)).collect();
            let r = (0..len - len / 2)
                .map(|_| rng.gen_range(0..vocab))
                .collect();
            TokenSequence::new(p, r)
        })
        .collect()
}

fn forward_backward(c: &mut Criterion) {
    let model = transformer();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("transformer");
    for len in [16usize, 32, 64] {
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..32)).collect();
        g.bench_with_input(BenchmarkId::new("forward", len), &tokens, |b, t| {
            b.iter(|| model.forward_logits(black_box(t)).unwrap())
        });
        let trace = model.forward_trace(&tokens).unwrap();
        let dlogits = Matrix::zeros(len, 32);
        g.bench_with_input(BenchmarkId::new("backward", len), &trace, |b, tr| {
            b.iter(|| model.backward(black_box(tr), &dlogits).unwrap())
        });
    }
    g.finish();
}

fn gibbs_enumeration(c: &mut Criterion) {
    let mut g = c.benchmark_group("gibbs");
    for (vocab, horizon) in [(4usize, 4usize), (5, 5), (6, 6)] {
        let task = EnumerableTask::new(vocab, 0, vec![1], horizon, |y| {
            (y.first() == Some(&1)) as u8 as f64
        })
        .unwrap();
        let mut policy = PolicyModel::Tabular(TabularModel::zeros(vocab, 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        policy
            .params_mut()
            .iter_mut()
            .for_each(|p| *p = rng.gen_range(-1.0..1.0));
        let id = format!("v{vocab}h{horizon}");
        g.bench_function(BenchmarkId::new("sequence_distribution", &id), |b| {
            b.iter(|| sequence_distribution(&policy, black_box(&task)).unwrap())
        });
        let base = sequence_distribution(&policy, &task).unwrap();
        g.bench_function(BenchmarkId::new("gibbs_policy", &id), |b| {
            b.iter(|| gibbs_policy(black_box(&base), &task, 2.0).unwrap())
        });
    }
    g.finish();
}

fn gift_target_construction(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = 256;
    let mut base = Matrix::zeros(rows, 32);
    for t in 0..rows {
        let z: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
        base.row_mut(t).copy_from_slice(&log_softmax(&z).unwrap());
    }
    let oracle: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..32)).collect();
    c.bench_function("gift_targets/256x32", |b| {
        b.iter(|| gift_targets(black_box(&base), &oracle, 5.0).unwrap())
    });

    let model = transformer();
    let data = batch(32, 16, 24, &mut rng);
    let opts = LossOptions::default();
    let teacher = teacher_logprobs(&model, &data, opts).unwrap();
    c.bench_function("gift_loss/batch16x24", |b| {
        b.iter(|| {
            objective_loss(
                &model,
                black_box(&data),
                Objective::Gift { beta: 5.0 },
                Some(&teacher),
                opts,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    forward_backward,
    gibbs_enumeration,
    gift_target_construction
);
criterion_main!(benches);
