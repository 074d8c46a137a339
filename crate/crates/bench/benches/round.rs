use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use fedblocks_bench::{experiment, vector};
use fedblocks_core::compression::{qsgd_encode, randk_encode, topk_encode};
use fedblocks_core::federation::run_round;
use fedblocks_core::transport::{deserialize, serialize, MsgType};
use fedblocks_core::{BlockId, Bus, CompressedPayload, LocalRule, WireMessage};

fn rounds(c: &mut Criterion) {
    let mut group = c.benchmark_group("round");
    for (rule, blocks) in [(LocalRule::FedAvg, 1), (LocalRule::FedBcgd, 5), (LocalRule::FedBcgdPlus, 5), (LocalRule::Scaffold, 1)] {
        let e = experiment(rule, 50, blocks);
        let unit = e.bus.unit();
        group.bench_function(rule.name(), |b| {
            b.iter_batched(
                || (e.server.clone(), Bus::new(unit)),
                |(mut server, bus)| run_round(&mut server, &e.problem, &e.round_cfg, &bus).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn compressors(c: &mut Criterion) {
    let v = vector(10_000, 7);
    let mut group = c.benchmark_group("encode_10k");
    group.bench_function("topk", |b| b.iter(|| topk_encode(&v, 500).unwrap()));
    group.bench_function("randk", |b| b.iter(|| randk_encode(&v, 500, 3).unwrap()));
    group.bench_function("qsgd", |b| b.iter(|| qsgd_encode(&v, 16, 3).unwrap()));
    group.finish();
}

fn wire(c: &mut Criterion) {
    let payload = [CompressedPayload::Dense(vector(10_000, 9))];
    let msg = WireMessage::with_payloads(MsgType::Upload, 3, 4, BlockId::Block(2), &payload);
    let bytes = serialize(&msg);
    c.bench_function("serialize_10k", |b| b.iter(|| serialize(&msg)));
    c.bench_function("deserialize_10k", |b| b.iter(|| deserialize(&bytes).unwrap()));
}

criterion_group!(benches, rounds, compressors, wire);
criterion_main!(benches);
