use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use vgr_core::datakit::anls;
use vgr_core::feature_pool::{build_pool_blank, pool_grid, CoordinateEncoder, GridSpec, PoolingConfig};
use vgr_core::replay_parser::{ParserConfig, SignalParser};
use vgr_core::{giou_loss, replay_tokens, PixelBox};

fn pooling(c: &mut Criterion) {
    let grid = GridSpec::from_layout(4, 5, 336, 14).unwrap();
    let pool = build_pool_blank(&grid, &CoordinateEncoder { channels: 8 }, &PoolingConfig::default()).unwrap();
    c.bench_function("pool_grid_96x120x8_s4", |b| b.iter(|| pool_grid(black_box(&pool.map), 4)));
    let bbox = PixelBox::new(100.0, 80.0, 900.0, 700.0);
    c.bench_function("replay_tokens_large_box", |b| b.iter(|| replay_tokens(&pool, black_box(&bbox)).unwrap()));
    c.bench_function("build_pool_4x5", |b| {
        b.iter(|| build_pool_blank(&grid, &CoordinateEncoder { channels: 8 }, &PoolingConfig::default()).unwrap())
    });
}

fn parsing(c: &mut Criterion) {
    let text: String = (0..200)
        .map(|i| format!("step {i} looks at <sot>{{\"bbox_2d\":[{i},{i},{},{}],\"label\":\"obj\"}}<eot> and moves on. ", i + 20, i + 30))
        .collect();
    let chunks: Vec<&str> = text.as_bytes().chunks(7).map(|c| std::str::from_utf8(c).unwrap()).collect();
    c.bench_function("parser_feed_200_signals", |b| {
        b.iter(|| {
            let mut p = SignalParser::new(ParserConfig::default());
            let mut n = 0;
            for ch in &chunks {
                n += p.feed(black_box(ch)).len();
            }
            n + p.finish().len()
        })
    });
}

fn losses(c: &mut Criterion) {
    c.bench_function("giou_loss", |b| {
        b.iter(|| giou_loss(black_box([0.0, 0.0, 2.0, 2.0]), black_box([1.0, 1.0, 3.0, 3.0])))
    });
    c.bench_function("anls_40_chars", |b| {
        b.iter(|| anls(black_box("the quick brown fox jumps over the lazy"), black_box("the quick brown cat jumped over a lazy dog"), 0.5))
    });
}

criterion_group!(benches, pooling, parsing, losses);
criterion_main!(benches);
