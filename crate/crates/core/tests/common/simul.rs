//! Causality and wait-k checks of the streaming engine on random untrained
//! models. Each check runs 100 random models and streams and panics on the
//! first violation.

use super::values;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waitk::encoder::{encode_stream, FusionMode};
use waitk::engine::{run_simultaneous, DecodeConfig, SimulOutput};
use waitk::model::{Model, ModelConfig, Segmentation};
use waitk::transformer::IncrementalEncoder;
use waitk::Tensor;

pub const FEATURES: usize = 6;

pub fn random_model(rng: &mut ChaCha8Rng) -> Model {
    let mut c = ModelConfig::desk(FEATURES, 5, 7);
    c.heads = [1, 2, 4][rng.random_range(0..3)];
    c.d_model = c.heads * rng.random_range(2..=4);
    c.ff_dim = rng.random_range(4..=16);
    c.encoder_layers = rng.random_range(1..=2);
    c.decoder_layers = rng.random_range(1..=2);
    c.reencode = rng.random_bool(0.7);
    c.fusion = [FusionMode::Add, FusionMode::ConcatProject, FusionMode::ReencodeOnly][rng.random_range(0..3)];
    if rng.random_bool(0.25) {
        c.segmentation = Segmentation::Static {
            rate: rng.random_range(1.5..4.0),
        };
    }
    Model::new(c, rng.random()).unwrap()
}

pub fn random_stream(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::matrix(n, FEATURES, values(rng.random(), n * FEATURES, 1.0)).unwrap()
}

pub fn decode(model: &Model, x: &Tensor, k: usize) -> SimulOutput {
    let cfg = DecodeConfig {
        k,
        beam: 2,
        ..DecodeConfig::default()
    };
    run_simultaneous(model, x, &cfg).unwrap()
}

pub fn incremental_encoding_equals_batch_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    for _ in 0..100 {
        let model = random_model(&mut rng);
        let n = rng.random_range(1..=30);
        let x = model.embed_frames(&random_stream(&mut rng, n), 0).unwrap();
        let batch = encode_stream(&model.parts.encoder, &model.params, &x).unwrap();
        let mut inc = IncrementalEncoder::new(&model.parts.encoder);
        for i in 0..n {
            let row = inc.push(&model.parts.encoder, &model.params, x.row(i)).unwrap();
            for (a, b) in row.iter().zip(batch.row(i)) {
                assert!((a - b).abs() <= 1e-12, "frame {i}: {a} vs {b}");
            }
        }
        assert!(inc.outputs().unwrap().max_abs_diff(&batch) <= 1e-12);
    }
}

pub fn emitted_tokens_ignore_frames_beyond_their_horizon() {
    let mut rng = ChaCha8Rng::seed_from_u64(502);
    let mut checked = 0;
    for _ in 0..100 {
        let model = random_model(&mut rng);
        let k = rng.random_range(1..=3);
        let n = rng.random_range(4..=30);
        let x = random_stream(&mut rng, n);
        let base = decode(&model, &x, k);
        let fired = base.boundaries.frames();
        for (i, e) in base.log.emissions.iter().enumerate().filter(|(_, e)| !e.tail) {
            let t = i + 1;
            let horizon = fired[t + k - 2];
            if horizon >= n {
                continue;
            }
            let mut y = x.clone();
            let noise = values(rng.random(), (n - horizon) * FEATURES, 3.0);
            y.data_mut()[horizon * FEATURES..].copy_from_slice(&noise);
            let other = decode(&model, &y, k);
            assert_eq!(other.log.emissions.get(i).map(|e| e.token), Some(e.token), "token {t} changed");
            assert!(!other.log.emissions[i].tail);
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} pre-end emissions were checked");
}

pub fn truncated_stream_replays_the_emitted_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(503);
    let mut nonempty = 0;
    for _ in 0..100 {
        let model = random_model(&mut rng);
        let k = rng.random_range(1..=3);
        let n = rng.random_range(2..=30);
        let x = random_stream(&mut rng, n);
        let full = decode(&model, &x, k);
        let f = rng.random_range(1..n);
        let cut = decode(&model, &x.head_rows(f), k);
        let expect: Vec<_> = full.log.emissions.iter().filter(|e| e.frames_read <= f).copied().collect();
        let replay: Vec<_> = cut.log.emissions.iter().filter(|e| !e.tail).copied().collect();
        assert_eq!(replay, expect, "truncated at {f} of {n}");
        // The short run may add one tail boundary at its last frame.
        let seen = full.boundaries.truncated(f).frames();
        let cut_frames = cut.boundaries.frames();
        assert!(cut_frames.starts_with(&seen) && cut_frames.len() <= seen.len() + 1);
        nonempty += usize::from(!expect.is_empty());
    }
    assert!(nonempty >= 20, "only {nonempty} truncations had emissions");
}
