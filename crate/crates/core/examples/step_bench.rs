//! Scratch micro-benchmark for training-step throughput. Not part of the
//! test suite.

use std::time::Instant;

use protoclass::encoder::{self, EncoderConfig};
use protoclass::tensor::Tensor;
use protoclass::text::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // Raw matmul throughput at training shapes.
    for (m, k, n) in [(2160usize, 64usize, 64usize), (2160, 64, 256), (2160, 256, 64), (45, 16, 45)] {
        let a = Tensor::<f32>::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[k, n], 1.0, &mut rng);
        let reps = (2_000_000_000 / (2 * m * k * n)).max(3);
        let t = Instant::now();
        for _ in 0..reps {
            let c = a.matmul(&b).unwrap();
            std::hint::black_box(&c);
        }
        let secs = t.elapsed().as_secs_f64();
        let gflops = (2 * m * k * n * reps) as f64 / secs / 1e9;
        eprintln!("matmul {m}x{k}x{n}: {gflops:.2} GFLOP/s ({reps} reps)");
    }

    // One full training step at desk shapes.
    let vocab_size = 1500;
    let config = EncoderConfig {
        vocab_size,
        d_model: 64,
        n_heads: 4,
        n_layers: 3,
        d_ff: 256,
        max_len: 200,
        n_classes: 25,
        dropout: 0.1,
        mlm_mask_rate: 0.15,
        seed: 1,
    };
    let params = {
        let mut p = encoder::init_encoder::<f32>(&config).unwrap();
        encoder::add_classifier_head(&mut p, &config, 2);
        p
    };
    let seqs: Vec<TokenSequence> = (0..48)
        .map(|_| {
            let len = rng.random_range(40..50);
            let mut ids = vec![2u32];
            ids.extend((0..len - 2).map(|_| rng.random_range(5..vocab_size as u32)));
            ids.push(3);
            let attention_length = ids.len();
            ids.resize(200, 0);
            TokenSequence {
                ids,
                attention_length,
            }
        })
        .collect();
    let labels: Vec<usize> = (0..48).map(|_| rng.random_range(0..25)).collect();

    let model = encoder::EncoderModel {
        config: config.clone(),
        params: params.clone(),
    };
    let t = Instant::now();
    for _ in 0..10 {
        let out = encoder::forward(&model, &seqs).unwrap();
        std::hint::black_box(&out);
    }
    eprintln!("forward only: {:.0} ms", t.elapsed().as_secs_f64() * 100.0);

    let t = Instant::now();
    for _ in 0..10 {
        let out = encoder::classification_grads(&params, &config, &seqs, &labels, None).unwrap();
        std::hint::black_box(&out);
    }
    eprintln!(
        "fwd+bwd no dropout: {:.0} ms",
        t.elapsed().as_secs_f64() * 100.0
    );

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..3 {
        let t = Instant::now();
        let steps = 5;
        for _ in 0..steps {
            let out = encoder::classification_grads(
                &params,
                &config,
                &seqs,
                &labels,
                Some((0.1, &mut dropout_rng)),
            )
            .unwrap();
            std::hint::black_box(&out);
        }
        eprintln!(
            "trial {trial}: {:.0} ms/step",
            t.elapsed().as_secs_f64() * 1000.0 / steps as f64
        );
    }
}
