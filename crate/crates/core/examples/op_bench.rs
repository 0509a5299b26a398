//! Scratch per-op timing at desk shapes. Not part of the test suite.

use std::time::Instant;

use protoclass::tensor::graph::Graph;
use protoclass::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = 2160usize;
    let d = 64usize;
    let ff = 256usize;
    let x = Tensor::<f32>::randn(&[rows, d], 1.0, &mut rng);
    let xff = Tensor::<f32>::randn(&[rows, ff], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[d, d], 1.0, &mut rng);
    let w1 = Tensor::<f32>::randn(&[d, ff], 1.0, &mut rng);
    let w2 = Tensor::<f32>::randn(&[ff, d], 1.0, &mut rng);
    let gamma = Tensor::<f32>::full(&[d], 1.0);
    let beta = Tensor::<f32>::zeros(&[d]);
    let attn_lens = vec![45usize; 48];

    let reps = 50;
    macro_rules! time_op {
        ($name:expr, $body:expr) => {{
            let t = Instant::now();
            for _ in 0..reps {
                std::hint::black_box($body);
            }
            eprintln!("{:28} {:7.2} ms", $name, t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        }};
    }

    time_op!("matmul 2160x64x64", {
        let mut g = Graph::<f32>::new();
        let a = g.param(x.clone());
        let b = g.constant(w.clone());
        g.matmul(a, b).unwrap()
    });
    time_op!("matmul 2160x64x256", {
        let mut g = Graph::<f32>::new();
        let a = g.param(x.clone());
        let b = g.constant(w1.clone());
        g.matmul(a, b).unwrap()
    });
    time_op!("matmul 2160x256x64", {
        let mut g = Graph::<f32>::new();
        let a = g.param(xff.clone());
        let b = g.constant(w2.clone());
        g.matmul(a, b).unwrap()
    });
    time_op!("self_attention 48x45 h4", {
        let mut g = Graph::<f32>::new();
        let q = g.param(x.clone());
        let k = g.param(x.clone());
        let v = g.param(x.clone());
        g.self_attention(q, k, v, 4, 45, &attn_lens).unwrap()
    });
    time_op!("layer_norm 2160x64", {
        let mut g = Graph::<f32>::new();
        let a = g.param(x.clone());
        let gm = g.constant(gamma.clone());
        let bt = g.constant(beta.clone());
        g.layer_norm(a, gm, bt, 1e-5).unwrap()
    });
    time_op!("gelu 2160x256", {
        let mut g = Graph::<f32>::new();
        let a = g.param(xff.clone());
        g.gelu(a)
    });
    time_op!("add 2160x64", {
        let mut g = Graph::<f32>::new();
        let a = g.param(x.clone());
        let b = g.constant(x.clone());
        g.add(a, b).unwrap()
    });
    time_op!("add_row_vec 2160x256", {
        let mut g = Graph::<f32>::new();
        let a = g.param(xff.clone());
        let b = g.constant(Tensor::zeros(&[ff]));
        g.add_row_vec(a, b).unwrap()
    });
    time_op!("gather 2160 of 1500x64", {
        let mut g = Graph::<f32>::new();
        let table = g.param(Tensor::randn(&[1500, d], 1.0, &mut rng));
        let idx: Vec<usize> = (0..rows).map(|i| i % 1500).collect();
        g.gather_rows(table, &idx).unwrap()
    });
    // Dropout-style mask generation + mul.
    let mut drng = ChaCha8Rng::seed_from_u64(2);
    time_op!("dropout mask+mul 2160x256", {
        let data: Vec<f32> = (0..rows * ff)
            .map(|_| {
                if drng.random::<f64>() < 0.1 {
                    0.0
                } else {
                    1.0 / 0.9
                }
            })
            .collect();
        let mut g = Graph::<f32>::new();
        let a = g.param(xff.clone());
        let m = g.constant(Tensor::new(vec![rows, ff], data).unwrap());
        g.mul(a, m).unwrap()
    });
}
