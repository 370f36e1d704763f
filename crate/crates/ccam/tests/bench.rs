// Temporary micro-benchmark.
use ccam::tensor::{matmul, Tensor};
use std::time::Instant;

#[test]
#[ignore]
fn matmul_throughput() {
    for (m, k, n, reps) in [(16usize, 256, 256, 2000), (256, 2, 256, 2000), (256, 256, 16, 2000), (32, 64, 64, 8000)] {
        let a = Tensor::filled(&[m, k], 0.5).unwrap();
        let b = Tensor::filled(&[k, n], 0.25).unwrap();
        let start = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            let c = matmul(&a, &b).unwrap();
            sink += c.data()[0];
        }
        let secs = start.elapsed().as_secs_f64();
        let flops = 2.0 * (m * k * n * reps) as f64;
        println!("{m}x{k}x{n}: {:.2} GFLOP/s (sink {sink})", flops / secs / 1e9);
    }
    // exp throughput
    let v: Vec<f64> = (0..65536).map(|i| (i % 97) as f64 * 0.01 - 0.5).collect();
    let start = Instant::now();
    let mut sink = 0.0;
    for _ in 0..500 {
        for &x in &v { sink += x.exp(); }
    }
    let secs = start.elapsed().as_secs_f64();
    println!("exp: {:.1} M/s (sink {sink})", 65536.0 * 500.0 / secs / 1e6);
}
