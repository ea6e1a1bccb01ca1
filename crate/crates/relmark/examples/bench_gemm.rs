use relmark::gemm::dgemm;
use std::time::Instant;

fn bench(m: usize, n: usize, k: usize, reps: usize) {
    let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.001).sin()).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.002).cos()).collect();
    let mut c = vec![0.0; m * n];
    dgemm(m, n, k, &a, false, &b, false, &mut c, false);
    let t = Instant::now();
    for _ in 0..reps {
        dgemm(m, n, k, &a, false, &b, false, &mut c, false);
    }
    let dt = t.elapsed().as_secs_f64();
    let gflops = (2.0 * (m * n * k * reps) as f64) / dt / 1e9;
    println!("{m}x{k} @ {k}x{n} x{reps}: {:.3}s  {gflops:.2} GFLOP/s", dt);
}

fn main() {
    bench(512, 512, 512, 20);
    bench(1408, 32, 32, 2000);   // monster GNN node GEMM shape (B=128, n=11)
    bench(1408, 128, 32, 800);   // LSTM gate shape-ish
    bench(4032, 128, 32, 300);   // NES gates B=64
    bench(128, 101, 128, 5000);  // small readout
    bench(2048, 2048, 2048, 2);
}
