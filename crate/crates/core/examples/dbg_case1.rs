use fame_core::data::{make_case, GenSpec};
use fame_core::harness::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let case: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let n: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(200);
    let ds = make_case(&GenSpec::for_case(case, n, seed).unwrap()).unwrap();
    let mut cfg = TrainConfig::new(ds.d(), ds.m());
    cfg.seed = seed;
    let t0 = Instant::now();
    let out = train(&cfg, &ds).unwrap();
    let l = &out.metrics.train_loss;
    println!(
        "case{case} n{n} seed{seed}: test_mse {:.4}  H~ {:.3}  loss[0]={:.4} loss[10]={:.4} loss[30]={:.4} loss[99]={:.4}  diverged={:?}  {:.0}s",
        out.metrics.test_mse, out.metrics.entropy_pooled,
        l[0], l.get(10).unwrap_or(&f64::NAN), l.get(30).unwrap_or(&f64::NAN), l.last().unwrap(),
        out.diverged_at, t0.elapsed().as_secs_f64()
    );
}
