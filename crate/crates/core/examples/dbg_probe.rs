use fame_core::data::{make_case, GenSpec};
use fame_core::harness::{train, TrainConfig};

fn main() {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let dropout: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let ds = make_case(&GenSpec::for_case(1, 200, 0).unwrap()).unwrap();
    let mut cfg = TrainConfig::new(3, 1);
    cfg.batch_size = batch;
    cfg.model.dropout = dropout;
    cfg.epochs = epochs;
    let out = train(&cfg, &ds).unwrap();
    let l = &out.metrics.train_loss;
    println!(
        "batch{batch} dropout{dropout} ep{epochs}: test {:.4} | loss 0:{:.3} 5:{:.3} 10:{:.3} 20:{:.3} last:{:.4}",
        out.metrics.test_mse, l[0], l[5.min(l.len()-1)], l[10.min(l.len()-1)], l[20.min(l.len()-1)], l.last().unwrap()
    );
}
