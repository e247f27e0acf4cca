use fame_core::data::{make_case, GenSpec, Dataset};
use fame_core::harness::{train_on, TrainConfig};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let dropout: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let ds = make_case(&GenSpec::for_case(1, 2, 0).unwrap()).unwrap();
    let one = Dataset { samples: vec![ds.samples[0].clone()], provenance: ds.provenance.clone() };
    let mut cfg = TrainConfig::new(3, 1);
    cfg.epochs = epochs;
    cfg.batch_size = 1;
    cfg.model.dropout = dropout;
    let out = train_on(&cfg, &one, &one).unwrap();
    let l = &out.metrics.train_loss;
    let idx = [0, 50, 100, 200, 300, 400, epochs - 1];
    let vals: Vec<String> = idx.iter().filter(|&&i| i < l.len()).map(|&i| format!("{i}:{:.2e}", l[i])).collect();
    println!("overfit dropout{dropout}: {}", vals.join(" "));
}
