use fame_core::baseline::{BasisSpec, RidgeFofr};
use fame_core::data::{make_case, split, GenSpec};

fn main() {
    for seed in 0..5u64 {
        let ds = make_case(&GenSpec::for_case(1, 200, seed).unwrap()).unwrap();
        let (tr, te) = split(&ds, 0.8, seed).unwrap();
        let model = RidgeFofr::fit(&tr, &BasisSpec::default()).unwrap();
        println!("seed {seed}: test mse {:.4}  (train {:.4})", model.mse(&te).unwrap(), model.mse(&tr).unwrap());
    }
    // variance of targets for reference
    let ds = make_case(&GenSpec::for_case(1, 200, 0).unwrap()).unwrap();
    let vals: Vec<f64> = ds.samples.iter().flat_map(|s| s.outputs[0].values.clone()).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    println!("target variance {var:.4}");
}
