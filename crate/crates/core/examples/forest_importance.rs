//! Forest importance on a table where only one column matters.

use gaplab::analysis::forest::forest_importance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<Vec<f64>> = (0..80).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
    let y: Vec<f64> = x.iter().map(|r| if r[2] > 0.5 { 1.0 } else { 0.0 }).collect();
    let names: Vec<String> = (0..5).map(|i| format!("x{i}")).collect();
    let rep = forest_importance(&names, &x, &y, 50, 1).unwrap();
    for (n, v) in names.iter().zip(&rep.mean) {
        println!("{n} {v:.3}");
    }
}
