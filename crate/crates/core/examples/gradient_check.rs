//! Finite-difference check of every mini architecture's gradients.

use gaplab::tensor::{check_gradients, GradCheckOptions, Network, Tensor};
use gaplab::zoo::{build, ArchitectureId, Family, InputClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for family in Family::ALL {
        let spec = build(&ArchitectureId::new(family, InputClass::Gray), 13, 32).unwrap();
        let net = Network::new(spec.clone(), 1).unwrap();
        let n: usize = spec.input_shape.iter().product::<usize>() * 2;
        let mut shape = vec![2];
        shape.extend_from_slice(&spec.input_shape);
        let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let r = check_gradients(&net, &x, &[0, 2], GradCheckOptions::default()).unwrap();
        println!("{:<8} checked {:>4}  max rel err {:.2e}", family.name(), r.checked, r.max_rel_err);
    }
}
