//! Parameter and FLOP counts of the 21 minis at the demo frame size.

use gaplab::zoo::{build, count_params_flops, ArchitectureId, Family, InputClass};

fn main() {
    println!("{:<16} {:>10} {:>12}", "arch", "params", "flops");
    for family in Family::ALL {
        for class in InputClass::ALL {
            let arch = ArchitectureId::new(family, class);
            let c = count_params_flops(&build(&arch, 13, 32).unwrap()).unwrap();
            println!("{:<16} {:>10} {:>12}", arch.label(), c.params, c.flops);
        }
    }
}
