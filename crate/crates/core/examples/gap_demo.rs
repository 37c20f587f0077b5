//! fc3 and cnn2 on one scripted dataset: matched validation loss, different
//! closed-loop success. Slow; run with --release.

use gaplab::demo::{search_gap, DemoConfig};

fn main() {
    let cfg = DemoConfig::default();
    let split = cfg.record().unwrap();
    let attempts = search_gap(&cfg, &split, |a| println!("{} gap: {}", a.summary(), a.shows_gap())).unwrap();
    let last = attempts.last().unwrap();
    println!("val loss diff {:.4}, success diff {:.3}", last.val_loss_diff(), last.success_diff());
}
