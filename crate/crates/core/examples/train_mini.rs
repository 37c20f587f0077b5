//! Record a small scripted dataset and train fc3 on it.

use gaplab::demo::DemoConfig;
use gaplab::trainer::train;
use gaplab::zoo::Family;

fn main() {
    let cfg = DemoConfig {
        train_episodes: 12,
        iterations: 1500,
        ..Default::default()
    };
    let split = cfg.record().unwrap();
    let out = train(&cfg.train_config(Family::Fc3, 1), &split, |p| {
        if p.iteration % 500 == 0 {
            println!("iteration {:>5}  val loss {:.4}", p.iteration, p.val_loss);
        }
    })
    .unwrap();
    println!("best {:.4} at {}", out.best_val_loss.unwrap(), out.best_iteration.unwrap());
}
