//! Pixel-flip saliency of a briefly trained fc3 on a few validation views.

use gaplab::analysis::saliency::saliency_batch;
use gaplab::datapipe::{eligible, view_at, PipelineConfig};
use gaplab::demo::DemoConfig;
use gaplab::trainer::train;
use gaplab::zoo::Family;

fn main() {
    let cfg = DemoConfig {
        train_episodes: 8,
        iterations: 300,
        ..Default::default()
    };
    let split = cfg.record().unwrap();
    let net = train(&cfg.train_config(Family::Fc3, 1), &split, |_| {}).unwrap().network;
    let pc = PipelineConfig::new(cfg.input_class);
    let ep = &split.validation[0];
    let views: Vec<_> = eligible(ep, &pc).into_iter().step_by(60).map(|i| view_at(ep, i, &pc).unwrap()).collect();
    let (maps, summary) = saliency_batch(&net, &views, &views, "fc3").unwrap();
    for (k, m) in maps.iter().enumerate() {
        std::fs::write(format!("saliency_{k}.png"), m.to_frame().to_png().unwrap()).unwrap();
    }
    println!("{summary:?}");
}
