//! Scratch probe: toy CAM alignment scan over seeds.

use sshlab::explain;
use sshlab::rng::mix2;
use sshlab::tinycnn::{self, train::TrainConfig, Architecture};

fn main() {
    let a: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let b: u64 = std::env::args().nth(2).unwrap().parse().unwrap();
    let cells: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let raw_side = 2 * cells - 7;
    for seed in a..b {
        let train_ds = explain::make_toy_dataset(500, cells, seed).unwrap();
        let val_ds = explain::make_toy_dataset(100, cells, mix2(seed, 1)).unwrap();
        let test_ds = explain::make_toy_dataset(100, cells, mix2(seed, 2)).unwrap();
        let model = tinycnn::init_model(Architecture::for_cells(cells).unwrap(), seed);
        let outcome = tinycnn::train::train(
            model,
            &tinycnn::to_examples(&train_ds),
            &tinycnn::to_examples(&val_ds),
            &TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let (_, train_acc) =
            tinycnn::evaluate(&outcome.model, &tinycnn::to_examples(&train_ds)).unwrap();
        let targets = explain::toy_target_pixels(cells);
        let mut mean = 0.0;
        let mut n = 0usize;
        let mut ratio_sum = 0.0;
        for s in test_ds.samples.iter().filter(|s| s.label == 1) {
            let map = explain::cam(&outcome.model, &s.pixels, 1).unwrap();
            mean += explain::cam_peak_alignment(&map, &targets);
            n += 1;
            let tape = tinycnn::forward(&outcome.model, &s.pixels).unwrap();
            let raw = explain::cam_raw(&outcome.model, &tape, 1);
            let top: f64 = raw[0..raw_side].iter().cloned().fold(0.0, f64::max);
            let bot: f64 = raw[(raw_side - 1) * raw_side..].iter().cloned().fold(0.0, f64::max);
            let (hi, lo) = if top > bot { (top, bot) } else { (bot, top) };
            ratio_sum += if lo > 0.0 { hi / lo } else { f64::INFINITY };
        }
        println!(
            "seed {seed} acc {train_acc:.4} align {:.4} ratio {:.2}",
            mean / n as f64,
            ratio_sum / n as f64
        );
    }
}
