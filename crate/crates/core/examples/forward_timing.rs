//! Times forward passes of a randomly initialised GPT-2 Small sized model, or
//! of the bundle given as the first argument.
//!
//! `cargo run --release -p steerlab --example forward_timing [BUNDLE]`

use std::time::Instant;

use steerlab::{Capture, ForwardOptions, Model, ModelConfig, Weights};

fn main() -> steerlab::Result<()> {
    let t = Instant::now();
    let weights = match std::env::args().nth(1) {
        Some(dir) => steerlab::weights::load_bundle(dir)?.1,
        None => Weights::random(ModelConfig::gpt2_small(), 0, 0.02)?,
    };
    let d = weights.config.d_model;
    let model = Model::new(weights);
    println!("init {:.2?}", t.elapsed());
    let tokens: Vec<u32> = (0..16).map(|i| 1000 + i * 37).collect();
    for capture in [Capture::Minimal, Capture::LastPosition, Capture::Full] {
        let opts = ForwardOptions::capture(capture);
        model.forward(&tokens, &opts)?;
        let n = 20;
        let t = Instant::now();
        for _ in 0..n {
            model.forward(&tokens, &opts)?;
        }
        println!("{capture:?}: {:.2?} per 16-token forward", t.elapsed() / n);
    }
    let head_rows = vec![0.01f32; 144 * d];
    let t = Instant::now();
    model.weights.project_rows(&head_rows)?;
    println!("project 144 heads: {:.2?}", t.elapsed());
    Ok(())
}
