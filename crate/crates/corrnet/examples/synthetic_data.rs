//! Render a synthetic trajectory sample as ASCII frames.
//!
//! ```text
//! cargo run --example synthetic_data
//! ```

use corrnet::synth::{frame_centroid, generate_sample, SyntheticConfig, CLASS_NAMES};

fn main() {
    let cfg = SyntheticConfig {
        distractors: 1,
        noise: 0.0,
        ..SyntheticConfig::default()
    };
    let sample = generate_sample::<f64>(&cfg, 4);
    let names: Vec<&str> = sample.label.iter().map(|&g| CLASS_NAMES[g - 1]).collect();
    println!("label: {:?} -> {names:?}", sample.label);
    println!();

    let shape = sample.video.shape();
    let (h, w) = (shape[2], shape[3]);
    let shades = [' ', '.', ':', '*', '#', '@'];
    // One frame per gloss midpoint, plus the centroid track.
    for (g, name) in names.iter().enumerate() {
        let t = g * cfg.frames_per_gloss + cfg.frames_per_gloss / 2;
        println!("frame {t} (mid of gloss {g}: {name}):");
        let base = t * 3 * h * w;
        for row in 0..h {
            let line: String = (0..w)
                .map(|col| {
                    let v = sample.video.data()[base + row * w + col];
                    shades[((v * (shades.len() - 1) as f64).round() as usize).min(shades.len() - 1)]
                })
                .collect();
            println!("  |{line}|");
        }
    }
    println!();
    println!("mover centroid per frame (col, row):");
    for t in 0..shape[0] {
        let (cx, cy) = frame_centroid(&sample.video, t);
        print!("  ({cx:4.1},{cy:4.1})");
        if (t + 1) % cfg.frames_per_gloss == 0 {
            println!();
        }
    }
}
