//! Show how the correlation module tracks a moving feature between frames.
//!
//! Two 6x6 single-channel frames contain the same bright spot at different
//! positions. The gated affinity row of the spot's pixel peaks at the spot's
//! location in the adjacent frame.
//!
//! ```text
//! cargo run --example correlation_maps
//! ```

use corrnet::correlation::{affinity, gate, CorrelationConfig, Neighborhood};
use corrnet::tensor::{Tape, Tensor};

fn frame_with_spot(h: usize, w: usize, at: (usize, usize)) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[1, h, w]);
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let y = at.0 as i64 + dy;
            let x = at.1 as i64 + dx;
            if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
                let v = if (dy, dx) == (0, 0) { 2.0 } else { 0.8 };
                t.data_mut()[y as usize * w + x as usize] = v;
            }
        }
    }
    t
}

fn main() -> corrnet::Result<()> {
    let (h, w) = (6, 6);
    let spot_now = (2, 1);
    let spot_next = (3, 4);

    let mut tape = Tape::new();
    let xt = tape.constant(frame_with_spot(h, w, spot_now));
    let xu = tape.constant(frame_with_spot(h, w, spot_next));
    let cfg = CorrelationConfig::new(Neighborhood::Full, 2, h, w)?;
    let raw = affinity(&mut tape, xt, xu, &cfg)?;
    let gated = gate(&mut tape, raw);

    let maps = tape.value(gated);
    let row_base = (spot_now.0 * w + spot_now.1) * h * w;
    println!("gated affinities seen from pixel {spot_now:?} (values in (-0.5, 0.5)):");
    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    for i in 0..h {
        for j in 0..w {
            let v = maps.data()[row_base + i * w + j];
            print!("{:>7.3}", v);
            if v > best.2 {
                best = (i, j, v);
            }
        }
        println!();
    }
    println!();
    println!(
        "peak at ({}, {}) with value {:.3}; the spot moved to {:?}",
        best.0, best.1, best.2, spot_next
    );
    assert_eq!((best.0, best.1), spot_next);
    Ok(())
}
