// SPDX-License-Identifier: MIT OR Apache-2.0

//! The sigmoid shift factor and its effect on a single value vector.

use orthoerase::eraser::{erase_single, ShiftConfig, ShiftMode, ValueKind, ValueMatrix};
use orthoerase::linalg::{self, Mat};

fn main() -> orthoerase::Result<()> {
    let cfg = ShiftConfig::default();
    println!("s={} p={} epsilon={}", cfg.s, cfg.p, cfg.epsilon);
    for cos in [0.0, 0.5, 0.65, 0.8, 0.9, 0.93, 0.95, 1.0] {
        println!("cos={cos:.2} delta={:.6e}", cfg.factor_at(cos));
    }

    // prompt token at a chosen angle to the target token
    let target = ValueMatrix::new(
        Mat::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]])?,
        ValueKind::TargetModified,
    );
    for cos in [0.65_f64, 0.93, 0.99] {
        let v = vec![cos, (1.0 - cos * cos).sqrt()];
        let values = ValueMatrix::new(
            Mat::from_rows(&[vec![1.0, 1.0], v.clone()])?,
            ValueKind::Original,
        );
        for mode in [ShiftMode::Off, ShiftMode::Adaptive] {
            let r = erase_single(&values, &target, &cfg, mode)?;
            let left = linalg::dot(r.row(1), target.row(1));
            println!("cos={cos} mode={mode:?} remaining_along_target={left:+.6}");
        }
    }
    Ok(())
}
