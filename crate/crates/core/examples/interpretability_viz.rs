// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run an erasure, dump the report and render PGM heatmaps.
//!
//! cargo run --example interpretability_viz -- out_dir

use std::path::PathBuf;

use orthoerase::cli;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("orthoerase_viz"));
    let dir = dir.to_string_lossy().into_owned();
    let erase = [
        "orthoerase",
        "erase",
        "a snoopy and a dog",
        "--target",
        "snoopy",
        "--out",
        &dir,
    ];
    let code = cli::run(erase);
    if code != 0 {
        std::process::exit(code.into());
    }
    let code = cli::run(["orthoerase", "viz", &dir, "--features"]);
    std::process::exit(code.into());
}
