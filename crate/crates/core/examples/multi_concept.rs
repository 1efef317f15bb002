// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cumulative erasure of many synthetic concepts.
//!
//! Targets and probe prompts are built from reserved axis tokens, so every
//! probe prompt is orthogonal to every target in value space.

use orthoerase::pipeline::{write_scenario_csv, Pipeline, PipelineConfig};

fn main() -> orthoerase::Result<()> {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(10);
    let cfg = PipelineConfig {
        token_length: 16,
        layers: 2,
        steps: 2,
        ..PipelineConfig::default()
    };
    let pipeline = Pipeline::new(cfg)?;
    let targets = (0..n)
        .map(|i| pipeline.concept(&format!("axis{i}")))
        .collect::<orthoerase::Result<Vec<_>>>()?;
    let prompts = vec![
        pipeline.concept("axis0")?,
        pipeline.concept(&format!("axis{} axis{}", n + 1, n + 2))?,
    ];
    let rows = pipeline.scenario_multi(&prompts, &targets, 3)?;
    write_scenario_csv(&rows, std::io::stdout().lock())?;

    // a repeated concept has nothing left to add
    let mut plan = pipeline.plan(&targets[..1])?;
    match pipeline.extend_plan(&mut plan, &targets[0]) {
        Err(e) => eprintln!("duplicate rejected: {e}"),
        Ok(()) => eprintln!("duplicate accepted"),
    }
    Ok(())
}
