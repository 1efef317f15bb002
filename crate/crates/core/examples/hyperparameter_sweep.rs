// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shift hyperparameter grid on a related target/non-target pair.

use orthoerase::pipeline::{write_sweep_csv, Pipeline, PipelineConfig, SweepGrid};

fn main() -> orthoerase::Result<()> {
    let pipeline = Pipeline::new(PipelineConfig::default())?;
    let target = pipeline.concept("snoopy")?;
    for cos in [0.65, 0.9] {
        let related = pipeline.related_concept(&target, "mickey", cos)?;
        let grid = SweepGrid {
            s: vec![1.0, 2.0, 4.0],
            ..SweepGrid::default()
        };
        let rows = pipeline.sweep(&target, &related, &grid, 3)?;
        println!("# related cosine {cos}");
        write_sweep_csv(&rows, std::io::stdout().lock())?;
    }
    Ok(())
}
