// SPDX-License-Identifier: MIT OR Apache-2.0

//! Erase one concept from a prompt and print what each layer removed.
//!
//! cargo run --example single_concept -- "a painting by van gogh" "van gogh"

use orthoerase::pipeline::{Pipeline, PipelineConfig};

fn main() -> orthoerase::Result<()> {
    let mut args = std::env::args().skip(1);
    let prompt = args
        .next()
        .unwrap_or_else(|| "a snoopy on the beach".into());
    let target = args.next().unwrap_or_else(|| "snoopy".into());

    let pipeline = Pipeline::new(PipelineConfig::default())?;
    let out = pipeline.run(&prompt, &[&target])?;
    let report = &out.report;

    println!("prompt={:?} target={:?}", report.prompt, target);
    let last_step = pipeline.config().steps - 1;
    for c in report.components.iter().filter(|c| c.step == last_step) {
        let norms = c.norms();
        let (tok, max) =
            norms.iter().enumerate().fold(
                (0, 0.0),
                |acc, (j, &n)| if n > acc.1 { (j, n) } else { acc },
            );
        println!("layer {} strongest token {tok} norm {max:.6}", c.layer);
    }
    for f in &report.concepts {
        println!(
            "{} max_cos={:.4} engaged={}",
            f.label, f.max_cosine, f.engaged
        );
    }
    println!("cs_drop={:.6e} fid={:.6e}", report.cs_drop(), report.fid);
    Ok(())
}
