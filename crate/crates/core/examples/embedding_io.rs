// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenize, encode, preprocess a target and round-trip it through AVDE.

use orthoerase::avde;
use orthoerase::tokens::{preprocess_target, tokenize, Provenance, TextEncoder};

fn main() -> orthoerase::Result<()> {
    let tokens = tokenize("Van Gogh", 8)?;
    println!("words={:?}", tokens.words());
    println!(
        "ids={:?}",
        tokens.ids().iter().map(|t| t.0).collect::<Vec<_>>()
    );
    println!(
        "last_subject={:?} eot_start={}",
        tokens.last_subject(),
        tokens.eot_start()
    );

    let enc = TextEncoder::new(0, 16)?;
    let emb = enc.encode(&tokens)?.with_provenance(Provenance::TargetRaw);
    let pre = preprocess_target(&emb, &tokens)?;
    println!(
        "distinct rows raw={} preprocessed={}",
        emb.distinct_rows(),
        pre.distinct_rows()
    );

    let bytes = avde::encode(pre.matrix());
    let back = avde::decode(&bytes)?;
    let same = back
        .as_slice()
        .iter()
        .zip(pre.matrix().as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("avde bytes={} bit_identical={same}", bytes.len());
    Ok(())
}
