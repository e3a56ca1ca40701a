//! Regenerates the golden fixture file from the reference oracles.
//!
//! `rclstr-fixtures [PATH]`; defaults to the core crate's `fixtures/golden.txt`.

use std::path::PathBuf;

use rclstr::fixtures::{build_fixtures, render_fixtures, FIXTURE_SEED};

fn main() -> anyhow::Result<()> {
    let path = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/golden.txt"));
    let text = render_fixtures(FIXTURE_SEED, &build_fixtures(FIXTURE_SEED));
    std::fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}
