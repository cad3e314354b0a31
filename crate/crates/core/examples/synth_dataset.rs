//! Writes a synthetic face set to disk in the WIDER annotation layout and
//! prints its aspect-ratio histogram.
//!
//! ```text
//! cargo run --example synth_dataset -- out/synth 12
//! ```

use std::path::PathBuf;

use efficientface::data::Dataset;
use efficientface::eval::{aspect_ratio_histogram, default_ratio_edges};

fn main() -> efficientface::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/synth".into()));
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(12);

    let data = Dataset::synthetic(count, 256, 0)?;
    let written = data.save_dir(&dir)?;
    let faces: usize = data.samples.iter().map(|s| s.gt.len()).sum();
    println!(
        "{} images, {faces} faces, {} files in {}",
        data.len(),
        written.len(),
        dir.display()
    );

    let back = Dataset::load_dir(&dir)?;
    assert_eq!(back.len(), data.len());

    let h = aspect_ratio_histogram(data.samples.iter().flat_map(|s| s.gt.iter()), &default_ratio_edges())?;
    println!("\nw/h histogram");
    for (i, c) in h.counts.iter().enumerate() {
        println!(
            "  [{:.2}, {:.2})  {:4}  {}",
            h.edges[i],
            h.edges[i + 1],
            c,
            "#".repeat(*c)
        );
    }
    Ok(())
}
