//! Parameter and MAC counts of the tiny and full-size detectors.
//!
//! ```text
//! cargo run --example profile_model -- 256
//! ```

use efficientface::config::Settings;
use efficientface::detector::Detector;
use efficientface::eval::profile;

fn main() -> efficientface::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(256);
    for preset in ["tiny", "full"] {
        let settings = Settings::preset(preset)?;
        let detector = Detector::build(&settings.model, settings.seed)?;
        let report = profile(&detector, size, size)?;
        println!("== {preset} ==");
        print!("{}", report.table());
    }
    Ok(())
}
