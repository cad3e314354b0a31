//! Profiles every neck variant and attention depth of the tiny model, the
//! grid the ablation command-line flags select from.
//!
//! ```text
//! cargo run --example ablation_profiles -- 256
//! ```

use efficientface::config::DetectorConfig;
use efficientface::detector::Detector;
use efficientface::eval::profile;
use efficientface::sbifpn::NeckKind;

fn row(label: &str, cfg: &DetectorConfig, size: usize) -> efficientface::Result<()> {
    let d = Detector::build(cfg, 0)?;
    let r = profile(&d, size, size)?;
    let neck = r.section("neck").map_or(0, |s| s.params);
    println!("{label:<18} {:>10} {:>14} {:>10}", r.total_params, r.total_macs, neck);
    Ok(())
}

fn main() -> efficientface::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(256);
    println!("{:<18} {:>10} {:>14} {:>10}", "variant", "params", "MACs", "neck");
    for kind in [NeckKind::SBiFpn, NeckKind::BiFpn, NeckKind::FpnPanet] {
        let cfg = DetectorConfig {
            neck: kind,
            ..DetectorConfig::tiny()
        };
        row(&format!("neck {kind}"), &cfg, size)?;
    }
    for d in 0..=5 {
        let cfg = DetectorConfig {
            attn_depth: d,
            ..DetectorConfig::tiny()
        };
        row(&format!("attention x{d}"), &cfg, size)?;
    }
    let cfg = DetectorConfig {
        rfe: false,
        ..DetectorConfig::tiny()
    };
    row("no rfe", &cfg, size)?;
    Ok(())
}
