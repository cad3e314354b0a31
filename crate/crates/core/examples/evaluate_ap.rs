//! Average precision on the built-in fixtures, with the precision/recall
//! points behind each value.
//!
//! ```text
//! cargo run --example evaluate_ap
//! ```

use efficientface::eval::average_precision;
use efficientface::eval::fixtures::ap_fixtures;

fn main() -> efficientface::Result<()> {
    for f in ap_fixtures() {
        for thr in [0.5, 0.7] {
            let r = average_precision(&f.dets, &f.gts, thr)?;
            println!(
                "{:<14} IoU {thr}: AP {:.4}  ({} hits / {} faces, {} detections)",
                f.name, r.ap, r.true_positives, r.num_gt, r.num_det
            );
        }
        let r = average_precision(&f.dets, &f.gts, 0.5)?;
        for ((rec, prec), (_, env)) in r.curve.points.iter().zip(r.curve.envelope()) {
            println!("    recall {rec:.3}  precision {prec:.3}  envelope {env:.3}");
        }
    }
    Ok(())
}
