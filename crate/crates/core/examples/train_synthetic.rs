//! Fits the tiny detector to a small synthetic set and reports AP@0.5 on
//! the training images.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [steps] [lr]
//! ```

use std::time::Instant;

use ef_tensor::Tensor;
use efficientface::config::Settings;
use efficientface::data::Dataset;
use efficientface::detector::{Detector, Trainer};
use efficientface::eval::average_precision;

fn main() -> efficientface::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let mut settings = Settings::preset("tiny")?;
    settings.train.lr = lr;
    settings.train.crop = false;
    settings.train.flip = false;
    settings.train.epochs = 1;
    let data = Dataset::synthetic(20, settings.train.image_size, 1)?;
    let mut detector = Detector::build(&settings.model, settings.seed)?;
    let mut trainer = Trainer::new(&detector, &settings)?;

    let images = Tensor::stack(&data.samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
    let gts: Vec<_> = data.samples.iter().map(|s| s.gt.clone()).collect();
    let r0 = average_precision(&detector.detect(&images)?, &gts, 0.5)?;
    println!(
        "step     0  AP@0.5 {:.3}  ({} detections, {} faces)",
        r0.ap, r0.num_det, r0.num_gt
    );
    let start = Instant::now();
    let mut done = 0;
    while done < steps {
        let report = trainer.fit(&mut detector, &data, None)?;
        done = trainer.steps();
        if done % 50 == 0 || done >= steps {
            let dets = detector.detect(&images)?;
            let r = average_precision(&dets, &gts, 0.5)?;
            let ap = r.ap;
            let at75 = average_precision(&dets, &gts, 0.75)?.ap;
            println!(
                "  {} detections, {} faces, {} hits, AP@0.75 {at75:.3}",
                r.num_det, r.num_gt, r.true_positives
            );
            println!(
                "step {done:5}  loss {:.4}  AP@0.5 {ap:.3}  lr {:e}  {:.1}s",
                report.epochs.last().map_or(f64::NAN, |e| e.total),
                trainer.schedule.lr(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
