//! Trains the tiny detector for a few steps, saves a checkpoint, restores
//! it and checks the restored model predicts identically.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! ```

use ef_tensor::init;
use efficientface::config::Settings;
use efficientface::data::Dataset;
use efficientface::detector::{load_checkpoint, save_checkpoint, Detector, Progress, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> efficientface::Result<()> {
    let mut settings = Settings::preset("tiny")?;
    settings.train.max_steps = Some(3);
    let data = Dataset::synthetic(8, settings.train.image_size, 0)?;
    let mut detector = Detector::build(&settings.model, settings.seed)?;
    let mut trainer = Trainer::new(&detector, &settings)?;
    let report = trainer.fit(&mut detector, &data, None)?;
    println!("trained {} steps", report.steps);

    let dir = tempfile_dir();
    let path = dir.join("tiny.ckpt");
    let progress = Progress {
        epoch: report.epochs.len() as u64,
        step: report.steps as u64,
        lr: trainer.schedule.lr(),
    };
    save_checkpoint(&path, &settings, &detector, progress)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let (restored_settings, restored, restored_progress) = load_checkpoint(&path)?;
    assert_eq!(restored_settings, settings);
    assert_eq!(restored_progress, progress);
    let x = init::uniform([1, 3, 128, 128], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let same = detector.predict(&x)? == restored.predict(&x)?;
    println!(
        "{} parameters restored; outputs identical: {same}",
        restored.num_params()
    );
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("efficientface-example");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    dir
}
