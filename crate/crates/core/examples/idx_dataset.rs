//! Export a synthetic set to IDX files, load it back through a data spec,
//! and prepare it for the desk model.
//!
//! ```bash
//! cargo run -p rsir --example idx_dataset
//! ```

use rsir::backbone::ModelConfig;
use rsir::harness::Dataset;

fn main() -> rsir::Result<()> {
    let dir = std::env::temp_dir().join("rsir-idx");
    std::fs::create_dir_all(&dir)?;
    let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
    Dataset::load("synthetic:digits:train:100")?.write_idx(&images, &labels)?;

    let spec = format!("idx:{},{}", images.display(), labels.display());
    let mut data = Dataset::load(&spec)?;
    println!(
        "{} images of {}×{}×{}, {} classes",
        data.len(),
        data.channels,
        data.height,
        data.width,
        data.num_classes
    );
    let norm = data.prepare(&ModelConfig::desk(), None)?;
    println!("prepared to {}×{}×{}, channel means {:.4?}", data.channels, data.height, data.width, norm.mean);

    let mut bad = std::fs::read(&images)?;
    bad[2] = 0x0d;
    std::fs::write(dir.join("bad.idx"), bad)?;
    let err = Dataset::load(&format!("idx:{},{}", dir.join("bad.idx").display(), labels.display())).unwrap_err();
    println!("corrupt file: {err}");
    Ok(())
}
