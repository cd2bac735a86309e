// Reading MNIST-style IDX files, plain or gzip-compressed. Set
// `MNIST_DIR` to also load the real test split.

use std::io::Write;

use ctxdrop::harness::{load_idx_dataset, load_mnist, IMAGE_MAGIC, LABEL_MAGIC};
use ctxdrop::Result;
use flate2::write::GzEncoder;

pub fn run_example() -> Result<()> {
    let dir = tempfile::tempdir()?;
    // Two 2x3 images and their labels, big-endian headers.
    let mut images = Vec::new();
    for v in [IMAGE_MAGIC, 2, 2, 3] {
        images.extend(v.to_be_bytes());
    }
    images.extend([0u8, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255]);
    let mut labels = Vec::new();
    for v in [LABEL_MAGIC, 2] {
        labels.extend(v.to_be_bytes());
    }
    labels.extend([7u8, 3]);

    let img_path = dir.path().join("images.idx.gz");
    let mut gz = GzEncoder::new(std::fs::File::create(&img_path)?, flate2::Compression::default());
    gz.write_all(&images)?;
    gz.finish()?;
    let lbl_path = dir.path().join("labels.idx");
    std::fs::write(&lbl_path, &labels)?;

    let d = load_idx_dataset(&img_path, &lbl_path)?;
    println!("{} records of {} pixels, labels {:?}", d.len(), d.dim(), d.y);
    println!("first image scaled to [0, 1]: {:?}", d.x.row(0));

    // A corrupted label is reported with its byte offset.
    labels[9] = 12;
    std::fs::write(&lbl_path, &labels)?;
    println!("bad label: {}", load_idx_dataset(&img_path, &lbl_path).unwrap_err());

    if let Some(mnist) = std::env::var_os("MNIST_DIR") {
        let (train, test) = load_mnist(std::path::Path::new(&mnist))?;
        println!("MNIST: {} train, {} test records", train.len(), test.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
