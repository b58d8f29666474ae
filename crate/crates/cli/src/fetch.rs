//! Downloads the four gzipped MNIST IDX files, checks the published
//! decompressed sizes and writes them atomically.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use sgdscope::data::{MNIST_TEST_IMAGES, MNIST_TEST_LABELS, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS};

use crate::output::write_atomic;
use crate::CliError;

pub const DEFAULT_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

/// File names with their decompressed sizes in bytes.
pub const MNIST_FILES: [(&str, usize); 4] = [
    (MNIST_TRAIN_IMAGES, 47_040_016),
    (MNIST_TRAIN_LABELS, 60_008),
    (MNIST_TEST_IMAGES, 7_840_016),
    (MNIST_TEST_LABELS, 10_008),
];

/// Reads `<base><name>.gz`. A base without a URL scheme is a local directory.
fn open(base: &str, name: &str) -> Result<Box<dyn Read>, CliError> {
    let fail = |e: String| CliError::Dataset(format!("fetching {name}.gz from {base}: {e}"));
    if base.starts_with("http://") || base.starts_with("https://") {
        let url = format!("{}/{name}.gz", base.trim_end_matches('/'));
        let resp = ureq::get(&url).call().map_err(|e| fail(e.to_string()))?;
        Ok(Box::new(resp.into_body().into_reader()))
    } else {
        let dir = base.strip_prefix("file://").unwrap_or(base);
        let f = std::fs::File::open(Path::new(dir).join(format!("{name}.gz"))).map_err(|e| fail(e.to_string()))?;
        Ok(Box::new(f))
    }
}

/// Fetches every file into `out`. All four are downloaded and verified
/// before any of them is written.
pub fn fetch_mnist(base: &str, out: &Path) -> Result<(), CliError> {
    let mut files = Vec::with_capacity(MNIST_FILES.len());
    for (name, size) in MNIST_FILES {
        let mut bytes = Vec::with_capacity(size);
        GzDecoder::new(open(base, name)?)
            .read_to_end(&mut bytes)
            .map_err(|e| CliError::Dataset(format!("decompressing {name}.gz: {e}")))?;
        if bytes.len() != size {
            return Err(CliError::Dataset(format!(
                "{name}: {} bytes after decompression, expected {size}",
                bytes.len()
            )));
        }
        files.push((name, bytes));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Run(format!("creating {}: {e}", out.display())))?;
    for (name, bytes) in files {
        write_atomic(&out.join(name), &bytes)?;
    }
    Ok(())
}
