//! Dataset discovery inside a data root.

use std::fs;

use bacon_core::data::{load_mnist_dir, Split};

#[test]
fn mnist_files_found_in_nested_directory() {
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let root = tempfile::tempdir().unwrap();
    let raw = root.path().join("MNIST/raw");
    fs::create_dir_all(&raw).unwrap();
    fs::copy(fixtures.join("tiny-images.idx3-ubyte.gz"), raw.join("train-images-idx3-ubyte.gz")).unwrap();
    fs::copy(fixtures.join("tiny-labels.idx1-ubyte"), raw.join("train-labels-idx1-ubyte")).unwrap();
    fs::copy(fixtures.join("tiny-images.idx3-ubyte"), raw.join("t10k-images.idx3-ubyte")).unwrap();
    fs::copy(fixtures.join("tiny-labels.idx1-ubyte"), raw.join("t10k-labels.idx1-ubyte")).unwrap();
    let (train, test) = load_mnist_dir(root.path()).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(train.image_shape(), [1, 4, 5]);
    assert_eq!(test.split(), Split::Test);
    assert_eq!(train.split(), Split::Train);
    assert_eq!(train.images(), test.images());
}

#[test]
fn missing_files_name_the_file() {
    let root = tempfile::tempdir().unwrap();
    let err = load_mnist_dir(root.path()).unwrap_err().to_string();
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
}
