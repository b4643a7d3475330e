//! On-disk formats: the model archive, CIFAR-10 binary batches and the
//! rate configuration.

mod archive;
mod cifar;
mod rates;

pub use archive::{load_model, save_model, BLOB_FILE, MANIFEST_FILE};
pub use cifar::{
    decode_cifar, encode_cifar, load_cifar10, read_cifar_file, write_cifar_file, Normalization,
    Split, CIFAR_RECORD,
};
pub use rates::{load_rates, parse_rates, RateConfig};
