//! Tensor exchange: zero-copy descriptors and the safetensors file format.

pub mod exchange;
pub mod safetensors;

pub use exchange::{export_descriptor, import_descriptor, ExchangeDType, ExchangeDescriptor, ExchangeDevice};
pub use safetensors::{load_safetensors, save_safetensors};
