//! A small eager tensor runtime: strided tensors over host and virtual
//! device storage, a dispatcher, reverse-mode autograd, a deterministic
//! asynchronous virtual device with a caching allocator, interop formats,
//! a C plugin ABI and a multi-device fabric.

pub mod alloc;
pub mod autograd;
pub mod bench;
pub mod device;
pub mod dispatch;
pub mod dtype;
pub mod error;
pub mod fabric;
pub mod interop;
pub mod iter;
pub mod nn;
pub mod ops;
pub mod parity;
pub mod plugin;
pub mod storage;
pub mod tensor;
pub mod train;
pub mod vdev;

pub use device::Device;
pub use dtype::DType;
pub use error::{Error, Result};
pub use tensor::Tensor;
