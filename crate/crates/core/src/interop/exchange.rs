//! DLPack-style exchange descriptors. Export pins the tensor's storage
//! until the descriptor's deleter runs; import wraps foreign memory in a
//! storage whose drop runs the deleter exactly once.

use std::fmt;

use crate::device::Device;
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::storage::{Storage, VersionCounter};
use crate::tensor::Tensor;
use crate::vdev;

pub const DEVICE_HOST: i32 = 1;
pub const DEVICE_VIRT: i32 = 2;

pub const CODE_INT: u8 = 0;
pub const CODE_UINT: u8 = 1;
pub const CODE_FLOAT: u8 = 2;
pub const CODE_BOOL: u8 = 6;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExchangeDType {
    pub code: u8,
    pub bits: u8,
    pub lanes: u16,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExchangeDevice {
    pub device_type: i32,
    pub device_id: i32,
}

impl ExchangeDType {
    pub fn from_dtype(d: DType) -> ExchangeDType {
        let (code, bits) = match d {
            DType::F32 => (CODE_FLOAT, 32),
            DType::F64 => (CODE_FLOAT, 64),
            DType::I32 => (CODE_INT, 32),
            DType::I64 => (CODE_INT, 64),
            DType::Bool => (CODE_BOOL, 8),
        };
        ExchangeDType { code, bits, lanes: 1 }
    }

    pub fn to_dtype(self) -> Result<DType> {
        match (self.code, self.bits, self.lanes) {
            (CODE_FLOAT, 32, 1) => Ok(DType::F32),
            (CODE_FLOAT, 64, 1) => Ok(DType::F64),
            (CODE_INT, 32, 1) => Ok(DType::I32),
            (CODE_INT, 64, 1) => Ok(DType::I64),
            (CODE_BOOL, 8, 1) => Ok(DType::Bool),
            _ => Err(Error::UnknownExchangeDType { code: self.code, bits: self.bits, lanes: self.lanes }),
        }
    }
}

impl ExchangeDevice {
    pub fn from_device(d: Device) -> ExchangeDevice {
        match d {
            Device::Host => ExchangeDevice { device_type: DEVICE_HOST, device_id: 0 },
            Device::Virt(i) => ExchangeDevice { device_type: DEVICE_VIRT, device_id: i as i32 },
        }
    }

    pub fn to_device(self) -> Result<Device> {
        match self.device_type {
            DEVICE_HOST => Ok(Device::Host),
            DEVICE_VIRT if self.device_id >= 0 => Ok(Device::Virt(self.device_id as usize)),
            DEVICE_VIRT => Err(Error::InvalidDevice(format!("virt:{}", self.device_id))),
            t => Err(Error::UnknownDeviceType(t)),
        }
    }
}

type Deleter = Box<dyn FnOnce() + Send>;

/// Exchange descriptor. Dropping an unconsumed descriptor runs its deleter.
pub struct ExchangeDescriptor {
    pub data: *mut u8,
    pub byte_offset: u64,
    pub device: ExchangeDevice,
    pub dtype: ExchangeDType,
    pub shape: Vec<i64>,
    /// In elements.
    pub strides: Vec<i64>,
    deleter: Option<Deleter>,
}

// The descriptor only carries an address; the owner decides thread rules
// through the deleter, which must be callable from any thread.
unsafe impl Send for ExchangeDescriptor {}

impl fmt::Debug for ExchangeDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExchangeDescriptor")
            .field("data", &self.data)
            .field("byte_offset", &self.byte_offset)
            .field("device", &self.device)
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("strides", &self.strides)
            .finish()
    }
}

impl ExchangeDescriptor {
    /// Describe foreign memory.
    ///
    /// # Safety
    /// `data + byte_offset` must address every element reachable through
    /// `shape`/`strides` until `deleter` runs.
    pub unsafe fn from_raw(
        data: *mut u8,
        byte_offset: u64,
        device: ExchangeDevice,
        dtype: ExchangeDType,
        shape: Vec<i64>,
        strides: Vec<i64>,
        deleter: impl FnOnce() + Send + 'static,
    ) -> ExchangeDescriptor {
        ExchangeDescriptor { data, byte_offset, device, dtype, shape, strides, deleter: Some(Box::new(deleter)) }
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }
}

impl Drop for ExchangeDescriptor {
    fn drop(&mut self) {
        if let Some(d) = self.deleter.take() {
            d();
        }
    }
}

/// Describe `t` without copying. Device work pending on `t` is flushed so
/// a consumer can read the bytes directly.
pub fn export_descriptor(t: &Tensor) -> Result<ExchangeDescriptor> {
    t.synchronize()?;
    let keep = t.storage().clone();
    Ok(ExchangeDescriptor {
        data: t.storage().data_ptr(),
        byte_offset: (t.offset() * t.dtype().size_bytes()) as u64,
        device: ExchangeDevice::from_device(t.device()),
        dtype: ExchangeDType::from_dtype(t.dtype()),
        shape: t.sizes().iter().map(|&s| s as i64).collect(),
        strides: t.strides().iter().map(|&s| s as i64).collect(),
        deleter: Some(Box::new(move || drop(keep))),
    })
}

/// Wrap the described memory in a tensor with a fresh version counter.
pub fn import_descriptor(mut d: ExchangeDescriptor) -> Result<Tensor> {
    let device = d.device.to_device()?;
    let dtype = d.dtype.to_dtype()?;
    if d.shape.len() != d.strides.len() {
        return Err(Error::Format(format!("descriptor has {} dims but {} strides", d.shape.len(), d.strides.len())));
    }
    if d.shape.iter().any(|&s| s < 0) {
        return Err(Error::Format(format!("negative size in {:?}", d.shape)));
    }
    if d.strides.iter().any(|&s| s < 0) {
        return Err(Error::Format(format!("negative strides {:?} are not supported", d.strides)));
    }
    let esize = dtype.size_bytes() as u64;
    if d.byte_offset % esize != 0 {
        return Err(Error::Format(format!("byte offset {} is not a multiple of the element size {esize}", d.byte_offset)));
    }
    let runtime = match device {
        Device::Host => None,
        Device::Virt(i) => {
            let rt = vdev::current_runtime();
            rt.check_device(i)?;
            Some(rt)
        }
    };
    let sizes: Vec<usize> = d.shape.iter().map(|&s| s as usize).collect();
    let strides: Vec<usize> = d.strides.iter().map(|&s| s as usize).collect();
    let offset = (d.byte_offset / esize) as usize;
    let extent = if sizes.contains(&0) { 0 } else { 1 + sizes.iter().zip(&strides).map(|(&n, &s)| (n - 1) * s).sum::<usize>() };
    let size_bytes = (offset + extent) * dtype.size_bytes();
    let deleter = d.deleter.take().expect("descriptor deleter already consumed");
    // SAFETY: the producer guarantees the memory stays valid until the deleter runs.
    let storage = unsafe { Storage::from_external(d.data, size_bytes, device, runtime, deleter) };
    Ok(Tensor::from_parts(storage, offset, sizes, strides, dtype, VersionCounter::new()))
}
