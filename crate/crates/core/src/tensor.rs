//! Strided tensor views over shared storage.

use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::autograd::AutogradMeta;
use crate::device::Device;
use crate::dtype::{DType, Element};
use crate::error::{Error, Result};
use crate::storage::{Storage, VersionCounter};
use crate::vdev::{self, MemRange};

pub(crate) struct TensorImpl {
    pub(crate) storage: Storage,
    pub(crate) offset: usize,
    pub(crate) sizes: Vec<usize>,
    pub(crate) strides: Vec<usize>,
    pub(crate) dtype: DType,
    pub(crate) version: VersionCounter,
    pub(crate) autograd: Mutex<Option<AutogradMeta>>,
}

/// A strided view over reference-counted storage.
///
/// Cloning a `Tensor` is cheap and yields the same tensor (same autograd
/// identity); use [`Tensor::alias`] or the view constructors for a new view.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Arc<TensorImpl>,
}

/// Row-major strides for `sizes`, in elements.
pub fn contiguous_strides(sizes: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; sizes.len()];
    let mut acc = 1usize;
    for i in (0..sizes.len()).rev() {
        strides[i] = acc;
        acc = acc.saturating_mul(sizes[i].max(1));
    }
    strides
}

pub fn numel_of(sizes: &[usize]) -> usize {
    sizes.iter().product()
}

fn checked_numel(sizes: &[usize]) -> Result<usize> {
    sizes
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| Error::SizeOverflow(sizes.to_vec()))
}

pub(crate) fn normalize_dim(dim: i64, rank: usize) -> Result<usize> {
    let r = rank as i64;
    let d = if dim < 0 { dim + r } else { dim };
    if d < 0 || d >= r {
        return Err(Error::InvalidDim { dim, rank });
    }
    Ok(d as usize)
}

impl Tensor {
    pub(crate) fn from_parts(storage: Storage, offset: usize, sizes: Vec<usize>, strides: Vec<usize>, dtype: DType, version: VersionCounter) -> Tensor {
        Tensor {
            inner: Arc::new(TensorImpl { storage, offset, sizes, strides, dtype, version, autograd: Mutex::new(None) }),
        }
    }

    /// Fresh zero-filled contiguous tensor.
    pub fn zeros(sizes: &[usize], dtype: DType, device: Device) -> Result<Tensor> {
        make_tensor(sizes, dtype, device)
    }

    pub fn ones(sizes: &[usize], dtype: DType, device: Device) -> Result<Tensor> {
        Tensor::full(sizes, 1.0, dtype, device)
    }

    pub fn full(sizes: &[usize], value: f64, dtype: DType, device: Device) -> Result<Tensor> {
        let t = make_tensor(sizes, dtype, device)?;
        crate::ops::kernels::fill(&t, value)?;
        Ok(t)
    }

    pub fn scalar(value: f64, dtype: DType, device: Device) -> Result<Tensor> {
        Tensor::full(&[], value, dtype, device)
    }

    /// Contiguous tensor holding `data`, placed on `device`.
    pub fn from_vec<T: Element>(data: Vec<T>, sizes: &[usize], device: Device) -> Result<Tensor> {
        let n = checked_numel(sizes)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("{} values for shape {:?}", data.len(), sizes)));
        }
        let host = make_tensor(sizes, T::DTYPE, Device::Host)?;
        if n > 0 {
            // SAFETY: fresh contiguous host storage of exactly n elements.
            unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), host.data_ptr() as *mut T, n) };
        }
        if device.is_host() {
            Ok(host)
        } else {
            host.to_device(device)
        }
    }

    pub fn from_slice<T: Element>(data: &[T], sizes: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(data.to_vec(), sizes, Device::Host)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.inner.sizes
    }

    pub fn strides(&self) -> &[usize] {
        &self.inner.strides
    }

    pub fn offset(&self) -> usize {
        self.inner.offset
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> Device {
        self.inner.storage.device()
    }

    pub fn storage(&self) -> &Storage {
        &self.inner.storage
    }

    pub fn dim(&self) -> usize {
        self.inner.sizes.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.sizes)
    }

    pub fn size(&self, dim: i64) -> Result<usize> {
        Ok(self.inner.sizes[normalize_dim(dim, self.dim())?])
    }

    /// Shared in-place version counter.
    pub fn version_counter(&self) -> &VersionCounter {
        &self.inner.version
    }

    pub fn version(&self) -> u64 {
        self.inner.version.current()
    }

    /// Pointer to the first element of this view.
    pub fn data_ptr(&self) -> *mut u8 {
        // SAFETY: offset is within storage by the bounds invariant.
        unsafe { self.inner.storage.data_ptr().add(self.inner.offset * self.dtype().size_bytes()) }
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn is_contiguous(&self) -> bool {
        is_contiguous(self)
    }

    pub fn bump_version(&self) -> u64 {
        bump_version(self)
    }

    /// Byte interval `[lo, hi)` reachable through this view, relative to the
    /// storage base. `None` when the view is empty.
    pub fn byte_extent(&self) -> Option<(usize, usize)> {
        if self.numel() == 0 {
            return None;
        }
        let es = self.dtype().size_bytes();
        let max_index = self.inner.offset + self.sizes().iter().zip(self.strides()).map(|(&s, &st)| (s - 1) * st).sum::<usize>();
        Some((self.inner.offset * es, (max_index + 1) * es))
    }

    pub(crate) fn mem_range(&self) -> MemRange {
        let device = self.device().virt_index();
        match self.byte_extent() {
            None => MemRange { device, start: self.inner.storage.data_ptr() as usize, len: 0 },
            Some((lo, hi)) => MemRange { device, start: self.inner.storage.data_ptr() as usize + lo, len: hi - lo },
        }
    }

    /// New view sharing storage and version counter. No autograd history.
    pub fn alias(&self) -> Tensor {
        Tensor::from_parts(
            self.inner.storage.clone(),
            self.inner.offset,
            self.inner.sizes.clone(),
            self.inner.strides.clone(),
            self.inner.dtype,
            self.inner.version.clone(),
        )
    }

    /// Same data, cut from the autograd graph.
    pub fn detach(&self) -> Tensor {
        self.alias()
    }

    pub fn as_strided(&self, sizes: &[usize], strides: &[i64], offset: usize) -> Result<Tensor> {
        as_strided(self, sizes, strides, offset)
    }

    /// Swap two dimensions (a view).
    pub fn transpose_view(&self, d0: i64, d1: i64) -> Result<Tensor> {
        let a = normalize_dim(d0, self.dim())?;
        let b = normalize_dim(d1, self.dim())?;
        let mut sizes = self.sizes().to_vec();
        let mut strides = self.strides().to_vec();
        sizes.swap(a, b);
        strides.swap(a, b);
        Ok(Tensor::from_parts(self.inner.storage.clone(), self.offset(), sizes, strides, self.dtype(), self.inner.version.clone()))
    }

    /// Restrict `dim` to `[start, start + len)` (a view).
    pub fn narrow_view(&self, dim: i64, start: usize, len: usize) -> Result<Tensor> {
        let d = normalize_dim(dim, self.dim())?;
        if start + len > self.sizes()[d] {
            return Err(Error::IndexOutOfRange { index: (start + len) as i64, size: self.sizes()[d] });
        }
        let mut sizes = self.sizes().to_vec();
        sizes[d] = len;
        let offset = if len == 0 { self.offset() } else { self.offset() + start * self.strides()[d] };
        Ok(Tensor::from_parts(self.inner.storage.clone(), offset, sizes, self.strides().to_vec(), self.dtype(), self.inner.version.clone()))
    }

    /// Reinterpret a contiguous tensor with a new shape (a view).
    pub fn view(&self, sizes: &[usize]) -> Result<Tensor> {
        if numel_of(sizes) != self.numel() {
            return Err(Error::ShapeMismatch(format!("cannot view {:?} as {:?}", self.sizes(), sizes)));
        }
        if !self.is_contiguous() {
            return Err(Error::ShapeMismatch("view requires a contiguous tensor".into()));
        }
        Ok(Tensor::from_parts(
            self.inner.storage.clone(),
            self.offset(),
            sizes.to_vec(),
            contiguous_strides(sizes),
            self.dtype(),
            self.inner.version.clone(),
        ))
    }

    /// Broadcast to `sizes` with zero strides (a view).
    pub fn expand_view(&self, sizes: &[usize]) -> Result<Tensor> {
        if sizes.len() < self.dim() {
            return Err(Error::ShapeMismatch(format!("cannot expand {:?} to {:?}", self.sizes(), sizes)));
        }
        let lead = sizes.len() - self.dim();
        let mut strides = vec![0; sizes.len()];
        for (i, &s) in sizes.iter().enumerate() {
            if i < lead {
                continue;
            }
            let own = self.sizes()[i - lead];
            if own == s {
                strides[i] = self.strides()[i - lead];
            } else if own != 1 {
                return Err(Error::ShapeMismatch(format!("cannot expand {:?} to {:?}", self.sizes(), sizes)));
            }
        }
        Ok(Tensor::from_parts(self.inner.storage.clone(), self.offset(), sizes.to_vec(), strides, self.dtype(), self.inner.version.clone()))
    }

    /// Block until pending device work touching this tensor has run.
    pub fn synchronize(&self) -> Result<()> {
        if let (Device::Virt(d), Some(rt)) = (self.device(), self.storage().runtime()) {
            rt.synchronize_device(d)?;
        }
        Ok(())
    }

    /// Logical elements in row-major order, converted to `T`'s dtype check.
    pub fn to_vec<T: Element>(&self) -> Result<Vec<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::DTypeMismatch { expected: T::DTYPE, got: self.dtype() });
        }
        self.synchronize()?;
        let mut out = Vec::with_capacity(self.numel());
        let base = self.data_ptr() as *const T;
        for_each_offset(self.sizes(), self.strides(), |off| {
            // SAFETY: off is within the view's bounds.
            out.push(unsafe { *base.add(off) });
        });
        Ok(out)
    }

    /// Elements converted to f64 regardless of dtype.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        Ok(match self.dtype() {
            DType::F32 => self.to_vec::<f32>()?.into_iter().map(|v| v as f64).collect(),
            DType::F64 => self.to_vec::<f64>()?,
            DType::I64 => self.to_vec::<i64>()?.into_iter().map(|v| v as f64).collect(),
            DType::I32 => self.to_vec::<i32>()?.into_iter().map(|v| v as f64).collect(),
            DType::Bool => self.to_vec::<bool>()?.into_iter().map(|v| v as u8 as f64).collect(),
        })
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!("item() on tensor of shape {:?}", self.sizes())));
        }
        Ok(self.to_f64_vec()?[0])
    }

    /// Copy to another device. A same-device call still copies.
    pub fn to_device(&self, device: Device) -> Result<Tensor> {
        let out = make_tensor(self.sizes(), self.dtype(), device)?;
        crate::ops::kernels::copy_into(&out, self)?;
        Ok(out)
    }

    pub fn contiguous(&self) -> Result<Tensor> {
        if self.is_contiguous() {
            return Ok(self.clone());
        }
        let out = make_tensor(self.sizes(), self.dtype(), self.device())?;
        crate::ops::kernels::copy_into(&out, self)?;
        Ok(out)
    }

    /// Copy of this tensor with fresh storage.
    pub fn deep_clone(&self) -> Result<Tensor> {
        self.to_device(self.device())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("sizes", &self.sizes()).field("strides", &self.strides()).field("offset", &self.offset());
        d.field("dtype", &self.dtype()).field("device", &self.device());
        if self.device().is_host() && self.numel() <= 16 {
            if let Ok(v) = self.to_f64_vec() {
                d.field("data", &v);
            }
        }
        d.finish()
    }
}

/// Visit every element offset of a strided layout in row-major order.
pub(crate) fn for_each_offset(sizes: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    if sizes.iter().any(|&s| s == 0) {
        return;
    }
    let nd = sizes.len();
    if nd == 0 {
        f(0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let inner = sizes[nd - 1];
    let inner_stride = strides[nd - 1];
    loop {
        for i in 0..inner {
            f(off + i * inner_stride);
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < sizes[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Zero-filled contiguous tensor on `device`.
pub fn make_tensor(sizes: &[usize], dtype: DType, device: Device) -> Result<Tensor> {
    let n = checked_numel(sizes)?;
    let bytes = n.checked_mul(dtype.size_bytes()).ok_or_else(|| Error::SizeOverflow(sizes.to_vec()))?;
    let storage = match device {
        Device::Host => Storage::new_host(bytes),
        Device::Virt(d) => {
            let rt = vdev::current_runtime();
            rt.check_device(d)?;
            let stream = rt.current_stream(d);
            Storage::new_virt(&rt, d, bytes, stream)?
        }
    };
    Ok(Tensor::from_parts(storage, 0, sizes.to_vec(), contiguous_strides(sizes), dtype, VersionCounter::new()))
}

/// Zero-filled tensor on the same device (and runtime) as `like`.
pub(crate) fn make_like_device(sizes: &[usize], dtype: DType, like: &Tensor) -> Result<Tensor> {
    match (like.device(), like.storage().runtime()) {
        (Device::Virt(_), Some(rt)) => vdev::with_runtime(&rt.clone(), || make_tensor(sizes, dtype, like.device())),
        _ => make_tensor(sizes, dtype, like.device()),
    }
}

/// View of `t`'s storage with explicit geometry. Strides are in elements
/// and must be non-negative.
pub fn as_strided(t: &Tensor, sizes: &[usize], strides: &[i64], offset: usize) -> Result<Tensor> {
    if sizes.len() != strides.len() {
        return Err(Error::RankMismatch { sizes: sizes.len(), strides: strides.len() });
    }
    if let Some(&s) = strides.iter().find(|&&s| s < 0) {
        return Err(Error::NegativeStride(s));
    }
    let strides: Vec<usize> = strides.iter().map(|&s| s as usize).collect();
    let capacity = t.storage().size_bytes() / t.dtype().size_bytes();
    if sizes.iter().all(|&s| s > 0) {
        let max_index = offset + sizes.iter().zip(&strides).map(|(&s, &st)| (s - 1) * st).sum::<usize>();
        if max_index >= capacity {
            return Err(Error::ViewOutOfBounds { max_index, capacity });
        }
    } else if offset > capacity {
        return Err(Error::ViewOutOfBounds { max_index: offset, capacity });
    }
    Ok(Tensor::from_parts(t.storage().clone(), offset, sizes.to_vec(), strides, t.dtype(), t.version_counter().clone()))
}

/// True iff strides are row-major for `sizes`, ignoring size-1 dimensions.
pub fn is_contiguous(t: &Tensor) -> bool {
    let mut expected = 1usize;
    for i in (0..t.dim()).rev() {
        let s = t.sizes()[i];
        if s == 1 {
            continue;
        }
        if s == 0 {
            return true;
        }
        if t.strides()[i] != expected {
            return false;
        }
        expected *= s;
    }
    true
}

/// Record one in-place mutation; returns the new version.
pub fn bump_version(t: &Tensor) -> u64 {
    t.inner.version.bump()
}
