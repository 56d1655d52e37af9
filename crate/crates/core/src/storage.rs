//! Reference-counted byte storage and the version counter shared by views.

use std::collections::BTreeSet;
use std::fmt;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::alloc::BlockId;
use crate::device::Device;
use crate::error::Result;
use crate::vdev::{Runtime, StreamId};

/// Which allocator produced a storage buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocatorOrigin {
    System,
    Caching,
    /// Memory owned by a foreign producer (exchange-descriptor import).
    External,
}

pub(crate) enum Backing {
    System(#[allow(dead_code)] Vec<u64>),
    Caching { block: BlockId },
    External { deleter: Option<Box<dyn FnOnce() + Send>> },
}

pub(crate) struct StorageInner {
    ptr: NonNull<u8>,
    size_bytes: usize,
    device: Device,
    runtime: Option<Arc<Runtime>>,
    backing: Mutex<Backing>,
    // streams that have touched this buffer; consulted when the block is freed
    uses: Mutex<BTreeSet<StreamId>>,
}

// The raw pointer is only dereferenced by kernels that are ordered by
// stream semantics or run on the calling thread.
unsafe impl Send for StorageInner {}
unsafe impl Sync for StorageInner {}

impl Drop for StorageInner {
    fn drop(&mut self) {
        let backing = std::mem::replace(self.backing.get_mut(), Backing::System(Vec::new()));
        match backing {
            Backing::System(_) => {}
            Backing::Caching { block } => {
                let uses: Vec<StreamId> = self.uses.get_mut().iter().copied().collect();
                if let Some(rt) = &self.runtime {
                    rt.allocator().free_with_uses(block, &uses).expect("caching storage freed twice");
                }
            }
            Backing::External { deleter } => {
                if let Some(d) = deleter {
                    d();
                }
            }
        }
    }
}

/// A device buffer shared by every tensor viewing it.
#[derive(Clone)]
pub struct Storage {
    inner: Arc<StorageInner>,
}

impl fmt::Debug for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Storage")
            .field("ptr", &self.inner.ptr)
            .field("size_bytes", &self.inner.size_bytes)
            .field("device", &self.inner.device)
            .field("origin", &self.origin())
            .finish()
    }
}

impl Storage {
    /// Zero-filled host storage.
    pub fn new_host(size_bytes: usize) -> Storage {
        let words = size_bytes.div_ceil(8);
        let mut buf = vec![0u64; words];
        let ptr = if words == 0 {
            NonNull::dangling()
        } else {
            NonNull::new(buf.as_mut_ptr() as *mut u8).expect("vec pointer is non-null")
        };
        Storage {
            inner: Arc::new(StorageInner {
                ptr,
                size_bytes,
                device: Device::Host,
                runtime: None,
                backing: Mutex::new(Backing::System(buf)),
                uses: Mutex::new(BTreeSet::new()),
            }),
        }
    }

    /// Storage carved out of the runtime's caching allocator on `stream`.
    /// Contents are zeroed in stream order.
    pub fn new_virt(runtime: &Arc<Runtime>, device: usize, size_bytes: usize, stream: StreamId) -> Result<Storage> {
        if size_bytes == 0 {
            return Ok(Storage {
                inner: Arc::new(StorageInner {
                    ptr: NonNull::dangling(),
                    size_bytes: 0,
                    device: Device::Virt(device),
                    runtime: Some(runtime.clone()),
                    backing: Mutex::new(Backing::System(Vec::new())),
                    uses: Mutex::new(BTreeSet::new()),
                }),
            });
        }
        let block = runtime.allocator().allocate(device, size_bytes, stream)?;
        let ptr = NonNull::new(block.ptr).expect("allocator returned null");
        let storage = Storage {
            inner: Arc::new(StorageInner {
                ptr,
                size_bytes,
                device: Device::Virt(device),
                runtime: Some(runtime.clone()),
                backing: Mutex::new(Backing::Caching { block: block.id }),
                uses: Mutex::new(BTreeSet::from([stream])),
            }),
        };
        runtime.memset_zero(device, stream, ptr.as_ptr(), size_bytes)?;
        Ok(storage)
    }

    /// Wrap foreign memory. `deleter` runs exactly once when the last
    /// reference drops.
    ///
    /// # Safety
    /// `ptr` must be valid for `size_bytes` bytes until `deleter` runs.
    pub unsafe fn from_external(
        ptr: *mut u8,
        size_bytes: usize,
        device: Device,
        runtime: Option<Arc<Runtime>>,
        deleter: Box<dyn FnOnce() + Send>,
    ) -> Storage {
        Storage {
            inner: Arc::new(StorageInner {
                ptr: NonNull::new(ptr).unwrap_or(NonNull::dangling()),
                size_bytes,
                device,
                runtime,
                backing: Mutex::new(Backing::External { deleter: Some(deleter) }),
                uses: Mutex::new(BTreeSet::new()),
            }),
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.inner.size_bytes
    }

    pub fn device(&self) -> Device {
        self.inner.device
    }

    pub fn data_ptr(&self) -> *mut u8 {
        self.inner.ptr.as_ptr()
    }

    pub fn runtime(&self) -> Option<&Arc<Runtime>> {
        self.inner.runtime.as_ref()
    }

    pub fn origin(&self) -> AllocatorOrigin {
        match &*self.inner.backing.lock() {
            Backing::System(_) => AllocatorOrigin::System,
            Backing::Caching { .. } => AllocatorOrigin::Caching,
            Backing::External { .. } => AllocatorOrigin::External,
        }
    }

    /// Note that `stream` used this buffer, so a later free is ordered
    /// after that use.
    pub fn record_stream(&self, stream: StreamId) {
        if self.inner.device.is_host() {
            return;
        }
        self.inner.uses.lock().insert(stream);
    }

    pub fn use_count(&self) -> usize {
        Arc::strong_count(&self.inner)
    }

    pub fn ptr_eq(&self, other: &Storage) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Monotone counter of in-place mutations, shared by all views of one
/// storage family.
#[derive(Clone, Default)]
pub struct VersionCounter(Arc<AtomicU64>);

impl VersionCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> u64 {
        self.0.load(Ordering::Acquire)
    }

    /// Returns the new value.
    pub fn bump(&self) -> u64 {
        self.0.fetch_add(1, Ordering::AcqRel) + 1
    }

    pub fn ptr_eq(&self, other: &VersionCounter) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for VersionCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VersionCounter({})", self.current())
    }
}
