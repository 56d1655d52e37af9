//! Import-only API parity gate. The overlay namespace is a set of dotted
//! symbol paths; a manifest lists paths that must be present. Only
//! presence is checked.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::dispatch;
use crate::error::{Error, Result};

macro_rules! symbols {
    ($($path:literal => $item:expr),* $(,)?) => {
        fn static_symbols() -> Vec<&'static str> {
            $( let _ = $item; )*
            vec![$($path),*]
        }
    };
}

use crate::{alloc, autograd, bench, fabric, interop, nn, ops, plugin, train, vdev};
use crate::{tensor::Tensor, DType, Device};

symbols! {
    "vbt.Tensor" => std::marker::PhantomData::<Tensor>,
    "vbt.zeros" => Tensor::zeros,
    "vbt.ones" => Tensor::ones,
    "vbt.full" => Tensor::full,
    "vbt.tensor" => Tensor::from_vec::<f64>,
    "vbt.empty_strided" => crate::tensor::as_strided,
    "vbt.float32" => DType::F32,
    "vbt.float64" => DType::F64,
    "vbt.int32" => DType::I32,
    "vbt.int64" => DType::I64,
    "vbt.bool" => DType::Bool,
    "vbt.device" => std::marker::PhantomData::<Device>,
    "vbt.no_grad" => autograd::no_grad,
    "vbt.enable_grad" => autograd::enable_grad,
    "vbt.is_grad_enabled" => autograd::is_grad_enabled,
    "vbt.set_grad_enabled" => autograd::set_grad_enabled,
    "vbt.autograd.backward" => autograd::backward,
    "vbt.autograd.grad" => autograd::grad,
    "vbt.Tensor.backward" => Tensor::backward,
    "vbt.Tensor.grad" => Tensor::grad,
    "vbt.Tensor.requires_grad_" => Tensor::set_requires_grad,
    "vbt.Tensor.detach" => Tensor::detach,
    "vbt.Tensor.contiguous" => Tensor::contiguous,
    "vbt.Tensor.is_contiguous" => Tensor::is_contiguous,
    "vbt.Tensor.view" => Tensor::view,
    "vbt.Tensor.expand" => Tensor::expand_view,
    "vbt.Tensor.narrow" => Tensor::narrow_view,
    "vbt.Tensor.as_strided" => Tensor::as_strided,
    "vbt.Tensor.size" => Tensor::size,
    "vbt.Tensor.stride" => Tensor::strides,
    "vbt.Tensor.numel" => Tensor::numel,
    "vbt.Tensor.dim" => Tensor::dim,
    "vbt.Tensor.item" => Tensor::item,
    "vbt.Tensor.to" => Tensor::to_device,
    "vbt.Tensor.clone" => Tensor::deep_clone,
    "vbt.Tensor.data_ptr" => Tensor::data_ptr,
    "vbt.Tensor.record_stream" => crate::storage::Storage::record_stream,
    "vbt.cuda.synchronize" => vdev::Runtime::synchronize_all,
    "vbt.cuda.Stream" => vdev::Runtime::create_stream,
    "vbt.cuda.stream" => vdev::Runtime::stream_guard,
    "vbt.cuda.current_stream" => vdev::Runtime::current_stream,
    "vbt.cuda.Event" => vdev::Runtime::event_create,
    "vbt.cuda.Event.record" => vdev::Runtime::event_record,
    "vbt.cuda.Event.wait" => vdev::Runtime::event_wait,
    "vbt.cuda.Event.query" => vdev::Runtime::event_query,
    "vbt.cuda.Event.synchronize" => vdev::Runtime::event_synchronize,
    "vbt.cuda.CUDAGraph" => std::marker::PhantomData::<vdev::CapturedGraph>,
    "vbt.cuda.graph_pool_handle" => alloc::CachingAllocator::graph_pool_create,
    "vbt.cuda.memory_stats" => alloc::CachingAllocator::memory_stats,
    "vbt.cuda.memory_snapshot" => alloc::CachingAllocator::memory_snapshot,
    "vbt.cuda.empty_cache" => alloc::CachingAllocator::empty_cache,
    "vbt.cuda.set_per_process_memory_fraction" => alloc::CachingAllocator::set_per_process_memory_fraction,
    "vbt.cuda.device_count" => vdev::Runtime::num_devices,
    "vbt.utils.dlpack.to_dlpack" => interop::export_descriptor,
    "vbt.utils.dlpack.from_dlpack" => interop::import_descriptor,
    "vbt.safetensors.save" => interop::safetensors::serialize_map,
    "vbt.safetensors.load" => interop::safetensors::deserialize,
    "vbt.safetensors.save_file" => |p: &Path, m: &interop::safetensors::TensorMap| interop::save_safetensors(p, m.iter().map(|(k, t)| (k.as_str(), t)), &Default::default()),
    "vbt.safetensors.load_file" => |p: &Path| interop::load_safetensors(p),
    "vbt.ops.load_library" => |p: &Path| plugin::load_plugin(p),
    "vbt.distributed.all_reduce" => fabric::Fabric::ring_allreduce,
    "vbt.nn.Linear" => std::marker::PhantomData::<nn::Linear>,
    "vbt.nn.LayerNorm" => std::marker::PhantomData::<nn::LayerNorm>,
    "vbt.optim.Adam" => std::marker::PhantomData::<nn::Adam>,
    "vbt.nn.functional.softmax" => ops::softmax,
    "vbt.nn.functional.log_softmax" => ops::log_softmax,
    "vbt.nn.functional.relu" => ops::relu,
    "vbt.nn.functional.layer_norm" => ops::layer_norm,
    "vbt.nn.functional.cross_entropy" => ops::cross_entropy,
    "vbt.nn.functional.embedding" => ops::embedding,
    "vbt.nn.functional.scaled_dot_product_attention" => ops::attention,
    "vbt.bench" => bench::run,
    "vbt.train.reversal" => std::marker::PhantomData::<train::TrainConfig>,
}

/// Every symbol the overlay exposes: the static surface plus `vbt.ops.<op>`
/// for registered `vt::` operators and `vbt.ops.<ns>.<op>` for the rest.
pub fn overlay_symbols() -> BTreeSet<String> {
    let mut s: BTreeSet<String> = static_symbols().into_iter().map(String::from).collect();
    for name in dispatch::registry().op_names() {
        match name.split_once("::") {
            Some(("vt", op)) => s.insert(format!("vbt.ops.{op}")),
            Some((ns, op)) => s.insert(format!("vbt.ops.{ns}.{op}")),
            None => false,
        };
    }
    s
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct ParityReport {
    pub checked: usize,
    pub present: Vec<String>,
    pub missing: Vec<String>,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(!self.passed())
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<String>> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let arr = v.as_array().ok_or_else(|| Error::Other("parity manifest must be a JSON list of strings".into()))?;
    arr.iter()
        .map(|e| e.as_str().map(String::from).ok_or_else(|| Error::Other(format!("parity manifest entry {e} is not a string"))))
        .collect()
}

pub fn check_symbols(wanted: &[String]) -> ParityReport {
    let have = overlay_symbols();
    let (present, missing) = wanted.iter().cloned().partition(|s| have.contains(s));
    ParityReport { checked: wanted.len(), present, missing }
}

pub fn check_parity(manifest: impl AsRef<Path>) -> Result<ParityReport> {
    let text = std::fs::read_to_string(manifest)?;
    Ok(check_symbols(&parse_manifest(&text)?))
}

/// The manifest shipped with the crate.
pub fn shipped_manifest_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("parity/manifest.json")
}
