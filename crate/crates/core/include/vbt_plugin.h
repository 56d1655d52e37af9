/* Plugin ABI for the vbt tensor runtime.
 *
 * A plugin is a shared library exporting
 *
 *   uint32_t vbt_plugin_abi_version(void);   returns VBT_ABI_ENCODE(major, minor)
 *   int32_t  vbt_plugin_init(const vbt_host_api* api, uint32_t host_major, uint32_t host_minor);
 *
 * The host refuses plugins whose major version differs from its own. The
 * init function registers operators through `api` and returns 0; any other
 * return value unregisters everything it registered. Host functions never
 * unwind; they return a vbt_status. Slots are append-only: a plugin built
 * against minor N may use every slot up to and including minor N.
 */
#ifndef VBT_PLUGIN_H
#define VBT_PLUGIN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define VBT_ABI_MAJOR 1
#define VBT_ABI_MINOR 1
#define VBT_ABI_ENCODE(major, minor) ((((uint32_t)(major)) << 16) | ((uint32_t)(minor) & 0xffffu))

typedef int32_t vbt_status;
#define VBT_OK 0
#define VBT_ERR_INVALID_ARGUMENT 1
#define VBT_ERR_INVALID_HANDLE 2
#define VBT_ERR_OVERLAP 3
#define VBT_ERR_DTYPE 4
#define VBT_ERR_DEVICE 5
#define VBT_ERR_SHAPE 6
#define VBT_ERR_OUT_OF_MEMORY 7
#define VBT_ERR_DUPLICATE 8
#define VBT_ERR_NOT_FOUND 9
#define VBT_ERR_INTERNAL 10

/* exchange device type codes */
#define VBT_DEVICE_HOST 1
#define VBT_DEVICE_VIRT 2

/* exchange dtype codes */
#define VBT_DTYPE_INT 0
#define VBT_DTYPE_UINT 1
#define VBT_DTYPE_FLOAT 2
#define VBT_DTYPE_BOOL 6

/* register_op device_keys bits */
#define VBT_KEY_HOST 1u
#define VBT_KEY_VIRT 2u

/* iter_build flags */
#define VBT_ITER_ALLOW_INPLACE 1u

/* call argument kinds */
#define VBT_ARG_TENSOR 0
#define VBT_ARG_INT 1
#define VBT_ARG_FLOAT 2
#define VBT_ARG_BOOL 3
#define VBT_ARG_OTHER 4

typedef struct vbt_dtype {
    uint8_t code;
    uint8_t bits;
    uint16_t lanes;
} vbt_dtype;

typedef struct vbt_device {
    int32_t device_type;
    int32_t device_id;
} vbt_device;

typedef struct vbt_tensor_s* vbt_tensor;
typedef struct vbt_call_s* vbt_call;
typedef struct vbt_iter_s* vbt_iter;

/* Operator kernel. Read arguments and set outputs through the call handle. */
typedef vbt_status (*vbt_kernel_fn)(vbt_call call, void* user);

/* Called once per element with one address per iterator operand. */
typedef void (*vbt_element_fn)(char** ptrs, void* ctx);

typedef struct vbt_host_api {
    uint32_t abi_major;
    uint32_t abi_minor;
    uint64_t struct_size;

    /* minor 0 */
    /* output 0 may alias input `inplace_input` (pass -1 for none) */
    vbt_status (*register_op)(const char* name, int32_t num_inputs, int32_t num_outputs, vbt_kernel_fn kernel, void* user,
                              uint32_t device_keys, int32_t inplace_input);
    int32_t (*tensor_ndim)(vbt_tensor t);
    vbt_status (*tensor_sizes)(vbt_tensor t, int64_t* out);
    vbt_status (*tensor_strides)(vbt_tensor t, int64_t* out);
    vbt_status (*tensor_dtype)(vbt_tensor t, vbt_dtype* out);
    vbt_status (*tensor_device)(vbt_tensor t, vbt_device* out);
    vbt_status (*tensor_data)(vbt_tensor t, void** out);
    /* operands[0..num_outputs) are outputs */
    vbt_status (*iter_build)(const vbt_tensor* operands, int32_t num_operands, int32_t num_outputs, uint32_t flags, vbt_iter* out);
    vbt_status (*iter_common_shape)(vbt_iter it, int64_t* out, int32_t* ndim);
    vbt_status (*iter_for_each)(vbt_iter it, vbt_element_fn fn, void* ctx);
    vbt_status (*iter_free)(vbt_iter it);
    vbt_status (*alloc)(int32_t device, uint64_t bytes, int64_t stream, void** out);
    vbt_status (*dealloc)(void* ptr);
    void (*report_error)(int32_t code, const char* message);
    int32_t (*call_num_args)(vbt_call call);
    int32_t (*call_arg_kind)(vbt_call call, int32_t index);
    vbt_status (*call_arg_tensor)(vbt_call call, int32_t index, vbt_tensor* out);
    vbt_status (*call_arg_double)(vbt_call call, int32_t index, double* out);
    vbt_status (*call_arg_int)(vbt_call call, int32_t index, int64_t* out);
    vbt_status (*call_set_output)(vbt_call call, int32_t index, vbt_tensor t);
    /* new zero-filled contiguous tensor; release with tensor_release */
    vbt_status (*tensor_new)(const int64_t* sizes, int32_t ndim, vbt_dtype dtype, vbt_device device, vbt_tensor* out);
    vbt_status (*tensor_release)(vbt_tensor t);

    /* minor 1 */
    vbt_status (*tensor_numel)(vbt_tensor t, int64_t* out);
} vbt_host_api;

typedef uint32_t (*vbt_plugin_abi_version_fn)(void);
typedef int32_t (*vbt_plugin_init_fn)(const vbt_host_api* api, uint32_t host_major, uint32_t host_minor);

#ifdef __cplusplus
}
#endif

#endif
