/* SPDX-License-Identifier: Apache-2.0
 *
 * C API for the canreid library: a multi-branch person re-identification
 * trainer/evaluator with collaborative attention over part slices.
 *
 * All functions return CAN_OK on success; on failure they return a status
 * code and leave a human-readable message in can_last_error() (thread-local,
 * valid until the next API call on the same thread). Strings returned
 * through char** out-parameters are heap-allocated; release them with
 * can_string_free().
 */

#ifndef CAN_H
#define CAN_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum can_status {
    CAN_OK = 0,
    CAN_ERROR_INVALID_ARGUMENT = 1,
    CAN_ERROR_IO = 2,
    CAN_ERROR_FORMAT = 3,
    CAN_ERROR_NUMERIC = 4,
    CAN_ERROR_INTERNAL = 5
} can_status;

const char* can_version(void);
const char* can_last_error(void);
void can_string_free(char* s);

/* Generate a synthetic identity dataset (blobs + manifest.jsonl) under
 * out_dir. options_json is a JSON object; all keys optional:
 *   {"ids":16, "per_id":8, "h":96, "w":32, "cameras":2, "seed":1, "noise":0.05}
 */
can_status can_synth_dataset(const char* options_json, const char* out_dir);

/* Per-step metric lines (JSON) during training; user data is passed through. */
typedef void (*can_log_callback)(const char* json_line, void* user);

/* Train on the manifest in data_dir (expects data_dir/manifest.jsonl).
 * config_json is the training configuration as JSON text ("{}" for the
 * defaults). Metrics, the resolved config and the final checkpoint are
 * written under out_dir.
 */
can_status can_train(const char* config_json, const char* data_dir, const char* out_dir,
                     can_log_callback log_cb, void* user);

/* Retrieval metrics of a checkpoint on the manifest's query/gallery splits.
 * On success *report_json_out holds {"mAP":..., "cmc":[...], ...}.
 */
can_status can_evaluate(const char* checkpoint_dir, const char* data_dir,
                        char** report_json_out);

/* Finite-difference gradient checks for every differentiable op plus the
 * composite loss on a toy model. *report_json_out holds per-op errors and a
 * "pass" flag against the given tolerance.
 */
can_status can_gradcheck(double tolerance, char** report_json_out);

/* Summary of a checkpoint: config, stream census, parameter count. */
can_status can_inspect(const char* checkpoint_dir, char** summary_json_out);

/* Opaque handle to a loaded model for descriptor extraction. */
typedef struct can_model can_model;

can_status can_model_open(const char* checkpoint_dir, can_model** out);
void can_model_close(can_model* m);

/* Length of the inference descriptor (num_streams * embed_dim). */
int32_t can_model_descriptor_size(const can_model* m);

/* L2-normalized descriptor of one row-major [3,h,w] image already resized
 * and normalized the way the model expects; out must hold
 * can_model_descriptor_size(m) doubles.
 */
can_status can_model_descriptor(can_model* m, const double* chw, int32_t channels,
                                int32_t height, int32_t width, double* out,
                                int32_t out_size);

#ifdef __cplusplus
}
#endif

#endif /* CAN_H */
