#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace prism {

enum class Errc {
    // registry
    duplicate_name,
    invalid_name,
    unknown_name,
    plugin_load_error,
    registry_frozen,
    // backbone / peft
    invalid_config,
    dimension_mismatch,
    sequence_too_long,
    empty_batch,
    rank_not_divisible,
    unknown_target,
    // methods
    attempted_training,
    empty_task,
    no_anchors,
    no_prototypes,
    rank_too_small,
    k_too_large,
    // benchmarks
    unknown_benchmark,
    missing_data_path,
    malformed_manifest,
    bad_task_ids,
    io_error,
    data_error,
    // evaluation
    missing_gold,
    duplicate_prediction,
    incomplete_matrix,
    undefined_for_single_task,
    // trainer
    missing_checkpoint,
    config_mismatch,
    // config / cli
    config_type_error,
    missing_config_dir,
    usage_error,
};

std::string_view errc_name(Errc code);

/// Every failure the framework raises carries a machine-checkable code; the
/// CLI maps codes onto process exit statuses.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message);

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] void fail(Errc code, const std::string& message);

}  // namespace prism
