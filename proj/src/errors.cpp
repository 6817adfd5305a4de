#include "prism/errors.hpp"

namespace prism {

std::string_view errc_name(Errc code) {
    switch (code) {
        case Errc::duplicate_name: return "DuplicateName";
        case Errc::invalid_name: return "InvalidName";
        case Errc::unknown_name: return "UnknownName";
        case Errc::plugin_load_error: return "PluginLoadError";
        case Errc::registry_frozen: return "RegistryFrozen";
        case Errc::invalid_config: return "InvalidConfig";
        case Errc::dimension_mismatch: return "DimensionMismatch";
        case Errc::sequence_too_long: return "SequenceTooLong";
        case Errc::empty_batch: return "EmptyBatch";
        case Errc::rank_not_divisible: return "RankNotDivisible";
        case Errc::unknown_target: return "UnknownTarget";
        case Errc::attempted_training: return "AttemptedTraining";
        case Errc::empty_task: return "EmptyTask";
        case Errc::no_anchors: return "NoAnchors";
        case Errc::no_prototypes: return "NoPrototypes";
        case Errc::rank_too_small: return "RankTooSmall";
        case Errc::k_too_large: return "KTooLarge";
        case Errc::unknown_benchmark: return "UnknownBenchmark";
        case Errc::missing_data_path: return "MissingDataPath";
        case Errc::malformed_manifest: return "MalformedManifest";
        case Errc::bad_task_ids: return "BadTaskIds";
        case Errc::io_error: return "IoError";
        case Errc::data_error: return "DataError";
        case Errc::missing_gold: return "MissingGold";
        case Errc::duplicate_prediction: return "DuplicatePrediction";
        case Errc::incomplete_matrix: return "IncompleteMatrix";
        case Errc::undefined_for_single_task: return "UndefinedForSingleTask";
        case Errc::missing_checkpoint: return "MissingCheckpoint";
        case Errc::config_mismatch: return "ConfigMismatch";
        case Errc::config_type_error: return "ConfigTypeError";
        case Errc::missing_config_dir: return "MissingConfigDir";
        case Errc::usage_error: return "UsageError";
    }
    return "Unknown";
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

void fail(Errc code, const std::string& message) { throw Error(code, message); }

}  // namespace prism
