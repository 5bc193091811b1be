#pragma once

// JSON run configuration unifying model, training and data settings.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "omoe/data.hpp"
#include "omoe/model.hpp"
#include "omoe/training.hpp"

namespace omoe {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::map<std::string, std::filesystem::path> corpora;  // domain -> corpus file
    MixtureConfig mixture;

    /// Model, training and mixture checks; every mixture domain needs a corpus.
    /// With check_paths, corpus files must also exist.
    void validate(bool check_paths) const;
};

/// Unknown keys and wrong value types raise ConfigError. Relative corpus paths
/// resolve against base_dir. Omitted sections keep their defaults.
RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved configuration, defaults included, as pretty-printed JSON.
std::string dump_run_config(const RunConfig& cfg);

CorpusSet load_corpora(const RunConfig& cfg);

}  // namespace omoe
