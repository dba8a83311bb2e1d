#pragma once

#include <string>

#include "eunet/data_io.hpp"
#include "eunet/harness.hpp"
#include "eunet/models.hpp"
#include "eunet/uncertainty.hpp"

namespace eunet {

// Flat key=value run configuration shared by every CLI command. One `seed`
// key drives model init, data generation, and training shuffles so a run is
// fully pinned by its resolved config file.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SyntheticConfig data;
    UncertaintyConfig uncert;
    int folds = 5;
    int val_fold = 0;

    void set_seed(uint64_t s);
    uint64_t seed() const { return model.seed; }

    // key=value text with every key present; feeding it back reproduces the run
    std::string serialize() const;

    // apply one key; throws ContractViolation naming unknown keys / bad values
    void apply(const std::string& key, const std::string& value);
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

} // namespace eunet
