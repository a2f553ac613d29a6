#pragma once

#include <string>

#include "strokekit/phantom.hpp"
#include "strokekit/train.hpp"

namespace strokekit {

// Flat `key = value` text shared by the command-line tools: one key per
// line, `#` comments, blank lines ignored. Unknown or repeated keys are
// rejected. Serialization round-trips every value exactly (shortest
// round-trip float formatting).

TrainConfig parse_train_config(const std::string& text);
std::string serialize_train_config(const TrainConfig& cfg);

// Dataset generation: split layout plus the phantom law parameters.
struct GenerateSpec {
    int subjects = 200;
    double test_fraction = 0.2;
    int folds = 5;
    PhantomSpec phantom;

    void validate() const;
};

GenerateSpec parse_generate_spec(const std::string& text);
std::string serialize_generate_spec(const GenerateSpec& spec);

} // namespace strokekit
