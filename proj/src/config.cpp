#include "strokekit/config.hpp"

#include <charconv>
#include <cstdint>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "strokekit/error.hpp"

namespace strokekit {
namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    SK_CHECK(ec == std::errc() && p == v.data() + v.size(), ConfigError,
             key << ": not an integer: '" << v << "'");
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    SK_CHECK(ec == std::errc() && p == v.data() + v.size(), ConfigError,
             key << ": not an unsigned integer: '" << v << "'");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    SK_CHECK(ec == std::errc() && p == v.data() + v.size(), ConfigError,
             key << ": not a number: '" << v << "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    SK_CHECK(false, ConfigError, key << ": not a boolean (0/1/true/false): '" << v << "'");
    return false;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::string item;
    std::istringstream is(v);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        SK_CHECK(!item.empty(), ConfigError, key << ": empty list element in '" << v << "'");
        out.push_back(static_cast<int>(parse_int(key, item)));
    }
    SK_CHECK(!out.empty(), ConfigError, key << ": empty list");
    return out;
}

std::string fmt(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    SK_CHECK(ec == std::errc(), ContractError, "float formatting failed");
    return {buf, p};
}

std::string fmt(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

struct Field {
    std::function<void(const std::string&, const std::string&)> set;
    std::function<std::string()> get;
};

using Fields = std::vector<std::pair<std::string, Field>>;

Field f_int(int& ref) {
    return {[&ref](const std::string& k, const std::string& v) {
                ref = static_cast<int>(parse_int(k, v));
            },
            [&ref] { return std::to_string(ref); }};
}

Field f_u64(std::uint64_t& ref) {
    return {[&ref](const std::string& k, const std::string& v) { ref = parse_u64(k, v); },
            [&ref] { return std::to_string(ref); }};
}

Field f_double(double& ref) {
    return {[&ref](const std::string& k, const std::string& v) { ref = parse_double(k, v); },
            [&ref] { return fmt(ref); }};
}

Field f_bool(bool& ref) {
    return {[&ref](const std::string& k, const std::string& v) { ref = parse_bool(k, v); },
            [&ref] { return std::string(ref ? "1" : "0"); }};
}

Field f_ints(std::vector<int>& ref) {
    return {[&ref](const std::string& k, const std::string& v) { ref = parse_int_list(k, v); },
            [&ref] { return fmt(ref); }};
}

// Key order here is the serialization order.
Fields train_fields(TrainConfig& c) {
    return {
        {"model.image_h", f_int(c.model.image_h)},
        {"model.image_w", f_int(c.model.image_w)},
        {"model.stage_widths", f_ints(c.model.stage_widths)},
        {"model.cardinality", f_int(c.model.cardinality)},
        {"model.stem_stride", f_int(c.model.stem_stride)},
        {"model.stage_strides", f_ints(c.model.stage_strides)},
        {"model.embed_dim", f_int(c.model.embed_dim)},
        {"model.num_heads", f_int(c.model.num_heads)},
        {"model.num_encoder_layers", f_int(c.model.num_encoder_layers)},
        {"model.num_decoder_layers", f_int(c.model.num_decoder_layers)},
        {"model.num_queries", f_int(c.model.num_queries)},
        {"model.ppm_bins", f_ints(c.model.ppm_bins)},
        {"model.mlp_hidden_dim", f_int(c.model.mlp_hidden_dim)},
        {"model.head_hidden_dim", f_int(c.model.head_hidden_dim)},
        {"model.seg_width", f_int(c.model.seg_width)},
        {"model.gpsa_locality", f_double(c.model.gpsa_locality)},
        {"augment.flip_prob", f_double(c.augment.flip_prob)},
        {"augment.scale_range", f_double(c.augment.scale_range)},
        {"augment.translate_mm", f_double(c.augment.translate_mm)},
        {"augment.rot_axial_rad", f_double(c.augment.rot_axial_rad)},
        {"augment.rot_other_rad", f_double(c.augment.rot_other_rad)},
        {"augment.min_thickness_mm", f_double(c.augment.min_thickness_mm)},
        {"augment.max_thickness_mm", f_double(c.augment.max_thickness_mm)},
        {"augment.bezier_jitter", f_double(c.augment.bezier_jitter)},
        {"train.augment_enabled", f_bool(c.augment_enabled)},
        {"loss.lp", f_double(c.loss_weights.lp)},
        {"loss.lb", f_double(c.loss_weights.lb)},
        {"loss.lg", f_double(c.loss_weights.lg)},
        {"loss.la", f_double(c.loss_weights.la)},
        {"loss.lf", f_double(c.loss_weights.lf)},
        {"loss.ld", f_double(c.loss_weights.ld)},
        {"loss.rlw", f_bool(c.rlw)},
        {"loss.literal_quantile", f_bool(c.literal_quantile)},
        {"match.cls", f_double(c.match_costs.cls)},
        {"match.l1", f_double(c.match_costs.l1)},
        {"match.giou", f_double(c.match_costs.giou)},
        {"opt.weight_decay", f_double(c.optimizer.weight_decay)},
        {"opt.beta1", f_double(c.optimizer.beta1)},
        {"opt.beta2", f_double(c.optimizer.beta2)},
        {"opt.eps", f_double(c.optimizer.eps)},
        {"schedule.lr_min", f_double(c.schedule.lr_min)},
        {"schedule.lr_max", f_double(c.schedule.lr_max)},
        {"schedule.cycle_epochs", f_int(c.schedule.cycle_epochs)},
        {"schedule.gamma", f_double(c.schedule.gamma)},
        {"train.clip_norm", f_double(c.clip_norm)},
        {"train.swa_last_cycles", f_int(c.swa_last_cycles)},
        {"train.epochs", f_int(c.epochs)},
        {"train.batch_size", f_int(c.batch_size)},
        {"train.threads", f_int(c.threads)},
        {"train.val_interval", f_int(c.val_interval)},
        {"train.seed", f_u64(c.seed)},
    };
}

Fields generate_fields(GenerateSpec& s) {
    return {
        {"subjects", f_int(s.subjects)},
        {"test_fraction", f_double(s.test_fraction)},
        {"folds", f_int(s.folds)},
        {"phantom.width", f_int(s.phantom.width)},
        {"phantom.height", f_int(s.phantom.height)},
        {"phantom.slices", f_int(s.phantom.slices)},
        {"phantom.spacing_x", f_double(s.phantom.spacing[0])},
        {"phantom.spacing_y", f_double(s.phantom.spacing[1])},
        {"phantom.spacing_z", f_double(s.phantom.spacing[2])},
        {"phantom.min_lesions", f_int(s.phantom.min_lesions)},
        {"phantom.max_lesions", f_int(s.phantom.max_lesions)},
        {"phantom.min_radius_mm", f_double(s.phantom.min_radius_mm)},
        {"phantom.max_radius_mm", f_double(s.phantom.max_radius_mm)},
        {"phantom.min_age_minutes", f_double(s.phantom.min_age_minutes)},
        {"phantom.max_age_minutes", f_double(s.phantom.max_age_minutes)},
        {"phantom.multi_age_prob", f_double(s.phantom.multi_age_prob)},
        {"phantom.law_base", f_double(s.phantom.law_base)},
        {"phantom.law_gain", f_double(s.phantom.law_gain)},
        {"phantom.law_mid_log", f_double(s.phantom.law_mid_log)},
        {"phantom.law_scale", f_double(s.phantom.law_scale)},
        {"phantom.edge_base", f_double(s.phantom.edge_base)},
        {"phantom.edge_gain", f_double(s.phantom.edge_gain)},
        {"phantom.noise", f_double(s.phantom.noise)},
        {"phantom.max_place_retries", f_int(s.phantom.max_place_retries)},
    };
}

void apply_text(const Fields& fields, const std::string& text) {
    std::set<std::string> seen;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        SK_CHECK(eq != std::string::npos, ConfigError,
                 "config line " << lineno << ": expected key = value, got '" << line << "'");
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        SK_CHECK(!key.empty() && !value.empty(), ConfigError,
                 "config line " << lineno << ": empty key or value");
        SK_CHECK(seen.insert(key).second, ConfigError,
                 "config line " << lineno << ": duplicate key '" << key << "'");
        bool found = false;
        for (const auto& [name, field] : fields)
            if (name == key) {
                field.set(key, value);
                found = true;
                break;
            }
        SK_CHECK(found, ConfigError, "config line " << lineno << ": unknown key '" << key << "'");
    }
}

std::string render(const Fields& fields) {
    std::string out;
    for (const auto& [name, field] : fields) {
        out += name;
        out += " = ";
        out += field.get();
        out += "\n";
    }
    return out;
}

} // namespace

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    apply_text(train_fields(cfg), text);
    cfg.validate();
    return cfg;
}

std::string serialize_train_config(const TrainConfig& cfg) {
    TrainConfig copy = cfg;
    return render(train_fields(copy));
}

void GenerateSpec::validate() const {
    SK_CHECK(subjects >= 0, ConfigError, "subjects must be >= 0");
    SK_CHECK(test_fraction >= 0 && test_fraction <= 1, ConfigError,
             "test_fraction must lie in [0,1]");
    SK_CHECK(folds >= 1, ConfigError, "folds must be >= 1");
    SK_CHECK(phantom.width >= 1 && phantom.height >= 1 && phantom.slices >= 1, ConfigError,
             "phantom extents must be positive");
    for (double sp : phantom.spacing)
        SK_CHECK(sp > 0, ConfigError, "phantom spacing must be positive");
    SK_CHECK(phantom.min_lesions >= 0 && phantom.max_lesions >= phantom.min_lesions, ConfigError,
             "lesion count range invalid");
    SK_CHECK(phantom.min_radius_mm > 0 && phantom.max_radius_mm >= phantom.min_radius_mm,
             ConfigError, "lesion radius range invalid");
    SK_CHECK(phantom.min_age_minutes > 0 &&
                 phantom.max_age_minutes >= phantom.min_age_minutes,
             ConfigError, "age range invalid");
    SK_CHECK(phantom.multi_age_prob >= 0 && phantom.multi_age_prob <= 1, ConfigError,
             "multi_age_prob must lie in [0,1]");
    SK_CHECK(phantom.noise >= 0, ConfigError, "noise must be >= 0");
    SK_CHECK(phantom.max_place_retries >= 1, ConfigError, "max_place_retries must be >= 1");
}

GenerateSpec parse_generate_spec(const std::string& text) {
    GenerateSpec spec;
    apply_text(generate_fields(spec), text);
    spec.validate();
    return spec;
}

std::string serialize_generate_spec(const GenerateSpec& spec) {
    GenerateSpec copy = spec;
    return render(generate_fields(copy));
}

} // namespace strokekit
