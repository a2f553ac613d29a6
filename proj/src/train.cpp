#include "strokekit/train.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <span>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "strokekit/crc32.hpp"
#include "strokekit/pipeline.hpp"
#include "strokekit/rng.hpp"

namespace fs = std::filesystem;

namespace strokekit {

GradVec grad_zeros(const nn::ParamStore<double>& params) {
    GradVec g;
    g.reserve(params.items().size());
    for (const auto& [name, t] : params.items())
        g.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    return g;
}

OptimState optim_init(const nn::ParamStore<double>& params) {
    OptimState st;
    st.m = grad_zeros(params);
    st.v = grad_zeros(params);
    return st;
}

bool optimizer_step(nn::ParamStore<double>& params, const GradVec& grads, OptimState& st,
                    const AdamWConfig& cfg, double lr) {
    auto& items = params.items();
    SK_CHECK(grads.size() == items.size() && st.m.size() == items.size() &&
                 st.v.size() == items.size(),
             ContractError, "optimizer_step: " << grads.size() << " gradient buffers for "
                                               << items.size() << " parameters");
    for (size_t i = 0; i < grads.size(); ++i) {
        SK_CHECK(grads[i].size() == static_cast<size_t>(items[i].second.numel()), ContractError,
                 "optimizer_step: gradient size mismatch at " << items[i].first);
        for (double g : grads[i])
            if (!std::isfinite(g)) return false;
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    const double shrink = 1.0 - lr * cfg.weight_decay;
    for (size_t i = 0; i < grads.size(); ++i) {
        auto th = items[i].second.raw();
        auto& m = st.m[i];
        auto& v = st.v[i];
        const auto& g = grads[i];
        for (size_t j = 0; j < g.size(); ++j) {
            th[j] *= shrink;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            th[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
        }
    }
    return true;
}

double lr_at(int epoch, const LrSchedule& s) {
    SK_CHECK(epoch >= 0, ContractError, "lr_at: negative epoch " << epoch);
    SK_CHECK(s.cycle_epochs >= 1, ConfigError, "lr_at: cycle_epochs must be >= 1");
    const int c = epoch / s.cycle_epochs;
    const int pos = epoch % s.cycle_epochs;
    const double half = s.cycle_epochs / 2.0;
    const double peak = s.lr_max * std::pow(s.gamma, c);
    // convex combination so the endpoints land exactly on lr_min and peak
    const double f = 1.0 - std::abs(pos - half) / half;
    return s.lr_min * (1.0 - f) + peak * f;
}

double clip_gradients(GradVec& grads, double max_norm) {
    SK_CHECK(max_norm > 0, ConfigError, "clip_gradients: max_norm must be positive");
    double ss = 0;
    for (const auto& g : grads)
        for (double x : g) ss += x * x;
    const double norm = std::sqrt(ss);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& g : grads)
            for (double& x : g) x *= scale;
    }
    return norm;
}

void swa_update(SwaState& st, const nn::ParamStore<double>& params) {
    const auto& items = params.items();
    if (st.avg.empty()) {
        st.avg.reserve(items.size());
        for (const auto& [name, t] : items) st.avg.emplace_back(t.data().begin(), t.data().end());
        st.count = 1;
        return;
    }
    SK_CHECK(st.avg.size() == items.size(), ContractError, "swa_update: parameter count changed");
    st.count += 1;
    const double k = 1.0 / static_cast<double>(st.count);
    for (size_t i = 0; i < items.size(); ++i) {
        auto d = items[i].second.data();
        auto& a = st.avg[i];
        SK_CHECK(a.size() == d.size(), ContractError,
                 "swa_update: shape changed at " << items[i].first);
        for (size_t j = 0; j < a.size(); ++j) a[j] += (d[j] - a[j]) * k;
    }
}

void swa_apply(const SwaState& st, nn::ParamStore<double>& params) {
    SK_CHECK(st.count > 0, ContractError, "swa_apply: no snapshots taken");
    auto& items = params.items();
    SK_CHECK(st.avg.size() == items.size(), ContractError,
             "swa_apply: parameter count mismatch");
    for (size_t i = 0; i < items.size(); ++i) {
        auto raw = items[i].second.raw();
        SK_CHECK(st.avg[i].size() == raw.size(), ContractError,
                 "swa_apply: shape mismatch at " << items[i].first);
        std::copy(st.avg[i].begin(), st.avg[i].end(), raw.begin());
    }
}

void TrainConfig::validate() const {
    model.validate();
    SK_CHECK(epochs >= 1, ConfigError, "epochs must be >= 1");
    SK_CHECK(batch_size >= 1, ConfigError, "batch_size must be >= 1");
    SK_CHECK(threads >= 1, ConfigError, "threads must be >= 1");
    SK_CHECK(val_interval >= 1, ConfigError, "val_interval must be >= 1");
    SK_CHECK(clip_norm > 0, ConfigError, "clip_norm must be positive");
    SK_CHECK(swa_last_cycles >= 1, ConfigError, "swa_last_cycles must be >= 1");
    SK_CHECK(schedule.cycle_epochs >= 1, ConfigError, "cycle_epochs must be >= 1");
    SK_CHECK(schedule.lr_min > 0 && schedule.lr_max >= schedule.lr_min, ConfigError,
             "lr bounds must satisfy 0 < lr_min <= lr_max");
    SK_CHECK(schedule.gamma > 0 && schedule.gamma <= 1, ConfigError,
             "gamma must lie in (0, 1]");
    SK_CHECK(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 &&
                 optimizer.beta2 < 1,
             ConfigError, "betas must lie in [0, 1)");
    SK_CHECK(optimizer.eps > 0, ConfigError, "optimizer eps must be positive");
    SK_CHECK(optimizer.weight_decay >= 0, ConfigError, "weight_decay must be >= 0");
    SK_CHECK(augment.flip_prob >= 0 && augment.flip_prob <= 1, ConfigError,
             "flip_prob must lie in [0, 1]");
    SK_CHECK(augment.min_thickness_mm > 0 &&
                 augment.max_thickness_mm >= augment.min_thickness_mm,
             ConfigError, "thickness range must satisfy 0 < min <= max");
}

namespace {

void put_ints(std::ostream& os, const char* key, const std::vector<int>& v) {
    os << key << "=";
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << "\n";
}

} // namespace

std::uint64_t train_config_hash(const TrainConfig& cfg) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "model.image_h=" << cfg.model.image_h << "\n";
    os << "model.image_w=" << cfg.model.image_w << "\n";
    put_ints(os, "model.stage_widths", cfg.model.stage_widths);
    os << "model.cardinality=" << cfg.model.cardinality << "\n";
    os << "model.stem_stride=" << cfg.model.stem_stride << "\n";
    put_ints(os, "model.stage_strides", cfg.model.stage_strides);
    os << "model.embed_dim=" << cfg.model.embed_dim << "\n";
    os << "model.num_heads=" << cfg.model.num_heads << "\n";
    os << "model.num_encoder_layers=" << cfg.model.num_encoder_layers << "\n";
    os << "model.num_decoder_layers=" << cfg.model.num_decoder_layers << "\n";
    os << "model.num_queries=" << cfg.model.num_queries << "\n";
    put_ints(os, "model.ppm_bins", cfg.model.ppm_bins);
    os << "model.mlp_hidden_dim=" << cfg.model.mlp_hidden_dim << "\n";
    os << "model.head_hidden_dim=" << cfg.model.head_hidden_dim << "\n";
    os << "model.seg_width=" << cfg.model.seg_width << "\n";
    os << "model.gpsa_locality=" << cfg.model.gpsa_locality << "\n";
    os << "augment.flip_prob=" << cfg.augment.flip_prob << "\n";
    os << "augment.scale_range=" << cfg.augment.scale_range << "\n";
    os << "augment.translate_mm=" << cfg.augment.translate_mm << "\n";
    os << "augment.rot_axial_rad=" << cfg.augment.rot_axial_rad << "\n";
    os << "augment.rot_other_rad=" << cfg.augment.rot_other_rad << "\n";
    os << "augment.min_thickness_mm=" << cfg.augment.min_thickness_mm << "\n";
    os << "augment.max_thickness_mm=" << cfg.augment.max_thickness_mm << "\n";
    os << "augment.bezier_jitter=" << cfg.augment.bezier_jitter << "\n";
    os << "train.augment_enabled=" << cfg.augment_enabled << "\n";
    os << "loss.lp=" << cfg.loss_weights.lp << "\n";
    os << "loss.lb=" << cfg.loss_weights.lb << "\n";
    os << "loss.lg=" << cfg.loss_weights.lg << "\n";
    os << "loss.la=" << cfg.loss_weights.la << "\n";
    os << "loss.lf=" << cfg.loss_weights.lf << "\n";
    os << "loss.ld=" << cfg.loss_weights.ld << "\n";
    os << "loss.rlw=" << cfg.rlw << "\n";
    os << "match.cls=" << cfg.match_costs.cls << "\n";
    os << "match.l1=" << cfg.match_costs.l1 << "\n";
    os << "match.giou=" << cfg.match_costs.giou << "\n";
    os << "loss.literal_quantile=" << cfg.literal_quantile << "\n";
    os << "opt.weight_decay=" << cfg.optimizer.weight_decay << "\n";
    os << "opt.beta1=" << cfg.optimizer.beta1 << "\n";
    os << "opt.beta2=" << cfg.optimizer.beta2 << "\n";
    os << "opt.eps=" << cfg.optimizer.eps << "\n";
    os << "schedule.lr_min=" << cfg.schedule.lr_min << "\n";
    os << "schedule.lr_max=" << cfg.schedule.lr_max << "\n";
    os << "schedule.cycle_epochs=" << cfg.schedule.cycle_epochs << "\n";
    os << "schedule.gamma=" << cfg.schedule.gamma << "\n";
    os << "train.clip_norm=" << cfg.clip_norm << "\n";
    os << "train.swa_last_cycles=" << cfg.swa_last_cycles << "\n";
    os << "train.batch_size=" << cfg.batch_size << "\n";
    os << "train.seed=" << cfg.seed << "\n";
    // epochs, val_interval and threads are deliberately excluded: results
    // are thread-count invariant, and a checkpoint stays loadable when a
    // finished run is extended or validated on another cadence
    return Rng::hash_str(os.str());
}

namespace {

[[noreturn]] void load_fail(LoadFailure kind, const std::string& msg) {
    throw LoadError(kind, msg);
}

void append_f64_le(std::vector<unsigned char>& bytes, std::span<const double> vals) {
    for (double v : vals) {
        const std::uint64_t u = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b)
            bytes.push_back(static_cast<unsigned char>((u >> (8 * b)) & 0xFF));
    }
}

double read_f64_le(const unsigned char* p) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(p[b]) << (8 * b);
    return std::bit_cast<double>(u);
}

std::string shape_token(const Shape& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out.empty() ? "1" : out;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::string ckpt_header_line(std::istream& is, const std::string& path) {
    std::string line;
    if (!std::getline(is, line)) load_fail(LoadFailure::BadHeader, path + ": header ends early");
    return line;
}

// "key value" line with a fixed key; the value token is returned raw
std::string ckpt_field(std::istream& is, const std::string& path, const std::string& key) {
    std::istringstream ls(ckpt_header_line(is, path));
    std::string k, v;
    ls >> k >> v;
    if (k != key || v.empty())
        load_fail(LoadFailure::BadHeader, path + ": expected '" + key + "' line");
    return v;
}

std::int64_t parse_i64(const std::string& s, const std::string& path) {
    try {
        size_t pos = 0;
        const std::int64_t v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        load_fail(LoadFailure::BadHeader, path + ": bad integer '" + s + "'");
    }
}

std::uint64_t parse_hex64(const std::string& s, const std::string& path) {
    if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos)
        load_fail(LoadFailure::BadHeader, path + ": bad hex field '" + s + "'");
    return std::stoull(s, nullptr, 16);
}

} // namespace

void save_checkpoint(const std::string& path, const nn::ParamStore<double>& params,
                     const TrainState& state, std::uint64_t config_hash) {
    const auto& items = params.items();
    SK_CHECK(state.opt.m.size() == items.size() && state.opt.v.size() == items.size(),
             ContractError, "save_checkpoint: optimizer state does not match the parameter set");
    const bool with_swa = state.swa.count > 0;
    if (with_swa)
        SK_CHECK(state.swa.avg.size() == items.size(), ContractError,
                 "save_checkpoint: swa state does not match the parameter set");

    std::vector<unsigned char> payload;
    std::ostringstream man;
    auto add = [&](const std::string& name, const Shape& shape, std::span<const double> vals) {
        SK_CHECK(static_cast<std::int64_t>(vals.size()) == shape_numel(shape), ContractError,
                 "save_checkpoint: " << name << " holds " << vals.size() << " values for shape "
                                     << shape_str(shape));
        man << name << " " << shape_token(shape) << " f64 " << payload.size() << "\n";
        append_f64_le(payload, vals);
    };
    for (const auto& [name, t] : items) add(name, t.shape(), t.data());
    for (size_t i = 0; i < items.size(); ++i)
        add("adamw.m/" + items[i].first, items[i].second.shape(), state.opt.m[i]);
    for (size_t i = 0; i < items.size(); ++i)
        add("adamw.v/" + items[i].first, items[i].second.shape(), state.opt.v[i]);
    if (with_swa)
        for (size_t i = 0; i < items.size(); ++i)
            add("swa/" + items[i].first, items[i].second.shape(), state.swa.avg[i]);

    const size_t entries = items.size() * (with_swa ? 4 : 3);
    std::ofstream os(path, std::ios::binary);
    SK_CHECK(os.good(), IoError, "save_checkpoint: cannot open " << path);
    os << "CKPT1\n";
    os << "config " << hex64(config_hash) << "\n";
    os << "epochs_done " << state.epochs_done << "\n";
    os << "opt_step " << state.opt.step << "\n";
    os << "swa_count " << state.swa.count << "\n";
    os << "best_val " << hex64(std::bit_cast<std::uint64_t>(state.best_val)) << "\n";
    os << "tensors " << entries << "\n";
    os << man.str();
    os << "crc32 " << std::hex << std::setw(8) << std::setfill('0')
       << crc32(payload.data(), payload.size()) << std::dec << std::setfill(' ') << "\n";
    os << "data\n";
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
    SK_CHECK(os.good(), IoError, "save_checkpoint: short write to " << path);
}

void load_checkpoint(const std::string& path, nn::ParamStore<double>& params, TrainState& state,
                     std::uint64_t config_hash) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) load_fail(LoadFailure::BadHeader, path + ": cannot open");
    if (ckpt_header_line(is, path) != "CKPT1")
        load_fail(LoadFailure::BadHeader, path + ": bad magic");

    const std::uint64_t stored_hash = parse_hex64(ckpt_field(is, path, "config"), path);
    SK_CHECK(stored_hash == config_hash, ConfigError,
             "load_checkpoint: " << path << " was written under configuration "
                                 << hex64(stored_hash) << ", expected " << hex64(config_hash));

    const std::int64_t epochs_done = parse_i64(ckpt_field(is, path, "epochs_done"), path);
    const std::int64_t opt_step = parse_i64(ckpt_field(is, path, "opt_step"), path);
    const std::int64_t swa_count = parse_i64(ckpt_field(is, path, "swa_count"), path);
    const double best_val =
        std::bit_cast<double>(parse_hex64(ckpt_field(is, path, "best_val"), path));
    const std::int64_t entries = parse_i64(ckpt_field(is, path, "tensors"), path);
    if (epochs_done < 0 || opt_step < 0 || swa_count < 0 || entries < 0)
        load_fail(LoadFailure::BadHeader, path + ": negative counter");

    struct Entry {
        Shape shape;
        size_t offset = 0;
        bool used = false;
    };
    std::unordered_map<std::string, Entry> manifest;
    size_t expect_offset = 0;
    for (std::int64_t i = 0; i < entries; ++i) {
        std::istringstream ls(ckpt_header_line(is, path));
        std::string name, shape_tok, dtype;
        size_t offset = 0;
        ls >> name >> shape_tok >> dtype >> offset;
        if (ls.fail() || dtype != "f64")
            load_fail(LoadFailure::BadHeader, path + ": bad manifest line " + std::to_string(i));
        Entry e;
        e.offset = offset;
        std::istringstream ss(shape_tok);
        std::string dim;
        while (std::getline(ss, dim, ',')) e.shape.push_back(static_cast<int>(parse_i64(dim, path)));
        if (e.shape.empty() || shape_numel(e.shape) <= 0 || offset != expect_offset)
            load_fail(LoadFailure::BadHeader, path + ": inconsistent manifest at " + name);
        expect_offset += static_cast<size_t>(shape_numel(e.shape)) * 8;
        if (!manifest.emplace(name, std::move(e)).second)
            load_fail(LoadFailure::BadHeader, path + ": duplicate tensor " + name);
    }

    std::uint32_t want_crc = 0;
    {
        std::istringstream ls(ckpt_header_line(is, path));
        std::string key;
        ls >> key >> std::hex >> want_crc;
        if (key != "crc32" || ls.fail())
            load_fail(LoadFailure::BadHeader, path + ": bad crc line");
    }
    if (ckpt_header_line(is, path) != "data")
        load_fail(LoadFailure::BadHeader, path + ": missing data marker");

    std::vector<unsigned char> payload(expect_offset);
    is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (static_cast<size_t>(is.gcount()) != payload.size())
        load_fail(LoadFailure::Truncated, path + ": payload holds " + std::to_string(is.gcount()) +
                                              " of " + std::to_string(payload.size()) + " bytes");
    if (crc32(payload.data(), payload.size()) != want_crc)
        load_fail(LoadFailure::ChecksumMismatch, path + ": payload checksum mismatch");

    auto& items = params.items();
    auto fetch = [&](const std::string& name, const Shape& want) -> const Entry& {
        auto it = manifest.find(name);
        SK_CHECK(it != manifest.end(), ConfigError,
                 "load_checkpoint: " << path << " lacks tensor " << name);
        SK_CHECK(it->second.shape == want, ConfigError,
                 "load_checkpoint: " << name << " has shape " << shape_str(it->second.shape)
                                     << ", model expects " << shape_str(want));
        it->second.used = true;
        return it->second;
    };
    auto read_into = [&](const Entry& e, std::span<double> dst) {
        const unsigned char* p = payload.data() + e.offset;
        for (size_t j = 0; j < dst.size(); ++j) dst[j] = read_f64_le(p + j * 8);
    };

    TrainState fresh;
    fresh.epochs_done = epochs_done;
    fresh.opt.step = opt_step;
    fresh.opt.m = grad_zeros(params);
    fresh.opt.v = grad_zeros(params);
    fresh.swa.count = swa_count;
    fresh.best_val = best_val;
    if (swa_count > 0) fresh.swa.avg = grad_zeros(params);

    for (size_t i = 0; i < items.size(); ++i) {
        const auto& name = items[i].first;
        const Shape& shape = items[i].second.shape();
        read_into(fetch(name, shape), items[i].second.raw());
        read_into(fetch("adamw.m/" + name, shape), fresh.opt.m[i]);
        read_into(fetch("adamw.v/" + name, shape), fresh.opt.v[i]);
        if (swa_count > 0) read_into(fetch("swa/" + name, shape), fresh.swa.avg[i]);
    }
    for (const auto& [name, e] : manifest)
        SK_CHECK(e.used, ConfigError,
                 "load_checkpoint: " << path << " carries unexpected tensor " << name);
    state = std::move(fresh);
}

namespace {

struct PreparedVolume {
    Volume vol;
    std::vector<InstanceAnnotation> anns;
};

PreparedVolume prepare_volume(const DatasetRecord& rec, const TrainConfig& cfg,
                              std::int64_t epoch, std::uint64_t vol_idx) {
    if (!cfg.augment_enabled) return {clip_normalize(rec.volume), rec.annotations};
    Rng rng(Rng::derive(cfg.seed, "augment", {static_cast<std::uint64_t>(epoch), vol_idx}));
    auto geo = random_geometric(rec.volume, rec.annotations, cfg.augment, rng);
    const Volume shaped = random_appearance(geo.volume, cfg.augment, rng);
    return {clip_normalize(shaped), std::move(geo.annotations)};
}

struct SampleResult {
    double weighted = 0;
    int lesions = 0;
    TermReport report;
    bool finite = true;
    // (parameter index, gradient of this sample's unscaled weighted loss)
    std::vector<std::pair<size_t, std::vector<double>>> grads;
};

// matching and loss assume finite head outputs; a diverged model is caught
// here instead of inside the assignment search
bool finite_outputs(const Model<double>::Core& core) {
    for (double x : core.lesion_logits.data())
        if (!std::isfinite(x)) return false;
    for (double x : core.boxes.data())
        if (!std::isfinite(x)) return false;
    for (double x : core.ages.data())
        if (!std::isfinite(x)) return false;
    return true;
}

SampleResult run_sample(const Model<double>& model, const PreparedVolume& pv, int slice,
                        const LossWeights& w, const TrainConfig& cfg) {
    const auto& items = model.params().items();
    SampleResult out;
    Tape<double> tape;
    auto input = slice_tensor(pv.vol, slice, cfg.model.image_h, cfg.model.image_w);
    auto core = model.forward_core(input);
    auto labels = slice_labels(pv.anns, pv.vol.width, pv.vol.height, slice, cfg.model.image_h,
                               cfg.model.image_w);
    if (!finite_outputs(core)) {
        out.finite = false;
        out.weighted = std::numeric_limits<double>::quiet_NaN();
        out.lesions = static_cast<int>(labels.size());
        return out;
    }
    auto match = hungarian_match(core.lesion_logits, core.boxes, labels, cfg.match_costs);
    Tensor<double> masks;
    const Tensor<double>* mp = nullptr;
    if (!match.pairs.empty()) {
        masks = model.masks_for(core, match.queries());
        mp = &masks;
    }
    auto sl = combined_loss(core.lesion_logits, core.boxes, core.ages, mp, match, labels, w,
                            cfg.literal_quantile);
    out.weighted = sl.weighted.item();
    out.lesions = sl.lesions;
    out.report = sl.report;
    if (!std::isfinite(out.weighted)) {
        out.finite = false;
        return out;
    }
    tape.backward_no_flush(sl.weighted);
    for (size_t i = 0; i < items.size(); ++i) {
        const auto* buf = tape.find(items[i].second.impl().get());
        if (buf) out.grads.emplace_back(i, *buf);
    }
    return out;
}

// Per-sample results computed on up to cfg.threads workers; `out` keeps the
// batch order, so the later reduction is invariant to the thread count.
void run_batch(const Model<double>& model, const std::vector<PreparedVolume>& prep,
               const std::vector<std::pair<size_t, int>>& batch, const LossWeights& w,
               const TrainConfig& cfg, std::vector<SampleResult>& out) {
    out.assign(batch.size(), {});
    const int threads = std::min<int>(cfg.threads, static_cast<int>(batch.size()));
    if (threads <= 1) {
        for (size_t i = 0; i < batch.size(); ++i)
            out[i] = run_sample(model, prep[batch[i].first], batch[i].second, w, cfg);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    auto work = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= batch.size()) return;
            try {
                out[i] = run_sample(model, prep[batch[i].first], batch[i].second, w, cfg);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

double validation_loss(const Model<double>& model, const std::vector<DatasetRecord>& data,
                       const std::vector<size_t>& val_idx, const TrainConfig& cfg) {
    const LossWeights w{}; // fixed unit weights so runs stay comparable
    double num = 0;
    int lesions = 0;
    for (size_t ri : val_idx) {
        const auto& rec = data[ri];
        const Volume vol = clip_normalize(rec.volume);
        for (int s : lesion_slices(rec.annotations)) {
            auto input = slice_tensor(vol, s, cfg.model.image_h, cfg.model.image_w);
            auto core = model.forward_core(input);
            auto labels = slice_labels(rec.annotations, vol.width, vol.height, s,
                                       cfg.model.image_h, cfg.model.image_w);
            if (!finite_outputs(core)) {
                num += std::numeric_limits<double>::quiet_NaN();
                lesions += static_cast<int>(labels.size());
                continue;
            }
            auto match = hungarian_match(core.lesion_logits, core.boxes, labels, cfg.match_costs);
            Tensor<double> masks;
            const Tensor<double>* mp = nullptr;
            if (!match.pairs.empty()) {
                masks = model.masks_for(core, match.queries());
                mp = &masks;
            }
            auto sl = combined_loss(core.lesion_logits, core.boxes, core.ages, mp, match, labels,
                                    w, cfg.literal_quantile);
            num += sl.weighted.item();
            lesions += sl.lesions;
        }
    }
    return num / std::max(1, lesions);
}

} // namespace

TrainResult train(Model<double>& model, TrainState& state, const TrainConfig& cfg,
                  const std::vector<DatasetRecord>& data, const std::string& out_dir,
                  std::ostream* log) {
    cfg.validate();
    const std::uint64_t chash = train_config_hash(cfg);
    std::vector<size_t> train_idx, val_idx;
    for (size_t i = 0; i < data.size(); ++i)
        (data[i].split == "test" ? val_idx : train_idx).push_back(i);
    SK_CHECK(!train_idx.empty(), InputError, "train: no non-test records");

    TrainResult res;
    if (!out_dir.empty()) fs::create_directories(out_dir);
    const auto ckpt = [&](const char* name) { return (fs::path(out_dir) / name).string(); };

    const int total_cycles =
        (cfg.epochs + cfg.schedule.cycle_epochs - 1) / cfg.schedule.cycle_epochs;
    const int swa_from_cycle = total_cycles - std::min(cfg.swa_last_cycles, total_cycles);

    if (state.opt.m.empty()) state.opt = optim_init(model.params());
    if (log) *log << std::setprecision(17);

    int consecutive_bad = 0;
    std::vector<SampleResult> results;
    GradVec master = grad_zeros(model.params());
    for (std::int64_t epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
        std::vector<PreparedVolume> prep;
        prep.reserve(train_idx.size());
        for (size_t k = 0; k < train_idx.size(); ++k)
            prep.push_back(prepare_volume(data[train_idx[k]], cfg, epoch, k));

        std::vector<std::pair<size_t, int>> samples;
        for (size_t k = 0; k < prep.size(); ++k)
            for (int s : lesion_slices(prep[k].anns)) samples.emplace_back(k, s);
        Rng order(Rng::derive(cfg.seed, "order", {static_cast<std::uint64_t>(epoch)}));
        for (size_t i = samples.size(); i > 1; --i)
            std::swap(samples[i - 1],
                      samples[static_cast<size_t>(order.uniform_int(0, static_cast<int>(i) - 1))]);

        const double lr = lr_at(static_cast<int>(epoch), cfg.schedule);
        EpochRecord erec;
        erec.epoch = static_cast<int>(epoch);
        erec.lr = lr;
        double loss_sum = 0;
        double tsum[6] = {};
        for (size_t b = 0, step = 0; b < samples.size();
             b += static_cast<size_t>(cfg.batch_size), ++step) {
            const size_t e = std::min(samples.size(), b + static_cast<size_t>(cfg.batch_size));
            const std::vector<std::pair<size_t, int>> batch(
                samples.begin() + static_cast<std::ptrdiff_t>(b),
                samples.begin() + static_cast<std::ptrdiff_t>(e));
            LossWeights w = cfg.loss_weights;
            if (cfg.rlw) {
                Rng wr(Rng::derive(cfg.seed, "rlw",
                                   {static_cast<std::uint64_t>(epoch), step}));
                w = rlw_weights(wr);
            }
            run_batch(model, prep, batch, w, cfg, results);

            int lesions = 0;
            double wsum = 0;
            bool finite = true;
            TermReport rep;
            for (const auto& r : results) {
                wsum += r.weighted;
                lesions += r.lesions;
                finite = finite && r.finite;
                rep.ce += r.report.ce;
                rep.l1 += r.report.l1;
                rep.giou += r.report.giou;
                rep.quantile += r.report.quantile;
                rep.focal += r.report.focal;
                rep.dice += r.report.dice;
            }
            const double denom = std::max(1, lesions);
            const double loss = wsum / denom;
            finite = finite && std::isfinite(loss);

            bool stepped = false;
            double gnorm = 0;
            if (finite) {
                for (auto& g : master) std::fill(g.begin(), g.end(), 0.0);
                const double k = 1.0 / denom;
                for (const auto& r : results)
                    for (const auto& [pi, buf] : r.grads) {
                        auto& m = master[pi];
                        for (size_t j = 0; j < buf.size(); ++j) m[j] += k * buf[j];
                    }
                gnorm = clip_gradients(master, cfg.clip_norm);
                stepped = optimizer_step(model.params(), master, state.opt, cfg.optimizer, lr);
            }
            if (log)
                *log << "epoch " << epoch << " step " << step << " loss " << loss << " lr " << lr
                     << " grad_norm " << gnorm << " ce " << rep.ce / denom << " l1 "
                     << rep.l1 / denom << " giou " << rep.giou / denom << " quantile "
                     << rep.quantile / denom << " focal " << rep.focal / denom << " dice "
                     << rep.dice / denom << "\n";

            if (finite && stepped) {
                loss_sum += loss;
                tsum[0] += rep.ce / denom;
                tsum[1] += rep.l1 / denom;
                tsum[2] += rep.giou / denom;
                tsum[3] += rep.quantile / denom;
                tsum[4] += rep.focal / denom;
                tsum[5] += rep.dice / denom;
                ++erec.steps;
                consecutive_bad = 0;
            } else {
                ++erec.skipped;
                ++consecutive_bad;
                if (consecutive_bad >= 3) {
                    state.epochs_done = epoch;
                    if (!out_dir.empty()) {
                        save_checkpoint(ckpt("diverged.ckpt"), model.params(), state, chash);
                        res.diverged_path = ckpt("diverged.ckpt");
                    }
                    res.diverged = true;
                    res.history.push_back(std::move(erec));
                    return res;
                }
            }
        }
        if (erec.steps > 0) {
            erec.loss = loss_sum / erec.steps;
            erec.terms = {tsum[0] / erec.steps, tsum[1] / erec.steps, tsum[2] / erec.steps,
                          tsum[3] / erec.steps, tsum[4] / erec.steps, tsum[5] / erec.steps};
        } else {
            erec.loss = std::numeric_limits<double>::quiet_NaN();
        }

        const int cyc = static_cast<int>(epoch) / cfg.schedule.cycle_epochs;
        if (cyc >= swa_from_cycle) swa_update(state.swa, model.params());

        state.epochs_done = epoch + 1;

        if (!val_idx.empty() &&
            ((epoch + 1) % cfg.val_interval == 0 || epoch + 1 == cfg.epochs)) {
            const double vl = validation_loss(model, data, val_idx, cfg);
            erec.val_loss = vl;
            if (log) *log << "epoch " << epoch << " val_loss " << vl << "\n";
            if (vl < state.best_val) {
                state.best_val = vl;
                if (!out_dir.empty()) {
                    save_checkpoint(ckpt("best.ckpt"), model.params(), state, chash);
                    res.best_path = ckpt("best.ckpt");
                }
            }
        }
        if (!out_dir.empty()) {
            save_checkpoint(ckpt("last.ckpt"), model.params(), state, chash);
            res.last_path = ckpt("last.ckpt");
        }
        res.history.push_back(std::move(erec));
    }

    if (state.swa.count > 0 && !res.history.empty()) {
        swa_apply(state.swa, model.params());
        if (!out_dir.empty()) {
            save_checkpoint(ckpt("swa.ckpt"), model.params(), state, chash);
            res.swa_path = ckpt("swa.ckpt");
        }
    }
    return res;
}

} // namespace strokekit
