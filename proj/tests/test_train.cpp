#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "strokekit/error.hpp"
#include "strokekit/phantom.hpp"
#include "strokekit/pipeline.hpp"
#include "strokekit/rng.hpp"
#include "strokekit/train.hpp"

namespace fs = std::filesystem;
using strokekit::AdamWConfig;
using strokekit::clip_gradients;
using strokekit::ConfigError;
using strokekit::ContractError;
using strokekit::DatasetRecord;
using strokekit::generate_phantom;
using strokekit::GradVec;
using strokekit::grad_zeros;
using strokekit::InputError;
using strokekit::lesion_slices;
using strokekit::LoadError;
using strokekit::LoadFailure;
using strokekit::load_checkpoint;
using strokekit::lr_at;
using strokekit::LrSchedule;
using strokekit::Model;
using strokekit::ModelConfig;
using strokekit::optim_init;
using strokekit::optimizer_step;
using strokekit::OptimState;
using strokekit::PhantomSpec;
using strokekit::Rng;
using strokekit::save_checkpoint;
using strokekit::SliceMask;
using strokekit::slice_labels;
using strokekit::slice_tensor;
using strokekit::SwaState;
using strokekit::swa_apply;
using strokekit::swa_update;
using strokekit::Tensor;
using strokekit::tight_box;
using strokekit::train;
using strokekit::train_config_hash;
using strokekit::TrainConfig;
using strokekit::TrainState;
using strokekit::Volume;

namespace {

fs::path temp_dir(const std::string& tag) {
    const auto p = fs::temp_directory_path() / ("strokekit_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream os(p, std::ios::binary);
    REQUIRE(os.good());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// small enough that a full forward/backward runs in milliseconds
ModelConfig tiny_model() {
    ModelConfig m;
    m.image_h = 32;
    m.image_w = 32;
    m.stage_widths = {4, 4, 8, 8};
    m.cardinality = 2;
    m.stem_stride = 2;
    m.embed_dim = 8;
    m.num_heads = 2;
    m.num_encoder_layers = 1;
    m.num_decoder_layers = 1;
    m.num_queries = 3;
    m.ppm_bins = {1, 2};
    m.mlp_hidden_dim = 16;
    m.head_hidden_dim = 8;
    m.seg_width = 4;
    return m;
}

TrainConfig tiny_cfg(std::uint64_t seed) {
    TrainConfig c;
    c.model = tiny_model();
    c.augment.translate_mm = 4; // keep lesions inside the tiny frame
    c.augment.max_thickness_mm = 2;
    c.epochs = 2;
    c.batch_size = 4;
    c.threads = 1;
    c.val_interval = 1;
    c.schedule.cycle_epochs = 2;
    c.swa_last_cycles = 1;
    c.seed = seed;
    return c;
}

std::vector<DatasetRecord> tiny_dataset(int n_test, int n_train, std::uint64_t seed) {
    PhantomSpec spec;
    spec.width = 32;
    spec.height = 32;
    spec.slices = 8;
    spec.min_lesions = 1;
    spec.max_lesions = 2;
    spec.min_radius_mm = 2;
    spec.max_radius_mm = 3;
    std::vector<DatasetRecord> recs;
    for (int i = 0; i < n_test + n_train; ++i) {
        Rng rng(Rng::derive(seed, "tiny", {static_cast<std::uint64_t>(i)}));
        auto ph = generate_phantom(spec, rng);
        DatasetRecord r;
        r.subject = i;
        r.split = i < n_test ? "test" : "fold0";
        r.volume = std::move(ph.volume);
        r.annotations = std::move(ph.annotations);
        recs.push_back(std::move(r));
    }
    return recs;
}

bool params_equal(const Model<double>& a, const Model<double>& b) {
    const auto& ia = a.params().items();
    const auto& ib = b.params().items();
    if (ia.size() != ib.size()) return false;
    for (size_t i = 0; i < ia.size(); ++i) {
        if (ia[i].first != ib[i].first) return false;
        auto da = ia[i].second.data();
        auto db = ib[i].second.data();
        if (da.size() != db.size()) return false;
        for (size_t j = 0; j < da.size(); ++j)
            if (da[j] != db[j]) return false;
    }
    return true;
}

} // namespace

TEST_CASE("slice tensor reproduces and resamples volume planes") {
    Volume vol;
    vol.width = 4;
    vol.height = 4;
    vol.slices = 2;
    vol.data.resize(32);
    for (int s = 0; s < 2; ++s)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) vol.at(s, y, x) = static_cast<float>(s * 100 + y * 4 + x);

    // matching extents come through exactly
    auto t = slice_tensor(vol, 1, 4, 4);
    REQUIRE(t.shape() == strokekit::Shape{1, 4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(t.at(0, y, x) == static_cast<double>(vol.at(1, y, x)));

    // a constant plane stays constant under upsampling (taps sum to one)
    for (auto& v : vol.data) v = 3.25f;
    auto up = slice_tensor(vol, 0, 8, 8);
    for (double v : up.data()) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));

    CHECK_THROWS_AS(slice_tensor(vol, 2, 4, 4), InputError);
}

TEST_CASE("slice labels rebuild masks and boxes on the model grid") {
    // one instance occupying rows 1-2, cols 2-3 of a 4x4 plane on slice 1
    strokekit::InstanceAnnotation ann;
    ann.id = 1;
    ann.age_minutes = 100;
    ann.age_log = std::log(100.0);
    SliceMask sm;
    sm.slice = 1;
    sm.runs = {{6, 2}, {10, 2}};
    std::vector<std::uint8_t> plane(16, 0);
    for (auto [s, l] : sm.runs)
        for (int i = 0; i < l; ++i) plane[static_cast<size_t>(s + i)] = 1;
    sm.box = tight_box(plane, 4, 4);
    ann.slices.push_back(sm);

    auto labels = slice_labels({ann}, 4, 4, 1, 8, 8);
    REQUIRE(labels.size() == 1);
    CHECK(labels[0].age == ann.age_log);
    // nearest upsampling doubles every voxel; recompute the box from the
    // decoded mask to confirm self-consistency
    std::vector<std::uint8_t> up(64, 0);
    const auto md = labels[0].mask.data();
    int on = 0;
    for (size_t i = 0; i < up.size(); ++i) {
        up[i] = md[i] > 0.5 ? 1 : 0;
        on += up[i];
    }
    CHECK(on == 16);
    const auto box = tight_box(up, 8, 8);
    for (int k = 0; k < 4; ++k) CHECK(labels[0].box[k] == box[k]);

    // absent slice gives no labels
    CHECK(slice_labels({ann}, 4, 4, 0, 8, 8).empty());

    // slice listing is sorted and unique
    strokekit::InstanceAnnotation ann2 = ann;
    ann2.slices[0].slice = 0;
    auto ls = lesion_slices({ann, ann2, ann});
    CHECK(ls == std::vector<int>{0, 1});
}

TEST_CASE("cyclical schedule matches its closed form") {
    const LrSchedule s;
    for (int e = 0; e < 200; ++e) {
        const int c = e / s.cycle_epochs;
        const int pos = e % s.cycle_epochs;
        const double half = s.cycle_epochs / 2.0;
        const double peak = s.lr_max * std::pow(s.gamma, c);
        const double f = 1.0 - std::abs(pos - half) / half;
        const double want = s.lr_min * (1.0 - f) + peak * f;
        REQUIRE(lr_at(e, s) == want);
    }
    // exact anchor points: the floor at cycle boundaries, undecayed and
    // once-decayed peaks at the cycle midpoints
    CHECK(lr_at(0, s) == 1e-6);
    CHECK(lr_at(10, s) == 1e-6);
    CHECK(lr_at(5, s) == 1e-2);
    CHECK(lr_at(15, s) == 1e-2 * 0.92);
    CHECK(lr_at(25, s) == 1e-2 * 0.92 * 0.92);
    // triangular symmetry within a cycle
    CHECK(lr_at(3, s) == lr_at(7, s));

    LrSchedule odd = s;
    odd.cycle_epochs = 5;
    CHECK(lr_at(2, odd) == lr_at(3, odd));

    CHECK_THROWS_AS(lr_at(-1, s), ContractError);
    LrSchedule bad = s;
    bad.cycle_epochs = 0;
    CHECK_THROWS_AS(lr_at(0, bad), ConfigError);
}

TEST_CASE("adamw decoupled decay and moment recurrence") {
    const AdamWConfig cfg;

    SUBCASE("zero gradients leave only the decay") {
        strokekit::nn::ParamStore<double> ps(0);
        ps.values("w", {2}, {1.0, -2.0});
        auto st = optim_init(ps);
        auto g = grad_zeros(ps);
        AdamWConfig c = cfg;
        c.weight_decay = 0.1;
        REQUIRE(optimizer_step(ps, g, st, c, 0.5));
        CHECK(ps.items()[0].second.data()[0] == 1.0 * (1.0 - 0.5 * 0.1));
        CHECK(ps.items()[0].second.data()[1] == -2.0 * (1.0 - 0.5 * 0.1));
        CHECK(st.step == 1);
        CHECK(st.m[0][0] == 0.0);
        CHECK(st.v[0][1] == 0.0);
    }

    SUBCASE("first step collapses to the sign-magnitude form") {
        strokekit::nn::ParamStore<double> ps(0);
        ps.values("w", {2}, {1.0, -2.0});
        auto st = optim_init(ps);
        GradVec g{{0.3, -0.7}};
        AdamWConfig c = cfg;
        c.weight_decay = 0.0;
        REQUIRE(optimizer_step(ps, g, st, c, 1e-3));
        // m-hat = g and v-hat = g^2 exactly after one step, so the update is
        // lr * g / (|g| + eps)
        const double w0 = 1.0 - 1e-3 * 0.3 / (std::sqrt(0.3 * 0.3) + c.eps);
        const double w1 = -2.0 + 1e-3 * 0.7 / (std::sqrt(0.7 * 0.7) + c.eps);
        CHECK(ps.items()[0].second.data()[0] == doctest::Approx(w0).epsilon(1e-13));
        CHECK(ps.items()[0].second.data()[1] == doctest::Approx(w1).epsilon(1e-13));
    }

    SUBCASE("three steps reproduce the hand recurrence exactly") {
        strokekit::nn::ParamStore<double> ps(0);
        ps.values("w", {1}, {0.8});
        auto st = optim_init(ps);
        AdamWConfig c = cfg;
        c.weight_decay = 0.01;
        const double lr = 0.05;
        const double gs[3] = {0.4, -0.2, 0.1};
        double th = 0.8, m = 0, v = 0;
        for (int t = 1; t <= 3; ++t) {
            GradVec g{{gs[t - 1]}};
            REQUIRE(optimizer_step(ps, g, st, c, lr));
            const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
            th *= 1.0 - lr * c.weight_decay;
            m = c.beta1 * m + (1.0 - c.beta1) * gs[t - 1];
            v = c.beta2 * v + (1.0 - c.beta2) * gs[t - 1] * gs[t - 1];
            th -= lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
            REQUIRE(ps.items()[0].second.data()[0] == th);
        }
        CHECK(st.step == 3);
    }

    SUBCASE("hundred steps track an independent scalar reference") {
        strokekit::nn::ParamStore<double> ps(0);
        ps.values("w", {1}, {1.5});
        auto st = optim_init(ps);
        double th = 1.5, m = 0, v = 0;
        for (int t = 1; t <= 100; ++t) {
            const double g = std::sin(0.3 * t) * std::cos(0.05 * t * t);
            GradVec gv{{g}};
            REQUIRE(optimizer_step(ps, gv, st, cfg, 1e-2));
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            const double mhat = m / (1.0 - std::pow(cfg.beta1, t));
            const double vhat = v / (1.0 - std::pow(cfg.beta2, t));
            th = th * (1.0 - 1e-2 * cfg.weight_decay) - 1e-2 * mhat / (std::sqrt(vhat) + cfg.eps);
            REQUIRE(std::abs(ps.items()[0].second.data()[0] - th) <= 1e-12);
        }
    }

    SUBCASE("non-finite gradients leave everything untouched") {
        strokekit::nn::ParamStore<double> ps(0);
        ps.values("w", {2}, {1.0, -2.0});
        auto st = optim_init(ps);
        GradVec warm{{0.1, 0.2}};
        REQUIRE(optimizer_step(ps, warm, st, cfg, 1e-3));
        const double w0 = ps.items()[0].second.data()[0];
        const double w1 = ps.items()[0].second.data()[1];
        const double m0 = st.m[0][0], v1 = st.v[0][1];

        GradVec bad{{0.1, std::numeric_limits<double>::quiet_NaN()}};
        CHECK_FALSE(optimizer_step(ps, bad, st, cfg, 1e-3));
        GradVec worse{{std::numeric_limits<double>::infinity(), 0.0}};
        CHECK_FALSE(optimizer_step(ps, worse, st, cfg, 1e-3));
        CHECK(ps.items()[0].second.data()[0] == w0);
        CHECK(ps.items()[0].second.data()[1] == w1);
        CHECK(st.m[0][0] == m0);
        CHECK(st.v[0][1] == v1);
        CHECK(st.step == 1);
    }

    SUBCASE("mismatched buffers are rejected") {
        strokekit::nn::ParamStore<double> ps(0);
        ps.values("w", {2}, {1.0, -2.0});
        auto st = optim_init(ps);
        GradVec wrong_count;
        CHECK_THROWS_AS(optimizer_step(ps, wrong_count, st, cfg, 1e-3), ContractError);
        GradVec wrong_size{{0.1}};
        CHECK_THROWS_AS(optimizer_step(ps, wrong_size, st, cfg, 1e-3), ContractError);
    }
}

TEST_CASE("gradient clipping caps the global norm") {
    GradVec small{{0.03, 0.04}};
    const GradVec before = small;
    CHECK(clip_gradients(small, 0.1) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(small[0][0] == before[0][0]); // below the cap nothing moves
    CHECK(small[0][1] == before[0][1]);

    GradVec big{{0.6, 0.8}};
    CHECK(clip_gradients(big, 0.1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(big[0][0] == doctest::Approx(0.06).epsilon(1e-12));
    CHECK(big[0][1] == doctest::Approx(0.08).epsilon(1e-12));
    CHECK(std::sqrt(big[0][0] * big[0][0] + big[0][1] * big[0][1]) ==
          doctest::Approx(0.1).epsilon(1e-9));

    GradVec multi{{3.0, 0.0}, {4.0}};
    CHECK(clip_gradients(multi, 1.0) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(multi[0][0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(multi[1][0] == doctest::Approx(0.8).epsilon(1e-12));

    GradVec none;
    CHECK(clip_gradients(none, 1.0) == 0.0);
    CHECK_THROWS_AS(clip_gradients(none, 0.0), ConfigError);
}

TEST_CASE("swa running mean") {
    strokekit::nn::ParamStore<double> ps(0);
    ps.values("w", {3}, {1.0, 2.0, 3.0});

    SwaState st;
    CHECK_THROWS_AS(swa_apply(st, ps), ContractError);

    swa_update(st, ps);
    CHECK(st.count == 1);
    for (int j = 0; j < 3; ++j) CHECK(st.avg[0][static_cast<size_t>(j)] == ps.items()[0].second.data()[j]);

    auto raw = ps.items()[0].second.raw();
    raw[0] = 2.0;
    raw[1] = 4.0;
    raw[2] = 6.0;
    swa_update(st, ps);
    CHECK(st.count == 2);
    CHECK(st.avg[0][0] == 1.5);
    CHECK(st.avg[0][1] == 3.0);
    CHECK(st.avg[0][2] == 4.5);

    // repeated identical snapshots are a fixed point
    SwaState fixed;
    for (int k = 0; k < 4; ++k) swa_update(fixed, ps);
    CHECK(fixed.count == 4);
    for (int j = 0; j < 3; ++j) CHECK(fixed.avg[0][static_cast<size_t>(j)] == raw[j]);

    // many snapshots agree with the naive mean
    SwaState many;
    double naive[3] = {};
    for (int k = 0; k < 10; ++k) {
        for (int j = 0; j < 3; ++j) {
            raw[j] = std::sin(0.7 * k + j);
            naive[j] += raw[j];
        }
        swa_update(many, ps);
    }
    for (int j = 0; j < 3; ++j)
        CHECK(many.avg[0][static_cast<size_t>(j)] ==
              doctest::Approx(naive[j] / 10.0).epsilon(1e-12));

    swa_apply(many, ps);
    for (int j = 0; j < 3; ++j) CHECK(ps.items()[0].second.data()[j] == many.avg[0][static_cast<size_t>(j)]);
}

TEST_CASE("config hash tracks semantics and ignores execution knobs") {
    const TrainConfig a = tiny_cfg(5);
    TrainConfig b = tiny_cfg(5);
    CHECK(train_config_hash(a) == train_config_hash(b));
    b.threads = 7;
    b.epochs = 50;
    b.val_interval = 3;
    CHECK(train_config_hash(a) == train_config_hash(b));
    b = tiny_cfg(5);
    b.seed = 6;
    CHECK(train_config_hash(a) != train_config_hash(b));
    b = tiny_cfg(5);
    b.schedule.lr_max = 2e-2;
    CHECK(train_config_hash(a) != train_config_hash(b));
    b = tiny_cfg(5);
    b.model.embed_dim = 12;
    CHECK(train_config_hash(a) != train_config_hash(b));
}

TEST_CASE("checkpoint round trip and failure kinds") {
    const auto dir = temp_dir("ckpt");
    const std::uint64_t hash = train_config_hash(tiny_cfg(3));

    Model<double> a(tiny_model(), 1);
    TrainState sa;
    sa.opt = optim_init(a.params());
    sa.opt.step = 42;
    sa.epochs_done = 7;
    sa.best_val = 0.125;
    for (size_t i = 0; i < sa.opt.m.size(); ++i)
        for (size_t j = 0; j < sa.opt.m[i].size(); ++j) {
            sa.opt.m[i][j] = std::sin(0.1 * static_cast<double>(i) + 0.01 * static_cast<double>(j));
            sa.opt.v[i][j] = 0.5 + std::abs(std::cos(0.2 * static_cast<double>(j)));
        }
    swa_update(sa.swa, a.params());
    a.params().items()[0].second.raw()[0] += 0.25;
    swa_update(sa.swa, a.params());
    REQUIRE(sa.swa.count == 2);

    const auto path = dir / "a.ckpt";
    save_checkpoint(path.string(), a.params(), sa, hash);

    Model<double> b(tiny_model(), 2);
    REQUIRE_FALSE(params_equal(a, b));
    TrainState sb;
    load_checkpoint(path.string(), b.params(), sb, hash);
    CHECK(params_equal(a, b));
    CHECK(sb.epochs_done == 7);
    CHECK(sb.opt.step == 42);
    CHECK(sb.best_val == 0.125);
    REQUIRE(sb.swa.count == 2);
    for (size_t i = 0; i < sa.opt.m.size(); ++i)
        for (size_t j = 0; j < sa.opt.m[i].size(); ++j) {
            REQUIRE(sb.opt.m[i][j] == sa.opt.m[i][j]);
            REQUIRE(sb.opt.v[i][j] == sa.opt.v[i][j]);
            REQUIRE(sb.swa.avg[i][j] == sa.swa.avg[i][j]);
        }

    // saving the loaded state reproduces the file byte for byte
    const auto path2 = dir / "b.ckpt";
    save_checkpoint(path2.string(), b.params(), sb, hash);
    CHECK(slurp(path) == slurp(path2));

    // a state without snapshots round-trips as such
    TrainState bare;
    bare.opt = optim_init(a.params());
    const auto path3 = dir / "bare.ckpt";
    save_checkpoint(path3.string(), a.params(), bare, hash);
    TrainState bare2;
    bare2.swa.count = 99; // must be overwritten
    load_checkpoint(path3.string(), a.params(), bare2, hash);
    CHECK(bare2.swa.count == 0);
    CHECK(bare2.swa.avg.empty());
    CHECK(std::isinf(bare2.best_val));

    // wrong configuration hash
    CHECK_THROWS_AS(load_checkpoint(path.string(), b.params(), sb, hash ^ 1), ConfigError);

    // receiving model with other shapes
    ModelConfig other = tiny_model();
    other.embed_dim = 12;
    Model<double> c(other, 1);
    TrainState sc;
    CHECK_THROWS_AS(load_checkpoint(path.string(), c.params(), sc, hash), ConfigError);

    // damaged files report the failure kind
    const auto bytes = slurp(path);
    {
        auto bad = bytes;
        bad[0] = 'X';
        spit(dir / "magic.ckpt", bad);
        try {
            load_checkpoint((dir / "magic.ckpt").string(), b.params(), sb, hash);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(e.kind() == LoadFailure::BadHeader);
        }
    }
    {
        auto bad = bytes;
        bad.resize(bytes.size() - 50);
        spit(dir / "short.ckpt", bad);
        try {
            load_checkpoint((dir / "short.ckpt").string(), b.params(), sb, hash);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(e.kind() == LoadFailure::Truncated);
        }
    }
    {
        auto bad = bytes;
        bad.back() = static_cast<char>(bad.back() ^ 0x40);
        spit(dir / "flip.ckpt", bad);
        try {
            load_checkpoint((dir / "flip.ckpt").string(), b.params(), sb, hash);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(e.kind() == LoadFailure::ChecksumMismatch);
        }
    }

    fs::remove_all(dir);
}

TEST_CASE("training runs deterministically and resumes bit-exactly") {
    const auto data = tiny_dataset(2, 6, 7);
    const TrainConfig cfg = tiny_cfg(11);
    const auto dir = temp_dir("train");

    Model<double> ma(cfg.model, cfg.seed);
    TrainState sta;
    std::ostringstream la;
    const auto resa = train(ma, sta, cfg, data, (dir / "a").string(), &la);

    REQUIRE(resa.history.size() == 2);
    CHECK_FALSE(resa.diverged);
    for (const auto& e : resa.history) {
        CHECK(e.steps > 0);
        CHECK(e.skipped == 0);
        CHECK(std::isfinite(e.loss));
        REQUIRE(e.val_loss.has_value());
        CHECK(std::isfinite(*e.val_loss));
    }
    CHECK(sta.epochs_done == 2);
    CHECK(sta.swa.count == 2);
    CHECK(std::isfinite(sta.best_val));
    CHECK(fs::exists(resa.last_path));
    CHECK(fs::exists(resa.best_path));
    CHECK(fs::exists(resa.swa_path));

    // same seed, fresh run: identical log and final parameters
    {
        Model<double> mb(cfg.model, cfg.seed);
        TrainState stb;
        std::ostringstream lb;
        train(mb, stb, cfg, data, "", &lb);
        CHECK(la.str() == lb.str());
        CHECK(params_equal(ma, mb));
    }

    // worker threads must not change the arithmetic
    {
        TrainConfig c3 = cfg;
        c3.threads = 3;
        Model<double> mc(cfg.model, cfg.seed);
        TrainState stc;
        std::ostringstream lc;
        train(mc, stc, c3, data, "", &lc);
        CHECK(la.str() == lc.str());
        CHECK(params_equal(ma, mc));
    }

    // resume from the epoch-1 checkpoint replays the same curve
    {
        TrainConfig one = cfg;
        one.epochs = 1;
        Model<double> mr(cfg.model, cfg.seed);
        TrainState str1;
        std::ostringstream lr1;
        train(mr, str1, one, data, (dir / "r").string(), &lr1);
        REQUIRE(str1.epochs_done == 1);

        Model<double> mr2(cfg.model, cfg.seed + 99); // init is overwritten by the load
        TrainState str2;
        load_checkpoint((dir / "r" / "last.ckpt").string(), mr2.params(), str2,
                        train_config_hash(cfg));
        REQUIRE(str2.epochs_done == 1);
        std::ostringstream lr2;
        train(mr2, str2, cfg, data, "", &lr2);
        CHECK(lr1.str() + lr2.str() == la.str());
        CHECK(params_equal(ma, mr2));
        CHECK(str2.best_val == sta.best_val);
    }

    fs::remove_all(dir);
}

TEST_CASE("training aborts after three consecutive bad steps") {
    const auto data = tiny_dataset(0, 4, 21);
    TrainConfig cfg = tiny_cfg(13);
    cfg.epochs = 1;
    cfg.batch_size = 1;
    const auto dir = temp_dir("diverge");

    Model<double> m(cfg.model, cfg.seed);
    m.params().items()[0].second.raw()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainState st;
    const auto res = train(m, st, cfg, data, dir.string(), nullptr);
    CHECK(res.diverged);
    REQUIRE_FALSE(res.diverged_path.empty());
    CHECK(fs::exists(res.diverged_path));
    REQUIRE(res.history.size() == 1);
    CHECK(res.history[0].skipped == 3);
    CHECK(res.history[0].steps == 0);
    CHECK(st.epochs_done == 0);

    fs::remove_all(dir);
}

TEST_CASE("training requires a non-test split") {
    const auto data = tiny_dataset(2, 0, 31);
    TrainConfig cfg = tiny_cfg(5);
    Model<double> m(cfg.model, 0);
    TrainState st;
    CHECK_THROWS_AS(train(m, st, cfg, data, "", nullptr), InputError);
}
