#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "strokekit/config.hpp"
#include "strokekit/plot.hpp"
#include "strokekit/rng.hpp"

using namespace strokekit;

namespace {

size_t count_of(const std::string& hay, const std::string& needle) {
    size_t n = 0;
    for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
    return n;
}

} // namespace

TEST_CASE("train config serialization round-trips") {
    TrainConfig cfg;
    cfg.model.embed_dim = 16;
    cfg.model.num_heads = 2;
    cfg.model.cardinality = 2;
    cfg.model.stage_widths = {4, 8, 8, 16};
    cfg.schedule.lr_max = 3e-3;
    cfg.seed = 12345;
    cfg.epochs = 7;
    cfg.rlw = false;

    const auto text = serialize_train_config(cfg);
    const auto back = parse_train_config(text);
    CHECK(train_config_hash(back) == train_config_hash(cfg));
    CHECK(back.epochs == 7);
    CHECK(back.seed == 12345);
    CHECK(back.model.stage_widths == std::vector<int>{4, 8, 8, 16});
    CHECK(back.schedule.lr_max == 3e-3);
    CHECK_FALSE(back.rlw);
    CHECK(serialize_train_config(back) == text);

    // defaults parse from an empty file
    const auto dflt = parse_train_config("");
    CHECK(train_config_hash(dflt) == train_config_hash(TrainConfig{}));
}

TEST_CASE("config parser accepts comments and rejects malformed input") {
    const auto cfg = parse_train_config(
        "# comment line\n"
        "\n"
        "  model.embed_dim = 32   # trailing comment\n"
        "model.num_heads=2\n");
    CHECK(cfg.model.embed_dim == 32);
    CHECK(cfg.model.num_heads == 2);

    CHECK_THROWS_AS((void)parse_train_config("no_such_key = 1\n"), ConfigError);
    CHECK_THROWS_AS((void)parse_train_config("model.embed_dim = 8\nmodel.embed_dim = 8\n"),
                    ConfigError);
    CHECK_THROWS_AS((void)parse_train_config("model.embed_dim = eight\n"), ConfigError);
    CHECK_THROWS_AS((void)parse_train_config("loss.rlw = maybe\n"), ConfigError);
    CHECK_THROWS_AS((void)parse_train_config("model.embed_dim\n"), ConfigError);
    CHECK_THROWS_AS((void)parse_train_config("model.stage_widths = 4,,8\n"), ConfigError);
    // validation runs after parsing: 30 is not divisible by 4 heads
    CHECK_THROWS_AS((void)parse_train_config("model.embed_dim = 30\n"), ConfigError);
}

TEST_CASE("generate spec round-trips and validates") {
    GenerateSpec spec;
    spec.subjects = 12;
    spec.phantom.max_lesions = 2;
    spec.phantom.noise = 0.01;
    const auto text = serialize_generate_spec(spec);
    const auto back = parse_generate_spec(text);
    CHECK(back.subjects == 12);
    CHECK(back.phantom.max_lesions == 2);
    CHECK(back.phantom.noise == 0.01);
    CHECK(serialize_generate_spec(back) == text);

    CHECK_THROWS_AS((void)parse_generate_spec("subjects = -1\n"), ConfigError);
    CHECK_THROWS_AS((void)parse_generate_spec("test_fraction = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(
        (void)parse_generate_spec("phantom.min_radius_mm = 5\nphantom.max_radius_mm = 3\n"),
        ConfigError);
    CHECK_THROWS_AS((void)parse_generate_spec("phantom.width = 0\n"), ConfigError);
}

TEST_CASE("roc curve fixtures") {
    const double thr = acute_threshold();

    // perfect separation: acute predicted younger
    {
        const std::vector<double> t{thr - 1.0, thr - 0.5, thr + 0.5, thr + 1.0};
        const std::vector<double> p{1.0, 2.0, 8.0, 9.0};
        const auto roc = roc_curve(t, p);
        CHECK(roc.auc == 1.0);
        CHECK(roc.points.front() == std::array<double, 2>{0.0, 0.0});
        CHECK(roc.points.back() == std::array<double, 2>{1.0, 1.0});
    }
    // one inversion in a 2x2 set: 3 of 4 pairs correct
    {
        const std::vector<double> t{thr - 1.0, thr - 0.5, thr + 0.5, thr + 1.0};
        const std::vector<double> p{1.0, 8.5, 8.0, 9.0};
        CHECK(roc_curve(t, p).auc == 0.75);
    }
    // constant predictions: one diagonal segment, area one half
    {
        const std::vector<double> t{thr - 1.0, thr + 1.0, thr - 0.5, thr + 0.5};
        const std::vector<double> p{5.0, 5.0, 5.0, 5.0};
        const auto roc = roc_curve(t, p);
        CHECK(roc.auc == 0.5);
        CHECK(roc.points.size() == 2);
    }
    // single class is undrawable
    CHECK_THROWS_AS((void)roc_curve({thr - 1.0, thr - 2.0}, {1.0, 2.0}), InputError);
}

TEST_CASE("roc trapezoid area equals the pairwise statistic") {
    const double thr = acute_threshold();
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        const int n_ac = rng.uniform_int(1, 20);
        const int n_non = rng.uniform_int(1, 20);
        std::vector<double> t, p;
        for (int i = 0; i < n_ac + n_non; ++i) {
            t.push_back(i < n_ac ? thr - rng.uniform(0.01, 3.0) : thr + rng.uniform(0.01, 3.0));
            // quantized predictions force plenty of ties
            p.push_back(std::floor(rng.uniform(0.0, 8.0)));
        }
        const auto roc = roc_curve(t, p);
        const auto ref = auc_pairwise(t, p);
        REQUIRE(ref.has_value());
        CHECK(std::abs(roc.auc - *ref) < 1e-12);
        CHECK(roc.points.front() == std::array<double, 2>{0.0, 0.0});
        CHECK(roc.points.back() == std::array<double, 2>{1.0, 1.0});
        for (size_t k = 1; k < roc.points.size(); ++k) {
            CHECK(roc.points[k][0] >= roc.points[k - 1][0]);
            CHECK(roc.points[k][1] >= roc.points[k - 1][1]);
        }
    }
}

TEST_CASE("svg rendering") {
    const double thr = acute_threshold();
    const std::vector<double> t{thr - 1.0, thr - 0.5, thr + 0.5, thr + 1.0};
    const std::vector<double> p{1.0, 2.0, 8.0, 9.0};

    const auto scatter = svg_scatter(t, p);
    CHECK(scatter.find("<svg") != std::string::npos);
    CHECK(scatter.find("log-minutes") != std::string::npos);
    CHECK(count_of(scatter, "<circle") == t.size());

    const auto roc_svg = svg_roc(roc_curve(t, p));
    CHECK(roc_svg.find("<polyline") != std::string::npos);
    CHECK(roc_svg.find("AUC = 1.000000") != std::string::npos);

    CHECK_THROWS_AS((void)svg_scatter({}, {}), InputError);
}
