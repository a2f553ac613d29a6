#include "strokekit/dataset_io.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "strokekit/crc32.hpp"
#include "strokekit/error.hpp"
#include "strokekit/rng.hpp"

namespace fs = std::filesystem;

namespace strokekit {

namespace {

[[noreturn]] void load_fail(LoadFailure kind, const std::string& msg) {
    throw LoadError(kind, msg);
}

std::vector<unsigned char> encode_le(const std::vector<float>& data) {
    static_assert(sizeof(float) == 4);
    std::vector<unsigned char> bytes(data.size() * 4);
    for (size_t i = 0; i < data.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, &data[i], 4);
        bytes[i * 4 + 0] = static_cast<unsigned char>(u & 0xFF);
        bytes[i * 4 + 1] = static_cast<unsigned char>((u >> 8) & 0xFF);
        bytes[i * 4 + 2] = static_cast<unsigned char>((u >> 16) & 0xFF);
        bytes[i * 4 + 3] = static_cast<unsigned char>((u >> 24) & 0xFF);
    }
    return bytes;
}

std::vector<float> decode_le(const std::vector<unsigned char>& bytes) {
    std::vector<float> data(bytes.size() / 4);
    for (size_t i = 0; i < data.size(); ++i) {
        const std::uint32_t u = static_cast<std::uint32_t>(bytes[i * 4 + 0]) |
                                (static_cast<std::uint32_t>(bytes[i * 4 + 1]) << 8) |
                                (static_cast<std::uint32_t>(bytes[i * 4 + 2]) << 16) |
                                (static_cast<std::uint32_t>(bytes[i * 4 + 3]) << 24);
        std::memcpy(&data[i], &u, 4);
    }
    return data;
}

std::string read_header_line(std::istream& is, const std::string& path) {
    std::string line;
    if (!std::getline(is, line)) load_fail(LoadFailure::BadHeader, path + ": header ends early");
    return line;
}

} // namespace

void write_volume(const std::string& path, const Volume& vol) {
    const auto bytes = encode_le(vol.data);
    std::ofstream os(path, std::ios::binary);
    SK_CHECK(os.good(), IoError, "write_volume: cannot open " << path);
    os << "VOL1\n";
    os << "extents " << vol.width << " " << vol.height << " " << vol.slices << "\n";
    os << std::setprecision(17) << "spacing " << vol.spacing[0] << " " << vol.spacing[1] << " "
       << vol.spacing[2] << "\n";
    os << "dtype f32\n";
    os << "crc32 " << std::hex << std::setw(8) << std::setfill('0') << crc32(bytes.data(), bytes.size())
       << std::dec << "\n";
    os << "data\n";
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    SK_CHECK(os.good(), IoError, "write_volume: short write to " << path);
}

Volume read_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) load_fail(LoadFailure::BadHeader, path + ": cannot open");

    if (read_header_line(is, path) != "VOL1")
        load_fail(LoadFailure::BadHeader, path + ": bad magic");

    Volume vol;
    std::uint32_t want_crc = 0;
    bool got_extents = false, got_spacing = false, got_dtype = false, got_crc = false;
    for (;;) {
        const std::string line = read_header_line(is, path);
        if (line == "data") break;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "extents") {
            ls >> vol.width >> vol.height >> vol.slices;
            got_extents = !ls.fail() && vol.width > 0 && vol.height > 0 && vol.slices > 0;
        } else if (key == "spacing") {
            ls >> vol.spacing[0] >> vol.spacing[1] >> vol.spacing[2];
            got_spacing = !ls.fail();
        } else if (key == "dtype") {
            std::string d;
            ls >> d;
            got_dtype = d == "f32";
        } else if (key == "crc32") {
            ls >> std::hex >> want_crc;
            got_crc = !ls.fail();
        } else {
            load_fail(LoadFailure::BadHeader, path + ": unknown header key '" + key + "'");
        }
    }
    if (!got_extents || !got_spacing || !got_dtype || !got_crc)
        load_fail(LoadFailure::BadHeader, path + ": incomplete header");

    const auto n = static_cast<size_t>(vol.numel()) * 4;
    std::vector<unsigned char> bytes(n);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n)
        load_fail(LoadFailure::Truncated,
                  path + ": payload holds " + std::to_string(is.gcount()) + " of " +
                      std::to_string(n) + " bytes");
    if (crc32(bytes.data(), bytes.size()) != want_crc)
        load_fail(LoadFailure::ChecksumMismatch, path + ": payload checksum mismatch");

    vol.data = decode_le(bytes);
    return vol;
}

void write_annotations(const std::string& path, int subject,
                       const std::vector<InstanceAnnotation>& annotations) {
    std::ofstream os(path);
    SK_CHECK(os.good(), IoError, "write_annotations: cannot open " << path);
    os << "ANN1\n";
    os << "subject " << subject << "\n";
    os << "instances " << annotations.size() << "\n";
    os << std::setprecision(17);
    for (const auto& ann : annotations) {
        os << "instance " << ann.id << " age_minutes " << ann.age_minutes << "\n";
        for (const auto& sm : ann.slices) {
            os << "mask " << ann.id << " " << sm.slice << " box " << sm.box[0] << " " << sm.box[1]
               << " " << sm.box[2] << " " << sm.box[3] << " rle " << sm.runs.size();
            for (const auto& [start, len] : sm.runs) os << " " << start << " " << len;
            os << "\n";
        }
    }
    SK_CHECK(os.good(), IoError, "write_annotations: short write to " << path);
}

std::vector<InstanceAnnotation> read_annotations(const std::string& path, int* subject) {
    std::ifstream is(path);
    if (!is.good()) load_fail(LoadFailure::BadHeader, path + ": cannot open");
    if (read_header_line(is, path) != "ANN1")
        load_fail(LoadFailure::BadHeader, path + ": bad magic");

    auto expect = [&](std::istringstream& ls, const std::string& word) {
        std::string w;
        ls >> w;
        if (w != word) load_fail(LoadFailure::BadHeader, path + ": expected '" + word + "'");
    };

    std::istringstream l1(read_header_line(is, path));
    expect(l1, "subject");
    int subj = 0;
    l1 >> subj;
    if (l1.fail()) load_fail(LoadFailure::BadHeader, path + ": bad subject line");
    if (subject) *subject = subj;

    std::istringstream l2(read_header_line(is, path));
    expect(l2, "instances");
    size_t count = 0;
    l2 >> count;
    if (l2.fail()) load_fail(LoadFailure::BadHeader, path + ": bad instances line");

    std::vector<InstanceAnnotation> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "instance") {
            InstanceAnnotation ann;
            ls >> ann.id;
            expect(ls, "age_minutes");
            ls >> ann.age_minutes;
            if (ls.fail() || ann.age_minutes <= 0)
                load_fail(LoadFailure::BadHeader, path + ": bad instance line");
            ann.age_log = std::log(ann.age_minutes);
            out.push_back(std::move(ann));
        } else if (key == "mask") {
            int id = 0;
            SliceMask sm;
            ls >> id >> sm.slice;
            expect(ls, "box");
            ls >> sm.box[0] >> sm.box[1] >> sm.box[2] >> sm.box[3];
            expect(ls, "rle");
            size_t nruns = 0;
            ls >> nruns;
            for (size_t i = 0; i < nruns; ++i) {
                int start = 0, len = 0;
                ls >> start >> len;
                sm.runs.emplace_back(start, len);
            }
            if (ls.fail()) load_fail(LoadFailure::BadHeader, path + ": bad mask line");
            if (out.empty() || out.back().id != id)
                load_fail(LoadFailure::BadHeader,
                          path + ": mask line for instance " + std::to_string(id) +
                              " out of order");
            out.back().slices.push_back(std::move(sm));
        } else {
            load_fail(LoadFailure::BadHeader, path + ": unknown line '" + key + "'");
        }
    }
    if (out.size() != count)
        load_fail(LoadFailure::Truncated, path + ": " + std::to_string(out.size()) + " of " +
                                              std::to_string(count) + " instances present");
    return out;
}

void write_dataset(const std::string& dir, const std::vector<DatasetRecord>& records) {
    fs::create_directories(fs::path(dir) / "volumes");
    fs::create_directories(fs::path(dir) / "annotations");
    std::ofstream os(fs::path(dir) / "manifest.txt");
    SK_CHECK(os.good(), IoError, "write_dataset: cannot open manifest in " << dir);
    os << "MANIFEST1\n";
    os << "records " << records.size() << "\n";
    for (const auto& r : records) {
        os << "record " << r.subject << " " << r.volume_file << " " << r.ann_file << " " << r.split
           << "\n";
        write_volume((fs::path(dir) / r.volume_file).string(), r.volume);
        write_annotations((fs::path(dir) / r.ann_file).string(), r.subject, r.annotations);
    }
    SK_CHECK(os.good(), IoError, "write_dataset: short manifest write in " << dir);
}

std::vector<DatasetRecord> read_dataset(const std::string& dir) {
    const auto manifest = (fs::path(dir) / "manifest.txt").string();
    std::ifstream is(manifest);
    if (!is.good()) load_fail(LoadFailure::BadHeader, manifest + ": cannot open");
    if (read_header_line(is, manifest) != "MANIFEST1")
        load_fail(LoadFailure::BadHeader, manifest + ": bad magic");
    std::istringstream l1(read_header_line(is, manifest));
    std::string key;
    size_t count = 0;
    l1 >> key >> count;
    if (key != "records" || l1.fail())
        load_fail(LoadFailure::BadHeader, manifest + ": bad records line");

    std::vector<DatasetRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        DatasetRecord r;
        ls >> key >> r.subject >> r.volume_file >> r.ann_file >> r.split;
        if (key != "record" || ls.fail())
            load_fail(LoadFailure::BadHeader, manifest + ": bad record line '" + line + "'");
        r.volume = read_volume((fs::path(dir) / r.volume_file).string());
        int subj = 0;
        r.annotations = read_annotations((fs::path(dir) / r.ann_file).string(), &subj);
        if (subj != r.subject)
            load_fail(LoadFailure::BadHeader, manifest + ": subject mismatch for record " +
                                                  std::to_string(r.subject));
        out.push_back(std::move(r));
    }
    if (out.size() != count)
        load_fail(LoadFailure::Truncated, manifest + ": " + std::to_string(out.size()) + " of " +
                                              std::to_string(count) + " records present");
    return out;
}

std::vector<std::string> split_subjects(int n_subjects, double test_fraction, int folds,
                                        std::uint64_t seed) {
    SK_CHECK(n_subjects > 0, ConfigError, "split_subjects: no subjects");
    SK_CHECK(test_fraction >= 0 && test_fraction < 1, ConfigError,
             "split_subjects: test fraction " << test_fraction << " outside [0, 1)");
    SK_CHECK(folds >= 1, ConfigError, "split_subjects: folds must be >= 1");
    const int n_test = static_cast<int>(std::lround(n_subjects * test_fraction));
    SK_CHECK(n_subjects - n_test >= folds, ConfigError,
             "split_subjects: " << n_subjects - n_test << " non-test subjects cannot fill "
                                << folds << " folds");

    std::vector<int> order(static_cast<size_t>(n_subjects));
    for (int i = 0; i < n_subjects; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(Rng::derive(seed, "split", {}));
    for (int i = n_subjects - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);

    std::vector<std::string> tags(static_cast<size_t>(n_subjects));
    for (int i = 0; i < n_subjects; ++i) {
        const int s = order[static_cast<size_t>(i)];
        tags[static_cast<size_t>(s)] =
            i < n_test ? "test" : "fold" + std::to_string((i - n_test) % folds);
    }
    return tags;
}

} // namespace strokekit
