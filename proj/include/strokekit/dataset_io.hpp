#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "strokekit/dataset.hpp"

namespace strokekit {

// Text header (magic, extents, spacing, dtype, payload crc32) followed by
// a raw little-endian f32 payload. Loads fail with LoadError carrying the
// failure kind: BadHeader, Truncated, or ChecksumMismatch.
void write_volume(const std::string& path, const Volume& vol);
Volume read_volume(const std::string& path);

// Line-oriented annotation file: per-instance age in minutes plus one
// run-length-encoded mask line per (instance, slice).
void write_annotations(const std::string& path, int subject,
                       const std::vector<InstanceAnnotation>& annotations);
std::vector<InstanceAnnotation> read_annotations(const std::string& path, int* subject = nullptr);

// Dataset directory: manifest.txt naming each record's subject, files and
// split tag, volumes/ and annotations/ holding the payloads. Round-trips
// are byte-identical.
void write_dataset(const std::string& dir, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> read_dataset(const std::string& dir);

// Subject-grouped split: round(n * test_fraction) subjects become "test",
// the remainder spread round-robin over "fold0".."fold<k-1>" after a
// seeded shuffle. Requires at least `folds` non-test subjects.
std::vector<std::string> split_subjects(int n_subjects, double test_fraction, int folds,
                                        std::uint64_t seed);

} // namespace strokekit
