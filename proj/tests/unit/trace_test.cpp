#include "conceptlens/dataset.hpp"
#include "conceptlens/error.hpp"
#include "conceptlens/fileio.hpp"
#include "conceptlens/synthetic.hpp"
#include "conceptlens/trace.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace clens;

namespace {

std::vector<ActivationRecord> random_records(const LabeledDataset& ds, const ModelTopology& topo,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> bits;
  auto random_float = [&] {
    // Arbitrary finite bit patterns, including subnormals and negative zero.
    for (;;) {
      const std::uint32_t raw = bits(rng);
      float value;
      std::memcpy(&value, &raw, sizeof value);
      if (std::isfinite(value)) return value;
    }
  };
  std::vector<ActivationRecord> records;
  for (const auto& item : ds.items) {
    ActivationRecord r;
    r.item_id = item.id;
    for (int l = 0; l < topo.n_layers; ++l) {
      Eigen::VectorXf h(topo.d_model), z(topo.mlp_width);
      for (auto& v : h) v = random_float();
      for (auto& v : z) v = random_float();
      r.residual.push_back(h);
      r.mlp_pre.push_back(z);
    }
    records.push_back(std::move(r));
  }
  return records;
}

ErrorCode error_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected clens::Error");
  return ErrorCode::io;
}

}  // namespace

TEST_CASE("trace round-trips bit-exactly for random payloads") {
  const auto dir = testing::scratch_dir("trace");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = generate_synthetic_dataset(3, 2 + static_cast<int>(seed), 8, 2, seed);
    const auto topo = synthetic_topology(3, 1 + static_cast<int>(seed % 3), 5, 7, 16);
    const auto records = random_records(ds, topo, seed);
    const auto summary = write_trace(ds, topo, records, dir / "t.clns");
    CHECK(summary.n_records == ds.size());
    const auto back = read_trace_with_header(dir / "t.clns", ds, topo);
    CHECK(back.summary.topology == topo);
    REQUIRE(back.records.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) CHECK(back.records[i] == records[i]);
  }
}

TEST_CASE("trace header layout") {
  const auto ds = generate_synthetic_dataset(2, 1, 4, 1, 0);
  const auto topo = synthetic_topology(2, 2, 3, 4, 8);
  const std::string bytes = encode_trace(ds, topo, random_records(ds, topo, 1));
  CHECK(bytes.substr(0, 5) == "CLNS1");
  std::uint32_t header = 0;
  std::memcpy(&header, bytes.data() + 5, 4);
  CHECK(bytes[9] == '{');
  CHECK(bytes.size() == 9 + header + 2 * 2 * (3 + 4) * sizeof(float));
}

TEST_CASE("trace write errors") {
  const auto dir = testing::scratch_dir("trace-errors");
  const auto ds = generate_synthetic_dataset(2, 2, 4, 1, 0);
  const auto topo = synthetic_topology(2, 2, 3, 4, 8);
  auto records = random_records(ds, topo, 2);

  auto shorter = records;
  shorter.pop_back();
  CHECK(error_of([&] { write_trace(ds, topo, shorter, dir / "a.clns"); }) == ErrorCode::length_mismatch);
  CHECK(!std::filesystem::exists(dir / "a.clns"));

  auto bad = records;
  bad[1].residual[1][0] = std::numeric_limits<float>::quiet_NaN();
  try {
    write_trace(ds, topo, bad, dir / "b.clns");
    FAIL("expected non-finite rejection");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::non_finite);
    const std::string message = e.what();
    CHECK(message.find(ds.items[1].id) != std::string::npos);
    CHECK(message.find("layer 1") != std::string::npos);
  }
}

TEST_CASE("trace read errors") {
  const auto dir = testing::scratch_dir("trace-read");
  const auto a = generate_synthetic_dataset(2, 2, 4, 1, 0);
  const auto b = generate_synthetic_dataset(2, 2, 4, 1, 1);
  const auto topo = synthetic_topology(2, 4, 3, 4, 8);
  write_trace(a, topo, random_records(a, topo, 3), dir / "a.clns");

  CHECK(read_trace(dir / "a.clns", a).size() == a.size());
  CHECK(error_of([&] { read_trace(dir / "a.clns", b); }) == ErrorCode::digest_mismatch);

  auto other = topo;
  other.mlp_width = 5;
  CHECK(error_of([&] { read_trace(dir / "a.clns", a, other); }) == ErrorCode::topology_mismatch);

  // A record holding 3 residual vectors where the header promises 4.
  auto short_topo = topo;
  short_topo.n_layers = 3;
  auto records = random_records(a, short_topo, 4);
  std::string bytes = encode_trace(a, short_topo, records);
  // Re-point the header at L=4.
  const auto pos = bytes.find("\"n_layers\":3");
  REQUIRE(pos != std::string::npos);
  bytes[pos + 11] = '4';
  write_file_atomic(dir / "short.clns", bytes);
  CHECK(error_of([&] { read_trace(dir / "short.clns", a); }) == ErrorCode::truncated);

  write_file_atomic(dir / "junk.clns", "hello");
  CHECK(error_of([&] { read_trace(dir / "junk.clns", a); }) == ErrorCode::parse);
}
