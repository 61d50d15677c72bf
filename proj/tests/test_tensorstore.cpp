#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>

#include "ntk/common.hpp"
#include "ntk/rng.hpp"
#include "ntk/tensorstore.hpp"

using namespace ntk;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "ntk_tensorstore_tests";
    fs::create_directories(p);
    return p;
  }();
  return (dir / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

NamedTensor tensor(std::string name, std::vector<std::int64_t> shape, std::vector<float> data) {
  NamedTensor t;
  t.name = std::move(name);
  t.shape = std::move(shape);
  t.data = std::move(data);
  return t;
}

bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  if (a.metadata != b.metadata) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const auto& ta = a.tensors[i];
    const auto& tb = b.tensors[i];
    if (ta.name != tb.name || ta.shape != tb.shape || ta.data.size() != tb.data.size())
      return false;
    for (std::size_t j = 0; j < ta.data.size(); ++j)
      if (std::bit_cast<std::uint32_t>(ta.data[j]) != std::bit_cast<std::uint32_t>(tb.data[j]))
        return false;
  }
  return true;
}

Checkpoint random_checkpoint(std::uint64_t seed) {
  Rng rng(seed, "ckpt");
  Checkpoint c;
  const int n = 1 + static_cast<int>(rng.below(6));
  for (int i = 0; i < n; ++i) {
    std::vector<std::int64_t> shape;
    const int rank = 1 + static_cast<int>(rng.below(3));
    for (int r = 0; r < rank; ++r) shape.push_back(1 + static_cast<std::int64_t>(rng.below(7)));
    NamedTensor t;
    t.name = "t" + std::to_string(i);
    t.shape = shape;
    std::int64_t numel = 1;
    for (auto d : shape) numel *= d;
    for (std::int64_t j = 0; j < numel; ++j) t.data.push_back(static_cast<float>(rng.normal()));
    c.add(std::move(t));
  }
  c.metadata["origin"] = "test";
  return c;
}

}  // namespace

TEST_CASE("save/load round trip is value-identical") {
  Checkpoint c;
  c.add(tensor("w1", {2, 3}, {1, 2, 3, 4, 5, 6}));
  c.add(tensor("w2", {2}, {0.5f, -0.5f}));
  c.metadata["note"] = "two tensors";
  const std::string path = temp_path("roundtrip.ntk");
  save_checkpoint(c, path);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(bit_equal(c, loaded));
}

TEST_CASE("round trip property over randomized checkpoints, odd values included") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Checkpoint c = random_checkpoint(seed);
    // salt in special values
    auto& data = c.tensors[0].data;
    data[0] = -0.0f;
    if (data.size() > 1) data[1] = std::numeric_limits<float>::infinity();
    if (data.size() > 2) data[2] = std::numeric_limits<float>::quiet_NaN();
    if (data.size() > 3) data[3] = std::numeric_limits<float>::denorm_min();
    const std::string path = temp_path("prop.ntk");
    save_checkpoint(c, path);
    CHECK(bit_equal(c, load_checkpoint(path)));
  }
}

TEST_CASE("saving the same checkpoint twice gives byte-identical files") {
  Checkpoint c = random_checkpoint(99);
  const std::string p1 = temp_path("det1.ntk");
  const std::string p2 = temp_path("det2.ntk");
  save_checkpoint(c, p1);
  save_checkpoint(c, p2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(!slurp(p1).empty());
}

TEST_CASE("tensor order survives the round trip") {
  Checkpoint c;
  c.add(tensor("zebra", {1}, {1}));
  c.add(tensor("alpha", {1}, {2}));
  c.add(tensor("mid", {1}, {3}));
  const std::string path = temp_path("order.ntk");
  save_checkpoint(c, path);
  Checkpoint loaded = load_checkpoint(path);
  REQUIRE(loaded.tensors.size() == 3);
  CHECK(loaded.tensors[0].name == "zebra");
  CHECK(loaded.tensors[1].name == "alpha");
  CHECK(loaded.tensors[2].name == "mid");
}

TEST_CASE("validation rejects bad checkpoints before writing") {
  const std::string path = temp_path("never_written.ntk");
  fs::remove(path);

  Checkpoint dup;
  dup.tensors.push_back(tensor("w", {1}, {1}));
  dup.tensors.push_back(tensor("w", {1}, {2}));
  CHECK_THROWS_AS(save_checkpoint(dup, path), ValidationError);
  CHECK(!fs::exists(path));

  Checkpoint bad_len;
  bad_len.tensors.push_back(tensor("w", {3}, {1, 2}));
  CHECK_THROWS_AS(save_checkpoint(bad_len, path), ValidationError);

  Checkpoint bad_shape;
  bad_shape.tensors.push_back(tensor("w", {0}, {}));
  CHECK_THROWS_AS(save_checkpoint(bad_shape, path), ValidationError);

  Checkpoint empty_name;
  empty_name.tensors.push_back(tensor("", {1}, {1}));
  CHECK_THROWS_AS(save_checkpoint(empty_name, path), ValidationError);

  Checkpoint empty_shape;
  empty_shape.tensors.push_back(tensor("w", {}, {1}));
  CHECK_THROWS_AS(save_checkpoint(empty_shape, path), ValidationError);

  CHECK(!fs::exists(path));
}

TEST_CASE("load failures carry the right error type") {
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ntk")), IoError);

  const std::string bad_magic = temp_path("bad_magic.ntk");
  std::ofstream(bad_magic, std::ios::binary) << "XXXX12345678 payload";
  CHECK_THROWS_AS(load_checkpoint(bad_magic), FormatError);

  // valid file, then truncate the payload
  Checkpoint c;
  c.add(tensor("w", {4}, {1, 2, 3, 4}));
  const std::string truncated = temp_path("truncated.ntk");
  save_checkpoint(c, truncated);
  std::string bytes = slurp(truncated);
  std::ofstream(truncated, std::ios::binary | std::ios::trunc)
      << bytes.substr(0, bytes.size() - 8);
  try {
    load_checkpoint(truncated);
    FAIL("expected corruption error");
  } catch (const CorruptionError& e) {
    // message names expected vs actual byte counts
    CHECK(std::string(e.what()).find("16") != std::string::npos);
    CHECK(std::string(e.what()).find("8") != std::string::npos);
  }

  // header claims more bytes than the file holds
  const std::string bad_header = temp_path("bad_header.ntk");
  std::string huge = "NTK1";
  std::uint64_t hlen = 1 << 20;
  huge.append(reinterpret_cast<const char*>(&hlen), 8);
  huge += "{}";
  std::ofstream(bad_header, std::ios::binary) << huge;
  CHECK_THROWS_AS(load_checkpoint(bad_header), CorruptionError);
}

TEST_CASE("json fixture checkpoints load") {
  const std::string path = temp_path("fixture.json");
  std::ofstream(path) << R"({"version":1,"metadata":{"k":"v"},
    "tensors":[{"name":"a","shape":[2,2],"data":[1,2,3,4]},
               {"name":"b","shape":[1],"data":[0.5]}]})";
  Checkpoint c = load_checkpoint(path);
  REQUIRE(c.tensors.size() == 2);
  CHECK(c.tensors[0].name == "a");
  CHECK(c.tensors[0].data == std::vector<float>{1, 2, 3, 4});
  CHECK(c.tensors[1].data == std::vector<float>{0.5f});
  CHECK(c.metadata.at("k") == "v");

  const std::string dup = temp_path("fixture_dup.json");
  std::ofstream(dup) << R"({"tensors":[{"name":"a","shape":[1],"data":[1]},
                                       {"name":"a","shape":[1],"data":[2]}]})";
  CHECK_THROWS_AS(load_checkpoint(dup), ValidationError);
}

TEST_CASE("checkpoint_diff reports diffs, missing names, and zero means bit-identical") {
  Checkpoint a;
  a.add(tensor("x", {1}, {1.0f}));
  a.add(tensor("ffn1", {2}, {1, 2}));
  Checkpoint b;
  b.add(tensor("x", {1}, {1.5f}));

  DiffReport d = checkpoint_diff(a, b);
  REQUIRE(d.tensors.size() == 1);
  CHECK(d.tensors[0].max_abs == doctest::Approx(0.5));
  CHECK(d.tensors[0].mean_abs == doctest::Approx(0.5));
  REQUIRE(d.only_in_a.size() == 1);
  CHECK(d.only_in_a[0] == "ffn1");
  CHECK(d.only_in_b.empty());
  CHECK(!d.identical());

  DiffReport self = checkpoint_diff(a, a);
  CHECK(self.identical());
  CHECK(self.max_abs() == 0.0);

  // +0 vs -0: numerically equal but not bit-identical, so max_abs must not be 0
  Checkpoint z1, z2;
  z1.add(tensor("z", {1}, {0.0f}));
  z2.add(tensor("z", {1}, {-0.0f}));
  DiffReport zd = checkpoint_diff(z1, z2);
  CHECK(zd.tensors[0].max_abs > 0.0);
  CHECK(!zd.identical());
}
