#include "ntk/tensorstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "ntk/common.hpp"

namespace ntk {

namespace {

constexpr char kMagic[4] = {'N', 'T', 'K', '1'};

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on checkpoint file: " + path);
  return bytes;
}

Checkpoint from_header_json(const nlohmann::json& doc, const std::string& path,
                            const char* payload, std::size_t payload_size) {
  if (!doc.is_object() || !doc.contains("version") || !doc["version"].is_number_integer())
    throw FormatError("checkpoint header missing integer 'version': " + path);
  if (doc["version"].get<std::int64_t>() != 1)
    throw FormatError("unsupported checkpoint version " + doc["version"].dump() + ": " + path);
  if (!doc.contains("tensors") || !doc["tensors"].is_array())
    throw FormatError("checkpoint header missing 'tensors' array: " + path);

  Checkpoint ckpt;
  if (doc.contains("metadata")) {
    for (auto& [k, v] : doc["metadata"].items()) ckpt.metadata[k] = v.get<std::string>();
  }

  const bool inline_values = payload == nullptr;
  std::int64_t expected_offset = 0;
  for (const auto& entry : doc["tensors"]) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    if (inline_values) {
      for (const auto& v : entry.at("data")) t.data.push_back(v.get<float>());
    } else {
      std::int64_t offset = entry.at("offset").get<std::int64_t>();
      std::int64_t nbytes = entry.at("nbytes").get<std::int64_t>();
      if (offset != expected_offset)
        throw CorruptionError("tensor '" + t.name + "' offset " + std::to_string(offset) +
                              " is not contiguous (expected " + std::to_string(expected_offset) +
                              "): " + path);
      std::int64_t numel_from_shape = 1;
      for (std::int64_t d : t.shape) numel_from_shape *= d;
      if (nbytes != numel_from_shape * 4)
        throw CorruptionError("tensor '" + t.name + "' nbytes " + std::to_string(nbytes) +
                              " does not match shape: " + path);
      if (offset + nbytes > static_cast<std::int64_t>(payload_size))
        throw CorruptionError("truncated payload in " + path + ": expected at least " +
                              std::to_string(offset + nbytes) + " payload bytes, got " +
                              std::to_string(payload_size));
      t.data.resize(static_cast<std::size_t>(numel_from_shape));
      std::memcpy(t.data.data(), payload + offset, static_cast<std::size_t>(nbytes));
      expected_offset = offset + nbytes;
    }
    ckpt.add(std::move(t));
  }
  if (!inline_values && expected_offset != static_cast<std::int64_t>(payload_size))
    throw CorruptionError("trailing payload bytes in " + path + ": expected " +
                          std::to_string(expected_offset) + " payload bytes, got " +
                          std::to_string(payload_size));
  ckpt.validate();
  return ckpt;
}

}  // namespace

std::int64_t NamedTensor::numel() const {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

void NamedTensor::validate() const {
  if (name.empty()) throw ValidationError("tensor with empty name");
  if (shape.empty()) throw ValidationError("tensor '" + name + "' has empty shape");
  for (std::int64_t d : shape) {
    if (d < 1)
      throw ValidationError("tensor '" + name + "' has non-positive shape entry " +
                            std::to_string(d));
  }
  if (static_cast<std::int64_t>(data.size()) != numel())
    throw ValidationError("tensor '" + name + "' data length " + std::to_string(data.size()) +
                          " does not match shape product " + std::to_string(numel()));
}

void Checkpoint::add(NamedTensor t) {
  t.validate();
  if (find(t.name) != nullptr) throw ValidationError("duplicate tensor name '" + t.name + "'");
  tensors.push_back(std::move(t));
}

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

NamedTensor* Checkpoint::find(std::string_view name) {
  for (auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void Checkpoint::validate() const {
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    t.validate();
    if (!seen.insert(t.name).second)
      throw ValidationError("duplicate tensor name '" + t.name + "'");
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ckpt.validate();

  nlohmann::json header;
  header["version"] = 1;
  header["metadata"] = nlohmann::json::object();
  for (const auto& [k, v] : ckpt.metadata) header["metadata"][k] = v;
  header["tensors"] = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    std::int64_t nbytes = t.numel() * 4;
    header["tensors"].push_back(
        {{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  std::uint64_t hlen = header_bytes.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
  for (const auto& t : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * 4));
  out.flush();
  if (!out) throw IoError("write failure: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file_bytes(path);

  if (!bytes.empty() && bytes[0] == '{') {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("invalid JSON checkpoint fixture " + path + ": " + e.what());
    }
    if (!doc.contains("version")) doc["version"] = 1;
    return from_header_json(doc, path, nullptr, 0);
  }

  if (bytes.size() < 12) throw FormatError("file too short for checkpoint container: " + path);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("bad magic bytes (expected NTK1): " + path);
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 4, 8);
  if (12 + hlen > bytes.size())
    throw CorruptionError("truncated header in " + path + ": header claims " +
                          std::to_string(hlen) + " bytes, file has " +
                          std::to_string(bytes.size() - 12) + " after the prefix");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<long>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid checkpoint header JSON in " + path + ": " + e.what());
  }
  const char* payload = bytes.data() + 12 + hlen;
  return from_header_json(doc, path, payload, bytes.size() - 12 - hlen);
}

DiffReport checkpoint_diff(const Checkpoint& a, const Checkpoint& b) {
  DiffReport report;
  for (const auto& ta : a.tensors) {
    const NamedTensor* tb = b.find(ta.name);
    if (tb == nullptr) {
      report.only_in_a.push_back(ta.name);
      continue;
    }
    if (ta.shape != tb->shape) {
      report.shape_mismatch.push_back(ta.name);
      continue;
    }
    TensorDiff d;
    d.name = ta.name;
    double total = 0.0;
    for (std::size_t i = 0; i < ta.data.size(); ++i) {
      double diff;
      if (std::bit_cast<std::uint32_t>(ta.data[i]) == std::bit_cast<std::uint32_t>(tb->data[i])) {
        diff = 0.0;
      } else {
        diff = std::abs(static_cast<double>(ta.data[i]) - static_cast<double>(tb->data[i]));
        // +0 vs -0 compare numerically equal but are not bit-identical; report
        // one denormal step so max_abs == 0 always implies bit equality.
        if (diff == 0.0) diff = std::numeric_limits<double>::denorm_min();
      }
      d.max_abs = std::max(d.max_abs, diff);
      total += diff;
    }
    d.mean_abs = ta.data.empty() ? 0.0 : total / static_cast<double>(ta.data.size());
    report.tensors.push_back(d);
  }
  for (const auto& tb : b.tensors)
    if (a.find(tb.name) == nullptr) report.only_in_b.push_back(tb.name);
  return report;
}

bool DiffReport::identical() const {
  if (!only_in_a.empty() || !only_in_b.empty() || !shape_mismatch.empty()) return false;
  for (const auto& t : tensors)
    if (t.max_abs != 0.0) return false;
  return true;
}

double DiffReport::max_abs() const {
  double m = 0.0;
  for (const auto& t : tensors) m = std::max(m, t.max_abs);
  return m;
}

}  // namespace ntk
