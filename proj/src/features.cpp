#include "magscope/features.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "magscope/error.hpp"
#include "magscope/image.hpp"

namespace magscope {
namespace {

namespace fs = std::filesystem;

constexpr std::array<char, 4> kMagic = {'M', 'A', 'G', 'F'};

template <class T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <class T>
T get_le(const std::uint8_t* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

std::vector<std::uint8_t> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFound(path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  write_text_atomic(path, text);
}

void check_consistent(const FeatureStore& s) {
  if (s.patch_ids.size() != s.labels.size() || s.values.size() != s.labels.size() * s.dim) {
    throw InvalidArgument("feature store has inconsistent sizes");
  }
}

}  // namespace

void FeatureStore::append(std::string patch_id, MagLevel label, std::span<const float> row) {
  if (row.size() != dim) {
    throw DimensionMismatch("row has " + std::to_string(row.size()) + " values, store dim is " +
                            std::to_string(dim));
  }
  patch_ids.push_back(std::move(patch_id));
  labels.push_back(label);
  values.insert(values.end(), row.begin(), row.end());
}

void FeatureStore::append(std::string patch_id, MagLevel label, std::span<const double> row) {
  std::vector<float> narrowed(row.begin(), row.end());
  append(std::move(patch_id), label, std::span<const float>(narrowed));
}

FeatureStore FeatureStore::subset(std::span<const std::size_t> indices) const {
  FeatureStore out(dim);
  out.patch_ids.reserve(indices.size());
  out.labels.reserve(indices.size());
  out.values.reserve(indices.size() * dim);
  for (std::size_t i : indices) {
    if (i >= size()) throw InvalidArgument("subset index out of range");
    out.patch_ids.push_back(patch_ids[i]);
    out.labels.push_back(labels[i]);
    const auto r = row(i);
    out.values.insert(out.values.end(), r.begin(), r.end());
  }
  return out;
}

fs::path ids_sidecar(const fs::path& store_path) {
  auto p = store_path;
  p += ".ids";
  return p;
}

void save_store_binary(const fs::path& path, const FeatureStore& store) {
  check_consistent(store);
  std::vector<std::uint8_t> bytes;
  bytes.reserve(20 + store.size() * (4 + 4 * store.dim));
  bytes.insert(bytes.end(), kMagic.begin(), kMagic.end());
  put_le(bytes, kStoreVersion);
  put_le(bytes, static_cast<std::uint32_t>(store.dim));
  put_le(bytes, static_cast<std::uint64_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    put_le(bytes, static_cast<std::uint32_t>(ordinal(store.labels[i])));
    for (float v : store.row(i)) put_le(bytes, v);
  }
  std::string ids;
  for (const auto& id : store.patch_ids) {
    if (id.find_first_of("\r\n") != std::string::npos) throw InvalidArgument("patch id contains a newline");
    ids += id + "\n";
  }
  write_file_atomic(path, bytes);
  write_text(ids_sidecar(path), ids);
}

FeatureStore load_store_binary(const fs::path& path) {
  const auto bytes = read_all(path);
  const std::string where = path.string();
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0) {
    throw ParseError(1, where + ": not a MAGF feature store");
  }
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kStoreVersion) {
    throw ParseError(1, where + ": unsupported store version " + std::to_string(version));
  }
  FeatureStore store(get_le<std::uint32_t>(bytes.data() + 8));
  const auto count = get_le<std::uint64_t>(bytes.data() + 12);
  const std::size_t record = 4 + 4 * store.dim;
  if (record == 0 || (bytes.size() - 20) / record < count || bytes.size() != 20 + count * record) {
    throw ParseError(1, where + ": size does not match header");
  }
  store.labels.reserve(count);
  store.values.reserve(count * store.dim);
  const std::uint8_t* p = bytes.data() + 20;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto label = level_from_ordinal(get_le<std::uint32_t>(p));
    if (!label) throw ParseError(1, where + ": record " + std::to_string(i) + " has a bad label");
    store.labels.push_back(*label);
    p += 4;
    for (std::size_t j = 0; j < store.dim; ++j, p += 4) store.values.push_back(get_le<float>(p));
  }

  const auto sidecar = ids_sidecar(path);
  std::ifstream ids(sidecar);
  if (!ids) throw FileNotFound(sidecar.string());
  std::string line;
  while (std::getline(ids, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    store.patch_ids.push_back(line);
  }
  if (store.patch_ids.size() != store.labels.size()) {
    throw ParseError(store.patch_ids.size(), sidecar.string() + ": has " +
                                                 std::to_string(store.patch_ids.size()) +
                                                 " ids for " + std::to_string(count) + " records");
  }
  return store;
}

void save_store_csv(const fs::path& path, const FeatureStore& store) {
  check_consistent(store);
  std::string text = "patch_id,label";
  for (std::size_t j = 0; j < store.dim; ++j) text += ",f" + std::to_string(j);
  text += '\n';
  char buf[64];
  for (std::size_t i = 0; i < store.size(); ++i) {
    text += store.patch_ids[i];
    text += ',';
    text += to_string(store.labels[i]);
    for (float v : store.row(i)) {
      // Shortest form that round-trips exactly: at least 9 significant
      // digits' worth of information for any float.
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 9);
      (void)ec;
      text += ',';
      text.append(buf, end);
    }
    text += '\n';
  }
  write_text(path, text);
}

FeatureStore load_store_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFound(path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("patch_id,label", 0) != 0) throw ParseError(1, "unexpected header");
  std::size_t dim = 0;
  for (char c : line) dim += c == ',';
  dim -= 1;
  FeatureStore store(dim);
  std::size_t line_no = 1;
  std::vector<float> row(dim);
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, label_str, cell;
    std::getline(ss, id, ',');
    std::getline(ss, label_str, ',');
    const auto label = level_from_string(label_str);
    if (!label) throw ParseError(line_no, "unknown label '" + label_str + "'");
    std::size_t j = 0;
    while (std::getline(ss, cell, ',')) {
      if (j >= dim) throw ParseError(line_no, "too many values");
      float v = 0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size()) {
        throw ParseError(line_no, "bad value '" + cell + "'");
      }
      row[j++] = v;
    }
    if (j != dim) throw ParseError(line_no, "expected " + std::to_string(dim) + " values");
    store.append(id, *label, std::span<const float>(row));
  }
  return store;
}

void save_store(const fs::path& path, const FeatureStore& store) {
  if (path.extension() == ".csv") {
    save_store_csv(path, store);
  } else {
    save_store_binary(path, store);
  }
}

FeatureStore load_store(const fs::path& path) {
  if (path.extension() == ".csv") return load_store_csv(path);
  return load_store_binary(path);
}

}  // namespace magscope
