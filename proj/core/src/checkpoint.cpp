#include "mmcl/checkpoint.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "mmcl/errors.hpp"

namespace mmcl {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

using json = nlohmann::ordered_json;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  }
  return v;
}

}  // namespace

void CheckpointWriter::add(const std::string& name, const Tensor& t) {
  add_raw(name, t.shape(), t.data());
}

void CheckpointWriter::add_raw(const std::string& name, Shape shape, std::vector<float> data) {
  if (index_.count(name)) throw UsageError("checkpoint: duplicate tensor name '" + name + "'");
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw UsageError("checkpoint: data size does not match shape for '" + name + "'");
  }
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, std::move(shape), std::move(data)});
}

void CheckpointWriter::write(const std::string& path) const {
  json manifest;
  manifest["meta"] = meta_;
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const Entry& e : entries_) {
    json t;
    t["name"] = e.name;
    t["shape"] = e.shape;
    t["offset"] = offset;
    t["count"] = e.data.size();
    tensors.push_back(std::move(t));
    offset += e.data.size() * sizeof(float);
  }
  manifest["tensors"] = std::move(tensors);
  std::string mtext = manifest.dump();

  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(mtext.size()));
  out += mtext;
  for (const Entry& e : entries_) {
    const char* p = reinterpret_cast<const char*>(e.data.data());
    out.append(p, e.data.size() * sizeof(float));
  }

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("checkpoint: cannot open '" + tmp + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("checkpoint: short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw DataError("checkpoint: cannot rename '" + tmp + "' to '" + path + "'");
  }
}

CheckpointReader::CheckpointReader(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + 8 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: '" + path + "' is not a checkpoint file");
  }
  std::uint32_t version = get_u32(bytes, 8);
  if (version != kVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  std::uint32_t mlen = get_u32(bytes, 12);
  std::size_t blob_base = 16 + mlen;
  if (bytes.size() < blob_base) throw DataError("checkpoint: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(16, mlen));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  meta_ = manifest.value("meta", std::string());
  for (const auto& t : manifest.at("tensors")) {
    std::string name = t.at("name").get<std::string>();
    Entry e;
    e.shape = t.at("shape").get<Shape>();
    std::uint64_t offset = t.at("offset").get<std::uint64_t>();
    std::uint64_t count = t.at("count").get<std::uint64_t>();
    if (count != static_cast<std::uint64_t>(shape_numel(e.shape))) {
      throw DataError("checkpoint: count/shape mismatch for '" + name + "'");
    }
    std::size_t end = blob_base + offset + count * sizeof(float);
    if (end > bytes.size()) throw DataError("checkpoint: truncated blob for '" + name + "'");
    e.data.resize(count);
    std::memcpy(e.data.data(), bytes.data() + blob_base + offset, count * sizeof(float));
    names_.push_back(name);
    if (!entries_.emplace(name, std::move(e)).second) {
      throw DataError("checkpoint: duplicate tensor '" + name + "' in file");
    }
  }
}

bool CheckpointReader::has(const std::string& name) const { return entries_.count(name) != 0; }

Shape CheckpointReader::shape(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw DataError("checkpoint: no tensor named '" + name + "'");
  return it->second.shape;
}

Tensor CheckpointReader::tensor(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw DataError("checkpoint: no tensor named '" + name + "'");
  return Tensor::from_data(it->second.shape, it->second.data);
}

const std::vector<float>& CheckpointReader::raw(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw DataError("checkpoint: no tensor named '" + name + "'");
  return it->second.data;
}

}  // namespace mmcl
