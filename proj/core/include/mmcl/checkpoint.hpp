#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmcl/tensor.hpp"

namespace mmcl {

/// Single-file tensor archive: a fixed header, a JSON manifest listing name /
/// shape / byte offset / element count per entry, then raw float32
/// little-endian blobs. `meta` carries an opaque caller-provided string
/// (typically JSON) for config hashes, sample counts and the like.
class CheckpointWriter {
 public:
  void add(const std::string& name, const Tensor& t);
  void add_raw(const std::string& name, Shape shape, std::vector<float> data);
  void set_meta(std::string text) { meta_ = std::move(text); }

  /// Writes to a temp file in the target directory, then renames into place.
  void write(const std::string& path) const;

 private:
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::string meta_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& path);

  const std::string& meta() const { return meta_; }
  const std::vector<std::string>& names() const { return names_; }
  bool has(const std::string& name) const;
  Shape shape(const std::string& name) const;
  /// Returns a constant tensor (no grad tracking).
  Tensor tensor(const std::string& name) const;
  /// Raw float payload without tensor construction or finiteness checks.
  /// Needed for entries that carry reinterpreted (non-float) bit patterns.
  const std::vector<float>& raw(const std::string& name) const;

 private:
  struct Entry {
    Shape shape;
    std::vector<float> data;
  };
  std::string meta_;
  std::vector<std::string> names_;
  std::map<std::string, Entry> entries_;
};

}  // namespace mmcl
