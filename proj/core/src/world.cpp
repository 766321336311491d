#include "mmcl/world.hpp"

#include <cmath>
#include <set>

#include "mmcl/errors.hpp"

namespace mmcl {

namespace {

// Columns of a random matrix orthonormalized in order (Gram-Schmidt).
std::vector<double> random_orthogonal(int d, RngStream& rng) {
  std::vector<double> m(static_cast<std::size_t>(d) * d);
  for (auto& v : m) v = rng.normal();
  for (int c = 0; c < d; ++c) {
    for (int prev = 0; prev < c; ++prev) {
      double dot = 0.0;
      for (int r = 0; r < d; ++r) dot += m[r * d + c] * m[r * d + prev];
      for (int r = 0; r < d; ++r) m[r * d + c] -= dot * m[r * d + prev];
    }
    double norm = 0.0;
    for (int r = 0; r < d; ++r) norm += m[r * d + c] * m[r * d + c];
    norm = std::sqrt(norm);
    if (norm < 1e-8) throw NumericFault("degenerate signature transform column");
    for (int r = 0; r < d; ++r) m[r * d + c] /= norm;
  }
  return m;
}

std::uint64_t fnv1a_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

World::World(const WorldConfig& cfg) : cfg_(cfg) {
  if (cfg.d_model <= 0 || cfg.modalities.empty()) {
    throw ConfigError("world: need a positive feature dim and at least one modality");
  }
  if (cfg.cl_classes_per_modality <= 0 || cfg.subsets <= 0 ||
      cfg.cl_classes_per_modality % cfg.subsets != 0) {
    throw ConfigError("world: continual classes per modality must divide evenly into subsets");
  }
  if (cfg.train_per_class <= 0 || cfg.test_per_class <= 0 ||
      cfg.pretrain_train_per_class <= 0 || cfg.pretrain_held_per_class <= 0) {
    throw ConfigError("world: per-class sample counts must be positive");
  }
  if (cfg.vocab_size <= 0 || cfg.text_len <= 0) {
    throw ConfigError("world: text geometry must be positive");
  }
  if (cfg.noise < 0.0f || cfg.slice_jitter < 0.0f) {
    throw ConfigError("world: noise levels cannot be negative");
  }
  int d = cfg.d_model;

  // Per-modality signature transforms.
  struct Signature {
    std::vector<double> rot;  // d*d, column-orthonormal
    std::vector<double> bias; // d, norm = signature_scale
  };
  std::vector<Signature> signatures;
  for (const auto& geom : cfg.modalities) {
    if (geom.slices <= 0 || geom.tokens <= 0) {
      throw ConfigError("world: modality geometry must be positive for '" + geom.name + "'");
    }
    RngStream rng(cfg.seed, "world/signature/" + geom.name);
    Signature sig;
    sig.rot = random_orthogonal(d, rng);
    sig.bias.resize(static_cast<std::size_t>(d));
    double norm = 0.0;
    for (auto& b : sig.bias) {
      b = rng.normal();
      norm += b * b;
    }
    norm = std::sqrt(norm);
    for (auto& b : sig.bias) b *= cfg.signature_scale / norm;
    signatures.push_back(std::move(sig));
  }

  // Class registry with globally unique text sequences.
  RngStream text_rng(cfg.seed, "world/texts");
  std::set<std::vector<int>> used_texts;
  cl_by_modality_.resize(cfg.modalities.size());
  pretrain_by_modality_.resize(cfg.modalities.size());
  for (std::size_t mi = 0; mi < cfg.modalities.size(); ++mi) {
    int per_mod = cfg.cl_classes_per_modality + cfg.pretrain_classes_per_modality;
    for (int local = 0; local < per_mod; ++local) {
      ClassInfo info;
      info.id = static_cast<int>(classes_.size());
      info.modality = cfg.modalities[mi].name;
      info.modality_index = static_cast<int>(mi);
      info.local_index = local;
      info.pretrain = local >= cfg.cl_classes_per_modality;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s%02d", info.pretrain ? "pre" : "cls",
                    info.pretrain ? local - cfg.cl_classes_per_modality : local);
      info.name = info.modality + "/" + buf;
      do {
        info.text.clear();
        for (int t = 0; t < cfg.text_len; ++t) {
          info.text.push_back(text_rng.uniform_int(0, cfg.vocab_size - 1));
        }
      } while (!used_texts.insert(info.text).second);
      (info.pretrain ? pretrain_by_modality_ : cl_by_modality_)[mi].push_back(info.id);
      classes_.push_back(std::move(info));
    }
  }

  // Sample generation.
  data_.resize(classes_.size());
  for (const ClassInfo& info : classes_) {
    const auto& geom = cfg.modalities[static_cast<std::size_t>(info.modality_index)];
    const auto& sig = signatures[static_cast<std::size_t>(info.modality_index)];
    int S = geom.slices, T = geom.tokens;
    RngStream rng(cfg.seed, "world/samples/" + info.name);
    std::vector<double> proto(static_cast<std::size_t>(T) * d);
    for (auto& v : proto) v = rng.normal();

    auto gen = [&](int n) {
      std::vector<float> out(static_cast<std::size_t>(n) * S * T * d);
      std::vector<double> x(static_cast<std::size_t>(d));
      std::vector<double> jitter(static_cast<std::size_t>(d), 0.0);
      for (int i = 0; i < n; ++i) {
        for (int s = 0; s < S; ++s) {
          if (S > 1) {
            for (auto& j : jitter) j = cfg.slice_jitter * rng.normal();
          }
          for (int t = 0; t < T; ++t) {
            for (int k = 0; k < d; ++k) {
              x[static_cast<std::size_t>(k)] =
                  proto[static_cast<std::size_t>(t) * d + k] + jitter[static_cast<std::size_t>(k)] +
                  cfg.noise * rng.normal();
            }
            std::size_t base =
                ((static_cast<std::size_t>(i) * S + s) * T + t) * static_cast<std::size_t>(d);
            for (int r = 0; r < d; ++r) {
              double acc = sig.bias[static_cast<std::size_t>(r)];
              for (int k = 0; k < d; ++k) acc += sig.rot[static_cast<std::size_t>(r) * d + k] *
                                                 x[static_cast<std::size_t>(k)];
              out[base + r] = static_cast<float>(acc);
            }
          }
        }
      }
      return out;
    };

    int train_n = info.pretrain ? cfg.pretrain_train_per_class : cfg.train_per_class;
    int test_n = info.pretrain ? cfg.pretrain_held_per_class : cfg.test_per_class;
    ClassData cd;
    cd.train = Tensor::from_data({train_n, S, T, d}, gen(train_n));
    cd.test = Tensor::from_data({test_n, S, T, d}, gen(test_n));
    data_[static_cast<std::size_t>(info.id)] = std::move(cd);
  }
}

const ModalityGeometry& World::geometry(int modality_index) const {
  if (modality_index < 0 || modality_index >= num_modalities()) {
    throw UsageError("world: modality index out of range");
  }
  return cfg_.modalities[static_cast<std::size_t>(modality_index)];
}

int World::modality_index(const std::string& name) const {
  for (std::size_t i = 0; i < cfg_.modalities.size(); ++i) {
    if (cfg_.modalities[i].name == name) return static_cast<int>(i);
  }
  throw UsageError("world: unknown modality '" + name + "'");
}

const ClassInfo& World::class_info(int id) const {
  if (id < 0 || id >= static_cast<int>(classes_.size())) {
    throw UsageError("world: class id out of range");
  }
  return classes_[static_cast<std::size_t>(id)];
}

const std::vector<int>& World::cl_classes(const std::string& modality) const {
  return cl_by_modality_[static_cast<std::size_t>(modality_index(modality))];
}

const std::vector<int>& World::pretrain_classes(const std::string& modality) const {
  return pretrain_by_modality_[static_cast<std::size_t>(modality_index(modality))];
}

const World::ClassData& World::data(int class_id) const {
  class_info(class_id);
  return data_[static_cast<std::size_t>(class_id)];
}

std::vector<int> World::text_tokens(const std::vector<int>& class_ids) const {
  std::vector<int> out;
  out.reserve(class_ids.size() * static_cast<std::size_t>(cfg_.text_len));
  for (int id : class_ids) {
    const auto& t = class_info(id).text;
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

std::uint64_t World::content_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const ClassInfo& info : classes_) {
    h = fnv1a_bytes(h, info.name.data(), info.name.size());
    h = fnv1a_bytes(h, info.text.data(), info.text.size() * sizeof(int));
    const ClassData& cd = data_[static_cast<std::size_t>(info.id)];
    h = fnv1a_bytes(h, cd.train.data().data(), cd.train.data().size() * sizeof(float));
    h = fnv1a_bytes(h, cd.test.data().data(), cd.test.data().size() * sizeof(float));
  }
  return h;
}

}  // namespace mmcl
