#include "hcsc/data.hpp"

#include <cmath>
#include <numeric>

#include "binary_io.hpp"

namespace hcsc {

namespace {

std::vector<std::uint32_t> parse_u32_list(const std::string& s) {
  std::vector<std::uint32_t> out;
  for (const auto& p : split(s, ',')) out.push_back(static_cast<std::uint32_t>(std::stoul(p)));
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& p : split(s, ',')) out.push_back(std::stod(p));
  return out;
}

template <class T>
std::string list_to_string(const std::vector<T>& v) {
  std::vector<std::string> parts;
  for (const auto& x : v) {
    if constexpr (std::is_floating_point_v<T>) {
      parts.push_back(format_double(x));
    } else {
      parts.push_back(std::to_string(x));
    }
  }
  return join(parts, ",");
}

}  // namespace

void GeneratorSpec::validate() const {
  if (depth < 1) throw ConfigError("generator: depth must be >= 1");
  if (branching.size() != depth) {
    throw ConfigError("generator: expected " + std::to_string(depth) + " branching factors, got " +
                      std::to_string(branching.size()));
  }
  for (auto b : branching) {
    if (b < 2) throw ConfigError("generator: every branching factor must be >= 2");
  }
  if (samples_per_leaf < 1) throw ConfigError("generator: samples per leaf must be >= 1");
  if (dim < 1) throw ConfigError("generator: dim must be >= 1");
  if (!(root_radius > 0.0) || !std::isfinite(root_radius)) {
    throw ConfigError("generator: root radius must be positive");
  }
  if (offset_scales.size() != depth - 1) {
    throw ConfigError("generator: expected " + std::to_string(depth - 1) + " offset scales, got " +
                      std::to_string(offset_scales.size()));
  }
  for (double s : offset_scales) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("generator: negative or non-finite offset scale");
  }
  if (!(leaf_noise >= 0.0) || !std::isfinite(leaf_noise)) {
    throw ConfigError("generator: negative or non-finite leaf noise");
  }
  double n = samples_per_leaf;
  for (auto b : branching) n *= b;
  if (n > 4.0e9) throw ConfigError("generator: too many samples");
}

std::size_t GeneratorSpec::leaf_count() const {
  return std::accumulate(branching.begin(), branching.end(), std::size_t{1},
                         [](std::size_t a, std::uint32_t b) { return a * b; });
}

std::size_t GeneratorSpec::label_count(std::size_t level) const {
  if (level >= depth) throw ContractError("label level out of range");
  // Label level 0 is tree depth `depth`; level depth-1 is the roots.
  std::size_t n = 1;
  for (std::size_t d = 0; d < depth - level; ++d) n *= branching[d];
  return n;
}

std::string GeneratorSpec::to_kv() const {
  std::string out;
  out += "depth=" + std::to_string(depth) + "\n";
  out += "branching=" + list_to_string(branching) + "\n";
  out += "samples_per_leaf=" + std::to_string(samples_per_leaf) + "\n";
  out += "dim=" + std::to_string(dim) + "\n";
  out += "root_radius=" + format_double(root_radius) + "\n";
  out += "offset_scales=" + list_to_string(offset_scales) + "\n";
  out += "leaf_noise=" + format_double(leaf_noise) + "\n";
  out += "seed=" + std::to_string(seed) + "\n";
  return out;
}

GeneratorSpec GeneratorSpec::from_kv(std::string_view text) {
  GeneratorSpec spec;
  spec.offset_scales.clear();
  for (const auto& [key, value] : parse_kv_lines(text)) {
    try {
      if (key == "depth") spec.depth = static_cast<std::uint32_t>(std::stoul(value));
      else if (key == "branching") spec.branching = parse_u32_list(value);
      else if (key == "samples_per_leaf") spec.samples_per_leaf = static_cast<std::uint32_t>(std::stoul(value));
      else if (key == "dim") spec.dim = static_cast<std::uint32_t>(std::stoul(value));
      else if (key == "root_radius") spec.root_radius = std::stod(value);
      else if (key == "offset_scales") spec.offset_scales = parse_double_list(value);
      else if (key == "leaf_noise") spec.leaf_noise = std::stod(value);
      else if (key == "seed") spec.seed = std::stoull(value);
      else throw ConfigError("generator: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("generator: bad value for '" + key + "': " + value);
    }
  }
  return spec;
}

std::vector<int> Dataset::labels_at(std::size_t level) const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(static_cast<int>(s.labels.at(level)));
  return out;
}

std::vector<int> Dataset::labels_at(std::size_t level, std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(static_cast<int>(samples.at(i).labels.at(level)));
  return out;
}

Matrix Dataset::features() const {
  Matrix m(static_cast<Eigen::Index>(dim()), static_cast<Eigen::Index>(size()));
  for (std::size_t j = 0; j < size(); ++j) {
    for (std::size_t d = 0; d < dim(); ++d) m(d, j) = samples[j].features[d];
  }
  return m;
}

Matrix Dataset::features(std::span<const std::size_t> indices) const {
  Matrix m(static_cast<Eigen::Index>(dim()), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto& f = samples.at(indices[j]).features;
    for (std::size_t d = 0; d < dim(); ++d) m(d, j) = f[d];
  }
  return m;
}

Dataset generate_hierarchical_mixture(GeneratorSpec spec, std::uint64_t seed) {
  spec.seed = seed;
  spec.validate();
  Rng rng = Rng::substream(seed, Stream::kGenerate);
  const auto dim = static_cast<Eigen::Index>(spec.dim);

  auto gaussian = [&](double scale) {
    Vector v(dim);
    for (Eigen::Index i = 0; i < dim; ++i) v[i] = scale * rng.normal();
    return v;
  };

  // Nodes at the current tree depth, in index order.
  std::vector<Vector> nodes;
  for (std::uint32_t r = 0; r < spec.branching[0]; ++r) {
    Vector v = gaussian(1.0);
    const double n = v.norm();
    if (n > 0.0) v /= n;
    nodes.push_back(spec.root_radius * v);
  }
  for (std::uint32_t d = 1; d < spec.depth; ++d) {
    std::vector<Vector> children;
    children.reserve(nodes.size() * spec.branching[d]);
    for (const auto& parent : nodes) {
      for (std::uint32_t c = 0; c < spec.branching[d]; ++c) {
        children.push_back(parent + gaussian(spec.offset_scales[d - 1]));
      }
    }
    nodes = std::move(children);
  }

  // divisor[l] maps a leaf index to its label at level l.
  std::vector<std::size_t> divisor(spec.depth, 1);
  for (std::size_t l = 1; l < spec.depth; ++l) {
    divisor[l] = divisor[l - 1] * spec.branching[spec.depth - l];
  }

  Dataset ds;
  ds.meta = spec;
  ds.samples.reserve(spec.sample_count());
  for (std::size_t leaf = 0; leaf < nodes.size(); ++leaf) {
    for (std::uint32_t k = 0; k < spec.samples_per_leaf; ++k) {
      Sample s;
      s.id = ds.samples.size();
      Vector x = nodes[leaf] + gaussian(spec.leaf_noise);
      s.features.resize(spec.dim);
      for (Eigen::Index i = 0; i < dim; ++i) s.features[i] = static_cast<float>(x[i]);
      s.labels.resize(spec.depth);
      for (std::size_t l = 0; l < spec.depth; ++l) {
        s.labels[l] = static_cast<std::uint32_t>(leaf / divisor[l]);
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

AugmentationPolicy::AugmentationPolicy(double noise_sigma, double drop_prob, double scale_lo,
                                       double scale_hi)
    : noise_sigma_(noise_sigma), drop_prob_(drop_prob), scale_lo_(scale_lo), scale_hi_(scale_hi) {
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw ConfigError("augmentation: noise sigma must be >= 0");
  }
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) {
    throw ConfigError("augmentation: drop probability must lie in [0, 1)");
  }
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi) || !std::isfinite(scale_hi)) {
    throw ConfigError("augmentation: scale range must satisfy 0 < lo <= hi");
  }
}

Vector augment(std::span<const float> x, const AugmentationPolicy& policy, Rng& rng) {
  const double s = policy.scale_lo() + (policy.scale_hi() - policy.scale_lo()) * rng.uniform();
  const double keep = 1.0 - policy.drop_prob();
  Vector out(static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double eta = policy.noise_sigma() * rng.normal();
    const bool kept = rng.uniform() < keep;
    out[static_cast<Eigen::Index>(i)] = kept ? s * static_cast<double>(x[i]) + eta : 0.0;
  }
  return out;
}

std::string encode_dataset(const Dataset& ds) {
  detail::ByteWriter w;
  w.bytes("HCSD");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.meta.dim));
  w.u32(static_cast<std::uint32_t>(ds.meta.depth));
  for (auto b : ds.meta.branching) w.u32(b);
  for (const auto& s : ds.samples) {
    if (s.labels.size() != ds.meta.depth || s.features.size() != ds.meta.dim) {
      throw ContractError("encode_dataset: sample " + std::to_string(s.id) + " does not match meta");
    }
    w.u64(s.id);
    for (auto l : s.labels) w.u32(l);
    for (float f : s.features) w.f32(f);
  }
  w.block(ds.meta.to_kv());
  return w.take();
}

Dataset decode_dataset(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "HCSD") throw FormatError("bad magic: not an HCSD dataset", 0);
  const auto version = r.u32("version");
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version), 4);
  }
  const auto n = r.u32("sample count");
  const auto dim = r.u32("feature dim");
  const auto depth = r.u32("depth");
  if (depth == 0) r.fail("depth must be >= 1");
  std::vector<std::uint32_t> branching(depth);
  for (auto& b : branching) b = r.u32("branching");
  const std::size_t row_bytes = 8 + 4 * std::size_t{depth} + 4 * std::size_t{dim};
  if (r.remaining() / row_bytes < n) {
    throw FormatError("truncated file: header declares " + std::to_string(n) + " rows", r.offset());
  }

  Dataset ds;
  ds.samples.resize(n);
  for (auto& s : ds.samples) {
    s.id = r.u64("sample id");
    s.labels.resize(depth);
    for (auto& l : s.labels) l = r.u32("label");
    s.features.resize(dim);
    for (auto& f : s.features) f = r.f32("feature");
  }
  const auto meta_offset = r.offset();
  const std::string meta_text = r.block("meta block");
  if (r.remaining() != 0) r.fail("trailing bytes after meta block");
  try {
    ds.meta = GeneratorSpec::from_kv(meta_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed meta block: ") + e.what(), meta_offset);
  }
  if (ds.meta.dim != dim || ds.meta.depth != depth || ds.meta.branching != branching) {
    throw FormatError("meta block disagrees with header", meta_offset);
  }
  const std::size_t header_bytes = 20 + 4 * std::size_t{depth};
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const std::size_t row_offset = header_bytes + i * row_bytes;
    if (s.id != i) throw FormatError("sample ids must be contiguous from 0", row_offset);
    for (std::size_t l = 0; l < depth; ++l) {
      if (s.labels[l] >= ds.meta.label_count(l)) {
        throw FormatError("label out of declared range in sample " + std::to_string(i), row_offset + 8);
      }
    }
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, encode_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

}  // namespace hcsc
