#include "hcsc/checkpoint.hpp"

#include "binary_io.hpp"

namespace hcsc {

namespace {

std::string sizes_to_string(const std::vector<std::size_t>& v) {
  std::vector<std::string> parts;
  for (auto x : v) parts.push_back(std::to_string(x));
  return join(parts, ",");
}

void write_params(detail::ByteWriter& w, const EncoderParams& p) {
  for (double x : p.flatten()) w.f32(static_cast<float>(x));
}

EncoderParams read_params(detail::ByteReader& r, const std::vector<std::size_t>& sizes,
                          Activation act, const char* what) {
  EncoderParams p;
  p.activation = act;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const auto in = static_cast<Eigen::Index>(sizes[i]);
    const auto out = static_cast<Eigen::Index>(sizes[i + 1]);
    p.layers.push_back({Matrix::Zero(out, in), Vector::Zero(out)});
  }
  std::vector<double> flat(p.parameter_count());
  for (auto& x : flat) x = r.f32(what);
  p.unflatten(flat);
  return p;
}

}  // namespace

NegativeQueue Checkpoint::make_queue() const {
  NegativeQueue q(queue_capacity, static_cast<std::size_t>(queue_keys.rows()));
  if (queue_keys.cols() > 0) q.push(queue_keys, queue_ids);
  return q;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.online.same_shape(ckpt.momentum) || !ckpt.online.same_shape(ckpt.velocity)) {
    throw ContractError("encode_checkpoint: online/momentum/velocity shapes differ");
  }
  if (static_cast<std::size_t>(ckpt.queue_keys.cols()) != ckpt.queue_ids.size()) {
    throw ContractError("encode_checkpoint: queue ids do not match queue keys");
  }
  std::vector<std::string> ids;
  ids.reserve(ckpt.queue_ids.size());
  for (auto id : ckpt.queue_ids) ids.push_back(std::to_string(id));

  std::string echo;
  echo += "ckpt.epoch=" + std::to_string(ckpt.epoch) + "\n";
  echo += "ckpt.step=" + std::to_string(ckpt.step) + "\n";
  echo += "ckpt.layer_sizes=" + sizes_to_string(ckpt.layer_sizes) + "\n";
  echo += "ckpt.activation=" + to_string(ckpt.activation) + "\n";
  echo += "ckpt.ema_m=" + format_double(ckpt.ema_m) + "\n";
  echo += "ckpt.queue_capacity=" + std::to_string(ckpt.queue_capacity) + "\n";
  echo += "ckpt.queue_size=" + std::to_string(ckpt.queue_ids.size()) + "\n";
  echo += "ckpt.queue_ids=" + join(ids, ",") + "\n";
  echo += ckpt.config_text;

  detail::ByteWriter w;
  w.bytes("HCSC");
  w.u32(kCheckpointVersion);
  w.block(echo);
  write_params(w, ckpt.online);
  write_params(w, ckpt.momentum);
  for (Eigen::Index c = 0; c < ckpt.queue_keys.cols(); ++c) {
    for (Eigen::Index r = 0; r < ckpt.queue_keys.rows(); ++r) w.f32(static_cast<float>(ckpt.queue_keys(r, c)));
  }
  write_params(w, ckpt.velocity);
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "HCSC") throw FormatError("bad magic: not an HCSC checkpoint", 0);
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const auto echo_offset = r.offset();
  const std::string echo = r.block("config echo");

  Checkpoint ckpt;
  std::size_t queue_size = 0;
  try {
    for (const auto& raw : split(echo, '\n')) {
      if (raw.rfind("ckpt.", 0) != 0) {
        if (!raw.empty()) ckpt.config_text += raw + "\n";
        continue;
      }
      const auto eq = raw.find('=');
      if (eq == std::string::npos) throw ConfigError("bad line " + raw);
      const std::string key = raw.substr(5, eq - 5);
      const std::string value = raw.substr(eq + 1);
      if (key == "epoch") ckpt.epoch = std::stoull(value);
      else if (key == "step") ckpt.step = std::stoull(value);
      else if (key == "layer_sizes") {
        for (const auto& p : split(value, ',')) ckpt.layer_sizes.push_back(std::stoul(p));
      } else if (key == "activation") ckpt.activation = activation_from_string(value);
      else if (key == "ema_m") ckpt.ema_m = std::stod(value);
      else if (key == "queue_capacity") ckpt.queue_capacity = std::stoul(value);
      else if (key == "queue_size") queue_size = std::stoul(value);
      else if (key == "queue_ids") {
        for (const auto& p : split(value, ',')) ckpt.queue_ids.push_back(std::stoll(p));
      } else {
        throw ConfigError("unknown key ckpt." + key);
      }
    }
  } catch (const std::exception& e) {
    throw FormatError(std::string("malformed checkpoint echo block: ") + e.what(), echo_offset);
  }
  if (ckpt.layer_sizes.size() < 2) throw FormatError("checkpoint declares no layers", echo_offset);
  if (ckpt.queue_ids.size() != queue_size || queue_size > ckpt.queue_capacity) {
    throw FormatError("checkpoint queue metadata is inconsistent", echo_offset);
  }

  ckpt.online = read_params(r, ckpt.layer_sizes, ckpt.activation, "online params");
  ckpt.momentum = read_params(r, ckpt.layer_sizes, ckpt.activation, "momentum params");
  const auto dim = static_cast<Eigen::Index>(ckpt.layer_sizes.back());
  ckpt.queue_keys.resize(dim, static_cast<Eigen::Index>(queue_size));
  for (Eigen::Index c = 0; c < ckpt.queue_keys.cols(); ++c) {
    for (Eigen::Index row = 0; row < dim; ++row) ckpt.queue_keys(row, c) = r.f32("queue keys");
  }
  ckpt.velocity = read_params(r, ckpt.layer_sizes, ckpt.activation, "velocity");
  if (r.remaining() != 0) r.fail("trailing bytes after checkpoint tensors");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace hcsc
