#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "gradnet/net.hpp"

namespace gradnet {

// Checkpoint container: 8-byte magic, u64 manifest length, JSON manifest,
// then the raw little-endian f64 array payload. The manifest carries the
// named array table plus the config echo, step counter and seed, so the file
// is self-describing and byte-stable for identical parameters.

inline constexpr char kCheckpointMagic[8] = {'G', 'N', 'C', 'K', 'P', 'T', '0', '1'};

struct CheckpointMeta {
  long step = 0;
  std::uint64_t seed = 0;
  std::string variant = "ours";
  std::map<std::string, std::string> config_echo;  // raw key=value view
};

namespace detail {

inline nlohmann::json net_config_json(const NetConfig& c) {
  nlohmann::json j;
  j["paper_scale"] = c.paper_scale;
  j["in_channels"] = c.in_channels;
  j["z_crop"] = c.z_crop;
  j["x_crop"] = c.x_crop;
  j["template_size"] = c.template_size;
  j["score_size"] = c.score_size;
  j["u2_kernel"] = c.u2_kernel;
  j["u2_layers"] = c.u2_layers;
  j["u2_standardize"] = c.u2_standardize;
  for (int i = 0; i < 5; ++i) {
    nlohmann::json l;
    l["out_c"] = c.conv[i].out_c;
    l["kernel"] = c.conv[i].kernel;
    l["stride"] = c.conv[i].stride;
    l["pool"] = c.conv[i].pool;
    j["conv"].push_back(l);
  }
  return j;
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  c.paper_scale = j.at("paper_scale").get<bool>();
  c.in_channels = j.at("in_channels").get<int>();
  c.z_crop = j.at("z_crop").get<int>();
  c.x_crop = j.at("x_crop").get<int>();
  c.template_size = j.at("template_size").get<int>();
  c.score_size = j.at("score_size").get<int>();
  c.u2_kernel = j.at("u2_kernel").get<int>();
  c.u2_layers = j.at("u2_layers").get<int>();
  c.u2_standardize = j.at("u2_standardize").get<bool>();
  for (int i = 0; i < 5; ++i) {
    const auto& l = j.at("conv").at(static_cast<std::size_t>(i));
    c.conv[i].out_c = l.at("out_c").get<int>();
    c.conv[i].kernel = l.at("kernel").get<int>();
    c.conv[i].stride = l.at("stride").get<int>();
    c.conv[i].pool = l.at("pool").get<bool>();
  }
  c.validate();
  return c;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& model,
                            const CheckpointMeta& meta = {}) {
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["step"] = meta.step;
  manifest["seed"] = meta.seed;
  manifest["variant"] = meta.variant;
  manifest["share_u1"] = model.share_u1;
  manifest["net_config"] = detail::net_config_json(model.cfg);
  manifest["config_echo"] = meta.config_echo;

  auto arrays = model.named_tensors();
  std::size_t offset = 0;
  for (const auto& [name, t] : arrays) {
    nlohmann::json a;
    a["name"] = name;
    a["dtype"] = "f64";
    a["shape"] = t->dims();
    a["offset"] = offset;
    a["nbytes"] = t->numel() * sizeof(double);
    manifest["arrays"].push_back(a);
    offset += t->numel() * sizeof(double);
  }

  const std::string mtext = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(detail::cat("cannot write checkpoint ", path.string()));
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t mlen = mtext.size();
  os.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  os.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& [name, t] : arrays)
    os.write(reinterpret_cast<const char*>(t->data()),
             static_cast<std::streamsize>(t->numel() * sizeof(double)));
  if (!os) throw IoError(detail::cat("short write to checkpoint ", path.string()));
}

inline ModelParams load_checkpoint(const std::filesystem::path& path,
                                   CheckpointMeta* meta_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(detail::cat("cannot read checkpoint ", path.string()));
  char magic[8];
  is.read(magic, sizeof(magic));
  if (is.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError(detail::cat(path.string(), ": not a gradnet checkpoint"));
  std::uint64_t mlen = 0;
  is.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mtext(mlen, '\0');
  is.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (is.gcount() != static_cast<std::streamsize>(mlen))
    throw IoError(detail::cat(path.string(), ": truncated manifest"));
  nlohmann::json manifest = nlohmann::json::parse(mtext, nullptr, false);
  if (manifest.is_discarded())
    throw IoError(detail::cat(path.string(), ": manifest is not valid JSON"));

  ModelParams model;
  model.cfg = detail::net_config_from_json(manifest.at("net_config"));
  model.share_u1 = manifest.value("share_u1", true);
  ModelParams fresh = ModelParams::init(model.cfg, 0);
  model.backbone = fresh.backbone;
  model.u1 = fresh.u1;
  model.u1_final = fresh.u1_final;
  model.u2 = fresh.u2;
  model.adjust_gain = fresh.adjust_gain;
  model.adjust_bias = fresh.adjust_bias;

  std::map<std::string, Tensor*> by_name;
  for (auto& [name, t] : model.named_tensors()) by_name[name] = t;

  const std::streampos data_start = is.tellg();
  for (const auto& a : manifest.at("arrays")) {
    const std::string name = a.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw IoError(detail::cat(path.string(), ": unknown array '", name, "'"));
    const std::vector<int> shape = a.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    if (t.numel() * sizeof(double) != a.at("nbytes").get<std::size_t>())
      throw IoError(detail::cat(path.string(), ": inconsistent nbytes for '", name, "'"));
    if (!it->second->same_shape(t))
      throw IoError(detail::cat(path.string(), ": array '", name, "' has shape ",
                                t.shape_str(), ", config expects ",
                                it->second->shape_str()));
    is.seekg(data_start + static_cast<std::streamoff>(a.at("offset").get<std::size_t>()));
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (is.gcount() != static_cast<std::streamsize>(t.numel() * sizeof(double)))
      throw IoError(detail::cat(path.string(), ": truncated payload for '", name, "'"));
    *it->second = std::move(t);
  }

  if (meta_out) {
    meta_out->step = manifest.value("step", 0L);
    meta_out->seed = manifest.value("seed", std::uint64_t{0});
    meta_out->variant = manifest.value("variant", std::string("ours"));
    if (manifest.contains("config_echo"))
      meta_out->config_echo =
          manifest.at("config_echo").get<std::map<std::string, std::string>>();
  }
  return model;
}

}  // namespace gradnet
