#include "core/checkpoint.hpp"

#include <fstream>

#include "core/errors.hpp"

#include "json.hpp"

namespace latdyn {

namespace {

nlohmann::json tensor_to_json(const Tensor& t) {
  nlohmann::json j;
  j["shape"] = t.shape();
  j["data"] = t.vec();
  return j;
}

Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<std::vector<std::size_t>>(),
                j.at("data").get<std::vector<double>>());
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = ck.version;
  j["method"] = ck.method;
  j["system"] = ck.system;
  j["spec_hash"] = ck.spec_hash;
  j["config_hash"] = ck.config_hash;
  j["kind"] = mod_kind_name(ck.model.kind);
  j["generic"] = ck.model.generic;
  nlohmann::json arch;
  arch["width"] = ck.model.arch.width;
  arch["depth"] = ck.model.arch.depth;
  arch["z_dim"] = ck.model.arch.z_dim;
  arch["rank"] = ck.model.arch.rank;
  arch["d1"] = ck.model.arch.d1;
  arch["d2"] = ck.model.arch.d2;
  arch["w_ortho"] = ck.model.arch.w_ortho;
  arch["w_l1"] = ck.model.arch.w_l1;
  arch["hyper_gain"] = ck.model.arch.hyper_gain;
  arch["init_scale"] = ck.model.arch.init_scale;
  j["arch"] = arch;
  j["n_q"] = ck.model.n_q;
  j["n_s"] = ck.model.n_s;
  j["additive_friction"] = ck.model.additive_friction;

  nlohmann::json params;
  auto& model = const_cast<DynamicsModel&>(ck.model);
  for (const auto& p : model.params()) params[p.name] = tensor_to_json(*p.tensor);
  j["params"] = params;

  nlohmann::json latents;
  for (std::size_t i = 0; i < ck.latents.size(); ++i)
    latents[std::to_string(ck.latent_tasks[i])] = ck.latents[i].vec();
  j["latents"] = latents;

  std::ofstream out(path);
  if (!out) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  out << j.dump() << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const SystemSpec& spec) {
  std::ifstream in(path);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  Checkpoint ck;
  ck.version = j.at("version").get<int>();
  if (ck.version != 1) throw DataError("checkpoint: unsupported version");
  ck.method = j.at("method").get<std::string>();
  ck.system = j.at("system").get<std::string>();
  ck.spec_hash = j.at("spec_hash").get<std::uint64_t>();
  ck.config_hash = j.at("config_hash").get<std::uint64_t>();

  ArchConfig arch;
  arch.width = j.at("arch").at("width").get<int>();
  arch.depth = j.at("arch").at("depth").get<int>();
  arch.z_dim = j.at("arch").at("z_dim").get<int>();
  arch.rank = j.at("arch").at("rank").get<int>();
  arch.d1 = j.at("arch").at("d1").get<int>();
  arch.d2 = j.at("arch").at("d2").get<int>();
  arch.w_ortho = j.at("arch").at("w_ortho").get<double>();
  arch.w_l1 = j.at("arch").at("w_l1").get<double>();
  if (j.at("arch").contains("hyper_gain"))
    arch.hyper_gain = j.at("arch").at("hyper_gain").get<double>();
  if (j.at("arch").contains("init_scale"))
    arch.init_scale = j.at("arch").at("init_scale").get<double>();

  ck.model = DynamicsModel::make(spec, arch, mod_kind_from_name(j.at("kind").get<std::string>()),
                                 RngStream(0));
  ck.model.additive_friction = j.at("additive_friction").get<bool>();
  if (ck.model.generic != j.at("generic").get<bool>())
    throw DataError("checkpoint: system class does not match the checkpointed model");
  auto refs = ck.model.params();
  const auto& params = j.at("params");
  for (auto& p : refs) {
    if (!params.contains(p.name)) throw DataError("checkpoint: missing parameter " + p.name);
    Tensor t = tensor_from_json(params.at(p.name));
    if (!t.same_shape(*p.tensor))
      throw DataError("checkpoint: parameter " + p.name + " has mismatched shape");
    *p.tensor = std::move(t);
  }

  for (const auto& [key, val] : j.at("latents").items()) {
    ck.latent_tasks.push_back(std::stoi(key));
    ck.latents.push_back(Tensor::vector(val.get<std::vector<double>>()));
  }
  return ck;
}

}  // namespace latdyn
