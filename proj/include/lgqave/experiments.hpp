#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lgqave/synthbench.hpp"
#include "lgqave/training.hpp"

namespace lgqave {

// ---------------------------------------------------------------------------
// Model files: model.json (config + parameter index) next to one tensor file
// per parameter.

class ModelFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"c", c.qdgt.c},           {"c_text", c.qdgt.c_text},   {"d", c.qdgt.d},
          {"heads", c.qdgt.heads},   {"layers", c.qdgt.layers},   {"pool", to_string(c.qdgt.pool)},
          {"beta", c.beta},          {"gamma", c.gamma},          {"temperature", c.temperature},
          {"sampling", c.sampling},  {"grounding", c.grounding},  {"local_repr", c.local_repr},
          {"global_repr", c.global_repr}, {"selector_sharpness", c.selector_sharpness}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.qdgt.c = j.at("c").get<std::size_t>();
    c.qdgt.c_text = j.at("c_text").get<std::size_t>();
    c.qdgt.d = j.at("d").get<std::size_t>();
    c.qdgt.heads = j.at("heads").get<std::size_t>();
    c.qdgt.layers = j.at("layers").get<std::size_t>();
    c.qdgt.pool = parse_pool_mode(j.at("pool").get<std::string>());
    c.beta = j.at("beta").get<double>();
    c.gamma = j.at("gamma").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.sampling = j.at("sampling").get<bool>();
    c.grounding = j.at("grounding").get<bool>();
    c.local_repr = j.at("local_repr").get<bool>();
    c.global_repr = j.at("global_repr").get<bool>();
    c.selector_sharpness = j.at("selector_sharpness").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ModelFileError(std::string("model config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ModelFileError(std::string("model config: ") + e.what());
  }
  return c;
}

inline void save_model(const Model<float>& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "params");
  nlohmann::json index = nlohmann::json::array();
  for (ParamId p = 0; p < m.params.size(); ++p) {
    const std::string file = "params/" + std::to_string(p) + ".lgqt";
    data::write_tensor(dir / file, m.params.value(p));
    index.push_back({{"name", m.params.name(p)}, {"file", file}});
  }
  std::ofstream out(dir / "model.json");
  out << nlohmann::json{{"config", model_config_json(m.config())}, {"params", index}}.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "model.json").string());
}

/// Rebuilds the layout from the stored config, then overwrites every value.
inline Model<float> load_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw ModelFileError("cannot open " + (dir / "model.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ModelFileError((dir / "model.json").string() + ": " + e.what());
  }
  if (!j.contains("config")) throw ModelFileError("model file has no config");
  auto m = Model<float>::create(model_config_from_json(j["config"]), 0);
  std::size_t seen = 0;
  if (!j.contains("params") || !j["params"].is_array()) throw ModelFileError("model file lists no parameters");
  for (const auto& e : j["params"]) {
    if (!e.contains("name") || !e.contains("file")) throw ModelFileError("parameter entry needs name and file");
    const auto name = e["name"].get<std::string>();
    if (!m.params.contains(name)) throw ModelFileError("model file has unknown parameter " + name);
    auto& v = m.params.value(m.params.id(name));
    auto t = data::read_tensor(dir / e["file"].get<std::string>());
    if (t.shape() != v.shape()) throw ModelFileError("parameter " + name + " has shape " + shape_str(t.shape()));
    v = std::move(t);
    ++seen;
  }
  if (seen != m.params.size()) throw ModelFileError("model file is missing parameters");
  return m;
}

// ---------------------------------------------------------------------------
// Ablation matrix

struct AblationRow {
  std::string name;
  std::string description;
  ModelConfig config;
};

/// C-1 ... C-5 toggles applied on top of `base`.
inline std::vector<AblationRow> ablation_rows(const ModelConfig& base) {
  auto with = [&](bool sampling, bool grounding, bool local) {
    ModelConfig c = base;
    c.sampling = sampling;
    c.grounding = grounding;
    c.local_repr = local;
    c.global_repr = true;
    return c;
  };
  return {{"C-1", "all frames, frame features, global only", with(false, false, false)},
          {"C-2", "+ frame sampling", with(true, false, false)},
          {"C-3", "+ object grounding", with(true, true, false)},
          {"C-4", "sampling + local/global, no grounding", with(true, false, true)},
          {"C-5", "full model", with(true, true, true)}};
}

struct RunOutcome {
  TrainResult train;
  double test_accuracy = 0.0;
};

/// Fresh model, train on train/val, score the test split.
inline RunOutcome train_and_test(const ModelConfig& mc, const TrainConfig& tc, const synth::Splits& data,
                                 std::uint64_t model_seed, std::ostream* metrics = nullptr) {
  auto m = Model<float>::create(mc, model_seed);
  RunOutcome r;
  r.train = train(m, data.train, data.val, tc, metrics);
  r.test_accuracy = evaluate_accuracy(m, data.test, tc.threads ? tc.threads : default_threads());
  return r;
}

// ---------------------------------------------------------------------------
// Gradient oracle on a toy episode

struct ToyShape {
  std::size_t frames = 1, objects = 3, options = 3, patches = 4, tokens = 3, c = 8, d = 16;
};

inline data::Episode toy_episode(Rng& rng, const ToyShape& s, const std::string& id) {
  data::Episode ep;
  ep.video_id = id;
  auto fill = [&](Tensor<float>& t) {
    for (auto& v : t.storage()) v = static_cast<float>(rng.uniform(-1, 1));
  };
  for (std::size_t t = 0; t < s.frames; ++t) {
    data::FrameRecord f;
    f.t = static_cast<int>(t);
    f.patch_embeddings = Tensor<float>({s.patches, s.c});
    f.roi_features = Tensor<float>({s.objects, s.c});
    f.spatial_features = Tensor<float>({s.objects, 4});
    f.frame_feature = Tensor<float>({s.c});
    fill(f.patch_embeddings);
    fill(f.roi_features);
    fill(f.frame_feature);
    for (std::size_t i = 0; i < s.objects; ++i) {
      const auto x = static_cast<float>(rng.uniform(0, 0.5)), y = static_cast<float>(rng.uniform(0, 0.5));
      f.boxes.push_back({x, y, x + 0.3f, y + 0.4f});
      f.spatial_features(i, 0) = x;
      f.spatial_features(i, 1) = y;
      f.spatial_features(i, 2) = x + 0.3f;
      f.spatial_features(i, 3) = y + 0.4f;
    }
    ep.frames.push_back(std::move(f));
  }
  ep.question_tokens = Tensor<float>({s.tokens, s.c});
  ep.answer_bank = Tensor<float>({s.options, s.c});
  fill(ep.question_tokens);
  fill(ep.answer_bank);
  ep.label = rng.below(s.options);
  ep.category = "toy";
  return ep;
}

/// Central-difference check of the multi-choice training objective against
/// the analytic gradient, for every parameter tensor (double precision).
/// The scoring heads are randomized so that every path carries gradient.
inline std::vector<ParamCheck> gradient_oracle(std::uint64_t seed, const ToyShape& s = {}) {
  ModelConfig cfg;
  cfg.qdgt.c = s.c;
  cfg.qdgt.c_text = s.c;
  cfg.qdgt.d = s.d;
  auto m = Model<double>::create(cfg, seed);
  Rng rng(derive_seed(seed, 0x6c));
  for (ParamId id : {m.layout.head.w_cat, m.layout.head.w_oe})
    for (auto& v : m.params.value(id).storage()) v = rng.uniform(-0.3, 0.3);
  std::vector<data::Episode> eps{toy_episode(rng, s, "toy0"), toy_episode(rng, s, "toy1")};
  std::vector<const data::Episode*> batch{&eps[0], &eps[1]};
  TrainConfig tc;
  const auto mask = all_tokens(s.tokens);
  std::function<Var<double>(Tape<double>&)> loss = [&](Tape<double>& tape) {
    auto b = BoundModel<double>::bind(m.layout, tape);
    return episode_loss(forward_in_batch(0, batch, b, tc, mask, 0), tc).objective;
  };
  return grad_check_params<double>(m.params, loss, 1e-4);
}

}  // namespace lgqave
