// lgqave command-line front end: dataset generation, training, evaluation
// and diagnostics over the interchange format.

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lgqave/run_config.hpp"

using namespace lgqave;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta, gamma, lambda;
  std::optional<std::string> pool, out, data, model, split;
  bool no_sampling = false, no_grounding = false, no_local = false;
  bool deterministic = false;
  std::vector<std::string> sets;  // extra key=value overrides
};

/// Layers: defaults, then the config file, then --set pairs, then named flags.
RunConfig resolve(const Flags& f, bool seed_is_generator) {
  RunConfig rc;
  if (!f.config.empty()) apply_config_file(rc, f.config);
  for (const auto& kv : f.sets) apply_config_text(rc, kv, "--set");
  if (f.seed) (seed_is_generator ? rc.synth.seed : rc.train.seed) = *f.seed;
  if (f.beta) rc.model.beta = *f.beta;
  if (f.gamma) rc.model.gamma = *f.gamma;
  if (f.lambda) rc.train.lambda = *f.lambda;
  if (f.pool) rc.set("pool", *f.pool);
  if (f.out) rc.out_dir = *f.out;
  if (f.data) rc.data_dir = *f.data;
  if (f.model) rc.model_dir = *f.model;
  if (f.split) rc.set("split", *f.split);
  if (f.no_sampling) rc.model.sampling = false;
  if (f.no_grounding) rc.model.grounding = false;
  if (f.no_local) rc.model.local_repr = false;
  rc.validate();
  return rc;
}

/// Inference switches given explicitly on the command line also apply to a
/// loaded model.
void override_inference(ModelConfig& mc, const Flags& f) {
  if (f.beta) mc.beta = *f.beta;
  if (f.gamma) mc.gamma = *f.gamma;
  if (f.pool) mc.qdgt.pool = parse_pool_mode(*f.pool);
  if (f.no_sampling) mc.sampling = false;
  if (f.no_grounding) mc.grounding = false;
  if (f.no_local) mc.local_repr = false;
  mc.validate();
}

/// Dataset from --data, or generated in memory from the synth settings.
synth::Splits load_splits(const RunConfig& rc) {
  if (rc.data_dir.empty()) return synth::generate_splits(rc.synth);
  const std::filesystem::path d = rc.data_dir;
  synth::Splits s;
  s.train = data::load_manifest(d / "train.ndjson");
  s.val = data::load_manifest(d / "val.ndjson");
  s.test = data::load_manifest(d / "test.ndjson");
  return s;
}

const std::vector<data::Episode>& pick(const synth::Splits& s, const std::string& split) {
  return split == "train" ? s.train : split == "val" ? s.val : s.test;
}

Model<float> model_for(const RunConfig& rc, const Flags& f) {
  if (rc.model_dir.empty()) return Model<float>::create(rc.model, rc.train.seed);
  auto m = load_model(rc.model_dir);
  override_inference(m.layout.cfg, f);
  return m;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

int run_synth(const Flags& f) {
  auto rc = resolve(f, true);
  if (rc.out_dir.empty()) throw ConfigError("synth needs --out DIR");
  synth::generate_dataset(rc.synth, rc.out_dir);
  const auto b = synth::split_bounds(rc.synth.n_episodes);
  const auto test = synth::generate_episodes(rc.synth, b.val_end, b.total);
  std::cout << json{{"out", rc.out_dir},
                    {"train", b.train_end},
                    {"val", b.val_end - b.train_end},
                    {"test", b.total - b.val_end},
                    {"oracle_test_accuracy", synth::oracle_accuracy(test, synth::make_prototypes(rc.synth))}}
                   .dump()
            << '\n';
  return kOk;
}

int run_select(const Flags& f) {
  auto rc = resolve(f, false);
  const auto splits = load_splits(rc);
  const auto m = model_for(rc, f);
  Tape<float> tape(m.params, false);
  auto bound = BoundModel<float>::bind(m.layout, tape);
  for (const auto& ep : pick(splits, rc.split)) {
    auto out = forward_episode(ep, bound, all_tokens(ep.question_tokens.dim(0)));
    const auto& s = out.selection;
    std::vector<std::uint8_t> kept(s.scores.size(), 0), window(s.scores.size(), 0);
    for (auto t : s.kept) kept[t] = 1;
    for (auto t : s.windows) window[t] = 1;
    for (std::size_t t = 0; t < s.scores.size(); ++t) {
      std::cout << json{{"video_id", ep.video_id}, {"t", ep.frames[t].t},         {"s_t", s.scores[t]},
                        {"s_norm", s.normalized[t]}, {"kept", kept[t] != 0}, {"in_window", window[t] != 0}}
                       .dump()
                << '\n';
    }
  }
  return kOk;
}

int run_graphs(const Flags& f) {
  auto rc = resolve(f, false);
  const auto splits = load_splits(rc);
  const auto m = model_for(rc, f);
  Tape<float> tape(m.params, false);
  auto bound = BoundModel<float>::bind(m.layout, tape);
  for (const auto& ep : pick(splits, rc.split)) {
    auto out = forward_episode(ep, bound, all_tokens(ep.question_tokens.dim(0)));
    auto clips = build_graph_sequence(ep, out.selection, bound.qdgt.graph, m.config().grounding);
    for (const auto& clip : clips) {
      for (const auto& g : clip) {
        const auto& a = g.adjacency.value();
        double worst = 0.0;
        for (std::size_t r = 0; r < a.dim(0); ++r) {
          double sum = 0.0;
          for (std::size_t c = 0; c < a.dim(1); ++c) sum += a(r, c);
          worst = std::max(worst, std::abs(sum - 1.0));
        }
        std::cout << json{{"video_id", ep.video_id}, {"clip", g.clip},     {"t", ep.frames[g.t].t},
                          {"nodes", g.size()},       {"objects", g.num_objects()}, {"score", g.score},
                          {"row_sum_error", worst}}
                         .dump()
                  << '\n';
      }
    }
  }
  return kOk;
}

int run_train(const Flags& f) {
  auto rc = resolve(f, false);
  if (rc.out_dir.empty()) throw ConfigError("train needs --out DIR");
  const auto splits = load_splits(rc);
  std::filesystem::create_directories(rc.out_dir);
  std::ofstream metrics(std::filesystem::path(rc.out_dir) / "metrics.ndjson");
  const auto t0 = std::chrono::steady_clock::now();
  auto m = Model<float>::create(rc.model, rc.train.seed);
  auto r = train(m, splits.train, splits.val, rc.train, &metrics);
  save_model(m, rc.out_dir);
  json summary{{"epochs_run", r.epochs_run},
               {"steps", r.steps},
               {"best_epoch", r.best_epoch},
               {"best_val_accuracy", r.best_val_accuracy},
               {"test_accuracy", splits.test.empty() ? 0.0 : evaluate_accuracy(m, splits.test, default_threads())},
               {"model", rc.out_dir}};
  if (!f.deterministic) summary["seconds"] = seconds_since(t0);
  std::cout << summary.dump() << '\n';
  return kOk;
}

int run_eval(const Flags& f) {
  auto rc = resolve(f, false);
  if (rc.model_dir.empty()) throw ConfigError("eval needs --model DIR");
  const auto splits = load_splits(rc);
  const auto m = model_for(rc, f);
  const auto& eps = pick(splits, rc.split);
  std::cout << json{{"split", rc.split}, {"episodes", eps.size()}, {"accuracy", evaluate_accuracy(m, eps, default_threads())}}
                   .dump()
            << '\n';
  return kOk;
}

int run_gradcheck(const Flags& f) {
  auto rc = resolve(f, false);
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = gradient_oracle(rc.train.seed);
  double worst = 0.0;
  for (const auto& c : checks) {
    std::cout << json{{"param", c.name}, {"elements", c.elements}, {"max_rel_error", c.max_rel_error}}.dump() << '\n';
    worst = std::max(worst, c.max_rel_error);
  }
  json summary{{"max_rel_error", worst}, {"tolerance", 1e-3}, {"pass", worst <= 1e-3}};
  if (!f.deterministic) summary["seconds"] = seconds_since(t0);
  std::cout << summary.dump() << '\n';
  return worst <= 1e-3 ? kOk : kNumeric;
}

int run_ablate(const Flags& f) {
  auto rc = resolve(f, false);
  const auto splits = load_splits(rc);
  std::ostringstream table;
  table << "| Config | Sampling | Grounding | Local | Global | Accuracy |\n"
        << "|--------|----------|-----------|-------|--------|----------|\n";
  auto mark = [](bool b) { return b ? "yes" : "no"; };
  for (const auto& row : ablation_rows(rc.model)) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = train_and_test(row.config, rc.train, splits, rc.train.seed);
    char acc[32];
    std::snprintf(acc, sizeof acc, "%.4f", r.test_accuracy);
    table << "| " << row.name << "    | " << std::left << std::setw(8) << mark(row.config.sampling) << " | "
          << std::setw(9) << mark(row.config.grounding) << " | " << std::setw(5) << mark(row.config.local_repr)
          << " | " << std::setw(6) << mark(row.config.global_repr) << " | " << std::setw(8) << acc << " |\n";
    if (!f.deterministic) std::cerr << row.name << " done in " << seconds_since(t0) << " s\n";
  }
  std::cout << table.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Question-guided video question answering: data, training and diagnostics"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&f](CLI::App* sub) {
    sub->add_option("--config", f.config, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "run seed (generator seed for synth)");
    sub->add_option("--beta", f.beta, "frame selection threshold in [0, 1]");
    sub->add_option("--gamma", f.gamma, "local/global blend in [0, 1]");
    sub->add_option("--lambda", f.lambda, "weight of the video-question contrast");
    sub->add_option("--pool", f.pool, "global pooling")->check(CLI::IsMember({"mean", "max"}));
    sub->add_flag("--no-sampling", f.no_sampling, "keep every sampled frame");
    sub->add_flag("--no-grounding", f.no_grounding, "frame node only, no object boxes");
    sub->add_flag("--no-local", f.no_local, "global representation only");
    sub->add_flag("--deterministic", f.deterministic, "suppress timing fields");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--data", f.data, "dataset directory with train/val/test.ndjson");
    sub->add_option("--model", f.model, "trained model directory");
    sub->add_option("--split", f.split, "split to read")->check(CLI::IsMember({"train", "val", "test"}));
    sub->add_option("--set", f.sets, "extra key=value override (repeatable)");
  };
  struct Cmd {
    const char* name;
    const char* help;
    int (*fn)(const Flags&);
  };
  const Cmd cmds[] = {
      {"synth", "generate a synthetic dataset", run_synth},
      {"select", "frame scores and selections as NDJSON", run_select},
      {"graphs", "per-frame graph statistics as NDJSON", run_graphs},
      {"train", "train a model and save it", run_train},
      {"eval", "accuracy of a saved model", run_eval},
      {"gradcheck", "analytic vs numeric gradients on a toy episode", run_gradcheck},
      {"ablate", "train the C-1 ... C-5 toggle matrix", run_ablate},
  };
  std::vector<std::pair<CLI::App*, const Cmd*>> subs;
  for (const auto& c : cmds) {
    auto* s = app.add_subcommand(c.name, c.help);
    common(s);
    subs.emplace_back(s, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    for (auto& [s, c] : subs)
      if (s->parsed()) return c->fn(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
