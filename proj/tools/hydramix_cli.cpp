#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "hydramix/data.hpp"
#include "hydramix/errors.hpp"
#include "hydramix/model.hpp"
#include "hydramix/train.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace hydramix;

namespace {

// Exit codes: 0 ok, 2 bad config/arguments, 3 I/O, 4 numerical failure.
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

// Worker-parallelism cap; sweep cells are independent and run concurrently
// up to this count. Defaults to 1 so runs are sequential unless asked.
int worker_threads() {
  const char* env = std::getenv("HMX_THREADS");
  if (!env) return 1;
  int threads = 0;
  try {
    threads = std::stoi(env);
  } catch (const std::exception&) {
    throw ConfigError("HMX_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  if (threads < 1) {
    throw ConfigError("HMX_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return threads;
}

ordered_json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
}

void reject_unknown_keys(const ordered_json& obj, const std::vector<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("config: unknown key " + where + "." + key);
    }
  }
}

template <typename T>
T get_field(const ordered_json& obj, const char* key, T fallback, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: " + where + "." + key + " has the wrong type");
  }
}

SceConfig parse_sce(const ordered_json& obj, SceConfig fallback, const std::string& where) {
  reject_unknown_keys(obj, {"delta", "rho", "log_zero_clamp"}, where);
  SceConfig cfg = fallback;
  cfg.delta = get_field(obj, "delta", cfg.delta, where);
  cfg.rho = get_field(obj, "rho", cfg.rho, where);
  cfg.log_zero_clamp = get_field(obj, "log_zero_clamp", cfg.log_zero_clamp, where);
  return cfg;
}

struct RunConfig {
  ModelConfig model;
  Hyperparams hp;
  std::string mode_name = "hydramix";
  int budget = 0;  // 0 = full labelled budget
};

RunConfig parse_run_config(const ordered_json& doc) {
  // "paths" appears in the echoed config_resolved.json; accept it so a run
  // can be reproduced by feeding that echo straight back in (data/out still
  // come from the flags).
  reject_unknown_keys(doc, {"model", "train", "paths"}, "config");
  RunConfig rc;
  if (doc.contains("model")) {
    const auto& m = doc["model"];
    reject_unknown_keys(m, {"depth", "width", "num_classes", "l2_coeff", "input_size"},
                        "config.model");
    rc.model.depth = get_field(m, "depth", rc.model.depth, "config.model");
    rc.model.width = get_field(m, "width", rc.model.width, "config.model");
    rc.model.num_classes = get_field(m, "num_classes", rc.model.num_classes, "config.model");
    rc.model.l2_coeff = get_field(m, "l2_coeff", rc.model.l2_coeff, "config.model");
    rc.model.input_size = get_field(m, "input_size", rc.model.input_size, "config.model");
  }
  if (doc.contains("train")) {
    const auto& t = doc["train"];
    reject_unknown_keys(t,
                        {"epochs", "batch_size", "lr_start", "lr_end", "k_augment", "temperature",
                         "mix_alpha", "mix_beta", "mu", "sce_labelled", "sce_unlabelled", "seed",
                         "mode", "disable_sce", "budget"},
                        "config.train");
    Hyperparams& hp = rc.hp;
    hp.epochs = get_field(t, "epochs", hp.epochs, "config.train");
    hp.batch_size = get_field(t, "batch_size", hp.batch_size, "config.train");
    hp.lr_start = get_field(t, "lr_start", hp.lr_start, "config.train");
    hp.lr_end = get_field(t, "lr_end", hp.lr_end, "config.train");
    hp.k_augment = get_field(t, "k_augment", hp.k_augment, "config.train");
    hp.temperature = get_field(t, "temperature", hp.temperature, "config.train");
    hp.mix_alpha = get_field(t, "mix_alpha", hp.mix_alpha, "config.train");
    hp.mix_beta = get_field(t, "mix_beta", hp.mix_beta, "config.train");
    hp.joint.mu = get_field(t, "mu", hp.joint.mu, "config.train");
    if (t.contains("sce_labelled")) {
      hp.joint.sce_labelled =
          parse_sce(t["sce_labelled"], hp.joint.sce_labelled, "config.train.sce_labelled");
    }
    if (t.contains("sce_unlabelled")) {
      hp.joint.sce_unlabelled =
          parse_sce(t["sce_unlabelled"], hp.joint.sce_unlabelled, "config.train.sce_unlabelled");
    }
    hp.seed = get_field(t, "seed", hp.seed, "config.train");
    rc.mode_name = get_field<std::string>(t, "mode", rc.mode_name, "config.train");
    hp.disable_sce = get_field(t, "disable_sce", hp.disable_sce, "config.train");
    rc.budget = get_field(t, "budget", rc.budget, "config.train");
  }
  return rc;
}

ordered_json sce_to_json(const SceConfig& cfg) {
  ordered_json j;
  j["delta"] = cfg.delta;
  j["rho"] = cfg.rho;
  j["log_zero_clamp"] = cfg.log_zero_clamp;
  return j;
}

ordered_json resolved_config_json(const RunConfig& rc, const std::string& data_dir,
                                  const std::string& out_dir, int resolved_budget) {
  ordered_json doc;
  ordered_json m;
  m["depth"] = rc.model.depth;
  m["width"] = rc.model.width;
  m["num_classes"] = rc.model.num_classes;
  m["l2_coeff"] = rc.model.l2_coeff;
  m["input_size"] = rc.model.input_size;
  doc["model"] = std::move(m);

  ordered_json t;
  t["epochs"] = rc.hp.epochs;
  t["batch_size"] = rc.hp.batch_size;
  t["lr_start"] = rc.hp.lr_start;
  t["lr_end"] = rc.hp.lr_end;
  t["k_augment"] = rc.hp.k_augment;
  t["temperature"] = rc.hp.temperature;
  t["mix_alpha"] = rc.hp.mix_alpha;
  t["mix_beta"] = rc.hp.mix_beta;
  t["mu"] = rc.hp.joint.mu;
  t["sce_labelled"] = sce_to_json(rc.hp.joint.sce_labelled);
  t["sce_unlabelled"] = sce_to_json(rc.hp.joint.sce_unlabelled);
  t["seed"] = rc.hp.seed;
  t["mode"] = rc.mode_name;
  t["disable_sce"] = rc.hp.disable_sce;
  t["budget"] = resolved_budget;
  doc["train"] = std::move(t);

  ordered_json p;
  p["data"] = data_dir;
  p["out"] = out_dir;
  doc["paths"] = std::move(p);
  return doc;
}

uint64_t fnv1a(uint64_t hash, const void* data, size_t n) {
  const auto* bytes = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

uint64_t hash_file(uint64_t hash, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    hash = fnv1a(hash, buf, size_t(in.gcount()));
  }
  return hash;
}

int run_generate(const std::string& spec_path, const std::string& out_dir) {
  DatasetSpec spec;
  if (!spec_path.empty()) {
    ordered_json doc = load_json_file(spec_path);
    reject_unknown_keys(doc, {"n_train", "n_test", "classes", "seed"}, "spec");
    spec.n_train = get_field(doc, "n_train", spec.n_train, "spec");
    spec.n_test = get_field(doc, "n_test", spec.n_test, "spec");
    spec.classes = get_field(doc, "classes", spec.classes, "spec");
    spec.seed = get_field(doc, "seed", spec.seed, "spec");
  }
  generate_dataset(spec, out_dir);

  // report counts straight from what landed on disk
  Dataset ds = load_dataset(out_dir);
  auto count_classes = [&](const std::vector<Patch>& set, const char* name) {
    std::vector<int> counts(ds.classes.size(), 0);
    for (const Patch& p : set) counts[size_t(*p.class_id)] += 1;
    std::cout << name << ":";
    for (size_t c = 0; c < ds.classes.size(); ++c) {
      std::cout << " " << ds.classes[c] << "=" << counts[c];
    }
    std::cout << "\n";
  };
  count_classes(ds.train, "train");
  count_classes(ds.test, "test");

  uint64_t hash = hash_file(0xcbf29ce484222325ULL, fs::path(out_dir) / "manifest.json");
  ordered_json manifest = load_json_file((fs::path(out_dir) / "manifest.json").string());
  for (const auto& rec : manifest["records"]) {
    hash = hash_file(hash, fs::path(out_dir) / rec["path"].get<std::string>());
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)hash);
  std::cout << "checksum: " << buf << "\n";
  return 0;
}

int resolve_budget(const std::string& flag_value, int config_value, int n_train) {
  int budget = config_value;
  if (!flag_value.empty()) {
    if (flag_value == "full") {
      budget = 0;
    } else {
      try {
        budget = std::stoi(flag_value);
      } catch (const std::exception&) {
        throw ConfigError("--budget must be an integer or 'full', got '" + flag_value + "'");
      }
    }
  }
  if (budget == 0) budget = n_train;
  if (budget < 0) throw ConfigError("budget must be positive, got " + std::to_string(budget));
  return budget;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& budget_flag,
              const std::string& mode_flag, int64_t seed_flag) {
  RunConfig rc;
  if (!config_path.empty()) rc = parse_run_config(load_json_file(config_path));
  if (!mode_flag.empty()) rc.mode_name = mode_flag;
  if (seed_flag >= 0) rc.hp.seed = uint64_t(seed_flag);
  ModeSpec mode = parse_mode(rc.mode_name);
  rc.hp.mode = mode.mode;
  if (mode.disable_sce) rc.hp.disable_sce = true;

  Dataset ds = load_dataset(data_dir);
  int budget = resolve_budget(budget_flag, rc.budget, int(ds.train.size()));

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  {
    std::ofstream echo(fs::path(out_dir) / "config_resolved.json",
                       std::ios::binary | std::ios::trunc);
    if (!echo) throw IoError("cannot write config_resolved.json in " + out_dir);
    echo << resolved_config_json(rc, data_dir, out_dir, budget).dump(2) << "\n";
  }

  SplitPlan split = make_split(ds, budget, rc.hp.seed);
  Model model(rc.model, rc.hp.seed);
  auto history = train(model, ds, split, rc.hp, out_dir);
  const MetricsRecord& last = history.back();
  std::cout << "final test_accuracy=" << last.test_accuracy
            << " mean_centroid_error=" << last.mean_centroid_error << "\n";
  return 0;
}

int run_sweep(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, std::vector<int> budgets, std::string modes_flag,
              int seed_count) {
  RunConfig rc;
  if (!config_path.empty()) rc = parse_run_config(load_json_file(config_path));
  if (budgets.empty()) budgets = {50, 100, 300, 500, 700, 1000, 3000};
  if (modes_flag.empty()) modes_flag = "partial,hydramix,hydramix_nosce";
  if (seed_count < 1) throw ConfigError("--seeds must be >= 1");

  std::vector<std::string> modes;
  for (size_t pos = 0; pos < modes_flag.size();) {
    size_t comma = modes_flag.find(',', pos);
    if (comma == std::string::npos) comma = modes_flag.size();
    std::string mode = modes_flag.substr(pos, comma - pos);
    if (!mode.empty()) modes.push_back(mode);
    pos = comma + 1;
  }
  for (const std::string& m : modes) parse_mode(m);

  std::vector<uint64_t> seeds;
  for (int i = 0; i < seed_count; ++i) seeds.push_back(rc.hp.seed + uint64_t(i));

  Dataset ds = load_dataset(data_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  {
    std::ofstream echo(fs::path(out_dir) / "config_resolved.json",
                       std::ios::binary | std::ios::trunc);
    echo << resolved_config_json(rc, data_dir, out_dir, 0).dump(2) << "\n";
  }

  auto cells = sweep(ds, modes, budgets, seeds, rc.model, rc.hp, out_dir, worker_threads());
  std::cout << render_table(cells, modes, budgets);
  int failed = 0;
  for (const SweepCell& c : cells) {
    if (!c.ok) ++failed;
  }
  if (failed > 0) {
    std::cerr << failed << " of " << cells.size() << " sweep cells failed\n";
    return 1;
  }
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir) {
  Model model = Model::load(ckpt_path);
  Dataset ds = load_dataset(data_dir);
  if (model.config().num_classes != ds.num_classes()) {
    throw ConfigError("eval: checkpoint has " + std::to_string(model.config().num_classes) +
                      " classes, dataset has " + std::to_string(ds.num_classes()));
  }
  MetricsRecord rec = evaluate(model, ds.test, 64);
  ordered_json j;
  j["test_accuracy"] = rec.test_accuracy;
  j["mean_centroid_error"] = rec.mean_centroid_error;
  j["confusion"] = rec.confusion;
  std::cout << j.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hydramix: semi-supervised cell-patch classification"};
  app.require_subcommand(1);
  int rc = 0;

  auto* gen = app.add_subcommand("generate", "render a synthetic patch dataset");
  std::string gen_spec, gen_out;
  gen->add_option("--spec", gen_spec, "dataset spec JSON (defaults used when omitted)");
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->callback([&] { rc = run_generate(gen_spec, gen_out); });

  auto* train_cmd = app.add_subcommand("train", "train one model");
  std::string tr_config, tr_data, tr_out, tr_budget, tr_mode;
  int64_t tr_seed = -1;
  train_cmd->add_option("--config", tr_config, "run config JSON");
  train_cmd->add_option("--data", tr_data, "dataset directory")->required();
  train_cmd->add_option("--out", tr_out, "run output directory")->required();
  train_cmd->add_option("--budget", tr_budget, "labelled budget (integer or 'full')");
  train_cmd->add_option("--mode", tr_mode, "supervised|partial|hydramix|hydramix_nosce");
  train_cmd->add_option("--seed", tr_seed, "random seed");
  train_cmd->callback(
      [&] { rc = run_train(tr_config, tr_data, tr_out, tr_budget, tr_mode, tr_seed); });

  auto* sweep_cmd = app.add_subcommand("sweep", "run the labelled-budget grid");
  std::string sw_config, sw_data, sw_out, sw_modes;
  std::vector<int> sw_budgets;
  int sw_seeds = 3;
  sweep_cmd->add_option("--config", sw_config, "run config JSON");
  sweep_cmd->add_option("--data", sw_data, "dataset directory")->required();
  sweep_cmd->add_option("--out", sw_out, "sweep output directory")->required();
  sweep_cmd->add_option("--budgets", sw_budgets, "labelled budgets")->delimiter(',');
  sweep_cmd->add_option("--modes", sw_modes, "comma-separated mode list");
  sweep_cmd->add_option("--seeds", sw_seeds, "number of seeds (base seed comes from config)");
  sweep_cmd->callback(
      [&] { rc = run_sweep(sw_config, sw_data, sw_out, sw_budgets, sw_modes, sw_seeds); });

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string ev_ckpt, ev_data;
  eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
  eval_cmd->callback([&] { rc = run_eval(ev_ckpt, ev_data); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
