#pragma once

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "svote/datahub.hpp"
#include "svote/learner.hpp"
#include "svote/metrics.hpp"
#include "svote/netsim.hpp"
#include "svote/protocol.hpp"
#include "svote/types.hpp"

namespace svote {

enum class Method { SVote, FedAvg, FedProx, Scaffold };
enum class DatasetKind { Synthetic, Idx };
enum class TopologyKind { Full, Erdos };

struct SyntheticParams {
  std::size_t num_classes = 10;
  std::size_t input_dim = 20;
  std::size_t per_class = 200;
  double spread = 0.5;
  bool operator==(const SyntheticParams&) const = default;
};

struct IdxParams {
  std::string images;
  std::string labels;
  std::size_t limit = 10000;
  std::size_t num_classes = 10;
  bool operator==(const IdxParams&) const = default;
};

struct ExperimentConfig {
  Method method = Method::FedAvg;
  DatasetKind dataset = DatasetKind::Synthetic;
  SyntheticParams synthetic;
  IdxParams idx;
  double alpha = 0.5;
  std::size_t num_clients = 10;
  TopologyKind topology = TopologyKind::Full;
  double topology_p = 0.5;
  ModelKind model_kind = ModelKind::SoftmaxRegression;
  std::size_t hidden_dim = 32;
  HyperParams hp;
  double test_fraction = 0.2;
  std::size_t rounds = 30;
  SVoteConfig svote;  // total_rounds mirrors `rounds`
  EnergyCoeffs energy;
  std::size_t header_bytes = kDefaultHeaderBytes;
  std::uint64_t seed = 1;
  std::string output_dir;
  bool paired_fedavg = true;

  bool operator==(const ExperimentConfig&) const = default;
};

// ---------------------------------------------------------------------------
// key=value text format
// ---------------------------------------------------------------------------

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct KeyError {
  std::string what;
};

inline double to_double(const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw KeyError{"expected a real number, got '" + v + "'"};
  return out;
}

inline std::uint64_t to_uint(const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty())
    throw KeyError{"expected a non-negative integer, got '" + v + "'"};
  return out;
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw KeyError{"expected true or false, got '" + v + "'"};
}

template <typename Enum>
Enum to_enum(const std::string& v, std::initializer_list<std::pair<std::string_view, Enum>> names) {
  for (const auto& [name, e] : names)
    if (v == name) return e;
  std::string allowed;
  for (const auto& [name, e] : names) allowed += (allowed.empty() ? "" : "|") + std::string(name);
  throw KeyError{"expected one of " + allowed + ", got '" + v + "'"};
}

struct Field {
  std::string_view key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  auto sz = [](std::size_t v) { return std::to_string(v); };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  static const std::vector<Field> f = {
      {"method",
       [](C& c, const std::string& v) {
         c.method = to_enum<Method>(v, {{"svote", Method::SVote},
                                        {"fedavg", Method::FedAvg},
                                        {"fedprox", Method::FedProx},
                                        {"scaffold", Method::Scaffold}});
       },
       [](const C& c) {
         switch (c.method) {
           case Method::SVote: return std::string("svote");
           case Method::FedAvg: return std::string("fedavg");
           case Method::FedProx: return std::string("fedprox");
           case Method::Scaffold: return std::string("scaffold");
         }
         return std::string();
       }},
      {"dataset",
       [](C& c, const std::string& v) {
         c.dataset = to_enum<DatasetKind>(
             v, {{"synthetic", DatasetKind::Synthetic}, {"idx", DatasetKind::Idx}});
       },
       [](const C& c) {
         return std::string(c.dataset == DatasetKind::Synthetic ? "synthetic" : "idx");
       }},
      {"synthetic.num_classes", [](C& c, const std::string& v) { c.synthetic.num_classes = to_uint(v); },
       [sz](const C& c) { return sz(c.synthetic.num_classes); }},
      {"synthetic.input_dim", [](C& c, const std::string& v) { c.synthetic.input_dim = to_uint(v); },
       [sz](const C& c) { return sz(c.synthetic.input_dim); }},
      {"synthetic.per_class", [](C& c, const std::string& v) { c.synthetic.per_class = to_uint(v); },
       [sz](const C& c) { return sz(c.synthetic.per_class); }},
      {"synthetic.spread", [](C& c, const std::string& v) { c.synthetic.spread = to_double(v); },
       [](const C& c) { return fmt_double(c.synthetic.spread); }},
      {"idx.images", [](C& c, const std::string& v) { c.idx.images = v; },
       [](const C& c) { return c.idx.images; }},
      {"idx.labels", [](C& c, const std::string& v) { c.idx.labels = v; },
       [](const C& c) { return c.idx.labels; }},
      {"idx.limit", [](C& c, const std::string& v) { c.idx.limit = to_uint(v); },
       [sz](const C& c) { return sz(c.idx.limit); }},
      {"idx.num_classes", [](C& c, const std::string& v) { c.idx.num_classes = to_uint(v); },
       [sz](const C& c) { return sz(c.idx.num_classes); }},
      {"alpha", [](C& c, const std::string& v) { c.alpha = to_double(v); },
       [](const C& c) { return fmt_double(c.alpha); }},
      {"num_clients", [](C& c, const std::string& v) { c.num_clients = to_uint(v); },
       [sz](const C& c) { return sz(c.num_clients); }},
      {"topology",
       [](C& c, const std::string& v) {
         c.topology = to_enum<TopologyKind>(
             v, {{"full", TopologyKind::Full}, {"erdos", TopologyKind::Erdos}});
       },
       [](const C& c) { return std::string(c.topology == TopologyKind::Full ? "full" : "erdos"); }},
      {"topology.p", [](C& c, const std::string& v) { c.topology_p = to_double(v); },
       [](const C& c) { return fmt_double(c.topology_p); }},
      {"model.kind",
       [](C& c, const std::string& v) {
         c.model_kind = to_enum<ModelKind>(
             v, {{"softmax", ModelKind::SoftmaxRegression}, {"mlp", ModelKind::Mlp1Hidden}});
       },
       [](const C& c) {
         return std::string(c.model_kind == ModelKind::SoftmaxRegression ? "softmax" : "mlp");
       }},
      {"model.hidden_dim", [](C& c, const std::string& v) { c.hidden_dim = to_uint(v); },
       [sz](const C& c) { return sz(c.hidden_dim); }},
      {"train.learning_rate", [](C& c, const std::string& v) { c.hp.learning_rate = to_double(v); },
       [](const C& c) { return fmt_double(c.hp.learning_rate); }},
      {"train.local_epochs", [](C& c, const std::string& v) { c.hp.local_epochs = to_uint(v); },
       [sz](const C& c) { return sz(c.hp.local_epochs); }},
      {"train.batch_size", [](C& c, const std::string& v) { c.hp.batch_size = to_uint(v); },
       [sz](const C& c) { return sz(c.hp.batch_size); }},
      {"train.prox_mu", [](C& c, const std::string& v) { c.hp.prox_mu = to_double(v); },
       [](const C& c) { return fmt_double(c.hp.prox_mu); }},
      {"train.test_fraction", [](C& c, const std::string& v) { c.test_fraction = to_double(v); },
       [](const C& c) { return fmt_double(c.test_fraction); }},
      {"rounds", [](C& c, const std::string& v) { c.rounds = to_uint(v); },
       [sz](const C& c) { return sz(c.rounds); }},
      {"svote.t_init", [](C& c, const std::string& v) { c.svote.t_init = to_uint(v); },
       [sz](const C& c) { return sz(c.svote.t_init); }},
      {"svote.n_diverge", [](C& c, const std::string& v) { c.svote.n_diverge = to_uint(v); },
       [sz](const C& c) { return sz(c.svote.n_diverge); }},
      {"svote.tau", [](C& c, const std::string& v) { c.svote.tau = to_double(v); },
       [](const C& c) { return fmt_double(c.svote.tau); }},
      {"svote.v_min",
       [](C& c, const std::string& v) {
         if (v == "half") {
           c.svote.v_min_rule = VMinRule::HalfNeighbors;
           c.svote.v_min_fixed = 0;
           return;
         }
         try {
           c.svote.v_min_fixed = to_uint(v);
         } catch (const KeyError&) {
           throw KeyError{"expected 'half' or a non-negative integer, got '" + v + "'"};
         }
         c.svote.v_min_rule = VMinRule::Fixed;
       },
       [](const C& c) {
         return c.svote.v_min_rule == VMinRule::HalfNeighbors
                    ? std::string("half")
                    : std::to_string(c.svote.v_min_fixed);
       }},
      {"svote.refresh_selection",
       [](C& c, const std::string& v) { c.svote.refresh_selection = to_bool(v); },
       [b](const C& c) { return b(c.svote.refresh_selection); }},
      {"svote.suppress_nontrainer_updates",
       [](C& c, const std::string& v) { c.svote.suppress_nontrainer_updates = to_bool(v); },
       [b](const C& c) { return b(c.svote.suppress_nontrainer_updates); }},
      {"svote.paired_fedavg", [](C& c, const std::string& v) { c.paired_fedavg = to_bool(v); },
       [b](const C& c) { return b(c.paired_fedavg); }},
      {"energy.c_train", [](C& c, const std::string& v) { c.energy.c_train = to_double(v); },
       [](const C& c) { return fmt_double(c.energy.c_train); }},
      {"energy.c_agg", [](C& c, const std::string& v) { c.energy.c_agg = to_double(v); },
       [](const C& c) { return fmt_double(c.energy.c_agg); }},
      {"energy.c_comm", [](C& c, const std::string& v) { c.energy.c_comm = to_double(v); },
       [](const C& c) { return fmt_double(c.energy.c_comm); }},
      {"net.header_bytes", [](C& c, const std::string& v) { c.header_bytes = to_uint(v); },
       [sz](const C& c) { return sz(c.header_bytes); }},
      {"seed", [](C& c, const std::string& v) { c.seed = to_uint(v); },
       [](const C& c) { return std::to_string(c.seed); }},
      {"output.dir", [](C& c, const std::string& v) { c.output_dir = v; },
       [](const C& c) { return c.output_dir; }},
  };
  return f;
}

inline const Field* find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace config_detail

/// Range and cross-field checks. Dataset files must exist.
inline void validate(ExperimentConfig& cfg) {
  cfg.svote.total_rounds = cfg.rounds;
  auto fail = [](std::string_view key, const std::string& why) {
    throw ConfigError("key '" + std::string(key) + "': " + why);
  };
  if (cfg.num_clients < 2) fail("num_clients", "must be >= 2");
  if (!(cfg.alpha > 0.0) || !std::isfinite(cfg.alpha)) fail("alpha", "must be > 0");
  if (!(cfg.topology_p > 0.0 && cfg.topology_p <= 1.0)) fail("topology.p", "must be in (0,1]");
  if (!(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0))
    fail("train.test_fraction", "must be in (0,1)");
  if (cfg.rounds < 1) fail("rounds", "must be >= 1");
  if (!(cfg.hp.learning_rate > 0.0) || !std::isfinite(cfg.hp.learning_rate))
    fail("train.learning_rate", "must be > 0");
  if (cfg.hp.local_epochs < 1) fail("train.local_epochs", "must be >= 1");
  if (cfg.hp.batch_size < 1) fail("train.batch_size", "must be >= 1");
  if (!(cfg.hp.prox_mu >= 0.0) || !std::isfinite(cfg.hp.prox_mu))
    fail("train.prox_mu", "must be >= 0");
  if (cfg.model_kind == ModelKind::Mlp1Hidden && cfg.hidden_dim < 1)
    fail("model.hidden_dim", "must be >= 1");
  if (cfg.method == Method::SVote && !(cfg.svote.t_init + cfg.svote.n_diverge < cfg.rounds))
    fail("svote.t_init", "t_init + n_diverge must be < rounds");
  if (!std::isfinite(cfg.svote.tau)) fail("svote.tau", "must be finite");
  cfg.energy.validate();
  if (cfg.dataset == DatasetKind::Synthetic) {
    if (cfg.synthetic.num_classes < 2) fail("synthetic.num_classes", "must be >= 2");
    if (cfg.synthetic.input_dim < 1) fail("synthetic.input_dim", "must be >= 1");
    if (cfg.synthetic.per_class < 1) fail("synthetic.per_class", "must be >= 1");
    if (!(cfg.synthetic.spread > 0.0)) fail("synthetic.spread", "must be > 0");
  } else {
    namespace fs = std::filesystem;
    if (cfg.idx.images.empty() || !fs::exists(cfg.idx.images))
      fail("idx.images", "file not found: '" + cfg.idx.images + "'");
    if (cfg.idx.labels.empty() || !fs::exists(cfg.idx.labels))
      fail("idx.labels", "file not found: '" + cfg.idx.labels + "'");
    if (cfg.idx.num_classes < 2) fail("idx.num_classes", "must be >= 2");
  }
}

/// Parses `key = value` lines; `#` starts a comment. Omitted keys keep their
/// defaults; `method` and `dataset` are required.
inline ExperimentConfig parse_config_text(std::string_view text,
                                          std::string_view origin = "<config>") {
  ExperimentConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  auto where = [&](std::size_t n) { return std::string(origin) + ":" + std::to_string(n); };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = config_detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where(lineno) + ": expected key=value, got '" + body + "'");
    const auto key = config_detail::trim(std::string_view(body).substr(0, eq));
    const auto value = config_detail::trim(std::string_view(body).substr(eq + 1));
    const auto* field = config_detail::find_field(key);
    if (!field) throw ConfigError(where(lineno) + ": unknown key '" + key + "'");
    if (auto it = seen.find(key); it != seen.end())
      throw ConfigError(where(lineno) + ": key '" + key + "' already set on line " +
                        std::to_string(it->second));
    seen.emplace(key, lineno);
    try {
      field->set(cfg, value);
    } catch (const config_detail::KeyError& e) {
      throw ConfigError(where(lineno) + ": key '" + key + "': " + e.what);
    }
  }
  for (std::string_view required : {"method", "dataset"})
    if (!seen.count(std::string(required)))
      throw ConfigError(std::string(origin) + ": missing required key '" +
                        std::string(required) + "'");
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    // Point at the offending line when the key was given explicitly.
    std::string msg = e.what();
    for (const auto& [key, n] : seen)
      if (msg.rfind("key '" + key + "'", 0) == 0) throw ConfigError(where(n) + ": " + msg);
    throw ConfigError(std::string(origin) + ": " + msg);
  }
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

/// Every key with its current value, in canonical order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : config_detail::fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

inline std::string to_config_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_entries(cfg)) out += k + "=" + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct PreparedFederation {
  ModelSpec spec;
  Topology topology;
  std::vector<ClientShard> shards;
};

inline PreparedFederation prepare(const ExperimentConfig& cfg) {
  LabeledDataset data =
      cfg.dataset == DatasetKind::Synthetic
          ? gen_synthetic(cfg.synthetic.num_classes, cfg.synthetic.input_dim,
                          cfg.synthetic.per_class, cfg.synthetic.spread,
                          seeding::derive(cfg.seed, "data"))
          : load_idx(cfg.idx.images, cfg.idx.labels, cfg.idx.limit, cfg.idx.num_classes);
  data.validate();

  PreparedFederation out;
  out.spec = {cfg.model_kind, data.input_dim, data.num_classes,
              cfg.model_kind == ModelKind::Mlp1Hidden ? cfg.hidden_dim : 0};
  out.spec.validate();

  const auto plan = dirichlet_partition(data, cfg.num_clients, cfg.alpha,
                                        seeding::derive(cfg.seed, "partition"),
                                        min_shard_size(cfg.hp.batch_size, data.num_classes));
  for (ClientId i = 0; i < cfg.num_clients; ++i) {
    auto split = split_train_test(data.subset(plan.assignment[i]), cfg.test_fraction,
                                  seeding::derive(cfg.seed, "split", i));
    out.shards.push_back({std::move(split.train), std::move(split.test)});
  }
  out.topology = cfg.topology == TopologyKind::Full
                     ? full_topology(cfg.num_clients)
                     : erdos_renyi(cfg.num_clients, cfg.topology_p,
                                   seeding::derive(cfg.seed, "topology"));
  return out;
}

inline Federation make_federation(const ExperimentConfig& cfg, const PreparedFederation& prep) {
  Federation fed;
  fed.spec = prep.spec;
  fed.hp = cfg.hp;
  fed.topology = &prep.topology;
  fed.shards = prep.shards;
  fed.seed = cfg.seed;
  fed.header_bytes = cfg.header_bytes;
  return fed;
}

inline RunResult run_method(Method method, const ExperimentConfig& cfg, const Federation& fed) {
  switch (method) {
    case Method::SVote: {
      auto sv = cfg.svote;
      sv.total_rounds = cfg.rounds;
      return run_svote(sv, fed);
    }
    case Method::FedAvg: return run_baseline(BaselineKind::FedAvg, cfg.rounds, fed);
    case Method::FedProx: return run_baseline(BaselineKind::FedProx, cfg.rounds, fed);
    case Method::Scaffold: return run_baseline(BaselineKind::Scaffold, cfg.rounds, fed);
  }
  throw ConfigError("unknown method");
}

inline constexpr std::string_view kCsvHeader =
    "round,client,f1,bytes_sent,bytes_received,action,e_train,e_agg,e_comm,work_units";

/// Per-round metrics as CSV; rounds are numbered from 1.
inline std::string metrics_csv(std::span<const MetricsRecord> records, const EnergyCoeffs& coeffs) {
  using config_detail::fmt_double;
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& rec : records)
    for (const auto& m : rec.clients) {
      const auto e = phase_energy(m, coeffs);
      out += std::to_string(rec.round + 1) + ',' + std::to_string(m.client) + ',' +
             fmt_double(m.f1) + ',' + std::to_string(m.bytes_sent) + ',' +
             std::to_string(m.bytes_received) + ',' + std::string(to_string(m.action)) + ',' +
             fmt_double(e.train) + ',' + fmt_double(e.agg) + ',' + fmt_double(e.comm) + ',' +
             std::to_string(work_units(m)) + '\n';
    }
  return out;
}

struct ExperimentOutcome {
  ExperimentConfig config;
  RunResult result;
  std::optional<RunResult> fedavg_reference;
  std::string csv;
  nlohmann::ordered_json summary;
};

inline double byte_reduction_pct(std::uint64_t method_bytes, std::uint64_t reference_bytes) {
  if (reference_bytes == 0) return 0.0;
  return 100.0 * (static_cast<double>(reference_bytes) - static_cast<double>(method_bytes)) /
         static_cast<double>(reference_bytes);
}

inline nlohmann::ordered_json run_summary(const ExperimentConfig& cfg, const RunResult& run,
                                          const RunResult* reference) {
  nlohmann::ordered_json j;
  const auto f1 = federation_summary(run.records);
  const auto e = energy(run.records, cfg.energy);
  const auto units = work_units(run.records);
  std::uint64_t total_units = 0;
  for (auto u : units) total_units += u;
  std::map<std::string, std::uint64_t> actions{{"train_local", 0}, {"train_random", 0}, {"skip", 0}};
  for (const auto& rec : run.records)
    for (const auto& m : rec.clients) ++actions[std::string(to_string(m.action))];

  j["method"] = config_detail::find_field("method")->get(cfg);
  j["seed"] = cfg.seed;
  j["rounds"] = cfg.rounds;
  j["num_clients"] = cfg.num_clients;
  j["f1"] = {{"mean", f1.mean}, {"std", f1.std}};
  j["bytes"] = {{"sent", run.ledger.total_sent()},
                {"received", run.ledger.total_received()},
                {"model_update_payload", run.ledger.payload_bytes(MessageKind::ModelUpdate)},
                {"header", run.ledger.header_bytes()},
                {"messages",
                 {{"model_update", run.ledger.message_count(MessageKind::ModelUpdate)},
                  {"vote", run.ledger.message_count(MessageKind::Vote)},
                  {"no_update", run.ledger.message_count(MessageKind::NoUpdate)}}}};
  j["energy_kwh"] = {{"train", e.total.train},
                     {"agg", e.total.agg},
                     {"comm", e.total.comm},
                     {"total", e.total.total()}};
  j["work_units"] = total_units;
  j["actions"] = {{"train_local", actions["train_local"]},
                  {"train_random", actions["train_random"]},
                  {"skip", actions["skip"]}};
  if (reference) {
    const auto rf1 = federation_summary(reference->records);
    j["fedavg_reference"] = {
        {"f1", {{"mean", rf1.mean}, {"std", rf1.std}}},
        {"bytes_sent", reference->ledger.total_sent()},
        {"byte_reduction_pct",
         byte_reduction_pct(run.ledger.total_sent(), reference->ledger.total_sent())}};
  }
  nlohmann::ordered_json echo;
  for (const auto& [k, v] : config_entries(cfg))
    if (k != "output.dir") echo[k] = v;  // artifacts must not depend on where they land
  j["config"] = echo;
  return j;
}

/// Runs the configured method (plus a matched FedAvg reference for S-VOTE
/// when enabled) without touching the filesystem.
inline ExperimentOutcome execute(ExperimentConfig cfg) {
  validate(cfg);
  const auto prep = prepare(cfg);
  const auto fed = make_federation(cfg, prep);
  ExperimentOutcome out{cfg, run_method(cfg.method, cfg, fed), std::nullopt, {}, {}};
  if (cfg.method == Method::SVote && cfg.paired_fedavg)
    out.fedavg_reference = run_method(Method::FedAvg, cfg, fed);
  out.csv = metrics_csv(out.result.records, cfg.energy);
  out.summary = run_summary(cfg, out.result,
                            out.fedavg_reference ? &*out.fedavg_reference : nullptr);
  return out;
}

inline constexpr std::string_view kMetricsFile = "metrics.csv";
inline constexpr std::string_view kSummaryFile = "summary.json";

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

/// Runs the experiment and writes metrics.csv and summary.json into
/// `out_dir`. Nothing is written unless the run completes.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg,
                                        const std::filesystem::path& out_dir) {
  auto outcome = execute(cfg);
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / kMetricsFile, outcome.csv);
  write_text(out_dir / kSummaryFile, outcome.summary.dump(2) + "\n");
  return outcome;
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

struct ComparisonError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline nlohmann::ordered_json load_summary(const std::filesystem::path& dir) {
  std::ifstream in(dir / kSummaryFile);
  if (!in) throw ComparisonError(dir.string() + ": no " + std::string(kSummaryFile));
  try {
    return nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ComparisonError(dir.string() + ": unreadable summary: " + e.what());
  }
}

namespace compare_detail {

inline std::string dataset_signature(const nlohmann::ordered_json& summary) {
  std::string sig;
  for (const auto& [k, v] : summary.at("config").items()) {
    const bool relevant = k == "dataset" || k == "alpha" || k == "num_clients" ||
                          k.rfind("synthetic.", 0) == 0 || k.rfind("idx.", 0) == 0;
    if (relevant) sig += k + "=" + v.get<std::string>() + ";";
  }
  return sig;
}

inline std::string pct(double value, double base) {
  if (base == 0.0) return value == 0.0 ? "+0.0%" : "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.1f%%", 100.0 * (value - base) / base);
  return buf;
}

}  // namespace compare_detail

/// Side-by-side table of F1, bytes, energy and work units; every column
/// after the first carries its delta against the first run.
inline std::string compare(const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.size() < 2) throw ComparisonError("compare: need at least two runs");
  std::vector<nlohmann::ordered_json> runs;
  for (const auto& d : run_dirs) runs.push_back(load_summary(d));
  const auto sig = compare_detail::dataset_signature(runs.front());
  for (std::size_t i = 1; i < runs.size(); ++i)
    if (compare_detail::dataset_signature(runs[i]) != sig)
      throw ComparisonError("compare: " + run_dirs[i].string() + " uses a different dataset than " +
                            run_dirs.front().string());

  struct Row {
    std::string label;
    std::function<double(const nlohmann::ordered_json&)> value;
    bool integral;
  };
  const std::vector<Row> rows = {
      {"f1_mean", [](const auto& j) { return j.at("f1").at("mean").template get<double>(); }, false},
      {"f1_std", [](const auto& j) { return j.at("f1").at("std").template get<double>(); }, false},
      {"bytes_sent", [](const auto& j) { return j.at("bytes").at("sent").template get<double>(); }, true},
      {"bytes_received",
       [](const auto& j) { return j.at("bytes").at("received").template get<double>(); }, true},
      {"energy_kwh",
       [](const auto& j) { return j.at("energy_kwh").at("total").template get<double>(); }, false},
      {"work_units", [](const auto& j) { return j.at("work_units").template get<double>(); }, true},
  };

  std::vector<std::vector<std::string>> table;
  std::vector<std::string> head{"metric"};
  for (std::size_t i = 0; i < runs.size(); ++i)
    head.push_back(runs[i].at("method").get<std::string>() + " (" +
                   run_dirs[i].filename().string() + ")");
  table.push_back(head);
  for (const auto& row : rows) {
    std::vector<std::string> cells{row.label};
    const double base = row.value(runs.front());
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const double v = row.value(runs[i]);
      std::ostringstream cell;
      if (row.integral)
        cell << static_cast<std::uint64_t>(v);
      else
        cell << std::setprecision(row.label == "energy_kwh" ? 6 : 4) << v;
      if (i > 0) cell << " (" << compare_detail::pct(v, base) << ")";
      cells.push_back(cell.str());
    }
    table.push_back(cells);
  }

  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& r : table)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream out;
  for (const auto& r : table) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      out << std::left << std::setw(static_cast<int>(width[c])) << r[c];
      out << (c + 1 < r.size() ? "  " : "\n");
    }
  }
  return out.str();
}

}  // namespace svote
