#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "svote/datahub.hpp"
#include "svote/learner.hpp"
#include "svote/metrics.hpp"
#include "svote/netsim.hpp"
#include "svote/types.hpp"

namespace svote {

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Elementwise mean, accumulated in the order given.
inline ParamVector aggregate(std::span<const ParamVector* const> models) {
  if (models.empty()) throw ProtocolError("aggregate: no models");
  const std::size_t p = models.front()->size();
  ParamVector out(*models.front());
  for (std::size_t m = 1; m < models.size(); ++m) {
    if (models[m]->size() != p)
      throw ProtocolError("aggregate: model length mismatch");
    for (std::size_t i = 0; i < p; ++i) out[i] += (*models[m])[i];
  }
  const double n = static_cast<double>(models.size());
  for (auto& v : out) v /= n;
  return out;
}

inline ParamVector aggregate(std::span<const ParamVector> models) {
  std::vector<const ParamVector*> refs;
  refs.reserve(models.size());
  for (const auto& m : models) refs.push_back(&m);
  return aggregate(std::span<const ParamVector* const>(refs));
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw SimilarityError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw SimilarityError("cosine_similarity: zero-norm model");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

/// Similarity used by the round engine: a zero-norm model scores -1.
inline double model_similarity(std::span<const double> a, std::span<const double> b) {
  try {
    return cosine_similarity(a, b);
  } catch (const SimilarityError&) {
    if (a.size() != b.size()) throw;
    return -1.0;
  }
}

using PeerSimilarity = std::pair<ClientId, double>;

/// Peers whose similarity is >= mean + tau * stddev (population). Never
/// returns an empty set: if the threshold excludes everyone, the single most
/// similar peer (lowest id on ties) is kept.
inline std::vector<ClientId> select_peers(std::span<const PeerSimilarity> sims, double tau) {
  if (sims.empty()) throw ProtocolError("select_peers: no similarities");
  double lo = sims.front().second, hi = lo, sum = 0.0;
  for (const auto& [id, s] : sims) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
    sum += s;
  }
  std::vector<ClientId> out;
  if (lo == hi) {
    for (const auto& [id, s] : sims) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
  }
  const double n = static_cast<double>(sims.size());
  const double mean = std::clamp(sum / n, lo, hi);
  double var = 0.0;
  for (const auto& [id, s] : sims) var += (s - mean) * (s - mean);
  const double threshold = mean + tau * std::sqrt(var / n);
  for (const auto& [id, s] : sims)
    if (s >= threshold) out.push_back(id);
  if (out.empty()) {
    const PeerSimilarity* best = &sims.front();
    for (const auto& ps : sims)
      if (ps.second > best->second || (ps.second == best->second && ps.first < best->first))
        best = &ps;
    out.push_back(best->first);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::size_t cast_votes(ClientId local, std::span<const ClientId> selected,
                              MessageBus& bus, std::size_t round) {
  for (auto peer : selected) bus.send(local, peer, Payload::vote(), round);
  return selected.size();
}

inline std::size_t count_votes(std::span<const RoundMessage> inbox) {
  return static_cast<std::size_t>(std::count_if(
      inbox.begin(), inbox.end(), [](const auto& m) { return m.kind == MessageKind::Vote; }));
}

// ---------------------------------------------------------------------------
// Client state and the vote gate
// ---------------------------------------------------------------------------

/// Escalation probability held in tenths so the 0.1 increments stay exact.
class EscalationProbability {
 public:
  static constexpr int kInitialTenths = 1;
  static constexpr int kMaxTenths = 10;

  double value() const noexcept { return static_cast<double>(tenths_) / 10.0; }
  int tenths() const noexcept { return tenths_; }
  void escalate() noexcept { tenths_ = std::min(tenths_ + 1, kMaxTenths); }
  void reset() noexcept { tenths_ = kInitialTenths; }

 private:
  int tenths_ = kInitialTenths;
};

struct ClientState {
  ClientId id = 0;
  ParamVector w;
  std::vector<ClientId> selected_peers;
  std::size_t votes_received = 0;
  EscalationProbability p_escalation;
  ControlVariate cv;    // SCAFFOLD only
  ParamVector w_anchor;  // FedProx only
  bool trained_this_round = false;
};

// Trains on enough votes or a sparse neighborhood; otherwise draws
// Bernoulli(p). A failed draw escalates p by 0.1 (capped at 1.0); any
// training resets p to 0.1. `draw(p)` returns true on success.
template <typename BernoulliDraw>
  requires std::is_invocable_r_v<bool, BernoulliDraw, double>
TrainingAction vote_gate(ClientState& state, std::size_t v_min,
                         std::size_t neighbor_count, BernoulliDraw&& draw) {
  TrainingAction action;
  if (state.votes_received >= v_min || neighbor_count <= 2) {
    action = TrainingAction::TrainLocal;
  } else if (draw(state.p_escalation.value())) {
    action = TrainingAction::TrainRandom;
  } else {
    state.p_escalation.escalate();
    return TrainingAction::Skip;
  }
  state.p_escalation.reset();
  return action;
}

inline TrainingAction vote_gate(ClientState& state, std::size_t v_min,
                                std::size_t neighbor_count, Rng& rng) {
  return vote_gate(state, v_min, neighbor_count, [&rng](double p) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
  });
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class VMinRule { HalfNeighbors, Fixed };

struct SVoteConfig {
  std::size_t t_init = 5;
  std::size_t n_diverge = 2;
  std::size_t total_rounds = 30;
  double tau = 0.0;
  VMinRule v_min_rule = VMinRule::HalfNeighbors;
  std::size_t v_min_fixed = 0;
  bool refresh_selection = true;
  bool suppress_nontrainer_updates = true;

  /// ceil(degree / 2) under HalfNeighbors.
  std::size_t v_min(std::size_t degree) const noexcept {
    return v_min_rule == VMinRule::Fixed ? v_min_fixed : (degree + 1) / 2;
  }

  void validate() const {
    if (!(t_init + n_diverge < total_rounds))
      throw ConfigError("svote: t_init + n_diverge must be < rounds");
    if (!std::isfinite(tau)) throw ConfigError("svote.tau must be finite");
  }

  bool operator==(const SVoteConfig&) const = default;
};

enum class BaselineKind { FedAvg, FedProx, Scaffold };

struct ClientShard {
  LabeledDataset train;
  LabeledDataset test;
};

using RoundObserver = std::function<void(std::size_t round, std::span<const ClientState>)>;

/// Everything a run needs besides the method-specific settings.
struct Federation {
  ModelSpec spec;
  HyperParams hp;
  const Topology* topology = nullptr;
  std::span<const ClientShard> shards;
  std::uint64_t seed = 0;
  std::size_t header_bytes = kDefaultHeaderBytes;
  RoundObserver on_round;  // optional, called after each round's evaluation
};

struct RunResult {
  std::vector<MetricsRecord> records;
  TrafficLedger ledger;
  std::vector<ClientState> final_states;
};

// ---------------------------------------------------------------------------
// Round engine
// ---------------------------------------------------------------------------

namespace detail {

class RoundEngine {
 public:
  explicit RoundEngine(const Federation& fed)
      : fed_(fed), bus_(*fed.topology, fed.header_bytes) {
    if (!fed.topology) throw ConfigError("federation: no topology");
    fed.spec.validate();
    fed.hp.validate();
    const std::size_t n = fed.topology->num_clients();
    if (fed.shards.size() != n)
      throw ConfigError("federation: " + std::to_string(fed.shards.size()) +
                        " shards for " + std::to_string(n) + " clients");
    const std::size_t p = fed.spec.param_count();
    for (ClientId i = 0; i < n; ++i) {
      ClientState s;
      s.id = i;
      s.w = init_params(fed.spec, seeding::derive(fed.seed, "init", i));
      s.w_anchor = s.w;
      s.cv = ControlVariate::zeros(p);
      clients_.push_back(std::move(s));
      train_rng_.push_back(make_rng(fed.seed, "train", i));
      gate_rng_.push_back(make_rng(fed.seed, "gate", i));
    }
    peer_cache_.resize(n);
    round_.resize(n);
  }

  std::size_t size() const noexcept { return clients_.size(); }
  std::size_t degree(ClientId i) const { return fed_.topology->degree(i); }

  void begin_round() {
    for (auto& r : round_) r = {};
    for (auto& c : clients_) c.trained_this_round = false;
  }

  void train(ClientId i, BaselineKind kind, TrainingAction action) {
    auto& c = clients_[i];
    const auto& data = fed_.shards[i].train;
    TrainStats stats;
    switch (kind) {
      case BaselineKind::FedAvg:
        stats = local_train(c.w, data, fed_.spec, fed_.hp, train_rng_[i]);
        break;
      case BaselineKind::FedProx: {
        const double mu = fed_.hp.prox_mu;
        stats = local_train(c.w, data, fed_.spec, fed_.hp, train_rng_[i],
                            [&](ParamVector& g, const ParamVector& w) {
                              g = prox_grad(g, w, c.w_anchor, mu);
                            });
        break;
      }
      case BaselineKind::Scaffold: {
        const ParamVector before = c.w;
        stats = local_train(c.w, data, fed_.spec, fed_.hp, train_rng_[i],
                            [&](ParamVector& g, const ParamVector&) {
                              g = scaffold_grad(g, c.cv);
                            });
        c.cv = scaffold_update_cv(c.cv, before, c.w, fed_.hp.learning_rate, stats.steps);
        break;
      }
    }
    c.trained_this_round = true;
    round_[i].samples_trained += stats.samples_processed;
    round_[i].action = action;
  }

  void skip(ClientId i) { round_[i].action = TrainingAction::Skip; }

  void share_model(ClientId i, BaselineKind kind, std::size_t t) {
    const auto& c = clients_[i];
    auto payload = kind == BaselineKind::Scaffold ? Payload::update(c.w, c.cv.local_c)
                                                  : Payload::update(c.w);
    bus_.broadcast(i, payload, t);
  }

  void share_notice(ClientId i, std::size_t t) { bus_.broadcast(i, Payload::no_update(), t); }

  void deliver() { bus_.deliver(); }

  std::span<const RoundMessage> inbox(ClientId i) const { return bus_.inbox(i); }

  /// Own model first, then every received update whose sender passes
  /// `accept`, ascending by sender.
  template <typename Accept>
  void aggregate_received(ClientId i, BaselineKind kind, Accept&& accept) {
    auto& c = clients_[i];
    std::vector<const ParamVector*> models{&c.w};
    std::vector<const ParamVector*> variates{&c.cv.local_c};
    for (const auto& m : bus_.inbox(i)) {
      if (m.kind != MessageKind::ModelUpdate || !accept(m.sender)) continue;
      models.push_back(m.model.get());
      if (m.variate) variates.push_back(m.variate.get());
    }
    ParamVector next = aggregate(std::span<const ParamVector* const>(models));
    if (kind == BaselineKind::Scaffold)
      c.cv.global_c = aggregate(std::span<const ParamVector* const>(variates));
    round_[i].models_aggregated += models.size();
    c.w = std::move(next);
    c.w_anchor = c.w;
  }

  void cache_received_models(ClientId i) {
    for (const auto& m : bus_.inbox(i))
      if (m.kind == MessageKind::ModelUpdate) peer_cache_[i][m.sender] = m.model;
  }

  /// Similarity of the client's current model to the latest model cached
  /// from each neighbor, ascending by neighbor id.
  std::vector<PeerSimilarity> similarities(ClientId i) const {
    std::vector<PeerSimilarity> out;
    for (const auto& [peer, model] : peer_cache_[i])
      out.emplace_back(peer, model_similarity(clients_[i].w, *model));
    return out;
  }

  void select_and_vote(ClientId i, double tau, std::size_t t) {
    auto sims = similarities(i);
    if (sims.empty()) return;  // nothing cached yet; keep the previous selection
    clients_[i].selected_peers = select_peers(sims, tau);
    cast_votes(i, clients_[i].selected_peers, bus_, t);
  }

  void tally_votes() {
    for (auto& c : clients_) c.votes_received = count_votes(bus_.inbox(c.id));
  }

  TrainingAction gate(ClientId i, std::size_t v_min) {
    return vote_gate(clients_[i], v_min, degree(i), gate_rng_[i]);
  }

  ClientState& client(ClientId i) { return clients_[i]; }

  void finish_round(std::size_t t) {
    bus_.ledger().ensure_round(t);
    MetricsRecord rec;
    rec.round = t;
    const auto p = fed_.spec.param_count();
    for (ClientId i = 0; i < clients_.size(); ++i) {
      const auto& test = fed_.shards[i].test;
      ClientMetrics m;
      m.client = i;
      m.f1 = macro_f1(predict_all(clients_[i].w, test, fed_.spec), test.labels,
                      fed_.spec.num_classes);
      const auto traffic = bus_.ledger().round(t, i);
      m.bytes_sent = traffic.bytes_sent;
      m.bytes_received = traffic.bytes_received;
      m.action = round_[i].action;
      m.samples_trained = round_[i].samples_trained;
      m.models_aggregated = round_[i].models_aggregated;
      m.param_count = p;
      if (!all_finite(clients_[i].w))
        throw ProtocolError("client " + std::to_string(i) + ": non-finite parameters in round " +
                            std::to_string(t));
      rec.clients.push_back(m);
    }
    records_.push_back(std::move(rec));
    if (fed_.on_round) fed_.on_round(t, clients_);
  }

  RunResult finish() && {
    return {std::move(records_), std::move(bus_.ledger()), std::move(clients_)};
  }

  // One synchronous round: everyone trains, broadcasts, and averages all
  // received models with its own.
  void full_round(std::size_t t, BaselineKind kind) {
    begin_round();
    for (ClientId i = 0; i < size(); ++i) train(i, kind, TrainingAction::TrainLocal);
    for (ClientId i = 0; i < size(); ++i) share_model(i, kind, t);
    deliver();
    for (ClientId i = 0; i < size(); ++i)
      aggregate_received(i, kind, [](ClientId) { return true; });
    finish_round(t);
  }

 private:
  struct RoundWork {
    TrainingAction action = TrainingAction::TrainLocal;
    std::uint64_t samples_trained = 0;
    std::uint64_t models_aggregated = 0;
  };

  const Federation& fed_;
  MessageBus bus_;
  std::vector<ClientState> clients_;
  std::vector<Rng> train_rng_;
  std::vector<Rng> gate_rng_;
  std::vector<std::map<ClientId, std::shared_ptr<const ParamVector>>> peer_cache_;
  std::vector<RoundWork> round_;
  std::vector<MetricsRecord> records_;
};

inline bool contains(std::span<const ClientId> sorted, ClientId id) {
  return std::binary_search(sorted.begin(), sorted.end(), id);
}

}  // namespace detail

/// FedAvg / FedProx / SCAFFOLD: every round is train, broadcast, average.
inline RunResult run_baseline(BaselineKind kind, std::size_t rounds, const Federation& fed) {
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  detail::RoundEngine engine(fed);
  for (std::size_t t = 0; t < rounds; ++t) engine.full_round(t, kind);
  return std::move(engine).finish();
}

// Rounds, 0-based:
//   [0, t_init)                   federated warm-up, identical to FedAvg
//   [t_init, t_init + n_diverge)  local training only, no traffic
//   t_init + n_diverge            all train and share; similarity, selection,
//                                 votes; aggregate selected peers plus own
//   later rounds                  vote gate, conditional training, sharing
//                                 (NoUpdate notice from skippers when
//                                 suppression is on), optional re-selection,
//                                 aggregate arrived selected models plus own
inline RunResult run_svote(const SVoteConfig& cfg, const Federation& fed) {
  cfg.validate();
  detail::RoundEngine engine(fed);
  const std::size_t n = engine.size();
  const std::size_t select_round = cfg.t_init + cfg.n_diverge;

  auto aggregate_selected = [&](ClientId i) {
    const auto& selected = engine.client(i).selected_peers;
    engine.aggregate_received(i, BaselineKind::FedAvg,
                              [&](ClientId s) { return detail::contains(selected, s); });
  };

  for (std::size_t t = 0; t < cfg.total_rounds; ++t) {
    if (t < cfg.t_init) {
      engine.full_round(t, BaselineKind::FedAvg);
      continue;
    }
    engine.begin_round();
    if (t < select_round) {
      for (ClientId i = 0; i < n; ++i)
        engine.train(i, BaselineKind::FedAvg, TrainingAction::TrainLocal);
      engine.finish_round(t);
      continue;
    }

    if (t == select_round) {
      for (ClientId i = 0; i < n; ++i)
        engine.train(i, BaselineKind::FedAvg, TrainingAction::TrainLocal);
      for (ClientId i = 0; i < n; ++i) engine.share_model(i, BaselineKind::FedAvg, t);
    } else {
      for (ClientId i = 0; i < n; ++i) {
        const auto action = engine.gate(i, cfg.v_min(engine.degree(i)));
        if (action == TrainingAction::Skip)
          engine.skip(i);
        else
          engine.train(i, BaselineKind::FedAvg, action);
      }
      for (ClientId i = 0; i < n; ++i) {
        if (engine.client(i).trained_this_round || !cfg.suppress_nontrainer_updates)
          engine.share_model(i, BaselineKind::FedAvg, t);
        else
          engine.share_notice(i, t);
      }
    }
    engine.deliver();

    const bool reselect = t == select_round || cfg.refresh_selection;
    for (ClientId i = 0; i < n; ++i) {
      engine.cache_received_models(i);
      if (reselect) engine.select_and_vote(i, cfg.tau, t);
    }
    for (ClientId i = 0; i < n; ++i) aggregate_selected(i);
    engine.deliver();
    if (reselect) engine.tally_votes();
    engine.finish_round(t);
  }
  return std::move(engine).finish();
}

}  // namespace svote
