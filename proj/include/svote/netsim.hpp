#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "svote/types.hpp"

namespace svote {

/// Undirected simple graph over client ids 0..n-1.
class Topology {
 public:
  Topology() = default;
  explicit Topology(std::size_t n) : adj_(n) {}

  std::size_t num_clients() const noexcept { return adj_.size(); }

  void add_edge(ClientId a, ClientId b) {
    if (a == b) throw GenerationError("topology: self-loop on " + std::to_string(a));
    if (a >= adj_.size() || b >= adj_.size())
      throw GenerationError("topology: client id out of range");
    if (has_edge(a, b)) return;
    insert_sorted(adj_[a], b);
    insert_sorted(adj_[b], a);
    ++edges_;
  }

  bool has_edge(ClientId a, ClientId b) const {
    if (a >= adj_.size()) return false;
    return std::binary_search(adj_[a].begin(), adj_[a].end(), b);
  }

  std::span<const ClientId> neighbors(ClientId id) const { return adj_.at(id); }
  std::size_t degree(ClientId id) const { return adj_.at(id).size(); }
  std::size_t edge_count() const noexcept { return edges_; }

  bool connected() const {
    if (adj_.empty()) return true;
    std::vector<bool> seen(adj_.size(), false);
    std::queue<ClientId> todo;
    todo.push(0);
    seen[0] = true;
    std::size_t visited = 1;
    while (!todo.empty()) {
      auto u = todo.front();
      todo.pop();
      for (auto v : adj_[u])
        if (!seen[v]) {
          seen[v] = true;
          ++visited;
          todo.push(v);
        }
    }
    return visited == adj_.size();
  }

 private:
  static void insert_sorted(std::vector<ClientId>& v, ClientId x) {
    v.insert(std::upper_bound(v.begin(), v.end(), x), x);
  }

  std::vector<std::vector<ClientId>> adj_;
  std::size_t edges_ = 0;
};

inline Topology full_topology(std::size_t n) {
  if (n < 2) throw GenerationError("full_topology: need at least 2 clients");
  Topology t(n);
  for (ClientId a = 0; a < n; ++a)
    for (ClientId b = a + 1; b < n; ++b) t.add_edge(a, b);
  return t;
}

inline constexpr std::size_t kMaxTopologyAttempts = 100;

/// G(n, p), re-drawn with an incremented sub-seed until connected.
inline Topology erdos_renyi(std::size_t n, double p, std::uint64_t seed) {
  if (n < 2) throw GenerationError("erdos_renyi: need at least 2 clients");
  if (!(p > 0.0 && p <= 1.0)) throw GenerationError("erdos_renyi: p must be in (0,1]");
  for (std::size_t attempt = 0; attempt < kMaxTopologyAttempts; ++attempt) {
    Rng rng(seeding::derive(seed, "erdos_renyi", attempt));
    std::bernoulli_distribution coin(p);
    Topology t(n);
    for (ClientId a = 0; a < n; ++a)
      for (ClientId b = a + 1; b < n; ++b)
        if (coin(rng)) t.add_edge(a, b);
    if (t.connected()) return t;
  }
  throw GenerationError("erdos_renyi: no connected graph after " +
                        std::to_string(kMaxTopologyAttempts) + " attempts");
}

enum class MessageKind { ModelUpdate, Vote, NoUpdate };

inline constexpr std::size_t kDefaultHeaderBytes = 32;
inline constexpr std::size_t kBytesPerParam = 4;

struct RoundMessage {
  ClientId sender = 0;
  ClientId receiver = 0;
  MessageKind kind = MessageKind::Vote;
  std::size_t round = 0;
  std::shared_ptr<const ParamVector> model;    // ModelUpdate only
  std::shared_ptr<const ParamVector> variate;  // SCAFFOLD control variate
  std::size_t byte_size = 0;

  std::size_t payload_params() const noexcept {
    return (model ? model->size() : 0) + (variate ? variate->size() : 0);
  }
};

/// What a client puts on the wire; shared by all receivers of a broadcast.
struct Payload {
  MessageKind kind = MessageKind::Vote;
  std::shared_ptr<const ParamVector> model;
  std::shared_ptr<const ParamVector> variate;

  static Payload vote() { return {MessageKind::Vote, nullptr, nullptr}; }
  static Payload no_update() { return {MessageKind::NoUpdate, nullptr, nullptr}; }
  static Payload update(ParamVector w) {
    return {MessageKind::ModelUpdate, std::make_shared<const ParamVector>(std::move(w)),
            nullptr};
  }
  static Payload update(ParamVector w, ParamVector c) {
    return {MessageKind::ModelUpdate, std::make_shared<const ParamVector>(std::move(w)),
            std::make_shared<const ParamVector>(std::move(c))};
  }
};

struct ClientTraffic {
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
};

/// Byte counters per client, in total and per round. Both endpoints are
/// charged at send time, so the sent and received totals always agree.
class TrafficLedger {
 public:
  explicit TrafficLedger(std::size_t num_clients = 0) : totals_(num_clients) {}

  void record(const RoundMessage& msg, std::size_t header_bytes) {
    ensure_round(msg.round);
    totals_.at(msg.sender).bytes_sent += msg.byte_size;
    totals_.at(msg.receiver).bytes_received += msg.byte_size;
    rounds_[msg.round][msg.sender].bytes_sent += msg.byte_size;
    rounds_[msg.round][msg.receiver].bytes_received += msg.byte_size;
    header_bytes_ += header_bytes;
    payload_bytes_[static_cast<std::size_t>(msg.kind)] += msg.byte_size - header_bytes;
    ++message_counts_[static_cast<std::size_t>(msg.kind)];
  }

  void ensure_round(std::size_t round) {
    if (rounds_.size() <= round)
      rounds_.resize(round + 1, std::vector<ClientTraffic>(totals_.size()));
  }

  std::size_t num_clients() const noexcept { return totals_.size(); }
  const ClientTraffic& client(ClientId id) const { return totals_.at(id); }

  ClientTraffic round(std::size_t r, ClientId id) const {
    if (r >= rounds_.size()) return {};
    return rounds_[r].at(id);
  }
  std::size_t rounds_recorded() const noexcept { return rounds_.size(); }

  std::uint64_t total_sent() const {
    std::uint64_t s = 0;
    for (const auto& t : totals_) s += t.bytes_sent;
    return s;
  }
  std::uint64_t total_received() const {
    std::uint64_t s = 0;
    for (const auto& t : totals_) s += t.bytes_received;
    return s;
  }
  std::uint64_t header_bytes() const noexcept { return header_bytes_; }
  std::uint64_t payload_bytes(MessageKind kind) const {
    return payload_bytes_[static_cast<std::size_t>(kind)];
  }
  std::uint64_t message_count(MessageKind kind) const {
    return message_counts_[static_cast<std::size_t>(kind)];
  }

  bool operator==(const TrafficLedger& o) const {
    auto eq = [](const ClientTraffic& a, const ClientTraffic& b) {
      return a.bytes_sent == b.bytes_sent && a.bytes_received == b.bytes_received;
    };
    if (totals_.size() != o.totals_.size() || rounds_.size() != o.rounds_.size())
      return false;
    if (!std::equal(totals_.begin(), totals_.end(), o.totals_.begin(), eq)) return false;
    for (std::size_t r = 0; r < rounds_.size(); ++r)
      if (!std::equal(rounds_[r].begin(), rounds_[r].end(), o.rounds_[r].begin(), eq))
        return false;
    return header_bytes_ == o.header_bytes_ && payload_bytes_ == o.payload_bytes_ &&
           message_counts_ == o.message_counts_;
  }

 private:
  std::vector<ClientTraffic> totals_;
  std::vector<std::vector<ClientTraffic>> rounds_;
  std::uint64_t header_bytes_ = 0;
  std::array<std::uint64_t, 3> payload_bytes_{};
  std::array<std::uint64_t, 3> message_counts_{};
};

/// Synchronous message bus. Messages sent during a phase are buffered and
/// become visible only after `deliver()` closes the phase; inboxes are then
/// ordered by (sender, receiver) regardless of send order.
class MessageBus {
 public:
  MessageBus(const Topology& topo, std::size_t header_bytes = kDefaultHeaderBytes)
      : topo_(&topo),
        header_bytes_(header_bytes),
        ledger_(topo.num_clients()),
        inbox_(topo.num_clients()) {}

  std::size_t message_size(const Payload& p) const noexcept {
    std::size_t params = (p.model ? p.model->size() : 0) + (p.variate ? p.variate->size() : 0);
    return header_bytes_ + kBytesPerParam * params;
  }

  void send(ClientId sender, ClientId receiver, const Payload& p, std::size_t round) {
    if (!topo_->has_edge(sender, receiver))
      throw ProtocolError("send: client " + std::to_string(receiver) +
                          " is not a neighbor of " + std::to_string(sender));
    if (p.kind == MessageKind::ModelUpdate && !p.model)
      throw ProtocolError("send: model update without a model");
    RoundMessage msg{sender, receiver, p.kind, round, p.model, p.variate, message_size(p)};
    ledger_.record(msg, header_bytes_);
    pending_.push_back(std::move(msg));
  }

  std::size_t broadcast(ClientId sender, const Payload& p, std::size_t round) {
    const auto nbrs = topo_->neighbors(sender);
    for (auto r : nbrs) send(sender, r, p, round);
    return nbrs.size();
  }

  /// Closes the current phase: pending messages replace the inboxes.
  void deliver() {
    for (auto& box : inbox_) box.clear();
    std::stable_sort(pending_.begin(), pending_.end(), [](const auto& a, const auto& b) {
      return std::pair(a.sender, a.receiver) < std::pair(b.sender, b.receiver);
    });
    for (auto& m : pending_) inbox_[m.receiver].push_back(std::move(m));
    pending_.clear();
  }

  std::span<const RoundMessage> inbox(ClientId id) const { return inbox_.at(id); }
  std::size_t pending() const noexcept { return pending_.size(); }

  const TrafficLedger& ledger() const noexcept { return ledger_; }
  TrafficLedger& ledger() noexcept { return ledger_; }
  const Topology& topology() const noexcept { return *topo_; }
  std::size_t header_bytes() const noexcept { return header_bytes_; }

 private:
  const Topology* topo_;
  std::size_t header_bytes_;
  TrafficLedger ledger_;
  std::vector<RoundMessage> pending_;
  std::vector<std::vector<RoundMessage>> inbox_;
};

}  // namespace svote
