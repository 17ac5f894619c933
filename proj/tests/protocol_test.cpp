#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "svote/datahub.hpp"
#include "svote/protocol.hpp"

namespace svote {
namespace {

// --- aggregation and similarity ------------------------------------------

TEST(Aggregate, Examples) {
  const std::vector<ParamVector> three{{0, 3}, {3, 0}, {3, 3}};
  EXPECT_EQ(aggregate(three), (ParamVector{2, 2}));
  const std::vector<ParamVector> one{{1.5, -2.0}};
  EXPECT_EQ(aggregate(one), one[0]);
  const ParamVector w{0.1, 0.7, -3.3};
  const std::vector<ParamVector> same{w, w, w};
  const auto avg = aggregate(same);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(avg[i], w[i], 1e-15);
}

TEST(Aggregate, Errors) {
  EXPECT_THROW(aggregate(std::vector<ParamVector>{}), ProtocolError);
  EXPECT_THROW(aggregate(std::vector<ParamVector>{{1, 2}, {1}}), ProtocolError);
}

TEST(CosineSimilarity, Examples) {
  EXPECT_NEAR(cosine_similarity(ParamVector{0.3, -1.2, 5}, ParamVector{0.3, -1.2, 5}), 1.0, 1e-9);
  EXPECT_NEAR(cosine_similarity(ParamVector{1, 0}, ParamVector{0, 1}), 0.0, 1e-9);
  EXPECT_NEAR(cosine_similarity(ParamVector{1, 0, 1}, ParamVector{1, 1, 0}), 0.5, 1e-9);
  EXPECT_NEAR(cosine_similarity(ParamVector{1, 2, 3}, ParamVector{2, 4, 6}), 1.0, 1e-9);
}

TEST(CosineSimilarity, ZeroNorm) {
  EXPECT_THROW(cosine_similarity(ParamVector{0, 0}, ParamVector{1, 0}), SimilarityError);
  EXPECT_EQ(model_similarity(ParamVector{0, 0}, ParamVector{1, 0}), -1.0);
  EXPECT_THROW(cosine_similarity(ParamVector{1}, ParamVector{1, 0}), SimilarityError);
}

// --- selection -----------------------------------------------------------

TEST(SelectPeers, ThresholdExample) {
  // mu = 0.5, sigma = sqrt(0.06) ~ 0.24495, threshold ~ 0.6225
  const std::vector<PeerSimilarity> sims{{1, 0.2}, {4, 0.5}, {7, 0.8}};
  EXPECT_EQ(select_peers(sims, 0.5), (std::vector<ClientId>{7}));
  EXPECT_EQ(select_peers(sims, 0.0), (std::vector<ClientId>{4, 7}));  // inclusive at mu
}

TEST(SelectPeers, DegenerateSpreadSelectsAll) {
  const std::vector<PeerSimilarity> sims{{2, 0.1}, {5, 0.1}, {9, 0.1}};
  for (double tau : {0.0, 0.5, 3.0}) EXPECT_EQ(select_peers(sims, tau).size(), 3u);
}

TEST(SelectPeers, VeryNegativeTauSelectsAll) {
  const std::vector<PeerSimilarity> sims{{0, -0.9}, {1, 0.3}, {2, 0.99}, {3, 0.0}};
  EXPECT_EQ(select_peers(sims, -1e9).size(), 4u);
}

TEST(SelectPeers, EmptyResultFallsBackToBest) {
  const std::vector<PeerSimilarity> sims{{0, 0.1}, {3, 0.9}, {5, 0.9}, {6, 0.2}};
  EXPECT_EQ(select_peers(sims, 50.0), (std::vector<ClientId>{3}));
  EXPECT_THROW(select_peers(std::vector<PeerSimilarity>{}, 0.0), ProtocolError);
}

TEST(SelectPeers, InvariantUnderPositiveModelScaling) {
  Rng rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int trial = 0; trial < 40; ++trial) {
    ParamVector local(12);
    for (auto& v : local) v = g(rng);
    std::vector<ParamVector> peers(6, ParamVector(12));
    for (auto& p : peers)
      for (auto& v : p) v = g(rng);
    std::vector<PeerSimilarity> a, b;
    const double ls = scale(rng);
    ParamVector local_scaled = local;
    for (auto& v : local_scaled) v *= ls;
    for (ClientId k = 0; k < peers.size(); ++k) {
      a.emplace_back(k, cosine_similarity(local, peers[k]));
      auto scaled = peers[k];
      const double s = scale(rng);
      for (auto& v : scaled) v *= s;
      b.emplace_back(k, cosine_similarity(local_scaled, scaled));
    }
    for (double tau : {-0.5, 0.0, 0.7}) EXPECT_EQ(select_peers(a, tau), select_peers(b, tau));
  }
}

// --- votes ---------------------------------------------------------------

TEST(CastVotes, Counting) {
  const auto topo = full_topology(11);
  MessageBus bus(topo);
  EXPECT_EQ(cast_votes(0, std::vector<ClientId>{3, 7}, bus, 0), 2u);
  EXPECT_EQ(cast_votes(1, std::vector<ClientId>{}, bus, 0), 0u);
  bus.deliver();
  EXPECT_EQ(count_votes(bus.inbox(3)), 1u);
  EXPECT_EQ(count_votes(bus.inbox(7)), 1u);
  EXPECT_EQ(count_votes(bus.inbox(4)), 0u);

  for (ClientId i = 1; i <= 10; ++i) cast_votes(i, std::vector<ClientId>{0}, bus, 1);
  bus.deliver();
  EXPECT_EQ(count_votes(bus.inbox(0)), 10u);
}

TEST(VoteSymmetry, IdenticalModelsSelectEveryoneAndCollectDegreeVotes) {
  const auto topo = erdos_renyi(9, 0.5, 3);
  const ParamVector w{0.3, -0.2, 0.9, 0.05};
  MessageBus bus(topo);
  for (ClientId i = 0; i < 9; ++i) {
    std::vector<PeerSimilarity> sims;
    for (auto j : topo.neighbors(i)) sims.emplace_back(j, cosine_similarity(w, w));
    const auto sel = select_peers(sims, 0.0);
    EXPECT_EQ(sel.size(), topo.degree(i));
    cast_votes(i, sel, bus, 0);
  }
  bus.deliver();
  for (ClientId i = 0; i < 9; ++i) EXPECT_EQ(count_votes(bus.inbox(i)), topo.degree(i));
}

// --- vote gate -------------------------------------------------------------

auto always_fail = [](double) { return false; };
auto always_succeed = [](double) { return true; };

TEST(VoteGate, EnoughVotesTrains) {
  ClientState s;
  s.votes_received = 3;
  EXPECT_EQ(vote_gate(s, 2, 5, always_fail), TrainingAction::TrainLocal);
}

TEST(VoteGate, SparseNeighborhoodTrains) {
  ClientState s;
  EXPECT_EQ(vote_gate(s, 2, 2, always_fail), TrainingAction::TrainLocal);
  EXPECT_EQ(vote_gate(s, 2, 1, always_fail), TrainingAction::TrainLocal);
}

TEST(VoteGate, FailuresEscalateByTenths) {
  ClientState s;
  EXPECT_EQ(s.p_escalation.value(), 0.1);
  EXPECT_EQ(vote_gate(s, 2, 5, always_fail), TrainingAction::Skip);
  EXPECT_EQ(s.p_escalation.value(), 0.2);
  vote_gate(s, 2, 5, always_fail);
  vote_gate(s, 2, 5, always_fail);
  EXPECT_EQ(s.p_escalation.value(), 0.4);
}

TEST(VoteGate, EscalationCapsAtOne) {
  ClientState s;
  const double expected[] = {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.0, 1.0};
  for (double e : expected) {
    vote_gate(s, 4, 6, always_fail);
    EXPECT_EQ(s.p_escalation.value(), e);
  }
}

TEST(VoteGate, TrainingResetsEscalation) {
  ClientState s;
  for (int i = 0; i < 4; ++i) vote_gate(s, 4, 6, always_fail);
  double seen = -1.0;
  EXPECT_EQ(vote_gate(s, 4, 6, [&](double p) { seen = p; return true; }), TrainingAction::TrainRandom);
  EXPECT_EQ(seen, 0.5);
  EXPECT_EQ(s.p_escalation.value(), 0.1);
  for (int i = 0; i < 2; ++i) vote_gate(s, 4, 6, always_fail);
  s.votes_received = 4;
  EXPECT_EQ(vote_gate(s, 4, 6, always_succeed), TrainingAction::TrainLocal);
  EXPECT_EQ(s.p_escalation.value(), 0.1);
}

TEST(VoteGate, RngDrawMatchesProbability) {
  Rng rng(11);
  int trains = 0;
  for (int i = 0; i < 20000; ++i) {
    ClientState s;  // fresh p = 0.1
    trains += vote_gate(s, 5, 6, rng) == TrainingAction::TrainRandom;
  }
  EXPECT_NEAR(trains / 20000.0, 0.1, 0.01);
}

TEST(SVoteConfig, VMinRule) {
  SVoteConfig cfg;
  EXPECT_EQ(cfg.v_min(9), 5u);
  EXPECT_EQ(cfg.v_min(4), 2u);
  EXPECT_EQ(cfg.v_min(1), 1u);
  cfg.v_min_rule = VMinRule::Fixed;
  cfg.v_min_fixed = 3;
  EXPECT_EQ(cfg.v_min(9), 3u);
  cfg.t_init = 28;
  cfg.n_diverge = 2;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// --- round engines ---------------------------------------------------------

struct Fixture {
  Topology topo;
  std::vector<ClientShard> shards;
  Federation fed;

  Fixture(std::size_t n, double alpha, std::uint64_t seed, bool erdos = false,
          std::size_t classes = 4) {
    const auto data = gen_synthetic(classes, 5, 60, 0.4, seed);
    const auto plan = dirichlet_partition(data, n, alpha, seed + 1, 16);
    for (ClientId i = 0; i < n; ++i) {
      auto s = split_train_test(data.subset(plan.assignment[i]), 0.2, seed + 2 + i);
      shards.push_back({std::move(s.train), std::move(s.test)});
    }
    topo = erdos ? erdos_renyi(n, 0.5, seed) : full_topology(n);
    fed.spec = {ModelKind::SoftmaxRegression, 5, classes, 0};
    fed.hp.learning_rate = 0.1;
    fed.hp.batch_size = 8;
    fed.hp.local_epochs = 1;
    fed.topology = &topo;
    fed.shards = shards;
    fed.seed = seed;
  }
};

using ModelHistory = std::vector<std::vector<ParamVector>>;

RoundObserver record_models(ModelHistory& out) {
  return [&out](std::size_t, std::span<const ClientState> clients) {
    std::vector<ParamVector> round;
    for (const auto& c : clients) round.push_back(c.w);
    out.push_back(std::move(round));
  };
}

TEST(RunSVote, DegeneratesToFedAvg) {
  Fixture fx(6, 0.5, 21);
  ModelHistory sv, fa;
  SVoteConfig cfg;
  cfg.t_init = 2;
  cfg.n_diverge = 0;
  cfg.total_rounds = 8;
  cfg.tau = -1e9;
  cfg.v_min_rule = VMinRule::Fixed;
  cfg.v_min_fixed = 0;
  cfg.suppress_nontrainer_updates = false;
  auto fed = fx.fed;
  fed.on_round = record_models(sv);
  run_svote(cfg, fed);
  fed.on_round = record_models(fa);
  run_baseline(BaselineKind::FedAvg, 8, fed);
  ASSERT_EQ(sv.size(), 8u);
  EXPECT_EQ(sv, fa);
}

TEST(RunSVote, DivergenceRoundsAreSilent) {
  Fixture fx(6, 0.5, 22);
  SVoteConfig cfg;
  cfg.t_init = 2;
  cfg.n_diverge = 3;
  cfg.total_rounds = 8;
  const auto res = run_svote(cfg, fx.fed);
  for (std::size_t t = 2; t < 5; ++t)
    for (ClientId i = 0; i < 6; ++i) {
      EXPECT_EQ(res.ledger.round(t, i).bytes_sent, 0u);
      EXPECT_EQ(res.ledger.round(t, i).bytes_received, 0u);
      EXPECT_EQ(res.records[t].clients[i].models_aggregated, 0u);
    }
  EXPECT_GT(res.ledger.round(1, 0).bytes_sent, 0u);
  EXPECT_GT(res.ledger.round(5, 0).bytes_sent, 0u);
}

TEST(RunSVote, Deterministic) {
  Fixture fx(7, 0.1, 23, true);
  SVoteConfig cfg;
  cfg.total_rounds = 12;
  ModelHistory a, b;
  auto fed = fx.fed;
  fed.on_round = record_models(a);
  const auto ra = run_svote(cfg, fed);
  fed.on_round = record_models(b);
  const auto rb = run_svote(cfg, fed);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(ra.ledger == rb.ledger);
  for (std::size_t t = 0; t < ra.records.size(); ++t)
    for (ClientId i = 0; i < 7; ++i) {
      EXPECT_EQ(ra.records[t].clients[i].f1, rb.records[t].clients[i].f1);
      EXPECT_EQ(ra.records[t].clients[i].action, rb.records[t].clients[i].action);
    }
}

// Exact ledger reconstruction for every S-VOTE round: models or notices to
// each neighbor plus one header-only vote per selected peer.
TEST(RunSVote, LedgerMatchesActionsAndSelections) {
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    Fixture fx(8, 0.1, seed, seed % 2 == 1);
    SVoteConfig cfg;
    cfg.t_init = 3;
    cfg.n_diverge = 1;
    cfg.total_rounds = 14;
    std::vector<std::vector<std::size_t>> selected_sizes;
    auto fed = fx.fed;
    fed.on_round = [&](std::size_t, std::span<const ClientState> clients) {
      std::vector<std::size_t> s;
      for (const auto& c : clients) s.push_back(c.selected_peers.size());
      selected_sizes.push_back(s);
    };
    const auto res = run_svote(cfg, fed);
    const auto fedavg = run_baseline(BaselineKind::FedAvg, 14, fx.fed);
    const std::uint64_t model_msg = 32 + 4 * fx.fed.spec.param_count();
    std::uint64_t skips = 0;
    for (std::size_t t = 4; t < 14; ++t) {
      std::uint64_t share_bytes = 0, fedavg_bytes = 0;
      bool all_trained = true;
      for (ClientId i = 0; i < 8; ++i) {
        const auto& m = res.records[t].clients[i];
        const auto deg = fx.topo.degree(i);
        const bool trained = m.action != TrainingAction::Skip;
        all_trained &= trained;
        skips += !trained;
        const std::uint64_t share = deg * (trained ? model_msg : 32);
        EXPECT_EQ(m.bytes_sent, share + 32 * selected_sizes[t][i]) << "round " << t << " client " << i;
        EXPECT_EQ(m.samples_trained == 0, !trained);
        EXPECT_GE(m.models_aggregated, 1u);
        share_bytes += share;
        fedavg_bytes += fedavg.records[t].clients[i].bytes_sent;
      }
      EXPECT_LE(share_bytes, fedavg_bytes);
      EXPECT_EQ(share_bytes == fedavg_bytes, all_trained);
    }
    EXPECT_EQ(res.ledger.total_sent(), res.ledger.total_received());
    if (skips > 0) {
      EXPECT_LT(res.ledger.total_sent(), fedavg.ledger.total_sent());
    }
  }
}

TEST(RunSVote, EscalationNeverDecreasesDuringSkipsAndStaysBounded) {
  Fixture fx(10, 0.1, 41, true, 6);
  SVoteConfig cfg;
  cfg.tau = 0.5;
  std::vector<std::vector<int>> p;
  std::vector<std::vector<TrainingAction>> actions;
  auto fed = fx.fed;
  fed.on_round = [&](std::size_t, std::span<const ClientState> clients) {
    std::vector<int> row;
    for (const auto& c : clients) {
      row.push_back(c.p_escalation.tenths());
      EXPECT_GE(c.p_escalation.value(), 0.1);
      EXPECT_LE(c.p_escalation.value(), 1.0);
      for (auto s : c.selected_peers) EXPECT_TRUE(fx.topo.has_edge(c.id, s));
    }
    p.push_back(row);
  };
  const auto res = run_svote(cfg, fed);
  for (std::size_t t = 1; t < res.records.size(); ++t)
    for (ClientId i = 0; i < 10; ++i)
      if (res.records[t].clients[i].action == TrainingAction::Skip) {
        EXPECT_GE(p[t][i], p[t - 1][i]);
      } else {
        EXPECT_EQ(p[t][i], 1);
      }
}

TEST(RunSVote, LiteralReplayKeepsInitialSelection) {
  Fixture fx(6, 0.1, 44, true);
  SVoteConfig cfg;
  cfg.t_init = 2;
  cfg.n_diverge = 1;
  cfg.total_rounds = 9;
  cfg.refresh_selection = false;
  std::vector<std::vector<std::vector<ClientId>>> sel;
  auto fed = fx.fed;
  fed.on_round = [&](std::size_t, std::span<const ClientState> clients) {
    std::vector<std::vector<ClientId>> row;
    for (const auto& c : clients) row.push_back(c.selected_peers);
    sel.push_back(row);
  };
  const auto res = run_svote(cfg, fed);
  for (std::size_t t = 4; t < 9; ++t) EXPECT_EQ(sel[t], sel[3]);
  EXPECT_EQ(res.ledger.message_count(MessageKind::Vote),
            [&] {
              std::uint64_t n = 0;
              for (const auto& s : sel[3]) n += s.size();
              return n;
            }());
}

TEST(RunBaseline, TwoClientFedAvgStaysInLockstep) {
  LabeledDataset data = gen_synthetic(3, 4, 30, 0.3, 5);
  std::vector<ClientShard> shards;
  const auto split = split_train_test(data, 0.2, 1);
  shards.push_back({split.train, split.test});
  shards.push_back({split.train, split.test});
  const auto topo = full_topology(2);
  Federation fed;
  fed.spec = {ModelKind::SoftmaxRegression, 4, 3, 0};
  fed.hp.learning_rate = 0.2;
  fed.hp.batch_size = 8;
  fed.topology = &topo;
  fed.shards = shards;
  fed.seed = 9;
  ModelHistory h;
  fed.on_round = record_models(h);
  run_baseline(BaselineKind::FedAvg, 6, fed);
  for (const auto& round : h) EXPECT_EQ(round[0], round[1]);
}

TEST(RunBaseline, FedProxWithZeroMuIsFedAvg) {
  Fixture fx(5, 0.5, 51);
  ModelHistory a, b;
  auto fed = fx.fed;
  fed.hp.prox_mu = 0.0;
  fed.on_round = record_models(a);
  run_baseline(BaselineKind::FedProx, 6, fed);
  fed.on_round = record_models(b);
  run_baseline(BaselineKind::FedAvg, 6, fed);
  EXPECT_EQ(a, b);
  fed.hp.prox_mu = 0.5;
  ModelHistory c;
  fed.on_round = record_models(c);
  run_baseline(BaselineKind::FedProx, 6, fed);
  EXPECT_NE(c, b);
}

TEST(RunBaseline, ScaffoldDoublesModelPayload) {
  Fixture fx(6, 0.5, 52, true);
  const auto fa = run_baseline(BaselineKind::FedAvg, 5, fx.fed);
  const auto sc = run_baseline(BaselineKind::Scaffold, 5, fx.fed);
  EXPECT_EQ(sc.ledger.payload_bytes(MessageKind::ModelUpdate),
            2 * fa.ledger.payload_bytes(MessageKind::ModelUpdate));
  EXPECT_EQ(sc.ledger.header_bytes(), fa.ledger.header_bytes());
  EXPECT_EQ(sc.ledger.total_sent() - sc.ledger.header_bytes(),
            2 * (fa.ledger.total_sent() - fa.ledger.header_bytes()));
  for (const auto& c : sc.final_states) {
    EXPECT_TRUE(all_finite(c.cv.local_c));
    EXPECT_TRUE(all_finite(c.cv.global_c));
  }
}

TEST(RunBaseline, EqualShardsGiveEqualWorkUnits) {
  LabeledDataset data = gen_synthetic(3, 4, 40, 0.3, 5);
  const auto split = split_train_test(data, 0.25, 1);
  std::vector<ClientShard> shards(10, ClientShard{split.train, split.test});
  const auto topo = full_topology(10);
  Federation fed;
  fed.spec = {ModelKind::SoftmaxRegression, 4, 3, 0};
  fed.hp.batch_size = 8;
  fed.topology = &topo;
  fed.shards = shards;
  const auto res = run_baseline(BaselineKind::FedAvg, 3, fed);
  const auto units = work_units(res.records);
  for (auto u : units) EXPECT_EQ(u, units.front());
}

TEST(RunBaseline, MlpModelRuns) {
  Fixture fx(4, 0.5, 53);
  auto fed = fx.fed;
  fed.spec = {ModelKind::Mlp1Hidden, 5, 4, 6};
  const auto res = run_baseline(BaselineKind::FedAvg, 3, fed);
  EXPECT_EQ(res.final_states[0].w.size(), fed.spec.param_count());
}

TEST(RunBaseline, ShardCountMustMatchTopology) {
  Fixture fx(4, 0.5, 54);
  const auto bigger = full_topology(5);
  auto fed = fx.fed;
  fed.topology = &bigger;
  EXPECT_THROW(run_baseline(BaselineKind::FedAvg, 2, fed), ConfigError);
}

}  // namespace
}  // namespace svote
