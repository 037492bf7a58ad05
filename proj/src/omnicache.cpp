#include "odrt/omnicache.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "odrt/error.hpp"
#include "odrt/ops.hpp"

namespace odrt {

OmniCache::OmniCache(int num_blocks, int steps)
    : num_blocks_(num_blocks),
      steps_(steps),
      timestep_(static_cast<std::size_t>(num_blocks)),
      rollout_(static_cast<std::size_t>(num_blocks) * static_cast<std::size_t>(steps)) {
  require(num_blocks >= 1 && steps >= 1, ErrorKind::Config, "OmniCache needs at least one block and one step");
}

void OmniCache::begin_rollout_iteration(int r) {
  if (r <= r_) {
    fail(ErrorKind::Contract, "rollout iteration must advance: got r=" + std::to_string(r) + " after r=" +
                                  std::to_string(r_));
  }
  r_ = r;
  k_ = 0;
  init_done_ = false;
  for (auto& s : forward_) s = CacheSlot{};
  for (auto& s : timestep_) s = CacheSlot{};
}

void OmniCache::begin_forward(int k) {
  if (r_ < 1) fail(ErrorKind::Contract, "begin_forward before begin_rollout_iteration");
  if (k < 1 || k > steps_) {
    fail(ErrorKind::Contract, "lattice step k=" + std::to_string(k) + " outside [1, " + std::to_string(steps_) + "]");
  }
  k_ = k;
  for (auto& s : forward_) s = CacheSlot{};
}

void OmniCache::check_block(int b) const {
  if (b < 1 || b > num_blocks_) {
    fail(ErrorKind::Contract, "block b=" + std::to_string(b) + " outside [1, " + std::to_string(num_blocks_) + "]");
  }
}

std::size_t OmniCache::cell(int b, int k) const {
  check_block(b);
  if (k < 1 || k > steps_) {
    fail(ErrorKind::Contract, "lattice step k=" + std::to_string(k) + " outside [1, " + std::to_string(steps_) + "]");
  }
  return static_cast<std::size_t>(k - 1) * static_cast<std::size_t>(num_blocks_) + static_cast<std::size_t>(b - 1);
}

const CacheSlot& OmniCache::forward_slot(BlockKind kind) const { return forward_[static_cast<std::size_t>(kind)]; }

const CacheSlot& OmniCache::timestep_slot(int b) const {
  check_block(b);
  return timestep_[static_cast<std::size_t>(b - 1)];
}

const CacheSlot& OmniCache::rollout_slot(int b, int k) const { return rollout_[cell(b, k)]; }

bool OmniCache::available(BlockChoice dir, int b, int k) const {
  switch (dir) {
    case BlockChoice::Compute: return true;
    case BlockChoice::Forward: {
      check_block(b);
      const CacheSlot& s = forward_slot(kind_of_block(b));
      return s.populated() && s.source.b < b && k == k_;
    }
    case BlockChoice::Timestep: {
      const CacheSlot& s = timestep_slot(b);
      return s.populated() && s.source.k > k;
    }
    case BlockChoice::Rollout: {
      const CacheSlot& s = rollout_slot(b, k);
      return s.populated() && s.source.r < r_;
    }
  }
  return false;
}

const Tensor& OmniCache::serve(BlockChoice dir, const LatticeCoord& anchor) const {
  const CacheSlot* slot = nullptr;
  switch (dir) {
    case BlockChoice::Compute:
      fail(ErrorKind::Contract, "serve() called for a compute choice at " + to_string(anchor));
    case BlockChoice::Forward:
      check_block(anchor.b);
      slot = &forward_slot(kind_of_block(anchor.b));
      break;
    case BlockChoice::Timestep: slot = &timestep_slot(anchor.b); break;
    case BlockChoice::Rollout: slot = &rollout_slot(anchor.b, anchor.k); break;
  }
  if (!slot->populated()) {
    fail(ErrorKind::CacheMiss, std::string(direction_name(dir)) + " reuse at " + to_string(anchor) +
                                   " found an empty slot");
  }
  const LatticeCoord& s = slot->source;
  bool legal = false;
  switch (dir) {
    case BlockChoice::Forward:
      legal = s.k == anchor.k && s.r == anchor.r && s.b < anchor.b && kind_of_block(s.b) == kind_of_block(anchor.b);
      break;
    case BlockChoice::Timestep: legal = s.b == anchor.b && s.r == anchor.r && s.k > anchor.k; break;
    case BlockChoice::Rollout: legal = s.b == anchor.b && s.k == anchor.k && s.r < anchor.r; break;
    case BlockChoice::Compute: break;
  }
  if (!legal) {
    fail(ErrorKind::Contract, std::string("illegal ") + direction_name(dir) + " serve: source " + to_string(s) +
                                  " for anchor " + to_string(anchor));
  }
  ++serves_;
  return slot->value;
}

void OmniCache::store(const Tensor& d, const LatticeCoord& coord) {
  if (coord.r != r_ || coord.k != k_) {
    fail(ErrorKind::Contract, "store at " + to_string(coord) + " outside the current forward (k=" +
                                  std::to_string(k_) + ", r=" + std::to_string(r_) + ")");
  }
  const Tensor v = d.requires_grad() ? d.detach() : d;
  const CacheSlot slot{v, coord};
  forward_[static_cast<std::size_t>(kind_of_block(coord.b))] = slot;
  timestep_[static_cast<std::size_t>(coord.b - 1)] = slot;
  rollout_[cell(coord.b, coord.k)] = slot;
  ++stores_;
}

std::vector<std::uint8_t> OmniCache::rollout_snapshot() const {
  std::vector<std::uint8_t> out(rollout_.size());
  for (std::size_t i = 0; i < rollout_.size(); ++i) out[i] = rollout_[i].populated() ? 1 : 0;
  return out;
}

BlockUpdate sparse_block_update(const DiTPolicy& policy, const Tensor& h, const LatticeCoord& coord,
                                BlockChoice choice, OmniCache& cache, const ConditionEmbedding& cond) {
  if (choice == BlockChoice::Compute) {
    Tensor d = policy.block_residual(coord.b, h, cond.tokens, 1);
    cache.store(d, coord);
    return BlockUpdate{ops::add(h, d), BlockResidual{d, coord, kind_of_block(coord.b)}};
  }
  return BlockUpdate{ops::add(h, cache.serve(choice, coord)), std::nullopt};
}

SparseForward sparse_forward(const DiTPolicy& policy, const Tensor& a_k, const ConditionEmbedding& cond,
                             std::span<const BlockChoice> mask_row, OmniCache& cache, int k, ResidualLog* log) {
  const int B = policy.config().num_blocks();
  if (static_cast<int>(mask_row.size()) != B) {
    fail(ErrorKind::Shape, "mask row has " + std::to_string(mask_row.size()) + " entries, model has " +
                               std::to_string(B) + " blocks");
  }
  if (!cache.init_done()) {
    for (int b = 1; b <= B; ++b) {
      const BlockChoice c = mask_row[static_cast<std::size_t>(b - 1)];
      if (c == BlockChoice::Forward || c == BlockChoice::Timestep) {
        fail(ErrorKind::CacheMiss, std::string(direction_name(c)) + " reuse at " +
                                       to_string(LatticeCoord{b, k, cache.iteration()}) +
                                       " before the cache initialization forward");
      }
    }
  }
  const FlopsModel model = FlopsModel::from(policy.config());
  cache.begin_forward(k);
  SparseForward out;
  Tensor h = policy.embed_actions(a_k, 1);
  for (int b = 1; b <= B; ++b) {
    const LatticeCoord coord{b, k, cache.iteration()};
    BlockUpdate u = sparse_block_update(policy, h, coord, mask_row[static_cast<std::size_t>(b - 1)], cache, cond);
    h = std::move(u.h);
    if (u.computed) {
      out.flops.blocks += model.block(b);
      ++out.computed;
      if (log) log->push_back(std::move(*u.computed));
    }
  }
  out.eps_hat = policy.predict_noise(h);
  out.flops.embed_head = model.embed_head;
  cache.mark_init_done();
  return out;
}

Tensor gated_sparse_forward(const DiTPolicy& policy, const Tensor& a_k, const ConditionEmbedding& cond,
                            const GatedRow& row, const Tensor& probs, OmniCache& cache, int k, bool soft,
                            ServeTrace* trace) {
  const int B = policy.config().num_blocks();
  require(static_cast<int>(row.choices.size()) == B && static_cast<int>(row.gated.size()) == B, ErrorKind::Shape,
          "gated row must cover every block");
  cache.begin_forward(k);
  Tensor h = policy.embed_actions(a_k, 1);
  for (int b = 1; b <= B; ++b) {
    const auto idx = static_cast<std::size_t>(b - 1);
    const LatticeCoord coord{b, k, cache.iteration()};
    Tensor d_new = policy.block_residual(b, h, cond.tokens, 1);
    if (!row.gated[idx]) {
      if (row.choices[idx] != BlockChoice::Compute) {
        fail(ErrorKind::Contract, "ungated cell " + to_string(coord) + " must compute");
      }
      h = ops::add(h, d_new);
      cache.store(d_new, coord);
      continue;
    }
    std::array<Tensor, 4> cands;
    cands[0] = d_new;
    BlockChoice choice = row.choices[idx];
    if (trace && trace->mode == ServeTrace::Mode::Replay) {
      if (trace->cursor >= trace->served.size()) fail(ErrorKind::Contract, "serve trace exhausted");
      const auto& s = trace->served[trace->cursor];
      choice = trace->choices[trace->cursor];
      ++trace->cursor;
      for (int i = 0; i < 3; ++i) cands[static_cast<std::size_t>(i + 1)] = s[static_cast<std::size_t>(i)];
    } else {
      if (choice != BlockChoice::Compute) cache.serve(choice, coord);  // surfaces a miss for the chosen branch
      for (int i = 1; i < 4; ++i) {
        const auto dir = static_cast<BlockChoice>(i);
        if (cache.available(dir, b, k)) cands[static_cast<std::size_t>(i)] = cache.serve(dir, coord);
      }
      if (trace && trace->mode == ServeTrace::Mode::Record) {
        trace->served.push_back({cands[1], cands[2], cands[3]});
        trace->choices.push_back(choice);
      }
    }
    h = ops::add(h, ops::pass_through_gate(cands, probs, row.first_prob_row + idx, static_cast<int>(choice), soft));
    if (choice == BlockChoice::Compute) cache.store(d_new, coord);
  }
  cache.mark_init_done();
  return policy.predict_noise(h);
}

Tensor rollout_feature_similarity(const ResidualLog& a, const ResidualLog& b, int num_blocks, int steps) {
  auto index = [&](const ResidualLog& log, const char* which) {
    std::map<std::pair<int, int>, const Tensor*> m;
    for (const auto& res : log) {
      if (res.coord.b < 1 || res.coord.b > num_blocks || res.coord.k < 1 || res.coord.k > steps) {
        fail(ErrorKind::Config, std::string("residual log ") + which + " has coord " + to_string(res.coord) +
                                    " outside the configured lattice");
      }
      m[{res.coord.b, res.coord.k}] = &res.value;
    }
    return m;
  };
  const auto ma = index(a, "a");
  const auto mb = index(b, "b");
  if (ma.size() != mb.size()) fail(ErrorKind::Config, "residual logs cover different lattice cells");
  Tensor out(Shape{static_cast<std::size_t>(num_blocks), static_cast<std::size_t>(steps)},
             std::numeric_limits<double>::quiet_NaN());
  auto v = out.mutable_values();
  for (const auto& [key, ta] : ma) {
    auto it = mb.find(key);
    if (it == mb.end()) {
      fail(ErrorKind::Config, "residual log b lacks cell (b=" + std::to_string(key.first) +
                                  ", k=" + std::to_string(key.second) + ")");
    }
    const Tensor* tb = it->second;
    if (ta->shape() != tb->shape()) fail(ErrorKind::Config, "residual shapes differ between logs");
    double dot = 0.0, na = 0.0, nb = 0.0;
    auto x = ta->values();
    auto y = tb->values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      dot += x[i] * y[i];
      na += x[i] * x[i];
      nb += y[i] * y[i];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    v[static_cast<std::size_t>(key.first - 1) * static_cast<std::size_t>(steps) +
      static_cast<std::size_t>(key.second - 1)] = denom > 0.0 ? dot / denom : 0.0;
  }
  return out;
}

Section residual_log_section(const ResidualLog& log) {
  Section s{"residuals", {}};
  for (const auto& res : log) {
    s.blobs.push_back(Blob{"r" + std::to_string(res.coord.r) + "/k" + std::to_string(res.coord.k) + "/b" +
                               std::to_string(res.coord.b) + "/" + block_kind_name(res.kind),
                           res.value.detach()});
  }
  return s;
}

ResidualLog residual_log_from_section(const Section& section) {
  ResidualLog log;
  for (const auto& blob : section.blobs) {
    int r = 0, k = 0, b = 0;
    char kind[8] = {};
    if (std::sscanf(blob.name.c_str(), "r%d/k%d/b%d/%7s", &r, &k, &b, kind) != 4 || b < 1) {
      fail(ErrorKind::Data, "malformed residual blob name '" + blob.name + "'");
    }
    if (std::string(kind) != block_kind_name(kind_of_block(b))) {
      fail(ErrorKind::Data, "residual blob '" + blob.name + "' kind disagrees with its block index");
    }
    log.push_back(BlockResidual{blob.value, LatticeCoord{b, k, r}, kind_of_block(b)});
  }
  return log;
}

}  // namespace odrt
