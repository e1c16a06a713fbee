#pragma once

#include <cstdint>
#include <vector>

#include "dtsim/branch_trace.hpp"
#include "dtsim/car_following.hpp"
#include "dtsim/network.hpp"
#include "dtsim/rng.hpp"
#include "dtsim/tensor.hpp"

namespace dtsim {

/// Per-step tensors the node model consumes besides the agent state.
struct NodeInputs {
  Tensor A;                      // |L| x |L| adjacency, constant
  std::vector<double> lengths;   // link lengths, meters
  Tensor beta, cost, alpha;      // L x 1 (may carry gradients)
  std::vector<double> kappa_values;  // vacancy threshold uses raw values
};

/// Restriction of the choice stages to a subset of agent rows. `agent_rows`
/// maps local rows to original agent ids so the keyed noise draws are the
/// ones the full tensor would receive; `vacancy` supplies the per-link
/// vacancy mask computed from the complete state.
struct AgentSubset {
  const std::vector<int>* agent_rows = nullptr;
  const std::vector<double>* vacancy = nullptr;
};

/// Stochastic next-link choice. Rows of the result are one-hot for agents
/// that are at their link end with a connected, vacant successor sampled,
/// and all-zero otherwise. With cfg.soft_choices the relaxed choice tensor
/// is kept instead of its argmax one-hot.
Tensor link_choice(const Tensor& X, const NodeInputs& in, const SimConfig& cfg,
                   const RngStream& rng, std::uint64_t step,
                   BranchTrace* bt = nullptr, const AgentSubset& subset = {});

/// Merge-conflict resolution: at most one candidate agent is admitted per
/// downstream link, sampled by the merge priority of the agent's current
/// link. Result is |L| x |N|.
Tensor merge_choice(const Tensor& l, const Tensor& X, const NodeInputs& in,
                    const SimConfig& cfg, const RngStream& rng,
                    std::uint64_t step, BranchTrace* bt = nullptr,
                    const AgentSubset& subset = {});

/// Move admitted agents to position 0 of their new link and mark the old
/// entry with the sentinel, keeping the upstream computational history
/// attached to the new position.
Tensor transfer(const Tensor& X, const Tensor& a, const SimConfig& cfg);

/// g: link choice, merge choice, transfer.
Tensor node_step(const Tensor& X, const NodeInputs& in, const SimConfig& cfg,
                 const RngStream& rng, std::uint64_t step,
                 BranchTrace* bt = nullptr);

}  // namespace dtsim
