#pragma once

#include <string>
#include <vector>

#include "dtsim/rng.hpp"
#include "dtsim/tensor.hpp"

namespace dtsim {

enum class LinkKind { Physical, VirtualInflow, VirtualOutflow };

struct Link {
  int id = -1;
  int from_node = -1;
  int to_node = -1;
  double length = 0.0;  // meters
  LinkKind kind = LinkKind::Physical;
};

/// Per-link parameter vectors, one entry per link in link-id order.
struct LinkParams {
  std::vector<double> u;      // free-flow speed, m/s
  std::vector<double> kappa;  // jam density, veh/m
  std::vector<double> beta;   // utility weight
  std::vector<double> alpha;  // merge priority
  std::vector<double> cost;   // travel cost
};

struct ParamRanges {
  double u_lo = 13.9, u_hi = 22.2;
  double kappa_lo = 0.18, kappa_hi = 0.22;
  double beta_lo = 0.0, beta_hi = 5.0;
  double alpha_lo = 0.01, alpha_hi = 5.0;
};

struct Network {
  int n_nodes = 0;           // physical + virtual boundary nodes
  int n_physical_nodes = 0;
  std::vector<Link> links;   // physical links first, then virtual
  std::vector<double> adjacency;  // |L| x |L| row-major 0/1

  int n_links() const { return static_cast<int>(links.size()); }
  int n_physical_links() const;
  std::vector<int> links_of_kind(LinkKind k) const;
  std::vector<double> lengths() const;

  Tensor adjacency_tensor() const {
    return Tensor::from(adjacency, {n_links(), n_links()});
  }
};

/// Parse a TNTP `_net.tntp` network description. The length column is
/// converted to meters with `length_unit_scale`. Malformed input raises
/// std::runtime_error naming the offending line.
Network parse_tntp_text(const std::string& text, double length_unit_scale);
Network parse_tntp_file(const std::string& path, double length_unit_scale);

/// Attach one virtual inflow and one virtual outflow link per node, then
/// drop one of the two at every non-dead-end node (seeded coin). Dead-end
/// nodes (at most one neighbouring node over physical links) keep both.
/// Every virtual link ends at its own fresh boundary node. Throws if a
/// physical link ends up unreachable from all inflow links.
Network attach_virtual_links(const Network& physical, const RngStream& rng,
                             double virtual_length);

/// True when every physical link can be reached from some inflow link by
/// walking the adjacency relation.
bool all_physical_reachable(const Network& net);

/// Uniform per-link parameter draws over `ranges` (mean_mode: midpoints
/// everywhere). Cost starts at 1 on every link.
LinkParams sample_parameters(const Network& net, const ParamRanges& ranges,
                             const RngStream& rng, bool mean_mode = false);

/// Assemble a network from explicit links (test scenarios and demos).
/// Adjacency is derived from node incidence; no virtual links are added.
Network make_network(int n_nodes, std::vector<Link> links);

std::string network_to_json(const Network& net, const LinkParams* params);
Network network_from_json(const std::string& json_text, LinkParams* params_out);

std::string params_to_json(const LinkParams& p);
LinkParams params_from_json(const std::string& json_text);

}  // namespace dtsim
