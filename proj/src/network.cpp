#include "dtsim/network.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dtsim {

namespace {

[[noreturn]] void parse_fail(int line_no, const std::string& msg) {
  throw std::runtime_error("tntp parse error at line " +
                           std::to_string(line_no) + ": " + msg);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

void build_adjacency(Network& net) {
  const int L = net.n_links();
  net.adjacency.assign(static_cast<std::size_t>(L) * L, 0.0);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j)
      if (i != j && net.links[i].to_node == net.links[j].from_node)
        net.adjacency[static_cast<std::size_t>(i) * L + j] = 1.0;
}

}  // namespace

int Network::n_physical_links() const {
  int n = 0;
  for (const auto& l : links) n += (l.kind == LinkKind::Physical);
  return n;
}

std::vector<int> Network::links_of_kind(LinkKind k) const {
  std::vector<int> out;
  for (const auto& l : links)
    if (l.kind == k) out.push_back(l.id);
  return out;
}

std::vector<double> Network::lengths() const {
  std::vector<double> out(links.size());
  for (std::size_t i = 0; i < links.size(); ++i) out[i] = links[i].length;
  return out;
}

Network parse_tntp_text(const std::string& text, double length_unit_scale) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  int meta_nodes = -1, meta_links = -1;
  bool in_meta = true;

  Network net;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '~') continue;
    if (in_meta) {
      if (t.rfind("<END OF METADATA>", 0) == 0) {
        in_meta = false;
        continue;
      }
      if (t[0] == '<') {
        const auto close = t.find('>');
        if (close == std::string::npos) parse_fail(line_no, "unterminated metadata tag");
        const std::string key = t.substr(1, close - 1);
        const std::string val = trim(t.substr(close + 1));
        if (key == "NUMBER OF NODES") meta_nodes = std::stoi(val);
        if (key == "NUMBER OF LINKS") meta_links = std::stoi(val);
        continue;
      }
      // Some files omit <END OF METADATA>; fall through once a data row shows up.
      in_meta = false;
    }
    // data row
    if (t.back() != ';') parse_fail(line_no, "row does not end with ';'");
    t.pop_back();
    std::istringstream row(t);
    std::vector<double> fields;
    double v;
    while (row >> v) fields.push_back(v);
    if (!row.eof()) parse_fail(line_no, "non-numeric field");
    if (fields.size() < 5) parse_fail(line_no, "expected at least 5 fields");
    Link l;
    l.id = net.n_links();
    l.from_node = static_cast<int>(fields[0]) - 1;
    l.to_node = static_cast<int>(fields[1]) - 1;
    l.length = fields[3] * length_unit_scale;
    l.kind = LinkKind::Physical;
    if (l.from_node < 0 || l.to_node < 0)
      parse_fail(line_no, "node ids must be positive");
    if (meta_nodes > 0 && (l.from_node >= meta_nodes || l.to_node >= meta_nodes))
      parse_fail(line_no, "node id exceeds <NUMBER OF NODES>");
    if (!(l.length > 0.0)) parse_fail(line_no, "non-positive link length");
    net.links.push_back(l);
  }
  if (meta_nodes <= 0) throw std::runtime_error("tntp parse error: missing <NUMBER OF NODES>");
  if (meta_links >= 0 && meta_links != net.n_links())
    throw std::runtime_error("tntp parse error: <NUMBER OF LINKS> " +
                             std::to_string(meta_links) + " does not match " +
                             std::to_string(net.n_links()) + " data rows");
  net.n_nodes = meta_nodes;
  net.n_physical_nodes = meta_nodes;
  build_adjacency(net);
  return net;
}

Network parse_tntp_file(const std::string& path, double length_unit_scale) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open network file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_tntp_text(ss.str(), length_unit_scale);
}

bool all_physical_reachable(const Network& net) {
  const int L = net.n_links();
  std::vector<char> seen(L, 0);
  std::queue<int> q;
  for (const auto& l : net.links)
    if (l.kind == LinkKind::VirtualInflow) {
      seen[l.id] = 1;
      q.push(l.id);
    }
  while (!q.empty()) {
    const int i = q.front();
    q.pop();
    for (int j = 0; j < L; ++j)
      if (!seen[j] && net.adjacency[static_cast<std::size_t>(i) * L + j] != 0.0) {
        seen[j] = 1;
        q.push(j);
      }
  }
  for (const auto& l : net.links)
    if (l.kind == LinkKind::Physical && !seen[l.id]) return false;
  return true;
}

Network attach_virtual_links(const Network& physical, const RngStream& rng,
                             double virtual_length) {
  Network net = physical;
  const RngStream coin = rng.fork(rng_lane::kVirtualCoin);

  // Distinct neighbour nodes per node over physical links.
  std::vector<std::set<int>> neighbours(net.n_physical_nodes);
  for (const auto& l : net.links) {
    if (l.kind != LinkKind::Physical) continue;
    neighbours[l.from_node].insert(l.to_node);
    neighbours[l.to_node].insert(l.from_node);
  }

  int next_node = net.n_physical_nodes;
  for (int node = 0; node < net.n_physical_nodes; ++node) {
    const bool dead_end = neighbours[node].size() <= 1;
    bool add_inflow = true, add_outflow = true;
    if (!dead_end) {
      if (coin.bits(static_cast<std::uint64_t>(node)) & 1)
        add_outflow = false;
      else
        add_inflow = false;
    }
    if (add_inflow) {
      Link l;
      l.id = net.n_links();
      l.from_node = next_node++;
      l.to_node = node;
      l.length = virtual_length;
      l.kind = LinkKind::VirtualInflow;
      net.links.push_back(l);
    }
    if (add_outflow) {
      Link l;
      l.id = net.n_links();
      l.from_node = node;
      l.to_node = next_node++;
      l.length = virtual_length;
      l.kind = LinkKind::VirtualOutflow;
      net.links.push_back(l);
    }
  }
  net.n_nodes = next_node;
  build_adjacency(net);
  if (!all_physical_reachable(net))
    throw std::runtime_error(
        "virtual link construction left a physical link unreachable from "
        "every inflow link (seed " +
        std::to_string(rng.seed()) + ")");
  return net;
}

LinkParams sample_parameters(const Network& net, const ParamRanges& ranges,
                             const RngStream& rng, bool mean_mode) {
  auto check = [](double lo, double hi, const char* name) {
    if (!(lo <= hi))
      throw std::runtime_error(std::string("empty parameter range for ") + name);
  };
  check(ranges.u_lo, ranges.u_hi, "u");
  check(ranges.kappa_lo, ranges.kappa_hi, "kappa");
  check(ranges.beta_lo, ranges.beta_hi, "beta");
  check(ranges.alpha_lo, ranges.alpha_hi, "alpha");

  const RngStream lane = rng.fork(rng_lane::kParamSample);
  const int L = net.n_links();
  LinkParams p;
  p.u.resize(L);
  p.kappa.resize(L);
  p.beta.resize(L);
  p.alpha.resize(L);
  p.cost.assign(L, 1.0);
  for (int l = 0; l < L; ++l) {
    if (mean_mode) {
      p.u[l] = 0.5 * (ranges.u_lo + ranges.u_hi);
      p.kappa[l] = 0.5 * (ranges.kappa_lo + ranges.kappa_hi);
      p.beta[l] = 0.5 * (ranges.beta_lo + ranges.beta_hi);
      p.alpha[l] = 0.5 * (ranges.alpha_lo + ranges.alpha_hi);
    } else {
      p.u[l] = lane.uniform_in(ranges.u_lo, ranges.u_hi, 0, l);
      p.kappa[l] = lane.uniform_in(ranges.kappa_lo, ranges.kappa_hi, 1, l);
      p.beta[l] = lane.uniform_in(ranges.beta_lo, ranges.beta_hi, 2, l);
      p.alpha[l] = lane.uniform_in(ranges.alpha_lo, ranges.alpha_hi, 3, l);
    }
  }
  return p;
}

Network make_network(int n_nodes, std::vector<Link> links) {
  Network net;
  net.n_nodes = n_nodes;
  net.n_physical_nodes = n_nodes;
  net.links = std::move(links);
  for (std::size_t i = 0; i < net.links.size(); ++i)
    net.links[i].id = static_cast<int>(i);
  build_adjacency(net);
  return net;
}

namespace {

const char* kind_name(LinkKind k) {
  switch (k) {
    case LinkKind::Physical:
      return "physical";
    case LinkKind::VirtualInflow:
      return "virtual_inflow";
    default:
      return "virtual_outflow";
  }
}

LinkKind kind_from(const std::string& s) {
  if (s == "physical") return LinkKind::Physical;
  if (s == "virtual_inflow") return LinkKind::VirtualInflow;
  if (s == "virtual_outflow") return LinkKind::VirtualOutflow;
  throw std::runtime_error("unknown link kind: " + s);
}

}  // namespace

std::string network_to_json(const Network& net, const LinkParams* params) {
  nlohmann::json j;
  j["n_nodes"] = net.n_nodes;
  j["n_physical_nodes"] = net.n_physical_nodes;
  auto& links = j["links"];
  links = nlohmann::json::array();
  for (const auto& l : net.links) {
    links.push_back({{"id", l.id},
                     {"from", l.from_node},
                     {"to", l.to_node},
                     {"length", l.length},
                     {"kind", kind_name(l.kind)}});
  }
  // successor lists are redundant with the links but convenient for plotting
  auto& succ = j["successors"];
  succ = nlohmann::json::array();
  const int L = net.n_links();
  for (int i = 0; i < L; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int k = 0; k < L; ++k)
      if (net.adjacency[static_cast<std::size_t>(i) * L + k] != 0.0)
        row.push_back(k);
    succ.push_back(row);
  }
  if (params) {
    j["params"] = {{"u", params->u},
                   {"kappa", params->kappa},
                   {"beta", params->beta},
                   {"alpha", params->alpha},
                   {"cost", params->cost}};
  }
  return j.dump(2);
}

Network network_from_json(const std::string& json_text, LinkParams* params_out) {
  const auto j = nlohmann::json::parse(json_text);
  Network net;
  net.n_nodes = j.at("n_nodes").get<int>();
  net.n_physical_nodes = j.at("n_physical_nodes").get<int>();
  for (const auto& lj : j.at("links")) {
    Link l;
    l.id = lj.at("id").get<int>();
    l.from_node = lj.at("from").get<int>();
    l.to_node = lj.at("to").get<int>();
    l.length = lj.at("length").get<double>();
    l.kind = kind_from(lj.at("kind").get<std::string>());
    net.links.push_back(l);
  }
  build_adjacency(net);
  if (params_out && j.contains("params")) {
    const auto& pj = j.at("params");
    params_out->u = pj.at("u").get<std::vector<double>>();
    params_out->kappa = pj.at("kappa").get<std::vector<double>>();
    params_out->beta = pj.at("beta").get<std::vector<double>>();
    params_out->alpha = pj.at("alpha").get<std::vector<double>>();
    params_out->cost = pj.at("cost").get<std::vector<double>>();
  }
  return net;
}

std::string params_to_json(const LinkParams& p) {
  nlohmann::json j = {{"u", p.u},
                      {"kappa", p.kappa},
                      {"beta", p.beta},
                      {"alpha", p.alpha},
                      {"cost", p.cost}};
  return j.dump(2);
}

LinkParams params_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  LinkParams p;
  p.u = j.at("u").get<std::vector<double>>();
  p.kappa = j.at("kappa").get<std::vector<double>>();
  p.beta = j.at("beta").get<std::vector<double>>();
  p.alpha = j.at("alpha").get<std::vector<double>>();
  p.cost = j.at("cost").get<std::vector<double>>();
  return p;
}

}  // namespace dtsim
