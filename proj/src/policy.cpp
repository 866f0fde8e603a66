#include "pgts/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace pgts {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLayerNormEps = 1e-5;

void ensure_finite(double x, const char* where) {
  if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite value in ") + where);
}

}  // namespace

void PolicyConfig::check() const {
  if (feature_dim < 1 || k_max < 1 || hidden < 1 || layers < 1 || depth_limit < 1)
    throw std::invalid_argument("policy config dimensions must be >= 1");
}

ParamLayout ParamLayout::make(const PolicyConfig& c) {
  ParamLayout lay;
  const int H = c.hidden;
  const int I = c.input_dim();
  const int A = c.num_actions();

  auto add = [&lay](const std::string& name, int rows, int cols) {
    lay.sections.push_back({name, lay.total, rows, cols});
    lay.total += static_cast<std::size_t>(rows) * cols;
    return lay.sections.back().offset;
  };

  lay.w_in = add("w_in", H, I);
  lay.b_in = add("b_in", H, 1);
  lay.layer.resize(static_cast<std::size_t>(c.layers));
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto& L = lay.layer[static_cast<std::size_t>(l)];
    L.w_msg1 = add(p + "w_msg1", H, H + 1);
    L.b_msg1 = add(p + "b_msg1", H, 1);
    L.w_msg2 = add(p + "w_msg2", H, H);
    L.b_msg2 = add(p + "b_msg2", H, 1);
    L.w_q = add(p + "w_q", H, H);
    L.w_k = add(p + "w_k", H, H);
    L.w_v = add(p + "w_v", H, H);
    L.ln1_g = add(p + "ln1_gain", H, 1);
    L.ln1_b = add(p + "ln1_offset", H, 1);
    L.w_ff1 = add(p + "w_ff1", H, H);
    L.b_ff1 = add(p + "b_ff1", H, 1);
    L.w_ff2 = add(p + "w_ff2", H, H);
    L.b_ff2 = add(p + "b_ff2", H, 1);
    L.ln2_g = add(p + "ln2_gain", H, 1);
    L.ln2_b = add(p + "ln2_offset", H, 1);
  }
  lay.w_act = add("w_act", A, H + A);
  lay.b_act = add("b_act", A, 1);
  lay.w_val = add("w_val", 1, H + A);
  lay.b_val = add("b_val", 1, 1);
  return lay;
}

PolicyParams PolicyParams::zeros(const PolicyConfig& config) {
  config.check();
  PolicyParams p;
  p.config_ = config;
  p.layout_ = ParamLayout::make(config);
  p.theta_.assign(p.layout_.total, 0.0);
  return p;
}

PolicyParams PolicyParams::random_init(const PolicyConfig& config, std::uint64_t seed) {
  PolicyParams p = zeros(config);
  Rng rng(hash_combine(mix64(seed), hash_str("policy-init")));
  for (const auto& sec : p.layout_.sections) {
    const bool is_gain = sec.name.find("ln") != std::string::npos && sec.name.find("gain") != std::string::npos;
    const bool is_ln_offset =
        sec.name.find("ln") != std::string::npos && sec.name.find("offset") != std::string::npos;
    if (is_gain) {
      for (std::size_t i = 0; i < sec.size(); ++i) p.theta_[sec.offset + i] = 1.0;
      continue;
    }
    if (is_ln_offset) continue;  // stays 0
    // Bias vectors share the fan-in of the matrix they follow.
    int fan_in = sec.cols;
    if (sec.cols == 1) {
      for (auto it = p.layout_.sections.rbegin(); it != p.layout_.sections.rend(); ++it) {
        if (it->offset < sec.offset && it->cols > 1) {
          fan_in = it->cols;
          break;
        }
      }
    }
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < sec.size(); ++i)
      p.theta_[sec.offset + i] = (2.0 * rng.uniform() - 1.0) * bound;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

namespace {

nlohmann::json config_to_json(const PolicyConfig& c) {
  return {{"feature_dim", c.feature_dim},
          {"k_max", c.k_max},
          {"hidden", c.hidden},
          {"layers", c.layers},
          {"depth_limit", c.depth_limit},
          {"use_local_mpnn", c.use_local_mpnn},
          {"use_global_attention", c.use_global_attention},
          {"use_edge_features", c.use_edge_features}};
}

PolicyConfig config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.feature_dim = j.at("feature_dim").get<int>();
  c.k_max = j.at("k_max").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.layers = j.at("layers").get<int>();
  c.depth_limit = j.at("depth_limit").get<int>();
  c.use_local_mpnn = j.at("use_local_mpnn").get<bool>();
  c.use_global_attention = j.at("use_global_attention").get<bool>();
  c.use_edge_features = j.at("use_edge_features").get<bool>();
  return c;
}

}  // namespace

void PolicyParams::save_checkpoint(const std::string& path, const CheckpointMeta& meta) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint " + path + " for writing");
  nlohmann::json header;
  header["format"] = "pgts-checkpoint";
  header["version"] = 1;
  header["config"] = config_to_json(config_);
  header["seed"] = meta.seed;
  header["episodes_seen"] = meta.episodes_seen;
  header["param_count"] = theta_.size();
  nlohmann::json sections = nlohmann::json::array();
  for (const auto& s : layout_.sections)
    sections.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  header["sections"] = sections;
  out << header.dump() << "\n";
  static_assert(sizeof(double) == 8);
  out.write(reinterpret_cast<const char*>(theta_.data()),
            static_cast<std::streamsize>(theta_.size() * sizeof(double)));
}

std::pair<PolicyParams, PolicyParams::CheckpointMeta> PolicyParams::load_checkpoint(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::string header_line;
  std::getline(in, header_line);
  auto header = nlohmann::json::parse(header_line);
  if (header.at("format").get<std::string>() != "pgts-checkpoint")
    throw std::runtime_error("not a checkpoint file: " + path);
  PolicyParams p = zeros(config_from_json(header.at("config")));
  const std::size_t count = header.at("param_count").get<std::size_t>();
  if (count != p.theta_.size()) throw std::runtime_error("checkpoint parameter count mismatch");
  in.read(reinterpret_cast<char*>(p.theta_.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("truncated checkpoint payload in " + path);
  CheckpointMeta meta;
  meta.seed = header.at("seed").get<std::uint64_t>();
  meta.episodes_seen = header.at("episodes_seen").get<long>();
  return {std::move(p), meta};
}

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

GraphBatch make_graph_batch(const ReasoningTreeState& tree, int k_max) {
  GraphBatch b;
  b.num_nodes = tree.size();
  b.input_dim = tree.limits().feature_dim + k_max;
  b.node_inputs.assign(static_cast<std::size_t>(b.num_nodes) * b.input_dim, 0.0);
  const auto enc = rwse(tree, k_max);
  for (NodeId v = 0; v < b.num_nodes; ++v) {
    const auto& n = tree.node(v);
    double* row = &b.node_inputs[static_cast<std::size_t>(v) * b.input_dim];
    std::copy(n.features.begin(), n.features.end(), row);
    std::copy(enc[static_cast<std::size_t>(v)].begin(), enc[static_cast<std::size_t>(v)].end(),
              row + tree.limits().feature_dim);
    if (n.parent) b.edges.push_back({*n.parent, v, n.edge_reward});
  }
  b.current_index = tree.current();
  b.constraints = tree.compute_constraints();
  return b;
}

// ---------------------------------------------------------------------------
// Forward pass (with optional caches for the backward pass)
// ---------------------------------------------------------------------------

namespace {

struct LayerCache {
  std::vector<double> h_in;        // N x H
  std::vector<double> msg_t1;      // (2E) x H tanh activations, directed-edge order
  std::vector<double> m;           // N x H
  std::vector<double> q, k, v;     // N x H
  std::vector<double> attn;        // N x N row softmax
  std::vector<double> g;           // N x H
  std::vector<double> xhat1, xhat2;        // N x H
  std::vector<double> inv_sigma1, inv_sigma2;  // N
  std::vector<double> h_mid;       // N x H (post-LN1)
  std::vector<double> ffn_t;       // N x H tanh
  std::vector<double> h_out;       // N x H
};

struct ForwardCache {
  std::vector<double> h0;
  std::vector<LayerCache> layers;
  std::vector<double> head_in;        // H + A
  std::vector<double> masked_logits;  // A
  ActionDistribution dist;
  double value = 0.0;
};

struct DirectedEdge {
  int dst, src;
  double feat;
};

std::vector<DirectedEdge> directed_edges(const GraphBatch& batch, bool use_edge_features) {
  std::vector<DirectedEdge> out;
  out.reserve(batch.edges.size() * 2);
  for (const auto& e : batch.edges) {
    // Step rewards live in [0,1]; center and rescale to roughly unit
    // variance so the edge channel starts on the same footing as the
    // node features.
    const double f = use_edge_features ? (e.reward - 0.5) * 4.0 : 0.0;
    out.push_back({e.u, e.v, f});
    out.push_back({e.v, e.u, f});
  }
  return out;
}

// y[0..rows) = W(rows x cols) * x + b
void linear(const double* W, const double* b, const double* x, int rows, int cols, double* y) {
  for (int r = 0; r < rows; ++r) {
    double acc = b ? b[r] : 0.0;
    const double* wr = W + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

void layer_norm(const double* x, const double* gain, const double* offset, int H, double* y,
                double* xhat, double* inv_sigma) {
  double mu = 0.0;
  for (int i = 0; i < H; ++i) mu += x[i];
  mu /= H;
  double var = 0.0;
  for (int i = 0; i < H; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= H;
  const double is = 1.0 / std::sqrt(var + kLayerNormEps);
  *inv_sigma = is;
  for (int i = 0; i < H; ++i) {
    xhat[i] = (x[i] - mu) * is;
    y[i] = gain[i] * xhat[i] + offset[i];
  }
}

void run_forward(const PolicyParams& params, const GraphBatch& batch, ForwardCache& fc) {
  const PolicyConfig& cfg = params.config();
  const ParamLayout& lay = params.layout();
  const double* th = params.data().data();
  const int N = batch.num_nodes;
  const int H = cfg.hidden;
  const int I = cfg.input_dim();
  const int A = cfg.num_actions();

  if (batch.input_dim != I) throw std::invalid_argument("batch input_dim does not match config");
  if (static_cast<int>(batch.node_inputs.size()) != N * I)
    throw std::invalid_argument("node_inputs shape mismatch");
  if (batch.current_index < 0 || batch.current_index >= N)
    throw std::invalid_argument("current_index out of range");
  if (batch.constraints.size() != A)
    throw std::invalid_argument("constraint vector length does not match config");

  // Input projection.
  fc.h0.assign(static_cast<std::size_t>(N) * H, 0.0);
  for (int n = 0; n < N; ++n)
    linear(th + lay.w_in, th + lay.b_in, &batch.node_inputs[static_cast<std::size_t>(n) * I], H, I,
           &fc.h0[static_cast<std::size_t>(n) * H]);

  const auto dedges = directed_edges(batch, cfg.use_edge_features);
  std::vector<double> h = fc.h0;
  fc.layers.assign(static_cast<std::size_t>(cfg.layers), {});

  for (int l = 0; l < cfg.layers; ++l) {
    LayerCache& lc = fc.layers[static_cast<std::size_t>(l)];
    const auto& L = lay.layer[static_cast<std::size_t>(l)];
    lc.h_in = h;

    // Local message passing with the edge scalar appended to the sender.
    lc.m.assign(static_cast<std::size_t>(N) * H, 0.0);
    if (cfg.use_local_mpnn) {
      lc.msg_t1.assign(dedges.size() * static_cast<std::size_t>(H), 0.0);
      std::vector<double> z(static_cast<std::size_t>(H) + 1);
      std::vector<double> a1(static_cast<std::size_t>(H));
      std::vector<double> msg(static_cast<std::size_t>(H));
      for (std::size_t e = 0; e < dedges.size(); ++e) {
        const auto& de = dedges[e];
        std::copy(&h[static_cast<std::size_t>(de.src) * H], &h[static_cast<std::size_t>(de.src) * H] + H,
                  z.begin());
        z[static_cast<std::size_t>(H)] = de.feat;
        linear(th + L.w_msg1, th + L.b_msg1, z.data(), H, H + 1, a1.data());
        double* t1 = &lc.msg_t1[e * static_cast<std::size_t>(H)];
        for (int i = 0; i < H; ++i) t1[i] = std::tanh(a1[i]);
        linear(th + L.w_msg2, th + L.b_msg2, t1, H, H, msg.data());
        double* mv = &lc.m[static_cast<std::size_t>(de.dst) * H];
        for (int i = 0; i < H; ++i) mv[i] += msg[i];
      }
    }

    // Global single-head self-attention over all nodes.
    lc.g.assign(static_cast<std::size_t>(N) * H, 0.0);
    if (cfg.use_global_attention) {
      lc.q.assign(static_cast<std::size_t>(N) * H, 0.0);
      lc.k.assign(static_cast<std::size_t>(N) * H, 0.0);
      lc.v.assign(static_cast<std::size_t>(N) * H, 0.0);
      for (int n = 0; n < N; ++n) {
        linear(th + L.w_q, nullptr, &h[static_cast<std::size_t>(n) * H], H, H,
               &lc.q[static_cast<std::size_t>(n) * H]);
        linear(th + L.w_k, nullptr, &h[static_cast<std::size_t>(n) * H], H, H,
               &lc.k[static_cast<std::size_t>(n) * H]);
        linear(th + L.w_v, nullptr, &h[static_cast<std::size_t>(n) * H], H, H,
               &lc.v[static_cast<std::size_t>(n) * H]);
      }
      const double scale = 1.0 / std::sqrt(static_cast<double>(H));
      lc.attn.assign(static_cast<std::size_t>(N) * N, 0.0);
      for (int i = 0; i < N; ++i) {
        double* row = &lc.attn[static_cast<std::size_t>(i) * N];
        double mx = kNegInf;
        for (int j = 0; j < N; ++j) {
          double s = 0.0;
          for (int c = 0; c < H; ++c)
            s += lc.q[static_cast<std::size_t>(i) * H + c] * lc.k[static_cast<std::size_t>(j) * H + c];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < N; ++j) {
          row[j] = std::exp(row[j] - mx);
          denom += row[j];
        }
        for (int j = 0; j < N; ++j) row[j] /= denom;
        double* gi = &lc.g[static_cast<std::size_t>(i) * H];
        for (int j = 0; j < N; ++j)
          for (int c = 0; c < H; ++c) gi[c] += row[j] * lc.v[static_cast<std::size_t>(j) * H + c];
      }
    }

    // Residual merge + LN1, feed-forward + LN2.
    lc.xhat1.assign(static_cast<std::size_t>(N) * H, 0.0);
    lc.inv_sigma1.assign(static_cast<std::size_t>(N), 0.0);
    lc.h_mid.assign(static_cast<std::size_t>(N) * H, 0.0);
    std::vector<double> r1(static_cast<std::size_t>(H));
    for (int n = 0; n < N; ++n) {
      for (int i = 0; i < H; ++i)
        r1[static_cast<std::size_t>(i)] = h[static_cast<std::size_t>(n) * H + i] +
                                          lc.m[static_cast<std::size_t>(n) * H + i] +
                                          lc.g[static_cast<std::size_t>(n) * H + i];
      layer_norm(r1.data(), th + L.ln1_g, th + L.ln1_b, H, &lc.h_mid[static_cast<std::size_t>(n) * H],
                 &lc.xhat1[static_cast<std::size_t>(n) * H], &lc.inv_sigma1[static_cast<std::size_t>(n)]);
    }

    lc.ffn_t.assign(static_cast<std::size_t>(N) * H, 0.0);
    lc.xhat2.assign(static_cast<std::size_t>(N) * H, 0.0);
    lc.inv_sigma2.assign(static_cast<std::size_t>(N), 0.0);
    lc.h_out.assign(static_cast<std::size_t>(N) * H, 0.0);
    std::vector<double> a2(static_cast<std::size_t>(H));
    std::vector<double> r2(static_cast<std::size_t>(H));
    for (int n = 0; n < N; ++n) {
      const double* hm = &lc.h_mid[static_cast<std::size_t>(n) * H];
      linear(th + L.w_ff1, th + L.b_ff1, hm, H, H, a2.data());
      double* t2 = &lc.ffn_t[static_cast<std::size_t>(n) * H];
      for (int i = 0; i < H; ++i) t2[i] = std::tanh(a2[static_cast<std::size_t>(i)]);
      std::vector<double> f(static_cast<std::size_t>(H));
      linear(th + L.w_ff2, th + L.b_ff2, t2, H, H, f.data());
      for (int i = 0; i < H; ++i) r2[static_cast<std::size_t>(i)] = hm[i] + f[static_cast<std::size_t>(i)];
      layer_norm(r2.data(), th + L.ln2_g, th + L.ln2_b, H, &lc.h_out[static_cast<std::size_t>(n) * H],
                 &lc.xhat2[static_cast<std::size_t>(n) * H], &lc.inv_sigma2[static_cast<std::size_t>(n)]);
    }
    h = lc.h_out;
  }

  // Heads on the current node's embedding concatenated with the constraints.
  fc.head_in.assign(static_cast<std::size_t>(H + A), 0.0);
  std::copy(&h[static_cast<std::size_t>(batch.current_index) * H],
            &h[static_cast<std::size_t>(batch.current_index) * H] + H, fc.head_in.begin());
  for (int i = 0; i < A; ++i)
    fc.head_in[static_cast<std::size_t>(H + i)] = batch.constraints.valid(i) ? 1.0 : 0.0;

  std::vector<double> logits(static_cast<std::size_t>(A));
  linear(th + lay.w_act, th + lay.b_act, fc.head_in.data(), A, H + A, logits.data());
  fc.masked_logits.assign(static_cast<std::size_t>(A), kNegInf);
  bool any_valid = false;
  for (int i = 0; i < A; ++i) {
    if (batch.constraints.valid(i)) {
      ensure_finite(logits[static_cast<std::size_t>(i)], "action logits");
      fc.masked_logits[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)];
      any_valid = true;
    }
  }
  if (!any_valid) throw std::runtime_error("all actions masked out; state should be unreachable");

  fc.dist = masked_distribution(fc.masked_logits);

  double v = 0.0;
  linear(th + lay.w_val, th + lay.b_val, fc.head_in.data(), 1, H + A, &v);
  ensure_finite(v, "value head");
  fc.value = v;
}

}  // namespace

ActionDistribution masked_distribution(const std::vector<double>& masked_logits) {
  ActionDistribution d;
  const std::size_t A = masked_logits.size();
  d.probs.assign(A, 0.0);
  d.log_probs.assign(A, kNegInf);
  double mx = kNegInf;
  for (double z : masked_logits) mx = std::max(mx, z);
  if (mx == kNegInf) throw std::invalid_argument("distribution with no valid action");
  double denom = 0.0;
  for (std::size_t i = 0; i < A; ++i)
    if (masked_logits[i] != kNegInf) denom += std::exp(masked_logits[i] - mx);
  const double lse = mx + std::log(denom);
  d.entropy = 0.0;
  for (std::size_t i = 0; i < A; ++i) {
    if (masked_logits[i] == kNegInf) continue;
    d.log_probs[i] = masked_logits[i] - lse;
    d.probs[i] = std::exp(d.log_probs[i]);
    d.entropy -= d.probs[i] * d.log_probs[i];
  }
  return d;
}

std::vector<double> encode(const PolicyParams& params, const GraphBatch& batch) {
  ForwardCache fc;
  run_forward(params, batch, fc);
  if (fc.layers.empty()) return fc.h0;
  return fc.layers.back().h_out;
}

std::vector<double> action_logits(const PolicyParams& params, const std::vector<double>& embeddings,
                                  int current_index, const ConstraintVector& constraints) {
  const PolicyConfig& cfg = params.config();
  const ParamLayout& lay = params.layout();
  const int H = cfg.hidden;
  const int A = cfg.num_actions();
  if (constraints.size() != A) throw std::invalid_argument("constraint length mismatch");
  std::vector<double> u(static_cast<std::size_t>(H + A), 0.0);
  std::copy(embeddings.begin() + static_cast<std::ptrdiff_t>(current_index) * H,
            embeddings.begin() + static_cast<std::ptrdiff_t>(current_index + 1) * H, u.begin());
  for (int i = 0; i < A; ++i) u[static_cast<std::size_t>(H + i)] = constraints.valid(i) ? 1.0 : 0.0;
  std::vector<double> logits(static_cast<std::size_t>(A));
  linear(params.data().data() + lay.w_act, params.data().data() + lay.b_act, u.data(), A, H + A,
         logits.data());
  bool any = false;
  for (int i = 0; i < A; ++i) {
    if (constraints.valid(i))
      any = true;
    else
      logits[static_cast<std::size_t>(i)] = kNegInf;
  }
  if (!any) throw std::runtime_error("all actions masked out");
  return logits;
}

double value(const PolicyParams& params, const std::vector<double>& embeddings, int current_index,
             const ConstraintVector& constraints) {
  const PolicyConfig& cfg = params.config();
  const ParamLayout& lay = params.layout();
  const int H = cfg.hidden;
  const int A = cfg.num_actions();
  std::vector<double> u(static_cast<std::size_t>(H + A), 0.0);
  std::copy(embeddings.begin() + static_cast<std::ptrdiff_t>(current_index) * H,
            embeddings.begin() + static_cast<std::ptrdiff_t>(current_index + 1) * H, u.begin());
  for (int i = 0; i < A; ++i) u[static_cast<std::size_t>(H + i)] = constraints.valid(i) ? 1.0 : 0.0;
  double v = 0.0;
  linear(params.data().data() + lay.w_val, params.data().data() + lay.b_val, u.data(), 1, H + A, &v);
  ensure_finite(v, "value head");
  return v;
}

PolicyEvaluation evaluate_policy(const PolicyParams& params, const GraphBatch& batch) {
  ForwardCache fc;
  run_forward(params, batch, fc);
  return {fc.dist, fc.value};
}

std::pair<SearchAction, double> sample_action(const ActionDistribution& dist, Rng& rng) {
  const int A = static_cast<int>(dist.probs.size());
  const int depth_limit = A - 2;
  const double u = rng.uniform();
  double cum = 0.0;
  int chosen = -1;
  for (int i = 0; i < A; ++i) {
    if (dist.probs[static_cast<std::size_t>(i)] <= 0.0) continue;
    cum += dist.probs[static_cast<std::size_t>(i)];
    chosen = i;
    if (u < cum) break;
  }
  if (chosen < 0) throw std::logic_error("sample_action on empty distribution");
  return {SearchAction::from_index(chosen, depth_limit), dist.log_probs[static_cast<std::size_t>(chosen)]};
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

namespace {

struct LossParts {
  double total = 0.0;
  double d_value = 0.0;                 // dL/dV
  std::vector<double> d_logits;         // dL/dz over action slots (0 where masked)
  double policy_term = 0.0;
  double value_term = 0.0;
  double entropy = 0.0;
  double ratio = 1.0;
};

LossParts loss_from_outputs(const ActionDistribution& dist, double value_out, const LossSpec& spec) {
  LossParts parts;
  const std::size_t A = dist.probs.size();
  parts.d_logits.assign(A, 0.0);
  double loss = 0.0;

  if (spec.action_index >= 0) {
    if (spec.action_index >= static_cast<int>(A))
      throw std::invalid_argument("loss spec action_index out of range");
    const double lp = dist.log_probs[static_cast<std::size_t>(spec.action_index)];
    if (lp == kNegInf) throw std::invalid_argument("loss spec action is masked");
    const double ratio = std::exp(lp - spec.log_prob_old);
    const double lo = 1.0 - spec.clip, hi = 1.0 + spec.clip;
    const double clipped = std::min(std::max(ratio, lo), hi);
    const double t1 = ratio * spec.advantage;
    const double t2 = clipped * spec.advantage;
    const double surrogate = std::min(t1, t2);
    parts.policy_term = -surrogate;
    parts.ratio = ratio;

    if (spec.policy_weight != 0.0) {
      loss += spec.policy_weight * (-surrogate);
      double dsur_dlp = 0.0;  // d(min(t1,t2))/d lp[a]
      if (t1 <= t2) {
        dsur_dlp = spec.advantage * ratio;
      } else if (ratio > lo && ratio < hi) {
        dsur_dlp = spec.advantage * ratio;
      }
      const double coef = spec.policy_weight * (-dsur_dlp);
      // d lp[a] / d z_j = delta_aj - p_j over valid slots.
      for (std::size_t j = 0; j < A; ++j) {
        if (dist.log_probs[j] == kNegInf) continue;
        const double delta = (static_cast<int>(j) == spec.action_index) ? 1.0 : 0.0;
        parts.d_logits[j] += coef * (delta - dist.probs[j]);
      }
    }
  }

  if (spec.entropy_weight != 0.0) {
    loss += spec.entropy_weight * (-dist.entropy);
    // dH/dz_j = -p_j (log p_j + H); loss carries -H.
    for (std::size_t j = 0; j < A; ++j) {
      if (dist.log_probs[j] == kNegInf) continue;
      parts.d_logits[j] +=
          spec.entropy_weight * dist.probs[j] * (dist.log_probs[j] + dist.entropy);
    }
  }

  {
    const double err = value_out - spec.value_target;
    parts.value_term = err * err;
    if (spec.value_weight != 0.0) {
      loss += spec.value_weight * err * err;
      parts.d_value = spec.value_weight * 2.0 * err;
    }
  }

  parts.entropy = dist.entropy;
  parts.total = loss;
  ensure_finite(loss, "loss");
  return parts;
}

}  // namespace

double loss_eval(const PolicyParams& params, const GraphBatch& batch, const LossSpec& spec) {
  ForwardCache fc;
  run_forward(params, batch, fc);
  return loss_from_outputs(fc.dist, fc.value, spec).total;
}

GradResult loss_grad(const PolicyParams& params, const GraphBatch& batch, const LossSpec& spec) {
  const PolicyConfig& cfg = params.config();
  const ParamLayout& lay = params.layout();
  const double* th = params.data().data();
  const int N = batch.num_nodes;
  const int H = cfg.hidden;
  const int I = cfg.input_dim();
  const int A = cfg.num_actions();

  ForwardCache fc;
  run_forward(params, batch, fc);
  LossParts parts = loss_from_outputs(fc.dist, fc.value, spec);

  GradResult res;
  res.loss = parts.total;
  res.policy_term = parts.policy_term;
  res.value_term = parts.value_term;
  res.entropy = parts.entropy;
  res.ratio = parts.ratio;
  res.grad.assign(params.size(), 0.0);
  double* gr = res.grad.data();

  // Head backward.
  std::vector<double> d_head_in(static_cast<std::size_t>(H + A), 0.0);
  for (int i = 0; i < A; ++i) {
    const double dz = parts.d_logits[static_cast<std::size_t>(i)];
    if (dz == 0.0) continue;
    double* wrow = gr + lay.w_act + static_cast<std::size_t>(i) * (H + A);
    const double* wsrc = th + lay.w_act + static_cast<std::size_t>(i) * (H + A);
    for (int c = 0; c < H + A; ++c) {
      wrow[c] += dz * fc.head_in[static_cast<std::size_t>(c)];
      d_head_in[static_cast<std::size_t>(c)] += dz * wsrc[c];
    }
    gr[lay.b_act + static_cast<std::size_t>(i)] += dz;
  }
  if (parts.d_value != 0.0) {
    const double dv = parts.d_value;
    double* wrow = gr + lay.w_val;
    const double* wsrc = th + lay.w_val;
    for (int c = 0; c < H + A; ++c) {
      wrow[c] += dv * fc.head_in[static_cast<std::size_t>(c)];
      d_head_in[static_cast<std::size_t>(c)] += dv * wsrc[c];
    }
    gr[lay.b_val] += dv;
  }

  // Seed node-embedding gradient at the current row.
  std::vector<double> dh(static_cast<std::size_t>(N) * H, 0.0);
  for (int i = 0; i < H; ++i)
    dh[static_cast<std::size_t>(batch.current_index) * H + i] = d_head_in[static_cast<std::size_t>(i)];

  const auto dedges = directed_edges(batch, cfg.use_edge_features);

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerCache& lc = fc.layers[static_cast<std::size_t>(l)];
    const auto& L = lay.layer[static_cast<std::size_t>(l)];

    // LN2 backward -> d r2, plus gain/offset grads.
    std::vector<double> dr2(static_cast<std::size_t>(N) * H, 0.0);
    for (int n = 0; n < N; ++n) {
      const double* dy = &dh[static_cast<std::size_t>(n) * H];
      const double* xhat = &lc.xhat2[static_cast<std::size_t>(n) * H];
      const double is = lc.inv_sigma2[static_cast<std::size_t>(n)];
      double mean_t = 0.0, mean_tx = 0.0;
      for (int i = 0; i < H; ++i) {
        const double t = th[L.ln2_g + static_cast<std::size_t>(i)] * dy[i];
        mean_t += t;
        mean_tx += t * xhat[i];
        gr[L.ln2_g + static_cast<std::size_t>(i)] += dy[i] * xhat[i];
        gr[L.ln2_b + static_cast<std::size_t>(i)] += dy[i];
      }
      mean_t /= H;
      mean_tx /= H;
      double* dr = &dr2[static_cast<std::size_t>(n) * H];
      for (int i = 0; i < H; ++i) {
        const double t = th[L.ln2_g + static_cast<std::size_t>(i)] * dy[i];
        dr[i] = is * (t - mean_t - xhat[i] * mean_tx);
      }
    }

    // FFN backward: r2 = h_mid + W2 tanh(W1 h_mid + b1) + b2.
    std::vector<double> dh_mid(static_cast<std::size_t>(N) * H, 0.0);
    for (int n = 0; n < N; ++n) {
      const double* dr = &dr2[static_cast<std::size_t>(n) * H];
      const double* t2 = &lc.ffn_t[static_cast<std::size_t>(n) * H];
      const double* hm = &lc.h_mid[static_cast<std::size_t>(n) * H];
      double* dhm = &dh_mid[static_cast<std::size_t>(n) * H];
      for (int i = 0; i < H; ++i) dhm[i] += dr[i];  // residual path

      std::vector<double> dt2(static_cast<std::size_t>(H), 0.0);
      for (int r = 0; r < H; ++r) {
        const double df = dr[r];
        if (df == 0.0) continue;
        double* w2row = gr + L.w_ff2 + static_cast<std::size_t>(r) * H;
        const double* w2src = th + L.w_ff2 + static_cast<std::size_t>(r) * H;
        for (int c = 0; c < H; ++c) {
          w2row[c] += df * t2[c];
          dt2[static_cast<std::size_t>(c)] += df * w2src[c];
        }
        gr[L.b_ff2 + static_cast<std::size_t>(r)] += df;
      }
      for (int r = 0; r < H; ++r) {
        const double da = dt2[static_cast<std::size_t>(r)] * (1.0 - t2[r] * t2[r]);
        if (da == 0.0) continue;
        double* w1row = gr + L.w_ff1 + static_cast<std::size_t>(r) * H;
        const double* w1src = th + L.w_ff1 + static_cast<std::size_t>(r) * H;
        for (int c = 0; c < H; ++c) {
          w1row[c] += da * hm[c];
          dhm[c] += da * w1src[c];
        }
        gr[L.b_ff1 + static_cast<std::size_t>(r)] += da;
      }
    }

    // LN1 backward -> d r1.
    std::vector<double> dr1(static_cast<std::size_t>(N) * H, 0.0);
    for (int n = 0; n < N; ++n) {
      const double* dy = &dh_mid[static_cast<std::size_t>(n) * H];
      const double* xhat = &lc.xhat1[static_cast<std::size_t>(n) * H];
      const double is = lc.inv_sigma1[static_cast<std::size_t>(n)];
      double mean_t = 0.0, mean_tx = 0.0;
      for (int i = 0; i < H; ++i) {
        const double t = th[L.ln1_g + static_cast<std::size_t>(i)] * dy[i];
        mean_t += t;
        mean_tx += t * xhat[i];
        gr[L.ln1_g + static_cast<std::size_t>(i)] += dy[i] * xhat[i];
        gr[L.ln1_b + static_cast<std::size_t>(i)] += dy[i];
      }
      mean_t /= H;
      mean_tx /= H;
      double* dr = &dr1[static_cast<std::size_t>(n) * H];
      for (int i = 0; i < H; ++i) {
        const double t = th[L.ln1_g + static_cast<std::size_t>(i)] * dy[i];
        dr[i] = is * (t - mean_t - xhat[i] * mean_tx);
      }
    }

    // r1 = h_in + m + g fans out into three paths.
    std::vector<double> dh_in = dr1;  // residual path

    // Attention backward.
    if (cfg.use_global_attention) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(H));
      std::vector<double> dq(static_cast<std::size_t>(N) * H, 0.0);
      std::vector<double> dk(static_cast<std::size_t>(N) * H, 0.0);
      std::vector<double> dv(static_cast<std::size_t>(N) * H, 0.0);
      std::vector<double> dA(static_cast<std::size_t>(N), 0.0);
      for (int i = 0; i < N; ++i) {
        const double* dgrow = &dr1[static_cast<std::size_t>(i) * H];
        const double* arow = &lc.attn[static_cast<std::size_t>(i) * N];
        // dA[i,j] and dV accumulation.
        double inner = 0.0;
        for (int j = 0; j < N; ++j) {
          double daij = 0.0;
          const double* vj = &lc.v[static_cast<std::size_t>(j) * H];
          double* dvj = &dv[static_cast<std::size_t>(j) * H];
          for (int c = 0; c < H; ++c) {
            daij += dgrow[c] * vj[c];
            dvj[c] += arow[j] * dgrow[c];
          }
          dA[static_cast<std::size_t>(j)] = daij;
          inner += arow[j] * daij;
        }
        for (int j = 0; j < N; ++j) {
          const double ds = arow[j] * (dA[static_cast<std::size_t>(j)] - inner) * scale;
          if (ds == 0.0) continue;
          const double* kj = &lc.k[static_cast<std::size_t>(j) * H];
          const double* qi = &lc.q[static_cast<std::size_t>(i) * H];
          double* dqi = &dq[static_cast<std::size_t>(i) * H];
          double* dkj = &dk[static_cast<std::size_t>(j) * H];
          for (int c = 0; c < H; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
      // Projections: x = h_in row feeds q, k, v.
      for (int n = 0; n < N; ++n) {
        const double* x = &lc.h_in[static_cast<std::size_t>(n) * H];
        double* dx = &dh_in[static_cast<std::size_t>(n) * H];
        const double* dqn = &dq[static_cast<std::size_t>(n) * H];
        const double* dkn = &dk[static_cast<std::size_t>(n) * H];
        const double* dvn = &dv[static_cast<std::size_t>(n) * H];
        for (int r = 0; r < H; ++r) {
          const double gq = dqn[r], gk = dkn[r], gv = dvn[r];
          double* wq = gr + L.w_q + static_cast<std::size_t>(r) * H;
          double* wk = gr + L.w_k + static_cast<std::size_t>(r) * H;
          double* wv = gr + L.w_v + static_cast<std::size_t>(r) * H;
          const double* wqs = th + L.w_q + static_cast<std::size_t>(r) * H;
          const double* wks = th + L.w_k + static_cast<std::size_t>(r) * H;
          const double* wvs = th + L.w_v + static_cast<std::size_t>(r) * H;
          for (int c = 0; c < H; ++c) {
            wq[c] += gq * x[c];
            wk[c] += gk * x[c];
            wv[c] += gv * x[c];
            dx[c] += gq * wqs[c] + gk * wks[c] + gv * wvs[c];
          }
        }
      }
    }

    // Message-passing backward.
    if (cfg.use_local_mpnn) {
      std::vector<double> dt1(static_cast<std::size_t>(H));
      for (std::size_t e = 0; e < dedges.size(); ++e) {
        const auto& de = dedges[e];
        const double* dmv = &dr1[static_cast<std::size_t>(de.dst) * H];
        const double* t1 = &lc.msg_t1[e * static_cast<std::size_t>(H)];
        std::fill(dt1.begin(), dt1.end(), 0.0);
        for (int r = 0; r < H; ++r) {
          const double dmsg = dmv[r];
          if (dmsg == 0.0) continue;
          double* w2row = gr + L.w_msg2 + static_cast<std::size_t>(r) * H;
          const double* w2src = th + L.w_msg2 + static_cast<std::size_t>(r) * H;
          for (int c = 0; c < H; ++c) {
            w2row[c] += dmsg * t1[c];
            dt1[static_cast<std::size_t>(c)] += dmsg * w2src[c];
          }
          gr[L.b_msg2 + static_cast<std::size_t>(r)] += dmsg;
        }
        const double* hsrc = &lc.h_in[static_cast<std::size_t>(de.src) * H];
        double* dhsrc = &dh_in[static_cast<std::size_t>(de.src) * H];
        for (int r = 0; r < H; ++r) {
          const double da = dt1[static_cast<std::size_t>(r)] * (1.0 - t1[r] * t1[r]);
          if (da == 0.0) continue;
          double* w1row = gr + L.w_msg1 + static_cast<std::size_t>(r) * (H + 1);
          const double* w1src = th + L.w_msg1 + static_cast<std::size_t>(r) * (H + 1);
          for (int c = 0; c < H; ++c) {
            w1row[c] += da * hsrc[c];
            dhsrc[c] += da * w1src[c];
          }
          w1row[H] += da * de.feat;
          gr[L.b_msg1 + static_cast<std::size_t>(r)] += da;
        }
      }
    }

    dh = std::move(dh_in);
  }

  // Input projection backward.
  for (int n = 0; n < N; ++n) {
    const double* x = &batch.node_inputs[static_cast<std::size_t>(n) * I];
    const double* dhn = &dh[static_cast<std::size_t>(n) * H];
    for (int r = 0; r < H; ++r) {
      const double d = dhn[r];
      if (d == 0.0) continue;
      double* wrow = gr + lay.w_in + static_cast<std::size_t>(r) * I;
      for (int c = 0; c < I; ++c) wrow[c] += d * x[c];
      gr[lay.b_in + static_cast<std::size_t>(r)] += d;
    }
  }

  for (double g : res.grad) ensure_finite(g, "gradient");
  return res;
}

}  // namespace pgts
