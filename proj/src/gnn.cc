#include "tfl/gnn.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "absl/strings/numbers.h"
#include "absl/strings/str_cat.h"
#include "absl/strings/str_format.h"
#include "absl/strings/str_split.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

constexpr uint64_t kInitTag = 0x494e4954;     // "INIT"
constexpr uint64_t kSplitTag = 0x53504c54;    // "SPLT"
constexpr uint64_t kShuffleTag = 0x53485546;  // "SHUF"
constexpr uint64_t kDropoutTag = 0x44524f50;  // "DROP"

std::string LayerName(int l, const char* what) {
  return absl::StrCat("l", l, ".", what);
}

Matrix Glorot(int in, int out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (in + out));
  Matrix m(in, out);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = limit * (2.0 * UniformUnit(rng) - 1.0);
  }
  return m;
}

void AddRowBias(Matrix* z, const Matrix& bias) { z->rowwise() += bias.row(0); }

Matrix ColumnSum(const Matrix& m) { return m.colwise().sum(); }

Matrix Relu(const Matrix& z) { return z.cwiseMax(0.0); }

Matrix ReluBackward(const Matrix& grad, const Matrix& z) {
  return (z.array() > 0.0).select(grad, 0.0);
}

// Inverted dropout mask (entries 0 or 1/(1-p)); all ones when disabled.
Matrix DropoutMask(Eigen::Index rows, Eigen::Index cols, double p, bool train,
                   Rng* rng) {
  Matrix mask = Matrix::Constant(rows, cols, 1.0);
  if (!train || p <= 0.0) return mask;
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = UniformUnit(*rng) < p ? 0.0 : keep;
  }
  return mask;
}

// Row-normalised neighbour means in both directions.
struct MeanAggregator {
  std::vector<std::pair<int, int>> edges;
  std::vector<double> inv_client_degree, inv_node_degree;

  explicit MeanAggregator(const BipartiteGraph& g)
      : edges(g.edges),
        inv_client_degree(g.client_count(), 0.0),
        inv_node_degree(g.node_count(), 0.0) {
    for (const auto& [n, c] : edges) {
      inv_client_degree[c] += 1.0;
      inv_node_degree[n] += 1.0;
    }
    for (double& d : inv_client_degree) d = d > 0 ? 1.0 / d : 0.0;
    for (double& d : inv_node_degree) d = d > 0 ? 1.0 / d : 0.0;
  }

  // Mean of each client's node neighbours.
  Matrix ToClients(const Matrix& hn, Eigen::Index clients) const {
    Matrix out = Matrix::Zero(clients, hn.cols());
    for (const auto& [n, c] : edges) out.row(c) += inv_client_degree[c] * hn.row(n);
    return out;
  }
  Matrix ToNodes(const Matrix& hc, Eigen::Index nodes) const {
    Matrix out = Matrix::Zero(nodes, hc.cols());
    for (const auto& [n, c] : edges) out.row(n) += inv_node_degree[n] * hc.row(c);
    return out;
  }
  // Adjoint of ToClients.
  void ToClientsBackward(const Matrix& grad, Matrix* dhn) const {
    for (const auto& [n, c] : edges) dhn->row(n) += inv_client_degree[c] * grad.row(c);
  }
  void ToNodesBackward(const Matrix& grad, Matrix* dhc) const {
    for (const auto& [n, c] : edges) dhc->row(c) += inv_node_degree[n] * grad.row(n);
  }
};

struct GnnLayerCache {
  Matrix hc, hn;  // inputs
  Matrix mc, mn;  // neighbour means
  Matrix zc, zn;  // pre-activations
  Matrix mask_c, mask_n;
  bool has_node_update = false;
};

struct ForwardCache {
  std::vector<GnnLayerCache> layers;
  // MLP layer inputs / pre-activations / masks.
  std::vector<Matrix> mlp_in, mlp_z, mlp_mask;
  Matrix head_in, head_z, head_out;
  Matrix logits;
};

absl::Status CheckShapes(const Detector& det, const BipartiteGraph& g) {
  if (g.client_features.rows() != g.client_count() ||
      g.client_features.cols() != det.client_dim ||
      g.node_features.rows() != g.node_count() ||
      (det.kind == DetectorKind::kGnn && g.node_features.cols() != det.node_dim)) {
    return absl::InvalidArgumentError(absl::StrFormat(
        "graph features %dx%d / %dx%d do not match detector widths %d / %d",
        g.client_features.rows(), g.client_features.cols(),
        g.node_features.rows(), g.node_features.cols(), det.client_dim,
        det.node_dim));
  }
  for (const auto& [n, c] : g.edges) {
    if (n < 0 || n >= g.node_count() || c < 0 || c >= g.client_count()) {
      return absl::InvalidArgumentError("graph edge index out of range");
    }
  }
  return absl::OkStatus();
}

Matrix GnnForward(const Detector& det, const BipartiteGraph& g,
                  const MeanAggregator& agg, bool train, Rng* rng,
                  ForwardCache* cache) {
  const ParamSet& p = det.params;
  const int layers = det.hyper.layers;
  Matrix hc = g.client_features;
  Matrix hn = g.node_features;
  cache->layers.resize(layers);
  for (int l = 0; l < layers; ++l) {
    GnnLayerCache& lc = cache->layers[l];
    lc.has_node_update = l + 1 < layers;
    lc.mc = agg.ToClients(hn, g.client_count());
    lc.zc = hc * p[LayerName(l, "client_self")] +
            lc.mc * p[LayerName(l, "client_from_node")];
    AddRowBias(&lc.zc, p[LayerName(l, "client_bias")]);
    lc.mask_c = DropoutMask(lc.zc.rows(), lc.zc.cols(), det.hyper.dropout, train, rng);
    Matrix next_c = Relu(lc.zc).cwiseProduct(lc.mask_c);
    Matrix next_n;
    if (lc.has_node_update) {
      lc.mn = agg.ToNodes(hc, g.node_count());
      lc.zn = hn * p[LayerName(l, "node_self")] +
              lc.mn * p[LayerName(l, "node_from_client")];
      AddRowBias(&lc.zn, p[LayerName(l, "node_bias")]);
      lc.mask_n = DropoutMask(lc.zn.rows(), lc.zn.cols(), det.hyper.dropout, train, rng);
      next_n = Relu(lc.zn).cwiseProduct(lc.mask_n);
    }
    lc.hc = std::move(hc);
    lc.hn = std::move(hn);
    hc = std::move(next_c);
    hn = std::move(next_n);
  }
  cache->head_in = std::move(hc);
  cache->head_z = cache->head_in * p["head.w1"];
  AddRowBias(&cache->head_z, p["head.b1"]);
  cache->head_out = Relu(cache->head_z);
  Matrix logits = cache->head_out * p["head.w2"];
  AddRowBias(&logits, p["head.b2"]);
  return logits;
}

void GnnBackward(const Detector& det, const MeanAggregator& agg, const ForwardCache& cache,
                 const Matrix& dlogits, ParamSet* grad) {
  const ParamSet& p = det.params;
  (*grad)["head.w2"] += cache.head_out.transpose() * dlogits;
  (*grad)["head.b2"] += ColumnSum(dlogits);
  Matrix dz = ReluBackward(dlogits * p["head.w2"].transpose(), cache.head_z);
  (*grad)["head.w1"] += cache.head_in.transpose() * dz;
  (*grad)["head.b1"] += ColumnSum(dz);
  Matrix dhc = dz * p["head.w1"].transpose();
  Matrix dhn;
  for (int l = det.hyper.layers - 1; l >= 0; --l) {
    const GnnLayerCache& lc = cache.layers[l];
    Matrix in_dhc = Matrix::Zero(lc.hc.rows(), lc.hc.cols());
    Matrix in_dhn = Matrix::Zero(lc.hn.rows(), lc.hn.cols());

    Matrix dzc = ReluBackward(dhc.cwiseProduct(lc.mask_c), lc.zc);
    (*grad)[LayerName(l, "client_self")] += lc.hc.transpose() * dzc;
    (*grad)[LayerName(l, "client_from_node")] += lc.mc.transpose() * dzc;
    (*grad)[LayerName(l, "client_bias")] += ColumnSum(dzc);
    in_dhc += dzc * p[LayerName(l, "client_self")].transpose();
    agg.ToClientsBackward(dzc * p[LayerName(l, "client_from_node")].transpose(),
                          &in_dhn);

    if (lc.has_node_update) {
      Matrix dzn = ReluBackward(dhn.cwiseProduct(lc.mask_n), lc.zn);
      (*grad)[LayerName(l, "node_self")] += lc.hn.transpose() * dzn;
      (*grad)[LayerName(l, "node_from_client")] += lc.mn.transpose() * dzn;
      (*grad)[LayerName(l, "node_bias")] += ColumnSum(dzn);
      in_dhn += dzn * p[LayerName(l, "node_self")].transpose();
      agg.ToNodesBackward(dzn * p[LayerName(l, "node_from_client")].transpose(),
                          &in_dhc);
    }
    dhc = std::move(in_dhc);
    dhn = std::move(in_dhn);
  }
}

Matrix MlpForward(const Detector& det, const BipartiteGraph& g, bool train,
                  Rng* rng, ForwardCache* cache) {
  const ParamSet& p = det.params;
  Matrix h = g.client_features.leftCols(p["mlp.w0"].rows());
  cache->mlp_in.clear();
  cache->mlp_z.clear();
  cache->mlp_mask.clear();
  for (int l = 0; l < det.hyper.layers; ++l) {
    Matrix z = h * p[absl::StrCat("mlp.w", l)];
    AddRowBias(&z, p[absl::StrCat("mlp.b", l)]);
    Matrix mask = DropoutMask(z.rows(), z.cols(), det.hyper.dropout, train, rng);
    Matrix next = Relu(z).cwiseProduct(mask);
    cache->mlp_in.push_back(std::move(h));
    cache->mlp_z.push_back(std::move(z));
    cache->mlp_mask.push_back(std::move(mask));
    h = std::move(next);
  }
  cache->head_in = std::move(h);
  Matrix logits = cache->head_in * p["mlp.out_w"];
  AddRowBias(&logits, p["mlp.out_b"]);
  return logits;
}

void MlpBackward(const Detector& det, const ForwardCache& cache,
                 const Matrix& dlogits, ParamSet* grad) {
  const ParamSet& p = det.params;
  (*grad)["mlp.out_w"] += cache.head_in.transpose() * dlogits;
  (*grad)["mlp.out_b"] += ColumnSum(dlogits);
  Matrix dh = dlogits * p["mlp.out_w"].transpose();
  for (int l = det.hyper.layers - 1; l >= 0; --l) {
    Matrix dz = ReluBackward(dh.cwiseProduct(cache.mlp_mask[l]), cache.mlp_z[l]);
    (*grad)[absl::StrCat("mlp.w", l)] += cache.mlp_in[l].transpose() * dz;
    (*grad)[absl::StrCat("mlp.b", l)] += ColumnSum(dz);
    if (l > 0) dh = dz * p[absl::StrCat("mlp.w", l)].transpose();
  }
}

Matrix Logits(const Detector& det, const BipartiteGraph& g, bool train,
              Rng* rng, ForwardCache* cache) {
  if (det.kind == DetectorKind::kMlp) return MlpForward(det, g, train, rng, cache);
  MeanAggregator agg(g);
  return GnnForward(det, g, agg, train, rng, cache);
}

double Sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// log(1 + e^z) without overflow.
double Softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

struct Counts {
  int tp = 0, fp = 0, fn = 0;
  double F1() const {
    const int denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * tp / denom;
  }
};

void AdamStep(const DetectorHyper& h, int t, const ParamSet& grad, ParamSet* m,
              ParamSet* v, ParamSet* params) {
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (size_t b = 0; b < params->blocks.size(); ++b) {
    auto g = grad.blocks[b].array();
    auto mb = m->blocks[b].array();
    auto vb = v->blocks[b].array();
    mb = h.beta1 * mb + (1.0 - h.beta1) * g;
    vb = h.beta2 * vb + (1.0 - h.beta2) * g.square();
    params->blocks[b].array() -=
        h.learning_rate * (mb / c1) / ((vb / c2).sqrt() + h.epsilon);
  }
}

std::string FormatDouble(double x) { return absl::StrFormat("%.17g", x); }

void AppendRow(std::string* out, const double* data, Eigen::Index n) {
  for (Eigen::Index i = 0; i < n; ++i) {
    absl::StrAppend(out, " ", FormatDouble(data[i]));
  }
}

bool ParseDoubles(std::span<const absl::string_view> fields, double* out) {
  for (size_t i = 0; i < fields.size(); ++i) {
    if (!absl::SimpleAtod(fields[i], &out[i])) return false;
  }
  return true;
}

double Median(const Eigen::Ref<const Eigen::VectorXd>& column) {
  std::vector<double> v(column.data(), column.data() + column.size());
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  if (v.size() % 2 == 1) return v[mid];
  return 0.5 * (v[mid] + *std::max_element(v.begin(), v.begin() + mid));
}

absl::Status Malformed(absl::string_view what, size_t line) {
  return absl::InvalidArgumentError(
      absl::StrCat(what, ": malformed line ", line + 1));
}

}  // namespace

absl::StatusOr<BipartiteGraph> BuildGraph(
    const std::map<ClientId, std::vector<double>>& projections,
    const HistoryRecords& history, int epoch,
    const std::map<NodeId, double>& node_accuracy,
    const NodeAssignment& assignment, const GraphOptions& options) {
  std::set<ClientId> clients;
  for (const auto& [n, c] : assignment.edges) {
    clients.insert(c);
    if (!projections.contains(c)) {
      return absl::FailedPreconditionError(
          absl::StrCat("client ", c, " has no projection"));
    }
    if (!node_accuracy.contains(n)) {
      return absl::FailedPreconditionError(
          absl::StrCat("node ", n, " has no accuracy"));
    }
  }
  if (clients.empty()) return absl::FailedPreconditionError("graph has no clients");
  BipartiteGraph g;
  g.client_ids.assign(clients.begin(), clients.end());
  for (const auto& [n, acc] : node_accuracy) g.node_ids.push_back(n);
  const int proj_dim = static_cast<int>(projections.at(g.client_ids[0]).size());
  g.client_features = Matrix::Zero(g.client_count(), proj_dim + options.history_window);
  std::map<ClientId, int> client_index;
  for (int i = 0; i < g.client_count(); ++i) {
    const ClientId c = g.client_ids[i];
    client_index[c] = i;
    const std::vector<double>& v = projections.at(c);
    if (static_cast<int>(v.size()) != proj_dim) {
      return absl::FailedPreconditionError("projections differ in length");
    }
    for (int j = 0; j < proj_dim; ++j) g.client_features(i, j) = v[j];
    auto it = history.find(c);
    if (it == history.end()) continue;
    for (int k = 0; k < options.history_window; ++k) {
      if (it->second.contains(epoch - 1 - k)) g.client_features(i, proj_dim + k) = 1.0;
    }
  }
  if (options.center_features) {
    for (int j = 0; j < proj_dim; ++j) {
      g.client_features.col(j).array() -= Median(g.client_features.col(j));
    }
  }
  std::map<NodeId, int> node_index;
  for (int i = 0; i < g.node_count(); ++i) node_index[g.node_ids[i]] = i;
  std::vector<int> degree(g.node_count(), 0);
  for (const auto& [n, c] : assignment.edges) {
    g.edges.emplace_back(node_index[n], client_index[c]);
    ++degree[node_index[n]];
  }
  g.node_features = Matrix::Zero(g.node_count(), options.node_degree_feature ? 2 : 1);
  for (int i = 0; i < g.node_count(); ++i) {
    g.node_features(i, 0) = node_accuracy.at(g.node_ids[i]);
    if (options.node_degree_feature) {
      g.node_features(i, 1) = static_cast<double>(degree[i]) / g.client_count();
    }
  }
  if (options.center_features) {
    g.node_features.col(0).array() -= Median(g.node_features.col(0));
  }
  return g;
}

BipartiteGraph MergeGraphs(std::span<const BipartiteGraph* const> graphs) {
  BipartiteGraph out;
  Eigen::Index clients = 0, nodes = 0;
  for (const BipartiteGraph* g : graphs) {
    clients += g->client_count();
    nodes += g->node_count();
  }
  if (graphs.empty()) return out;
  out.client_features.resize(clients, graphs[0]->client_features.cols());
  out.node_features.resize(nodes, graphs[0]->node_features.cols());
  int c0 = 0, n0 = 0;
  for (const BipartiteGraph* g : graphs) {
    out.client_features.middleRows(c0, g->client_count()) = g->client_features;
    out.node_features.middleRows(n0, g->node_count()) = g->node_features;
    out.client_ids.insert(out.client_ids.end(), g->client_ids.begin(),
                          g->client_ids.end());
    out.node_ids.insert(out.node_ids.end(), g->node_ids.begin(), g->node_ids.end());
    out.labels.insert(out.labels.end(), g->labels.begin(), g->labels.end());
    for (const auto& [n, c] : g->edges) out.edges.emplace_back(n + n0, c + c0);
    c0 += g->client_count();
    n0 += g->node_count();
  }
  return out;
}

Standardizer Standardizer::Fit(std::span<const BipartiteGraph> graphs) {
  Standardizer s;
  if (graphs.empty()) return s;
  auto fit = [&](auto features_of, std::vector<double>* mean,
                 std::vector<double>* stddev) {
    const Eigen::Index cols = features_of(graphs[0]).cols();
    mean->assign(cols, 0.0);
    stddev->assign(cols, 0.0);
    double rows = 0;
    for (const BipartiteGraph& g : graphs) {
      const Matrix& f = features_of(g);
      rows += f.rows();
      for (Eigen::Index j = 0; j < cols; ++j) (*mean)[j] += f.col(j).sum();
    }
    for (double& m : *mean) m /= rows;
    for (const BipartiteGraph& g : graphs) {
      const Matrix& f = features_of(g);
      for (Eigen::Index j = 0; j < cols; ++j) {
        (*stddev)[j] += (f.col(j).array() - (*mean)[j]).square().sum();
      }
    }
    for (double& v : *stddev) {
      v = std::sqrt(v / rows);
      if (!(v > 1e-12)) v = 1.0;
    }
  };
  fit([](const BipartiteGraph& g) -> const Matrix& { return g.client_features; },
      &s.client_mean, &s.client_std);
  fit([](const BipartiteGraph& g) -> const Matrix& { return g.node_features; },
      &s.node_mean, &s.node_std);
  return s;
}

BipartiteGraph Standardizer::Apply(const BipartiteGraph& g) const {
  BipartiteGraph out = g;
  if (empty()) return out;
  for (Eigen::Index j = 0; j < out.client_features.cols(); ++j) {
    out.client_features.col(j).array() =
        (out.client_features.col(j).array() - client_mean[j]) / client_std[j];
  }
  for (Eigen::Index j = 0; j < out.node_features.cols(); ++j) {
    out.node_features.col(j).array() =
        (out.node_features.col(j).array() - node_mean[j]) / node_std[j];
  }
  return out;
}

Matrix& ParamSet::operator[](const std::string& name) {
  const auto it = std::find(names.begin(), names.end(), name);
  return blocks[it - names.begin()];
}

const Matrix& ParamSet::operator[](const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  return blocks[it - names.begin()];
}

void ParamSet::Add(std::string name, Matrix m) {
  names.push_back(std::move(name));
  blocks.push_back(std::move(m));
}

ParamSet ParamSet::ZerosLike() const {
  ParamSet out;
  for (size_t i = 0; i < blocks.size(); ++i) {
    out.Add(names[i], Matrix::Zero(blocks[i].rows(), blocks[i].cols()));
  }
  return out;
}

size_t ParamSet::ScalarCount() const {
  size_t n = 0;
  for (const Matrix& m : blocks) n += m.size();
  return n;
}

Detector InitDetector(DetectorKind kind, int client_dim, int node_dim,
                      const DetectorHyper& hyper, int projection_dim) {
  Detector det;
  det.kind = kind;
  det.hyper = hyper;
  det.client_dim = client_dim;
  det.node_dim = node_dim;
  Rng rng(DeriveSeed(hyper.seed, {kInitTag, static_cast<uint64_t>(kind)}));
  const int h = hyper.hidden;
  if (kind == DetectorKind::kGnn) {
    for (int l = 0; l < hyper.layers; ++l) {
      const int in_c = l == 0 ? client_dim : h;
      const int in_n = l == 0 ? node_dim : h;
      det.params.Add(LayerName(l, "client_self"), Glorot(in_c, h, rng));
      det.params.Add(LayerName(l, "client_from_node"), Glorot(in_n, h, rng));
      det.params.Add(LayerName(l, "client_bias"), Matrix::Zero(1, h));
      if (l + 1 < hyper.layers) {
        det.params.Add(LayerName(l, "node_self"), Glorot(in_n, h, rng));
        det.params.Add(LayerName(l, "node_from_client"), Glorot(in_c, h, rng));
        det.params.Add(LayerName(l, "node_bias"), Matrix::Zero(1, h));
      }
    }
    det.params.Add("head.w1", Glorot(h, h, rng));
    det.params.Add("head.b1", Matrix::Zero(1, h));
    det.params.Add("head.w2", Glorot(h, 1, rng));
    det.params.Add("head.b2", Matrix::Zero(1, 1));
  } else {
    for (int l = 0; l < hyper.layers; ++l) {
      det.params.Add(absl::StrCat("mlp.w", l),
                     Glorot(l == 0 ? projection_dim : h, h, rng));
      det.params.Add(absl::StrCat("mlp.b", l), Matrix::Zero(1, h));
    }
    det.params.Add("mlp.out_w", Glorot(h, 1, rng));
    det.params.Add("mlp.out_b", Matrix::Zero(1, 1));
  }
  return det;
}

absl::StatusOr<double> LossAndGradient(const Detector& det,
                                       const BipartiteGraph& graph, bool train,
                                       Rng* rng, ParamSet* grad) {
  TFL_RETURN_IF_ERROR(CheckShapes(det, graph));
  if (graph.labels.size() != static_cast<size_t>(graph.client_count())) {
    return absl::InvalidArgumentError("graph is not labeled");
  }
  if (graph.client_count() == 0) return 0.0;
  ForwardCache cache;
  MeanAggregator agg(graph);
  Matrix logits = det.kind == DetectorKind::kGnn
                      ? GnnForward(det, graph, agg, train, rng, &cache)
                      : MlpForward(det, graph, train, rng, &cache);
  const double inv = 1.0 / graph.client_count();
  double loss = 0.0;
  Matrix dlogits(logits.rows(), 1);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double z = logits(i, 0);
    const double y = graph.labels[i];
    loss += Softplus(z) - y * z;
    dlogits(i, 0) = (Sigmoid(z) - y) * inv;
  }
  if (grad != nullptr) {
    if (grad->blocks.size() != det.params.blocks.size()) *grad = det.params.ZerosLike();
    if (det.kind == DetectorKind::kGnn) {
      GnnBackward(det, agg, cache, dlogits, grad);
    } else {
      MlpBackward(det, cache, dlogits, grad);
    }
  }
  return loss * inv;
}

absl::StatusOr<std::vector<double>> ForwardProbabilities(const Detector& det,
                                                         const BipartiteGraph& graph) {
  TFL_RETURN_IF_ERROR(CheckShapes(det, graph));
  ForwardCache cache;
  Matrix logits = Logits(det, graph, false, nullptr, &cache);
  std::vector<double> out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) out[i] = Sigmoid(logits(i, 0));
  return out;
}

absl::StatusOr<std::vector<double>> Probabilities(const Detector& det,
                                                  const BipartiteGraph& raw) {
  if (det.standardizer.empty()) return ForwardProbabilities(det, raw);
  return ForwardProbabilities(det, det.standardizer.Apply(raw));
}

absl::StatusOr<DetectionResult> Detect(const Detector& det,
                                       const BipartiteGraph& raw,
                                       double threshold) {
  TFL_ASSIGN_OR_RETURN(std::vector<double> probs, Probabilities(det, raw));
  DetectionResult out;
  out.threshold = threshold;
  for (int i = 0; i < raw.client_count(); ++i) {
    out.probabilities[raw.client_ids[i]] = probs[i];
    if (probs[i] >= threshold) out.flagged.insert(raw.client_ids[i]);
  }
  return out;
}

double F1Score(const std::set<ClientId>& predicted,
               const std::set<ClientId>& truth) {
  Counts c;
  for (ClientId p : predicted) (truth.contains(p) ? c.tp : c.fp)++;
  for (ClientId t : truth) {
    if (!predicted.contains(t)) ++c.fn;
  }
  return c.F1();
}

absl::StatusOr<double> EvaluateF1(const Detector& det,
                                  std::span<const BipartiteGraph> graphs) {
  Counts c;
  for (const BipartiteGraph& g : graphs) {
    if (g.labels.size() != static_cast<size_t>(g.client_count())) {
      return absl::InvalidArgumentError("graph is not labeled");
    }
    TFL_ASSIGN_OR_RETURN(std::vector<double> probs, Probabilities(det, g));
    for (size_t i = 0; i < probs.size(); ++i) {
      const bool flagged = probs[i] >= 0.5;
      if (flagged && g.labels[i] == 1) ++c.tp;
      if (flagged && g.labels[i] == 0) ++c.fp;
      if (!flagged && g.labels[i] == 1) ++c.fn;
    }
  }
  return c.F1();
}

absl::StatusOr<Detector> TrainDetector(DetectorKind kind,
                                       std::span<const BipartiteGraph> corpus,
                                       const DetectorHyper& hyper,
                                       TrainReport* report) {
  if (corpus.empty()) return absl::InvalidArgumentError("empty detector corpus");
  for (const BipartiteGraph& g : corpus) {
    if (g.labels.size() != static_cast<size_t>(g.client_count())) {
      return absl::InvalidArgumentError("detector corpus contains unlabeled graphs");
    }
  }
  if (hyper.epochs < 0 || hyper.batch_graphs < 1 || hyper.layers < 1 ||
      hyper.hidden < 1 || !(hyper.dropout >= 0.0 && hyper.dropout < 1.0)) {
    return absl::InvalidArgumentError("invalid detector hyperparameters");
  }
  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(DeriveSeed(hyper.seed, {kSplitTag}));
  Shuffle(order, split_rng);
  size_t n_val = static_cast<size_t>(std::lround(hyper.validation_fraction * corpus.size()));
  if (corpus.size() >= 2) n_val = std::clamp<size_t>(n_val, 1, corpus.size() - 1);
  else n_val = 0;

  std::vector<BipartiteGraph> raw_train;
  for (size_t i = n_val; i < order.size(); ++i) raw_train.push_back(corpus[order[i]]);
  Standardizer standardizer = Standardizer::Fit(raw_train);
  std::vector<BipartiteGraph> train, val;
  for (const BipartiteGraph& g : raw_train) train.push_back(standardizer.Apply(g));
  for (size_t i = 0; i < n_val; ++i) val.push_back(standardizer.Apply(corpus[order[i]]));
  if (val.empty()) val = train;

  Detector det = InitDetector(kind, static_cast<int>(corpus[0].client_features.cols()),
                              static_cast<int>(corpus[0].node_features.cols()), hyper);
  std::vector<const BipartiteGraph*> val_ptrs;
  for (const BipartiteGraph& g : val) val_ptrs.push_back(&g);
  const BipartiteGraph val_graph = MergeGraphs(val_ptrs);

  ParamSet m = det.params.ZerosLike(), v = det.params.ZerosLike();
  ParamSet best = det.params;
  double best_f1 = -1.0, best_loss = 0.0;
  int best_epoch = -1;
  Rng shuffle_rng(DeriveSeed(hyper.seed, {kShuffleTag}));
  Rng dropout_rng(DeriveSeed(hyper.seed, {kDropoutTag}));
  std::vector<size_t> train_order(train.size());
  for (size_t i = 0; i < train_order.size(); ++i) train_order[i] = i;
  // A single batch never needs re-merging.
  BipartiteGraph whole;
  const bool single_batch = train.size() <= static_cast<size_t>(hyper.batch_graphs);
  if (single_batch) {
    std::vector<const BipartiteGraph*> ptrs;
    for (const BipartiteGraph& g : train) ptrs.push_back(&g);
    whole = MergeGraphs(ptrs);
  }
  int step = 0;
  ParamSet grad = det.params.ZerosLike();
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    Shuffle(train_order, shuffle_rng);
    for (size_t start = 0; start < train.size(); start += hyper.batch_graphs) {
      BipartiteGraph batch;
      if (!single_batch) {
        std::vector<const BipartiteGraph*> ptrs;
        for (size_t i = start; i < std::min(train.size(), start + hyper.batch_graphs); ++i) {
          ptrs.push_back(&train[train_order[i]]);
        }
        batch = MergeGraphs(ptrs);
      }
      for (Matrix& b : grad.blocks) b.setZero();
      TFL_ASSIGN_OR_RETURN(double loss, LossAndGradient(det, single_batch ? whole : batch,
                                                        true, &dropout_rng, &grad));
      (void)loss;
      AdamStep(hyper, ++step, grad, &m, &v, &det.params);
    }
    TFL_ASSIGN_OR_RETURN(double val_loss,
                         LossAndGradient(det, val_graph, false, nullptr, nullptr));
    TFL_ASSIGN_OR_RETURN(std::vector<double> probs, ForwardProbabilities(det, val_graph));
    Counts c;
    for (size_t i = 0; i < probs.size(); ++i) {
      const bool flagged = probs[i] >= 0.5;
      if (flagged && val_graph.labels[i] == 1) ++c.tp;
      if (flagged && val_graph.labels[i] == 0) ++c.fp;
      if (!flagged && val_graph.labels[i] == 1) ++c.fn;
    }
    const double f1 = c.F1();
    if (f1 > best_f1 || (f1 == best_f1 && val_loss < best_loss)) {
      best_f1 = f1;
      best_loss = val_loss;
      best_epoch = epoch;
      best = det.params;
    }
  }
  if (best_epoch >= 0) det.params = std::move(best);
  det.standardizer = std::move(standardizer);
  if (report != nullptr) {
    report->best_epoch = best_epoch;
    report->validation_f1 = std::max(best_f1, 0.0);
    report->validation_loss = best_loss;
    report->train_graphs = train.size();
    report->validation_graphs = n_val;
  }
  return det;
}

absl::StatusOr<std::vector<ClientId>> SelectClients(
    const std::map<ClientId, double>& probabilities,
    std::span<const ClientId> pool, int k) {
  if (k < 0 || static_cast<size_t>(k) > pool.size()) {
    return absl::InvalidArgumentError(
        absl::StrCat("cannot select ", k, " clients from a pool of ", pool.size()));
  }
  std::vector<std::pair<double, ClientId>> ranked;
  for (ClientId c : pool) {
    auto it = probabilities.find(c);
    ranked.emplace_back(it == probabilities.end() ? 0.5 : it->second, c);
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<ClientId> out;
  for (int i = 0; i < k; ++i) out.push_back(ranked[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

std::string SerializeGraph(const BipartiteGraph& g) {
  std::string out = absl::StrCat(
      "tfl-graph v1\ndims ", g.client_count(), " ", g.client_features.cols(), " ",
      g.node_count(), " ", g.node_features.cols(), " ", g.edges.size(), " ",
      g.labels.empty() ? 0 : 1, "\n");
  for (int i = 0; i < g.client_count(); ++i) {
    absl::StrAppend(&out, "c ", g.client_ids[i], " ",
                    g.labels.empty() ? -1 : g.labels[i]);
    AppendRow(&out, g.client_features.row(i).data(), g.client_features.cols());
    out.push_back('\n');
  }
  for (int i = 0; i < g.node_count(); ++i) {
    absl::StrAppend(&out, "n ", g.node_ids[i]);
    AppendRow(&out, g.node_features.row(i).data(), g.node_features.cols());
    out.push_back('\n');
  }
  for (const auto& [n, c] : g.edges) absl::StrAppend(&out, "e ", n, " ", c, "\n");
  return out;
}

absl::StatusOr<BipartiteGraph> ParseGraph(const std::string& text) {
  std::vector<absl::string_view> lines = absl::StrSplit(text, '\n', absl::SkipEmpty());
  if (lines.size() < 2 || lines[0] != "tfl-graph v1") {
    return absl::InvalidArgumentError("graph record: bad header");
  }
  std::vector<absl::string_view> dims = absl::StrSplit(lines[1], ' ');
  int nc = 0, fc = 0, nn = 0, fn = 0, ne = 0, labeled = 0;
  if (dims.size() != 7 || dims[0] != "dims" || !absl::SimpleAtoi(dims[1], &nc) ||
      !absl::SimpleAtoi(dims[2], &fc) || !absl::SimpleAtoi(dims[3], &nn) ||
      !absl::SimpleAtoi(dims[4], &fn) || !absl::SimpleAtoi(dims[5], &ne) ||
      !absl::SimpleAtoi(dims[6], &labeled) || nc < 0 || nn < 0 || ne < 0 ||
      fc < 0 || fn < 0) {
    return Malformed("graph record", 1);
  }
  if (lines.size() != static_cast<size_t>(2 + nc + nn + ne)) {
    return absl::InvalidArgumentError("graph record: line count mismatch");
  }
  BipartiteGraph g;
  g.client_features.resize(nc, fc);
  g.node_features.resize(nn, fn);
  size_t li = 2;
  for (int i = 0; i < nc; ++i, ++li) {
    std::vector<absl::string_view> f = absl::StrSplit(lines[li], ' ');
    int id = 0, label = 0;
    if (f.size() != static_cast<size_t>(3 + fc) || f[0] != "c" ||
        !absl::SimpleAtoi(f[1], &id) || !absl::SimpleAtoi(f[2], &label) ||
        !ParseDoubles(std::span(f).subspan(3), g.client_features.row(i).data())) {
      return Malformed("graph record", li);
    }
    g.client_ids.push_back(id);
    if (labeled) g.labels.push_back(label);
  }
  for (int i = 0; i < nn; ++i, ++li) {
    std::vector<absl::string_view> f = absl::StrSplit(lines[li], ' ');
    int id = 0;
    if (f.size() != static_cast<size_t>(2 + fn) || f[0] != "n" ||
        !absl::SimpleAtoi(f[1], &id) ||
        !ParseDoubles(std::span(f).subspan(2), g.node_features.row(i).data())) {
      return Malformed("graph record", li);
    }
    g.node_ids.push_back(id);
  }
  for (int i = 0; i < ne; ++i, ++li) {
    std::vector<absl::string_view> f = absl::StrSplit(lines[li], ' ');
    int n = 0, c = 0;
    if (f.size() != 3 || f[0] != "e" || !absl::SimpleAtoi(f[1], &n) ||
        !absl::SimpleAtoi(f[2], &c) || n < 0 || n >= nn || c < 0 || c >= nc) {
      return Malformed("graph record", li);
    }
    g.edges.emplace_back(n, c);
  }
  return g;
}

absl::Status WriteCorpus(std::span<const BipartiteGraph> corpus,
                         const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) return absl::InvalidArgumentError(absl::StrCat("cannot create ", dir));
  for (size_t i = 0; i < corpus.size(); ++i) {
    const auto path = std::filesystem::path(dir) / absl::StrFormat("graph_%05d.txt", i);
    std::ofstream f(path);
    f << SerializeGraph(corpus[i]);
    if (!f) return absl::InternalError(absl::StrCat("cannot write ", path.string()));
  }
  return absl::OkStatus();
}

absl::StatusOr<std::vector<BipartiteGraph>> ReadCorpus(const std::string& dir) {
  std::error_code ec;
  std::vector<std::filesystem::path> paths;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
    if (entry.path().extension() == ".txt") paths.push_back(entry.path());
  }
  if (ec) return absl::NotFoundError(absl::StrCat("cannot read corpus ", dir));
  std::sort(paths.begin(), paths.end());
  std::vector<BipartiteGraph> out;
  for (const auto& path : paths) {
    std::ifstream f(path);
    std::ostringstream text;
    text << f.rdbuf();
    auto g = ParseGraph(text.str());
    if (!g.ok()) {
      return absl::InvalidArgumentError(
          absl::StrCat(path.string(), ": ", g.status().message()));
    }
    out.push_back(*std::move(g));
  }
  if (out.empty()) return absl::NotFoundError(absl::StrCat("no graphs in ", dir));
  return out;
}

std::string SerializeDetector(const Detector& det) {
  const DetectorHyper& h = det.hyper;
  std::string out = absl::StrCat(
      "tfl-detector v1\nkind ", det.kind == DetectorKind::kGnn ? "gnn" : "mlp",
      "\nhyper ", h.layers, " ", h.hidden, " ", FormatDouble(h.dropout), " ",
      FormatDouble(h.learning_rate), " ", FormatDouble(h.beta1), " ",
      FormatDouble(h.beta2), " ", FormatDouble(h.epsilon), " ", h.batch_graphs,
      " ", h.epochs, " ", FormatDouble(h.validation_fraction), " ", h.seed,
      "\ndims ", det.client_dim, " ", det.node_dim, "\n");
  const Standardizer& s = det.standardizer;
  for (const auto* vec : {&s.client_mean, &s.client_std, &s.node_mean, &s.node_std}) {
    absl::StrAppend(&out, "standardizer ", vec->size());
    AppendRow(&out, vec->data(), vec->size());
    out.push_back('\n');
  }
  absl::StrAppend(&out, "blocks ", det.params.blocks.size(), "\n");
  for (size_t b = 0; b < det.params.blocks.size(); ++b) {
    const Matrix& m = det.params.blocks[b];
    absl::StrAppend(&out, "block ", det.params.names[b], " ", m.rows(), " ",
                    m.cols(), "\n");
    AppendRow(&out, m.data(), m.size());
    out.push_back('\n');
  }
  return out;
}

absl::StatusOr<Detector> ParseDetector(const std::string& text) {
  std::vector<absl::string_view> lines = absl::StrSplit(text, '\n', absl::SkipEmpty());
  if (lines.size() < 9 || lines[0] != "tfl-detector v1") {
    return absl::InvalidArgumentError("detector file: bad header");
  }
  Detector det;
  if (lines[1] == "kind gnn") {
    det.kind = DetectorKind::kGnn;
  } else if (lines[1] == "kind mlp") {
    det.kind = DetectorKind::kMlp;
  } else {
    return Malformed("detector file", 1);
  }
  std::vector<absl::string_view> f = absl::StrSplit(lines[2], ' ');
  DetectorHyper& h = det.hyper;
  if (f.size() != 12 || f[0] != "hyper" || !absl::SimpleAtoi(f[1], &h.layers) ||
      !absl::SimpleAtoi(f[2], &h.hidden) || !absl::SimpleAtod(f[3], &h.dropout) ||
      !absl::SimpleAtod(f[4], &h.learning_rate) || !absl::SimpleAtod(f[5], &h.beta1) ||
      !absl::SimpleAtod(f[6], &h.beta2) || !absl::SimpleAtod(f[7], &h.epsilon) ||
      !absl::SimpleAtoi(f[8], &h.batch_graphs) || !absl::SimpleAtoi(f[9], &h.epochs) ||
      !absl::SimpleAtod(f[10], &h.validation_fraction) ||
      !absl::SimpleAtoi(f[11], &h.seed)) {
    return Malformed("detector file", 2);
  }
  f = absl::StrSplit(lines[3], ' ');
  if (f.size() != 3 || f[0] != "dims" || !absl::SimpleAtoi(f[1], &det.client_dim) ||
      !absl::SimpleAtoi(f[2], &det.node_dim)) {
    return Malformed("detector file", 3);
  }
  Standardizer& s = det.standardizer;
  std::vector<double>* vecs[] = {&s.client_mean, &s.client_std, &s.node_mean,
                                 &s.node_std};
  for (int i = 0; i < 4; ++i) {
    f = absl::StrSplit(lines[4 + i], ' ');
    size_t n = 0;
    if (f.size() < 2 || f[0] != "standardizer" || !absl::SimpleAtoi(f[1], &n) ||
        f.size() != 2 + n) {
      return Malformed("detector file", 4 + i);
    }
    vecs[i]->resize(n);
    if (!ParseDoubles(std::span(f).subspan(2), vecs[i]->data())) {
      return Malformed("detector file", 4 + i);
    }
  }
  size_t count = 0;
  f = absl::StrSplit(lines[8], ' ');
  if (f.size() != 2 || f[0] != "blocks" || !absl::SimpleAtoi(f[1], &count) ||
      lines.size() != 9 + 2 * count) {
    return Malformed("detector file", 8);
  }
  for (size_t b = 0; b < count; ++b) {
    const size_t li = 9 + 2 * b;
    f = absl::StrSplit(lines[li], ' ');
    int rows = 0, cols = 0;
    if (f.size() != 4 || f[0] != "block" || !absl::SimpleAtoi(f[2], &rows) ||
        !absl::SimpleAtoi(f[3], &cols) || rows < 0 || cols < 0) {
      return Malformed("detector file", li);
    }
    Matrix m(rows, cols);
    std::vector<absl::string_view> values =
        absl::StrSplit(lines[li + 1], ' ', absl::SkipEmpty());
    if (values.size() != static_cast<size_t>(m.size()) ||
        !ParseDoubles(values, m.data())) {
      return Malformed("detector file", li + 1);
    }
    det.params.Add(std::string(f[1]), std::move(m));
  }
  // Validate against a freshly initialised layout.
  const Detector layout = InitDetector(det.kind, det.client_dim, det.node_dim, h,
                                       det.kind == DetectorKind::kMlp &&
                                               !det.params.blocks.empty()
                                           ? static_cast<int>(det.params.blocks[0].rows())
                                           : kDefaultProjectionDim);
  if (layout.params.names != det.params.names) {
    return absl::InvalidArgumentError("detector file: parameter layout mismatch");
  }
  for (size_t b = 0; b < count; ++b) {
    if (layout.params.blocks[b].rows() != det.params.blocks[b].rows() ||
        layout.params.blocks[b].cols() != det.params.blocks[b].cols()) {
      return absl::InvalidArgumentError("detector file: parameter shape mismatch");
    }
  }
  return det;
}

}  // namespace tfl
