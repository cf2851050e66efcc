#include "v2pe/tinyformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "v2pe/errors.hpp"
#include "v2pe/rng.hpp"

namespace v2pe {

using Eigen::Index;

void ModelConfig::validate() const {
  if (layers <= 0 || heads <= 0 || head_dim <= 0 || vocab_size <= 0 || mlp_hidden < 0) {
    throw ConfigError("model sizes must be positive");
  }
  if (head_dim % 2 != 0) throw ConfigError("head_dim must be even");
  if (rope.head_dim != head_dim) {
    throw ConfigError("rope.head_dim (" + std::to_string(rope.head_dim) + ") != head_dim (" +
                      std::to_string(head_dim) + ")");
  }
  if (max_trained_window == 0) throw ConfigError("max_trained_window must be positive");
  rope.validate();
}

nlohmann::json to_json(const RopeConfig& rope) {
  nlohmann::json j{{"head_dim", rope.head_dim}, {"base", rope.base},
                   {"scheme", scheme_name(rope.scheme)}};
  if (const auto* lin = std::get_if<LinearInterpRope>(&rope.scheme)) j["factor"] = lin->factor;
  if (const auto* ntk = std::get_if<NtkScaledRope>(&rope.scheme)) j["alpha"] = ntk->alpha;
  return j;
}

RopeConfig rope_config_from_json(const nlohmann::json& j) {
  RopeConfig r;
  r.head_dim = j.value("head_dim", r.head_dim);
  r.base = j.value("base", r.base);
  const auto scheme = j.value("scheme", std::string("standard"));
  if (scheme == "linear") {
    r.scheme = LinearInterpRope{j.value("factor", 2.0)};
  } else if (scheme == "ntk") {
    r.scheme = NtkScaledRope{j.value("alpha", 5.0)};
  } else if (scheme == "standard") {
    r.scheme = StandardRope{};
  } else {
    throw ConfigError("unknown rope scheme '" + scheme + "'");
  }
  return r;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"layers", cfg.layers},
          {"heads", cfg.heads},
          {"head_dim", cfg.head_dim},
          {"vocab_size", cfg.vocab_size},
          {"mlp_hidden", cfg.mlp_hidden},
          {"max_trained_window", cfg.max_trained_window},
          {"rope", to_json(cfg.rope)},
          {"seed", cfg.seed},
          {"norm_eps", cfg.norm_eps}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.mlp_hidden = j.value("mlp_hidden", 0);
    c.max_trained_window = j.at("max_trained_window").get<std::uint64_t>();
    c.rope = rope_config_from_json(j.at("rope"));
    c.seed = j.at("seed").get<std::uint64_t>();
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model config: ") + e.what());
  }
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const Index d = cfg.width();
  const Index f = cfg.hidden();
  auto add = [this](std::string name, Index rows, Index cols) {
    tensors_.push_back({std::move(name), rows, cols, total_});
    total_ += static_cast<std::size_t>(rows * cols);
  };
  add("embed", cfg.vocab_size, d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "norm1", 1, d);
    add(p + "wq", d, d);
    add(p + "wk", d, d);
    add(p + "wv", d, d);
    add(p + "wo", d, d);
    add(p + "norm2", 1, d);
    add(p + "w1", d, f);
    add(p + "w2", f, d);
  }
  add("norm_f", 1, d);
  add("head", d, cfg.vocab_size);
}

template <typename T>
TinyModel<T>::TinyModel(const ModelConfig& cfg) : cfg_(cfg), params_(ParamLayout(cfg)) {
  Rng rng(cfg.seed);
  const auto& layout = params_.layout();
  for (std::size_t i = 0; i < layout.tensors().size(); ++i) {
    const auto& spec = layout.tensors()[i];
    auto w = params_[i];
    if (spec.rows == 1) {
      w.setOnes();  // norm gains
    } else if (i == layout.embed()) {
      for (Index k = 0; k < w.size(); ++k) w.data()[k] = static_cast<T>(rng.normal());
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.rows));
      for (Index k = 0; k < w.size(); ++k) {
        w.data()[k] = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
      }
    }
  }
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename T>
RowMatrix<T> gelu(const RowMatrix<T>& u) {
  const auto x = u.array();
  const auto t = (T(kGeluC) * (x + T(kGeluA) * x.cube())).tanh();
  return (T(0.5) * x * (T(1) + t)).matrix();
}

// d(gelu)/du, elementwise.
template <typename T>
RowMatrix<T> gelu_grad(const RowMatrix<T>& u) {
  const auto x = u.array();
  const auto t = (T(kGeluC) * (x + T(kGeluA) * x.cube())).tanh().eval();
  return (T(0.5) * (T(1) + t) +
          T(0.5) * x * (T(1) - t.square()) * T(kGeluC) * (T(1) + T(3 * kGeluA) * x.square()))
      .matrix();
}

template <typename T>
void rms_forward(const RowMatrix<T>& x, const Eigen::Map<const RowMatrix<T>>& gain, double eps,
                 RowMatrix<T>& y, Vector<T>& inv) {
  const Index d = x.cols();
  y.resize(x.rows(), d);
  inv.resize(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const T ms = x.row(i).squaredNorm() / static_cast<T>(d);
    inv(i) = T(1) / std::sqrt(ms + static_cast<T>(eps));
    y.row(i) = x.row(i).cwiseProduct(gain.row(0)) * inv(i);
  }
}

// dx += d(rmsnorm)/dx . dy ; dgain += ...
template <typename T>
void rms_backward(const RowMatrix<T>& dy, const RowMatrix<T>& x, const Vector<T>& inv,
                  const Eigen::Map<const RowMatrix<T>>& gain, RowMatrix<T>& dx,
                  Eigen::Map<RowMatrix<T>> dgain) {
  const T d = static_cast<T>(x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const auto gdy = dy.row(i).cwiseProduct(gain.row(0));
    const T dot = gdy.dot(x.row(i));
    const T r = inv(i);
    dx.row(i) += gdy * r - x.row(i) * (r * r * r * dot / d);
    dgain.row(0) += dy.row(i).cwiseProduct(x.row(i)) * r;
  }
}

// Rotates every head of every row; row r uses table row pos_index[r].
// sign = -1 applies the inverse rotation (used for gradients).
template <typename T>
void rotate_rows(RowMatrix<T>& m, const RopeTable<T>& table, std::span<const Index> pos_index,
                 int heads, int head_dim, T sign) {
  const int half = head_dim / 2;
  for (Index r = 0; r < m.rows(); ++r) {
    const T* cs = table.cos.data() + pos_index[static_cast<std::size_t>(r)] * half;
    const T* sn = table.sin.data() + pos_index[static_cast<std::size_t>(r)] * half;
    T* row = m.row(r).data();
    for (int h = 0; h < heads; ++h) {
      T* v = row + h * head_dim;
      for (int j = 0; j < half; ++j) {
        const T c = cs[j];
        const T s = sign * sn[j];
        const T x0 = v[2 * j];
        const T x1 = v[2 * j + 1];
        v[2 * j] = x0 * c - x1 * s;
        v[2 * j + 1] = x0 * s + x1 * c;
      }
    }
  }
}

template <typename T>
struct LayerCache {
  std::vector<Index> rows;
  RowMatrix<T> x;  // layer input, all N rows
  Vector<T> inv1;
  RowMatrix<T> h1;
  RowMatrix<T> q;  // rotated, M rows
  RowMatrix<T> k;  // rotated, N rows
  RowMatrix<T> v;
  std::vector<RowMatrix<T>> probs;  // per head, M x N
  RowMatrix<T> attn;
  RowMatrix<T> x_mid;
  Vector<T> inv2;
  RowMatrix<T> h2;
  RowMatrix<T> u;
  RowMatrix<T> a;
};

template <typename T>
class Engine {
 public:
  Engine(const TinyModel<T>& model, std::span<const double> positions, const RopeConfig& rope)
      : cfg_(model.config()),
        p_(model.params()),
        layout_(model.params().layout()),
        table_(make_rope_table<T>(rope, positions)),
        scale_(T(1) / std::sqrt(static_cast<T>(cfg_.head_dim))) {
    if (rope.head_dim != cfg_.head_dim) throw ConfigError("rope head_dim does not match model");
  }

  // Runs layer l on input x (N x D) for query rows `rows`; returns M x D.
  RowMatrix<T> layer_forward(int l, const RowMatrix<T>& x, std::span<const Index> rows,
                             LayerCache<T>& c, bool keep) const {
    const Index n = x.rows();
    const Index m = static_cast<Index>(rows.size());
    const int heads = cfg_.heads;
    const int hd = cfg_.head_dim;
    auto W = [&](ParamLayout::Slot s) { return p_[layout_.layer(l, s)]; };

    c.rows.assign(rows.begin(), rows.end());
    c.x = x;
    rms_forward<T>(x, W(ParamLayout::kNorm1), cfg_.norm_eps, c.h1, c.inv1);
    const bool full = is_identity(rows, n);
    RowMatrix<T> hq = full ? c.h1 : RowMatrix<T>(c.h1(c.rows, Eigen::all));
    c.q.noalias() = hq * W(ParamLayout::kWq);
    c.k.noalias() = c.h1 * W(ParamLayout::kWk);
    c.v.noalias() = c.h1 * W(ParamLayout::kWv);
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index(0));
    rotate_rows<T>(c.q, table_, rows, heads, hd, T(1));
    rotate_rows<T>(c.k, table_, all, heads, hd, T(1));

    c.attn.setZero(m, cfg_.width());
    c.probs.clear();
    if (keep) c.probs.assign(static_cast<std::size_t>(heads), RowMatrix<T>::Zero(m, n));
    RowMatrix<T> s;
    for (Index b0 = 0; b0 < m; b0 += kBlock) {
      const Index bn = std::min(kBlock, m - b0);
      const Index kend = key_extent(rows, b0, bn);
      for (int h = 0; h < heads; ++h) {
        s.noalias() = c.q.block(b0, h * hd, bn, hd) * c.k.block(0, h * hd, kend, hd).transpose();
        for (Index r = 0; r < bn; ++r) {
          const Index len = rows[static_cast<std::size_t>(b0 + r)] + 1;
          auto row = s.row(r).head(len).array();
          row = (row - row.maxCoeff()) * scale_;
          row = row.exp();
          row /= row.sum();
          s.row(r).tail(kend - len).setZero();
        }
        c.attn.block(b0, h * hd, bn, hd).noalias() = s * c.v.block(0, h * hd, kend, hd);
        if (keep) c.probs[static_cast<std::size_t>(h)].block(b0, 0, bn, kend) = s;
      }
    }

    c.x_mid = full ? x : RowMatrix<T>(x(c.rows, Eigen::all));
    c.x_mid.noalias() += c.attn * W(ParamLayout::kWo);
    rms_forward<T>(c.x_mid, W(ParamLayout::kNorm2), cfg_.norm_eps, c.h2, c.inv2);
    c.u.noalias() = c.h2 * W(ParamLayout::kW1);
    c.a = gelu<T>(c.u);
    RowMatrix<T> out = c.x_mid;
    out.noalias() += c.a * W(ParamLayout::kW2);
    return out;
  }

  // Given d(out) (M x D) returns d(x) (N x D) and accumulates weight grads.
  RowMatrix<T> layer_backward(int l, const RowMatrix<T>& dout, const LayerCache<T>& c,
                              ParamBuffer<T>& g) const {
    const Index n = c.x.rows();
    const Index m = dout.rows();
    const int heads = cfg_.heads;
    const int hd = cfg_.head_dim;
    auto W = [&](ParamLayout::Slot s) { return p_[layout_.layer(l, s)]; };
    auto G = [&](ParamLayout::Slot s) { return g[layout_.layer(l, s)]; };

    // MLP
    G(ParamLayout::kW2).noalias() += c.a.transpose() * dout;
    RowMatrix<T> du = dout * W(ParamLayout::kW2).transpose();
    du.array() *= gelu_grad<T>(c.u).array();
    G(ParamLayout::kW1).noalias() += c.h2.transpose() * du;
    RowMatrix<T> dh2 = du * W(ParamLayout::kW1).transpose();
    RowMatrix<T> dx_mid = dout;
    rms_backward<T>(dh2, c.x_mid, c.inv2, W(ParamLayout::kNorm2), dx_mid, G(ParamLayout::kNorm2));

    // Attention output projection
    G(ParamLayout::kWo).noalias() += c.attn.transpose() * dx_mid;
    const RowMatrix<T> dattn = dx_mid * W(ParamLayout::kWo).transpose();

    RowMatrix<T> dx = RowMatrix<T>::Zero(n, c.x.cols());
    for (Index r = 0; r < m; ++r) dx.row(c.rows[static_cast<std::size_t>(r)]) += dx_mid.row(r);

    RowMatrix<T> dq = RowMatrix<T>::Zero(m, cfg_.width());
    RowMatrix<T> dk = RowMatrix<T>::Zero(n, cfg_.width());
    RowMatrix<T> dv = RowMatrix<T>::Zero(n, cfg_.width());
    RowMatrix<T> dp;
    for (Index b0 = 0; b0 < m; b0 += kBlock) {
      const Index bn = std::min(kBlock, m - b0);
      const Index kend = key_extent(c.rows, b0, bn);
      for (int h = 0; h < heads; ++h) {
        const auto prob = c.probs[static_cast<std::size_t>(h)].block(b0, 0, bn, kend);
        const auto d_o = dattn.block(b0, h * hd, bn, hd);
        dp.noalias() = d_o * c.v.block(0, h * hd, kend, hd).transpose();
        dv.block(0, h * hd, kend, hd).noalias() += prob.transpose() * d_o;
        for (Index r = 0; r < bn; ++r) {
          const T dot = prob.row(r).dot(dp.row(r));
          dp.row(r) = (prob.row(r).array() * (dp.row(r).array() - dot) * scale_).matrix();
        }
        dq.block(b0, h * hd, bn, hd).noalias() = dp * c.k.block(0, h * hd, kend, hd);
        dk.block(0, h * hd, kend, hd).noalias() += dp.transpose() * c.q.block(b0, h * hd, bn, hd);
      }
    }
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index(0));
    rotate_rows<T>(dq, table_, c.rows, heads, hd, T(-1));
    rotate_rows<T>(dk, table_, all, heads, hd, T(-1));

    const bool full = is_identity(c.rows, n);
    const RowMatrix<T> hq = full ? c.h1 : RowMatrix<T>(c.h1(c.rows, Eigen::all));
    G(ParamLayout::kWq).noalias() += hq.transpose() * dq;
    G(ParamLayout::kWk).noalias() += c.h1.transpose() * dk;
    G(ParamLayout::kWv).noalias() += c.h1.transpose() * dv;
    RowMatrix<T> dh1 = dk * W(ParamLayout::kWk).transpose();
    dh1.noalias() += dv * W(ParamLayout::kWv).transpose();
    const RowMatrix<T> dhq = dq * W(ParamLayout::kWq).transpose();
    for (Index r = 0; r < m; ++r) dh1.row(c.rows[static_cast<std::size_t>(r)]) += dhq.row(r);
    rms_backward<T>(dh1, c.x, c.inv1, W(ParamLayout::kNorm1), dx, G(ParamLayout::kNorm1));
    return dx;
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamBuffer<T>& params() const { return p_; }
  const ParamLayout& layout() const { return layout_; }

 private:
  static constexpr Index kBlock = 64;

  // Keys visible to any query row in [b0, b0 + bn).
  static Index key_extent(std::span<const Index> rows, Index b0, Index bn) {
    Index hi = 0;
    for (Index r = b0; r < b0 + bn; ++r) hi = std::max(hi, rows[static_cast<std::size_t>(r)]);
    return hi + 1;
  }

  static bool is_identity(std::span<const Index> rows, Index n) {
    if (static_cast<Index>(rows.size()) != n) return false;
    for (Index i = 0; i < n; ++i) {
      if (rows[static_cast<std::size_t>(i)] != i) return false;
    }
    return true;
  }

  const ModelConfig& cfg_;
  const ParamBuffer<T>& p_;
  const ParamLayout& layout_;
  RopeTable<T> table_;
  T scale_;
};

std::vector<Index> iota_rows(Index n) {
  std::vector<Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Index(0));
  return all;
}

void check_rows(std::span<const Index> rows, Index n) {
  for (Index r : rows) {
    if (r < 0 || r >= n) throw RangeError("row " + std::to_string(r) + " outside sequence");
  }
}

template <typename T>
struct ForwardTrace {
  std::vector<LayerCache<T>> layers;
  RowMatrix<T> x_last;  // M x D, output of final block
  Vector<T> inv_f;
  RowMatrix<T> h_f;
};

// Runs every block (full rows except the last, which only evaluates `rows`)
// and the head. Fills `trace` when given.
template <typename T>
RowMatrix<T> run_model(const Engine<T>& eng, RowMatrix<T> x, std::span<const Index> rows,
                       ForwardTrace<T>* trace) {
  const auto& cfg = eng.config();
  const Index n = x.rows();
  check_rows(rows, n);
  const auto all = iota_rows(n);
  LayerCache<T> scratch;
  if (trace != nullptr) trace->layers.resize(static_cast<std::size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    const bool last = l == cfg.layers - 1;
    auto& c = trace != nullptr ? trace->layers[static_cast<std::size_t>(l)] : scratch;
    x = eng.layer_forward(l, x, last ? rows : std::span<const Index>(all), c, trace != nullptr);
  }
  const auto& layout = eng.layout();
  RowMatrix<T> h;
  Vector<T> inv;
  rms_forward<T>(x, eng.params()[layout.norm_f()], cfg.norm_eps, h, inv);
  RowMatrix<T> logits = h * eng.params()[layout.head()];
  if (trace != nullptr) {
    trace->x_last = std::move(x);
    trace->inv_f = std::move(inv);
    trace->h_f = std::move(h);
  }
  return logits;
}

template <typename T>
void check_positions(const TokenStream& stream, const PositionSequence& positions) {
  if (positions.size() != stream.size()) {
    throw ShapeError("positions length " + std::to_string(positions.size()) +
                     " != stream length " + std::to_string(stream.size()));
  }
  if (stream.empty()) throw ShapeError("empty stream");
}

template <typename T>
void check_vocab(const TinyModel<T>& model, const TokenStream& stream) {
  if (stream.vocab_size() > static_cast<std::uint32_t>(model.config().vocab_size)) {
    throw ShapeError("stream vocabulary larger than the model's");
  }
}

}  // namespace

template <typename T>
RowMatrix<T> embed_tokens(const TinyModel<T>& model, const TokenStream& stream) {
  check_vocab(model, stream);
  const auto table = model.params()[model.params().layout().embed()];
  RowMatrix<T> x(static_cast<Index>(stream.size()), model.config().width());
  for (std::size_t i = 0; i < stream.size(); ++i) {
    x.row(static_cast<Index>(i)) = table.row(stream[i].symbol);
  }
  return x;
}

template <typename T>
RowMatrix<T> logits_from_embeddings(const TinyModel<T>& model, const RowMatrix<T>& embeddings,
                                    const PositionSequence& positions,
                                    std::span<const Index> rows, const RopeConfig* rope) {
  if (static_cast<std::size_t>(embeddings.rows()) != positions.size()) {
    throw ShapeError("positions length does not match embeddings");
  }
  if (embeddings.cols() != model.config().width()) throw ShapeError("embedding width mismatch");
  if (embeddings.rows() == 0) throw ShapeError("empty input");
  const Engine<T> eng(model, positions.values, rope != nullptr ? *rope : model.config().rope);
  return run_model<T>(eng, embeddings, rows, nullptr);
}

template <typename T>
RowMatrix<T> logits_at(const TinyModel<T>& model, const TokenStream& stream,
                       const PositionSequence& positions, std::span<const Index> rows,
                       const RopeConfig* rope) {
  check_positions<T>(stream, positions);
  return logits_from_embeddings(model, embed_tokens(model, stream), positions, rows, rope);
}

template <typename T>
RowMatrix<T> forward(const TinyModel<T>& model, const TokenStream& stream,
                     const PositionSequence& positions) {
  const auto rows = iota_rows(static_cast<Index>(stream.size()));
  return logits_at(model, stream, positions, rows);
}

namespace {

template <typename T>
double example_loss(const RowMatrix<T>& logits, const TokenStream& stream,
                    std::span<const std::size_t> targets, double weight, RowMatrix<T>* dlogits) {
  double loss = 0.0;
  if (dlogits != nullptr) dlogits->resize(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const auto label = static_cast<Index>(stream[targets[static_cast<std::size_t>(r)]].symbol);
    const T mx = logits.row(r).maxCoeff();
    const auto ex = (logits.row(r).array() - mx).exp();
    const T sum = ex.sum();
    loss += static_cast<double>(std::log(sum) + mx - logits(r, label));
    if (dlogits != nullptr) {
      dlogits->row(r) = (ex / sum).matrix() * static_cast<T>(weight);
      (*dlogits)(r, label) -= static_cast<T>(weight);
    }
  }
  return loss * weight;
}

template <typename T>
std::size_t validate_batch(const TinyModel<T>& model, std::span<const TrainingExample> batch) {
  std::size_t total = 0;
  for (const auto& ex : batch) {
    check_positions<T>(ex.stream, ex.positions);
    check_vocab(model, ex.stream);
    for (std::size_t t : ex.targets) {
      if (t == 0 || t >= ex.stream.size()) {
        throw RangeError("target index " + std::to_string(t) + " outside [1, " +
                         std::to_string(ex.stream.size()) + ")");
      }
    }
    total += ex.targets.size();
  }
  if (total == 0) throw ConfigError("empty target span");
  return total;
}

std::vector<Index> predict_rows(std::span<const std::size_t> targets) {
  std::vector<Index> rows;
  rows.reserve(targets.size());
  for (std::size_t t : targets) rows.push_back(static_cast<Index>(t) - 1);
  return rows;
}

}  // namespace

template <typename T>
double loss_only(const TinyModel<T>& model, std::span<const TrainingExample> batch) {
  const std::size_t total = validate_batch(model, batch);
  double loss = 0.0;
  for (const auto& ex : batch) {
    const auto rows = predict_rows(ex.targets);
    const auto logits = logits_at(model, ex.stream, ex.positions, rows);
    loss += example_loss<T>(logits, ex.stream, ex.targets, 1.0 / static_cast<double>(total),
                            nullptr);
  }
  return loss;
}

template <typename T>
LossAndGrads<T> loss_and_grads(const TinyModel<T>& model,
                               std::span<const TrainingExample> batch) {
  const std::size_t total = validate_batch(model, batch);
  LossAndGrads<T> out{0.0, ParamBuffer<T>(model.params().layout())};
  const auto& layout = model.params().layout();
  const auto& cfg = model.config();
  for (const auto& ex : batch) {
    const auto rows = predict_rows(ex.targets);
    const Engine<T> eng(model, ex.positions.values, cfg.rope);
    ForwardTrace<T> trace;
    const RowMatrix<T> x0 = embed_tokens(model, ex.stream);
    const RowMatrix<T> logits = run_model<T>(eng, x0, rows, &trace);
    RowMatrix<T> dlogits;
    out.loss += example_loss<T>(logits, ex.stream, ex.targets, 1.0 / static_cast<double>(total),
                                &dlogits);

    out.grads[layout.head()].noalias() += trace.h_f.transpose() * dlogits;
    const RowMatrix<T> dh = dlogits * model.params()[layout.head()].transpose();
    RowMatrix<T> dx = RowMatrix<T>::Zero(trace.x_last.rows(), trace.x_last.cols());
    rms_backward<T>(dh, trace.x_last, trace.inv_f, model.params()[layout.norm_f()], dx,
                    out.grads[layout.norm_f()]);
    for (int l = cfg.layers - 1; l >= 0; --l) {
      dx = eng.layer_backward(l, dx, trace.layers[static_cast<std::size_t>(l)], out.grads);
    }
    auto dembed = out.grads[layout.embed()];
    for (std::size_t i = 0; i < ex.stream.size(); ++i) {
      dembed.row(ex.stream[i].symbol) += dx.row(static_cast<Index>(i));
    }
  }
  return out;
}

template <typename T>
std::vector<RowMatrix<T>> attention_probs(const TinyModel<T>& model, const TokenStream& stream,
                                          const PositionSequence& positions, int layer,
                                          std::size_t tail_rows, const RopeConfig* rope) {
  check_positions<T>(stream, positions);
  const auto& cfg = model.config();
  if (layer < 0 || layer >= cfg.layers) {
    throw RangeError("layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(cfg.layers) + ")");
  }
  const auto n = static_cast<Index>(stream.size());
  if (tail_rows == 0 || tail_rows > stream.size()) {
    throw RangeError("tail_rows " + std::to_string(tail_rows) + " outside [1, " +
                     std::to_string(stream.size()) + "]");
  }
  const Engine<T> eng(model, positions.values, rope != nullptr ? *rope : cfg.rope);
  const auto all = iota_rows(n);
  RowMatrix<T> x = embed_tokens(model, stream);
  LayerCache<T> c;
  for (int l = 0; l < layer; ++l) x = eng.layer_forward(l, x, all, c, false);
  std::vector<Index> tail(tail_rows);
  std::iota(tail.begin(), tail.end(), n - static_cast<Index>(tail_rows));
  eng.layer_forward(layer, x, tail, c, true);
  return c.probs;
}

template <typename T>
RowMatrix<T> dump_attention(const TinyModel<T>& model, const TokenStream& stream,
                            const PositionSequence& positions, int layer, std::size_t tail_rows,
                            const RopeConfig* rope) {
  const auto probs = attention_probs(model, stream, positions, layer, tail_rows, rope);
  RowMatrix<T> out = probs.front();
  for (std::size_t h = 1; h < probs.size(); ++h) out = out.cwiseMax(probs[h]);
  return out;
}

template class TinyModel<float>;
template class TinyModel<double>;

#define V2PE_INSTANTIATE(T)                                                                       \
  template RowMatrix<T> embed_tokens(const TinyModel<T>&, const TokenStream&);                   \
  template RowMatrix<T> forward(const TinyModel<T>&, const TokenStream&, const PositionSequence&); \
  template RowMatrix<T> logits_at(const TinyModel<T>&, const TokenStream&,                       \
                                  const PositionSequence&, std::span<const Index>,               \
                                  const RopeConfig*);                                            \
  template RowMatrix<T> logits_from_embeddings(const TinyModel<T>&, const RowMatrix<T>&,         \
                                               const PositionSequence&, std::span<const Index>,  \
                                               const RopeConfig*);                               \
  template LossAndGrads<T> loss_and_grads(const TinyModel<T>&, std::span<const TrainingExample>); \
  template double loss_only(const TinyModel<T>&, std::span<const TrainingExample>);              \
  template RowMatrix<T> dump_attention(const TinyModel<T>&, const TokenStream&,                  \
                                       const PositionSequence&, int, std::size_t,                \
                                       const RopeConfig*);                                       \
  template std::vector<RowMatrix<T>> attention_probs(const TinyModel<T>&, const TokenStream&,    \
                                                     const PositionSequence&, int, std::size_t,  \
                                                     const RopeConfig*);

V2PE_INSTANTIATE(float)
V2PE_INSTANTIATE(double)

#undef V2PE_INSTANTIATE

}  // namespace v2pe
