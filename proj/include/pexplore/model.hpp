#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pexplore/types.hpp"
#include "pexplore/vocab.hpp"

// Small decoder-only transformer with manual reverse-mode gradients.
// Everything is templated on the scalar so the same code runs in double
// (gradient checking) and float (training / inference).

namespace pexplore {

constexpr int kCheckpointFormatVersion = 1;

struct ModelArch {
  int layers = 2;
  int model_dim = 64;
  int heads = 4;
  int context_len = 256;
  int vocab_size = 0;

  int head_dim() const { return model_dim / heads; }
  int mlp_dim() const { return 4 * model_dim; }

  void validate() const {
    if (layers < 1) throw std::invalid_argument("arch: layers must be >= 1");
    if (heads < 1 || model_dim % heads != 0)
      throw std::invalid_argument("arch: model_dim must be divisible by heads");
    if (context_len < 256) throw std::invalid_argument("arch: context_len must be >= 256");
    if (vocab_size < 1) throw std::invalid_argument("arch: vocab_size must be >= 1");
  }
};

struct ParamInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;  // element offset into the flat buffer
};

template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const Mat<T>>;

// All parameters live in one flat buffer; named row-major matrix views are
// materialized on demand. The manifest order is fixed, so checkpoints, the
// optimizer state, and gradient buffers all share one layout.
template <typename T>
class Params {
 public:
  Params() = default;

  explicit Params(const ModelArch& arch) : arch_(arch) {
    arch.validate();
    const int d = arch.model_dim;
    add("tok_emb", arch.vocab_size, d);
    add("pos_emb", arch.context_len, d);
    for (int l = 0; l < arch.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add(p + "ln1.g", 1, d);
      add(p + "ln1.b", 1, d);
      add(p + "attn.w_qkv", d, 3 * d);
      add(p + "attn.b_qkv", 1, 3 * d);
      add(p + "attn.w_o", d, d);
      add(p + "attn.b_o", 1, d);
      add(p + "ln2.g", 1, d);
      add(p + "ln2.b", 1, d);
      add(p + "mlp.w_fc", d, arch.mlp_dim());
      add(p + "mlp.b_fc", 1, arch.mlp_dim());
      add(p + "mlp.w_proj", arch.mlp_dim(), d);
      add(p + "mlp.b_proj", 1, d);
    }
    add("lnf.g", 1, d);
    add("lnf.b", 1, d);
    add("lm_head", d, arch.vocab_size);
    flat.assign(total_, T(0));
  }

  std::vector<T> flat;

  const ModelArch& arch() const { return arch_; }
  const std::vector<ParamInfo>& manifest() const { return manifest_; }
  std::size_t size() const { return flat.size(); }

  MapMat<T> get(int idx) {
    const ParamInfo& info = manifest_[static_cast<std::size_t>(idx)];
    return MapMat<T>(flat.data() + info.offset, info.rows, info.cols);
  }
  CMapMat<T> get(int idx) const {
    const ParamInfo& info = manifest_[static_cast<std::size_t>(idx)];
    return CMapMat<T>(flat.data() + info.offset, info.rows, info.cols);
  }

  // Fixed manifest indices (layer-relative offsets below).
  static constexpr int kTokEmb = 0;
  static constexpr int kPosEmb = 1;
  static constexpr int kPerLayer = 12;
  static constexpr int kLn1G = 0, kLn1B = 1, kWqkv = 2, kBqkv = 3, kWo = 4, kBo = 5;
  static constexpr int kLn2G = 6, kLn2B = 7, kWfc = 8, kBfc = 9, kWproj = 10, kBproj = 11;
  int layer_base(int l) const { return 2 + l * kPerLayer; }
  int lnf_g() const { return 2 + arch_.layers * kPerLayer; }
  int lnf_b() const { return lnf_g() + 1; }
  int lm_head() const { return lnf_g() + 2; }

  void set_zero() { std::fill(flat.begin(), flat.end(), T(0)); }

 private:
  void add(std::string name, int rows, int cols) {
    manifest_.push_back({std::move(name), rows, cols, total_});
    total_ += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }

  ModelArch arch_;
  std::vector<ParamInfo> manifest_;
  std::size_t total_ = 0;
};

template <typename T>
struct Model {
  ModelArch arch;
  Vocabulary vocab;
  Params<T> params;
  int format_version = kCheckpointFormatVersion;
};

// GPT-2-style initialization: N(0, 0.02) weights, zero biases, unit LN gains.
template <typename T>
void init_params(Model<T>& model, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 0x9a7a);
  auto& p = model.params;
  const auto& man = p.manifest();
  for (int i = 0; i < static_cast<int>(man.size()); ++i) {
    auto m = p.get(i);
    const std::string& name = man[static_cast<std::size_t>(i)].name;
    const bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0 &&
                         name.find("ln") != std::string::npos;
    const bool is_bias = !is_gain && (name.find(".b") != std::string::npos);
    if (is_gain) {
      m.setOnes();
    } else if (is_bias) {
      m.setZero();
    } else {
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
          m(r, c) = static_cast<T>(0.02 * normal01(rng));
    }
  }
}

template <typename T>
Model<T> make_model(const ModelArch& arch, Vocabulary vocab, std::uint64_t seed) {
  ModelArch a = arch;
  a.vocab_size = vocab.size();
  a.validate();
  Model<T> model;
  model.arch = a;
  model.vocab = std::move(vocab);
  model.params = Params<T>(a);
  init_params(model, seed);
  return model;
}

// ------------------------------ packed batches ------------------------------

// Several sequences concatenated row-wise; attention never crosses a
// sequence boundary and positions restart at each boundary.
struct Packed {
  std::vector<int> ids;      // all tokens, sequence-major
  std::vector<int> offsets;  // size S+1, row ranges per sequence
  std::vector<int> pos;      // position of each row within its sequence

  int rows() const { return static_cast<int>(ids.size()); }
  int num_seqs() const { return static_cast<int>(offsets.size()) - 1; }
  int seq_len(int s) const {
    return offsets[static_cast<std::size_t>(s) + 1] - offsets[static_cast<std::size_t>(s)];
  }
};

inline Packed pack_sequences(const std::vector<std::vector<int>>& seqs, int context_len) {
  Packed p;
  p.offsets.push_back(0);
  for (const auto& s : seqs) {
    if (static_cast<int>(s.size()) > context_len)
      throw std::invalid_argument("pack_sequences: sequence exceeds context_len");
    for (std::size_t t = 0; t < s.size(); ++t) {
      p.ids.push_back(s[t]);
      p.pos.push_back(static_cast<int>(t));
    }
    p.offsets.push_back(static_cast<int>(p.ids.size()));
  }
  return p;
}

// ------------------------------- activations --------------------------------

template <typename T>
struct LnCache {
  Mat<T> xhat;                            // normalized input
  Eigen::Array<T, Eigen::Dynamic, 1> rstd;  // 1/sqrt(var+eps) per row
  Mat<T> out;
};

template <typename T>
struct LayerCache {
  LnCache<T> ln1, ln2;
  Mat<T> qkv;                  // rows x 3d
  std::vector<Mat<T>> probs;   // attention softmax, indexed seq*heads+head
  Mat<T> att_concat;           // rows x d, heads concatenated, before w_o
  Mat<T> fc_pre;               // rows x 4d
  Mat<T> fc_act;               // rows x 4d
};

template <typename T>
struct ForwardCache {
  Packed packed;
  std::vector<LayerCache<T>> layers;
  LnCache<T> lnf;
  // lnf.out holds the final features; logits are formed against lm_head on
  // demand so callers can restrict the projection to rows that carry loss.
};

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename T>
void layernorm_forward(const Mat<T>& x, CMapMat<T> g, CMapMat<T> b, LnCache<T>& c) {
  const Vec<T> mean = x.rowwise().mean();
  Mat<T> centered = x.colwise() - mean;
  c.rstd = (centered.array().square().rowwise().mean() + T(kLnEps)).rsqrt();
  c.xhat = (centered.array().colwise() * c.rstd).matrix();
  c.out = ((c.xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array()).matrix();
}

// dx = rstd * (gdy - mean(gdy) - xhat * mean(gdy*xhat)), gdy = dy .* gamma
template <typename T>
Mat<T> layernorm_backward(const Mat<T>& dy, const LnCache<T>& c, CMapMat<T> g, MapMat<T> dg,
                          MapMat<T> db) {
  dg.row(0).array() += (dy.array() * c.xhat.array()).colwise().sum();
  db.row(0).array() += dy.array().colwise().sum();
  Mat<T> gdy = (dy.array().rowwise() * g.row(0).array()).matrix();
  const Vec<T> m1 = gdy.rowwise().mean();
  const Vec<T> m2 = (gdy.array() * c.xhat.array()).rowwise().mean().matrix();
  Mat<T> dx = (((gdy.colwise() - m1).array() - (c.xhat.array().colwise() * m2.array()))
                   .colwise() *
               c.rstd)
                  .matrix();
  return dx;
}

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
  return cdf + x * pdf;
}

// Softmax over the causal prefix of each row; entries beyond the diagonal
// are forced to exact zero so the same matrix drives the backward pass.
template <typename T>
void causal_softmax_inplace(Mat<T>& s) {
  const Eigen::Index n = s.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = s.row(i).head(i + 1);
    const T m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
    if (i + 1 < s.cols()) s.row(i).tail(s.cols() - i - 1).setZero();
  }
}

}  // namespace detail

// ------------------------------ forward pass --------------------------------

// Runs the trunk over a packed batch and fills the cache. Final per-row
// features are in cache.lnf.out.
template <typename T>
void forward_trunk(const Model<T>& model, const Packed& packed, ForwardCache<T>& cache) {
  const ModelArch& arch = model.arch;
  const auto& p = model.params;
  const int d = arch.model_dim;
  const int dh = arch.head_dim();
  const int rows = packed.rows();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  cache.packed = packed;
  cache.layers.assign(static_cast<std::size_t>(arch.layers), LayerCache<T>{});

  Mat<T> x(rows, d);
  {
    auto tok = p.get(Params<T>::kTokEmb);
    auto pos = p.get(Params<T>::kPosEmb);
    for (int t = 0; t < rows; ++t) {
      const int id = packed.ids[static_cast<std::size_t>(t)];
      if (id < 0 || id >= arch.vocab_size) throw std::out_of_range("forward: token id out of range");
      x.row(t) = tok.row(id) + pos.row(packed.pos[static_cast<std::size_t>(t)]);
    }
  }

  for (int l = 0; l < arch.layers; ++l) {
    LayerCache<T>& lc = cache.layers[static_cast<std::size_t>(l)];
    const int base = p.layer_base(l);

    detail::layernorm_forward(x, p.get(base + Params<T>::kLn1G), p.get(base + Params<T>::kLn1B),
                              lc.ln1);
    lc.qkv.noalias() = lc.ln1.out * p.get(base + Params<T>::kWqkv);
    lc.qkv.array().rowwise() += p.get(base + Params<T>::kBqkv).row(0).array();

    lc.att_concat.resize(rows, d);
    lc.probs.assign(static_cast<std::size_t>(packed.num_seqs() * arch.heads), Mat<T>());
    for (int s = 0; s < packed.num_seqs(); ++s) {
      const int r0 = packed.offsets[static_cast<std::size_t>(s)];
      const int len = packed.seq_len(s);
      if (len == 0) continue;
      for (int h = 0; h < arch.heads; ++h) {
        auto q = lc.qkv.block(r0, h * dh, len, dh);
        auto k = lc.qkv.block(r0, d + h * dh, len, dh);
        auto v = lc.qkv.block(r0, 2 * d + h * dh, len, dh);
        Mat<T>& prob = lc.probs[static_cast<std::size_t>(s * arch.heads + h)];
        prob.noalias() = q * k.transpose() * scale;
        detail::causal_softmax_inplace(prob);
        lc.att_concat.block(r0, h * dh, len, dh).noalias() = prob * v;
      }
    }

    x.noalias() += lc.att_concat * p.get(base + Params<T>::kWo);
    x.array().rowwise() += p.get(base + Params<T>::kBo).row(0).array();

    detail::layernorm_forward(x, p.get(base + Params<T>::kLn2G), p.get(base + Params<T>::kLn2B),
                              lc.ln2);
    lc.fc_pre.noalias() = lc.ln2.out * p.get(base + Params<T>::kWfc);
    lc.fc_pre.array().rowwise() += p.get(base + Params<T>::kBfc).row(0).array();
    lc.fc_act = lc.fc_pre.unaryExpr([](T v) { return detail::gelu_scalar(v); });
    x.noalias() += lc.fc_act * p.get(base + Params<T>::kWproj);
    x.array().rowwise() += p.get(base + Params<T>::kBproj).row(0).array();
  }

  detail::layernorm_forward(x, p.get(p.lnf_g()), p.get(p.lnf_b()), cache.lnf);
}

// Logits for a subset of rows (row indices into the packed batch).
template <typename T>
Mat<T> logits_for_rows(const Model<T>& model, const ForwardCache<T>& cache,
                       const std::vector<int>& rows) {
  const auto& p = model.params;
  Mat<T> feats(static_cast<Eigen::Index>(rows.size()), model.arch.model_dim);
  for (std::size_t i = 0; i < rows.size(); ++i) feats.row(static_cast<Eigen::Index>(i)) =
      cache.lnf.out.row(rows[i]);
  Mat<T> logits;
  logits.noalias() = feats * p.get(p.lm_head());
  return logits;
}

// Spec-level forward: one sequence in, full (len x vocab) logits out.
template <typename T>
Mat<T> forward(const Model<T>& model, const std::vector<int>& ids) {
  if (static_cast<int>(ids.size()) > model.arch.context_len)
    throw std::invalid_argument("forward: sequence exceeds context_len");
  if (ids.empty()) return Mat<T>(0, model.arch.vocab_size);
  ForwardCache<T> cache;
  forward_trunk(model, pack_sequences({ids}, model.arch.context_len), cache);
  const auto& p = model.params;
  Mat<T> logits;
  logits.noalias() = cache.lnf.out * p.get(p.lm_head());
  return logits;
}

// ------------------------------ backward pass -------------------------------

// Gradient of an objective whose per-row logit gradients are given for a
// subset of rows. Accumulates into `grads` (callers zero it as needed).
template <typename T>
void backward_trunk(const Model<T>& model, const ForwardCache<T>& cache,
                    const std::vector<int>& loss_rows, const Mat<T>& dlogits, Params<T>& grads) {
  const ModelArch& arch = model.arch;
  const auto& p = model.params;
  const Packed& packed = cache.packed;
  const int d = arch.model_dim;
  const int dh = arch.head_dim();
  const int rows = packed.rows();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  if (dlogits.rows() != static_cast<Eigen::Index>(loss_rows.size()) ||
      dlogits.cols() != arch.vocab_size)
    throw std::invalid_argument("backward: dlogits shape mismatch");

  // lm_head and final layernorm
  Mat<T> dfeat = Mat<T>::Zero(rows, d);
  {
    Mat<T> feats(static_cast<Eigen::Index>(loss_rows.size()), d);
    for (std::size_t i = 0; i < loss_rows.size(); ++i)
      feats.row(static_cast<Eigen::Index>(i)) = cache.lnf.out.row(loss_rows[i]);
    grads.get(grads.lm_head()).noalias() += feats.transpose() * dlogits;
    Mat<T> dsub;
    dsub.noalias() = dlogits * p.get(p.lm_head()).transpose();
    for (std::size_t i = 0; i < loss_rows.size(); ++i)
      dfeat.row(loss_rows[i]) += dsub.row(static_cast<Eigen::Index>(i));
  }
  Mat<T> dx = detail::layernorm_backward(dfeat, cache.lnf, p.get(p.lnf_g()),
                                         grads.get(grads.lnf_g()), grads.get(grads.lnf_b()));

  for (int l = arch.layers - 1; l >= 0; --l) {
    const LayerCache<T>& lc = cache.layers[static_cast<std::size_t>(l)];
    const int base = p.layer_base(l);

    // MLP block
    {
      const Mat<T>& dm = dx;  // gradient at the block output add
      grads.get(base + Params<T>::kBproj).row(0).array() += dm.array().colwise().sum();
      grads.get(base + Params<T>::kWproj).noalias() += lc.fc_act.transpose() * dm;
      Mat<T> dact;
      dact.noalias() = dm * p.get(base + Params<T>::kWproj).transpose();
      Mat<T> dpre =
          (dact.array() *
           lc.fc_pre.unaryExpr([](T v) { return detail::gelu_grad_scalar(v); }).array())
              .matrix();
      grads.get(base + Params<T>::kBfc).row(0).array() += dpre.array().colwise().sum();
      grads.get(base + Params<T>::kWfc).noalias() += lc.ln2.out.transpose() * dpre;
      Mat<T> dln2;
      dln2.noalias() = dpre * p.get(base + Params<T>::kWfc).transpose();
      dx += detail::layernorm_backward(dln2, lc.ln2, p.get(base + Params<T>::kLn2G),
                                       grads.get(base + Params<T>::kLn2G),
                                       grads.get(base + Params<T>::kLn2B));
    }

    // Attention block
    {
      const Mat<T>& do_ = dx;
      grads.get(base + Params<T>::kBo).row(0).array() += do_.array().colwise().sum();
      grads.get(base + Params<T>::kWo).noalias() += lc.att_concat.transpose() * do_;
      Mat<T> datt;
      datt.noalias() = do_ * p.get(base + Params<T>::kWo).transpose();

      Mat<T> dqkv = Mat<T>::Zero(rows, 3 * d);
      for (int s = 0; s < packed.num_seqs(); ++s) {
        const int r0 = packed.offsets[static_cast<std::size_t>(s)];
        const int len = packed.seq_len(s);
        if (len == 0) continue;
        for (int h = 0; h < arch.heads; ++h) {
          auto q = lc.qkv.block(r0, h * dh, len, dh);
          auto k = lc.qkv.block(r0, d + h * dh, len, dh);
          auto v = lc.qkv.block(r0, 2 * d + h * dh, len, dh);
          const Mat<T>& prob = lc.probs[static_cast<std::size_t>(s * arch.heads + h)];
          auto dout = datt.block(r0, h * dh, len, dh);

          Mat<T> dprob;
          dprob.noalias() = dout * v.transpose();
          dqkv.block(r0, 2 * d + h * dh, len, dh).noalias() = prob.transpose() * dout;

          // softmax backward; prob rows are zero past the diagonal, so the
          // full-row expression is exact for the causal mask.
          const Vec<T> dot = (dprob.array() * prob.array()).rowwise().sum().matrix();
          Mat<T> dscore = (prob.array() * (dprob.colwise() - dot).array()).matrix();
          dqkv.block(r0, h * dh, len, dh).noalias() = dscore * k * scale;
          dqkv.block(r0, d + h * dh, len, dh).noalias() = dscore.transpose() * q * scale;
        }
      }
      grads.get(base + Params<T>::kBqkv).row(0).array() += dqkv.array().colwise().sum();
      grads.get(base + Params<T>::kWqkv).noalias() += lc.ln1.out.transpose() * dqkv;
      Mat<T> dln1;
      dln1.noalias() = dqkv * p.get(base + Params<T>::kWqkv).transpose();
      dx += detail::layernorm_backward(dln1, lc.ln1, p.get(base + Params<T>::kLn1G),
                                       grads.get(base + Params<T>::kLn1G),
                                       grads.get(base + Params<T>::kLn1B));
    }
  }

  // Embedding scatter
  auto dtok = grads.get(Params<T>::kTokEmb);
  auto dpos = grads.get(Params<T>::kPosEmb);
  for (int t = 0; t < rows; ++t) {
    dtok.row(packed.ids[static_cast<std::size_t>(t)]) += dx.row(t);
    dpos.row(packed.pos[static_cast<std::size_t>(t)]) += dx.row(t);
  }
}

// -------------------------------- optimizer ---------------------------------

enum class OptAlgo { sgd, adam };

template <typename T>
struct Optimizer {
  OptAlgo algo = OptAlgo::adam;
  T lr = T(5e-5);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  long step_count = 0;
  std::vector<T> m;  // first moment (adam only)
  std::vector<T> v;  // second moment (adam only)

  Optimizer() = default;
  Optimizer(OptAlgo a, T learning_rate) : algo(a), lr(learning_rate) {
    if (!(lr >= T(0))) throw std::invalid_argument("optimizer: learning rate must be >= 0");
  }
};

struct StepInfo {
  double grad_norm = 0.0;
  bool skipped = false;  // true when the gradient was non-finite
};

template <typename T>
StepInfo apply_step(Params<T>& params, Optimizer<T>& opt, const Params<T>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("apply_step: size mismatch");
  double sq = 0.0;
  for (const T& g : grads.flat) sq += static_cast<double>(g) * static_cast<double>(g);
  StepInfo info;
  info.grad_norm = std::sqrt(sq);
  if (!std::isfinite(info.grad_norm)) {
    info.skipped = true;
    return info;
  }
  const std::size_t n = params.size();
  if (opt.algo == OptAlgo::sgd) {
    for (std::size_t i = 0; i < n; ++i) params.flat[i] -= opt.lr * grads.flat[i];
    ++opt.step_count;
    return info;
  }
  if (opt.m.size() != n) {
    opt.m.assign(n, T(0));
    opt.v.assign(n, T(0));
  }
  ++opt.step_count;
  const T b1 = opt.beta1, b2 = opt.beta2;
  const T c1 = T(1) - std::pow(b1, static_cast<T>(opt.step_count));
  const T c2 = T(1) - std::pow(b2, static_cast<T>(opt.step_count));
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grads.flat[i];
    opt.m[i] = b1 * opt.m[i] + (T(1) - b1) * g;
    opt.v[i] = b2 * opt.v[i] + (T(1) - b2) * g * g;
    const T mhat = opt.m[i] / c1;
    const T vhat = opt.v[i] / c2;
    params.flat[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
  }
  return info;
}

// Spec-level op: per-sequence logit gradients in, one optimizer step out.
template <typename T>
struct SeqGrad {
  std::vector<int> ids;
  Mat<T> dlogits;  // len x vocab
};

template <typename T>
StepInfo backward_and_step(Model<T>& model, Optimizer<T>& opt, const std::vector<SeqGrad<T>>& seqs) {
  std::vector<std::vector<int>> id_lists;
  id_lists.reserve(seqs.size());
  for (const auto& s : seqs) {
    if (s.dlogits.rows() != static_cast<Eigen::Index>(s.ids.size()) ||
        s.dlogits.cols() != model.arch.vocab_size)
      throw std::invalid_argument("backward_and_step: dlogits shape mismatch");
    id_lists.push_back(s.ids);
  }
  Packed packed = pack_sequences(id_lists, model.arch.context_len);
  ForwardCache<T> cache;
  forward_trunk(model, packed, cache);
  std::vector<int> loss_rows(static_cast<std::size_t>(packed.rows()));
  for (int t = 0; t < packed.rows(); ++t) loss_rows[static_cast<std::size_t>(t)] = t;
  Mat<T> dlogits(packed.rows(), model.arch.vocab_size);
  {
    int r = 0;
    for (const auto& s : seqs) {
      for (Eigen::Index i = 0; i < s.dlogits.rows(); ++i) dlogits.row(r++) = s.dlogits.row(i);
    }
  }
  Params<T> grads(model.arch);
  backward_trunk(model, cache, loss_rows, dlogits, grads);
  return apply_step(model.params, opt, grads);
}

// ------------------------------ incremental decode --------------------------

// Per-layer key/value memory for one sequence; supports feeding one token at
// a time with positions assigned in arrival order.
template <typename T>
class KVCache {
 public:
  explicit KVCache(const ModelArch& arch) : arch_(arch) {
    k_.assign(static_cast<std::size_t>(arch.layers), Mat<T>(arch.context_len, arch.model_dim));
    v_.assign(static_cast<std::size_t>(arch.layers), Mat<T>(arch.context_len, arch.model_dim));
  }

  int length() const { return len_; }
  void reset() { len_ = 0; }

  Mat<T>& k(int l) { return k_[static_cast<std::size_t>(l)]; }
  Mat<T>& v(int l) { return v_[static_cast<std::size_t>(l)]; }
  const ModelArch& arch() const { return arch_; }

  void advance() { ++len_; }

 private:
  ModelArch arch_;
  std::vector<Mat<T>> k_, v_;
  int len_ = 0;
};

// Feeds one token; returns the next-token logits row. Throws once the
// context window is exhausted.
template <typename T>
Vec<T> decode_step(const Model<T>& model, KVCache<T>& cache, int token_id) {
  const ModelArch& arch = model.arch;
  const auto& p = model.params;
  const int d = arch.model_dim;
  const int dh = arch.head_dim();
  const int t = cache.length();
  if (t >= arch.context_len) throw std::runtime_error("decode_step: context window exhausted");
  if (token_id < 0 || token_id >= arch.vocab_size)
    throw std::out_of_range("decode_step: token id out of range");
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> x(1, d);
  x.row(0) = p.get(Params<T>::kTokEmb).row(token_id) + p.get(Params<T>::kPosEmb).row(t);

  for (int l = 0; l < arch.layers; ++l) {
    const int base = p.layer_base(l);
    LnCache<T> ln1;
    detail::layernorm_forward(x, p.get(base + Params<T>::kLn1G), p.get(base + Params<T>::kLn1B),
                              ln1);
    Mat<T> qkv;
    qkv.noalias() = ln1.out * p.get(base + Params<T>::kWqkv);
    qkv.array().rowwise() += p.get(base + Params<T>::kBqkv).row(0).array();
    cache.k(l).row(t) = qkv.block(0, d, 1, d);
    cache.v(l).row(t) = qkv.block(0, 2 * d, 1, d);

    Mat<T> att(1, d);
    for (int h = 0; h < arch.heads; ++h) {
      auto q = qkv.block(0, h * dh, 1, dh);
      auto keys = cache.k(l).block(0, h * dh, t + 1, dh);
      auto vals = cache.v(l).block(0, h * dh, t + 1, dh);
      Vec<T> score = keys * q.transpose() * scale;
      softmax_inplace(score);
      att.block(0, h * dh, 1, dh).noalias() = score.transpose() * vals;
    }
    x.noalias() += att * p.get(base + Params<T>::kWo);
    x.array().rowwise() += p.get(base + Params<T>::kBo).row(0).array();

    LnCache<T> ln2;
    detail::layernorm_forward(x, p.get(base + Params<T>::kLn2G), p.get(base + Params<T>::kLn2B),
                              ln2);
    Mat<T> pre;
    pre.noalias() = ln2.out * p.get(base + Params<T>::kWfc);
    pre.array().rowwise() += p.get(base + Params<T>::kBfc).row(0).array();
    Mat<T> act = pre.unaryExpr([](T vv) { return detail::gelu_scalar(vv); });
    x.noalias() += act * p.get(base + Params<T>::kWproj);
    x.array().rowwise() += p.get(base + Params<T>::kBproj).row(0).array();
  }

  LnCache<T> lnf;
  detail::layernorm_forward(x, p.get(p.lnf_g()), p.get(p.lnf_b()), lnf);
  Vec<T> logits = (lnf.out * p.get(p.lm_head())).row(0).transpose();
  cache.advance();
  return logits;
}

// --------------------------------- checkpoints ------------------------------

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = model.format_version;
  header["dtype"] = dtype_name<T>();
  header["arch"] = {{"layers", model.arch.layers},
                    {"model_dim", model.arch.model_dim},
                    {"heads", model.arch.heads},
                    {"context_len", model.arch.context_len},
                    {"vocab_size", model.arch.vocab_size}};
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : model.vocab.units) units.push_back(to_hex(u));
  header["vocab_units_hex"] = std::move(units);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& info : model.params.manifest())
    manifest.push_back({{"name", info.name},
                        {"rows", info.rows},
                        {"cols", info.cols},
                        {"offset", info.offset}});
  header["params"] = std::move(manifest);
  const std::size_t payload_bytes = model.params.size() * sizeof(T);
  header["payload_bytes"] = payload_bytes;
  header["payload_fnv1a64"] = hex_u64(fnv1a64(model.params.flat.data(), payload_bytes));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    const std::string line = header.dump();
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.put('\n');
    out.write(reinterpret_cast<const char*>(model.params.flat.data()),
              static_cast<std::streamsize>(payload_bytes));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string checkpoint_dtype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint: missing header in " + path);
  const auto header = nlohmann::json::parse(line);
  return header.at("dtype").get<std::string>();
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("load_checkpoint: missing header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw std::runtime_error("load_checkpoint: corrupt header: " + std::string(e.what()));
  }
  const int version = header.at("format_version").get<int>();
  if (version != kCheckpointFormatVersion)
    throw std::runtime_error("load_checkpoint: format_version " + std::to_string(version) +
                             " unsupported (expected " +
                             std::to_string(kCheckpointFormatVersion) + ")");
  const std::string dtype = header.at("dtype").get<std::string>();
  if (dtype != dtype_name<T>())
    throw std::runtime_error("load_checkpoint: dtype " + dtype + " does not match requested " +
                             dtype_name<T>());

  Model<T> model;
  const auto& arch_json = header.at("arch");
  model.arch.layers = arch_json.at("layers").get<int>();
  model.arch.model_dim = arch_json.at("model_dim").get<int>();
  model.arch.heads = arch_json.at("heads").get<int>();
  model.arch.context_len = arch_json.at("context_len").get<int>();
  model.arch.vocab_size = arch_json.at("vocab_size").get<int>();
  model.arch.validate();
  model.format_version = version;

  for (const auto& hexed : header.at("vocab_units_hex"))
    model.vocab.units.push_back(from_hex(hexed.get<std::string>()));
  if (model.vocab.size() != model.arch.vocab_size)
    throw std::runtime_error("load_checkpoint: vocab size disagrees with arch");
  model.vocab.rebuild_index();

  model.params = Params<T>(model.arch);
  const auto& manifest = model.params.manifest();
  const auto& stored = header.at("params");
  if (stored.size() != manifest.size())
    throw std::runtime_error("load_checkpoint: parameter manifest mismatch");
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& entry = stored[i];
    if (entry.at("name").get<std::string>() != manifest[i].name ||
        entry.at("rows").get<int>() != manifest[i].rows ||
        entry.at("cols").get<int>() != manifest[i].cols ||
        entry.at("offset").get<std::size_t>() != manifest[i].offset)
      throw std::runtime_error("load_checkpoint: parameter manifest mismatch at " +
                               manifest[i].name);
  }

  const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
  if (payload_bytes != model.params.size() * sizeof(T))
    throw std::runtime_error("load_checkpoint: payload size disagrees with arch");
  in.read(reinterpret_cast<char*>(model.params.flat.data()),
          static_cast<std::streamsize>(payload_bytes));
  if (static_cast<std::size_t>(in.gcount()) != payload_bytes)
    throw std::runtime_error("load_checkpoint: truncated payload");
  const std::string checksum = hex_u64(fnv1a64(model.params.flat.data(), payload_bytes));
  if (checksum != header.at("payload_fnv1a64").get<std::string>())
    throw std::runtime_error("load_checkpoint: payload checksum mismatch");
  return model;
}

// ------------------------------ gradient checking ---------------------------

// Central-difference comparison on a random coordinate subsample. A
// fourth-order central stencil at the given epsilon keeps truncation error
// far below the 1e-6 gate; the denominator floor makes near-zero gradients
// compare absolutely rather than relatively.
// loss_fn must evaluate the scalar objective against the CURRENT parameters
// of `model` each time it is called.
template <typename T, typename LossFn>
double finite_diff_max_rel_error(Model<T>& model, LossFn&& loss_fn, const Params<T>& analytic,
                                 int num_coords, double epsilon, std::uint64_t seed) {
  static_assert(std::is_same_v<T, double>, "gradient checks require double precision");
  Rng rng = derive_rng(seed, 0xfdc);
  const std::size_t n = model.params.size();
  const int coords =
      static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(num_coords), n));
  double worst = 0.0;
  for (int c = 0; c < coords; ++c) {
    const std::size_t i = static_cast<std::size_t>(uniform_below(rng, n));
    const T saved = model.params.flat[i];
    auto eval_at = [&](double delta) {
      model.params.flat[i] = saved + static_cast<T>(delta);
      return loss_fn();
    };
    const double f1 = eval_at(epsilon);
    const double f2 = eval_at(-epsilon);
    const double f3 = eval_at(2.0 * epsilon);
    const double f4 = eval_at(-2.0 * epsilon);
    model.params.flat[i] = saved;
    const double fd = (8.0 * (f1 - f2) - (f3 - f4)) / (12.0 * epsilon);
    const double an = static_cast<double>(analytic.flat[i]);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-2});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

}  // namespace pexplore
