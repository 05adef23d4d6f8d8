#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "latfuse/autodiff.hpp"
#include "latfuse/layers.hpp"
#include "latfuse/tensor.hpp"

namespace latfuse {

/// Structural switches of one latent-fusion stage. `latent_n` is the number
/// of latent nodes per modality and must stay well below the feature count
/// (enforced as n <= max(1, N / 4) where the params meet data).
struct EcmiConfig {
  std::size_t channels = 16;
  std::size_t latent_n = 4;
  bool share_value_projection = true;   // single W for both modalities
  bool tie_decode_affinity = false;     // decode reuses the encode affinities
  bool fuse_norm = true;                // row normalization inside the fuse head
  bool modality_gate_inputs = false;    // gates read their own modality instead
                                        // of the shared sum
  double norm_eps = 1e-5;
};

/// All learnable parameters of one fusion stage.
template <typename T>
struct EcmiParamsT {
  MlpParamsT<T> siamese;       // shared encoder applied to both modalities
  T theta_image;               // n x C encode affinity vectors, image side
  T theta_voxel;               // n x C encode affinity vectors, voxel side
  T w_value;                   // C x C value projection
  T w_value_voxel;             // used only when share_value_projection == false
  T latent_proj;               // C x C projection behind the latent adjacency
  T theta_dec_image;           // n x C decode affinity vectors
  T theta_dec_voxel;
  MlpParamsT<T> atten_image;   // gate MLPs: linear, ReLU, linear, Sigmoid
  MlpParamsT<T> atten_voxel;
  LinearParamsT<T> fuse;       // fuse head linear layer

  template <typename F>
  void visit(F&& f) const {
    siamese.visit(f);
    f(theta_image);
    f(theta_voxel);
    f(w_value);
    f(w_value_voxel);
    f(latent_proj);
    f(theta_dec_image);
    f(theta_dec_voxel);
    atten_image.visit(f);
    atten_voxel.visit(f);
    fuse.visit(f);
  }
  template <typename G>
  static EcmiParamsT make(G&& g) {
    EcmiParamsT p;
    p.siamese = MlpParamsT<T>::make(g);
    p.theta_image = g();
    p.theta_voxel = g();
    p.w_value = g();
    p.w_value_voxel = g();
    p.latent_proj = g();
    p.theta_dec_image = g();
    p.theta_dec_voxel = g();
    p.atten_image = MlpParamsT<T>::make(g);
    p.atten_voxel = MlpParamsT<T>::make(g);
    p.fuse = LinearParamsT<T>::make(g);
    return p;
  }
};

template <typename S>
EcmiParamsT<Tensor<S>> init_ecmi_params(Rng& rng, const EcmiConfig& cfg) {
  if (cfg.latent_n < 1) throw ContractError("ecmi: latent_n must be >= 1");
  const std::size_t c = cfg.channels;
  const std::size_t n = cfg.latent_n;
  const S k = static_cast<S>(1.0 / std::sqrt(static_cast<double>(c)));
  EcmiParamsT<Tensor<S>> p;
  p.siamese = init_mlp<S>(rng, c, c, c);
  p.theta_image = Tensor<S>::uniform({n, c}, rng, -k, k);
  p.theta_voxel = Tensor<S>::uniform({n, c}, rng, -k, k);
  p.w_value = Tensor<S>::uniform({c, c}, rng, -k, k);
  p.w_value_voxel = Tensor<S>::uniform({c, c}, rng, -k, k);
  p.latent_proj = Tensor<S>::uniform({c, c}, rng, -k, k);
  p.theta_dec_image = Tensor<S>::uniform({n, c}, rng, -k, k);
  p.theta_dec_voxel = Tensor<S>::uniform({n, c}, rng, -k, k);
  p.atten_image = init_mlp<S>(rng, c, c, c);
  p.atten_voxel = init_mlp<S>(rng, c, c, c);
  p.fuse = init_linear<S>(rng, c, c);
  return p;
}

namespace detail {

template <typename S>
void check_feature_pair(const Tensor<S>& f, const Tensor<S>& v, const char* op) {
  f.require_ndim(2);
  v.require_ndim(2);
  if (!f.same_shape(v))
    throw ShapeError(std::string(op) + ": modality shapes differ, " + f.shape_string() +
                     " vs " + v.shape_string());
}

inline void check_latent_budget(std::size_t n_rows, std::size_t latent_n) {
  const std::size_t cap = std::max<std::size_t>(1, n_rows / 4);
  if (latent_n < 1 || latent_n > cap)
    throw ContractError("ecmi: latent_n " + std::to_string(latent_n) +
                        " outside [1, max(1, N/4)] for N = " + std::to_string(n_rows));
}

/// [a_0, b_0, a_1, b_1, ...] row order for two n-row blocks stacked as a;b.
inline std::vector<std::size_t> interleave_rows(std::size_t n) {
  std::vector<std::size_t> idx(2 * n);
  for (std::size_t k = 0; k < n; ++k) {
    idx[2 * k] = k;
    idx[2 * k + 1] = n + k;
  }
  return idx;
}

inline std::vector<std::size_t> stride2_rows(std::size_t n, std::size_t offset) {
  std::vector<std::size_t> idx(n);
  for (std::size_t k = 0; k < n; ++k) idx[k] = 2 * k + offset;
  return idx;
}

}  // namespace detail

/// Both modalities through one weight-shared 2-layer MLP (linear, ReLU,
/// linear). Swapping the inputs swaps the outputs exactly.
template <typename S>
std::pair<Var, Var> siamese_encode(Tape<S>& tape, Var f_image, Var v_voxel,
                                   const MlpParamsT<Var>& eps) {
  detail::check_feature_pair(tape.value(f_image), tape.value(v_voxel), "siamese_encode");
  return {apply_mlp_relu(tape, f_image, eps), apply_mlp_relu(tape, v_voxel, eps)};
}

/// Affinity between feature rows and latent nodes: row-stochastic softmax
/// over the latent index of the dot products x_i . theta_k.
template <typename S>
Var affinity(Tape<S>& tape, Var x, Var theta) {
  const Tensor<S>& xv = tape.value(x);
  const Tensor<S>& tv = tape.value(theta);
  if (xv.cols() != tv.cols())
    throw ShapeError("affinity: channel mismatch " + xv.shape_string() + " vs " +
                     tv.shape_string());
  Var logits = matmul(tape, x, transpose(tape, theta));  // N x n
  return softmax(tape, logits, 1);
}

/// Message passing from feature rows into latent nodes:
/// Z = affinity(X)^T (X W), an n x C summary built in O(N c n).
template <typename S>
Var encode_to_latent(Tape<S>& tape, Var x, Var theta, Var w) {
  Var psi = affinity(tape, x, theta);
  Var values = matmul(tape, x, w);
  return matmul(tape, transpose(tape, psi), values);
}

/// Message passing across the fully connected cross-modal latent subgraph:
/// data-dependent adjacency A = rowsoftmax((Z P)(Z P)^T / sqrt(C)) applied to
/// the 2n latent rows. Cost O(n^2 c), independent of N.
template <typename S>
Var latent_graph_propagate(Tape<S>& tape, Var z_cross, Var latent_proj) {
  const Tensor<S>& z = tape.value(z_cross);
  z.require_ndim(2);
  const S inv_sqrt_c = static_cast<S>(1.0 / std::sqrt(static_cast<double>(z.cols())));
  Var projected = matmul(tape, z_cross, latent_proj);
  Var scaled = scale(tape, projected, inv_sqrt_c);
  Var adjacency = softmax(tape, matmul(tape, scaled, transpose(tape, projected)), 1);
  return matmul(tape, adjacency, z_cross);
}

/// Messages from refined latent nodes back to the feature rows, passed
/// through ReLU and pulsed by the input as a residual:
/// X~ = relu(affinity(X, theta_dec) Z_ref) + X.
template <typename S>
Var decode_from_latent(Tape<S>& tape, Var x, Var z_refined, Var theta_dec) {
  Var psi = affinity(tape, x, theta_dec);
  Var messages = relu(tape, matmul(tape, psi, z_refined));
  return add(tape, x, messages);
}

/// Efficient cross-modal interaction over both modalities: encode each side
/// into n latent nodes, interleave them into the 2n-node cross-modal block,
/// propagate over the latent graph, split, and decode each side with its
/// residual. Total cost O(N c n + n^2 c).
template <typename S>
std::pair<Var, Var> ecmi(Tape<S>& tape, Var f_image, Var v_voxel,
                         const EcmiParamsT<Var>& params, const EcmiConfig& cfg) {
  const Tensor<S>& fv = tape.value(f_image);
  detail::check_feature_pair(fv, tape.value(v_voxel), "ecmi");
  detail::check_latent_budget(fv.rows(), cfg.latent_n);
  const std::size_t n = cfg.latent_n;

  Var w_image = params.w_value;
  Var w_voxel = cfg.share_value_projection ? params.w_value : params.w_value_voxel;
  Var z_image = encode_to_latent(tape, f_image, params.theta_image, w_image);
  Var z_voxel = encode_to_latent(tape, v_voxel, params.theta_voxel, w_voxel);

  Var stacked = concat_rows(tape, z_image, z_voxel);
  Var z_cross = gather_rows(tape, stacked, detail::interleave_rows(n));
  Var z_refined = latent_graph_propagate(tape, z_cross, params.latent_proj);
  Var z_ref_image = gather_rows(tape, z_refined, detail::stride2_rows(n, 0));
  Var z_ref_voxel = gather_rows(tape, z_refined, detail::stride2_rows(n, 1));

  Var theta_dec_i = cfg.tie_decode_affinity ? params.theta_image : params.theta_dec_image;
  Var theta_dec_v = cfg.tie_decode_affinity ? params.theta_voxel : params.theta_dec_voxel;
  return {decode_from_latent(tape, f_image, z_ref_image, theta_dec_i),
          decode_from_latent(tape, v_voxel, z_ref_voxel, theta_dec_v)};
}

/// Attention-gated fusion head. Both gate MLPs consume the same modality sum
/// (the default wiring); the fuse layer is linear + row normalization + ReLU.
template <typename S>
Var fuse_head(Tape<S>& tape, Var f_image, Var v_voxel, Var f_tilde, Var v_tilde,
              const EcmiParamsT<Var>& params, const EcmiConfig& cfg) {
  detail::check_feature_pair(tape.value(f_tilde), tape.value(v_tilde), "fuse_head");
  Var gate_in_image, gate_in_voxel;
  if (cfg.modality_gate_inputs) {
    gate_in_image = f_image;
    gate_in_voxel = v_voxel;
  } else {
    gate_in_image = gate_in_voxel = add(tape, f_image, v_voxel);
  }
  Var gate_image = apply_mlp_relu_sigmoid(tape, gate_in_image, params.atten_image);
  Var gate_voxel = apply_mlp_relu_sigmoid(tape, gate_in_voxel, params.atten_voxel);
  Var mixed = add(tape, mul(tape, gate_image, f_tilde), mul(tape, gate_voxel, v_tilde));
  Var fused = apply_linear(tape, mixed, params.fuse);
  if (cfg.fuse_norm) fused = row_norm(tape, fused, static_cast<S>(cfg.norm_eps));
  return relu(tape, fused);
}

/// Full fusion stage: siamese encoding, cross-modal interaction, gated fuse.
template <typename S>
Var fuse_stage(Tape<S>& tape, Var f_image, Var v_voxel, const EcmiParamsT<Var>& params,
               const EcmiConfig& cfg) {
  auto [f_s, v_s] = siamese_encode(tape, f_image, v_voxel, params.siamese);
  auto [f_t, v_t] = ecmi(tape, f_s, v_s, params, cfg);
  return fuse_head(tape, f_s, v_s, f_t, v_t, params, cfg);
}

// ---------------------------------------------------------------------------
// Dense reference. Materializes the N x N cross-modal operators the latent
// factorization implies and applies them directly. Independent loop-level
// implementation kept free of the tape ops so it can serve as an oracle.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDenseOracleMaxRows = 256;

namespace detail {

template <typename S>
std::vector<std::vector<S>> dense_affinity(const Tensor<S>& x, const Tensor<S>& theta) {
  const std::size_t n_rows = x.rows(), n_lat = theta.rows(), c = x.cols();
  std::vector<std::vector<S>> psi(n_rows, std::vector<S>(n_lat));
  for (std::size_t i = 0; i < n_rows; ++i) {
    S mx = S(0);
    for (std::size_t k = 0; k < n_lat; ++k) {
      S d = S(0);
      for (std::size_t j = 0; j < c; ++j) d += x.at(i, j) * theta.at(k, j);
      psi[i][k] = d;
      mx = k == 0 ? d : std::max(mx, d);
    }
    S total = S(0);
    for (std::size_t k = 0; k < n_lat; ++k) {
      psi[i][k] = std::exp(psi[i][k] - mx);
      total += psi[i][k];
    }
    for (std::size_t k = 0; k < n_lat; ++k) psi[i][k] /= total;
  }
  return psi;
}

}  // namespace detail

/// Reference implementation of ecmi that explicitly builds the implied dense
/// N x N operators (hence the N <= 256 guard). Same math, different route.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> dense_oracle_ecmi(const Tensor<S>& f_image,
                                                  const Tensor<S>& v_voxel,
                                                  const EcmiParamsT<Tensor<S>>& params,
                                                  const EcmiConfig& cfg) {
  detail::check_feature_pair(f_image, v_voxel, "dense_oracle_ecmi");
  const std::size_t n_rows = f_image.rows();
  const std::size_t c = f_image.cols();
  const std::size_t n = cfg.latent_n;
  if (n_rows > kDenseOracleMaxRows)
    throw ContractError("dense_oracle_ecmi: N > " + std::to_string(kDenseOracleMaxRows));
  detail::check_latent_budget(n_rows, n);

  const Tensor<S>& w_image = params.w_value;
  const Tensor<S>& w_voxel =
      cfg.share_value_projection ? params.w_value : params.w_value_voxel;
  const Tensor<S>& theta_dec_i =
      cfg.tie_decode_affinity ? params.theta_image : params.theta_dec_image;
  const Tensor<S>& theta_dec_v =
      cfg.tie_decode_affinity ? params.theta_voxel : params.theta_dec_voxel;

  // Value-projected inputs: xw[i][j] = (W^T x_i)_j.
  auto project = [c](const Tensor<S>& x, const Tensor<S>& w) {
    Tensor<S> out({x.rows(), x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) {
        S acc = S(0);
        for (std::size_t k = 0; k < c; ++k) acc += x.at(i, k) * w.at(k, j);
        out.at(i, j) = acc;
      }
    return out;
  };
  const Tensor<S> fw = project(f_image, w_image);
  const Tensor<S> vw = project(v_voxel, w_voxel);

  const auto psi_enc_i = detail::dense_affinity(f_image, params.theta_image);
  const auto psi_enc_v = detail::dense_affinity(v_voxel, params.theta_voxel);

  // Latent nodes, interleaved image/voxel: row 2k is z^I_k, row 2k+1 is z^V_k.
  Tensor<S> z_cross({2 * n, c});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < c; ++j) {
      S zi = S(0), zv = S(0);
      for (std::size_t i = 0; i < n_rows; ++i) {
        zi += psi_enc_i[i][k] * fw.at(i, j);
        zv += psi_enc_v[i][k] * vw.at(i, j);
      }
      z_cross.at(2 * k, j) = zi;
      z_cross.at(2 * k + 1, j) = zv;
    }

  // Latent adjacency over the 2n cross-modal nodes.
  Tensor<S> proj({2 * n, c});
  for (std::size_t r = 0; r < 2 * n; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      S acc = S(0);
      for (std::size_t k = 0; k < c; ++k) acc += z_cross.at(r, k) * params.latent_proj.at(k, j);
      proj.at(r, j) = acc;
    }
  const S inv_sqrt_c = static_cast<S>(1.0 / std::sqrt(static_cast<double>(c)));
  std::vector<std::vector<S>> adj(2 * n, std::vector<S>(2 * n));
  for (std::size_t r = 0; r < 2 * n; ++r) {
    S mx = S(0);
    for (std::size_t q = 0; q < 2 * n; ++q) {
      S d = S(0);
      for (std::size_t j = 0; j < c; ++j) d += proj.at(r, j) * inv_sqrt_c * proj.at(q, j);
      adj[r][q] = d;
      mx = q == 0 ? d : std::max(mx, d);
    }
    S total = S(0);
    for (std::size_t q = 0; q < 2 * n; ++q) {
      adj[r][q] = std::exp(adj[r][q] - mx);
      total += adj[r][q];
    }
    for (std::size_t q = 0; q < 2 * n; ++q) adj[r][q] /= total;
  }

  const auto psi_dec_i = detail::dense_affinity(f_image, theta_dec_i);
  const auto psi_dec_v = detail::dense_affinity(v_voxel, theta_dec_v);

  // Dense end-to-end operators: out = psi_dec . A_slice . psi_enc^T gives an
  // N x N map per (destination modality, source modality) pair.
  auto dense_operator = [&](const std::vector<std::vector<S>>& psi_dec, std::size_t dst_offset,
                            const std::vector<std::vector<S>>& psi_enc,
                            std::size_t src_offset) {
    std::vector<std::vector<S>> g(n_rows, std::vector<S>(n_rows, S(0)));
    for (std::size_t i = 0; i < n_rows; ++i)
      for (std::size_t p = 0; p < n_rows; ++p) {
        S acc = S(0);
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t q = 0; q < n; ++q)
            acc += psi_dec[i][k] * adj[2 * k + dst_offset][2 * q + src_offset] * psi_enc[p][q];
        g[i][p] = acc;
      }
    return g;
  };
  const auto g_ii = dense_operator(psi_dec_i, 0, psi_enc_i, 0);
  const auto g_iv = dense_operator(psi_dec_i, 0, psi_enc_v, 1);
  const auto g_vi = dense_operator(psi_dec_v, 1, psi_enc_i, 0);
  const auto g_vv = dense_operator(psi_dec_v, 1, psi_enc_v, 1);

  auto decode = [&](const std::vector<std::vector<S>>& g_self,
                    const std::vector<std::vector<S>>& g_other, const Tensor<S>& w_self,
                    const Tensor<S>& w_other, const Tensor<S>& x) {
    Tensor<S> out({n_rows, c});
    for (std::size_t i = 0; i < n_rows; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        S acc = S(0);
        for (std::size_t p = 0; p < n_rows; ++p)
          acc += g_self[i][p] * w_self.at(p, j) + g_other[i][p] * w_other.at(p, j);
        out.at(i, j) = (acc > S(0) ? acc : S(0)) + x.at(i, j);
      }
    return out;
  };
  return {decode(g_ii, g_iv, fw, vw, f_image), decode(g_vv, g_vi, vw, fw, v_voxel)};
}

// ---------------------------------------------------------------------------
// QKV cross-attention baseline: quadratic-cost reference the latent path is
// benchmarked against. Queries come from the voxel features, keys and values
// from the image features; single head.
// ---------------------------------------------------------------------------

template <typename T>
struct QkvParamsT {
  T w_query;
  T w_key;
  T w_value;

  template <typename F>
  void visit(F&& f) const {
    f(w_query);
    f(w_key);
    f(w_value);
  }
  template <typename G>
  static QkvParamsT make(G&& g) {
    QkvParamsT p;
    p.w_query = g();
    p.w_key = g();
    p.w_value = g();
    return p;
  }
};

template <typename S>
QkvParamsT<Tensor<S>> init_qkv_params(Rng& rng, std::size_t c) {
  const S k = static_cast<S>(1.0 / std::sqrt(static_cast<double>(c)));
  QkvParamsT<Tensor<S>> p;
  p.w_query = Tensor<S>::uniform({c, c}, rng, -k, k);
  p.w_key = Tensor<S>::uniform({c, c}, rng, -k, k);
  p.w_value = Tensor<S>::uniform({c, c}, rng, -k, k);
  return p;
}

/// softmax((V Wq)(F Wk)^T / sqrt(C)) (F Wv). The 1/sqrt(C) scaling is folded
/// into the queries so only two N x N intermediates exist. Cost O(N^2 c).
template <typename S>
Var qkv_cross_attention(Tape<S>& tape, Var f_image, Var v_voxel,
                        const QkvParamsT<Var>& params) {
  detail::check_feature_pair(tape.value(f_image), tape.value(v_voxel), "qkv_cross_attention");
  const std::size_t c = tape.value(f_image).cols();
  const S inv_sqrt_c = static_cast<S>(1.0 / std::sqrt(static_cast<double>(c)));
  Var queries = scale(tape, matmul(tape, v_voxel, params.w_query), inv_sqrt_c);
  Var keys = matmul(tape, f_image, params.w_key);
  Var values = matmul(tape, f_image, params.w_value);
  Var weights = softmax(tape, matmul(tape, queries, transpose(tape, keys)), 1);
  return matmul(tape, weights, values);
}

}  // namespace latfuse
