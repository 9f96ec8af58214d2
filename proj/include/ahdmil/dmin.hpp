#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ahdmil/autograd.hpp"
#include "ahdmil/optim.hpp"
#include "ahdmil/rng.hpp"

namespace ahdmil {

struct DminConfig {
  std::size_t dim_in = 64;   // D
  std::size_t q = 512;       // projected width Q
  std::size_t h = 256;       // attention hidden width H
  std::size_t classes = 2;   // C
  std::size_t k = 12;        // Chebyshev degree K
  double tau = 0.7;
  double gamma = 0.5;
  double r = 0.6;
  std::array<double, 5> alpha{0.7, 0.3, 0.5, 0.5, 2.0};
  std::size_t k_clu = 8;

  void validate() const;
  nlohmann::json to_json() const;
  static DminConfig from_json(const nlohmann::json& j);
};

/// One parameter set shared by the teacher and student paths.
struct DminParams {
  DminConfig cfg;
  Tensor proj_w;  // D x Q
  Tensor proj_b;  // Q
  Tensor att_u;   // Q x H
  Tensor att_v;   // Q x H
  Tensor att_w;   // H x C
  Tensor cka;     // C x Q x (K+1)
  std::vector<Tensor> clu_w;  // C of Q x 2
  std::vector<Tensor> clu_b;  // C of 2

  static DminParams init(const DminConfig& cfg, std::uint64_t seed);
  ParamList params();
};

/// Leaves of one DminParams inside a graph.
struct DminVars {
  ag::Var proj_w, proj_b, att_u, att_v, att_w, cka;
  std::vector<ag::Var> clu_w, clu_b;
};

DminVars bind(ag::Graph& g, DminParams& p);

namespace dmin {

/// F = relu(F_raw W + b).
ag::Var project(const DminVars& v, ag::Var f_raw);
/// A = [tanh(F V) * sigmoid(F U)] W, N x C.
ag::Var gated_attention(const DminVars& v, ag::Var f);
/// Row c: softmax(A[:,c])^T F.
ag::Var teacher_aggregate(ag::Var f, ag::Var a);
/// sigmoid((A + G1 - G2) / tau) with G = -log(-log u).
ag::Var gumbel_sigmoid(ag::Var a, double tau, Rng& rng, ag::DrawTape* tape = nullptr);
double gumbel(double u);
/// Row c: masked softmax of A[:,c] under M[:,c], times F. A zero mask column
/// yields a zero row and sets degenerate[c].
ag::Var student_aggregate(ag::Var f, ag::Var a, ag::Var m, std::vector<bool>* degenerate = nullptr);
ag::Var classify(const DminVars& v, ag::Var e);
/// Cross-entropy of the label's cluster head on the top-k (positive) and
/// bottom-k (negative) instances of A[:,y]. k shrinks to floor(N/2).
ag::Var clustering_loss(const DminVars& v, ag::Var f, const Tensor& a, std::size_t label,
                        std::size_t k_clu);
/// Deterministic evaluation mask B(sigmoid(A / tau), gamma).
Tensor eval_mask(const Tensor& a, double tau, double gamma);
/// Fraction of rows with any nonzero entry.
double union_retention(const Tensor& mask);

}  // namespace dmin

struct SdForward {
  ag::Var a, a_hat, m, e_tea, e_stu, logits_tea, logits_stu, retention;
  ag::Var l_cls, l_clu, l_dis1, l_dis2, l_rate;
  ag::Var loss;
  std::vector<bool> degenerate;
};

/// Self-distillation loss on one bag. Teacher quantities inside the two
/// distillation terms are detached.
SdForward loss_sd(ag::Graph& g, const DminVars& v, const DminConfig& cfg, const Tensor& f_raw,
                  std::size_t label, Rng& rng, ag::DrawTape* tape = nullptr);

/// Graph-free forward with plain softmax attention over every row of
/// `f_raw`. On a full bag this is the teacher path; on the kept rows of a
/// pruned bag it is the student path with an all-ones mask.
struct EvalOutput {
  Tensor a;                   // N x C
  std::vector<double> logits; // C
  std::vector<double> probs;  // C
};
EvalOutput forward_eval(const DminParams& p, const Tensor& f_raw);

/// Student path over a subset of instances: masked softmax with an all-ones
/// mask over the given rows. Returns the C logits node.
ag::Var student_on_rows(const DminVars& v, ag::Var f_raw_rows);

std::vector<double> softmax(std::span<const double> logits);

}  // namespace ahdmil
