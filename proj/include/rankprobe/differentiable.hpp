#pragma once

// Trainable models: a SAN core plus the optional task-specific pieces around
// it (token and position embeddings, a linear readout, query/key factors).
// The tape forward here and the plain forward in san.hpp are written
// independently; the finite-difference oracle compares one against the other.

#include "rankprobe/autodiff.hpp"
#include "rankprobe/san.hpp"

#include <optional>
#include <string>
#include <vector>

namespace rankprobe {

// W_QK = W_Q W_Kᵀ, each factor d_model x d_qk.
struct QkFactors {
  Matrix w_q;
  Matrix w_k;
};

struct TaskModel {
  SanParams san;
  std::optional<Matrix> token_embedding;     // alphabet x d_model
  std::optional<Matrix> position_embedding;  // tokens x d_model
  std::optional<Matrix> readout;             // d_model x classes
  std::optional<Vector> readout_bias;        // classes
  // When set, training works on the factors and the fused W_QK in `san`
  // is kept equal to their product. Indexed [layer][head].
  std::vector<std::vector<QkFactors>> qk_factors;

  bool uses_tokens() const { return token_embedding.has_value(); }
  void validate() const;
  // Recomputes every fused W_QK from its factors.
  void sync_factors();
};

// A contiguous block of trainable doubles, seen as rows x cols (row vectors
// for biases added to token rows, column vectors for b_QK).
struct ParamView {
  std::string name;
  double* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Map<Matrix> map() const { return Eigen::Map<Matrix>(data, rows, cols); }
  Eigen::Index size() const { return rows * cols; }
};

// Stable order: san layers (heads, b_O, mlp, ln), then embeddings, readout.
// Fused W_QK is skipped when factors are present; the factors appear instead.
std::vector<ParamView> param_views(TaskModel& model);
std::size_t parameter_count(TaskModel& model);

// One minibatch. `segment` tokens per sequence; either `inputs`
// ((B*segment) x d_model) or `tokens` (B*segment ids) is set.
struct Batch {
  Eigen::Index segment = 0;
  Matrix inputs;
  std::vector<int> tokens;
  Matrix targets;           // for mse
  std::vector<int> labels;  // for cross-entropy

  Eigen::Index sequences() const;
};

enum class LossKind { mse, cross_entropy };

LossKind parse_loss(const std::string& name);
std::string to_string(LossKind loss);

struct BoundModel {
  std::vector<Var> vars;  // parallel to param_views
};

BoundModel bind(Tape& tape, TaskModel& model);

// Tape forward of the whole model; returns the per-token outputs (logits
// when a readout is present).
Var model_forward(Tape& tape, TaskModel& model, const BoundModel& bound, const Batch& batch);
Var model_loss(Tape& tape, TaskModel& model, const BoundModel& bound, const Batch& batch,
               LossKind loss);

// Plain evaluation, sequence by sequence, through san.hpp.
Matrix plain_forward(const TaskModel& model, const Batch& batch);
double plain_loss(const TaskModel& model, const Batch& batch, LossKind loss);

// Input token matrix of sequence `b` after embedding.
TokenMatrix embed_sequence(const TaskModel& model, const Batch& batch, Eigen::Index b);
// Readout applied to per-token SAN outputs.
Matrix apply_readout(const TaskModel& model, const TokenMatrix& san_output);

}  // namespace rankprobe
