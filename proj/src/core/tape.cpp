#include "pmf/tape.hpp"

namespace pmf {

namespace {

thread_local Tape* g_tape = nullptr;
thread_local bool g_grad_enabled = true;

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::attention: return "attention";
    case OpKind::mask_rows: return "mask_rows";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::bce_logits: return "bce_logits";
  }
  return "?";
}

void Tape::append(TapeNode node) {
  if (consumed_) throw Error("cannot record onto a consumed tape");
  if (!recording_) return;
  stats_.node_count += 1;
  stats_.saved_bytes += node.saved_bytes;
  nodes_.push_back(std::move(node));
}

RecordingScope::RecordingScope(Tape& tape) : previous_(g_tape) { g_tape = &tape; }

RecordingScope::~RecordingScope() { g_tape = previous_; }

NoGradScope::NoGradScope()
    : tape_(g_tape),
      previous_recording_(g_tape ? g_tape->recording_ : false),
      previous_enabled_(g_grad_enabled) {
  g_grad_enabled = false;
  if (tape_) tape_->recording_ = false;
}

NoGradScope::~NoGradScope() {
  g_grad_enabled = previous_enabled_;
  if (tape_) tape_->recording_ = previous_recording_;
}

Tape* active_tape() {
  if (!g_grad_enabled || g_tape == nullptr || !g_tape->recording() || g_tape->consumed()) {
    return nullptr;
  }
  return g_tape;
}

TapeStats tape_stats(const Tape& tape) { return tape.stats(); }

std::size_t backward(const Tensor& loss, Tape& tape) {
  if (tape.consumed_) throw Error("backward on a consumed tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw Error("backward needs a scalar loss, got shape " +
                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad() || loss.is_leaf()) {
    throw Error("loss has no recorded path to any trainable tensor");
  }
  if (tape.nodes_.empty()) throw Error("backward on an empty tape");

  auto& root = *loss.impl();
  visit_dtype(root.dtype, [&]<class T>() { root.grad = std::vector<T>(1, T(1)); });

  std::size_t evaluations = 0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
    auto& node = *it;
    ++evaluations;
    if (node.output->grad) {
      node.adjoint(*node.output->grad);
      node.output->grad.reset();
    }
  }
  tape.nodes_.clear();
  tape.nodes_.shrink_to_fit();
  tape.consumed_ = true;
  return evaluations;
}

}  // namespace pmf
