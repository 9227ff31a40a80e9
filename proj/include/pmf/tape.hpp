#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "pmf/tensor.hpp"

namespace pmf {

enum class OpKind {
  matmul,
  linear,
  add,
  mul,
  scale,
  relu,
  gelu,
  layer_norm,
  attention,
  mask_rows,
  concat_rows,
  concat_cols,
  slice_rows,
  gather_rows,
  sum,
  mean,
  cross_entropy,
  bce_logits,
};

const char* op_name(OpKind kind);

/// One recorded op. The adjoint reads the output gradient and accumulates
/// into the grads of whichever inputs require them.
struct TapeNode {
  OpKind kind;
  std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
  std::shared_ptr<detail::TensorImpl> output;
  std::size_t saved_bytes = 0;
  std::function<void(const Buffer& grad_out)> adjoint;
};

struct TapeStats {
  std::size_t node_count = 0;
  std::size_t saved_bytes = 0;

  bool operator==(const TapeStats&) const = default;
};

/// Append-only record of differentiable ops for one forward pass.
///
/// Ops record onto the tape installed on the current thread by a
/// RecordingScope. Stats survive backward() so a consumed tape can still be
/// profiled, but the nodes themselves (and the buffers they pin) are released.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void append(TapeNode node);
  TapeStats stats() const { return stats_; }
  bool consumed() const { return consumed_; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend std::size_t backward(const Tensor& loss, Tape& tape);
  friend class NoGradScope;
  friend class RecordingScope;

  std::vector<TapeNode> nodes_;
  TapeStats stats_;
  bool consumed_ = false;
  bool recording_ = true;
};

/// Installs a tape as the recording target for ops on this thread.
class RecordingScope {
 public:
  explicit RecordingScope(Tape& tape);
  ~RecordingScope();
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on this thread for the lifetime of the scope.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* tape_;
  bool previous_recording_;
  bool previous_enabled_;
};

/// The tape ops should record onto right now, or nullptr.
Tape* active_tape();

TapeStats tape_stats(const Tape& tape);

/// Reverse pass over the tape. Seeds d(loss)=1 and runs every node's adjoint
/// in reverse order, leaving grads on requires-grad leaves only. Returns the
/// number of adjoint evaluations (always the node count).
std::size_t backward(const Tensor& loss, Tape& tape);

/// Runs f with recording suspended.
template <class F>
decltype(auto) no_grad(F&& f) {
  NoGradScope scope;
  return f();
}

}  // namespace pmf
