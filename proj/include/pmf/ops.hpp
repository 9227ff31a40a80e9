#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pmf/tensor.hpp"

// Differentiable ops over 2-D (rows x cols) tensors.
//
// Each op records a tape node only when a tape is active, recording is on,
// and at least one input requires grad. Saved-activation accounting: a node
// counts the bytes of exactly those input buffers its adjoint reads, given
// which inputs require grad. The rule per op is stated next to it.
namespace pmf::ops {

/// a(n x k) * b(k x m). Saves b if a needs grad and a if b needs grad.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x(n x in) * w(in x out) + bias(1 x out); bias may be undefined.
/// Saves w if x needs grad and x if w needs grad.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Elementwise sum of equal shapes. Saves nothing.
Tensor add(const Tensor& a, const Tensor& b);

/// Elementwise product. Saves b if a needs grad and a if b needs grad.
Tensor mul(const Tensor& a, const Tensor& b);

/// a * s. Saves nothing.
Tensor scale(const Tensor& a, double s);

/// Saves x.
Tensor relu(const Tensor& x);

/// Exact (erf) GELU. Saves x.
Tensor gelu(const Tensor& x);

/// Row-wise layer norm with gain/bias of shape (1 x cols).
/// Saves x, plus gain when x needs grad.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

/// Multi-head scaled dot-product attention over (n x d) q, k, v with
/// `heads` equal column blocks. Keys with key_mask[j] == 0 get -inf logits.
/// Saves q, k, v; the adjoint recomputes the attention weights.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::uint8_t> key_mask, std::size_t heads);

/// Zeroes rows whose mask entry is 0. Saves nothing.
Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> mask);

/// Vertical concatenation; undefined tensors are skipped. Saves nothing.
Tensor concat_rows(const std::vector<Tensor>& parts);

/// Horizontal concatenation of equal-row tensors. Saves nothing.
Tensor concat_cols(const Tensor& a, const Tensor& b);

/// Rows [begin, end). Saves nothing.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);

/// Row lookup table[ids[i]]. Saves nothing (ids are not tensor buffers).
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids);

/// Sum of all entries as a (1 x 1) tensor. Saves nothing.
Tensor sum(const Tensor& x);

/// Mean of all entries as a (1 x 1) tensor. Saves nothing.
Tensor mean(const Tensor& x);

/// Mean over rows of -w[y] * log softmax(logits_row)[y]. Saves logits.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels,
                     std::span<const double> class_weights);

/// Mean over all entries of w[c] * BCE(sigmoid(x), y), in the stable form
/// max(x,0) - x*y + log(1 + exp(-|x|)). targets holds 0/1 per entry
/// (row-major, same shape as logits). Saves logits.
Tensor bce_with_logits(const Tensor& logits, std::span<const std::uint8_t> targets,
                       std::span<const double> class_weights);

}  // namespace pmf::ops
