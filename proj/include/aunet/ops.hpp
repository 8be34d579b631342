#pragma once

#include <vector>

#include "aunet/tensor.hpp"

// Differentiable primitives over dense f64 tensors. Each op computes its
// forward value and, when a TapeScope is active and some input requires
// grad, records a backward closure on the active graph.
namespace aunet::ops {

// elementwise, equal shapes
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// scalar broadcasts
Tensor add_scalar(const Tensor& a, double s);
Tensor rsub_scalar(double s, const Tensor& a);  // s - a
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// unary
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);  // gradient zero outside (lo, hi)

// normalization over the last axis, learned scale/shift, eps = 1e-6
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// softmax along `axis` with max-subtraction
Tensor softmax(const Tensor& x, int axis);

// linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // 2-D
Tensor reshape(const Tensor& a, Shape s);
Tensor narrow(const Tensor& a, int axis, int start, int len);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_spatial(const Tensor& a);  // [C,H,W] -> [C]

// convolution (cross-correlation semantics) and pooling on [C,H,W]
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);
Tensor bias_chw(const Tensor& x, const Tensor& b);      // [C,H,W] + [C]
Tensor max_pool2d(const Tensor& x, int window = 2, int stride = 2);

// broadcasts used by the model
Tensor add_rowvec(const Tensor& x, const Tensor& b);    // [N,D] + [D]
Tensor mul_chan(const Tensor& x, const Tensor& m);      // [C,H,W] * [1,H,W]

// cut the tape: value copy that never requires grad
Tensor detach(const Tensor& a);

// attention-drop and TopK primitives; selections are treated as constant in
// backward, ties broken toward the lower index
Tensor keep_topk_rows(const Tensor& a, int keep);   // zero all but `keep` largest per row
Tensor keep_topk_cols(const Tensor& a, int keep);
Tensor col_mask_mul(const Tensor& a, const Tensor& m);      // [N,M] * m[M], per column
Tensor col_mask_ste(const Tensor& a, const Tensor& logits);  // hard sigmoid>0.5 column mask,
                                                             // straight-through to logits
Tensor topk_col_sum(const Tensor& p, int k);        // [N,M] -> [M], sum of k largest per column

}  // namespace aunet::ops
