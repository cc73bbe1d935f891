#include "runtime.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include <Eigen/Dense>
#include <google/protobuf/io/coded_stream.h>
#include <google/protobuf/io/zero_copy_stream_impl_lite.h>

#include "magscope/error.hpp"
#include "magscope/parallel.hpp"
#include "onnx.pb.h"

namespace magscope::deep::onnx_rt {
namespace {

using Shape = std::vector<std::int64_t>;
using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// A runtime value: float data, or int64 data for shape arithmetic.
struct Value {
  Shape shape;
  std::vector<float> f;
  std::vector<std::int64_t> i;
  bool is_int = false;

  std::size_t size() const noexcept { return is_int ? i.size() : f.size(); }
};

std::size_t count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t k = 0; k < s.size(); ++k) out += (k ? "," : "") + std::to_string(s[k]);
  return out + "]";
}

Value float_value(Shape shape) {
  Value v;
  v.f.assign(count(shape), 0.0f);
  v.shape = std::move(shape);
  return v;
}

Value int_value(Shape shape, std::vector<std::int64_t> data) {
  Value v;
  v.is_int = true;
  v.shape = std::move(shape);
  v.i = std::move(data);
  return v;
}

template <class T>
void read_raw(const std::string& raw, std::vector<T>& out, std::size_t n) {
  if (raw.size() != n * sizeof(T)) throw MalformedModel("raw tensor data has the wrong size");
  out.resize(n);
  if (n) std::memcpy(out.data(), raw.data(), raw.size());
}

Value tensor_value(const onnx::TensorProto& t) {
  if (t.data_location() == onnx::TensorProto::EXTERNAL || t.external_data_size() > 0) {
    throw MalformedModel("tensor '" + t.name() + "' uses external data, which is not supported");
  }
  Shape shape(t.dims().begin(), t.dims().end());
  for (auto d : shape) {
    if (d < 0) throw MalformedModel("tensor '" + t.name() + "' has a negative dimension");
  }
  const std::size_t n = count(shape);
  Value v;
  v.shape = shape;
  switch (t.data_type()) {
    case onnx::TensorProto::FLOAT:
      if (t.has_raw_data()) {
        read_raw(t.raw_data(), v.f, n);
      } else {
        v.f.assign(t.float_data().begin(), t.float_data().end());
      }
      break;
    case onnx::TensorProto::DOUBLE: {
      std::vector<double> d;
      if (t.has_raw_data()) {
        read_raw(t.raw_data(), d, n);
      } else {
        d.assign(t.double_data().begin(), t.double_data().end());
      }
      v.f.assign(d.begin(), d.end());
      break;
    }
    case onnx::TensorProto::INT64:
      v.is_int = true;
      if (t.has_raw_data()) {
        read_raw(t.raw_data(), v.i, n);
      } else {
        v.i.assign(t.int64_data().begin(), t.int64_data().end());
      }
      break;
    case onnx::TensorProto::INT32: {
      v.is_int = true;
      std::vector<std::int32_t> d;
      if (t.has_raw_data()) {
        read_raw(t.raw_data(), d, n);
      } else {
        d.assign(t.int32_data().begin(), t.int32_data().end());
      }
      v.i.assign(d.begin(), d.end());
      break;
    }
    default:
      throw MalformedModel("tensor '" + t.name() + "' has unsupported element type " +
                           std::to_string(t.data_type()));
  }
  if (v.size() != n) {
    throw MalformedModel("tensor '" + t.name() + "' holds " + std::to_string(v.size()) +
                         " values for shape " + shape_str(shape));
  }
  return v;
}

// ---------------------------------------------------------------------------
// Attributes

class Attrs {
 public:
  explicit Attrs(const onnx::NodeProto& node) {
    for (const auto& a : node.attribute()) map_.emplace(a.name(), &a);
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  std::int64_t get_int(const std::string& name, std::int64_t fallback) const {
    const auto* a = find(name);
    return a ? a->i() : fallback;
  }

  float get_float(const std::string& name, float fallback) const {
    const auto* a = find(name);
    return a ? a->f() : fallback;
  }

  std::string get_string(const std::string& name, const std::string& fallback) const {
    const auto* a = find(name);
    return a ? a->s() : fallback;
  }

  std::vector<std::int64_t> get_ints(const std::string& name, std::vector<std::int64_t> fallback) const {
    const auto* a = find(name);
    return a ? std::vector<std::int64_t>(a->ints().begin(), a->ints().end()) : fallback;
  }

  const onnx::AttributeProto* find(const std::string& name) const {
    const auto it = map_.find(name);
    return it == map_.end() ? nullptr : it->second;
  }

 private:
  std::map<std::string, const onnx::AttributeProto*> map_;
};

// ---------------------------------------------------------------------------
// Operators. Each receives resolved inputs (nullptr for omitted optional
// inputs) and returns its outputs.

using Inputs = std::vector<const Value*>;
using Outputs = std::vector<Value>;

struct OpContext {
  const onnx::NodeProto& node;
  const Attrs& attrs;
  unsigned threads;
};

[[noreturn]] void fail(const OpContext& ctx, const std::string& what) {
  throw InvalidArgument("node '" + ctx.node.name() + "' (" + ctx.node.op_type() + "): " + what);
}

const Value& need(const OpContext& ctx, const Inputs& in, std::size_t k, bool want_int = false) {
  if (k >= in.size() || in[k] == nullptr) fail(ctx, "missing input " + std::to_string(k));
  if (in[k]->is_int != want_int) {
    fail(ctx, "input " + std::to_string(k) + (want_int ? " must be int64" : " must be float"));
  }
  return *in[k];
}

std::size_t norm_axis(const OpContext& ctx, std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < -r || axis >= r) fail(ctx, "axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

Outputs op_identity(const OpContext& ctx, const Inputs& in) {
  if (in.empty() || in[0] == nullptr) fail(ctx, "missing input 0");
  return {*in[0]};
}

Outputs op_relu(const OpContext& ctx, const Inputs& in) {
  Value out = need(ctx, in, 0);
  for (float& v : out.f) v = v > 0.0f ? v : 0.0f;
  return {std::move(out)};
}

struct Spatial {
  std::int64_t kh, kw, sh, sw, dh, dw, pt, pl, pb, pr;
};

Spatial spatial_attrs(const OpContext& ctx, std::int64_t kh, std::int64_t kw) {
  const auto auto_pad = ctx.attrs.get_string("auto_pad", "NOTSET");
  if (auto_pad != "NOTSET" && auto_pad != "VALID") fail(ctx, "auto_pad " + auto_pad + " is not supported");
  const auto strides = ctx.attrs.get_ints("strides", {1, 1});
  const auto dil = ctx.attrs.get_ints("dilations", {1, 1});
  const auto pads = auto_pad == "VALID" ? std::vector<std::int64_t>{0, 0, 0, 0}
                                        : ctx.attrs.get_ints("pads", {0, 0, 0, 0});
  if (strides.size() != 2 || dil.size() != 2 || pads.size() != 4) fail(ctx, "only 2-D spatial attributes are supported");
  Spatial s{kh, kw, strides[0], strides[1], dil[0], dil[1], pads[0], pads[1], pads[2], pads[3]};
  if (s.kh < 1 || s.kw < 1 || s.sh < 1 || s.sw < 1 || s.dh < 1 || s.dw < 1 || s.pt < 0 || s.pl < 0 ||
      s.pb < 0 || s.pr < 0) {
    fail(ctx, "invalid kernel, stride, dilation or padding");
  }
  return s;
}

Outputs op_conv(const OpContext& ctx, const Inputs& in) {
  const Value& x = need(ctx, in, 0);
  const Value& w = need(ctx, in, 1);
  const Value* b = in.size() > 2 ? in[2] : nullptr;
  if (x.shape.size() != 4 || w.shape.size() != 4) fail(ctx, "only 2-D convolution is supported");
  const std::int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const std::int64_t m = w.shape[0], cg = w.shape[1];
  const std::int64_t group = ctx.attrs.get_int("group", 1);
  if (group < 1 || c % group != 0 || m % group != 0 || cg != c / group) {
    fail(ctx, "weight " + shape_str(w.shape) + " does not fit input " + shape_str(x.shape));
  }
  const auto ks = ctx.attrs.get_ints("kernel_shape", {w.shape[2], w.shape[3]});
  if (ks.size() != 2 || ks[0] != w.shape[2] || ks[1] != w.shape[3]) fail(ctx, "kernel_shape differs from weights");
  const Spatial s = spatial_attrs(ctx, ks[0], ks[1]);
  if (b && (b->is_int || b->shape != Shape{m})) fail(ctx, "bias must have shape [M]");

  const std::int64_t oh = (h + s.pt + s.pb - s.dh * (s.kh - 1) - 1) / s.sh + 1;
  const std::int64_t ow = (wd + s.pl + s.pr - s.dw * (s.kw - 1) - 1) / s.sw + 1;
  if (oh < 1 || ow < 1) fail(ctx, "output would be empty");
  Value out = float_value({n, m, oh, ow});

  const std::int64_t mg = m / group;
  const std::int64_t k = cg * s.kh * s.kw;
  const std::int64_t pix = oh * ow;
  const bool pointwise = s.kh == 1 && s.kw == 1 && s.sh == 1 && s.sw == 1 && s.pt == 0 &&
                         s.pl == 0 && s.pb == 0 && s.pr == 0;

  parallel_for(static_cast<std::size_t>(n), ctx.threads, [&](std::size_t img) {
    std::vector<float> col;
    for (std::int64_t g = 0; g < group; ++g) {
      const float* xin = x.f.data() + (static_cast<std::int64_t>(img) * c + g * cg) * h * wd;
      const float* cols = xin;
      if (!pointwise) {
        col.assign(static_cast<std::size_t>(k * pix), 0.0f);
        for (std::int64_t ch = 0; ch < cg; ++ch) {
          for (std::int64_t ki = 0; ki < s.kh; ++ki) {
            for (std::int64_t kj = 0; kj < s.kw; ++kj) {
              float* dst = col.data() + ((ch * s.kh + ki) * s.kw + kj) * pix;
              for (std::int64_t y = 0; y < oh; ++y) {
                const std::int64_t iy = y * s.sh - s.pt + ki * s.dh;
                if (iy < 0 || iy >= h) continue;
                const float* src = xin + (ch * h + iy) * wd;
                for (std::int64_t xo = 0; xo < ow; ++xo) {
                  const std::int64_t ix = xo * s.sw - s.pl + kj * s.dw;
                  if (ix >= 0 && ix < wd) dst[y * ow + xo] = src[ix];
                }
              }
            }
          }
        }
        cols = col.data();
      }
      ConstMatMap wm(w.f.data() + g * mg * k, mg, k);
      ConstMatMap cm(cols, k, pix);
      MatMap om(out.f.data() + (static_cast<std::int64_t>(img) * m + g * mg) * pix, mg, pix);
      om.noalias() = wm * cm;
      if (b) {
        for (std::int64_t r = 0; r < mg; ++r) om.row(r).array() += b->f[static_cast<std::size_t>(g * mg + r)];
      }
    }
  });
  return {std::move(out)};
}

Outputs op_batchnorm(const OpContext& ctx, const Inputs& in) {
  const Value& x = need(ctx, in, 0);
  if (ctx.attrs.get_int("training_mode", 0) != 0) fail(ctx, "training mode is not supported");
  if (x.shape.size() < 2) fail(ctx, "input must have a channel axis");
  const std::int64_t c = x.shape[1];
  for (std::size_t k = 1; k <= 4; ++k) {
    if (need(ctx, in, k).shape != Shape{c}) fail(ctx, "parameter " + std::to_string(k) + " must have shape [C]");
  }
  const float eps = ctx.attrs.get_float("epsilon", 1e-5f);
  const auto& scale = in[1]->f;
  const auto& bias = in[2]->f;
  const auto& mean = in[3]->f;
  const auto& var = in[4]->f;
  Value out = x;
  const std::size_t inner = count(Shape(x.shape.begin() + 2, x.shape.end()));
  const auto n = static_cast<std::size_t>(x.shape[0]);
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t ch = 0; ch < static_cast<std::size_t>(c); ++ch) {
      const float a = scale[ch] / std::sqrt(var[ch] + eps);
      const float shift = bias[ch] - a * mean[ch];
      float* p = out.f.data() + (img * static_cast<std::size_t>(c) + ch) * inner;
      for (std::size_t q = 0; q < inner; ++q) p[q] = a * p[q] + shift;
    }
  }
  return {std::move(out)};
}

Outputs op_concat(const OpContext& ctx, const Inputs& in) {
  if (in.empty() || in[0] == nullptr) fail(ctx, "needs at least one input");
  const bool is_int = in[0]->is_int;
  const Shape& first = in[0]->shape;
  const std::size_t axis = norm_axis(ctx, ctx.attrs.get_int("axis", 0), first.size());
  Shape shape = first;
  shape[axis] = 0;
  for (const Value* v : in) {
    if (v == nullptr || v->is_int != is_int || v->shape.size() != first.size()) fail(ctx, "inputs differ in type or rank");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && v->shape[d] != first[d]) fail(ctx, "inputs differ off the concat axis");
    }
    shape[axis] += v->shape[axis];
  }
  const std::size_t outer = count(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
  const std::size_t inner = count(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
  Value out;
  out.is_int = is_int;
  out.shape = shape;
  auto run = [&](auto member) {
    auto& dst = out.*member;
    dst.resize(count(shape));
    std::size_t pos = 0;
    for (std::size_t o = 0; o < outer; ++o) {
      for (const Value* v : in) {
        const std::size_t chunk = static_cast<std::size_t>(v->shape[axis]) * inner;
        const auto& src = v->*member;
        std::copy_n(src.begin() + static_cast<long>(o * chunk), chunk, dst.begin() + static_cast<long>(pos));
        pos += chunk;
      }
    }
  };
  if (is_int) {
    run(&Value::i);
  } else {
    run(&Value::f);
  }
  return {std::move(out)};
}

Outputs pool(const OpContext& ctx, const Inputs& in, bool is_max) {
  const Value& x = need(ctx, in, 0);
  if (x.shape.size() != 4) fail(ctx, "only 2-D pooling is supported");
  const auto ks = ctx.attrs.get_ints("kernel_shape", {});
  if (ks.size() != 2) fail(ctx, "kernel_shape must have two entries");
  Spatial s = spatial_attrs(ctx, ks[0], ks[1]);
  const bool ceil_mode = ctx.attrs.get_int("ceil_mode", 0) != 0;
  const bool include_pad = ctx.attrs.get_int("count_include_pad", 0) != 0;
  const std::int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  auto out_dim = [&](std::int64_t size, std::int64_t k, std::int64_t st, std::int64_t d,
                     std::int64_t p0, std::int64_t p1) {
    const std::int64_t span = size + p0 + p1 - d * (k - 1) - 1;
    std::int64_t o = (ceil_mode ? (span + st - 1) / st : span / st) + 1;
    // A window may not start inside the trailing padding.
    if (ceil_mode && (o - 1) * st >= size + p0) --o;
    return o;
  };
  const std::int64_t oh = out_dim(h, s.kh, s.sh, s.dh, s.pt, s.pb);
  const std::int64_t ow = out_dim(w, s.kw, s.sw, s.dw, s.pl, s.pr);
  if (oh < 1 || ow < 1) fail(ctx, "output would be empty");
  Value out = float_value({n, c, oh, ow});
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const float* src = x.f.data() + plane * h * w;
    float* dst = out.f.data() + plane * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xo = 0; xo < ow; ++xo) {
        float acc = is_max ? -std::numeric_limits<float>::infinity() : 0.0f;
        std::int64_t inside = 0, padded = 0;
        for (std::int64_t ki = 0; ki < s.kh; ++ki) {
          const std::int64_t iy = y * s.sh - s.pt + ki * s.dh;
          for (std::int64_t kj = 0; kj < s.kw; ++kj) {
            const std::int64_t ix = xo * s.sw - s.pl + kj * s.dw;
            if (iy < h + s.pb && ix < w + s.pr) ++padded;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            ++inside;
            const float v = src[iy * w + ix];
            acc = is_max ? std::max(acc, v) : acc + v;
          }
        }
        if (!is_max) acc /= static_cast<float>(include_pad ? padded : std::max<std::int64_t>(inside, 1));
        dst[y * ow + xo] = acc;
      }
    }
  }
  return {std::move(out)};
}

Outputs op_maxpool(const OpContext& ctx, const Inputs& in) {
  if (ctx.node.output_size() > 1) fail(ctx, "index output is not supported");
  return pool(ctx, in, true);
}

Outputs op_avgpool(const OpContext& ctx, const Inputs& in) { return pool(ctx, in, false); }

Outputs op_global_avgpool(const OpContext& ctx, const Inputs& in) {
  const Value& x = need(ctx, in, 0);
  if (x.shape.size() < 3) fail(ctx, "input must have spatial axes");
  Shape shape = {x.shape[0], x.shape[1]};
  shape.resize(x.shape.size(), 1);
  Value out = float_value(shape);
  const std::size_t inner = count(Shape(x.shape.begin() + 2, x.shape.end()));
  for (std::size_t p = 0; p < out.f.size(); ++p) {
    double acc = 0.0;
    for (std::size_t q = 0; q < inner; ++q) acc += x.f[p * inner + q];
    out.f[p] = static_cast<float>(acc / static_cast<double>(inner));
  }
  return {std::move(out)};
}

Outputs op_flatten(const OpContext& ctx, const Inputs& in) {
  if (in.empty() || in[0] == nullptr) fail(ctx, "missing input 0");
  Value out = *in[0];
  const auto rank = static_cast<std::int64_t>(out.shape.size());
  std::int64_t axis = ctx.attrs.get_int("axis", 1);
  if (axis < 0) axis += rank;
  if (axis < 0 || axis > rank) fail(ctx, "axis out of range");
  const auto outer = static_cast<std::int64_t>(count(Shape(out.shape.begin(), out.shape.begin() + axis)));
  const auto inner = static_cast<std::int64_t>(count(Shape(out.shape.begin() + axis, out.shape.end())));
  out.shape = {outer, inner};
  return {std::move(out)};
}

Outputs op_reshape(const OpContext& ctx, const Inputs& in) {
  if (in.empty() || in[0] == nullptr) fail(ctx, "missing input 0");
  const Value& target = need(ctx, in, 1, true);
  Value out = *in[0];
  const bool allow_zero = ctx.attrs.get_int("allowzero", 0) != 0;
  Shape shape(target.i.begin(), target.i.end());
  int infer = -1;
  std::size_t known = 1;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (shape[d] == 0 && !allow_zero) {
      if (d >= out.shape.size()) fail(ctx, "0 refers to a missing input dimension");
      shape[d] = out.shape[d];
    }
    if (shape[d] == -1) {
      if (infer >= 0) fail(ctx, "more than one -1 in target shape");
      infer = static_cast<int>(d);
    } else if (shape[d] < 0) {
      fail(ctx, "negative target dimension");
    } else {
      known *= static_cast<std::size_t>(shape[d]);
    }
  }
  const std::size_t total = out.size();
  if (infer >= 0) {
    if (known == 0 || total % known != 0) fail(ctx, "cannot infer -1 for " + shape_str(out.shape));
    shape[static_cast<std::size_t>(infer)] = static_cast<std::int64_t>(total / known);
  }
  if (count(shape) != total) fail(ctx, "cannot reshape " + shape_str(out.shape) + " to " + shape_str(shape));
  out.shape = shape;
  return {std::move(out)};
}

Outputs op_shape(const OpContext& ctx, const Inputs& in) {
  if (in.empty() || in[0] == nullptr) fail(ctx, "missing input 0");
  const Shape& s = in[0]->shape;
  const auto rank = static_cast<std::int64_t>(s.size());
  std::int64_t start = ctx.attrs.get_int("start", 0);
  std::int64_t end = ctx.attrs.get_int("end", rank);
  if (start < 0) start += rank;
  if (end < 0) end += rank;
  start = std::clamp<std::int64_t>(start, 0, rank);
  end = std::clamp<std::int64_t>(end, start, rank);
  return {int_value({end - start}, Shape(s.begin() + start, s.begin() + end))};
}

std::vector<std::int64_t> axes_from(const OpContext& ctx, const Inputs& in, std::size_t input_index) {
  if (in.size() > input_index && in[input_index] != nullptr) {
    return need(ctx, in, input_index, true).i;
  }
  return ctx.attrs.get_ints("axes", {});
}

Outputs op_unsqueeze(const OpContext& ctx, const Inputs& in) {
  if (in.empty() || in[0] == nullptr) fail(ctx, "missing input 0");
  Value out = *in[0];
  const auto axes = axes_from(ctx, in, 1);
  const std::size_t rank = out.shape.size() + axes.size();
  std::vector<bool> inserted(rank, false);
  for (auto a : axes) {
    const auto d = norm_axis(ctx, a, rank);
    if (inserted[d]) fail(ctx, "repeated axis");
    inserted[d] = true;
  }
  Shape shape;
  std::size_t src = 0;
  for (std::size_t d = 0; d < rank; ++d) shape.push_back(inserted[d] ? 1 : out.shape[src++]);
  out.shape = shape;
  return {std::move(out)};
}

Outputs op_gather(const OpContext& ctx, const Inputs& in) {
  if (in.empty() || in[0] == nullptr) fail(ctx, "missing input 0");
  const Value& data = *in[0];
  const Value& idx = need(ctx, in, 1, true);
  const std::size_t axis = norm_axis(ctx, ctx.attrs.get_int("axis", 0), data.shape.size());
  const std::int64_t dim = data.shape[axis];
  const std::size_t outer = count(Shape(data.shape.begin(), data.shape.begin() + static_cast<long>(axis)));
  const std::size_t inner = count(Shape(data.shape.begin() + static_cast<long>(axis) + 1, data.shape.end()));
  Shape shape(data.shape.begin(), data.shape.begin() + static_cast<long>(axis));
  shape.insert(shape.end(), idx.shape.begin(), idx.shape.end());
  shape.insert(shape.end(), data.shape.begin() + static_cast<long>(axis) + 1, data.shape.end());
  Value out;
  out.is_int = data.is_int;
  out.shape = shape;
  auto run = [&](auto member) {
    const auto& src = data.*member;
    auto& dst = out.*member;
    dst.reserve(count(shape));
    for (std::size_t o = 0; o < outer; ++o) {
      for (auto j : idx.i) {
        if (j < -dim || j >= dim) fail(ctx, "index out of range");
        const auto jj = static_cast<std::size_t>(j < 0 ? j + dim : j);
        const auto begin = src.begin() + static_cast<long>((o * static_cast<std::size_t>(dim) + jj) * inner);
        dst.insert(dst.end(), begin, begin + static_cast<long>(inner));
      }
    }
  };
  if (data.is_int) {
    run(&Value::i);
  } else {
    run(&Value::f);
  }
  return {std::move(out)};
}

Outputs op_constant(const OpContext& ctx, const Inputs&) {
  if (const auto* a = ctx.attrs.find("value")) return {tensor_value(a->t())};
  if (const auto* a = ctx.attrs.find("value_float")) {
    Value v = float_value({});
    v.f[0] = a->f();
    return {std::move(v)};
  }
  if (const auto* a = ctx.attrs.find("value_floats")) {
    Value v = float_value({a->floats_size()});
    std::copy(a->floats().begin(), a->floats().end(), v.f.begin());
    return {std::move(v)};
  }
  if (const auto* a = ctx.attrs.find("value_int")) return {int_value({}, {a->i()})};
  if (const auto* a = ctx.attrs.find("value_ints")) {
    return {int_value({a->ints_size()}, std::vector<std::int64_t>(a->ints().begin(), a->ints().end()))};
  }
  fail(ctx, "unsupported constant attribute");
}

// Numpy-style broadcasting for element-wise binary operators.
Outputs op_binary(const OpContext& ctx, const Inputs& in, const std::function<float(float, float)>& f,
                  const std::function<std::int64_t(std::int64_t, std::int64_t)>& fi) {
  if (in.size() < 2 || in[0] == nullptr || in[1] == nullptr) fail(ctx, "needs two inputs");
  const Value& a = *in[0];
  const Value& b = *in[1];
  if (a.is_int != b.is_int) fail(ctx, "inputs differ in element type");
  const std::size_t rank = std::max(a.shape.size(), b.shape.size());
  auto padded = [&](const Shape& s) {
    Shape p(rank - s.size(), 1);
    p.insert(p.end(), s.begin(), s.end());
    return p;
  };
  const Shape sa = padded(a.shape), sb = padded(b.shape);
  Shape shape(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (sa[d] != sb[d] && sa[d] != 1 && sb[d] != 1) {
      fail(ctx, "cannot broadcast " + shape_str(a.shape) + " with " + shape_str(b.shape));
    }
    shape[d] = sa[d] == 1 ? sb[d] : sa[d];
  }
  auto strides = [&](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t d = rank; d-- > 0;) {
      st[d] = s[d] == 1 ? 0 : acc;
      acc *= static_cast<std::size_t>(s[d]);
    }
    return st;
  };
  const auto ta = strides(sa), tb = strides(sb);
  const std::size_t total = count(shape);
  Value out;
  out.is_int = a.is_int;
  out.shape = shape;
  if (a.is_int) {
    out.i.resize(total);
  } else {
    out.f.resize(total);
  }
  std::vector<std::int64_t> pos(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    if (a.is_int) {
      out.i[o] = fi(a.i[ia], b.i[ib]);
    } else {
      out.f[o] = f(a.f[ia], b.f[ib]);
    }
    for (std::size_t d = rank; d-- > 0;) {
      ++pos[d];
      ia += ta[d];
      ib += tb[d];
      if (pos[d] < shape[d]) break;
      ia -= ta[d] * static_cast<std::size_t>(shape[d]);
      ib -= tb[d] * static_cast<std::size_t>(shape[d]);
      pos[d] = 0;
    }
  }
  return {std::move(out)};
}

Outputs op_add(const OpContext& ctx, const Inputs& in) {
  return op_binary(ctx, in, std::plus<float>(), std::plus<std::int64_t>());
}
Outputs op_sub(const OpContext& ctx, const Inputs& in) {
  return op_binary(ctx, in, std::minus<float>(), std::minus<std::int64_t>());
}
Outputs op_mul(const OpContext& ctx, const Inputs& in) {
  return op_binary(ctx, in, std::multiplies<float>(), std::multiplies<std::int64_t>());
}
Outputs op_div(const OpContext& ctx, const Inputs& in) {
  return op_binary(ctx, in, std::divides<float>(), [&](std::int64_t x, std::int64_t y) -> std::int64_t {
    if (y == 0) fail(ctx, "integer division by zero");
    return x / y;
  });
}

Outputs op_gemm(const OpContext& ctx, const Inputs& in) {
  const Value& a = need(ctx, in, 0);
  const Value& b = need(ctx, in, 1);
  const Value* c = in.size() > 2 ? in[2] : nullptr;
  if (a.shape.size() != 2 || b.shape.size() != 2) fail(ctx, "inputs must be matrices");
  const bool ta = ctx.attrs.get_int("transA", 0) != 0;
  const bool tb = ctx.attrs.get_int("transB", 0) != 0;
  const float alpha = ctx.attrs.get_float("alpha", 1.0f);
  const float beta = ctx.attrs.get_float("beta", 1.0f);
  ConstMatMap am(a.f.data(), a.shape[0], a.shape[1]);
  ConstMatMap bm(b.f.data(), b.shape[0], b.shape[1]);
  const std::int64_t m = ta ? a.shape[1] : a.shape[0];
  const std::int64_t k = ta ? a.shape[0] : a.shape[1];
  const std::int64_t n = tb ? b.shape[0] : b.shape[1];
  if ((tb ? b.shape[1] : b.shape[0]) != k) fail(ctx, "inner dimensions differ");
  Value out = float_value({m, n});
  MatMap om(out.f.data(), m, n);
  if (ta && tb) {
    om.noalias() = alpha * (am.transpose() * bm.transpose());
  } else if (ta) {
    om.noalias() = alpha * (am.transpose() * bm);
  } else if (tb) {
    om.noalias() = alpha * (am * bm.transpose());
  } else {
    om.noalias() = alpha * (am * bm);
  }
  if (c != nullptr) {
    Value zero = float_value({m, n});
    const Value* pair[] = {&zero, c};
    const Value cb = op_binary(ctx, Inputs(pair, pair + 2), std::plus<float>(), std::plus<std::int64_t>())[0];
    if (cb.shape != Shape{m, n}) fail(ctx, "C does not broadcast to the output");
    for (std::size_t q = 0; q < out.f.size(); ++q) out.f[q] += beta * cb.f[q];
  }
  return {std::move(out)};
}

Outputs op_matmul(const OpContext& ctx, const Inputs& in) {
  const Value& a = need(ctx, in, 0);
  const Value& b = need(ctx, in, 1);
  if (a.shape.size() < 2 || b.shape.size() != 2) fail(ctx, "only [..., K] x [K, N] is supported");
  const std::int64_t k = a.shape.back();
  if (b.shape[0] != k) fail(ctx, "inner dimensions differ");
  const auto rows = static_cast<std::int64_t>(a.f.size()) / std::max<std::int64_t>(k, 1);
  Shape shape = a.shape;
  shape.back() = b.shape[1];
  Value out = float_value(shape);
  MatMap(out.f.data(), rows, b.shape[1]).noalias() =
      ConstMatMap(a.f.data(), rows, k) * ConstMatMap(b.f.data(), k, b.shape[1]);
  return {std::move(out)};
}

Outputs op_reduce_mean(const OpContext& ctx, const Inputs& in) {
  const Value& x = need(ctx, in, 0);
  auto axes = axes_from(ctx, in, 1);
  const bool keep = ctx.attrs.get_int("keepdims", 1) != 0;
  const std::size_t rank = x.shape.size();
  std::vector<bool> reduce(rank, false);
  if (axes.empty()) {
    if (ctx.attrs.get_int("noop_with_empty_axes", 0) != 0) return {x};
    reduce.assign(rank, true);
  }
  for (auto a : axes) reduce[norm_axis(ctx, a, rank)] = true;
  Shape kept_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) kept_shape[d] = reduce[d] ? 1 : x.shape[d];
  Value out = float_value(kept_shape);
  std::vector<double> acc(out.f.size(), 0.0);
  std::vector<std::size_t> out_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t d = rank; d-- > 0;) {
    out_stride[d] = reduce[d] ? 0 : s;
    s *= static_cast<std::size_t>(kept_shape[d]);
  }
  Shape pos(rank, 0);
  std::size_t o = 0;
  for (std::size_t q = 0; q < x.f.size(); ++q) {
    acc[o] += x.f[q];
    for (std::size_t d = rank; d-- > 0;) {
      ++pos[d];
      o += out_stride[d];
      if (pos[d] < x.shape[d]) break;
      o -= out_stride[d] * static_cast<std::size_t>(x.shape[d]);
      pos[d] = 0;
    }
  }
  const double denom = static_cast<double>(x.f.size()) / static_cast<double>(std::max<std::size_t>(out.f.size(), 1));
  for (std::size_t q = 0; q < acc.size(); ++q) out.f[q] = static_cast<float>(acc[q] / denom);
  if (!keep) {
    Shape squeezed;
    for (std::size_t d = 0; d < rank; ++d) {
      if (!reduce[d]) squeezed.push_back(x.shape[d]);
    }
    out.shape = squeezed;
  }
  return {std::move(out)};
}

using OpFn = Outputs (*)(const OpContext&, const Inputs&);

const std::map<std::string, OpFn>& op_table() {
  static const std::map<std::string, OpFn> table = {
      {"Add", op_add},
      {"AveragePool", op_avgpool},
      {"BatchNormalization", op_batchnorm},
      {"Concat", op_concat},
      {"Constant", op_constant},
      {"Conv", op_conv},
      {"Div", op_div},
      {"Flatten", op_flatten},
      {"Gather", op_gather},
      {"Gemm", op_gemm},
      {"GlobalAveragePool", op_global_avgpool},
      {"Identity", op_identity},
      {"MatMul", op_matmul},
      {"MaxPool", op_maxpool},
      {"Mul", op_mul},
      {"ReduceMean", op_reduce_mean},
      {"Relu", op_relu},
      {"Reshape", op_reshape},
      {"Shape", op_shape},
      {"Sub", op_sub},
      {"Unsqueeze", op_unsqueeze},
  };
  return table;
}

}  // namespace

const std::vector<std::string>& supported_ops() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, fn] : op_table()) out.push_back(name);
    return out;
  }();
  return names;
}

struct Model::Impl {
  std::string origin;
  std::vector<onnx::NodeProto> nodes;
  std::vector<OpFn> kernels;
  std::unordered_map<std::string, Value> initializers;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  // Node that produces each value; absent for inputs and initializers.
  std::unordered_map<std::string, std::size_t> producer;
};

Model::Model(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Model::~Model() = default;

std::shared_ptr<Model> Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
    throw IoError("cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::shared_ptr<Model> Model::parse(std::string_view bytes, const std::string& origin) {
  if (bytes.size() > static_cast<std::size_t>(INT_MAX)) throw MalformedModel(origin + ": model larger than 2 GiB");
  google::protobuf::io::ArrayInputStream raw(bytes.data(), static_cast<int>(bytes.size()));
  google::protobuf::io::CodedInputStream coded(&raw);
  coded.SetTotalBytesLimit(INT_MAX);
  onnx::ModelProto proto;
  if (!proto.ParseFromCodedStream(&coded) || !coded.ConsumedEntireMessage()) {
    throw MalformedModel(origin + ": not a valid ONNX protobuf");
  }
  return from_proto(proto, origin);
}

std::shared_ptr<Model> Model::from_proto(const onnx::ModelProto& proto, const std::string& origin) {
  auto bad = [&](const std::string& what) { return MalformedModel(origin + ": " + what); };
  if (!proto.has_graph()) throw bad("model has no graph");
  for (const auto& opset : proto.opset_import()) {
    if ((opset.domain().empty() || opset.domain() == "ai.onnx") && opset.version() < 7) {
      throw bad("opset " + std::to_string(opset.version()) + " is too old");
    }
  }
  const auto& graph = proto.graph();
  auto impl = std::make_unique<Impl>();
  impl->origin = origin;

  std::set<std::string> defined;
  try {
    for (const auto& t : graph.initializer()) {
      impl->initializers.emplace(t.name(), tensor_value(t));
      defined.insert(t.name());
    }
  } catch (const MalformedModel& e) {
    throw bad(e.what());
  }
  for (const auto& vi : graph.input()) {
    if (!impl->initializers.count(vi.name())) {
      impl->inputs.push_back(vi.name());
      defined.insert(vi.name());
    }
  }
  for (const auto& vi : graph.output()) impl->outputs.push_back(vi.name());

  const auto& table = op_table();
  for (const auto& node : graph.node()) {
    if (!node.domain().empty() && node.domain() != "ai.onnx") {
      throw bad("operator domain '" + node.domain() + "' is not supported");
    }
    const auto it = table.find(node.op_type());
    if (it == table.end()) throw bad("operator " + node.op_type() + " is not supported");
    for (const auto& name : node.input()) {
      if (!name.empty() && !defined.count(name)) {
        throw bad("node '" + node.name() + "' reads '" + name + "' before it is produced");
      }
    }
    for (const auto& name : node.output()) {
      if (name.empty()) continue;
      if (!defined.insert(name).second) throw bad("value '" + name + "' is produced twice");
      impl->producer[name] = impl->nodes.size();
    }
    impl->nodes.push_back(node);
    impl->kernels.push_back(it->second);
  }
  for (const auto& name : impl->outputs) {
    if (!defined.count(name)) throw bad("graph output '" + name + "' is never produced");
  }
  return std::shared_ptr<Model>(new Model(std::move(impl)));
}

const std::vector<std::string>& Model::inputs() const noexcept { return impl_->inputs; }
const std::vector<std::string>& Model::outputs() const noexcept { return impl_->outputs; }

Tensor Model::run(const std::string& input_name, const Tensor& input, const std::string& output_name,
                  unsigned threads) const {
  const Impl& m = *impl_;
  if (std::find(m.inputs.begin(), m.inputs.end(), input_name) == m.inputs.end()) {
    throw MalformedModel(m.origin + ": graph has no input named '" + input_name + "'");
  }
  if (std::find(m.outputs.begin(), m.outputs.end(), output_name) == m.outputs.end()) {
    throw MalformedModel(m.origin + ": graph has no output named '" + output_name + "'");
  }
  if (input.data.size() != input.elements()) throw InvalidArgument("input tensor data does not match its shape");

  // Nodes the requested output depends on, and the last reader of each value.
  std::vector<bool> needed(m.nodes.size(), false);
  std::vector<std::string> stack{output_name};
  while (!stack.empty()) {
    const auto name = std::move(stack.back());
    stack.pop_back();
    const auto it = m.producer.find(name);
    if (it == m.producer.end() || needed[it->second]) continue;
    needed[it->second] = true;
    for (const auto& in : m.nodes[it->second].input()) {
      if (!in.empty()) stack.push_back(in);
    }
  }
  std::unordered_map<std::string, std::size_t> last_use;
  for (std::size_t k = 0; k < m.nodes.size(); ++k) {
    if (!needed[k]) continue;
    for (const auto& in : m.nodes[k].input()) last_use[in] = k;
  }

  std::unordered_map<std::string, Value> values;
  {
    Value v;
    v.shape = input.shape;
    v.f = input.data;
    values.emplace(input_name, std::move(v));
  }
  auto lookup = [&](const std::string& name) -> const Value* {
    if (name.empty()) return nullptr;
    if (const auto it = values.find(name); it != values.end()) return &it->second;
    if (const auto it = m.initializers.find(name); it != m.initializers.end()) return &it->second;
    return nullptr;
  };

  for (std::size_t k = 0; k < m.nodes.size(); ++k) {
    if (!needed[k]) continue;
    const auto& node = m.nodes[k];
    Inputs ins;
    for (const auto& name : node.input()) {
      const Value* v = lookup(name);
      if (!name.empty() && v == nullptr) {
        throw MalformedModel(m.origin + ": value '" + name + "' is unavailable (a graph input other than '" +
                             input_name + "'?)");
      }
      ins.push_back(v);
    }
    const Attrs attrs(node);
    Outputs outs = m.kernels[k](OpContext{node, attrs, threads}, ins);
    for (int o = 0; o < node.output_size() && o < static_cast<int>(outs.size()); ++o) {
      if (!node.output(o).empty()) values[node.output(o)] = std::move(outs[static_cast<std::size_t>(o)]);
    }
    for (const auto& name : node.input()) {
      const auto it = last_use.find(name);
      if (it != last_use.end() && it->second == k && name != output_name) values.erase(name);
    }
  }

  const Value* result = lookup(output_name);
  if (result == nullptr) throw MalformedModel(m.origin + ": output '" + output_name + "' was not computed");
  if (result->is_int) throw MalformedModel(m.origin + ": output '" + output_name + "' is not float");
  return Tensor{result->shape, result->f};
}

}  // namespace magscope::deep::onnx_rt
