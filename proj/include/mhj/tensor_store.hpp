#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "mhj/errors.hpp"

namespace mhj {

// Dense row-major tensor of 64-bit reals.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    std::size_t size() const { return data.size(); }

    static Tensor zeros(std::vector<std::size_t> shape);
};

// Named, ordered collection of tensors. Iteration order is lexicographic by
// name (std::map), which fixes the canonical flattening order used by
// ranking, cosine similarity and the checkpoint format: names ascending,
// row-major within each tensor. ParamSets are treated as immutable values
// after construction; mutation happens by building a replacement.
struct ParamSet {
    std::map<std::string, Tensor> entries;

    std::size_t scalar_count() const;
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    bool shape_compatible(const ParamSet& other) const;
};

// Element-wise difference from a declared base, same shape as a ParamSet.
struct TaskVector {
    ParamSet delta;
};

void check_shape_compatible(const ParamSet& a, const ParamSet& b);
void check_finite(const ParamSet& p, const char* what);

// result = finetuned - base, element-wise.
TaskVector task_vector(const ParamSet& finetuned, const ParamSet& base);

// result = base + scale * delta, element-wise. Throws NonFiniteResult on
// overflow to inf/nan.
ParamSet apply_delta(const ParamSet& base, const TaskVector& delta, double scale);

// Cosine of the angle between the flattened vectors. Throws ZeroVector when
// either side has zero norm.
double cosine_similarity(const TaskVector& a, const TaskVector& b);

// Canonical flattening: lexicographic name order, row-major per tensor.
std::vector<double> flatten(const ParamSet& p);
ParamSet unflatten_like(const ParamSet& shape_ref, const std::vector<double>& flat);
ParamSet zeros_like(const ParamSet& p);

// acc += scale * x, in place. Shapes must match.
void add_scaled(ParamSet& acc, const ParamSet& x, double scale);

double l2_norm(const ParamSet& p);

// Checkpoint file format (bit-exact):
//   magic "MHJ1"
//   u32 little-endian header length
//   UTF-8 JSON header {"dtype":"f64le","params":[{"name":...,"shape":[...]},...]}
//   payload: concatenated row-major little-endian f64 in header order.
// Tensors are written in canonical (lexicographic) order. All values must be
// finite; round trips preserve every bit, including subnormals and signed
// zero.
void save_checkpoint(const ParamSet& p, const std::string& path);
ParamSet load_checkpoint(const std::string& path);

} // namespace mhj
