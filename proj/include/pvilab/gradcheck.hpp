#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

#include "pvilab/param_store.hpp"
#include "pvilab/tensor.hpp"

namespace pvilab {

// Central-difference check of d f / d x. Returns
//   max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
// f must return a scalar; x must be float64.
double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

struct ParamGradcheckOptions {
    double h = 1e-5;
    // Coordinates sampled per entry (0 = every coordinate).
    std::size_t coords_per_entry = 0;
    std::uint64_t seed = 0;
};

// Same check against every trainable entry of `store`, perturbing values in
// place. `loss` must rebuild the forward pass from the store on each call.
double gradcheck_params(ParamStore& store, const std::function<Tensor()>& loss,
                        const ParamGradcheckOptions& options = {});

}  // namespace pvilab
