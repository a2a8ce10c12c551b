#include "pvilab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace pvilab {

namespace {

double rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

void require_f64(const Tensor& t, const char* what) {
    if (t.dtype() != DType::f64) {
        throw std::invalid_argument(std::string("gradcheck requires float64 ") + what + ", got " +
                                    dtype_name(t.dtype()));
    }
}

}  // namespace

double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    require_f64(x, "input");
    Tensor leaf = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()),
                               DType::f64, true);
    Tensor y = f(leaf);
    if (y.numel() != 1) throw ShapeError("gradcheck: function must be scalar-valued");
    backward(y);
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

    NoGradGuard guard;
    double worst = 0.0;
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        values[i] = orig + h;
        const double up = f(leaf).item();
        values[i] = orig - h;
        const double down = f(leaf).item();
        values[i] = orig;
        worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * h)));
    }
    return worst;
}

double gradcheck_params(ParamStore& store, const std::function<Tensor()>& loss,
                        const ParamGradcheckOptions& options) {
    for (const auto& e : store.entries()) {
        if (e.trainable) require_f64(e.value, ("parameter " + e.name).c_str());
    }
    store.zero_grad();
    backward(loss());

    std::mt19937_64 rng(options.seed);
    NoGradGuard guard;
    double worst = 0.0;
    for (const auto& name : store.names()) {
        if (!store.trainable(name)) continue;
        Tensor& p = store.get(name);
        std::vector<double> analytic(p.numel(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

        std::vector<std::size_t> coords(p.numel());
        std::iota(coords.begin(), coords.end(), 0);
        if (options.coords_per_entry != 0 && coords.size() > options.coords_per_entry) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.coords_per_entry);
        }
        auto values = p.mutable_data();
        for (std::size_t i : coords) {
            const double orig = values[i];
            values[i] = orig + options.h;
            const double up = loss().item();
            values[i] = orig - options.h;
            const double down = loss().item();
            values[i] = orig;
            worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * options.h)));
        }
    }
    store.zero_grad();
    return worst;
}

}  // namespace pvilab
