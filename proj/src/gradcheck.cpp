#include "mudd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mudd {

std::string GradCheckReport::describe() const {
    std::ostringstream os;
    if (ok) {
        os << "gradient check passed: worst rel error " << worst_rel << " (tol " << tol << ")";
    } else {
        os << "gradient check FAILED at parameter '" << worst_param << "' element " << worst_index
           << ": analytic " << worst_analytic << " vs numeric " << worst_numeric << " (rel "
           << worst_rel << ", tol " << tol << ")";
    }
    return os.str();
}

namespace {

template <typename S>
double eval_loss(const std::function<typename Tape<S>::Val(Tape<S>&)>& build,
                 const std::string& context) {
    Tape<S> tape;
    auto loss = build(tape);
    const double v = static_cast<double>(tape.val(loss).data[0]);
    if (!std::isfinite(v))
        throw std::runtime_error("grad_check: non-finite loss (" + context + ")");
    return v;
}

}  // namespace

template <typename S>
GradCheckReport grad_check(const std::function<typename Tape<S>::Val(Tape<S>&)>& build,
                           std::span<Parameter<S>* const> params, double h, double tol) {
    GradCheckReport rep;
    rep.tol = tol;

    for (Parameter<S>* p : params) p->zero_grad();
    {
        Tape<S> tape;
        auto loss = build(tape);
        if (!std::isfinite(static_cast<double>(tape.val(loss).data[0])))
            throw std::runtime_error("grad_check: non-finite loss (unperturbed forward)");
        tape.backward(loss);
    }

    for (Parameter<S>* p : params) {
        double param_worst = 0.0;
        for (int64_t i = 0; i < p->value.size(); ++i) {
            const S saved = p->value.data[i];
            p->value.data[i] = saved + static_cast<S>(h);
            const double lp = eval_loss<S>(build, p->name + " +h");
            p->value.data[i] = saved - static_cast<S>(h);
            const double lm = eval_loss<S>(build, p->name + " -h");
            p->value.data[i] = saved;

            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = static_cast<double>(p->grad.data[i]);
            const double denom = std::max(std::max(std::fabs(analytic), std::fabs(numeric)), 1e-6);
            const double rel = std::fabs(analytic - numeric) / denom;
            param_worst = std::max(param_worst, rel);
            if (rel > rep.worst_rel) {
                rep.worst_rel = rel;
                rep.worst_param = p->name;
                rep.worst_index = i;
                rep.worst_analytic = analytic;
                rep.worst_numeric = numeric;
            }
        }
        rep.per_param.emplace_back(p->name, param_worst);
    }
    rep.ok = rep.worst_rel <= tol;
    return rep;
}

template GradCheckReport grad_check<float>(const std::function<Tape<float>::Val(Tape<float>&)>&,
                                           std::span<Parameter<float>* const>, double, double);
template GradCheckReport grad_check<double>(const std::function<Tape<double>::Val(Tape<double>&)>&,
                                            std::span<Parameter<double>* const>, double, double);

}  // namespace mudd
