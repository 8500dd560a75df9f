#include "vaeunet/latent.hpp"

#include <stdexcept>
#include <string>

namespace vaeunet {

DiagonalGaussianField::DiagonalGaussianField(ag::Var mean_, ag::Var log_var_)
    : mean(std::move(mean_)), log_var(std::move(log_var_)) {
    require_same_shape(mean.shape(), log_var.shape(), "DiagonalGaussianField mean/log_var");
}

DiagonalGaussianField DiagonalGaussianField::constant(Tensor mean, Tensor log_var) {
    return {ag::Var::constant(std::move(mean)), ag::Var::constant(std::move(log_var))};
}

ag::Var gaussian_kl(const DiagonalGaussianField& q, const DiagonalGaussianField& p) {
    require_same_shape(q.shape(), p.shape(), "gaussian_kl q/p");
    return ag::diag_gaussian_kl(q.mean, q.log_var, p.mean, p.log_var);
}

ag::Var sample_latent(const DiagonalGaussianField& g, const Tensor& noise) {
    return ag::reparameterize(g.mean, g.log_var, noise);
}

ag::Var mean_latent(const DiagonalGaussianField& g) { return g.mean; }

KlReport hierarchical_kl(const std::vector<DiagonalGaussianField>& q_levels,
                         const std::vector<DiagonalGaussianField>& p_levels, KlReduction reduction) {
    if (q_levels.size() != p_levels.size()) {
        throw std::invalid_argument("hierarchical_kl: " + std::to_string(q_levels.size()) + " q levels vs " +
                                    std::to_string(p_levels.size()) + " p levels");
    }
    if (q_levels.empty()) {
        throw std::invalid_argument("hierarchical_kl: no levels");
    }
    KlReport report;
    std::vector<ag::Var> terms;
    terms.reserve(q_levels.size());
    for (std::size_t i = 0; i < q_levels.size(); ++i) {
        terms.push_back(gaussian_kl(q_levels[i], p_levels[i]));
        report.per_level.push_back(terms.back().item());
    }
    const std::vector<double> ones(terms.size(), 1.0);
    report.reduced_term = ag::weighted_sum(terms, ones);
    if (reduction == KlReduction::mean) {
        report.reduced_term = ag::divide(report.reduced_term, static_cast<double>(terms.size()));
    }
    report.reduced = report.reduced_term.item();
    return report;
}

}  // namespace vaeunet
