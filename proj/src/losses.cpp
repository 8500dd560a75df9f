#include "vaeunet/losses.hpp"

#include <array>
#include <stdexcept>

namespace vaeunet {

void LossConfig::validate() const {
    if (!(beta >= 0.0)) {
        throw std::invalid_argument("beta must be >= 0");
    }
    if (!(ce_weight >= 0.0) || !(dice_weight >= 0.0)) {
        throw std::invalid_argument("loss weights must be >= 0");
    }
}

ag::Var cross_entropy_loss(const ag::Var& logits, const Tensor& y_onehot) {
    if (!logits.value().all_finite()) {
        throw std::domain_error("cross_entropy_loss: non-finite logits");
    }
    return ag::softmax_cross_entropy(logits, y_onehot);
}

ag::Var dice_loss(const ag::Var& logits, const Tensor& y_onehot) {
    return ag::soft_dice_loss(logits, y_onehot, 1, kDiceSmooth);
}

LossBreakdown elbo_loss(const ForwardTrace& trace, const Tensor& y_onehot, const LossConfig& cfg) {
    cfg.validate();
    if (!trace.kl.reduced_term.valid()) {
        throw std::invalid_argument("elbo_loss: trace carries no KL term (inference trace?)");
    }
    const ag::Var ce = cross_entropy_loss(trace.logits, y_onehot);
    const ag::Var dice = dice_loss(trace.logits, y_onehot);
    const std::array<ag::Var, 3> terms{ce, dice, trace.kl.reduced_term};
    const std::array<double, 3> weights{cfg.ce_weight, cfg.dice_weight, cfg.beta};

    LossBreakdown out;
    out.cross_entropy = ce.item();
    out.dice = dice.item();
    out.kl = trace.kl.reduced;
    out.total_term = ag::weighted_sum(terms, weights);
    out.total = out.total_term.item();
    return out;
}

}  // namespace vaeunet
