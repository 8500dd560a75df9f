#pragma once

#include "vaeunet/network.hpp"

namespace vaeunet {

inline constexpr double kDiceSmooth = 1e-5;

struct LossConfig {
    double beta = 0.1;
    double ce_weight = 0.4;
    double dice_weight = 0.6;

    void validate() const;
};

struct LossBreakdown {
    double cross_entropy = 0.0;
    double dice = 0.0;
    double kl = 0.0;
    double total = 0.0;
    ag::Var total_term;
};

/// Mean over pixels of -sum_c y_c log softmax(logits)_c. Rejects non-finite logits.
ag::Var cross_entropy_loss(const ag::Var& logits, const Tensor& y_onehot);

/// 1 - mean soft Dice over the foreground classes (1..K-1), smoothing kDiceSmooth.
ag::Var dice_loss(const ag::Var& logits, const Tensor& y_onehot);

/// ce_weight * CE + dice_weight * Dice + beta * kl.reduced.
LossBreakdown elbo_loss(const ForwardTrace& trace, const Tensor& y_onehot, const LossConfig& cfg);

}  // namespace vaeunet
