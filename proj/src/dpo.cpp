#include "prefpipe/dpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "prefpipe/errors.hpp"
#include "prefpipe/record_io.hpp"
#include "prefpipe/rng.hpp"

namespace prefpipe {

namespace {

constexpr double kProbFloor = 1e-12;

double log_sigmoid(double z) {
    // -log(1 + exp(-z)) without overflow on either tail.
    if (z >= 0) return -std::log1p(std::exp(-z));
    return z - std::log1p(std::exp(z));
}

double sigmoid(double z) {
    if (z >= 0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    double e = std::exp(z);
    return e / (1.0 + e);
}

void check_shapes(const TabularPolicy& policy, const TabularPolicy& ref) {
    if (policy.contexts() != ref.contexts() || policy.outcomes() != ref.outcomes()) {
        throw ValidationError("policy and reference shapes differ");
    }
}

void check_pair(const TabularPolicy& policy, const TrainPair& pair) {
    if (pair.context >= policy.contexts() || pair.chosen >= policy.outcomes() ||
        pair.rejected >= policy.outcomes()) {
        throw ValidationError("pair indices out of range");
    }
    if (pair.chosen == pair.rejected) {
        throw ValidationError("pair compares an outcome with itself");
    }
}

double margin_of(const TabularPolicy& policy, const TabularPolicy& ref, const TrainPair& pair,
                 double beta) {
    return implicit_reward(policy, ref, pair.context, pair.chosen, beta) -
           implicit_reward(policy, ref, pair.context, pair.rejected, beta);
}

}  // namespace

TabularPolicy::TabularPolicy(std::size_t contexts, std::size_t outcomes,
                             std::vector<double> logits)
    : contexts_(contexts), outcomes_(outcomes), logits_(std::move(logits)) {
    if (contexts_ == 0 || outcomes_ == 0) {
        throw ValidationError("policy needs at least one context and one outcome");
    }
    if (logits_.size() != contexts_ * outcomes_) {
        throw ValidationError("logit matrix size " + std::to_string(logits_.size()) +
                              " does not match " + std::to_string(contexts_) + "x" +
                              std::to_string(outcomes_));
    }
    for (double v : logits_) {
        if (!std::isfinite(v)) {
            throw ValidationError("logits must be finite");
        }
    }
}

TabularPolicy TabularPolicy::uniform(std::size_t contexts, std::size_t outcomes) {
    return TabularPolicy(contexts, outcomes, std::vector<double>(contexts * outcomes, 0.0));
}

std::vector<double> TabularPolicy::row_probs(std::size_t x) const {
    if (x >= contexts_) {
        throw ValidationError("context index out of range");
    }
    std::vector<double> probs(outcomes_);
    double max_logit = logit(x, 0);
    for (std::size_t y = 1; y < outcomes_; ++y) {
        max_logit = std::max(max_logit, logit(x, y));
    }
    double total = 0;
    for (std::size_t y = 0; y < outcomes_; ++y) {
        probs[y] = std::exp(logit(x, y) - max_logit);
        total += probs[y];
    }
    for (double& p : probs) p /= total;
    return probs;
}

double TabularPolicy::prob(std::size_t x, std::size_t y) const {
    if (y >= outcomes_) {
        throw ValidationError("outcome index out of range");
    }
    return row_probs(x)[y];
}

double TabularPolicy::log_prob(std::size_t x, std::size_t y) const {
    return std::log(std::max(prob(x, y), kProbFloor));
}

DpoConfig DpoConfig::full_scale_preset() {
    DpoConfig c;
    c.peak_lr = 1e-5;
    c.batch_size = 256;
    return c;
}

void DpoConfig::validate() const {
    if (!(beta > 0)) throw ConfigError("beta must be positive");
    if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
    if (!(warmup_ratio >= 0 && warmup_ratio < 1)) {
        throw ConfigError("warmup_ratio must lie in [0, 1)");
    }
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("adam_beta2 must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
}

double bt_prob(double r_w, double r_l) { return sigmoid(r_w - r_l); }

double implicit_reward(const TabularPolicy& policy, const TabularPolicy& ref, std::size_t x,
                       std::size_t y, double beta) {
    check_shapes(policy, ref);
    if (!(beta > 0)) throw ValidationError("beta must be positive");
    return beta * (policy.log_prob(x, y) - ref.log_prob(x, y));
}

TabularPolicy optimal_policy(const TabularPolicy& ref, const RewardTable& reward, double beta) {
    if (ref.contexts() != reward.contexts || ref.outcomes() != reward.outcomes) {
        throw ValidationError("reward table shape does not match the reference policy");
    }
    if (!(beta > 0)) throw ValidationError("beta must be positive");
    std::vector<double> logits(ref.contexts() * ref.outcomes());
    for (std::size_t x = 0; x < ref.contexts(); ++x) {
        auto ref_probs = ref.row_probs(x);
        for (std::size_t y = 0; y < ref.outcomes(); ++y) {
            logits[x * ref.outcomes() + y] =
                std::log(std::max(ref_probs[y], kProbFloor)) + reward.at(x, y) / beta;
        }
    }
    // Softmax of these logits is exactly pi_ref * exp(r / beta) / Z; the
    // row_probs max shift provides the overflow safety.
    return TabularPolicy(ref.contexts(), ref.outcomes(), std::move(logits));
}

double dpo_loss(const TabularPolicy& policy, const TabularPolicy& ref, const TrainPair& pair,
                double beta) {
    check_shapes(policy, ref);
    check_pair(policy, pair);
    return -log_sigmoid(beta * ((policy.log_prob(pair.context, pair.chosen) -
                                 ref.log_prob(pair.context, pair.chosen)) -
                                (policy.log_prob(pair.context, pair.rejected) -
                                 ref.log_prob(pair.context, pair.rejected))));
}

std::vector<double> dpo_grad(const TabularPolicy& policy, const TabularPolicy& ref,
                             const TrainPair& pair, double beta) {
    check_shapes(policy, ref);
    check_pair(policy, pair);
    double delta = (policy.log_prob(pair.context, pair.chosen) -
                    ref.log_prob(pair.context, pair.chosen)) -
                   (policy.log_prob(pair.context, pair.rejected) -
                    ref.log_prob(pair.context, pair.rejected));
    // The loss depends on the row logits only through
    // logit(chosen) - logit(rejected); the softmax normalizer cancels.
    double coeff = -beta * sigmoid(-beta * delta);
    std::vector<double> grad(policy.outcomes(), 0.0);
    grad[pair.chosen] += coeff;
    grad[pair.rejected] -= coeff;
    return grad;
}

double kl_divergence(const TabularPolicy& policy, const TabularPolicy& ref, std::size_t x) {
    check_shapes(policy, ref);
    auto p = policy.row_probs(x);
    auto q = ref.row_probs(x);
    double kl = 0;
    for (std::size_t y = 0; y < p.size(); ++y) {
        kl += p[y] * (std::log(std::max(p[y], kProbFloor)) -
                      std::log(std::max(q[y], kProbFloor)));
    }
    return kl;
}

std::vector<TrainPair> bt_weighted_pairs(const RewardTable& reward) {
    std::vector<TrainPair> pairs;
    pairs.reserve(reward.contexts * reward.outcomes * (reward.outcomes - 1));
    for (std::size_t x = 0; x < reward.contexts; ++x) {
        for (std::size_t w = 0; w < reward.outcomes; ++w) {
            for (std::size_t l = 0; l < reward.outcomes; ++l) {
                if (w == l) continue;
                TrainPair p;
                p.context = x;
                p.chosen = w;
                p.rejected = l;
                p.weight = bt_prob(reward.at(x, w), reward.at(x, l));
                pairs.push_back(p);
            }
        }
    }
    return pairs;
}

namespace {

struct BatchMetrics {
    double loss = 0.0;
    double margin = 0.0;
};

BatchMetrics weighted_metrics(const TabularPolicy& policy, const TabularPolicy& ref,
                              const std::vector<TrainPair>& pairs, double beta) {
    BatchMetrics m;
    if (pairs.empty()) return m;
    double total_weight = 0;
    for (const auto& p : pairs) {
        double margin = margin_of(policy, ref, p, beta);
        m.loss += p.weight * -log_sigmoid(margin);
        m.margin += p.weight * margin;
        total_weight += p.weight;
    }
    if (total_weight > 0) {
        m.loss /= total_weight;
        m.margin /= total_weight;
    }
    return m;
}

}  // namespace

TrainResult train(const std::vector<TrainPair>& pairs, const TabularPolicy& ref,
                  const DpoConfig& config, const std::vector<TrainPair>& validation_pairs) {
    config.validate();
    if (pairs.empty()) {
        throw ValidationError("training needs at least one pair");
    }
    for (const auto& p : pairs) check_pair(ref, p);
    for (const auto& p : validation_pairs) check_pair(ref, p);

    TabularPolicy policy = ref;
    const std::size_t n_params = ref.contexts() * ref.outcomes();
    std::vector<double> m(n_params, 0.0), v(n_params, 0.0);

    const std::size_t steps_per_epoch = (pairs.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = config.epochs * steps_per_epoch;
    const std::size_t warmup_steps =
        static_cast<std::size_t>(config.warmup_ratio * static_cast<double>(total_steps));

    TrainHistory history;
    history.train_loss.reserve(total_steps);

    // Precompute per-row log pi_ref once; the reference never changes.
    std::vector<double> ref_log(n_params);
    for (std::size_t x = 0; x < ref.contexts(); ++x) {
        auto probs = ref.row_probs(x);
        for (std::size_t y = 0; y < ref.outcomes(); ++y) {
            ref_log[x * ref.outcomes() + y] = std::log(std::max(probs[y], kProbFloor));
        }
    }

    auto snapshot = [&](std::size_t step) {
        BatchMetrics train_m = weighted_metrics(policy, ref, pairs, config.beta);
        BatchMetrics val_m = weighted_metrics(policy, ref, validation_pairs, config.beta);
        TrainHistory::Eval e;
        e.step = step;
        e.train_loss = train_m.loss;
        e.val_loss = val_m.loss;
        e.loss_ratio = train_m.loss > 0 ? val_m.loss / train_m.loss : 0.0;
        e.train_margin = train_m.margin;
        e.val_margin = val_m.margin;
        history.evals.push_back(e);
    };

    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(config.seed));

    std::vector<double> grad(n_params);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            std::size_t end = std::min(begin + config.batch_size, order.size());
            ++step;

            double lr;
            if (step <= warmup_steps) {
                lr = config.peak_lr * static_cast<double>(step) /
                     static_cast<double>(warmup_steps);
            } else if (total_steps == warmup_steps) {
                lr = config.peak_lr;
            } else {
                double progress = static_cast<double>(step - warmup_steps) /
                                  static_cast<double>(total_steps - warmup_steps);
                lr = config.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
            }

            std::fill(grad.begin(), grad.end(), 0.0);
            double batch_loss = 0;
            double batch_weight = 0;
            for (std::size_t k = begin; k < end; ++k) {
                const TrainPair& p = pairs[order[k]];
                const std::size_t row = p.context * ref.outcomes();
                double delta = (policy.logit(p.context, p.chosen) - ref_log[row + p.chosen]) -
                               (policy.logit(p.context, p.rejected) - ref_log[row + p.rejected]);
                // Row logits enter the loss only through their difference,
                // so raw logits stand in for log-probabilities here.
                double z = config.beta * delta;
                batch_loss += p.weight * -log_sigmoid(z);
                double coeff = -config.beta * sigmoid(-z) * p.weight;
                grad[row + p.chosen] += coeff;
                grad[row + p.rejected] -= coeff;
                batch_weight += p.weight;
            }
            if (batch_weight > 0) {
                batch_loss /= batch_weight;
                for (double& g : grad) g /= batch_weight;
            }
            history.train_loss.push_back(batch_loss);

            double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(step));
            double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(step));
            for (std::size_t i = 0; i < n_params; ++i) {
                m[i] = config.adam_beta1 * m[i] + (1.0 - config.adam_beta1) * grad[i];
                v[i] = config.adam_beta2 * v[i] + (1.0 - config.adam_beta2) * grad[i] * grad[i];
                double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config.adam_eps);
                double& theta = policy.logit(i / ref.outcomes(), i % ref.outcomes());
                theta -= lr * (update + config.weight_decay * theta);
            }

            if (step % config.eval_every == 0 || step == total_steps) {
                snapshot(step);
            }
        }
    }

    TrainResult result;
    result.policy = std::move(policy);
    result.history = std::move(history);
    return result;
}

double preference_accuracy(const TabularPolicy& policy, const TabularPolicy& ref,
                           const std::vector<TrainPair>& pairs, double beta) {
    if (pairs.empty()) {
        throw ValidationError("accuracy undefined on zero pairs");
    }
    std::size_t correct = 0;
    for (const auto& p : pairs) {
        check_pair(policy, p);
        if (margin_of(policy, ref, p, beta) > 0) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void save_checkpoint(const PolicyCheckpoint& checkpoint, const std::filesystem::path& path) {
    const TabularPolicy& p = checkpoint.policy;
    if (!checkpoint.context_ids.empty() && checkpoint.context_ids.size() != p.contexts()) {
        throw ValidationError("context id list does not match the policy shape");
    }
    if (!checkpoint.outcome_ids.empty() && checkpoint.outcome_ids.size() != p.outcomes()) {
        throw ValidationError("outcome id list does not match the policy shape");
    }
    StoreWriter writer(path, StoreHeader{"checkpoint", 1, checkpoint.config_hash});
    json meta;
    meta["contexts"] = p.contexts();
    meta["outcomes"] = p.outcomes();
    meta["beta"] = format_double(checkpoint.beta);
    meta["step"] = checkpoint.step;
    meta["context_ids"] = checkpoint.context_ids;
    meta["outcome_ids"] = checkpoint.outcome_ids;
    writer.write(meta);
    for (std::size_t x = 0; x < p.contexts(); ++x) {
        json row;
        row["context"] = x;
        std::vector<std::string> logits;
        logits.reserve(p.outcomes());
        for (std::size_t y = 0; y < p.outcomes(); ++y) {
            logits.push_back(format_double(p.logit(x, y)));
        }
        row["logits"] = logits;
        writer.write(row);
    }
    writer.commit();
}

PolicyCheckpoint load_checkpoint(const std::filesystem::path& path) {
    StoreContents contents = read_store(path, "checkpoint");
    if (contents.records.empty()) {
        throw ValidationError(path.string() + ": checkpoint has no metadata record");
    }
    const json& meta = contents.records[0];
    PolicyCheckpoint cp;
    cp.config_hash = contents.header.config_hash;
    std::size_t contexts = static_cast<std::size_t>(require_int(meta, "contexts", 2));
    std::size_t outcomes = static_cast<std::size_t>(require_int(meta, "outcomes", 2));
    cp.beta = std::stod(require_string(meta, "beta", 2));
    cp.step = static_cast<std::size_t>(require_int(meta, "step", 2));
    for (const auto& id : require_field(meta, "context_ids", 2)) {
        cp.context_ids.push_back(id.get<std::string>());
    }
    for (const auto& id : require_field(meta, "outcome_ids", 2)) {
        cp.outcome_ids.push_back(id.get<std::string>());
    }
    if (contents.records.size() != contexts + 1) {
        throw ValidationError(path.string() + ": expected " + std::to_string(contexts) +
                              " logit rows, found " +
                              std::to_string(contents.records.size() - 1));
    }
    std::vector<double> logits(contexts * outcomes, 0.0);
    for (std::size_t x = 0; x < contexts; ++x) {
        const json& row = contents.records[x + 1];
        std::size_t ctx = static_cast<std::size_t>(require_int(row, "context", x + 3));
        if (ctx != x) {
            throw ValidationError(path.string() + ": logit rows out of order");
        }
        const json& values = require_field(row, "logits", x + 3);
        if (!values.is_array() || values.size() != outcomes) {
            throw ValidationError(path.string() + ": row " + std::to_string(x) +
                                  " does not hold " + std::to_string(outcomes) + " logits");
        }
        for (std::size_t y = 0; y < outcomes; ++y) {
            logits[x * outcomes + y] = std::stod(values[y].get<std::string>());
        }
    }
    cp.policy = TabularPolicy(contexts, outcomes, std::move(logits));
    return cp;
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ValidationError("cannot write " + path.string());
    }
    out << "step,train_loss,val_loss,loss_ratio,train_margin,val_margin\n";
    for (const auto& e : history.evals) {
        out << e.step << ',' << format_double(e.train_loss) << ',' << format_double(e.val_loss)
            << ',' << format_double(e.loss_ratio) << ',' << format_double(e.train_margin) << ','
            << format_double(e.val_margin) << '\n';
    }
}

}  // namespace prefpipe
