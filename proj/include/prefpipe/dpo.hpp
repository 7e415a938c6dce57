#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace prefpipe {

// Categorical policy over a finite outcome set, one softmax row per
// context. Probabilities are always re-derived from the logits, so rows
// sum to one by construction; a 1e-12 floor is applied before logarithms.
class TabularPolicy {
public:
    TabularPolicy() = default;
    TabularPolicy(std::size_t contexts, std::size_t outcomes, std::vector<double> logits);

    static TabularPolicy uniform(std::size_t contexts, std::size_t outcomes);

    std::size_t contexts() const { return contexts_; }
    std::size_t outcomes() const { return outcomes_; }

    double logit(std::size_t x, std::size_t y) const { return logits_[x * outcomes_ + y]; }
    double& logit(std::size_t x, std::size_t y) { return logits_[x * outcomes_ + y]; }
    const std::vector<double>& logits() const { return logits_; }

    // Softmax of row x.
    std::vector<double> row_probs(std::size_t x) const;
    double prob(std::size_t x, std::size_t y) const;
    double log_prob(std::size_t x, std::size_t y) const;

private:
    std::size_t contexts_ = 0;
    std::size_t outcomes_ = 0;
    std::vector<double> logits_;
};

struct RewardTable {
    std::size_t contexts = 0;
    std::size_t outcomes = 0;
    std::vector<double> values;  // row-major, finite

    double at(std::size_t x, std::size_t y) const { return values[x * outcomes + y]; }
};

// One preference observation mapped onto policy indices. weight scales the
// contribution to a batch loss (1 for sampled data; the Bradley-Terry
// probability in the exhaustive expected-loss mode).
struct TrainPair {
    std::size_t context = 0;
    std::size_t chosen = 0;
    std::size_t rejected = 0;
    double weight = 1.0;
};

struct DpoConfig {
    double beta = 0.1;
    double peak_lr = 0.1;        // desk-scale default; full_scale_preset() carries 1e-5
    double warmup_ratio = 0.1;   // linear warmup over this fraction of total steps
    std::size_t epochs = 3;
    double weight_decay = 0.05;  // decoupled, applied to the logits
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-6;
    std::size_t batch_size = 32;
    std::size_t eval_every = 10;  // evaluation snapshot interval in steps
    std::uint64_t seed = 0;

    // The published fine-tuning hyperparameters; peak_lr there suits a 7B
    // model, not a tabular policy, hence the separate desk-scale default.
    static DpoConfig full_scale_preset();

    void validate() const;  // throws ConfigError
};

struct TrainHistory {
    std::vector<double> train_loss;  // one entry per optimizer step (batch loss)

    struct Eval {
        std::size_t step = 0;
        double train_loss = 0.0;   // full training-set loss at this snapshot
        double val_loss = 0.0;
        double loss_ratio = 0.0;   // val_loss / train_loss
        double train_margin = 0.0; // mean implicit-reward margin, training pairs
        double val_margin = 0.0;
    };
    std::vector<Eval> evals;
};

struct TrainResult {
    TabularPolicy policy;
    TrainHistory history;
};

// Bradley-Terry win probability sigma(r_w - r_l).
double bt_prob(double r_w, double r_l);

// beta * (log pi(y|x) - log pi_ref(y|x)).
double implicit_reward(const TabularPolicy& policy, const TabularPolicy& ref,
                       std::size_t x, std::size_t y, double beta);

// Closed-form KL-regularized optimum: each row proportional to
// pi_ref(y|x) * exp(r(x,y) / beta), computed with a max shift.
TabularPolicy optimal_policy(const TabularPolicy& ref, const RewardTable& reward, double beta);

// -log sigma(beta * (log-ratio margin)). Nonnegative, decreasing in the margin.
double dpo_loss(const TabularPolicy& policy, const TabularPolicy& ref,
                const TrainPair& pair, double beta);

// Gradient of dpo_loss w.r.t. the logits of row pair.context. Nonzero only
// at the chosen (negative) and rejected (positive) coordinates.
std::vector<double> dpo_grad(const TabularPolicy& policy, const TabularPolicy& ref,
                             const TrainPair& pair, double beta);

// sum_y pi(y|x) log(pi(y|x) / pi_ref(y|x)).
double kl_divergence(const TabularPolicy& policy, const TabularPolicy& ref, std::size_t x);

// All ordered comparisons per context, weighted by the Bradley-Terry
// probability of that ordering under the given reward. Training on this
// set minimizes the exact expected loss, which the closed-form optimum
// solves; used as the deterministic oracle mode.
std::vector<TrainPair> bt_weighted_pairs(const RewardTable& reward);

// AdamW over the policy logits with linear warmup plus cosine decay.
// Starts from ref, runs epochs * ceil(N / batch_size) steps with a seeded
// shuffle and fixed reduction order; bitwise deterministic given the seed.
TrainResult train(const std::vector<TrainPair>& pairs, const TabularPolicy& ref,
                  const DpoConfig& config, const std::vector<TrainPair>& validation_pairs);

// Fraction of pairs whose implicit reward strictly prefers the chosen
// response; zero-margin pairs count as incorrect.
double preference_accuracy(const TabularPolicy& policy, const TabularPolicy& ref,
                           const std::vector<TrainPair>& pairs, double beta);

// Text checkpoint with a header (contexts, outcomes, beta, step, config
// hash) and the id mappings used to index the policy.
struct PolicyCheckpoint {
    TabularPolicy policy;
    double beta = 0.0;
    std::size_t step = 0;
    std::string config_hash;
    std::vector<std::string> context_ids;
    std::vector<std::string> outcome_ids;
};

void save_checkpoint(const PolicyCheckpoint& checkpoint, const std::filesystem::path& path);
PolicyCheckpoint load_checkpoint(const std::filesystem::path& path);

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);

}  // namespace prefpipe
