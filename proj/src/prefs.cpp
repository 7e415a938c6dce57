#include "prefpipe/prefs.hpp"

#include <algorithm>
#include <unordered_map>

#include "prefpipe/errors.hpp"

namespace prefpipe {

namespace {

void check_score(int score, const char* label) {
    if (score < 1 || score > 5) {
        throw ValidationError(std::string(label) + " score " + std::to_string(score) +
                              " outside [1, 5]");
    }
}

}  // namespace

OverallScore overall_score(int helpfulness, int visual_faithfulness, int ethical) {
    check_score(helpfulness, "helpfulness");
    check_score(visual_faithfulness, "visual_faithfulness");
    check_score(ethical, "ethical_considerations");
    OverallScore s;
    s.score_sum = helpfulness + visual_faithfulness + ethical;
    s.mean = static_cast<double>(s.score_sum) / 3.0;
    return s;
}

ScoredResponse make_scored(const Response& response, int helpfulness, int visual_faithfulness,
                           int ethical, const AspectWeights& weights) {
    check_score(helpfulness, "helpfulness");
    check_score(visual_faithfulness, "visual_faithfulness");
    check_score(ethical, "ethical_considerations");
    if (weights.helpfulness < 0 || weights.visual_faithfulness < 0 || weights.ethical < 0 ||
        weights.total() <= 0) {
        throw ValidationError("aspect weights must be nonnegative with a positive total");
    }
    ScoredResponse s;
    s.response = response;
    s.aspect_scores = {helpfulness, visual_faithfulness, ethical};
    s.score_sum = weights.helpfulness * helpfulness +
                  weights.visual_faithfulness * visual_faithfulness +
                  weights.ethical * ethical;
    return s;
}

std::vector<ScoredResponse> score_annotated(const AnnotationRecord& record,
                                            const std::vector<Response>& responses,
                                            const AspectWeights& weights) {
    std::vector<ScoredResponse> out;
    out.reserve(record.model_ids.size());
    for (const std::string& model : record.model_ids) {
        const Response* found = nullptr;
        for (const auto& r : responses) {
            if (r.model_id == model && r.instruction_id == record.instruction_id) {
                found = &r;
                break;
            }
        }
        if (!found) {
            throw ValidationError("no response from model '" + model + "' for instruction '" +
                                  record.instruction_id + "'");
        }
        out.push_back(make_scored(*found,
                                  record.rating(model, Aspect::Helpfulness).score,
                                  record.rating(model, Aspect::VisualFaithfulness).score,
                                  record.rating(model, Aspect::EthicalConsiderations).score,
                                  weights));
    }
    return out;
}

std::vector<PreferencePair> build_pairs(std::span<const ScoredResponse> scored) {
    if (scored.size() < 2) {
        throw ValidationError("pair construction needs at least 2 scored responses, got " +
                              std::to_string(scored.size()));
    }
    const std::string& instruction_id = scored[0].response.instruction_id;
    for (const auto& s : scored) {
        if (s.response.instruction_id != instruction_id) {
            throw ValidationError("scored responses mix instructions '" + instruction_id +
                                  "' and '" + s.response.instruction_id + "'");
        }
    }
    std::vector<PreferencePair> pairs;
    for (std::size_t i = 0; i < scored.size(); ++i) {
        for (std::size_t j = i + 1; j < scored.size(); ++j) {
            const ScoredResponse& a = scored[i];
            const ScoredResponse& b = scored[j];
            if (a.score_sum == b.score_sum) continue;
            const ScoredResponse& w = a.score_sum > b.score_sum ? a : b;
            const ScoredResponse& l = a.score_sum > b.score_sum ? b : a;
            PreferencePair p;
            p.instruction_id = instruction_id;
            p.chosen = w.response;
            p.rejected = l.response;
            p.margin = w.score_sum - l.score_sum;
            p.chosen_sum = w.score_sum;
            p.rejected_sum = l.score_sum;
            pairs.push_back(std::move(p));
        }
    }
    std::sort(pairs.begin(), pairs.end(), [](const PreferencePair& a, const PreferencePair& b) {
        if (a.margin != b.margin) return a.margin > b.margin;
        if (a.chosen.model_id != b.chosen.model_id) return a.chosen.model_id < b.chosen.model_id;
        return a.rejected.model_id < b.rejected.model_id;
    });
    return pairs;
}

std::array<std::size_t, 5> score_histogram(const std::vector<AnnotationRecord>& records,
                                           Aspect aspect) {
    std::array<std::size_t, 5> counts{};
    for (const auto& record : records) {
        for (const auto& [key, rating] : record.ratings) {
            if (key.second == aspect) {
                counts[static_cast<std::size_t>(rating.score - 1)] += 1;
            }
        }
    }
    return counts;
}

std::map<std::string, ModelMeans> model_mean_scores(const std::vector<AnnotationRecord>& records) {
    struct Sums {
        double h = 0, v = 0, e = 0;
        std::size_t n = 0;
    };
    std::map<std::string, Sums> sums;
    for (const auto& record : records) {
        for (const std::string& model : record.model_ids) {
            Sums& s = sums[model];
            s.h += record.rating(model, Aspect::Helpfulness).score;
            s.v += record.rating(model, Aspect::VisualFaithfulness).score;
            s.e += record.rating(model, Aspect::EthicalConsiderations).score;
            s.n += 1;
        }
    }
    std::map<std::string, ModelMeans> out;
    for (const auto& [model, s] : sums) {
        ModelMeans m;
        m.helpfulness = s.h / static_cast<double>(s.n);
        m.visual_faithfulness = s.v / static_cast<double>(s.n);
        m.ethical = s.e / static_cast<double>(s.n);
        m.n_responses = s.n;
        out[model] = m;
    }
    return out;
}

namespace {

template <typename Label>
double kappa_impl(const std::vector<Label>& a, const std::vector<Label>& b) {
    if (a.size() != b.size()) {
        throw ValidationError("kappa inputs differ in length: " + std::to_string(a.size()) +
                              " vs " + std::to_string(b.size()));
    }
    if (a.empty()) {
        throw ValidationError("kappa needs at least one item");
    }
    const double n = static_cast<double>(a.size());
    std::map<Label, double> marg_a, marg_b;
    double observed = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        marg_a[a[i]] += 1;
        marg_b[b[i]] += 1;
        if (a[i] == b[i]) observed += 1;
    }
    double p_o = observed / n;
    double p_e = 0;
    for (const auto& [label, count_a] : marg_a) {
        auto it = marg_b.find(label);
        if (it != marg_b.end()) {
            p_e += (count_a / n) * (it->second / n);
        }
    }
    if (p_e >= 1.0) {
        throw ValidationError("kappa undefined: expected agreement is 1 (both annotators "
                              "constant on one label)");
    }
    return (p_o - p_e) / (1.0 - p_e);
}

}  // namespace

double cohens_kappa(const std::vector<std::string>& labels_a,
                    const std::vector<std::string>& labels_b) {
    return kappa_impl(labels_a, labels_b);
}

double cohens_kappa(const std::vector<int>& labels_a, const std::vector<int>& labels_b) {
    return kappa_impl(labels_a, labels_b);
}

double majority_agreement_rate(const std::vector<std::vector<std::string>>& votes_per_item,
                               const std::vector<std::string>& reference) {
    if (votes_per_item.empty()) {
        throw ValidationError("agreement rate undefined on zero items");
    }
    if (votes_per_item.size() != reference.size()) {
        throw ValidationError("vote table and reference differ in length");
    }
    std::size_t agree = 0;
    for (std::size_t i = 0; i < votes_per_item.size(); ++i) {
        const auto& votes = votes_per_item[i];
        if (votes.empty() || votes.size() % 2 == 0) {
            throw ValidationError("item " + std::to_string(i) +
                                  " needs an odd number of votes, has " +
                                  std::to_string(votes.size()));
        }
        std::map<std::string, std::size_t> tally;
        for (const auto& v : votes) tally[v] += 1;
        // Strict majority only; a plurality that is not a majority counts
        // as disagreement.
        const std::string* winner = nullptr;
        for (const auto& [label, count] : tally) {
            if (count * 2 > votes.size()) {
                winner = &label;
                break;
            }
        }
        if (winner && *winner == reference[i]) ++agree;
    }
    return static_cast<double>(agree) / static_cast<double>(votes_per_item.size());
}

}  // namespace prefpipe
