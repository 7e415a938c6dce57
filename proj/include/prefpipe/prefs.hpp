#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "prefpipe/annotate.hpp"
#include "prefpipe/pool.hpp"

namespace prefpipe {

// Per-aspect aggregation weights. Integers keep score sums exact, so ties
// stay platform-independent integer comparisons.
struct AspectWeights {
    int helpfulness = 1;
    int visual_faithfulness = 1;
    int ethical = 1;

    int total() const { return helpfulness + visual_faithfulness + ethical; }
};

struct OverallScore {
    int score_sum = 0;
    double mean = 0.0;
};

// (h + v + e, mean). Scores must each be in [1, 5].
OverallScore overall_score(int helpfulness, int visual_faithfulness, int ethical);

struct ScoredResponse {
    Response response;
    std::array<int, 3> aspect_scores{};  // h, v, e
    int score_sum = 0;                   // weighted sum; equals h+v+e under unit weights

    double overall(const AspectWeights& weights = {}) const {
        return static_cast<double>(score_sum) / weights.total();
    }
};

ScoredResponse make_scored(const Response& response, int helpfulness,
                           int visual_faithfulness, int ethical,
                           const AspectWeights& weights = {});

// Joins one annotation record with the responses it rated.
std::vector<ScoredResponse> score_annotated(const AnnotationRecord& record,
                                            const std::vector<Response>& responses,
                                            const AspectWeights& weights = {});

struct PreferencePair {
    std::string instruction_id;
    Response chosen;
    Response rejected;
    int margin = 0;  // chosen score_sum minus rejected score_sum, always >= 1
    int chosen_sum = 0;
    int rejected_sum = 0;
};

// Enumerates all K(K-1)/2 unordered comparisons for one instruction and
// emits a pair for every strict score difference; exact ties are dropped.
// Output is sorted by (margin desc, chosen model, rejected model), so the
// result does not depend on input order.
std::vector<PreferencePair> build_pairs(std::span<const ScoredResponse> scored);

// counts[s-1] = number of ratings with score s for the given aspect.
std::array<std::size_t, 5> score_histogram(const std::vector<AnnotationRecord>& records,
                                           Aspect aspect);

struct ModelMeans {
    double helpfulness = 0.0;
    double visual_faithfulness = 0.0;
    double ethical = 0.0;
    std::size_t n_responses = 0;
};

// Per-model mean score in each aspect over all annotated responses.
std::map<std::string, ModelMeans> model_mean_scores(const std::vector<AnnotationRecord>& records);

// Chance-corrected agreement kappa = (p_o - p_e) / (1 - p_e) with
// p_e = sum_c marginal_a(c) * marginal_b(c). Throws ValidationError on a
// length mismatch, empty input, or the degenerate p_e = 1 case.
double cohens_kappa(const std::vector<std::string>& labels_a,
                    const std::vector<std::string>& labels_b);
double cohens_kappa(const std::vector<int>& labels_a, const std::vector<int>& labels_b);

// Fraction of items whose majority vote equals the reference label. Every
// item needs an odd number of votes; an item where no label reaches a
// strict majority (possible with three or more distinct labels) counts as
// a disagreement.
double majority_agreement_rate(const std::vector<std::vector<std::string>>& votes_per_item,
                               const std::vector<std::string>& reference);

}  // namespace prefpipe
