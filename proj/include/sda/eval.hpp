#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "sda/data.hpp"

namespace sda {

// One user's chronological leave-one-out split: everything except the last
// two interactions is train, the second-to-last is validation, the last is
// test.
struct UserSplit {
    std::string user_id;
    std::vector<std::string> train; // chronological
    std::string valid;
    std::string test;
};

struct LooSplit {
    std::vector<UserSplit> users; // order of first appearance in the log
    int excluded_users = 0;       // users with fewer than 3 interactions
};

// Per-user timestamp sort is stable, so same-timestamp records keep their
// input order.
LooSplit split_loo(const InteractionLog& log);

// Items whose train-split interaction count (across all users) is strictly
// below the threshold. Items that never appear in any train split qualify.
std::set<std::string> tail_items(const LooSplit& split, const std::vector<std::string>& item_ids,
                                 int threshold = 4);

enum class EvalTarget { kTest, kValid };

struct UserResult {
    std::string user_id;
    std::string target_item;
    int rank = 0; // 1-based; ties count against the target
    double hit = 0.0;
    double ndcg = 0.0;
    bool tail = false;
};

struct MetricBlock {
    double hit = 0.0;
    double ndcg = 0.0;
    int users = 0;
    bool present = false;
};

struct EvalReport {
    int k = 10;
    int tail_threshold = 4;
    MetricBlock overall;
    MetricBlock tail; // present only if any evaluated target is a tail item
    int excluded_users = 0;
    std::vector<UserResult> per_user;
};

// Scores for every item in item_ids order, for one user.
using ScoreFn = std::function<std::vector<double>(const UserSplit&)>;

// Ranks each user's target against the full catalog minus the items already
// attributed to the user (train + valid when targeting test; train only when
// targeting valid). Hit@k is 1 iff rank <= k; NDCG@k is 1/log2(rank+1) when
// ranked, else 0. A tied score counts against the target, which also makes
// ranks independent of item order.
EvalReport evaluate(const ScoreFn& scores, const LooSplit& split, const std::vector<std::string>& item_ids,
                    int k = 10, int tail_threshold = 4, EvalTarget target = EvalTarget::kTest);

// Machine-readable report: k, thresholds, overall/tail metric blocks and
// user counts. The tail block is omitted entirely when absent.
std::string report_json(const EvalReport& report);

// user_id,target_item,rank,hit,ndcg,tail rows for every evaluated user.
std::string per_user_csv(const EvalReport& report);

} // namespace sda
