#include "sda/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace sda {

LooSplit split_loo(const InteractionLog& log) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const Interaction*>> by_user;
    for (const Interaction& rec : log.records) {
        auto [it, inserted] = by_user.try_emplace(rec.user_id);
        if (inserted) order.push_back(rec.user_id);
        it->second.push_back(&rec);
    }

    LooSplit split;
    for (const std::string& user : order) {
        auto& recs = by_user[user];
        std::stable_sort(recs.begin(), recs.end(),
                         [](const Interaction* a, const Interaction* b) { return a->timestamp < b->timestamp; });
        if (recs.size() < 3) {
            ++split.excluded_users;
            continue;
        }
        UserSplit us;
        us.user_id = user;
        for (std::size_t i = 0; i + 2 < recs.size(); ++i) us.train.push_back(recs[i]->item_id);
        us.valid = recs[recs.size() - 2]->item_id;
        us.test = recs[recs.size() - 1]->item_id;
        split.users.push_back(std::move(us));
    }
    return split;
}

std::set<std::string> tail_items(const LooSplit& split, const std::vector<std::string>& item_ids,
                                 int threshold) {
    if (threshold < 0) throw std::invalid_argument("tail_items: threshold must be >= 0");
    std::map<std::string, int> counts;
    for (const UserSplit& us : split.users) {
        for (const std::string& item : us.train) ++counts[item];
    }
    std::set<std::string> tail;
    for (const std::string& id : item_ids) {
        auto it = counts.find(id);
        const int c = it == counts.end() ? 0 : it->second;
        if (c < threshold) tail.insert(id);
    }
    return tail;
}

namespace {

struct RankOutcome {
    int rank = 0;
    double hit = 0.0;
    double ndcg = 0.0;
};

RankOutcome rank_target(const std::vector<double>& scores, const std::vector<char>& excluded,
                        int target, int k) {
    const double st = scores[target];
    int rank = 1;
    for (int j = 0; j < static_cast<int>(scores.size()); ++j) {
        if (j == target || excluded[j]) continue;
        if (scores[j] >= st) ++rank;
    }
    RankOutcome out;
    out.rank = rank;
    out.hit = rank <= k ? 1.0 : 0.0;
    out.ndcg = rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
    return out;
}

} // namespace

EvalReport evaluate(const ScoreFn& scores, const LooSplit& split, const std::vector<std::string>& item_ids,
                    int k, int tail_threshold, EvalTarget target) {
    if (k < 1) throw std::invalid_argument("evaluate: k must be >= 1");
    std::map<std::string, int> index;
    for (int i = 0; i < static_cast<int>(item_ids.size()); ++i) {
        if (!index.emplace(item_ids[i], i).second) {
            throw std::invalid_argument("evaluate: duplicate item id " + item_ids[i]);
        }
    }
    auto lookup = [&](const std::string& id) {
        auto it = index.find(id);
        if (it == index.end()) throw std::invalid_argument("evaluate: item " + id + " not in catalog");
        return it->second;
    };

    const std::set<std::string> tail = tail_items(split, item_ids, tail_threshold);

    EvalReport report;
    report.k = k;
    report.tail_threshold = tail_threshold;
    report.excluded_users = split.excluded_users;

    for (const UserSplit& us : split.users) {
        const std::string& target_item = target == EvalTarget::kTest ? us.test : us.valid;
        const int target_idx = lookup(target_item);

        std::vector<char> excluded(item_ids.size(), 0);
        for (const std::string& item : us.train) excluded[lookup(item)] = 1;
        if (target == EvalTarget::kTest) excluded[lookup(us.valid)] = 1;
        excluded[target_idx] = 0; // the target is always a candidate

        std::vector<double> s = scores(us);
        if (s.size() != item_ids.size()) {
            throw std::invalid_argument("evaluate: score vector length " + std::to_string(s.size()) +
                                        " != catalog size " + std::to_string(item_ids.size()));
        }
        for (double v : s) {
            if (!std::isfinite(v)) throw std::invalid_argument("evaluate: non-finite score for user " + us.user_id);
        }

        const RankOutcome out = rank_target(s, excluded, target_idx, k);
        UserResult ur;
        ur.user_id = us.user_id;
        ur.target_item = target_item;
        ur.rank = out.rank;
        ur.hit = out.hit;
        ur.ndcg = out.ndcg;
        ur.tail = tail.count(target_item) > 0;
        report.per_user.push_back(ur);

        report.overall.hit += out.hit;
        report.overall.ndcg += out.ndcg;
        ++report.overall.users;
        if (ur.tail) {
            report.tail.hit += out.hit;
            report.tail.ndcg += out.ndcg;
            ++report.tail.users;
        }
    }

    report.overall.present = report.overall.users > 0;
    if (report.overall.users > 0) {
        report.overall.hit /= report.overall.users;
        report.overall.ndcg /= report.overall.users;
    }
    report.tail.present = report.tail.users > 0;
    if (report.tail.users > 0) {
        report.tail.hit /= report.tail.users;
        report.tail.ndcg /= report.tail.users;
    }
    return report;
}

std::string report_json(const EvalReport& report) {
    nlohmann::json j = {
        {"k", report.k},
        {"tail_threshold", report.tail_threshold},
        {"evaluated_users", report.overall.users},
        {"excluded_users", report.excluded_users},
        {"overall",
         {{"hit", report.overall.hit}, {"ndcg", report.overall.ndcg}, {"users", report.overall.users}}},
    };
    if (report.tail.present) {
        j["tail"] = {{"hit", report.tail.hit}, {"ndcg", report.tail.ndcg}, {"users", report.tail.users}};
    }
    return j.dump(2) + "\n";
}

std::string per_user_csv(const EvalReport& report) {
    std::ostringstream os;
    os << "user_id,target_item,rank,hit,ndcg,tail\n";
    for (const UserResult& ur : report.per_user) {
        os << ur.user_id << ',' << ur.target_item << ',' << ur.rank << ',' << ur.hit << ',' << ur.ndcg
           << ',' << (ur.tail ? 1 : 0) << '\n';
    }
    return os.str();
}

} // namespace sda
