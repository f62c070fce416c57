#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "apg/core.hpp"

namespace apg {

struct metric_report {
    std::string name;
    std::vector<double> per_run;
    double mean = 0.0;
    double stddev = 0.0; // sample (n-1); 0 when n == 1
    std::size_t n_runs = 0;
    std::string config_digest;
    std::size_t failure_count = 0; // decision errors, counted never dropped
};

namespace detail {
inline void assert_unit_range(double v, const char* what) {
    if (!(v >= -1e-12 && v <= 1.0 + 1e-12))
        throw error(errc::validation, std::string(what) + " out of [0,1]: " + std::to_string(v));
}
} // namespace detail

// Proportion of ground-truth positives recovered by the selected set.
inline double overlap_ratio(const std::set<item_id>& selected, const std::set<item_id>& positives) {
    if (positives.empty()) throw error(errc::data, "overlap_ratio: empty positives");
    std::size_t hit = 0;
    for (const auto& id : selected)
        if (positives.count(id)) ++hit;
    double v = double(hit) / double(positives.size());
    detail::assert_unit_range(v, "overlap_ratio");
    return v;
}

// Single-relevant-item nDCG: the ideal DCG is 1, so the value is
// 1/log2(rank+1) when the positive lands inside the cutoff and 0 otherwise.
inline double ndcg_at_k(const std::vector<item_id>& permutation, const item_id& positive, int k) {
    if (k < 1) throw error(errc::data, "ndcg_at_k: k must be >= 1");
    for (std::size_t i = 0; i < permutation.size(); ++i) {
        if (permutation[i] == positive) {
            std::size_t rank = i + 1;
            double v = rank <= std::size_t(k) ? 1.0 / std::log2(double(rank) + 1.0) : 0.0;
            detail::assert_unit_range(v, "ndcg_at_k");
            return v;
        }
    }
    throw error(errc::data, "ndcg_at_k: positive item not present in permutation");
}

inline int hit_rate_at_k(const std::vector<item_id>& permutation, const item_id& positive, int k) {
    if (k < 1) throw error(errc::data, "hit_rate_at_k: k must be >= 1");
    for (std::size_t i = 0; i < permutation.size(); ++i)
        if (permutation[i] == positive) return i + 1 <= std::size_t(k) ? 1 : 0;
    throw error(errc::data, "hit_rate_at_k: positive item not present in permutation");
}

inline double rmse(const std::map<item_id, double>& predictions, const std::map<item_id, double>& truths) {
    if (predictions.empty() || truths.empty()) throw error(errc::data, "rmse: empty input");
    if (predictions.size() != truths.size()) throw error(errc::data, "rmse: key sets differ");
    double sq = 0.0;
    for (const auto& [id, truth] : truths) {
        auto it = predictions.find(id);
        if (it == predictions.end()) throw error(errc::data, "rmse: key sets differ on item " + id);
        double d = it->second - truth;
        sq += d * d;
    }
    double v = std::sqrt(sq / double(truths.size()));
    if (!(v >= 0.0)) throw error(errc::validation, "rmse out of range");
    return v;
}

// Base-2 Jensen-Shannon divergence; range [0,1], 0*log(0/x) taken as 0.
inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size() || p.empty()) throw error(errc::data, "jsd: length mismatch or empty");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw error(errc::data, "jsd: negative entry");
        sp += p[i];
        sq += q[i];
    }
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
        throw error(errc::data, "jsd: inputs must each sum to 1");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) acc += 0.5 * p[i] * std::log2(p[i] / m);
        if (q[i] > 0.0) acc += 0.5 * q[i] * std::log2(q[i] / m);
    }
    if (acc < 0.0) acc = 0.0; // rounding noise near identical inputs
    detail::assert_unit_range(acc, "jsd");
    return std::min(acc, 1.0);
}

using rating_scale = std::pair<double, double>;

enum class macro_jsd_mode { per_group, global };

namespace detail {
inline std::size_t rating_bin(double r, const rating_scale& scale) {
    long lo = std::lround(scale.first), hi = std::lround(scale.second);
    long b = std::lround(r);
    if (b < lo) b = lo;
    if (b > hi) b = hi;
    return std::size_t(b - lo);
}

inline std::size_t rating_bin_count(const rating_scale& scale) {
    return std::size_t(std::lround(scale.second) - std::lround(scale.first)) + 1;
}
} // namespace detail

// Distribution-level rating alignment. per_group compares, for each observed
// ground-truth rating value, the predicted-rating histogram of that group
// against the point mass at the true value, then averages the groups
// unweighted. global compares the pooled predicted histogram with the pooled
// truth histogram.
inline double macro_rating_jsd(const std::map<item_id, double>& predictions,
                               const std::map<item_id, double>& truths,
                               const rating_scale& scale,
                               macro_jsd_mode mode = macro_jsd_mode::per_group) {
    if (predictions.empty() || truths.empty()) throw error(errc::data, "macro_rating_jsd: empty input");
    if (predictions.size() != truths.size()) throw error(errc::data, "macro_rating_jsd: key sets differ");
    std::size_t bins = detail::rating_bin_count(scale);

    if (mode == macro_jsd_mode::global) {
        std::vector<double> hp(bins, 0.0), ht(bins, 0.0);
        for (const auto& [id, truth] : truths) {
            auto it = predictions.find(id);
            if (it == predictions.end()) throw error(errc::data, "macro_rating_jsd: key sets differ");
            hp[detail::rating_bin(it->second, scale)] += 1.0;
            ht[detail::rating_bin(truth, scale)] += 1.0;
        }
        for (auto& x : hp) x /= double(truths.size());
        for (auto& x : ht) x /= double(truths.size());
        return jsd(hp, ht);
    }

    // per_group: histogram of predictions within each truth group vs the
    // point mass at the group's rating value.
    std::map<std::size_t, std::vector<double>> group_hist;
    std::map<std::size_t, std::size_t> group_n;
    for (const auto& [id, truth] : truths) {
        auto it = predictions.find(id);
        if (it == predictions.end()) throw error(errc::data, "macro_rating_jsd: key sets differ");
        std::size_t g = detail::rating_bin(truth, scale);
        auto& hist = group_hist.try_emplace(g, std::vector<double>(bins, 0.0)).first->second;
        hist[detail::rating_bin(it->second, scale)] += 1.0;
        ++group_n[g];
    }
    double acc = 0.0;
    for (auto& [g, hist] : group_hist) {
        for (auto& x : hist) x /= double(group_n[g]);
        std::vector<double> point(bins, 0.0);
        point[g] = 1.0;
        acc += jsd(hist, point);
    }
    double v = acc / double(group_hist.size());
    detail::assert_unit_range(v, "macro_rating_jsd");
    return v;
}

inline metric_report aggregate_runs(const std::vector<double>& per_run) {
    if (per_run.empty()) throw error(errc::data, "aggregate_runs: empty run list");
    metric_report r;
    r.per_run = per_run;
    r.n_runs = per_run.size();
    double sum = 0.0;
    for (double v : per_run) sum += v;
    r.mean = sum / double(per_run.size());
    if (per_run.size() > 1) {
        double sq = 0.0;
        for (double v : per_run) sq += (v - r.mean) * (v - r.mean);
        r.stddev = std::sqrt(sq / double(per_run.size() - 1));
    }
    return r;
}

} // namespace apg
