#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "apg/core.hpp"
#include "apg/metrics.hpp"

namespace apg {

struct interaction {
    user_id user;
    item_id item;
    double rating = 0.0;
    std::int64_t timestamp = 0;
    std::string review_text;

    friend bool operator==(const interaction&, const interaction&) = default;
};

struct item {
    item_id id;
    std::string title;
    std::vector<std::string> genres;
    std::map<std::string, std::string> extra; // brand, price, ... when present
    bool placeholder = false;                 // metadata was missing at parse time

    friend bool operator==(const item&, const item&) = default;
};

struct dataset {
    std::map<item_id, item> items;
    std::map<user_id, std::vector<interaction>> interactions_by_user; // stable time order
    rating_scale scale{1.0, 5.0};
    std::size_t parse_warnings = 0; // lenient-mode skips

    friend bool operator==(const dataset& a, const dataset& b) {
        return a.items == b.items && a.interactions_by_user == b.interactions_by_user &&
               a.scale == b.scale;
    }
};

struct split_dataset {
    std::map<user_id, std::vector<interaction>> train_by_user;
    std::map<user_id, std::vector<interaction>> test_by_user;
    double split_ratio = 0.8;
    std::vector<user_id> excluded_users; // fewer than 2 interactions
};

struct item_stats {
    std::map<item_id, std::size_t> popularity;       // train interaction counts
    std::map<item_id, double> mean_rating;           // train means
    std::map<item_id, double> popularity_quantile;   // rank/(count-1), ties share lower rank
    std::set<item_id> flagged;                       // zero train interactions
    double global_mean_rating = 0.0;
};

struct parse_options {
    bool strict = true;
};

namespace detail {

// MovieLens files are ISO-8859-1; the canonical interchange format is UTF-8.
inline std::string latin1_to_utf8(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (unsigned char c : s) {
        if (c < 0x80) {
            out += char(c);
        } else {
            out += char(0xc0 | (c >> 6));
            out += char(0x80 | (c & 0x3f));
        }
    }
    return out;
}

inline std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw error(errc::io, "cannot open file: " + path);
    return in;
}

[[noreturn]] inline void malformed(const std::string& path, std::size_t line_no, const std::string& why) {
    throw error(errc::parse, path + " line " + std::to_string(line_no) + ": " + why);
}

inline void sort_interactions(dataset& ds) {
    for (auto& [user, list] : ds.interactions_by_user)
        std::stable_sort(list.begin(), list.end(),
                         [](const interaction& a, const interaction& b) { return a.timestamp < b.timestamp; });
}

inline void ensure_items_resolve(dataset& ds) {
    for (const auto& [user, list] : ds.interactions_by_user)
        for (const auto& ev : list)
            if (!ds.items.count(ev.item)) {
                item it;
                it.id = ev.item;
                it.title = "unknown:" + ev.item;
                it.placeholder = true;
                ds.items.emplace(ev.item, std::move(it));
            }
}

} // namespace detail

// --- MovieLens-1M -----------------------------------------------------------

inline dataset parse_movielens(const std::string& ratings_path, const std::string& movies_path,
                               const parse_options& opts = {}) {
    dataset ds;
    ds.scale = {1.0, 5.0};

    {
        auto in = detail::open_or_throw(movies_path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            auto fields = split(line, "::");
            if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
                if (opts.strict) detail::malformed(movies_path, line_no, "expected MovieID::Title::Genres");
                ++ds.parse_warnings;
                continue;
            }
            item it;
            it.id = fields[0];
            it.title = detail::latin1_to_utf8(fields[1]);
            if (!fields[2].empty())
                for (auto& g : split(fields[2], "|")) it.genres.push_back(detail::latin1_to_utf8(g));
            ds.items[it.id] = std::move(it);
        }
    }

    {
        auto in = detail::open_or_throw(ratings_path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            auto fields = split(line, "::");
            interaction ev;
            bool ok = fields.size() == 4;
            if (ok) {
                try {
                    ev.user = fields[0];
                    ev.item = fields[1];
                    ev.rating = std::stod(fields[2]);
                    ev.timestamp = std::stoll(fields[3]);
                } catch (const std::exception&) {
                    ok = false;
                }
            }
            ok = ok && !ev.user.empty() && !ev.item.empty() && ev.timestamp >= 0 &&
                 ev.rating >= ds.scale.first && ev.rating <= ds.scale.second;
            if (!ok) {
                if (opts.strict)
                    detail::malformed(ratings_path, line_no, "expected UserID::MovieID::Rating::Timestamp");
                ++ds.parse_warnings;
                continue;
            }
            ds.interactions_by_user[ev.user].push_back(std::move(ev));
        }
    }

    detail::ensure_items_resolve(ds);
    detail::sort_interactions(ds);
    return ds;
}

// --- Amazon reviews (newline-delimited JSON records) ------------------------

inline dataset parse_amazon_reviews(const std::string& reviews_path, const std::string& metadata_path,
                                    const parse_options& opts = {}) {
    dataset ds;
    ds.scale = {1.0, 5.0};

    auto get_string = [](const nlohmann::json& j, std::initializer_list<const char*> keys) -> std::optional<std::string> {
        for (const char* k : keys)
            if (j.contains(k)) {
                if (j[k].is_string()) return j[k].get<std::string>();
                if (j[k].is_number_integer()) return std::to_string(j[k].get<std::int64_t>());
            }
        return std::nullopt;
    };

    {
        auto in = detail::open_or_throw(metadata_path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (trim(line).empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            auto id = j.is_discarded() ? std::nullopt : get_string(j, {"asin", "item_id"});
            if (!id) {
                if (opts.strict) detail::malformed(metadata_path, line_no, "metadata record missing asin");
                ++ds.parse_warnings;
                continue;
            }
            item it;
            it.id = *id;
            if (auto title = get_string(j, {"title"}); title && !trim(*title).empty()) {
                it.title = *title;
            } else {
                it.title = "unknown:" + it.id;
                it.placeholder = true;
            }
            // categories arrive either as a flat list or a list of paths
            if (j.contains("categories") && j["categories"].is_array()) {
                for (const auto& c : j["categories"]) {
                    if (c.is_string())
                        it.genres.push_back(c.get<std::string>());
                    else if (c.is_array())
                        for (const auto& inner : c)
                            if (inner.is_string()) it.genres.push_back(inner.get<std::string>());
                }
            } else if (auto cat = get_string(j, {"category"})) {
                it.genres.push_back(*cat);
            }
            if (auto brand = get_string(j, {"brand"})) it.extra["brand"] = *brand;
            if (j.contains("price")) {
                if (j["price"].is_number())
                    it.extra["price"] = nlohmann::json(j["price"]).dump();
                else if (j["price"].is_string())
                    it.extra["price"] = j["price"].get<std::string>();
            }
            ds.items[it.id] = std::move(it);
        }
    }

    {
        auto in = detail::open_or_throw(reviews_path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (trim(line).empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            bool ok = !j.is_discarded();
            interaction ev;
            if (ok) {
                auto user = get_string(j, {"reviewerID", "user_id"});
                auto itid = get_string(j, {"asin", "item_id"});
                ok = user && itid;
                if (ok) {
                    ev.user = *user;
                    ev.item = *itid;
                }
                if (ok && j.contains("overall") && j["overall"].is_number())
                    ev.rating = j["overall"].get<double>();
                else if (ok && j.contains("rating") && j["rating"].is_number())
                    ev.rating = j["rating"].get<double>();
                else
                    ok = false;
                if (ok && j.contains("unixReviewTime") && j["unixReviewTime"].is_number())
                    ev.timestamp = j["unixReviewTime"].get<std::int64_t>();
                else if (ok && j.contains("timestamp") && j["timestamp"].is_number())
                    ev.timestamp = j["timestamp"].get<std::int64_t>();
                else
                    ok = false;
                if (auto text = get_string(j, {"reviewText", "text", "review_text"})) ev.review_text = *text;
            }
            ok = ok && ev.timestamp >= 0 && ev.rating >= ds.scale.first && ev.rating <= ds.scale.second;
            if (!ok) {
                if (opts.strict) detail::malformed(reviews_path, line_no, "review record missing a required field");
                ++ds.parse_warnings;
                continue;
            }
            ds.interactions_by_user[ev.user].push_back(std::move(ev));
        }
    }

    detail::ensure_items_resolve(ds);
    detail::sort_interactions(ds);
    return ds;
}

// --- Split / stats / windows -------------------------------------------------

// Per-user chronological prefix split. Train takes the earliest
// max(1, floor(ratio*n)) events under the stable (timestamp, file order)
// ordering; users with fewer than 2 interactions cannot yield a test portion
// and are excluded.
inline split_dataset chronological_split(const dataset& ds, double ratio = 0.8) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw error(errc::config, "split ratio must be in (0,1)");
    split_dataset out;
    out.split_ratio = ratio;
    for (const auto& [user, list] : ds.interactions_by_user) {
        if (list.size() < 2) {
            out.excluded_users.push_back(user);
            continue;
        }
        auto n = list.size();
        auto train_n = std::size_t(std::floor(ratio * double(n) + 1e-9));
        if (train_n < 1) train_n = 1;
        out.train_by_user[user] = {list.begin(), list.begin() + train_n};
        out.test_by_user[user] = {list.begin() + train_n, list.end()};
    }
    return out;
}

inline item_stats compute_item_stats(const split_dataset& split,
                                     const std::map<item_id, item>& catalog) {
    item_stats stats;
    double rating_sum = 0.0;
    std::size_t rating_n = 0;
    std::map<item_id, std::pair<double, std::size_t>> acc;
    for (const auto& [user, list] : split.train_by_user)
        for (const auto& ev : list) {
            auto& a = acc[ev.item];
            a.first += ev.rating;
            a.second += 1;
            rating_sum += ev.rating;
            ++rating_n;
        }
    stats.global_mean_rating = rating_n ? rating_sum / double(rating_n) : 0.0;

    for (const auto& [id, it] : catalog) {
        auto found = acc.find(id);
        if (found == acc.end()) {
            stats.popularity[id] = 0;
            stats.mean_rating[id] = stats.global_mean_rating;
            stats.flagged.insert(id);
        } else {
            stats.popularity[id] = found->second.second;
            stats.mean_rating[id] = found->second.first / double(found->second.second);
        }
    }
    // interactions referencing items outside the catalog still count
    for (const auto& [id, a] : acc)
        if (!catalog.count(id)) {
            stats.popularity[id] = a.second;
            stats.mean_rating[id] = a.first / double(a.second);
        }

    // quantile = rank/(count-1) over popularity-ascending order; tied items all
    // take the first (lowest) rank of their group
    std::vector<std::pair<std::size_t, item_id>> order;
    order.reserve(stats.popularity.size());
    for (const auto& [id, pop] : stats.popularity) order.emplace_back(pop, id);
    std::sort(order.begin(), order.end());
    std::size_t count = order.size();
    std::size_t group_start = 0;
    for (std::size_t i = 0; i < count; ++i) {
        if (i > 0 && order[i].first != order[i - 1].first) group_start = i;
        stats.popularity_quantile[order[i].second] =
            count > 1 ? double(group_start) / double(count - 1) : 0.0;
    }
    return stats;
}

inline std::vector<interaction> recent_window(const std::vector<interaction>& history, std::size_t k) {
    if (k < 1) throw error(errc::config, "window size must be >= 1");
    if (history.empty()) throw error(errc::insufficient_history, "insufficient history: no interactions");
    std::size_t take = std::min(k, history.size());
    return {history.end() - take, history.end()};
}

// --- Canonical interchange format -------------------------------------------
// items file: one dataset header record, then one item per line.
// interactions file: one interaction per line, users in sorted order.

inline void serialize_canonical(const dataset& ds, std::ostream& items_out, std::ostream& interactions_out) {
    nlohmann::json header{{"kind", "dataset_header"}, {"rating_scale", {ds.scale.first, ds.scale.second}}};
    items_out << header.dump() << '\n';
    for (const auto& [id, it] : ds.items) {
        nlohmann::json j{{"item_id", it.id}, {"title", it.title}, {"genres", it.genres},
                         {"extra", it.extra}, {"placeholder", it.placeholder}};
        items_out << j.dump() << '\n';
    }
    for (const auto& [user, list] : ds.interactions_by_user)
        for (const auto& ev : list) {
            nlohmann::json j{{"user_id", ev.user}, {"item_id", ev.item}, {"rating", ev.rating},
                             {"timestamp", ev.timestamp}, {"review_text", ev.review_text}};
            interactions_out << j.dump() << '\n';
        }
}

inline dataset parse_canonical(std::istream& items_in, std::istream& interactions_in) {
    dataset ds;
    std::string line;
    bool saw_header = false;
    std::size_t line_no = 0;
    while (std::getline(items_in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) detail::malformed("items", line_no, "invalid JSON record");
        if (!saw_header) {
            if (j.value("kind", "") != "dataset_header")
                detail::malformed("items", line_no, "missing dataset header record");
            ds.scale = {j["rating_scale"][0].get<double>(), j["rating_scale"][1].get<double>()};
            saw_header = true;
            continue;
        }
        item it;
        it.id = j.at("item_id").get<item_id>();
        it.title = j.at("title").get<std::string>();
        it.genres = j.at("genres").get<std::vector<std::string>>();
        it.extra = j.at("extra").get<std::map<std::string, std::string>>();
        it.placeholder = j.at("placeholder").get<bool>();
        ds.items[it.id] = std::move(it);
    }
    line_no = 0;
    while (std::getline(interactions_in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) detail::malformed("interactions", line_no, "invalid JSON record");
        interaction ev;
        ev.user = j.at("user_id").get<user_id>();
        ev.item = j.at("item_id").get<item_id>();
        ev.rating = j.at("rating").get<double>();
        ev.timestamp = j.at("timestamp").get<std::int64_t>();
        ev.review_text = j.at("review_text").get<std::string>();
        ds.interactions_by_user[ev.user].push_back(std::move(ev));
    }
    detail::ensure_items_resolve(ds);
    detail::sort_interactions(ds);
    return ds;
}

} // namespace apg
