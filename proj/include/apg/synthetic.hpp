#pragma once

#include "apg/dataset.hpp"
#include "apg/rng.hpp"

namespace apg {

// Deterministic desk-scale dataset: a small movie-style catalog plus per-user
// histories with strictly increasing timestamps and no repeated items.
inline dataset make_synthetic_dataset(std::uint64_t seed, std::size_t users, std::size_t items_n,
                                      std::size_t min_events = 6, std::size_t max_events = 14) {
    static const char* kGenres[] = {"Drama", "Comedy", "Sci-Fi", "Horror", "Documentary"};
    if (min_events > max_events) throw error(errc::config, "min_events exceeds max_events");
    dataset ds;
    rng_stream rng(seed);
    for (std::size_t i = 0; i < items_n; ++i) {
        item it;
        it.id = "m" + std::to_string(i);
        it.title = "Movie " + std::to_string(i);
        it.genres = {kGenres[i % 5], kGenres[(i / 5) % 5]};
        ds.items[it.id] = it;
    }
    for (std::size_t u = 0; u < users; ++u) {
        user_id uid = "user" + std::to_string(u);
        std::size_t n = min_events + rng.below(max_events - min_events + 1);
        n = std::min(n, items_n);
        std::set<item_id> seen;
        std::int64_t ts = 1'000'000 + std::int64_t(rng.below(1000));
        for (std::size_t k = 0; k < n; ++k) {
            item_id iid;
            do {
                iid = "m" + std::to_string(rng.below(items_n));
            } while (seen.count(iid));
            seen.insert(iid);
            interaction ev{uid, iid, 1.0 + double(rng.below(5)), ts, ""};
            ts += 100 + std::int64_t(rng.below(50));
            ds.interactions_by_user[uid].push_back(ev);
        }
    }
    return ds;
}

} // namespace apg
