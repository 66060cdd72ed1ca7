#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "migu/error.hpp"
#include "migu/rng.hpp"

namespace migu {

enum class LabelRule { majority, trigger };

inline const char* to_string(LabelRule r) { return r == LabelRule::majority ? "majority" : "trigger"; }

// A synthetic classification task over a private, contiguous vocab band.
// The band is split into one sub-band per class; the label of a sequence is a
// pure function of its tokens (majority private class, or the class of the
// earliest private token).
struct TaskSpec {
    int task_id = 0;
    std::size_t n_classes = 4;
    std::size_t vocab_size = 512;
    std::size_t private_lo = 0;
    std::size_t private_hi = 64;  // [lo, hi)
    std::size_t noise_lo = 448;
    std::size_t noise_hi = 512;
    LabelRule rule = LabelRule::majority;
    std::size_t n_train = 256;
    std::size_t n_eval = 64;
    std::size_t seq_len = 16;
    double noise_fraction = 0.25;
    std::uint64_t seed = 0;

    std::size_t band_width() const { return private_hi - private_lo; }
    std::size_t class_width() const { return band_width() / n_classes; }

    // class sub-band [lo, hi) of class c
    std::size_t class_lo(std::size_t c) const { return private_lo + c * class_width(); }
    std::size_t class_hi(std::size_t c) const { return class_lo(c) + class_width(); }

    bool is_private(std::int32_t token) const {
        return token >= static_cast<std::int32_t>(private_lo) && token < static_cast<std::int32_t>(private_hi);
    }

    // class owning a private token; only valid when is_private(token) and the
    // token falls inside an owned sub-band (the band tail left over by floor
    // division belongs to no class)
    int class_of(std::int32_t token) const {
        const std::size_t offset = static_cast<std::size_t>(token) - private_lo;
        const std::size_t c = offset / class_width();
        if (c >= n_classes) return -1;
        return static_cast<int>(c);
    }

    void validate() const {
        if (n_classes < 2) throw ConfigError("task " + std::to_string(task_id) + ": n_classes must be >= 2");
        if (private_hi <= private_lo || noise_hi <= noise_lo) {
            throw ConfigError("task " + std::to_string(task_id) + ": empty token band");
        }
        if (private_hi > vocab_size || noise_hi > vocab_size) {
            throw ConfigError("task " + std::to_string(task_id) + ": band exceeds vocab of " +
                              std::to_string(vocab_size));
        }
        if (band_width() < n_classes) {
            throw ConfigError("task " + std::to_string(task_id) + ": private band of " +
                              std::to_string(band_width()) + " tokens too small for " +
                              std::to_string(n_classes) + " classes");
        }
        if (seq_len == 0 || n_train == 0) {
            throw ConfigError("task " + std::to_string(task_id) + ": need seq_len > 0 and n_train > 0");
        }
        if (noise_fraction < 0.0 || noise_fraction >= 1.0) {
            throw ConfigError("task " + std::to_string(task_id) + ": noise_fraction must lie in [0,1)");
        }
    }
};

struct Dataset {
    std::size_t n = 0;
    std::size_t seq_len = 0;
    std::vector<std::int32_t> tokens;  // n * seq_len, row-major
    std::vector<std::int32_t> labels;  // n

    const std::int32_t* row(std::size_t i) const { return tokens.data() + i * seq_len; }

    void append_row(const std::int32_t* row_tokens, std::int32_t label) {
        tokens.insert(tokens.end(), row_tokens, row_tokens + seq_len);
        labels.push_back(label);
        ++n;
    }
};

struct TaskData {
    Dataset train;
    Dataset eval;
};

// Label as a pure function of the tokens. Majority: plurality private class,
// ties to the lowest class id, -1 when no private token appears. Trigger:
// class of the earliest private token.
inline int label_of(const TaskSpec& spec, const std::int32_t* row) {
    if (spec.rule == LabelRule::trigger) {
        for (std::size_t s = 0; s < spec.seq_len; ++s) {
            if (spec.is_private(row[s])) {
                const int c = spec.class_of(row[s]);
                if (c >= 0) return c;
            }
        }
        return -1;
    }
    std::vector<std::size_t> counts(spec.n_classes, 0);
    for (std::size_t s = 0; s < spec.seq_len; ++s) {
        if (spec.is_private(row[s])) {
            const int c = spec.class_of(row[s]);
            if (c >= 0) counts[static_cast<std::size_t>(c)] += 1;
        }
    }
    std::size_t best = 0;
    bool any = false;
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        if (counts[c] > 0) any = true;
        if (counts[c] > counts[best]) best = c;
    }
    return any ? static_cast<int>(best) : -1;
}

namespace detail {

inline std::int32_t draw_from(Rng& rng, std::size_t lo, std::size_t hi) {
    return static_cast<std::int32_t>(lo + rng.uniform_below(hi - lo));
}

// One sequence whose rule-recomputed label equals target.
inline void generate_row(const TaskSpec& spec, int target, Rng& rng, std::vector<std::int32_t>& row) {
    row.resize(spec.seq_len);
    const auto target_c = static_cast<std::size_t>(target);
    for (std::size_t s = 0; s < spec.seq_len; ++s) {
        if (rng.uniform() < spec.noise_fraction) {
            row[s] = draw_from(rng, spec.noise_lo, spec.noise_hi);
        } else if (rng.uniform() < 0.75) {
            row[s] = draw_from(rng, spec.class_lo(target_c), spec.class_hi(target_c));
        } else {
            // distractor from another class
            std::size_t other = rng.uniform_below(spec.n_classes - 1);
            if (other >= target_c) ++other;
            row[s] = draw_from(rng, spec.class_lo(other), spec.class_hi(other));
        }
    }

    if (spec.rule == LabelRule::majority) {
        // enforce a strict plurality for the target class
        auto counts = [&] {
            std::vector<std::size_t> c(spec.n_classes, 0);
            for (std::int32_t tok : row) {
                if (spec.is_private(tok)) {
                    const int cls = spec.class_of(tok);
                    if (cls >= 0) c[static_cast<std::size_t>(cls)] += 1;
                }
            }
            return c;
        };
        auto c = counts();
        if (c[target_c] == 0) {
            const std::size_t pos = rng.uniform_below(spec.seq_len);
            row[pos] = draw_from(rng, spec.class_lo(target_c), spec.class_hi(target_c));
            c = counts();
        }
        for (std::size_t guard = 0; guard < spec.seq_len; ++guard) {
            std::size_t rival = target_c;
            for (std::size_t cls = 0; cls < spec.n_classes; ++cls) {
                if (cls != target_c && c[cls] >= c[target_c]) rival = cls;
            }
            if (rival == target_c) break;
            // convert one rival token into a target token
            for (std::size_t s = 0; s < spec.seq_len; ++s) {
                if (spec.is_private(row[s]) && spec.class_of(row[s]) == static_cast<int>(rival)) {
                    row[s] = draw_from(rng, spec.class_lo(target_c), spec.class_hi(target_c));
                    break;
                }
            }
            c = counts();
        }
    } else {
        // earliest private token decides; make it a target token
        std::size_t earliest = spec.seq_len;
        for (std::size_t s = 0; s < spec.seq_len; ++s) {
            if (spec.is_private(row[s])) {
                earliest = s;
                break;
            }
        }
        if (earliest == spec.seq_len) earliest = rng.uniform_below(spec.seq_len);
        row[earliest] = draw_from(rng, spec.class_lo(target_c), spec.class_hi(target_c));
    }
}

}  // namespace detail

// Class-balanced train and eval splits, deterministic under spec.seed.
inline TaskData generate_task(const TaskSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, 0x7461736bull, static_cast<std::uint64_t>(spec.task_id)));
    TaskData data;
    data.train.seq_len = data.eval.seq_len = spec.seq_len;
    std::vector<std::int32_t> row;
    const std::size_t total = spec.n_train + spec.n_eval;
    for (std::size_t i = 0; i < total; ++i) {
        const int target = static_cast<int>(i % spec.n_classes);
        detail::generate_row(spec, target, rng, row);
        if (label_of(spec, row.data()) != target) {
            throw StateError("generate_task: rule does not reproduce the target label");
        }
        (i < spec.n_train ? data.train : data.eval).append_row(row.data(), target);
    }
    return data;
}

struct TaskSequence {
    std::vector<TaskSpec> specs;  // in training order
    std::uint64_t order_seed = 0;
};

// Seeded permutation of the task list; order_seed 0 is the identity order.
inline TaskSequence make_order(const std::vector<TaskSpec>& specs, std::uint64_t order_seed) {
    if (specs.empty()) throw ConfigError("make_order: need at least one task");
    TaskSequence seq;
    seq.order_seed = order_seed;
    std::vector<std::size_t> perm(specs.size());
    std::iota(perm.begin(), perm.end(), 0);
    if (order_seed != 0) {
        Rng rng(derive_seed(order_seed, 0x6f72646572ull));
        rng.shuffle(perm);
    }
    for (std::size_t idx : perm) seq.specs.push_back(specs[idx]);
    return seq;
}

// Uniform sample without replacement of round(ratio * n) rows, taken at task
// completion time to fill the replay buffer.
inline Dataset sample_buffer(const Dataset& data, double ratio, Rng& rng) {
    if (ratio <= 0.0 || ratio > 1.0) {
        throw ConfigError("replay: ratio must lie in (0,1], got " + std::to_string(ratio));
    }
    const auto count = static_cast<std::size_t>(
        std::llround(ratio * static_cast<double>(data.n)));
    std::vector<std::size_t> idx(data.n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    Dataset out;
    out.seq_len = data.seq_len;
    for (std::size_t i = 0; i < count; ++i) out.append_row(data.row(idx[i]), data.labels[idx[i]]);
    return out;
}

// Training stream with per-row provenance: rows from the replay buffer are
// flagged so per-source masking can split them out.
struct ReplayStream {
    Dataset data;
    std::vector<std::uint8_t> from_buffer;
};

// Shuffled interleave of the current task's data with every buffered sample.
inline ReplayStream replay_mix(const Dataset& current, const std::vector<Dataset>& buffers, double ratio,
                               Rng& rng) {
    if (ratio <= 0.0 || ratio > 1.0) {
        throw ConfigError("replay: ratio must lie in (0,1], got " + std::to_string(ratio));
    }
    struct RowRef {
        const Dataset* src;
        std::size_t row;
        std::uint8_t buffered;
    };
    std::vector<RowRef> rows;
    for (std::size_t i = 0; i < current.n; ++i) rows.push_back({&current, i, 0});
    for (const auto& buf : buffers) {
        for (std::size_t i = 0; i < buf.n; ++i) rows.push_back({&buf, i, 1});
    }
    rng.shuffle(rows);

    ReplayStream stream;
    stream.data.seq_len = current.seq_len;
    for (const auto& ref : rows) {
        stream.data.append_row(ref.src->row(ref.row), ref.src->labels[ref.row]);
        stream.from_buffer.push_back(ref.buffered);
    }
    return stream;
}

// The conflict fixture: n_tasks with disjoint private bands over a shared
// noise band, engineered so sequential training forgets measurably.
inline std::vector<TaskSpec> conflict_fixture(std::size_t n_tasks, std::uint64_t data_seed,
                                              std::size_t n_train = 256, std::size_t n_eval = 64) {
    std::vector<TaskSpec> specs;
    for (std::size_t i = 0; i < n_tasks; ++i) {
        TaskSpec spec;
        spec.task_id = static_cast<int>(i);
        spec.n_classes = 4;
        spec.vocab_size = 512;
        spec.private_lo = i * 64;
        spec.private_hi = (i + 1) * 64;
        spec.noise_lo = 448;
        spec.noise_hi = 512;
        spec.rule = LabelRule::majority;
        spec.n_train = n_train;
        spec.n_eval = n_eval;
        spec.seq_len = 16;
        spec.noise_fraction = 0.25;
        spec.seed = derive_seed(data_seed, 0x66697874ull, i);
        specs.push_back(spec);
    }
    return specs;
}

}  // namespace migu
