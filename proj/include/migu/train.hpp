#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "migu/adamw.hpp"
#include "migu/cluster.hpp"
#include "migu/error.hpp"
#include "migu/masking.hpp"
#include "migu/migu_config.hpp"
#include "migu/tasks.hpp"
#include "migu/transformer.hpp"

namespace migu {

enum class Method {
    ft,
    ft_migu,
    lora,
    lora_migu,
    inc_lora,
    inc_lora_migu,
    replay,
    replay_migu,
};

inline const char* to_string(Method m) {
    switch (m) {
        case Method::ft: return "FT";
        case Method::ft_migu: return "FT+MIGU";
        case Method::lora: return "LoRA";
        case Method::lora_migu: return "LoRA+MIGU";
        case Method::inc_lora: return "IncLoRA";
        case Method::inc_lora_migu: return "IncLoRA+MIGU";
        case Method::replay: return "Replay";
        case Method::replay_migu: return "Replay+MIGU";
    }
    return "?";
}

inline Method parse_method(const std::string& name) {
    static const std::map<std::string, Method> table{
        {"FT", Method::ft},           {"ft", Method::ft},
        {"FT+MIGU", Method::ft_migu}, {"ft+migu", Method::ft_migu},
        {"LoRA", Method::lora},       {"lora", Method::lora},
        {"LoRA+MIGU", Method::lora_migu},
        {"lora+migu", Method::lora_migu},
        {"IncLoRA", Method::inc_lora},
        {"inclora", Method::inc_lora},
        {"IncLoRA+MIGU", Method::inc_lora_migu},
        {"inclora+migu", Method::inc_lora_migu},
        {"Replay", Method::replay},
        {"replay", Method::replay},
        {"Replay+MIGU", Method::replay_migu},
        {"replay+migu", Method::replay_migu},
    };
    const auto it = table.find(name);
    if (it == table.end()) {
        throw ConfigError("method: unknown name '" + name +
                          "'; valid: FT, FT+MIGU, LoRA, LoRA+MIGU, IncLoRA, IncLoRA+MIGU, Replay, Replay+MIGU");
    }
    return it->second;
}

inline bool method_uses_migu(Method m) {
    return m == Method::ft_migu || m == Method::lora_migu || m == Method::inc_lora_migu ||
           m == Method::replay_migu;
}

inline bool method_uses_lora(Method m) {
    return m == Method::lora || m == Method::lora_migu || m == Method::inc_lora ||
           m == Method::inc_lora_migu;
}

inline bool method_is_incremental(Method m) {
    return m == Method::inc_lora || m == Method::inc_lora_migu;
}

inline bool method_uses_replay(Method m) { return m == Method::replay || m == Method::replay_migu; }

struct MethodConfig {
    Method method = Method::ft;
    MiguConfig migu;
    double replay_ratio = 0.02;
    AdamwHyper optimizer;
    std::size_t epochs = 5;
    std::size_t batch_size = 16;
    std::size_t lora_rank = 8;
    double lora_alpha = 32.0;
    double lora_dropout = 0.05;
    bool replay_per_source_masks = false;  // mask replayed rows with their own magnitudes
    std::size_t mask_log_interval = 0;     // record keep-vectors every N steps; 0 disables

    void validate() const {
        if (epochs == 0 || batch_size == 0) throw ConfigError("method: epochs and batch_size must be > 0");
        if (method_uses_replay(method) && (replay_ratio <= 0.0 || replay_ratio > 1.0)) {
            throw ConfigError("method: replay_ratio must lie in (0,1], got " + std::to_string(replay_ratio));
        }
        if (method_uses_migu(method) && migu.components.empty()) {
            throw ConfigError("method: MIGU methods need a nonempty component selector");
        }
    }
};

// Lower-triangular accuracy record: rows[t'][t] is accuracy on task t after
// training task t'.
struct AccMatrix {
    std::vector<std::vector<double>> rows;

    void add_row(std::vector<double> row) {
        if (row.size() != rows.size() + 1) {
            throw ContractError("acc_matrix: row " + std::to_string(rows.size()) + " must have " +
                                std::to_string(rows.size() + 1) + " entries, got " +
                                std::to_string(row.size()));
        }
        rows.push_back(std::move(row));
    }

    bool complete() const { return !rows.empty() && rows.back().size() == rows.size(); }
};

// ACC: mean accuracy over all tasks after training on the last one.
inline double acc_metric(const AccMatrix& matrix) {
    if (!matrix.complete()) throw StateError("acc_metric: accuracy matrix is incomplete");
    const auto& final_row = matrix.rows.back();
    double total = 0.0;
    for (double a : final_row) total += a;
    return total / static_cast<double>(final_row.size());
}

struct MaskLogEntry {
    long long step = 0;
    std::string layer_id;
    std::vector<std::uint8_t> keep;
};

struct RunAudit {
    bool uses_old_data = false;
    bool uses_task_boundaries = false;
    std::size_t spec_reads_during_training = 0;
};

struct TrainResult {
    AccMatrix acc;
    std::vector<MaskLogEntry> mask_logs;
    std::vector<double> task_wall_ms;
    RunAudit audit;
};

// Generates every task upfront and counts any later access to task metadata,
// so the label-free contract of MIGU methods is auditable.
class TaskProvider {
public:
    explicit TaskProvider(const TaskSequence& sequence) : specs_(sequence.specs) {
        for (const auto& spec : specs_) data_.push_back(generate_task(spec));
    }

    std::size_t task_count() const { return specs_.size(); }
    const Dataset& train_data(std::size_t t) const { return data_.at(t).train; }
    const Dataset& eval_data(std::size_t t) const { return data_.at(t).eval; }

    // audited: training code paths must never need this
    const TaskSpec& spec(std::size_t t) const {
        ++spec_reads_;
        return specs_.at(t);
    }

    std::size_t spec_reads() const { return spec_reads_; }

private:
    std::vector<TaskSpec> specs_;
    std::vector<TaskData> data_;
    mutable std::size_t spec_reads_ = 0;
};

// Mask for one instrumented base layer from its own fresh magnitude cache.
template <typename T>
GradMask compute_layer_mask(const LinearLayer<T>& layer, const MiguConfig& cfg, long long step) {
    if (!layer.cache.fresh_for(step)) {
        throw StateError("masked update: magnitude cache of '" + layer.name + "' is stale (cache step " +
                         std::to_string(layer.cache.freshness) + ", update step " + std::to_string(step) +
                         ")");
    }
    if (cfg.cluster) {
        const Matrix<T>* probe = nullptr;
        if (cfg.cluster->strategy == ClusterStrategy::co_magnitude) {
            if (!layer.has_cache) {
                throw StateError("masked update: co-magnitude clustering needs the cached input of '" +
                                 layer.name + "'");
            }
            probe = &layer.cached_input;
        }
        const auto assignment = cluster_weights(layer.weight, *cfg.cluster, probe);
        GradMask mask = cluster_mask(layer.cache.n, assignment, cfg.threshold);
        mask.freshness = layer.cache.freshness;
        return mask;
    }
    return binary_top_t(layer.cache, cfg.threshold);
}

template <typename T>
class Trainer {
public:
    Trainer(TinyTransformer<T>& model, MethodConfig cfg, std::uint64_t seed)
        : model_(model), cfg_(std::move(cfg)), seed_(seed), rng_(derive_seed(seed, 0x747261696eull)) {
        cfg_.validate();
        if (method_uses_lora(cfg_.method)) {
            model_.emb_trainable = false;
            model_.ln_trainable = false;
            if (!method_is_incremental(cfg_.method)) add_adapters(0);
        }
        if (method_uses_migu(cfg_.method)) model_.attach_migu(cfg_.migu);
        refresh_params();
    }

    const MethodConfig& config() const { return cfg_; }
    long long global_step() const { return step_; }
    Rng& rng() { return rng_; }
    TinyTransformer<T>& model() { return model_; }
    std::map<std::string, OptimState<T>>& optim_states() { return states_; }
    const std::vector<MaskLogEntry>& mask_logs() const { return mask_logs_; }
    void set_global_step(long long step) { step_ = step; }

    void begin_task(std::size_t task_index) {
        current_task_ = task_index;
        if (method_is_incremental(cfg_.method) ) {
            add_adapters(task_index);
            refresh_params();
        }
    }

    // One optimizer step on a token batch.
    double step(const std::vector<std::int32_t>& tokens, const std::vector<std::int32_t>& labels,
                std::size_t batch, std::size_t seq) {
        ++step_;
        const double loss =
            model_.loss(tokens, labels, batch, seq, Pass::train, step_, &rng_);
        if (!std::isfinite(loss)) {
            std::string where = "logits";
            for (auto& ref : params_) {
                if (!ref.value->all_finite()) {
                    where = ref.name;
                    break;
                }
            }
            throw NumericError("non-finite loss at task " + std::to_string(current_task_) + " step " +
                               std::to_string(step_) + " (first non-finite: " + where + ")");
        }
        model_.backward();
        apply_updates();
        model_.zero_grads();
        return loss;
    }

    // Epoch loop over one task's training stream. Per-sample granularity
    // applies one micro-step per row; per-source replay masking splits each
    // batch by provenance.
    void train_task(const Dataset& data, const std::vector<std::uint8_t>* from_buffer,
                    std::size_t task_index) {
        const bool per_sample =
            method_uses_migu(cfg_.method) && cfg_.migu.granularity == Granularity::per_sample;
        const bool per_source = method_uses_migu(cfg_.method) && method_uses_replay(cfg_.method) &&
                                cfg_.replay_per_source_masks && from_buffer;
        for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
            std::vector<std::size_t> perm(data.n);
            std::iota(perm.begin(), perm.end(), 0);
            Rng shuffle_rng(derive_seed(seed_, 0x65706f6368ull, task_index, epoch));
            shuffle_rng.shuffle(perm);
            for (std::size_t start = 0; start < perm.size(); start += cfg_.batch_size) {
                const std::size_t count = std::min(cfg_.batch_size, perm.size() - start);
                if (per_sample) {
                    for (std::size_t i = 0; i < count; ++i) {
                        run_rows(data, {perm[start + i]});
                    }
                } else if (per_source) {
                    std::vector<std::size_t> fresh, replayed;
                    for (std::size_t i = 0; i < count; ++i) {
                        const std::size_t row = perm[start + i];
                        ((*from_buffer)[row] ? replayed : fresh).push_back(row);
                    }
                    if (!fresh.empty()) run_rows(data, fresh);
                    if (!replayed.empty()) run_rows(data, replayed);
                } else {
                    std::vector<std::size_t> rows(perm.begin() + start, perm.begin() + start + count);
                    run_rows(data, rows);
                }
            }
        }
    }

    double evaluate(const Dataset& data) {
        std::size_t correct = 0;
        for (std::size_t start = 0; start < data.n; start += cfg_.batch_size) {
            const std::size_t count = std::min(cfg_.batch_size, data.n - start);
            std::vector<std::int32_t> tokens(data.tokens.begin() + start * data.seq_len,
                                             data.tokens.begin() + (start + count) * data.seq_len);
            const Matrix<T> logits = model_.forward(tokens, count, data.seq_len, Pass::infer);
            for (std::size_t i = 0; i < count; ++i) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < logits.cols(); ++c) {
                    if (logits(i, c) > logits(i, best)) best = c;
                }
                if (static_cast<std::int32_t>(best) == data.labels[start + i]) ++correct;
            }
        }
        return data.n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.n);
    }

private:
    void add_adapters(std::size_t task_index) {
        Rng init_rng(derive_seed(seed_, 0x6c6f7261ull, task_index));
        model_.each_component([&](std::size_t, const std::string&, AdaptedLinear<T>& lin) {
            for (auto& adapter : lin.adapters) adapter.frozen = true;
            LoraAdapter<T> adapter(lin.base.name + ".lora" + std::to_string(task_index), lin.base.d_in(),
                                   lin.base.d_out(), cfg_.lora_rank, cfg_.lora_alpha);
            adapter.dropout = cfg_.lora_dropout;
            adapter.init(init_rng);
            lin.adapters.push_back(std::move(adapter));
        });
    }

    void refresh_params() {
        params_ = model_.parameters();
        for (auto& ref : params_) {
            if (!ref.trainable) continue;
            auto [it, inserted] = states_.try_emplace(ref.name);
            if (inserted || !it->second.m.same_shape(*ref.value)) {
                it->second = OptimState<T>(ref.value->rows(), ref.value->cols());
            }
        }
    }

    void run_rows(const Dataset& data, const std::vector<std::size_t>& rows) {
        std::vector<std::int32_t> tokens;
        std::vector<std::int32_t> labels;
        tokens.reserve(rows.size() * data.seq_len);
        for (std::size_t row : rows) {
            const std::int32_t* src = data.row(row);
            tokens.insert(tokens.end(), src, src + data.seq_len);
            labels.push_back(data.labels[row]);
        }
        step(tokens, labels, rows.size(), data.seq_len);
    }

    void apply_updates() {
        const bool migu_active = method_uses_migu(cfg_.method);
        std::map<const LinearLayer<T>*, GradMask> layer_masks;
        std::map<const LoraAdapter<T>*, std::pair<GradMask, GradMask>> adapter_masks;

        auto layer_mask = [&](const LinearLayer<T>* layer) -> const GradMask& {
            auto it = layer_masks.find(layer);
            if (it == layer_masks.end()) {
                it = layer_masks.emplace(layer, compute_layer_mask(*layer, cfg_.migu, step_)).first;
            }
            return it->second;
        };
        auto adapter_mask = [&](const LoraAdapter<T>* adapter) -> const std::pair<GradMask, GradMask>& {
            auto it = adapter_masks.find(adapter);
            if (it == adapter_masks.end()) {
                it = adapter_masks.emplace(adapter, lora_migu_masks(*adapter, cfg_.migu.threshold, step_))
                         .first;
            }
            return it->second;
        };

        for (auto& ref : params_) {
            if (!ref.trainable) continue;
            const std::vector<std::uint8_t>* keep = nullptr;
            if (migu_active) {
                switch (ref.role) {
                    case ParamRole::base_weight:
                    case ParamRole::base_bias:
                        if (ref.owner_linear->instrumented) keep = &layer_mask(ref.owner_linear).keep;
                        break;
                    case ParamRole::lora_a:
                        if (cfg_.migu.selects("lora_a") && cfg_.migu.selects(ref.component)) {
                            keep = &adapter_mask(ref.owner_adapter).first.keep;
                        }
                        break;
                    case ParamRole::lora_b:
                        if (cfg_.migu.selects("lora_b") && cfg_.migu.selects(ref.component)) {
                            keep = &adapter_mask(ref.owner_adapter).second.keep;
                        }
                        break;
                    case ParamRole::plain:
                        break;
                }
            }
            adamw_step(*ref.value, *ref.grad, states_.at(ref.name), cfg_.optimizer, keep,
                       cfg_.migu.decay_masked);
        }

        if (cfg_.mask_log_interval > 0 && step_ % static_cast<long long>(cfg_.mask_log_interval) == 0) {
            for (const auto& [layer, mask] : layer_masks) {
                mask_logs_.push_back({step_, layer->name, mask.keep});
            }
            for (const auto& [adapter, masks] : adapter_masks) {
                mask_logs_.push_back({step_, adapter->name + ".A", masks.first.keep});
                mask_logs_.push_back({step_, adapter->name + ".B", masks.second.keep});
            }
        }
    }

    TinyTransformer<T>& model_;
    MethodConfig cfg_;
    std::uint64_t seed_;
    Rng rng_;
    std::vector<ParamRef<T>> params_;
    std::map<std::string, OptimState<T>> states_;
    std::vector<MaskLogEntry> mask_logs_;
    long long step_ = 0;
    std::size_t current_task_ = 0;
};

// Sequential training over every task: train task t, then evaluate on tasks
// 0..t to fill one AccMatrix row. Replay buffers are sampled at task
// completion; MIGU methods touch no task metadata (audited).
template <typename T>
TrainResult train_sequence(TinyTransformer<T>& model, const TaskProvider& provider, const MethodConfig& cfg,
                           std::uint64_t seed) {
    Trainer<T> trainer(model, cfg, seed);
    TrainResult result;
    result.audit.uses_old_data = method_uses_replay(cfg.method);
    result.audit.uses_task_boundaries = method_is_incremental(cfg.method);
    const std::size_t spec_reads_before = provider.spec_reads();

    std::vector<Dataset> buffers;
    for (std::size_t t = 0; t < provider.task_count(); ++t) {
        trainer.begin_task(t);

        const auto t0 = std::chrono::steady_clock::now();
        if (method_uses_replay(cfg.method) && !buffers.empty()) {
            Rng mix_rng(derive_seed(seed, 0x6d6978ull, t));
            const ReplayStream stream = replay_mix(provider.train_data(t), buffers, cfg.replay_ratio, mix_rng);
            trainer.train_task(stream.data, &stream.from_buffer, t);
        } else {
            trainer.train_task(provider.train_data(t), nullptr, t);
        }
        const auto t1 = std::chrono::steady_clock::now();
        result.task_wall_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());

        if (method_uses_replay(cfg.method)) {
            Rng buf_rng(derive_seed(seed, 0x627566ull, t));
            buffers.push_back(sample_buffer(provider.train_data(t), cfg.replay_ratio, buf_rng));
        }

        std::vector<double> row;
        for (std::size_t t2 = 0; t2 <= t; ++t2) row.push_back(trainer.evaluate(provider.eval_data(t2)));
        result.acc.add_row(std::move(row));
    }

    result.mask_logs = trainer.mask_logs();
    result.audit.spec_reads_during_training = provider.spec_reads() - spec_reads_before;
    return result;
}

}  // namespace migu
