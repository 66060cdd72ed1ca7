#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "migu/error.hpp"
#include "migu/layers.hpp"
#include "migu/lora.hpp"
#include "migu/matrix.hpp"
#include "migu/migu_config.hpp"
#include "migu/rng.hpp"

namespace migu {

struct ModelConfig {
    std::size_t vocab_size = 512;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_blocks = 2;
    std::size_t d_ffn = 128;
    std::size_t n_classes = 4;
    std::size_t max_seq = 64;
    bool gated_ffn = false;  // three FFN linears: ffn_1 (gate), ffn_3 (up), ffn_2 (down)
    double init_stddev = 0.08;

    void validate() const {
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
            throw ConfigError("model: d_model " + std::to_string(d_model) +
                              " must be divisible by n_heads " + std::to_string(n_heads));
        }
        if (vocab_size == 0 || n_blocks == 0 || d_ffn == 0 || n_classes < 2 || max_seq == 0) {
            throw ConfigError("model: all dimensions must be positive and n_classes >= 2");
        }
    }
};

// Linear plus an optional adapter stack. Adapters present means the base is a
// frozen LoRA host: forward sums adapter contributions and backward leaves the
// base weight without gradient.
template <typename T>
struct AdaptedLinear {
    LinearLayer<T> base;
    std::vector<LoraAdapter<T>> adapters;
    bool trainable = true;

    AdaptedLinear() = default;
    AdaptedLinear(std::string name, std::size_t d_in, std::size_t d_out)
        : base(std::move(name), d_in, d_out) {}

    Matrix<T> forward(const Matrix<T>& x, Pass pass, long long step, Rng* dropout_rng) {
        if (adapters.empty()) return base.forward(x, pass, step);
        return lora_forward(base, adapters, x, pass, step, dropout_rng);
    }

    Matrix<T> backward(const Matrix<T>& dy) {
        if (adapters.empty()) return base.backward(dy);
        return lora_backward(base, adapters, dy);
    }

    void zero_grads() {
        base.zero_grads();
        for (auto& adapter : adapters) adapter.zero_grads();
    }
};

// How a parameter participates in masking when its layer is instrumented.
enum class ParamRole { plain, base_weight, base_bias, lora_a, lora_b };

template <typename T>
struct ParamRef {
    std::string name;
    Matrix<T>* value = nullptr;
    Matrix<T>* grad = nullptr;
    ParamRole role = ParamRole::plain;
    bool trainable = true;
    std::string component;                    // registry component name, "" for plain params
    LinearLayer<T>* owner_linear = nullptr;   // mask/cache source for base params
    LoraAdapter<T>* owner_adapter = nullptr;  // mask/cache source for adapter params
};

template <typename T>
struct TransformerBlock {
    AdaptedLinear<T> attn_q, attn_k, attn_v, attn_o;
    AdaptedLinear<T> ffn_1, ffn_2, ffn_3;
    LayerNorm<T> ln1, ln2;
    bool ln_trainable = true;
    bool gated = false;

    // forward caches
    std::vector<ScaledDotAttention<T>> heads;
    GeluLayer<T> act;
    Matrix<T> cached_gate_act;  // gated FFN: gelu(ffn_1 out)
    Matrix<T> cached_up;        // gated FFN: ffn_3 out

    TransformerBlock() = default;

    TransformerBlock(std::size_t index, const ModelConfig& cfg) {
        const std::string prefix = "b" + std::to_string(index) + ".";
        attn_q = AdaptedLinear<T>(prefix + "attn_q", cfg.d_model, cfg.d_model);
        attn_k = AdaptedLinear<T>(prefix + "attn_k", cfg.d_model, cfg.d_model);
        attn_v = AdaptedLinear<T>(prefix + "attn_v", cfg.d_model, cfg.d_model);
        attn_o = AdaptedLinear<T>(prefix + "attn_o", cfg.d_model, cfg.d_model);
        ffn_1 = AdaptedLinear<T>(prefix + "ffn_1", cfg.d_model, cfg.d_ffn);
        ffn_2 = AdaptedLinear<T>(prefix + "ffn_2", cfg.d_ffn, cfg.d_model);
        gated = cfg.gated_ffn;
        if (gated) ffn_3 = AdaptedLinear<T>(prefix + "ffn_3", cfg.d_model, cfg.d_ffn);
        ln1 = LayerNorm<T>(prefix + "ln1", cfg.d_model);
        ln2 = LayerNorm<T>(prefix + "ln2", cfg.d_model);
    }

    Matrix<T> forward(const Matrix<T>& x, std::size_t batch, std::size_t seq, std::size_t n_heads,
                      Pass pass, long long step, Rng* dropout_rng) {
        const std::size_t d_model = x.cols();
        const std::size_t d_head = d_model / n_heads;

        Matrix<T> q = attn_q.forward(x, pass, step, dropout_rng);
        Matrix<T> k = attn_k.forward(x, pass, step, dropout_rng);
        Matrix<T> v = attn_v.forward(x, pass, step, dropout_rng);

        if (pass == Pass::train) heads.assign(batch * n_heads, ScaledDotAttention<T>{});
        Matrix<T> concat(batch * seq, d_model);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                Matrix<T> qs(seq, d_head), ks(seq, d_head), vs(seq, d_head);
                for (std::size_t s = 0; s < seq; ++s) {
                    for (std::size_t d = 0; d < d_head; ++d) {
                        qs(s, d) = q(b * seq + s, h * d_head + d);
                        ks(s, d) = k(b * seq + s, h * d_head + d);
                        vs(s, d) = v(b * seq + s, h * d_head + d);
                    }
                }
                ScaledDotAttention<T> local;
                ScaledDotAttention<T>& attn = pass == Pass::train ? heads[b * n_heads + h] : local;
                const Matrix<T> out = attn.forward(qs, ks, vs, pass);
                for (std::size_t s = 0; s < seq; ++s) {
                    for (std::size_t d = 0; d < d_head; ++d) {
                        concat(b * seq + s, h * d_head + d) = out(s, d);
                    }
                }
            }
        }

        Matrix<T> attn_out = attn_o.forward(concat, pass, step, dropout_rng);
        add_inplace(attn_out, x);  // residual
        Matrix<T> x1 = ln1.forward(attn_out, pass);

        Matrix<T> ffn_out;
        if (gated) {
            Matrix<T> gate = act.forward(ffn_1.forward(x1, pass, step, dropout_rng), pass);
            Matrix<T> up = ffn_3.forward(x1, pass, step, dropout_rng);
            if (pass == Pass::train) {
                cached_gate_act = gate;
                cached_up = up;
            }
            ffn_out = ffn_2.forward(hadamard(gate, up), pass, step, dropout_rng);
        } else {
            ffn_out = ffn_2.forward(act.forward(ffn_1.forward(x1, pass, step, dropout_rng), pass), pass,
                                    step, dropout_rng);
        }
        add_inplace(ffn_out, x1);  // residual
        return ln2.forward(ffn_out, pass);
    }

    Matrix<T> backward(const Matrix<T>& dy, std::size_t batch, std::size_t seq, std::size_t n_heads) {
        const std::size_t d_model = dy.cols();
        const std::size_t d_head = d_model / n_heads;

        Matrix<T> d_r2 = ln2.backward(dy);
        Matrix<T> dx1 = d_r2;  // residual branch
        if (gated) {
            Matrix<T> d_prod = ffn_2.backward(d_r2);
            Matrix<T> d_gate_act = hadamard(d_prod, cached_up);
            Matrix<T> d_up = hadamard(d_prod, cached_gate_act);
            add_inplace(dx1, ffn_1.backward(act.backward(d_gate_act)));
            add_inplace(dx1, ffn_3.backward(d_up));
        } else {
            add_inplace(dx1, ffn_1.backward(act.backward(ffn_2.backward(d_r2))));
        }

        Matrix<T> d_r1 = ln1.backward(dx1);
        Matrix<T> dx = d_r1;  // residual branch
        Matrix<T> d_concat = attn_o.backward(d_r1);

        Matrix<T> dq(batch * seq, d_model, T(0));
        Matrix<T> dk(batch * seq, d_model, T(0));
        Matrix<T> dv(batch * seq, d_model, T(0));
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                Matrix<T> d_out(seq, d_head);
                for (std::size_t s = 0; s < seq; ++s) {
                    for (std::size_t d = 0; d < d_head; ++d) {
                        d_out(s, d) = d_concat(b * seq + s, h * d_head + d);
                    }
                }
                Matrix<T> dqs, dks, dvs;
                heads[b * n_heads + h].backward(d_out, dqs, dks, dvs);
                for (std::size_t s = 0; s < seq; ++s) {
                    for (std::size_t d = 0; d < d_head; ++d) {
                        dq(b * seq + s, h * d_head + d) = dqs(s, d);
                        dk(b * seq + s, h * d_head + d) = dks(s, d);
                        dv(b * seq + s, h * d_head + d) = dvs(s, d);
                    }
                }
            }
        }
        add_inplace(dx, attn_q.backward(dq));
        add_inplace(dx, attn_k.backward(dk));
        add_inplace(dx, attn_v.backward(dv));
        return dx;
    }

    template <typename Fn>
    void each_linear(Fn&& fn) {
        fn(attn_q);
        fn(attn_k);
        fn(attn_v);
        fn(attn_o);
        fn(ffn_1);
        fn(ffn_2);
        if (gated) fn(ffn_3);
    }
};

// Small encoder classifier: token + position embeddings, post-norm blocks,
// final layer norm, mean pooling, linear head. Every block linear is
// registered for instrumentation; embeddings and the head stay unmasked.
template <typename T>
class TinyTransformer {
public:
    TinyTransformer() = default;

    TinyTransformer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(seed, 0x6d6f64656cull));
        tok_emb_ = Embedding<T>("tok_emb", cfg.vocab_size, cfg.d_model);
        tok_emb_.table = Matrix<T>::randn(cfg.vocab_size, cfg.d_model, rng, cfg.init_stddev);
        pos_emb_ = Embedding<T>("pos_emb", cfg.max_seq, cfg.d_model);
        pos_emb_.table = Matrix<T>::randn(cfg.max_seq, cfg.d_model, rng, cfg.init_stddev);
        blocks_.reserve(cfg.n_blocks);
        for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
            blocks_.emplace_back(i, cfg);
            blocks_[i].each_linear([&rng, &cfg](AdaptedLinear<T>& lin) { lin.base.init(rng, cfg.init_stddev); });
        }
        final_ln_ = LayerNorm<T>("final_ln", cfg.d_model);
        head_ = AdaptedLinear<T>("head", cfg.d_model, cfg.n_classes);
        head_.base.init(rng, cfg.init_stddev);
    }

    const ModelConfig& config() const { return cfg_; }
    const MiguConfig* migu() const { return has_migu_ ? &migu_ : nullptr; }

    Matrix<T> forward(const std::vector<std::int32_t>& tokens, std::size_t batch, std::size_t seq,
                      Pass pass = Pass::infer, long long step = -1, Rng* dropout_rng = nullptr) {
        if (tokens.size() != batch * seq) {
            throw ShapeError("forward: token count " + std::to_string(tokens.size()) + " != batch " +
                             std::to_string(batch) + " * seq " + std::to_string(seq));
        }
        if (seq > cfg_.max_seq) {
            throw ConfigError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq " +
                              std::to_string(cfg_.max_seq));
        }
        std::vector<std::int32_t> pos_ids(batch * seq);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t s = 0; s < seq; ++s) pos_ids[b * seq + s] = static_cast<std::int32_t>(s);
        }
        Matrix<T> x = tok_emb_.forward(tokens, pass);
        add_inplace(x, pos_emb_.forward(pos_ids, pass));
        for (auto& block : blocks_) {
            x = block.forward(x, batch, seq, cfg_.n_heads, pass, step, dropout_rng);
        }
        x = final_ln_.forward(x, pass);

        Matrix<T> pooled(batch, cfg_.d_model, T(0));
        const T inv_seq = T(1) / static_cast<T>(seq);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t s = 0; s < seq; ++s) {
                const T* row = x.row_ptr(b * seq + s);
                T* dst = pooled.row_ptr(b);
                for (std::size_t d = 0; d < cfg_.d_model; ++d) dst[d] += row[d] * inv_seq;
            }
        }
        if (pass == Pass::train) {
            cached_batch_ = batch;
            cached_seq_ = seq;
        }
        return head_.forward(pooled, pass, step, dropout_rng);
    }

    // Mean cross-entropy over the batch; Pass::train retains everything the
    // subsequent backward() needs.
    double loss(const std::vector<std::int32_t>& tokens, const std::vector<std::int32_t>& labels,
                std::size_t batch, std::size_t seq, Pass pass = Pass::train, long long step = -1,
                Rng* dropout_rng = nullptr) {
        const Matrix<T> logits = forward(tokens, batch, seq, pass, step, dropout_rng);
        return loss_.forward(logits, labels, pass);
    }

    void backward() {
        const std::size_t batch = cached_batch_, seq = cached_seq_;
        Matrix<T> d_pooled = head_.backward(loss_.backward());
        Matrix<T> dx(batch * seq, cfg_.d_model);
        const T inv_seq = T(1) / static_cast<T>(seq);
        for (std::size_t b = 0; b < batch; ++b) {
            const T* src = d_pooled.row_ptr(b);
            for (std::size_t s = 0; s < seq; ++s) {
                T* row = dx.row_ptr(b * seq + s);
                for (std::size_t d = 0; d < cfg_.d_model; ++d) row[d] = src[d] * inv_seq;
            }
        }
        dx = final_ln_.backward(dx);
        for (std::size_t i = blocks_.size(); i-- > 0;) {
            dx = blocks_[i].backward(dx, batch, seq, cfg_.n_heads);
        }
        pos_emb_.backward(dx);
        tok_emb_.backward(dx);
    }

    void zero_grads() {
        tok_emb_.zero_grads();
        pos_emb_.zero_grads();
        for (auto& block : blocks_) {
            block.each_linear([](AdaptedLinear<T>& lin) { lin.zero_grads(); });
            block.ln1.zero_grads();
            block.ln2.zero_grads();
        }
        final_ln_.zero_grads();
        head_.zero_grads();
    }

    std::vector<std::string> component_names() const {
        std::vector<std::string> names{"attn_q", "attn_k", "attn_v", "attn_o", "ffn_1", "ffn_2"};
        if (cfg_.gated_ffn) names.push_back("ffn_3");
        return names;
    }

    // Registry walk: fn(block_index, component_name, layer).
    template <typename Fn>
    void each_component(Fn&& fn) {
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            fn(i, "attn_q", blocks_[i].attn_q);
            fn(i, "attn_k", blocks_[i].attn_k);
            fn(i, "attn_v", blocks_[i].attn_v);
            fn(i, "attn_o", blocks_[i].attn_o);
            fn(i, "ffn_1", blocks_[i].ffn_1);
            fn(i, "ffn_2", blocks_[i].ffn_2);
            if (cfg_.gated_ffn) fn(i, "ffn_3", blocks_[i].ffn_3);
        }
    }

    AdaptedLinear<T>* find_component(std::size_t block, const std::string& name) {
        AdaptedLinear<T>* found = nullptr;
        each_component([&](std::size_t i, const std::string& comp, AdaptedLinear<T>& lin) {
            if (i == block && comp == name) found = &lin;
        });
        return found;
    }

    // Instruments exactly the selected components; everything else trains
    // vanilla. Unknown names are rejected with the valid menu.
    void attach_migu(const MiguConfig& cfg) {
        std::set<std::string> valid{"lora_a", "lora_b"};
        for (const auto& n : component_names()) valid.insert(n);
        if (cfg.components.empty()) {
            throw ConfigError("attach_migu: component selector must be nonempty");
        }
        std::string menu;
        for (const auto& n : valid) menu += (menu.empty() ? "" : ", ") + n;
        for (const auto& name : cfg.components) {
            if (!valid.count(name)) {
                throw ConfigError("attach_migu: unknown component '" + name + "'; valid: " + menu);
            }
        }
        migu_ = cfg;
        has_migu_ = true;
        each_component([&cfg](std::size_t, const std::string& comp, AdaptedLinear<T>& lin) {
            lin.base.instrumented = cfg.selects(comp);
        });
    }

    void detach_migu() {
        has_migu_ = false;
        each_component([](std::size_t, const std::string&, AdaptedLinear<T>& lin) {
            lin.base.instrumented = false;
        });
    }

    Embedding<T>& token_embedding() { return tok_emb_; }
    Embedding<T>& position_embedding() { return pos_emb_; }
    std::vector<TransformerBlock<T>>& blocks() { return blocks_; }
    LayerNorm<T>& final_norm() { return final_ln_; }
    AdaptedLinear<T>& head() { return head_; }

    bool emb_trainable = true;
    bool head_trainable = true;
    bool ln_trainable = true;

    // Flat parameter list in a stable, checkpoint-friendly order.
    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        auto plain = [&out](const std::string& name, Matrix<T>& value, Matrix<T>& grad, bool trainable) {
            out.push_back({name, &value, &grad, ParamRole::plain, trainable, "", nullptr, nullptr});
        };
        plain("tok_emb.table", tok_emb_.table, tok_emb_.grad_table, emb_trainable);
        plain("pos_emb.table", pos_emb_.table, pos_emb_.grad_table, emb_trainable);
        each_component([&out](std::size_t, const std::string& comp, AdaptedLinear<T>& lin) {
            const bool base_trainable = lin.trainable && lin.adapters.empty();
            out.push_back({lin.base.name + ".W", &lin.base.weight, &lin.base.grad_weight,
                           ParamRole::base_weight, base_trainable, comp, &lin.base, nullptr});
            out.push_back({lin.base.name + ".b", &lin.base.bias, &lin.base.grad_bias,
                           ParamRole::base_bias, base_trainable, comp, &lin.base, nullptr});
            for (auto& adapter : lin.adapters) {
                out.push_back({adapter.name + ".A", &adapter.a, &adapter.grad_a, ParamRole::lora_a,
                               !adapter.frozen, comp, &lin.base, &adapter});
                out.push_back({adapter.name + ".B", &adapter.b, &adapter.grad_b, ParamRole::lora_b,
                               !adapter.frozen, comp, &lin.base, &adapter});
            }
        });
        for (auto& block : blocks_) {
            plain(block.ln1.name + ".gamma", block.ln1.gamma, block.ln1.grad_gamma, ln_trainable);
            plain(block.ln1.name + ".beta", block.ln1.beta, block.ln1.grad_beta, ln_trainable);
            plain(block.ln2.name + ".gamma", block.ln2.gamma, block.ln2.grad_gamma, ln_trainable);
            plain(block.ln2.name + ".beta", block.ln2.beta, block.ln2.grad_beta, ln_trainable);
        }
        plain("final_ln.gamma", final_ln_.gamma, final_ln_.grad_gamma, ln_trainable);
        plain("final_ln.beta", final_ln_.beta, final_ln_.grad_beta, ln_trainable);
        plain("head.W", head_.base.weight, head_.base.grad_weight, head_trainable);
        plain("head.b", head_.base.bias, head_.base.grad_bias, head_trainable);
        return out;
    }

private:
    ModelConfig cfg_;
    Embedding<T> tok_emb_;
    Embedding<T> pos_emb_;
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> final_ln_;
    AdaptedLinear<T> head_;
    SoftmaxCrossEntropy<T> loss_;
    MiguConfig migu_;
    bool has_migu_ = false;
    std::size_t cached_batch_ = 0;
    std::size_t cached_seq_ = 0;
};

}  // namespace migu
