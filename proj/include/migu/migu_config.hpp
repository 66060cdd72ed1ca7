#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "migu/cluster.hpp"
#include "migu/error.hpp"
#include "migu/masking.hpp"

namespace migu {

// Masking configuration. threshold is the MASKED fraction: floor(T * d_out)
// columns are frozen each step and the top 1-T fraction by output magnitude
// is updated.
struct MiguConfig {
    double threshold = 0.7;
    Granularity granularity = Granularity::per_batch;
    std::set<std::string> components;      // base-layer names plus lora_a / lora_b
    bool report_normalize = false;         // sum-to-1 normalization for exports only
    bool decay_masked = false;             // ablation: weight decay on frozen columns
    std::optional<ClusterConfig> cluster;

    bool selects(const std::string& component) const { return components.count(component) > 0; }
};

inline const std::vector<std::string>& component_preset_names() {
    static const std::vector<std::string> names{
        "all", "ffn_first", "ffn_all", "attn_q", "attn_k", "attn_v", "attn_o", "attn_all",
    };
    return names;
}

// Expands one Table-6-style preset or a comma list of raw component names.
inline std::set<std::string> parse_components(const std::string& text, bool gated_ffn = false) {
    std::set<std::string> out;
    auto insert_ffn = [&out, gated_ffn] {
        out.insert("ffn_1");
        out.insert("ffn_2");
        if (gated_ffn) out.insert("ffn_3");
    };
    if (text == "all") {
        out = {"attn_q", "attn_k", "attn_v", "attn_o", "lora_a", "lora_b"};
        insert_ffn();
        return out;
    }
    if (text == "ffn_first") return {"ffn_1"};
    if (text == "ffn_all") {
        insert_ffn();
        return out;
    }
    if (text == "attn_all") return {"attn_q", "attn_k", "attn_v", "attn_o"};
    if (text == "attn_q" || text == "attn_k" || text == "attn_v" || text == "attn_o") return {text};

    std::string token;
    for (char c : text + ",") {
        if (c == ',') {
            if (!token.empty()) out.insert(token);
            token.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            token.push_back(c);
        }
    }
    if (out.empty()) throw ConfigError("components: empty selector '" + text + "'");
    return out;
}

}  // namespace migu
