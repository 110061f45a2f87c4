#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kvc/model.hpp"
#include "kvc/policies.hpp"

namespace kvc::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitVerification = 2,
    kExitIo = 3,
};

/// Bad or conflicting command-line input; maps to kExitUsage.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Compression flags shared by generate and bench. Every member is unset
/// unless the flag was given, so the merge order is flags > file > defaults.
struct CompressionFlags {
    std::optional<std::string> policy;
    std::optional<double> ratio;
    std::optional<double> epsilon;
    std::optional<std::int64_t> rope_window;
    std::optional<std::int64_t> decode_interval;
    std::optional<std::size_t> stats_buffer;
    std::optional<bool> head_adaptive;
    std::optional<bool> use_wo_v;
    std::optional<std::size_t> min_keep;
    std::optional<double> ridge;
    std::optional<std::size_t> sink_tokens;
    std::optional<std::size_t> recent_tokens;
    std::optional<std::size_t> snapkv_window;
    std::optional<std::size_t> snapkv_kernel;

    void attach(CLI::App& app);
    void apply(CompressionConfig& config) const;
    /// True when any flag that selects or tunes a policy was given.
    bool any_policy_flag() const;
};

/// Where a command gets its model: a directory with config.json and
/// weights.kvt, or a seeded random model.
struct ModelSource {
    std::string dir;
    std::string config_file;
    float weight_gain = 1.0f;
    float embed_offset = 0.0f;

    void attach(CLI::App& app);
    bool is_random() const { return dir.empty(); }
    ModelConfig random_config() const;
    Model load(std::uint64_t seed) const;
    std::string describe(std::uint64_t seed) const;
};

/// Reads a JSON document. Throws IoError when unreadable, FormatError on bad syntax.
nlohmann::json read_json_file(const std::filesystem::path& path);

/// Applies the CompressionConfig keys of a config file. Keys listed in
/// `extra` are accepted and left to the caller; anything else is a UsageError.
void apply_json(CompressionConfig& config, const nlohmann::json& j, std::initializer_list<std::string_view> extra);

/// Typed lookup of a caller-level key in a config file.
template <typename T>
std::optional<T> json_value(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return std::nullopt;
    }
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config key '") + key + "': " + e.what());
    }
}

/// Writes one JSON line to stdout.
void print_summary(const nlohmann::json& summary);

} // namespace kvc::cli
