#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace vqreg {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// INI-style document: `[section]` headers with `key = value` lines, order preserved.
struct ConfigDoc {
    std::vector<std::pair<std::string, KeyValues>> sections;

    static ConfigDoc parse(const std::string& text);
    static ConfigDoc load(const std::filesystem::path& path);
    [[nodiscard]] std::string dump() const;

    [[nodiscard]] const KeyValues* section(const std::string& name) const;
    /// Inserts or replaces; creates the section if needed.
    void set(const std::string& section, const std::string& key, const std::string& value);
    /// "section.key=value"
    void apply_override(const std::string& assignment);
};

}  // namespace vqreg
