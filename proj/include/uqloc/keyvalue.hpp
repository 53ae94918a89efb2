// SPDX-License-Identifier: Apache-2.0
//
// Plain-text `key = value` files used for scenes, experiment configs,
// normalization state and checkpoint manifests.
//
//   # comment
//   m_y = 16
//   bs_position = (0, 0, 6)
//   reflectors = (0, 20, 50, 20, 0.3), (0, -20, 50, -20, 0.3)
//
// One key per line; lists are comma separated, tuple lists are parenthesised
// groups. Values are kept as strings until a typed accessor is called.

#ifndef UQLOC_KEYVALUE_HPP
#define UQLOC_KEYVALUE_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace uqloc {

class ConfigError : public std::runtime_error
{
public:
    ConfigError(std::string key, const std::string &what)
        : std::runtime_error(what), key_(std::move(key))
    {
    }
    const std::string &key() const noexcept { return key_; }

private:
    std::string key_;
};

class KeyValueFile
{
public:
    KeyValueFile() = default;

    static KeyValueFile parse(std::string_view text, std::string source = "<string>");
    static KeyValueFile load(const std::filesystem::path &path);

    bool has(const std::string &key) const { return values_.count(key) != 0; }
    const std::string &source() const noexcept { return source_; }
    // Directory of the file on disk; empty for parsed strings.
    const std::filesystem::path &base_dir() const noexcept { return base_dir_; }

    const std::string &text(const std::string &key) const;
    double number(const std::string &key) const;
    std::int64_t integer(const std::string &key) const;
    bool boolean(const std::string &key) const;
    std::vector<double> numbers(const std::string &key) const;
    std::vector<std::int64_t> integers(const std::string &key) const;
    std::vector<std::vector<double>> tuples(const std::string &key) const;
    // Resolves relative paths against base_dir().
    std::filesystem::path path(const std::string &key) const;

    double number_or(const std::string &key, double fallback) const;
    std::int64_t integer_or(const std::string &key, std::int64_t fallback) const;
    std::string text_or(const std::string &key, std::string fallback) const;

    void set(const std::string &key, std::string value);

private:
    [[noreturn]] void fail(const std::string &key, const std::string &msg) const;

    std::map<std::string, std::string> values_;
    std::string source_;
    std::filesystem::path base_dir_;
};

// Writes `key = value` lines in insertion order.
class KeyValueWriter
{
public:
    KeyValueWriter &comment(std::string_view text);
    KeyValueWriter &put(std::string_view key, std::string_view value);
    KeyValueWriter &put(std::string_view key, double value);
    KeyValueWriter &put(std::string_view key, std::int64_t value);
    KeyValueWriter &put(std::string_view key, const std::vector<double> &values);
    KeyValueWriter &put(std::string_view key, const std::vector<std::int64_t> &values);

    const std::string &str() const noexcept { return out_; }
    void save(const std::filesystem::path &path) const;

private:
    std::string out_;
};

// Shortest decimal form that round-trips (17 significant digits).
std::string format_double(double value);

std::string read_text_file(const std::filesystem::path &path);
void write_text_file(const std::filesystem::path &path, std::string_view text);

} // namespace uqloc

#endif
