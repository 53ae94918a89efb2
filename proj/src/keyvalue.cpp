// SPDX-License-Identifier: Apache-2.0

#include "uqloc/keyvalue.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace uqloc {

namespace {

std::string_view trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos)
        return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::optional<double> to_double(std::string_view s)
{
    s = trim(s);
    if (s.empty())
        return std::nullopt;
    std::string buf(s);
    char *end = nullptr;
    errno = 0;
    const double v = std::strtod(buf.c_str(), &end);
    if (end != buf.c_str() + buf.size() || errno == ERANGE)
        return std::nullopt;
    return v;
}

std::optional<std::int64_t> to_integer(std::string_view s)
{
    s = trim(s);
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
        return std::nullopt;
    return v;
}

std::vector<std::string_view> split_commas(std::string_view s)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(',', start);
        out.push_back(trim(s.substr(start, pos - start)));
        if (pos == std::string_view::npos)
            break;
        start = pos + 1;
    }
    return out;
}

} // namespace

KeyValueFile KeyValueFile::parse(std::string_view text, std::string source)
{
    KeyValueFile kv;
    kv.source_ = std::move(source);
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos)
            end = text.size();
        ++line_no;
        auto line = trim(text.substr(start, end - start));
        start = end + 1;
        if (line.empty() || line.front() == '#')
            continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("", kv.source_ + ":" + std::to_string(line_no) +
                                      ": expected 'key = value'");
        std::string key(trim(line.substr(0, eq)));
        std::string value(trim(line.substr(eq + 1)));
        if (key.empty())
            throw ConfigError("", kv.source_ + ":" + std::to_string(line_no) + ": empty key");
        if (!kv.values_.emplace(key, std::move(value)).second)
            throw ConfigError(key, kv.source_ + ": duplicate key '" + key + "'");
        if (end == text.size())
            break;
    }
    return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path &path)
{
    auto kv = parse(read_text_file(path), path.string());
    kv.base_dir_ = path.parent_path();
    return kv;
}

void KeyValueFile::fail(const std::string &key, const std::string &msg) const
{
    throw ConfigError(key, source_ + ": key '" + key + "': " + msg);
}

const std::string &KeyValueFile::text(const std::string &key) const
{
    const auto it = values_.find(key);
    if (it == values_.end())
        fail(key, "missing required key");
    return it->second;
}

double KeyValueFile::number(const std::string &key) const
{
    const auto v = to_double(text(key));
    if (!v)
        fail(key, "expected a number, got '" + text(key) + "'");
    return *v;
}

std::int64_t KeyValueFile::integer(const std::string &key) const
{
    const auto v = to_integer(text(key));
    if (!v)
        fail(key, "expected an integer, got '" + text(key) + "'");
    return *v;
}

bool KeyValueFile::boolean(const std::string &key) const
{
    const auto &t = text(key);
    if (t == "true" || t == "1" || t == "yes")
        return true;
    if (t == "false" || t == "0" || t == "no")
        return false;
    fail(key, "expected a boolean, got '" + t + "'");
}

std::vector<double> KeyValueFile::numbers(const std::string &key) const
{
    std::vector<double> out;
    for (auto item : split_commas(text(key))) {
        const auto v = to_double(item);
        if (!v)
            fail(key, "expected a comma separated list of numbers");
        out.push_back(*v);
    }
    return out;
}

std::vector<std::int64_t> KeyValueFile::integers(const std::string &key) const
{
    std::vector<std::int64_t> out;
    if (trim(text(key)).empty())
        return out;
    for (auto item : split_commas(text(key))) {
        const auto v = to_integer(item);
        if (!v)
            fail(key, "expected a comma separated list of integers");
        out.push_back(*v);
    }
    return out;
}

std::vector<std::vector<double>> KeyValueFile::tuples(const std::string &key) const
{
    std::vector<std::vector<double>> out;
    std::string_view s = text(key);
    std::size_t pos = 0;
    while (true) {
        const auto open = s.find('(', pos);
        if (open == std::string_view::npos) {
            if (!trim(s.substr(pos)).empty())
                fail(key, "unexpected text outside tuples");
            break;
        }
        auto between = trim(s.substr(pos, open - pos));
        if (!(between.empty() || (between == "," && !out.empty())))
            fail(key, "tuples must be separated by commas");
        const auto close = s.find(')', open);
        if (close == std::string_view::npos)
            fail(key, "unterminated tuple");
        std::vector<double> tuple;
        for (auto item : split_commas(s.substr(open + 1, close - open - 1))) {
            const auto v = to_double(item);
            if (!v)
                fail(key, "tuple entries must be numbers");
            tuple.push_back(*v);
        }
        out.push_back(std::move(tuple));
        pos = close + 1;
    }
    return out;
}

std::filesystem::path KeyValueFile::path(const std::string &key) const
{
    std::filesystem::path p(text(key));
    if (p.is_relative() && !base_dir_.empty())
        p = base_dir_ / p;
    return p;
}

double KeyValueFile::number_or(const std::string &key, double fallback) const
{
    return has(key) ? number(key) : fallback;
}

std::int64_t KeyValueFile::integer_or(const std::string &key, std::int64_t fallback) const
{
    return has(key) ? integer(key) : fallback;
}

std::string KeyValueFile::text_or(const std::string &key, std::string fallback) const
{
    return has(key) ? text(key) : fallback;
}

void KeyValueFile::set(const std::string &key, std::string value)
{
    values_[key] = std::move(value);
}

KeyValueWriter &KeyValueWriter::comment(std::string_view text)
{
    out_ += "# ";
    out_ += text;
    out_ += '\n';
    return *this;
}

KeyValueWriter &KeyValueWriter::put(std::string_view key, std::string_view value)
{
    out_ += key;
    out_ += " = ";
    out_ += value;
    out_ += '\n';
    return *this;
}

KeyValueWriter &KeyValueWriter::put(std::string_view key, double value)
{
    return put(key, std::string_view(format_double(value)));
}

KeyValueWriter &KeyValueWriter::put(std::string_view key, std::int64_t value)
{
    return put(key, std::string_view(std::to_string(value)));
}

KeyValueWriter &KeyValueWriter::put(std::string_view key, const std::vector<double> &values)
{
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i)
            s += ", ";
        s += format_double(values[i]);
    }
    return put(key, std::string_view(s));
}

KeyValueWriter &KeyValueWriter::put(std::string_view key, const std::vector<std::int64_t> &values)
{
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i)
            s += ", ";
        s += std::to_string(values[i]);
    }
    return put(key, std::string_view(s));
}

void KeyValueWriter::save(const std::filesystem::path &path) const
{
    write_text_file(path, out_);
}

std::string format_double(double value)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

std::string read_text_file(const std::filesystem::path &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path &path, std::string_view text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out)
        throw std::runtime_error("failed writing '" + path.string() + "'");
}

} // namespace uqloc
