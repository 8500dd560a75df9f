#include "vaeunet/key_value.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vaeunet::kv {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& value) {
    std::vector<std::string> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

}  // namespace

std::map<std::string, std::string> parse(const std::string& text) {
    std::map<std::string, std::string> out;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("line " + std::to_string(line_no) + ": expected key = value, got '" + line +
                                        "'");
        }
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

std::map<std::string, std::string> read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse(ss.str());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

int to_int(const std::string& key, const std::string& value) {
    int v = 0;
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw std::invalid_argument(key + ": expected an integer, got '" + value + "'");
    }
    return v;
}

double to_double(const std::string& key, const std::string& value) {
    double v = 0.0;
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw std::invalid_argument(key + ": expected a number, got '" + value + "'");
    }
    return v;
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") {
        return true;
    }
    if (value == "false" || value == "0" || value == "no") {
        return false;
    }
    throw std::invalid_argument(key + ": expected a boolean, got '" + value + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    for (const auto& item : split_commas(value)) {
        out.push_back(to_int(key, item));
    }
    return out;
}

std::vector<double> to_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    for (const auto& item : split_commas(value)) {
        out.push_back(to_double(key, item));
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace vaeunet::kv
