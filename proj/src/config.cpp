#include "vqreg/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <sstream>

#include "vqreg/common.hpp"

namespace vqreg {

ConfigDoc ConfigDoc::parse(const std::string& text)
{
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw Error(std::string("config: ") + e.what());
    }
    ConfigDoc doc;
    for (const auto& [name, node] : tree) {
        if (node.empty()) throw Error("config: key '" + name + "' must live inside a [section]");
        KeyValues kv;
        for (const auto& [k, v] : node) kv.emplace_back(k, v.data());
        doc.sections.emplace_back(name, std::move(kv));
    }
    return doc;
}

ConfigDoc ConfigDoc::load(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("config: cannot open " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return parse(s.str());
}

std::string ConfigDoc::dump() const
{
    std::ostringstream out;
    bool first = true;
    for (const auto& [name, kv] : sections) {
        if (!first) out << '\n';
        first = false;
        out << '[' << name << "]\n";
        for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
    }
    return out.str();
}

const KeyValues* ConfigDoc::section(const std::string& name) const
{
    for (const auto& [n, kv] : sections)
        if (n == name) return &kv;
    return nullptr;
}

void ConfigDoc::set(const std::string& section, const std::string& key, const std::string& value)
{
    for (auto& [n, kv] : sections) {
        if (n != section) continue;
        for (auto& [k, v] : kv)
            if (k == key) {
                v = value;
                return;
            }
        kv.emplace_back(key, value);
        return;
    }
    sections.push_back({section, {{key, value}}});
}

void ConfigDoc::apply_override(const std::string& assignment)
{
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw Error("override '" + assignment + "' must look like section.key=value");
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    set(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)), trim(assignment.substr(eq + 1)));
}

}  // namespace vqreg
