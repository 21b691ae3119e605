#include "mifair/schema.hpp"

#include <numeric>

#include "mifair/error.hpp"

namespace mifair {

std::optional<std::size_t> Attribute::group_index(const std::string& label) const {
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g] == label) return g;
  }
  return std::nullopt;
}

std::optional<std::size_t> AttributeSchema::index_of(const std::string& name) const {
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    if (attributes[a].name == name) return a;
  }
  return std::nullopt;
}

std::size_t AttributeSchema::require(const std::string& name) const {
  if (auto a = index_of(name)) return *a;
  throw ConfigError("unknown attribute '" + name + "'");
}

void AttributeSchema::validate(std::optional<std::size_t> expected_total) const {
  if (attributes.empty()) throw ConfigError("schema: no attributes");
  for (const Attribute& attr : attributes) {
    if (attr.groups.size() < 2) throw ConfigError("schema: attribute '" + attr.name + "' needs >= 2 groups");
    for (std::size_t g = 0; g < attr.groups.size(); ++g) {
      for (std::size_t h = g + 1; h < attr.groups.size(); ++h) {
        if (attr.groups[g] == attr.groups[h]) {
          throw ConfigError("schema: duplicate group '" + attr.groups[g] + "' in '" + attr.name + "'");
        }
      }
    }
    if (attr.counts.empty()) continue;
    if (attr.counts.size() != attr.groups.size()) {
      throw ConfigError("schema: attribute '" + attr.name + "' has mismatched counts");
    }
    const std::size_t total = std::accumulate(attr.counts.begin(), attr.counts.end(), std::size_t{0});
    if (expected_total && total != *expected_total) {
      throw ConfigError("schema: counts of '" + attr.name + "' sum to " + std::to_string(total) + ", expected " +
                        std::to_string(*expected_total));
    }
  }
}

AttributeSchema AttributeSchema::default_schema() {
  AttributeSchema s;
  s.attributes.push_back({"gender", {"male", "female"}, {}});
  s.attributes.push_back({"age", {"0-45", "45-65", "65+"}, {}});
  s.attributes.push_back({"race", {"White", "Black", "Asian", "Hispanic", "Others"}, {}});
  return s;
}

void to_json(nlohmann::json& j, const Attribute& a) {
  j = nlohmann::json{{"name", a.name}, {"groups", a.groups}};
  if (!a.counts.empty()) j["counts"] = a.counts;
}

void from_json(const nlohmann::json& j, Attribute& a) {
  j.at("name").get_to(a.name);
  j.at("groups").get_to(a.groups);
  a.counts.clear();
  if (j.contains("counts")) j.at("counts").get_to(a.counts);
}

void to_json(nlohmann::json& j, const AttributeSchema& s) { j = nlohmann::json{{"attributes", s.attributes}}; }

void from_json(const nlohmann::json& j, AttributeSchema& s) { j.at("attributes").get_to(s.attributes); }

}  // namespace mifair
