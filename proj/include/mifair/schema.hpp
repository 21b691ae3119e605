#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace mifair {

// One demographic attribute and its ordered group labels. `counts` holds
// training-set group frequencies once known (empty otherwise).
struct Attribute {
  std::string name;
  std::vector<std::string> groups;
  std::vector<std::size_t> counts;

  std::size_t group_count() const { return groups.size(); }
  // Index of a group label, or nullopt when unknown.
  std::optional<std::size_t> group_index(const std::string& label) const;
};

struct AttributeSchema {
  std::vector<Attribute> attributes;

  std::size_t size() const { return attributes.size(); }
  const Attribute& at(std::size_t a) const { return attributes.at(a); }
  std::optional<std::size_t> index_of(const std::string& name) const;
  // Throws ConfigError on an unknown attribute name.
  std::size_t require(const std::string& name) const;

  // Every group set has at least two labels; when counts are present they
  // have one entry per group and sum to `expected_total` (if given).
  void validate(std::optional<std::size_t> expected_total = std::nullopt) const;

  // gender {male, female}, age {0-45, 45-65, 65+}, race {White, Black,
  // Asian, Hispanic, Others}.
  static AttributeSchema default_schema();
};

void to_json(nlohmann::json& j, const Attribute& a);
void from_json(const nlohmann::json& j, Attribute& a);
void to_json(nlohmann::json& j, const AttributeSchema& s);
void from_json(const nlohmann::json& j, AttributeSchema& s);

}  // namespace mifair
