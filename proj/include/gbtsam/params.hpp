#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gbtsam/autograd.hpp"

namespace gbtsam {

// Named, insertion-ordered collection of leaf parameters. The first dotted
// component of a name is its group: patch_embed, base, lora or depth.
class ParameterStore {
  public:
    using Entry = std::pair<std::string, ag::Var>;

    ag::Var add(std::string name, std::size_t rows, std::size_t cols, std::vector<double> values);
    ag::Var add_normal(std::string name, std::size_t rows, std::size_t cols, double stddev,
                       std::mt19937_64& rng);
    ag::Var add_constant(std::string name, std::size_t rows, std::size_t cols, double value);

    bool contains(std::string const& name) const { return index_.contains(name); }
    ag::Var const& at(std::string const& name) const;
    std::vector<Entry> const& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

std::string parameter_group(std::string const& name);

} // namespace gbtsam
