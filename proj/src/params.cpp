#include "gbtsam/params.hpp"

#include "gbtsam/error.hpp"

namespace gbtsam {

ag::Var ParameterStore::add(std::string name, std::size_t rows, std::size_t cols,
                            std::vector<double> values) {
    if (index_.contains(name)) {
        throw Error("duplicate parameter name " + name);
    }
    auto var = ag::Var::constant(rows, cols, std::move(values));
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), var);
    return var;
}

ag::Var ParameterStore::add_normal(std::string name, std::size_t rows, std::size_t cols,
                                   double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(rows * cols);
    for (auto& v : values) {
        v = dist(rng);
    }
    return add(std::move(name), rows, cols, std::move(values));
}

ag::Var ParameterStore::add_constant(std::string name, std::size_t rows, std::size_t cols,
                                     double value) {
    return add(std::move(name), rows, cols, std::vector<double>(rows * cols, value));
}

ag::Var const& ParameterStore::at(std::string const& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw Error("unknown parameter " + name);
    }
    return entries_[it->second].second;
}

std::string parameter_group(std::string const& name) {
    return name.substr(0, name.find('.'));
}

} // namespace gbtsam
