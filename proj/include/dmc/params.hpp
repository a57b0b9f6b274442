#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/rng.hpp"
#include "dmc/tensor.hpp"

namespace dmc {

// Ordered, name-addressed parameter storage. Registration order is the
// serialization order and the rng draw order, so identical seeds give
// identical parameter bytes. A count-only store records names and shapes
// without materializing data, which is all the complexity counter needs.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    Tensor value;  // empty in a count-only store
  };

  ParamStore() = default;
  explicit ParamStore(bool materialized) : materialized_(materialized) {}

  bool materialized() const { return materialized_; }

  int add(std::string name, Tensor value) {
    Shape shape = value.shape();  // read before the move below
    return insert(std::move(name), std::move(shape), std::move(value));
  }

  // The factory runs only when the store materializes values, so count-only
  // builds skip every rng draw and allocation.
  template <typename Factory>
  int add_deferred(std::string name, Shape shape, Factory&& make) {
    if (!materialized_) return insert(std::move(name), std::move(shape), Tensor());
    Tensor v = make();
    if (v.shape() != shape) throw ContractError("ParamStore: factory shape mismatch for " + name);
    return insert(std::move(name), std::move(shape), std::move(v));
  }

  std::size_t count() const { return entries_.size(); }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const Entry& e : entries_) n += numel(e.shape);
    return n;
  }

  Entry& entry(int id) { return entries_.at(static_cast<std::size_t>(id)); }
  const Entry& entry(int id) const { return entries_.at(static_cast<std::size_t>(id)); }

  Tensor& value(int id) { return value_ref(id); }
  const Tensor& value(int id) const { return const_cast<ParamStore*>(this)->value_ref(id); }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

 private:
  int insert(std::string name, Shape shape, Tensor value) {
    if (index_.count(name)) throw ConfigError("ParamStore: duplicate parameter " + name);
    const int id = static_cast<int>(entries_.size());
    index_.emplace(name, id);
    entries_.push_back(Entry{std::move(name), std::move(shape), std::move(value)});
    return id;
  }

  Tensor& value_ref(int id) {
    Entry& e = entries_.at(static_cast<std::size_t>(id));
    if (!materialized_) {
      throw ContractError("ParamStore: value access on count-only store (" + e.name + ")");
    }
    return e.value;
  }

  bool materialized_ = true;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

// He-uniform: U(-b, b) with b = scale * sqrt(6 / fan_in).
inline Tensor he_uniform(const Shape& shape, std::int64_t fan_in, Rng& rng,
                         double scale = 1.0) {
  Tensor t(shape);
  const double bound = scale * std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace dmc
