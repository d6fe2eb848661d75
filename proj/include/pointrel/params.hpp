#pragma once

#include <map>
#include <string>
#include <vector>

#include "pointrel/tensor.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Named parameter/state registry. Entries are ordered by name, so iteration,
// optimization and serialization are deterministic. Tracked entries are
// learnable; untracked entries (batchnorm running statistics) are state that
// still serializes with the model.
//
// Binary container format ("PRAK", version 1, little-endian):
//   magic "PRAK" | version u32 | entry*
//   entry := name_len u32 | name bytes | rank u32 | extents u64[rank]
//            | values f64[product(extents)]
// Entries are read until EOF.
// ---------------------------------------------------------------------------

class ParameterStore {
public:
    TP create(const std::string& name, std::vector<std::size_t> shape, bool track = true);
    // Registers an externally created tensor (e.g. batchnorm state) under name.
    void adopt(const std::string& name, const TP& t);

    TP get(const std::string& name) const;
    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    std::size_t size() const { return entries_.size(); }

    // Name-ordered tracked entries (the trainable parameters).
    std::vector<TP> trainable() const;
    // Name-ordered view of everything.
    const std::map<std::string, TP>& entries() const { return entries_; }

    void zero_grads();
    std::size_t total_parameters() const;  // number of trainable scalars

    // Serialization. save() writes atomically (temp + rename). load() fills
    // existing entries by name, checking shapes; unknown or missing names are
    // ConfigErrors so checkpoints can never silently mismatch a model.
    void save(const std::string& path) const;
    void load(const std::string& path);

    // Reads a file into a fresh store (names and shapes taken from the file).
    static ParameterStore read(const std::string& path);

private:
    std::map<std::string, TP> entries_;
};

}  // namespace pointrel
