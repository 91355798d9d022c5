#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvga/tensor.hpp"

namespace uvga {

/// Named trainable tensors plus their gradient accumulators and Adam state.
/// Graphs reference entries by name; the store outlives any graph.
template <class T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        Tensor<T> grad;
        Tensor<T> adam_m;
        Tensor<T> adam_v;
        bool frozen = false;
    };

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& create(const std::string& name, Tensor<T> init) {
        if (contains(name)) throw std::logic_error("parameter already exists: " + name);
        Entry e;
        e.grad = Tensor<T>::zeros(init.shape);
        e.adam_m = Tensor<T>::zeros(init.shape);
        e.adam_v = Tensor<T>::zeros(init.shape);
        e.value = std::move(init);
        return entries_.emplace(name, std::move(e)).first->second;
    }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    Tensor<T>& value(const std::string& name) { return at(name).value; }
    Tensor<T>& grad(const std::string& name) { return at(name).grad; }

    void zero_grads() {
        for (auto& [name, e] : entries_) std::fill(e.grad.v.begin(), e.grad.v.end(), T(0));
    }

    /// Freeze every parameter whose name starts with `prefix` (optimizer skips them).
    void set_frozen(const std::string& prefix, bool frozen) {
        for (auto& [name, e] : entries_)
            if (name.rfind(prefix, 0) == 0) e.frozen = frozen;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [name, e] : entries_) out.push_back(name);
        return out;
    }

    std::size_t size() const { return entries_.size(); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::map<std::string, Entry> entries_;  // ordered: deterministic iteration
};

/// Adam with bias correction. Frozen entries receive exactly zero update.
template <class T>
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ParamStore<T>& store) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (auto& [name, e] : store) {
            if (e.frozen) continue;
            for (std::int64_t i = 0; i < e.value.size(); ++i) {
                const double g = static_cast<double>(e.grad[i]);
                double m = b1_ * static_cast<double>(e.adam_m[i]) + (1.0 - b1_) * g;
                double v = b2_ * static_cast<double>(e.adam_v[i]) + (1.0 - b2_) * g * g;
                e.adam_m[i] = static_cast<T>(m);
                e.adam_v[i] = static_cast<T>(v);
                e.value[i] -= static_cast<T>(lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_));
            }
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int steps_taken() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint container. Exact byte layout (little-endian throughout, see
// docs/formats.md):
//   magic   8 bytes  "UVGACKP1"
//   u32     version (1)
//   u32     entry count
//   entries, each:
//     u32 name_len, name bytes
//     u32 dtype (1 = float32, 2 = float64)
//     u32 rank, u32 extents[rank]
//     raw IEEE-754 values, row-major
// ---------------------------------------------------------------------------

namespace detail {
inline void require_little_endian() {
    const std::uint32_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    if (b != 1) throw std::runtime_error("checkpoint container requires a little-endian host");
}

template <class S>
void write_u32(std::ostream& os, std::uint32_t x) {
    os.write(reinterpret_cast<const char*>(&x), 4);
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t x = 0;
    is.read(reinterpret_cast<char*>(&x), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated stream");
    return x;
}
}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'U', 'V', 'G', 'A', 'C', 'K', 'P', '1'};

template <class T>
void save_checkpoint(const ParamStore<T>& store, std::ostream& os) {
    detail::require_little_endian();
    os.write(kCheckpointMagic, 8);
    detail::write_u32<T>(os, 1u);
    detail::write_u32<T>(os, static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, e] : store) {
        detail::write_u32<T>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u32<T>(os, sizeof(T) == 4 ? 1u : 2u);
        detail::write_u32<T>(os, static_cast<std::uint32_t>(e.value.shape.size()));
        for (int ext : e.value.shape) detail::write_u32<T>(os, static_cast<std::uint32_t>(ext));
        os.write(reinterpret_cast<const char*>(e.value.v.data()),
                 static_cast<std::streamsize>(e.value.v.size() * sizeof(T)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed");
}

template <class T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    save_checkpoint(store, os);
}

/// Loads entries into `store`, creating missing parameters and overwriting
/// existing values (shapes must match). Adam state is reset for loaded entries.
template <class T>
void load_checkpoint(ParamStore<T>& store, std::istream& is) {
    detail::require_little_endian();
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    const std::uint32_t version = detail::read_u32(is);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = detail::read_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t dtype = detail::read_u32(is);
        if (dtype != 1 && dtype != 2) throw std::runtime_error("checkpoint: bad dtype code");
        const std::uint32_t rank = detail::read_u32(is);
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(detail::read_u32(is));
        const std::int64_t n = shape_numel(shape);
        Tensor<T> value(shape);
        if ((dtype == 1 && sizeof(T) == 4) || (dtype == 2 && sizeof(T) == 8)) {
            is.read(reinterpret_cast<char*>(value.v.data()), static_cast<std::streamsize>(n * sizeof(T)));
        } else if (dtype == 1) {
            std::vector<float> buf(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
            for (std::int64_t k = 0; k < n; ++k) value[k] = static_cast<T>(buf[static_cast<size_t>(k)]);
        } else {
            std::vector<double> buf(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
            for (std::int64_t k = 0; k < n; ++k) value[k] = static_cast<T>(buf[static_cast<size_t>(k)]);
        }
        if (!is) throw std::runtime_error("checkpoint: truncated entry " + name);
        if (store.contains(name)) {
            auto& e = store.at(name);
            if (e.value.shape != value.shape)
                throw std::runtime_error("checkpoint: shape mismatch for " + name);
            e.value = std::move(value);
            std::fill(e.adam_m.v.begin(), e.adam_m.v.end(), T(0));
            std::fill(e.adam_v.v.begin(), e.adam_v.v.end(), T(0));
        } else {
            store.create(name, std::move(value));
        }
    }
}

template <class T>
void load_checkpoint(ParamStore<T>& store, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open for read: " + path);
    load_checkpoint(store, is);
}

}  // namespace uvga
