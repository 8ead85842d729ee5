#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "tensor.hpp"

namespace pinv {

// One tensor inside a container file, either f32 or f64.
struct NamedTensor {
    std::string dtype;  // "f32" | "f64"
    Shape shape;
    std::vector<float> f32;
    std::vector<double> f64;

    std::size_t count() const { return dtype == "f32" ? f32.size() : f64.size(); }
    std::size_t byte_size() const { return count() * (dtype == "f32" ? 4 : 8); }

    template <class T>
    Tensor<T> as() const {
        Tensor<T> t(shape);
        if (dtype == "f32")
            for (std::size_t i = 0; i < f32.size(); ++i) t[i] = static_cast<T>(f32[i]);
        else
            for (std::size_t i = 0; i < f64.size(); ++i) t[i] = static_cast<T>(f64[i]);
        return t;
    }
};

template <class T>
NamedTensor make_named(const Tensor<T>& t);

template <>
inline NamedTensor make_named<float>(const Tensor<float>& t) {
    return NamedTensor{"f32", t.shape, {t.data.begin(), t.data.end()}, {}};
}
template <>
inline NamedTensor make_named<double>(const Tensor<double>& t) {
    return NamedTensor{"f64", t.shape, {}, {t.data.begin(), t.data.end()}};
}

// Binary container: magic "PAIRINV1", little-endian u32 header length, UTF-8
// JSON header (canonical, sorted keys) with a tensor index and an optional
// free-form "meta" object, followed by raw row-major payloads.
// Round trips are bit-exact.
struct Container {
    std::map<std::string, NamedTensor> tensors;  // sorted -> canonical ordering
    nlohmann::json meta = nlohmann::json::object();

    template <class T>
    void put(const std::string& name, const Tensor<T>& t) {
        tensors[name] = make_named(t);
    }

    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    const NamedTensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("container: no tensor named '" + name + "'");
        return it->second;
    }
};

void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);

}  // namespace pinv
