#pragma once

#include <fstream>
#include <string>

#include "tensor.hpp"

namespace pinv {

// 8-bit binary PGM (P5), min-max scaled. Rows = first extent.
template <class T>
void write_pgm(const std::string& path, const Tensor<T>& t) {
    if (t.shape.size() != 2) throw ContractError("write_pgm: expected a 2D tensor");
    const std::size_t h = t.shape[0], w = t.shape[1];
    double lo = 1e300, hi = -1e300;
    for (T v : t.data) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("write_pgm: cannot open '" + path + "'");
    f << "P5\n" << w << " " << h << "\n255\n";
    for (T v : t.data) {
        const int px = static_cast<int>(255.0 * (static_cast<double>(v) - lo) / span + 0.5);
        f.put(static_cast<char>(std::clamp(px, 0, 255)));
    }
    if (!f) throw FormatError("write_pgm: write failed for '" + path + "'");
}

}  // namespace pinv
