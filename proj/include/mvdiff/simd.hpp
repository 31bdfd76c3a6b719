#pragma once

#include <cstdint>
#include <type_traits>

// GCC/Clang vector extensions used by the hot kernels. Lane-wise arithmetic
// is identical to the scalar code, so vector and scalar paths agree bitwise
// per element.

namespace mvdiff::detail {

#if defined(__GNUC__) || defined(__clang__)
#define MVDIFF_VEC 1
template <typename T>
struct vec_traits;
template <>
struct vec_traits<float> {
    static constexpr int width = 8;
    typedef float v __attribute__((vector_size(32), aligned(4)));
};
template <>
struct vec_traits<double> {
    static constexpr int width = 4;
    typedef double v __attribute__((vector_size(32), aligned(8)));
};
#endif

}  // namespace mvdiff::detail
