#pragma once
#include <cassert>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>

namespace poisondet {

// Serialized reals use plain decimal notation with at most 6 fractional
// digits and no exponent. All coordinates entering a dataset are quantized
// through this format so that save -> load is exact field-for-field.
inline std::string format_fixed6(double v) {
    assert(std::isfinite(v));
    int n = std::snprintf(nullptr, 0, "%.6f", v);
    std::string s(static_cast<std::size_t>(n), '\0');
    std::snprintf(s.data(), s.size() + 1, "%.6f", v);
    std::size_t dot = s.find('.');
    std::size_t end = s.size();
    while (end > dot + 1 && s[end - 1] == '0') --end;
    if (end == dot + 1) end = dot;  // no fractional part left
    s.erase(end);
    if (s == "-0") s = "0";
    return s;
}

// Nearest double representable by the fixed6 text form.
inline double quantize6(double v) {
    return std::strtod(format_fixed6(v).c_str(), nullptr);
}

// Deterministic rounding, half away from zero is not needed anywhere;
// half-up (towards +inf) is the documented convention.
inline double round_half_up(double v) { return std::floor(v + 0.5); }
inline long long iround_half_up(double v) {
    return static_cast<long long>(std::floor(v + 0.5));
}

}  // namespace poisondet
