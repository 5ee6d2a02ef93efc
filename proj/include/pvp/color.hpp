#pragma once

#include <algorithm>
#include <cmath>

namespace pvp {

struct Rgb {
    double r = 0, g = 0, b = 0;
};

/// h in degrees [0, 360), s and v in [0, 1].
struct Hsv {
    double h = 0, s = 0, v = 0;
};

inline Hsv rgb_to_hsv(Rgb c) {
    const double mx = std::max({c.r, c.g, c.b});
    const double mn = std::min({c.r, c.g, c.b});
    const double delta = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0.0 ? delta / mx : 0.0;
    if (delta <= 0.0) {
        return out;
    }
    double h = 0.0;
    if (mx == c.r) {
        h = 60.0 * std::fmod((c.g - c.b) / delta, 6.0);
    } else if (mx == c.g) {
        h = 60.0 * ((c.b - c.r) / delta + 2.0);
    } else {
        h = 60.0 * ((c.r - c.g) / delta + 4.0);
    }
    if (h < 0.0) {
        h += 360.0;
    }
    if (h >= 360.0) {
        h -= 360.0;
    }
    out.h = h;
    return out;
}

// The max channel is exactly v and the min channel exactly v*(1-s), so value
// survives a round trip bit-for-bit.
inline Rgb hsv_to_rgb(Hsv c) {
    double h = std::fmod(c.h, 360.0);
    if (h < 0.0) {
        h += 360.0;
    }
    const double sector = h / 60.0;
    const int i = std::min(5, static_cast<int>(std::floor(sector)));
    const double f = sector - i;
    const double v = c.v;
    const double p = v * (1.0 - c.s);
    const double q = v * (1.0 - c.s * f);
    const double t = v * (1.0 - c.s * (1.0 - f));
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

/// Smallest angle between two hues, in [0, 180].
inline double hue_distance(double a, double b) {
    double d = std::fmod(std::abs(a - b), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

}  // namespace pvp
