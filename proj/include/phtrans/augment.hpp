#pragma once

#include "phtrans/volume.hpp"

namespace phtrans {

// Online augmentation toggles and ranges. Geometric transforms hit image and
// label identically (trilinear vs nearest); intensity transforms touch the
// image only.
struct AugmentConfig {
    bool rotation = true;
    double max_rotation_deg = 30.0;
    bool scaling = true;
    double scale_lo = 0.85, scale_hi = 1.25;
    bool noise = true;
    double noise_sigma_max = 0.1;
    bool blur = true;
    double blur_sigma_lo = 0.5, blur_sigma_hi = 1.0;
    bool brightness = true;
    double brightness_max = 0.1;
    bool contrast = true;
    double contrast_lo = 0.9, contrast_hi = 1.1;
    bool gamma = true;
    double gamma_lo = 0.7, gamma_hi = 1.5;

    static AugmentConfig none() {
        AugmentConfig c;
        c.rotation = c.scaling = c.noise = c.blur = c.brightness = c.contrast = c.gamma = false;
        return c;
    }
    bool any_geometric() const { return rotation || scaling; }
    bool any() const { return any_geometric() || noise || blur || brightness || contrast || gamma; }
};

namespace detail {

struct Mat3 {
    double m[3][3];
    static Mat3 identity() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                r.m[i][j] = 0;
                for (int k = 0; k < 3; ++k) r.m[i][j] += m[i][k] * o.m[k][j];
            }
        return r;
    }
    Mat3 transposed() const {
        Mat3 r{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
        return r;
    }
};

inline Mat3 axis_rotation(int axis, double rad) {
    double c = std::cos(rad), s = std::sin(rad);
    Mat3 r = Mat3::identity();
    int a = (axis + 1) % 3, b = (axis + 2) % 3;
    r.m[a][a] = c;
    r.m[a][b] = -s;
    r.m[b][a] = s;
    r.m[b][b] = c;
    return r;
}

inline float sample_trilinear(const Volume& v, double a, double b, double c) {
    const int64_t S0 = v.shape[0], S1 = v.shape[1], S2 = v.shape[2];
    if (a < -0.5 || b < -0.5 || c < -0.5 || a > double(S0) - 0.5 || b > double(S1) - 0.5 || c > double(S2) - 0.5)
        return 0.f;
    int64_t a0 = int64_t(std::floor(a)), b0 = int64_t(std::floor(b)), c0 = int64_t(std::floor(c));
    double fa = a - double(a0), fb = b - double(b0), fc = c - double(c0);
    auto cl = [](int64_t i, int64_t S) { return std::clamp<int64_t>(i, 0, S - 1); };
    double acc = 0;
    for (int da = 0; da < 2; ++da)
        for (int db = 0; db < 2; ++db)
            for (int dc = 0; dc < 2; ++dc) {
                double w = (da ? fa : 1 - fa) * (db ? fb : 1 - fb) * (dc ? fc : 1 - fc);
                acc += w * double(v.at(cl(a0 + da, S0), cl(b0 + db, S1), cl(c0 + dc, S2)));
            }
    return float(acc);
}

inline float sample_nearest(const Volume& v, double a, double b, double c) {
    int64_t ia = int64_t(std::floor(a + 0.5)), ib = int64_t(std::floor(b + 0.5)), ic = int64_t(std::floor(c + 0.5));
    if (ia < 0 || ib < 0 || ic < 0 || ia >= v.shape[0] || ib >= v.shape[1] || ic >= v.shape[2]) return 0.f;
    return v.at(ia, ib, ic);
}

inline void gaussian_blur_inplace(Volume& v, double sigma) {
    int64_t radius = std::max<int64_t>(1, int64_t(std::ceil(2.0 * sigma)));
    std::vector<double> kernel(size_t(2 * radius + 1));
    double norm = 0;
    for (int64_t i = -radius; i <= radius; ++i) {
        kernel[size_t(i + radius)] = std::exp(-0.5 * double(i) * double(i) / (sigma * sigma));
        norm += kernel[size_t(i + radius)];
    }
    for (auto& k : kernel) k /= norm;
    Shape st = strides_of(v.shape);
    std::vector<float> tmp(v.data.size());
    for (int axis = 0; axis < 3; ++axis) {
        int64_t n = v.shape[size_t(axis)], stride = st[size_t(axis)];
        int64_t lines = v.numel() / n;
        for (int64_t line = 0; line < lines; ++line) {
            // decompose the line index into the non-axis coordinates
            int64_t rem = line, base = 0;
            for (int ax = 0; ax < 3; ++ax) {
                if (ax == axis) continue;
                int64_t extent = v.shape[size_t(ax)];
                base += (rem % extent) * st[size_t(ax)];
                rem /= extent;
            }
            for (int64_t i = 0; i < n; ++i) {
                double acc = 0;
                for (int64_t k = -radius; k <= radius; ++k) {
                    int64_t j = std::clamp<int64_t>(i + k, 0, n - 1);
                    acc += kernel[size_t(k + radius)] * double(v.data[size_t(base + j * stride)]);
                }
                tmp[size_t(base + i * stride)] = float(acc);
            }
        }
        v.data.swap(tmp);
    }
}

}  // namespace detail

// Deterministic per (seed) augmentation; every op draws from its own stream
// so toggles do not shift other ops' samples.
inline std::pair<Volume, Volume> augment(const Volume& image, const Volume& label, uint64_t seed,
                                         const AugmentConfig& cfg) {
    PH_CHECK(image.shape == label.shape, "augment: image and label shapes differ");
    PH_CHECK(image.kind == VolKind::Image && label.kind == VolKind::Label, "augment: expected (image, label) pair");
    Volume img = image;
    Volume lab = label;
    if (!cfg.any()) return {std::move(img), std::move(lab)};

    if (cfg.any_geometric()) {
        Rng rng(seed, 1);
        detail::Mat3 rot = detail::Mat3::identity();
        if (cfg.rotation) {
            double deg2rad = 3.14159265358979323846 / 180.0;
            for (int axis = 0; axis < 3; ++axis)
                rot = rot * detail::axis_rotation(axis, rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * deg2rad);
        }
        double zoom = cfg.scaling ? rng.uniform(cfg.scale_lo, cfg.scale_hi) : 1.0;
        detail::Mat3 inv = rot.transposed();  // orthonormal inverse
        double ctr[3] = {0.5 * double(image.shape[0] - 1), 0.5 * double(image.shape[1] - 1),
                         0.5 * double(image.shape[2] - 1)};
        Volume img_src = img, lab_src = lab;
        parallel_for(
            image.shape[0],
            [&](int64_t a) {
                for (int64_t b = 0; b < image.shape[1]; ++b)
                    for (int64_t c = 0; c < image.shape[2]; ++c) {
                        double o[3] = {double(a) - ctr[0], double(b) - ctr[1], double(c) - ctr[2]};
                        double p[3];
                        for (int i = 0; i < 3; ++i) {
                            p[i] = 0;
                            for (int j = 0; j < 3; ++j) p[i] += inv.m[i][j] * o[j];
                            p[i] = p[i] / zoom + ctr[i];
                        }
                        img.at(a, b, c) = detail::sample_trilinear(img_src, p[0], p[1], p[2]);
                        lab.at(a, b, c) = detail::sample_nearest(lab_src, p[0], p[1], p[2]);
                    }
            },
            1);
    }

    if (cfg.noise) {
        Rng rng(seed, 2);
        double sigma = rng.uniform(0.0, cfg.noise_sigma_max);
        for (auto& x : img.data) x += float(rng.normal() * sigma);
    }
    if (cfg.blur) {
        Rng rng(seed, 3);
        detail::gaussian_blur_inplace(img, rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi));
    }
    if (cfg.brightness) {
        Rng rng(seed, 4);
        float shift = float(rng.uniform(-cfg.brightness_max, cfg.brightness_max));
        for (auto& x : img.data) x += shift;
    }
    if (cfg.contrast) {
        Rng rng(seed, 5);
        double factor = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
        double mean = 0;
        for (float x : img.data) mean += double(x);
        mean /= double(img.numel());
        for (auto& x : img.data) x = float(mean + factor * (double(x) - mean));
    }
    if (cfg.gamma) {
        Rng rng(seed, 6);
        double gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
        float lo = img.data[0], hi = img.data[0];
        for (float x : img.data) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        double range = double(hi) - double(lo);
        if (range > 1e-8) {
            for (auto& x : img.data)
                x = float(double(lo) + range * std::pow((double(x) - double(lo)) / range, gamma));
        }
    }
    img.dtype = VolDType::F32;
    img.nifti_header.reset();
    lab.nifti_header.reset();
    return {std::move(img), std::move(lab)};
}

}  // namespace phtrans
