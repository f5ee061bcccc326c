#pragma once

#include <array>
#include <memory>
#include <optional>

#include "phtrans/common.hpp"
#include "phtrans/tensor.hpp"

namespace phtrans {

enum class VolKind { Image, Label };
enum class VolDType { U8, I16, F32 };

inline const char* dtype_name(VolDType d) {
    switch (d) {
        case VolDType::U8: return "uint8";
        case VolDType::I16: return "int16";
        default: return "float32";
    }
}

// 3D scalar or label image with spacing/orientation metadata. Index order is
// (d0,d1,d2) with d2 fastest; direction column c is the world direction of
// index axis c.
struct Volume {
    Shape shape;  // (d0,d1,d2)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::array<std::array<double, 3>, 3> direction{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    std::array<double, 3> origin{0.0, 0.0, 0.0};
    VolKind kind = VolKind::Image;
    VolDType dtype = VolDType::F32;
    std::vector<float> data;
    // verbatim NIfTI header for passthrough on write; dropped when geometry,
    // dtype or values change
    std::shared_ptr<std::vector<char>> nifti_header;

    int64_t numel() const { return int64_t(data.size()); }
    float at(int64_t a, int64_t b, int64_t c) const { return data[size_t((a * shape[1] + b) * shape[2] + c)]; }
    float& at(int64_t a, int64_t b, int64_t c) { return data[size_t((a * shape[1] + b) * shape[2] + c)]; }

    static Volume make(Shape shape, VolKind kind, float fill = 0.f) {
        Volume v;
        v.shape = std::move(shape);
        PH_CHECK(v.shape.size() == 3, "volume: shape must be 3D");
        v.kind = kind;
        if (kind == VolKind::Label) v.dtype = VolDType::U8;
        v.data.assign(size_t(numel_of(v.shape)), fill);
        return v;
    }

    void check_valid() const {
        PH_CHECK(shape.size() == 3 && numel_of(shape) == numel(), "volume: shape/data mismatch");
        for (double s : spacing) PH_CHECK(s > 0, "volume: spacing must be strictly positive");
    }
};

enum class Interp { Trilinear, Nearest };

// Axis-align the volume with the canonical frame: each index axis is mapped
// to its dominant world axis (nearest-axis snapping), data and spacing are
// permuted/flipped accordingly. Pure index manipulation, no interpolation.
inline Volume reorient_canonical(const Volume& v) {
    v.check_valid();
    int world_of[3];
    int sign_of[3];
    bool taken[3] = {false, false, false};
    for (int j = 0; j < 3; ++j) {
        int best = 0;
        double mag = -1;
        for (int a = 0; a < 3; ++a) {
            double m = std::abs(v.direction[size_t(a)][size_t(j)]);
            if (m > mag) {
                mag = m;
                best = a;
            }
        }
        PH_CHECK(mag > 1e-12, "reorient: orientation matrix is singular (zero column)");
        PH_CHECK(!taken[best], "reorient: orientation matrix is singular (two axes share a dominant direction)");
        taken[best] = true;
        world_of[j] = best;
        sign_of[j] = v.direction[size_t(best)][size_t(j)] >= 0 ? 1 : -1;
    }
    int src_axis[3];
    for (int j = 0; j < 3; ++j) src_axis[world_of[j]] = j;

    Volume out;
    out.kind = v.kind;
    out.dtype = v.dtype;
    out.shape = {v.shape[size_t(src_axis[0])], v.shape[size_t(src_axis[1])], v.shape[size_t(src_axis[2])]};
    out.spacing = {v.spacing[size_t(src_axis[0])], v.spacing[size_t(src_axis[1])], v.spacing[size_t(src_axis[2])]};
    out.data.resize(v.data.size());

    bool flip[3];
    for (int k = 0; k < 3; ++k) flip[k] = sign_of[src_axis[k]] < 0;
    Shape in_strides = strides_of(v.shape);
    for (int64_t a = 0; a < out.shape[0]; ++a)
        for (int64_t b = 0; b < out.shape[1]; ++b)
            for (int64_t c = 0; c < out.shape[2]; ++c) {
                int64_t idx_new[3] = {a, b, c};
                int64_t flat = 0;
                for (int k = 0; k < 3; ++k) {
                    int64_t i = flip[k] ? out.shape[size_t(k)] - 1 - idx_new[k] : idx_new[k];
                    flat += i * in_strides[size_t(src_axis[k])];
                }
                out.at(a, b, c) = v.data[size_t(flat)];
            }

    // new origin = world position of the new (0,0,0) corner
    for (int a = 0; a < 3; ++a) out.origin[size_t(a)] = v.origin[size_t(a)];
    for (int k = 0; k < 3; ++k) {
        if (!flip[k]) continue;
        int j = src_axis[k];
        for (int a = 0; a < 3; ++a)
            out.origin[size_t(a)] +=
                v.direction[size_t(a)][size_t(j)] * v.spacing[size_t(j)] * double(v.shape[size_t(j)] - 1);
    }
    out.direction = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    return out;
}

// Resample to a target grid, voxel-centers (align-corners-false) convention.
// Images interpolate trilinearly, labels take the nearest voxel.
inline Volume resample(const Volume& v, const Shape& target, Interp mode) {
    v.check_valid();
    PH_CHECK(target.size() == 3 && target[0] > 0 && target[1] > 0 && target[2] > 0, "resample: bad target shape");
    PH_CHECK(!(mode == Interp::Trilinear && v.kind == VolKind::Label),
             "resample: trilinear interpolation on a label volume");
    Volume out;
    out.kind = v.kind;
    out.dtype = v.dtype;
    out.direction = v.direction;
    out.origin = v.origin;
    out.shape = target;
    out.data.resize(size_t(numel_of(target)));
    for (int i = 0; i < 3; ++i)
        out.spacing[size_t(i)] = v.spacing[size_t(i)] * double(v.shape[size_t(i)]) / double(target[size_t(i)]);

    const int64_t S0 = v.shape[0], S1 = v.shape[1], S2 = v.shape[2];
    auto src_coord = [](int64_t t, int64_t S, int64_t T) { return (double(t) + 0.5) * double(S) / double(T) - 0.5; };
    parallel_for(
        target[0],
        [&](int64_t a) {
            double sa = src_coord(a, S0, target[0]);
            for (int64_t b = 0; b < target[1]; ++b) {
                double sb = src_coord(b, S1, target[1]);
                for (int64_t c = 0; c < target[2]; ++c) {
                    double sc = src_coord(c, S2, target[2]);
                    float val;
                    if (mode == Interp::Nearest) {
                        int64_t ia = std::clamp<int64_t>(int64_t(std::floor(sa + 0.5)), 0, S0 - 1);
                        int64_t ib = std::clamp<int64_t>(int64_t(std::floor(sb + 0.5)), 0, S1 - 1);
                        int64_t ic = std::clamp<int64_t>(int64_t(std::floor(sc + 0.5)), 0, S2 - 1);
                        val = v.at(ia, ib, ic);
                    } else {
                        int64_t a0 = int64_t(std::floor(sa)), b0 = int64_t(std::floor(sb)), c0 = int64_t(std::floor(sc));
                        double fa = sa - double(a0), fb = sb - double(b0), fc = sc - double(c0);
                        auto cl = [](int64_t i, int64_t S) { return std::clamp<int64_t>(i, 0, S - 1); };
                        double acc = 0;
                        for (int da = 0; da < 2; ++da)
                            for (int db = 0; db < 2; ++db)
                                for (int dc = 0; dc < 2; ++dc) {
                                    double w = (da ? fa : 1 - fa) * (db ? fb : 1 - fb) * (dc ? fc : 1 - fc);
                                    acc += w * double(v.at(cl(a0 + da, S0), cl(b0 + db, S1), cl(c0 + dc, S2)));
                                }
                        val = float(acc);
                    }
                    out.at(a, b, c) = val;
                }
            }
        },
        1);
    return out;
}

// z-score normalization over all voxels of the volume
inline Volume zscore(const Volume& v) {
    PH_CHECK(v.kind == VolKind::Image, "zscore: image volumes only");
    double mean = 0;
    for (float x : v.data) mean += double(x);
    mean /= double(v.numel());
    double var = 0;
    for (float x : v.data) {
        double d = double(x) - mean;
        var += d * d;
    }
    double stddev = std::sqrt(var / double(v.numel()));
    double inv = 1.0 / std::max(stddev, 1e-8);
    Volume out = v;
    out.dtype = VolDType::F32;
    out.nifti_header.reset();
    for (auto& x : out.data) x = float((double(x) - mean) * inv);
    return out;
}

// optional intensity clipping ahead of z-score normalization
inline Volume clip_intensity(const Volume& v, float lo, float hi) {
    PH_CHECK(v.kind == VolKind::Image, "clip_intensity: image volumes only");
    PH_CHECK(lo < hi, "clip_intensity: need lo < hi");
    Volume out = v;
    out.nifti_header.reset();
    for (auto& x : out.data) x = std::clamp(x, lo, hi);
    return out;
}

// coarse-segmentation label collapse: 0 stays 0, every class >= 1 becomes 1
inline Volume binarize_labels(const Volume& v) {
    PH_CHECK(v.kind == VolKind::Label, "binarize_labels: label volumes only");
    Volume out = v;
    out.nifti_header.reset();
    for (auto& x : out.data) {
        PH_CHECK(x >= 0.f, "binarize_labels: negative label value ", x);
        x = x >= 1.f ? 1.f : 0.f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic phantoms: ellipsoidal "organs" with distinct intensities
// ---------------------------------------------------------------------------

struct PhantomSpec {
    Shape shape{64, 64, 64};
    int64_t classes = 3;  // organs labeled 1..classes
    double noise_sigma = 0.03;
    uint64_t seed = 1;

    struct Ellipsoid {
        std::array<double, 3> center;  // voxel coordinates
        std::array<double, 3> radii;   // voxels
        double intensity;
    };
    std::vector<Ellipsoid> organs;  // autogenerated per seed when empty
};

inline std::vector<PhantomSpec::Ellipsoid> phantom_organs(const PhantomSpec& spec) {
    if (!spec.organs.empty()) {
        PH_CHECK(int64_t(spec.organs.size()) == spec.classes, "phantom: organ list must match class count");
        return spec.organs;
    }
    std::vector<PhantomSpec::Ellipsoid> organs;
    Rng rng(spec.seed, 0x0E11u);
    double ext = double(*std::min_element(spec.shape.begin(), spec.shape.end()));
    // organs sit on a tight ring so neighbours touch: their union forms one
    // connected mass, matching the anatomy assumption behind the coarse
    // stage's largest-component post-processing. Per-case jitter of the ring
    // phase, radii and intensities makes a small labeled set undersample the
    // case distribution.
    double phase = rng.uniform(0.0, 6.283185307179586);
    for (int64_t c = 1; c <= spec.classes; ++c) {
        double angle = 6.283185307179586 * double(c - 1) / double(spec.classes) + phase;
        double ring = spec.classes > 1 ? 0.15 : 0.0;
        PhantomSpec::Ellipsoid e;
        e.center = {0.5 * double(spec.shape[0]) + rng.uniform(-0.05, 0.05) * double(spec.shape[0]),
                    (0.5 + ring * std::cos(angle)) * double(spec.shape[1]) + rng.uniform(-0.03, 0.03) * double(spec.shape[1]),
                    (0.5 + ring * std::sin(angle)) * double(spec.shape[2]) + rng.uniform(-0.03, 0.03) * double(spec.shape[2])};
        double base = 0.14 + 0.02 * double((c * 7) % 3);
        for (int i = 0; i < 3; ++i) e.radii[size_t(i)] = std::max(2.0, (base + rng.uniform(-0.02, 0.02)) * ext);
        e.intensity = 0.35 + 0.5 * double(c) / double(spec.classes) + rng.uniform(-0.05, 0.05);
        organs.push_back(e);
    }
    return organs;
}

// deterministic per seed; classes clipped by construction-order priority
inline std::pair<Volume, Volume> generate_phantom(const PhantomSpec& spec) {
    PH_CHECK(spec.classes >= 1, "phantom: need at least one class");
    auto organs = phantom_organs(spec);
    for (const auto& e : organs)
        for (int i = 0; i < 3; ++i)
            PH_CHECK(e.center[size_t(i)] - e.radii[size_t(i)] >= -0.5 &&
                         e.center[size_t(i)] + e.radii[size_t(i)] <= double(spec.shape[size_t(i)]) - 0.5,
                     "phantom: ellipsoid ", i, " leaves the grid");

    Volume image = Volume::make(spec.shape, VolKind::Image);
    Volume label = Volume::make(spec.shape, VolKind::Label);
    Rng noise(spec.seed, 0x401Fu);
    for (int64_t a = 0; a < spec.shape[0]; ++a)
        for (int64_t b = 0; b < spec.shape[1]; ++b)
            for (int64_t c = 0; c < spec.shape[2]; ++c) {
                float val = 0.f;
                int32_t cls = 0;
                for (size_t o = 0; o < organs.size(); ++o) {
                    const auto& e = organs[o];
                    double q = 0;
                    double p[3] = {double(a), double(b), double(c)};
                    for (int i = 0; i < 3; ++i) {
                        double d = (p[i] - e.center[size_t(i)]) / e.radii[size_t(i)];
                        q += d * d;
                    }
                    if (q <= 1.0) {
                        cls = int32_t(o) + 1;
                        val = float(e.intensity);
                        break;  // earlier classes take priority
                    }
                }
                image.at(a, b, c) = val + float(noise.normal() * spec.noise_sigma);
                label.at(a, b, c) = float(cls);
            }
    return {std::move(image), std::move(label)};
}

}  // namespace phtrans
