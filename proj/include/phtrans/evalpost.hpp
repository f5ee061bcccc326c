#pragma once

#include <iomanip>
#include <sstream>

#include "phtrans/volume.hpp"

namespace phtrans {

// ---------------------------------------------------------------------------
// connected components (union-find, deterministic first-voxel id order)
// ---------------------------------------------------------------------------

struct ComponentLabeling {
    Shape shape;
    std::vector<int32_t> ids;      // 0 background, components numbered from 1
    std::vector<int64_t> sizes;    // sizes[c-1] = voxel count of component c
    int connectivity = 26;

    int64_t count() const { return int64_t(sizes.size()); }
};

namespace detail {

inline std::vector<std::array<int64_t, 3>> neighbor_offsets(int connectivity, bool half_only) {
    PH_CHECK(connectivity == 6 || connectivity == 18 || connectivity == 26, "connectivity must be 6, 18 or 26");
    std::vector<std::array<int64_t, 3>> out;
    for (int64_t a = -1; a <= 1; ++a)
        for (int64_t b = -1; b <= 1; ++b)
            for (int64_t c = -1; c <= 1; ++c) {
                int64_t l1 = std::abs(a) + std::abs(b) + std::abs(c);
                if (l1 == 0) continue;
                if (connectivity == 6 && l1 > 1) continue;
                if (connectivity == 18 && l1 > 2) continue;
                if (half_only && !(a < 0 || (a == 0 && b < 0) || (a == 0 && b == 0 && c < 0))) continue;
                out.push_back({a, b, c});
            }
    return out;
}

struct UnionFind {
    std::vector<int64_t> parent;
    explicit UnionFind(size_t n) : parent(n) {
        for (size_t i = 0; i < n; ++i) parent[i] = int64_t(i);
    }
    int64_t find(int64_t x) {
        while (parent[size_t(x)] != x) {
            parent[size_t(x)] = parent[size_t(parent[size_t(x)])];
            x = parent[size_t(x)];
        }
        return x;
    }
    void unite(int64_t a, int64_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[size_t(std::max(a, b))] = std::min(a, b);
    }
};

}  // namespace detail

inline ComponentLabeling connected_components(const Volume& mask, int connectivity = 26) {
    mask.check_valid();
    for (float x : mask.data) PH_CHECK(x == 0.f || x == 1.f, "connected_components: mask must be binary, found ", x);
    const int64_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
    ComponentLabeling out;
    out.shape = mask.shape;
    out.connectivity = connectivity;
    out.ids.assign(size_t(D * H * W), 0);

    detail::UnionFind uf(size_t(D * H * W));
    auto offs = detail::neighbor_offsets(connectivity, true);
    for (int64_t a = 0; a < D; ++a)
        for (int64_t b = 0; b < H; ++b)
            for (int64_t c = 0; c < W; ++c) {
                int64_t idx = (a * H + b) * W + c;
                if (mask.data[size_t(idx)] == 0.f) continue;
                for (const auto& o : offs) {
                    int64_t na = a + o[0], nb = b + o[1], nc = c + o[2];
                    if (na < 0 || na >= D || nb < 0 || nb >= H || nc < 0 || nc >= W) continue;
                    int64_t nidx = (na * H + nb) * W + nc;
                    if (mask.data[size_t(nidx)] != 0.f) uf.unite(idx, nidx);
                }
            }

    std::vector<int32_t> root_to_id(size_t(D * H * W), 0);
    int32_t next_id = 0;
    for (int64_t idx = 0; idx < D * H * W; ++idx) {
        if (mask.data[size_t(idx)] == 0.f) continue;
        int64_t root = uf.find(idx);
        if (root_to_id[size_t(root)] == 0) {
            root_to_id[size_t(root)] = ++next_id;  // first-voxel scan order
            out.sizes.push_back(0);
        }
        int32_t id = root_to_id[size_t(root)];
        out.ids[size_t(idx)] = id;
        ++out.sizes[size_t(id - 1)];
    }
    return out;
}

// For every listed class keep only its largest connected component (ties
// resolved toward the lowest component id); everything else becomes background.
inline Volume keep_largest(const Volume& labelmap, const std::vector<int32_t>& classes, int connectivity = 26) {
    labelmap.check_valid();
    PH_CHECK(labelmap.kind == VolKind::Label, "keep_largest: label volumes only");
    Volume out = labelmap;
    out.nifti_header.reset();
    for (int32_t cls : classes) {
        PH_CHECK(cls > 0, "keep_largest: classes must be positive, got ", cls);
        Volume mask = Volume::make(labelmap.shape, VolKind::Label);
        mask.spacing = labelmap.spacing;
        bool any = false;
        for (size_t i = 0; i < labelmap.data.size(); ++i) {
            if (labelmap.data[i] == float(cls)) {
                mask.data[i] = 1.f;
                any = true;
            }
        }
        if (!any) continue;
        ComponentLabeling cc = connected_components(mask, connectivity);
        int32_t best = 1;
        for (int32_t id = 2; id <= int32_t(cc.count()); ++id)
            if (cc.sizes[size_t(id - 1)] > cc.sizes[size_t(best - 1)]) best = id;
        for (size_t i = 0; i < out.data.size(); ++i)
            if (labelmap.data[i] == float(cls) && cc.ids[i] != best) out.data[i] = 0.f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

inline double dsc(const Volume& pred, const Volume& gt) {
    PH_CHECK(pred.shape == gt.shape, "dsc: shape mismatch ", shape_str(pred.shape), " vs ", shape_str(gt.shape));
    int64_t inter = 0, np = 0, ng = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        bool p = pred.data[i] != 0.f, g = gt.data[i] != 0.f;
        np += p;
        ng += g;
        inter += p && g;
    }
    if (np + ng == 0) return 1.0;  // both empty
    return 2.0 * double(inter) / double(np + ng);
}

namespace detail {

// border voxels under the 6-neighborhood face-exposure rule
inline std::vector<std::array<int64_t, 3>> surface_voxels(const Volume& mask) {
    const int64_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
    std::vector<std::array<int64_t, 3>> out;
    auto fg = [&](int64_t a, int64_t b, int64_t c) {
        if (a < 0 || a >= D || b < 0 || b >= H || c < 0 || c >= W) return false;
        return mask.at(a, b, c) != 0.f;
    };
    for (int64_t a = 0; a < D; ++a)
        for (int64_t b = 0; b < H; ++b)
            for (int64_t c = 0; c < W; ++c) {
                if (!fg(a, b, c)) continue;
                if (!fg(a - 1, b, c) || !fg(a + 1, b, c) || !fg(a, b - 1, c) || !fg(a, b + 1, c) || !fg(a, b, c - 1) ||
                    !fg(a, b, c + 1))
                    out.push_back({a, b, c});
            }
    return out;
}

// exhaustive nearest-surface search: squared mm distance from each of `from`
// to the nearest voxel of `to`
inline std::vector<double> surface_sqdist_exhaustive(const std::vector<std::array<int64_t, 3>>& from,
                                                     const std::vector<std::array<int64_t, 3>>& to,
                                                     const std::array<double, 3>& spacing) {
    std::vector<double> out(from.size(), 0.0);
    parallel_for(
        int64_t(from.size()),
        [&](int64_t i) {
            double best = 1e300;
            const auto& p = from[size_t(i)];
            for (const auto& q : to) {
                double da = double(p[0] - q[0]) * spacing[0];
                double db = double(p[1] - q[1]) * spacing[1];
                double dc = double(p[2] - q[2]) * spacing[2];
                double d = da * da + db * db + dc * dc;
                if (d < best) best = d;
            }
            out[size_t(i)] = best;
        },
        16);
    return out;
}

// 1D squared distance transform (Felzenszwalb-Huttenlocher) with anisotropic
// sample spacing, in doubles. Cells at 1e300 mark "no source"; the lower
// envelope is built over finite cells only.
inline void edt_1d(std::vector<double>& f, double spacing, std::vector<double>& scratch_d, std::vector<int64_t>& vx,
                   std::vector<double>& zx) {
    const double kInf = 1e300;
    int64_t n = int64_t(f.size());
    scratch_d.assign(size_t(n), kInf);
    vx.assign(size_t(n), 0);
    zx.assign(size_t(n + 1), 0.0);
    auto x = [spacing](int64_t i) { return double(i) * spacing; };
    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        if (f[size_t(q)] >= kInf) continue;
        double s = 0;
        while (k >= 0) {
            int64_t v = vx[size_t(k)];
            s = ((f[size_t(q)] + x(q) * x(q)) - (f[size_t(v)] + x(v) * x(v))) / (2.0 * (x(q) - x(v)));
            if (s > zx[size_t(k)]) break;
            --k;
        }
        ++k;
        vx[size_t(k)] = q;
        zx[size_t(k)] = k == 0 ? -kInf : s;
        zx[size_t(k + 1)] = kInf;
    }
    if (k < 0) return;  // the whole line is empty
    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        while (zx[size_t(j + 1)] < x(q)) ++j;
        int64_t v = vx[size_t(j)];
        double d = x(q) - x(v);
        scratch_d[size_t(q)] = d * d + f[size_t(v)];
    }
    f = scratch_d;
}

// full-volume squared EDT to the given surface voxels
inline std::vector<double> surface_sqdist_edt(const Shape& shape, const std::vector<std::array<int64_t, 3>>& to,
                                              const std::array<double, 3>& spacing) {
    const int64_t D = shape[0], H = shape[1], W = shape[2];
    std::vector<double> f(size_t(D * H * W), 1e300);
    for (const auto& q : to) f[size_t((q[0] * H + q[1]) * W + q[2])] = 0.0;
    std::vector<double> line, scratch_d, zx;
    std::vector<int64_t> vx;
    // axis 2 (fastest)
    for (int64_t a = 0; a < D; ++a)
        for (int64_t b = 0; b < H; ++b) {
            line.assign(size_t(W), 0.0);
            for (int64_t c = 0; c < W; ++c) line[size_t(c)] = f[size_t((a * H + b) * W + c)];
            edt_1d(line, spacing[2], scratch_d, vx, zx);
            for (int64_t c = 0; c < W; ++c) f[size_t((a * H + b) * W + c)] = line[size_t(c)];
        }
    // axis 1
    for (int64_t a = 0; a < D; ++a)
        for (int64_t c = 0; c < W; ++c) {
            line.assign(size_t(H), 0.0);
            for (int64_t b = 0; b < H; ++b) line[size_t(b)] = f[size_t((a * H + b) * W + c)];
            edt_1d(line, spacing[1], scratch_d, vx, zx);
            for (int64_t b = 0; b < H; ++b) f[size_t((a * H + b) * W + c)] = line[size_t(b)];
        }
    // axis 0
    for (int64_t b = 0; b < H; ++b)
        for (int64_t c = 0; c < W; ++c) {
            line.assign(size_t(D), 0.0);
            for (int64_t a = 0; a < D; ++a) line[size_t(a)] = f[size_t((a * H + b) * W + c)];
            edt_1d(line, spacing[0], scratch_d, vx, zx);
            for (int64_t a = 0; a < D; ++a) f[size_t((a * H + b) * W + c)] = line[size_t(a)];
        }
    return f;
}

}  // namespace detail

enum class SurfaceDistanceMethod { Exhaustive, DistanceTransform };

inline SurfaceDistanceMethod& nsd_method() {
    static SurfaceDistanceMethod m = SurfaceDistanceMethod::Exhaustive;
    return m;
}

// Normalized Surface Dice: the fraction of combined boundary voxels lying
// within tau millimetres of the other segmentation's boundary. Surfaces are
// face-exposed voxels; distances are Euclidean in mm via the voxel spacing.
inline double nsd(const Volume& pred, const Volume& gt, const std::array<double, 3>& spacing, double tau) {
    PH_CHECK(pred.shape == gt.shape, "nsd: shape mismatch ", shape_str(pred.shape), " vs ", shape_str(gt.shape));
    PH_CHECK(tau > 0, "nsd: tolerance must be positive");
    auto sp = detail::surface_voxels(pred);
    auto sg = detail::surface_voxels(gt);
    if (sp.empty() && sg.empty()) return 1.0;
    if (sp.empty() || sg.empty()) return 0.0;
    const double tau2 = tau * tau;
    int64_t close = 0;
    if (nsd_method() == SurfaceDistanceMethod::Exhaustive) {
        for (double d : detail::surface_sqdist_exhaustive(sp, sg, spacing)) close += d <= tau2;
        for (double d : detail::surface_sqdist_exhaustive(sg, sp, spacing)) close += d <= tau2;
    } else {
        auto dist_to_g = detail::surface_sqdist_edt(pred.shape, sg, spacing);
        for (const auto& p : sp) close += dist_to_g[size_t((p[0] * pred.shape[1] + p[1]) * pred.shape[2] + p[2])] <= tau2;
        auto dist_to_p = detail::surface_sqdist_edt(pred.shape, sp, spacing);
        for (const auto& g : sg) close += dist_to_p[size_t((g[0] * pred.shape[1] + g[1]) * pred.shape[2] + g[2])] <= tau2;
    }
    return double(close) / double(sp.size() + sg.size());
}

inline double nsd(const Volume& pred, const Volume& gt, double tau = 1.0) { return nsd(pred, gt, gt.spacing, tau); }

// ---------------------------------------------------------------------------
// report generation
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& flare_organ_names() {
    static const std::vector<std::string> names = {"Liver",  "RK",  "Spleen",      "Pancreas",  "Aorta",
                                                   "IVC",    "RAG", "LAG",         "Gallbladder", "Esophagus",
                                                   "Stomach", "Duodenum", "LK"};
    return names;
}

struct SegmentationReport {
    std::vector<std::string> class_names;  // foreground classes, column order
    std::vector<std::string> case_ids;
    std::vector<std::vector<double>> dsc_rows, nsd_rows;  // [case][class]
    std::vector<double> class_mean_dsc, class_mean_nsd;
    double mean_dsc = 0, mean_nsd = 0;

    std::string to_csv() const {
        std::ostringstream os;
        os << "case,metric,Mean";
        for (const auto& n : class_names) os << "," << n;
        os << "\n";
        auto row = [&](const std::string& id, const char* metric, const std::vector<double>& vals) {
            double m = 0;
            for (double v : vals) m += v;
            m /= double(vals.size());
            os << id << "," << metric << "," << m;
            for (double v : vals) os << "," << v;
            os << "\n";
        };
        for (size_t i = 0; i < case_ids.size(); ++i) {
            row(case_ids[i], "DSC", dsc_rows[i]);
            row(case_ids[i], "NSD", nsd_rows[i]);
        }
        row("mean", "DSC", class_mean_dsc);
        row("mean", "NSD", class_mean_nsd);
        return os.str();
    }

    std::string to_table() const {
        std::ostringstream os;
        auto line = [&](const std::string& label, double mean, const std::vector<double>& vals) {
            os << std::left << std::setw(18) << label << std::right << std::fixed << std::setprecision(4)
               << std::setw(8) << mean;
            for (double v : vals) os << std::setw(8) << v;
            os << "\n";
        };
        os << std::left << std::setw(18) << "Metric" << std::right << std::setw(8) << "Mean";
        for (const auto& n : class_names) os << std::setw(8) << (n.size() > 7 ? n.substr(0, 7) : n);
        os << "\n";
        line("DSC", mean_dsc, class_mean_dsc);
        line("NSD", mean_nsd, class_mean_nsd);
        return os.str();
    }
};

// Per-case, per-class DSC/NSD for multi-class label maps. Class c occupies
// column c-1; a class absent from both volumes scores 1 for that case.
inline SegmentationReport report(const std::vector<std::pair<Volume, Volume>>& cases,
                                 const std::vector<std::string>& class_names, double tau = 1.0,
                                 const std::vector<std::string>& case_ids = {}) {
    SegmentationReport rep;
    rep.class_names = class_names;
    int64_t K = int64_t(class_names.size());
    for (size_t ci = 0; ci < cases.size(); ++ci) {
        const auto& [pred, gt] = cases[ci];
        PH_CHECK(pred.shape == gt.shape, "report: case ", ci, " shape mismatch");
        for (float v : pred.data)
            PH_CHECK(v >= 0.f && v <= float(K), "report: prediction class ", v, " exceeds class count ", K);
        rep.case_ids.push_back(ci < case_ids.size() ? case_ids[ci] : "case" + std::to_string(ci));
        std::vector<double> drow, nrow;
        for (int64_t cls = 1; cls <= K; ++cls) {
            Volume pm = Volume::make(pred.shape, VolKind::Label);
            Volume gm = Volume::make(gt.shape, VolKind::Label);
            pm.spacing = gt.spacing;
            gm.spacing = gt.spacing;
            for (size_t i = 0; i < pred.data.size(); ++i) {
                pm.data[i] = pred.data[i] == float(cls) ? 1.f : 0.f;
                gm.data[i] = gt.data[i] == float(cls) ? 1.f : 0.f;
            }
            drow.push_back(dsc(pm, gm));
            nrow.push_back(nsd(pm, gm, gt.spacing, tau));
        }
        rep.dsc_rows.push_back(std::move(drow));
        rep.nsd_rows.push_back(std::move(nrow));
    }
    rep.class_mean_dsc.assign(size_t(K), 0.0);
    rep.class_mean_nsd.assign(size_t(K), 0.0);
    for (size_t ci = 0; ci < cases.size(); ++ci)
        for (int64_t k = 0; k < K; ++k) {
            rep.class_mean_dsc[size_t(k)] += rep.dsc_rows[ci][size_t(k)] / double(cases.size());
            rep.class_mean_nsd[size_t(k)] += rep.nsd_rows[ci][size_t(k)] / double(cases.size());
        }
    for (int64_t k = 0; k < K; ++k) {
        rep.mean_dsc += rep.class_mean_dsc[size_t(k)] / double(K);
        rep.mean_nsd += rep.class_mean_nsd[size_t(k)] / double(K);
    }
    return rep;
}

}  // namespace phtrans
