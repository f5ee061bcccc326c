#pragma once

#include <filesystem>
#include <iostream>
#include <set>

#include "phtrans/evalpost.hpp"
#include "phtrans/trainer.hpp"
#include "phtrans/volio.hpp"

namespace phtrans {

// ---------------------------------------------------------------------------
// dataset catalog
// ---------------------------------------------------------------------------

enum class Split { Labeled, Unlabeled, Pseudo, Val };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Labeled: return "labeled";
        case Split::Unlabeled: return "unlabeled";
        case Split::Pseudo: return "pseudo";
        default: return "val";
    }
}

inline Split split_from(const std::string& s) {
    if (s == "labeled") return Split::Labeled;
    if (s == "unlabeled") return Split::Unlabeled;
    if (s == "pseudo") return Split::Pseudo;
    if (s == "val") return Split::Val;
    fail("manifest: unknown split '", s, "'");
}

struct CaseRecord {
    std::string id;
    std::string image;  // path relative to the manifest root
    std::string label;  // empty for unlabeled
    Split split = Split::Unlabeled;
};

struct CaseManifest {
    std::string root;
    std::vector<CaseRecord> cases;

    void validate() const {
        std::set<std::string> ids;
        for (const auto& c : cases) {
            PH_CHECK(!c.id.empty() && !c.image.empty(), "manifest: case with empty id or image path");
            PH_CHECK(ids.insert(c.id).second, "manifest: duplicate case id '", c.id, "'");
            if (c.split == Split::Labeled || c.split == Split::Val || c.split == Split::Pseudo)
                PH_CHECK(!c.label.empty(), "manifest: ", split_name(c.split), " case '", c.id, "' lacks a label path");
        }
    }

    std::vector<std::string> ids_of(Split s) const {
        std::vector<std::string> out;
        for (const auto& c : cases)
            if (c.split == s) out.push_back(c.id);
        return out;
    }

    const CaseRecord& find(const std::string& id) const {
        for (const auto& c : cases)
            if (c.id == id) return c;
        fail("manifest: unknown case id '", id, "'");
    }

    CaseRecord& find_mutable(const std::string& id) {
        for (auto& c : cases)
            if (c.id == id) return c;
        fail("manifest: unknown case id '", id, "'");
    }

    std::string resolve(const std::string& rel) const {
        return root.empty() ? rel : root + "/" + rel;
    }
};

inline CaseManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    PH_CHECK(bool(is), "manifest: cannot open '", path, "'");
    nlohmann::json j = nlohmann::json::parse(is);
    CaseManifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    for (const auto& c : j.at("cases")) {
        CaseRecord r;
        r.id = c.at("id");
        r.image = c.at("image");
        if (c.contains("label") && !c.at("label").is_null()) r.label = c.at("label");
        r.split = split_from(c.at("split"));
        m.cases.push_back(std::move(r));
    }
    m.validate();
    return m;
}

inline void save_manifest(const std::string& path, const CaseManifest& m) {
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : m.cases) {
        nlohmann::json jc;
        jc["id"] = c.id;
        jc["image"] = c.image;
        if (!c.label.empty()) jc["label"] = c.label;
        jc["split"] = split_name(c.split);
        cases.push_back(jc);
    }
    nlohmann::json j;
    j["cases"] = cases;
    std::ofstream os(path);
    PH_CHECK(bool(os), "manifest: cannot open '", path, "' for writing");
    os << j.dump(2) << "\n";
}

// line-oriented run log with stage tags
class RunLog {
  public:
    explicit RunLog(std::ostream* console = nullptr, const std::string& file = "") : console_(console) {
        if (!file.empty()) {
            file_.open(file, std::ios::app);
            PH_CHECK(bool(file_), "run log: cannot open '", file, "'");
        }
    }
    void line(const std::string& stage, const std::string& msg) {
        std::string s = "[" + stage + "] " + msg + "\n";
        if (console_) (*console_) << s << std::flush;
        if (file_.is_open()) file_ << s << std::flush;
    }
  private:
    std::ostream* console_;
    std::ofstream file_;
};

// ---------------------------------------------------------------------------
// preprocessing per model role
// ---------------------------------------------------------------------------

// argmax over the class axis of a [1,K,D,H,W] logit map; ties go to the
// lower class index
inline Volume argmax_labels(const Tensor<float>& logits) {
    PH_CHECK(logits.dim() == 5 && logits.size(0) == 1, "argmax: expected [1,K,D,H,W]");
    int64_t K = logits.size(1), V = logits.size(2) * logits.size(3) * logits.size(4);
    Volume out = Volume::make({logits.size(2), logits.size(3), logits.size(4)}, VolKind::Label);
    auto lv = logits.values();
    for (int64_t x = 0; x < V; ++x) {
        int32_t best = 0;
        float bv = lv[size_t(x)];
        for (int64_t k = 1; k < K; ++k) {
            float v = lv[size_t(k * V + x)];
            if (v > bv) {
                bv = v;
                best = int32_t(k);
            }
        }
        out.data[size_t(x)] = float(best);
    }
    return out;
}

inline Tensor<float> volume_to_input(const Volume& v) {
    Tensor<float> t = Tensor<float>::zeros({1, 1, v.shape[0], v.shape[1], v.shape[2]});
    std::copy(v.data.begin(), v.data.end(), t.values().begin());
    return t;
}

// whole-volume preprocessing: reorient -> resample -> z-score (image),
// nearest resample (label)
inline std::pair<Volume, Volume> preprocess_whole(const Volume& image, const Volume& label, const Shape& target,
                                                  bool binarize) {
    Volume img = zscore(resample(reorient_canonical(image), target, Interp::Trilinear));
    Volume lab = resample(reorient_canonical(label), target, Interp::Nearest);
    if (binarize) lab = binarize_labels(lab);
    return {std::move(img), std::move(lab)};
}

// ---------------------------------------------------------------------------
// ROI handling
// ---------------------------------------------------------------------------

struct RoiBox {
    std::array<int64_t, 3> lo{0, 0, 0}, hi{0, 0, 0};  // [lo, hi) in volume indices
    double margin_frac = 0;
    bool fallback = false;  // empty coarse mask, box covers the whole volume
};

// bounding box of the foreground expanded by margin_frac per axis; an empty
// mask falls back to the full volume
inline RoiBox roi_from_coarse(const Volume& mask, double margin_frac) {
    RoiBox box;
    box.margin_frac = margin_frac;
    std::array<int64_t, 3> lo = {mask.shape[0], mask.shape[1], mask.shape[2]}, hi = {0, 0, 0};
    bool any = false;
    for (int64_t a = 0; a < mask.shape[0]; ++a)
        for (int64_t b = 0; b < mask.shape[1]; ++b)
            for (int64_t c = 0; c < mask.shape[2]; ++c)
                if (mask.at(a, b, c) != 0.f) {
                    any = true;
                    int64_t idx[3] = {a, b, c};
                    for (int i = 0; i < 3; ++i) {
                        lo[size_t(i)] = std::min(lo[size_t(i)], idx[i]);
                        hi[size_t(i)] = std::max(hi[size_t(i)], idx[i] + 1);
                    }
                }
    if (!any) {
        box.lo = {0, 0, 0};
        box.hi = {mask.shape[0], mask.shape[1], mask.shape[2]};
        box.fallback = true;
        return box;
    }
    for (int i = 0; i < 3; ++i) {
        int64_t extent = hi[size_t(i)] - lo[size_t(i)];
        int64_t pad = int64_t(std::llround(margin_frac * double(extent)));
        box.lo[size_t(i)] = std::max<int64_t>(0, lo[size_t(i)] - pad);
        box.hi[size_t(i)] = std::min<int64_t>(mask.shape[size_t(i)], hi[size_t(i)] + pad);
    }
    return box;
}

// map a box between index grids by the resampling scale factors
inline RoiBox map_box(const RoiBox& box, const Shape& from_shape, const Shape& to_shape) {
    RoiBox out = box;
    for (int i = 0; i < 3; ++i) {
        double scale = double(to_shape[size_t(i)]) / double(from_shape[size_t(i)]);
        out.lo[size_t(i)] = std::clamp<int64_t>(int64_t(std::floor(double(box.lo[size_t(i)]) * scale)), 0,
                                                to_shape[size_t(i)] - 1);
        out.hi[size_t(i)] =
            std::clamp<int64_t>(int64_t(std::ceil(double(box.hi[size_t(i)]) * scale)), out.lo[size_t(i)] + 1,
                                to_shape[size_t(i)]);
    }
    return out;
}

inline Volume crop_volume(const Volume& v, const RoiBox& box) {
    Shape extent = {box.hi[0] - box.lo[0], box.hi[1] - box.lo[1], box.hi[2] - box.lo[2]};
    Volume out = Volume::make(extent, v.kind);
    out.spacing = v.spacing;
    out.direction = v.direction;
    out.dtype = v.dtype;
    for (int64_t a = 0; a < extent[0]; ++a)
        for (int64_t b = 0; b < extent[1]; ++b)
            for (int64_t c = 0; c < extent[2]; ++c)
                out.at(a, b, c) = v.at(box.lo[0] + a, box.lo[1] + b, box.lo[2] + c);
    return out;
}

// ---------------------------------------------------------------------------
// reorientation plan (for undoing the canonical mapping after inference)
// ---------------------------------------------------------------------------

struct ReorientPlan {
    int src_axis[3];  // canonical axis k reads original axis src_axis[k]
    bool flip[3];
    Shape orig_shape;
};

inline ReorientPlan reorient_plan(const Volume& v) {
    ReorientPlan plan;
    plan.orig_shape = v.shape;
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
        PH_CHECK(mag > 1e-12 && !taken[best], "reorient: singular orientation matrix");
        taken[best] = true;
        world_of[j] = best;
        sign_of[j] = v.direction[size_t(best)][size_t(j)] >= 0 ? 1 : -1;
    }
    for (int j = 0; j < 3; ++j) plan.src_axis[world_of[j]] = j;
    for (int k = 0; k < 3; ++k) plan.flip[k] = sign_of[plan.src_axis[k]] < 0;
    return plan;
}

// inverse of reorient_canonical: take a label map in the canonical frame and
// return it on the original grid with the original metadata
inline Volume undo_reorient(const Volume& canonical, const Volume& original_ref) {
    ReorientPlan plan = reorient_plan(original_ref);
    Shape cshape = {plan.orig_shape[size_t(plan.src_axis[0])], plan.orig_shape[size_t(plan.src_axis[1])],
                    plan.orig_shape[size_t(plan.src_axis[2])]};
    PH_CHECK(canonical.shape == cshape, "undo_reorient: canonical shape ", shape_str(canonical.shape),
             " does not match plan ", shape_str(cshape));
    Volume out = Volume::make(plan.orig_shape, canonical.kind);
    out.spacing = original_ref.spacing;
    out.direction = original_ref.direction;
    out.origin = original_ref.origin;
    for (int64_t a = 0; a < cshape[0]; ++a)
        for (int64_t b = 0; b < cshape[1]; ++b)
            for (int64_t c = 0; c < cshape[2]; ++c) {
                int64_t canon_idx[3] = {a, b, c};
                int64_t orig_idx[3];
                for (int k = 0; k < 3; ++k) {
                    int j = plan.src_axis[k];
                    int64_t i = canon_idx[k];
                    if (plan.flip[k]) i = cshape[size_t(k)] - 1 - i;
                    orig_idx[j] = i;
                }
                out.at(orig_idx[0], orig_idx[1], orig_idx[2]) = canonical.at(a, b, c);
            }
    return out;
}

// ---------------------------------------------------------------------------
// two-stage inference
// ---------------------------------------------------------------------------

struct TwoStageResult {
    Volume labels;   // original geometry
    RoiBox roi;      // in canonical-frame original indices
    bool roi_fallback = false;
};

// coarse localization on the downsampled whole volume, then fine multi-class
// segmentation of the cropped ROI, restored to the input geometry
inline TwoStageResult infer_two_stage(PHTransModel<float>& coarse, PHTransModel<float>& fine, const Volume& image,
                                      double roi_margin = 0.10, RunLog* log = nullptr) {
    NoGrad<float> guard;
    Volume canon = reorient_canonical(image);
    const Shape coarse_shape = coarse.cfg.input_shape;
    const Shape fine_shape = fine.cfg.input_shape;

    Volume coarse_in = zscore(resample(canon, coarse_shape, Interp::Trilinear));
    auto coarse_out = coarse.forward(volume_to_input(coarse_in));
    Volume coarse_mask = argmax_labels(coarse_out.back());
    coarse_mask = keep_largest(coarse_mask, {1});

    RoiBox cbox = roi_from_coarse(coarse_mask, roi_margin);
    if (cbox.fallback && log) log->line("infer", "coarse mask empty, falling back to the whole volume");
    RoiBox obox = map_box(cbox, coarse_shape, canon.shape);

    Volume crop = crop_volume(canon, obox);
    Volume fine_in = zscore(resample(crop, fine_shape, Interp::Trilinear));
    auto fine_out = fine.forward(volume_to_input(fine_in));
    Volume fine_lab = argmax_labels(fine_out.back());
    std::vector<int32_t> classes;
    for (int64_t k = 1; k < fine.cfg.num_classes; ++k) classes.push_back(int32_t(k));
    fine_lab = keep_largest(fine_lab, classes);

    Volume restored = resample(fine_lab, crop.shape, Interp::Nearest);
    Volume full = Volume::make(canon.shape, VolKind::Label);
    full.spacing = canon.spacing;
    full.direction = canon.direction;
    full.origin = canon.origin;
    for (int64_t a = 0; a < restored.shape[0]; ++a)
        for (int64_t b = 0; b < restored.shape[1]; ++b)
            for (int64_t c = 0; c < restored.shape[2]; ++c)
                full.at(obox.lo[0] + a, obox.lo[1] + b, obox.lo[2] + c) = restored.at(a, b, c);

    TwoStageResult res;
    res.labels = undo_reorient(full, image);
    res.roi = obox;
    res.roi_fallback = cbox.fallback;
    return res;
}

// ---------------------------------------------------------------------------
// phantom dataset generation
// ---------------------------------------------------------------------------

struct PhantomDatasetSpec {
    std::string dir;
    int64_t labeled = 10, unlabeled = 40, val = 5;
    Shape shape{64, 64, 64};
    int64_t classes = 3;
    double noise_sigma = 0.05;
    uint64_t seed = 2024;
};

inline CaseManifest generate_phantom_dataset(const PhantomDatasetSpec& spec, RunLog* log = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(spec.dir + "/images");
    fs::create_directories(spec.dir + "/labels");
    CaseManifest m;
    m.root = spec.dir;
    int64_t total = spec.labeled + spec.unlabeled + spec.val;
    for (int64_t i = 0; i < total; ++i) {
        PhantomSpec ps;
        ps.shape = spec.shape;
        ps.classes = spec.classes;
        ps.noise_sigma = spec.noise_sigma;
        ps.seed = Rng::splitmix(spec.seed + uint64_t(i) * 977);
        auto [img, lab] = generate_phantom(ps);
        CaseRecord rec;
        rec.id = "case" + std::to_string(i);
        rec.split = i < spec.labeled ? Split::Labeled : i < spec.labeled + spec.unlabeled ? Split::Unlabeled : Split::Val;
        rec.image = "images/" + rec.id + ".json";
        write_volume_internal(m.resolve(rec.image), img);
        if (rec.split != Split::Unlabeled) {
            rec.label = "labels/" + rec.id + ".json";
            write_volume_internal(m.resolve(rec.label), lab);
        }
        m.cases.push_back(rec);
    }
    save_manifest(spec.dir + "/manifest.json", m);
    if (log) log->line("phantom-gen", "wrote " + std::to_string(total) + " cases to " + spec.dir);
    return m;
}

// ---------------------------------------------------------------------------
// self-training pipeline
// ---------------------------------------------------------------------------

struct SelfTrainConfig {
    PHTransConfig teacher_arch, coarse_arch, fine_arch;
    TrainConfig teacher_train, coarse_train, fine_train;
    double roi_margin = 0.10;
    double nsd_tau = 2.0;
    bool run_ablation = true;
    std::vector<std::string> class_names;  // defaults to C1..CK

    // commodity-CPU profile: 32^3 inputs, small nets, short schedules
    static SelfTrainConfig desk(int64_t classes, uint64_t seed = 99) {
        auto tiny = [&](int64_t num_classes) {
            PHTransConfig c;
            c.n1 = 1;
            c.n2 = 2;
            c.m1 = 2;
            c.m2 = 2;
            c.base_channels = 8;
            c.heads = {2, 2};
            c.windows = {{4, 4, 4}, {2, 2, 2}};
            c.mlp_ratio = 1;
            c.num_classes = num_classes;
            c.input_shape = {32, 32, 32};
            c.downsample_count = 2;
            c.seed = seed;
            c.validate();
            return c;
        };
        SelfTrainConfig c;
        // the teacher runs at a higher whole-volume resolution than the
        // students so its pseudo labels carry less boundary quantization
        c.teacher_arch = tiny(classes + 1);
        c.teacher_arch.input_shape = {48, 48, 48};
        c.teacher_arch.validate();
        c.coarse_arch = tiny(2);
        c.fine_arch = tiny(classes + 1);
        c.teacher_train = TrainConfig::desk({48, 48, 48}, 24);
        c.coarse_train = TrainConfig::desk({32, 32, 32}, 12);
        c.fine_train = TrainConfig::desk({32, 32, 32}, 12);
        c.teacher_train.seed = seed + 1;
        c.coarse_train.seed = seed + 2;
        c.fine_train.seed = seed + 3;
        c.teacher_train.pseudo_per_epoch = 0;
        c.coarse_train.pseudo_per_epoch = 45;
        c.fine_train.pseudo_per_epoch = 45;
        return c;
    }
};

// counts reads per case id so tests can assert which cases a stage touched
struct CountingLoader {
    const CaseManifest* manifest;
    std::function<std::pair<Volume, Volume>(const CaseRecord&)> transform;
    std::shared_ptr<std::map<std::string, int>> reads = std::make_shared<std::map<std::string, int>>();

    std::pair<Volume, Volume> operator()(const std::string& id) const {
        const CaseRecord& rec = manifest->find(id);
        ++(*reads)[id];
        return transform(rec);
    }
};

// stage (1): teacher trained on labeled data only
inline TrainResult train_teacher(const CaseManifest& manifest, const SelfTrainConfig& cfg, const std::string& out_dir,
                                 RunLog* log = nullptr, std::shared_ptr<std::map<std::string, int>>* reads_out = nullptr) {
    auto labeled = manifest.ids_of(Split::Labeled);
    PH_CHECK(!labeled.empty(), "train_teacher: no labeled cases in the manifest");
    std::filesystem::create_directories(out_dir);
    PHTransModel<float> teacher(cfg.teacher_arch);
    teacher.init_weights();

    CountingLoader loader{&manifest, [&](const CaseRecord& rec) {
        Volume img = read_volume(manifest.resolve(rec.image), VolKind::Image);
        Volume lab = read_volume(manifest.resolve(rec.label), VolKind::Label);
        return preprocess_whole(img, lab, cfg.teacher_arch.input_shape, false);
    }};
    if (reads_out) *reads_out = loader.reads;
    if (log) log->line("teacher", "training on " + std::to_string(labeled.size()) + " labeled cases");
    TrainResult res = train(teacher, loader, labeled, {}, cfg.teacher_train, out_dir, "", nullptr);
    std::ofstream curve(out_dir + "/loss_curve.csv");
    curve << res.loss_csv();
    if (log)
        log->line("teacher", "done, best loss " + std::to_string(res.best_loss) + " at epoch " +
                                 std::to_string(res.best_epoch));
    return res;
}

// stage (2): hard pseudo labels for every unlabeled case, written at the
// original geometry
inline int64_t pseudo_label(const std::string& teacher_ckpt, CaseManifest& manifest, const std::string& out_dir,
                            RunLog* log = nullptr) {
    PHTransModel<float> teacher = load_model(teacher_ckpt);
    std::filesystem::create_directories(out_dir);
    NoGrad<float> guard;
    int64_t made = 0;
    for (auto& rec : manifest.cases) {
        if (rec.split != Split::Unlabeled) continue;
        Volume img;
        try {
            img = read_volume(manifest.resolve(rec.image), VolKind::Image);
        } catch (const std::exception& e) {
            if (log) log->line("pseudo-label", std::string("skipping unreadable case ") + rec.id + ": " + e.what());
            continue;
        }
        Volume canon = reorient_canonical(img);
        Volume in = zscore(resample(canon, teacher.cfg.input_shape, Interp::Trilinear));
        auto outputs = teacher.forward(volume_to_input(in));
        Volume lab = argmax_labels(outputs.back());
        lab = resample(lab, canon.shape, Interp::Nearest);
        Volume full = undo_reorient(lab, img);
        std::string rel = "pseudo_" + rec.id + ".json";
        write_volume_internal(out_dir + "/" + rel, full);
        // manifest paths are root-relative
        std::filesystem::path rootp = std::filesystem::absolute(manifest.root.empty() ? "." : manifest.root);
        std::filesystem::path outp = std::filesystem::absolute(out_dir) / rel;
        rec.label = std::filesystem::relative(outp, rootp).string();
        rec.split = Split::Pseudo;
        ++made;
    }
    if (log) log->line("pseudo-label", "generated " + std::to_string(made) + " pseudo labels");
    return made;
}

namespace detail {

// fine-model training crops follow the (ground-truth or pseudo) label box
inline std::pair<Volume, Volume> fine_crop_case(const Volume& image, const Volume& label, const Shape& fine_shape,
                                                double margin) {
    Volume cimg = reorient_canonical(image);
    Volume clab = reorient_canonical(label);
    Volume binary = binarize_labels(clab);
    RoiBox box = roi_from_coarse(binary, margin);
    Volume img = zscore(resample(crop_volume(cimg, box), fine_shape, Interp::Trilinear));
    Volume lab = resample(crop_volume(clab, box), fine_shape, Interp::Nearest);
    return {std::move(img), std::move(lab)};
}

}  // namespace detail

struct StudentPaths {
    std::string coarse_ckpt, fine_ckpt;
};

// stage (3): one student. role "coarse" trains on binarized whole volumes,
// role "fine" on label-box crops with full classes.
inline std::string train_student(const CaseManifest& manifest, const SelfTrainConfig& cfg, const std::string& role,
                                 const std::string& out_dir, bool use_pseudo, RunLog* log = nullptr,
                                 const std::string& resume_from = "") {
    PH_CHECK(role == "coarse" || role == "fine", "train_student: role must be coarse or fine, got '", role, "'");
    auto labeled = manifest.ids_of(Split::Labeled);
    auto pseudo = manifest.ids_of(Split::Pseudo);
    const bool coarse_role = role == "coarse";
    const PHTransConfig& arch = coarse_role ? cfg.coarse_arch : cfg.fine_arch;
    TrainConfig tc = coarse_role ? cfg.coarse_train : cfg.fine_train;
    if (use_pseudo)
        PH_CHECK(!pseudo.empty() || tc.pseudo_per_epoch == 0,
                 "train_student: pseudo split is empty; run pseudo-label first");
    else
        tc.pseudo_per_epoch = 0;
    const std::string tag = use_pseudo ? "student+pd" : "student";

    PHTransModel<float> model(arch);
    model.init_weights();
    CountingLoader loader{&manifest, [&, coarse_role](const CaseRecord& rec) {
        Volume img = read_volume(manifest.resolve(rec.image), VolKind::Image);
        Volume lab = read_volume(manifest.resolve(rec.label), VolKind::Label);
        if (coarse_role) return preprocess_whole(img, lab, arch.input_shape, true);
        return detail::fine_crop_case(img, lab, arch.input_shape, cfg.roi_margin);
    }};
    std::filesystem::create_directories(out_dir);
    if (log) log->line(tag, "training " + role + " student (" + std::to_string(labeled.size()) + " labeled, " +
                                std::to_string(use_pseudo ? pseudo.size() : 0) + " pseudo)");
    TrainResult res =
        train(model, loader, labeled, use_pseudo ? pseudo : std::vector<std::string>{}, tc, out_dir, resume_from);
    if (log) log->line(tag, role + " student best loss " + std::to_string(res.best_loss));
    std::ofstream curve(out_dir + "/loss_curve.csv");
    curve << res.loss_csv();
    return res.best_path.empty() ? res.last_path : res.best_path;
}

inline StudentPaths train_students(const CaseManifest& manifest, const SelfTrainConfig& cfg,
                                   const std::string& out_dir, bool use_pseudo, RunLog* log = nullptr) {
    StudentPaths paths;
    paths.coarse_ckpt = train_student(manifest, cfg, "coarse", out_dir + "/coarse", use_pseudo, log);
    paths.fine_ckpt = train_student(manifest, cfg, "fine", out_dir + "/fine", use_pseudo, log);
    return paths;
}

// evaluate a coarse+fine student pair on the validation split
inline SegmentationReport evaluate_students(const CaseManifest& manifest, const StudentPaths& paths,
                                            const SelfTrainConfig& cfg, RunLog* log = nullptr) {
    PHTransModel<float> coarse = load_model(paths.coarse_ckpt);
    PHTransModel<float> fine = load_model(paths.fine_ckpt);
    auto val = manifest.ids_of(Split::Val);
    PH_CHECK(!val.empty(), "evaluate: no validation cases");
    std::vector<std::pair<Volume, Volume>> pairs;
    for (const auto& id : val) {
        const CaseRecord& rec = manifest.find(id);
        Volume img = read_volume(manifest.resolve(rec.image), VolKind::Image);
        Volume gt = read_volume(manifest.resolve(rec.label), VolKind::Label);
        TwoStageResult r = infer_two_stage(coarse, fine, img, cfg.roi_margin, log);
        pairs.emplace_back(std::move(r.labels), std::move(gt));
    }
    std::vector<std::string> names = cfg.class_names;
    if (names.empty())
        for (int64_t k = 1; k < cfg.fine_arch.num_classes; ++k) names.push_back("C" + std::to_string(k));
    SegmentationReport rep = report(pairs, names, cfg.nsd_tau, val);
    if (log) log->line("eval", "mean DSC " + std::to_string(rep.mean_dsc) + ", mean NSD " + std::to_string(rep.mean_nsd));
    return rep;
}

struct SelfTrainResult {
    std::string teacher_ckpt;
    StudentPaths students;          // trained with pseudo labels
    StudentPaths baseline;          // labeled-only ablation (when enabled)
    SegmentationReport with_pseudo;
    SegmentationReport labeled_only;
    bool ran_ablation = false;

    // two-row summary following the ablation-table structure
    std::string ablation_table() const {
        std::ostringstream os;
        os << std::left << std::setw(24) << "Method" << std::right << std::setw(10) << "Mean DSC" << std::setw(10)
           << "Mean NSD" << "\n";
        if (ran_ablation)
            os << std::left << std::setw(24) << "Two-stage+PHTrans" << std::right << std::fixed << std::setprecision(4)
               << std::setw(10) << labeled_only.mean_dsc << std::setw(10) << labeled_only.mean_nsd << "\n";
        os << std::left << std::setw(24) << "Two-stage+PHTrans+PD" << std::right << std::fixed << std::setprecision(4)
           << std::setw(10) << with_pseudo.mean_dsc << std::setw(10) << with_pseudo.mean_nsd << "\n";
        return os.str();
    }
};

// the full three-stage flow: teacher -> pseudo labels -> students -> report
inline SelfTrainResult run_selftrain(CaseManifest manifest, const SelfTrainConfig& cfg, const std::string& out_dir,
                                     RunLog* log = nullptr) {
    manifest.validate();
    std::filesystem::create_directories(out_dir);
    SelfTrainResult result;

    TrainResult teacher = train_teacher(manifest, cfg, out_dir + "/teacher", log);
    result.teacher_ckpt = teacher.best_path.empty() ? teacher.last_path : teacher.best_path;
    PH_CHECK(!result.teacher_ckpt.empty(), "selftrain: teacher produced no checkpoint");

    pseudo_label(result.teacher_ckpt, manifest, out_dir + "/pseudo", log);
    save_manifest(out_dir + "/manifest_with_pseudo.json", manifest);

    if (cfg.run_ablation) {
        result.baseline = train_students(manifest, cfg, out_dir + "/baseline", false, log);
        result.labeled_only = evaluate_students(manifest, result.baseline, cfg, log);
        result.ran_ablation = true;
    }
    result.students = train_students(manifest, cfg, out_dir + "/student", true, log);
    result.with_pseudo = evaluate_students(manifest, result.students, cfg, log);

    std::ofstream rep(out_dir + "/report.txt");
    rep << result.ablation_table() << "\n" << result.with_pseudo.to_table();
    std::ofstream csv(out_dir + "/report.csv");
    csv << result.with_pseudo.to_csv();
    if (log) log->line("selftrain", "complete");
    return result;
}

}  // namespace phtrans
