#include <doctest.h>

#include "phtrans/pipeline.hpp"

using namespace phtrans;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    std::string path;
    explicit TempDir(const std::string& name) : path("tmp_" + name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// very small configuration for fast pipeline smoke tests
SelfTrainConfig smoke_config() {
    SelfTrainConfig cfg = SelfTrainConfig::desk(1, 7);
    auto shrink = [](PHTransConfig& c, int64_t classes) {
        c.n1 = 1;
        c.n2 = 1;
        c.base_channels = 6;
        c.heads = {2};
        c.windows = {{2, 2, 2}};
        c.num_classes = classes;
        c.input_shape = {16, 16, 16};
        c.downsample_count = 1;
        c.validate();
    };
    shrink(cfg.teacher_arch, 2);
    shrink(cfg.coarse_arch, 2);
    shrink(cfg.fine_arch, 2);
    cfg.teacher_train = TrainConfig::desk({16, 16, 16}, 25);
    cfg.teacher_train.augment_enabled = false;
    cfg.teacher_train.seed = 31;
    cfg.coarse_train = TrainConfig::desk({16, 16, 16}, 6);
    cfg.fine_train = TrainConfig::desk({16, 16, 16}, 6);
    cfg.coarse_train.pseudo_per_epoch = 8;
    cfg.fine_train.pseudo_per_epoch = 8;
    return cfg;
}

CaseManifest smoke_dataset(const std::string& dir, int64_t labeled, int64_t unlabeled, int64_t val) {
    PhantomDatasetSpec spec;
    spec.dir = dir;
    spec.labeled = labeled;
    spec.unlabeled = unlabeled;
    spec.val = val;
    spec.shape = {16, 16, 16};
    spec.classes = 1;
    spec.noise_sigma = 0.04;
    spec.seed = 404;
    return generate_phantom_dataset(spec);
}

}  // namespace

TEST_CASE("manifest: round trip and validation") {
    TempDir tmp("manifest");
    CaseManifest m;
    m.root = tmp.path;
    m.cases.push_back({"a", "images/a.json", "labels/a.json", Split::Labeled});
    m.cases.push_back({"b", "images/b.json", "", Split::Unlabeled});
    m.cases.push_back({"v", "images/v.json", "labels/v.json", Split::Val});
    m.validate();
    save_manifest(tmp.path + "/manifest.json", m);
    CaseManifest r = load_manifest(tmp.path + "/manifest.json");
    CHECK(r.cases.size() == 3);
    CHECK(r.find("b").split == Split::Unlabeled);
    CHECK(r.find("a").label == "labels/a.json");
    CHECK(r.ids_of(Split::Labeled) == std::vector<std::string>{"a"});
    CHECK(r.root == tmp.path);

    CaseManifest dup = m;
    dup.cases.push_back({"a", "x.json", "", Split::Unlabeled});
    CHECK_THROWS_WITH_AS(dup.validate(), doctest::Contains("duplicate"), Error);

    CaseManifest nolabel = m;
    nolabel.cases[0].label.clear();
    CHECK_THROWS_WITH_AS(nolabel.validate(), doctest::Contains("lacks a label"), Error);

    // pseudo records must reference generated label files
    CaseManifest pseudo_missing = m;
    pseudo_missing.cases[1].split = Split::Pseudo;
    CHECK_THROWS_AS(pseudo_missing.validate(), Error);

    CHECK_THROWS_AS(m.find("nope"), Error);
}

TEST_CASE("roi_from_coarse: exact box, margin arithmetic, empty fallback") {
    Volume mask = Volume::make({32, 32, 32}, VolKind::Label);
    for (int64_t a = 10; a < 20; ++a)
        for (int64_t b = 10; b < 20; ++b)
            for (int64_t c = 10; c < 20; ++c) mask.at(a, b, c) = 1.f;

    RoiBox exact = roi_from_coarse(mask, 0.0);
    for (int i = 0; i < 3; ++i) {
        CHECK(exact.lo[size_t(i)] == 10);
        CHECK(exact.hi[size_t(i)] == 20);
    }
    CHECK(!exact.fallback);

    RoiBox pad = roi_from_coarse(mask, 0.1);
    for (int i = 0; i < 3; ++i) {
        CHECK(pad.lo[size_t(i)] == 9);
        CHECK(pad.hi[size_t(i)] == 21);
    }

    // clamped at the volume bounds
    Volume edge = Volume::make({16, 16, 16}, VolKind::Label);
    for (int64_t a = 0; a < 8; ++a) edge.at(a, 0, 0) = 1.f;
    RoiBox clamped = roi_from_coarse(edge, 0.5);
    CHECK(clamped.lo[0] == 0);
    CHECK(clamped.hi[0] == 12);
    CHECK(clamped.lo[1] == 0);

    Volume empty = Volume::make({8, 8, 8}, VolKind::Label);
    RoiBox fb = roi_from_coarse(empty, 0.1);
    CHECK(fb.fallback);
    CHECK(fb.lo == std::array<int64_t, 3>{0, 0, 0});
    CHECK(fb.hi == std::array<int64_t, 3>{8, 8, 8});

    // box mapping by resampling scale factors
    RoiBox mapped = map_box(exact, {32, 32, 32}, {64, 64, 64});
    for (int i = 0; i < 3; ++i) {
        CHECK(mapped.lo[size_t(i)] == 20);
        CHECK(mapped.hi[size_t(i)] == 40);
    }
}

TEST_CASE("argmax_labels: lower class index wins ties") {
    Tensor<float> logits = Tensor<float>::zeros({1, 3, 1, 1, 2});
    // voxel 0: all equal -> class 0; voxel 1: classes 1 and 2 tie above 0 -> class 1
    logits.values()[1 * 2 + 1] = 5.f;
    logits.values()[2 * 2 + 1] = 5.f;
    Volume lab = argmax_labels(logits);
    CHECK(lab.data[0] == 0.f);
    CHECK(lab.data[1] == 1.f);
}

TEST_CASE("undo_reorient inverts reorient_canonical") {
    Rng rng(701);
    Volume v = Volume::make({4, 5, 6}, VolKind::Label);
    for (auto& x : v.data) x = float(rng.uniform_int(0, 3));
    v.direction = {{{0, -1, 0}, {0, 0, 1}, {-1, 0, 0}}};
    v.spacing = {1.0, 2.0, 3.0};
    v.origin = {5, 6, 7};

    Volume canon = reorient_canonical(v);
    Volume back = undo_reorient(canon, v);
    CHECK(back.shape == v.shape);
    CHECK(back.spacing == v.spacing);
    CHECK(back.origin == v.origin);
    for (int64_t i = 0; i < v.numel(); ++i) CHECK(back.data[size_t(i)] == v.data[size_t(i)]);
}

TEST_CASE("infer_two_stage: contracts hold even for untrained models") {
    SelfTrainConfig cfg = smoke_config();
    PHTransModel<float> coarse(cfg.coarse_arch);
    coarse.init_weights();
    PHTransModel<float> fine(cfg.fine_arch);
    fine.init_weights();

    PhantomSpec ps;
    ps.shape = {20, 24, 18};
    ps.classes = 1;
    ps.seed = 5;
    auto [img, gt] = generate_phantom(ps);
    img.direction = {{{0, 1, 0}, {1, 0, 0}, {0, 0, -1}}};  // non-canonical orientation

    TwoStageResult a = infer_two_stage(coarse, fine, img, 0.1);
    TwoStageResult b = infer_two_stage(coarse, fine, img, 0.1);

    // deterministic: identical checkpoints and input give identical output
    CHECK(a.labels.data == b.labels.data);
    // geometry preserved
    CHECK(a.labels.shape == img.shape);
    CHECK(a.labels.direction == img.direction);
    CHECK(a.labels.spacing == img.spacing);
    // labels in range
    for (float x : a.labels.data) {
        CHECK(x >= 0.f);
        CHECK(x < float(cfg.fine_arch.num_classes));
    }
    // everything outside the ROI box is background (checked in the canonical frame)
    Volume canon_out = reorient_canonical(a.labels);
    int64_t outside_fg = 0;
    for (int64_t d = 0; d < canon_out.shape[0]; ++d)
        for (int64_t h = 0; h < canon_out.shape[1]; ++h)
            for (int64_t w = 0; w < canon_out.shape[2]; ++w) {
                bool inside = d >= a.roi.lo[0] && d < a.roi.hi[0] && h >= a.roi.lo[1] && h < a.roi.hi[1] &&
                              w >= a.roi.lo[2] && w < a.roi.hi[2];
                if (!inside && canon_out.at(d, h, w) != 0.f) ++outside_fg;
            }
    CHECK(outside_fg == 0);
}

TEST_CASE("train_teacher: learns the smoke dataset and never reads unlabeled cases") {
    TempDir tmp("teacher");
    CaseManifest manifest = smoke_dataset(tmp.path + "/data", 10, 4, 2);
    SelfTrainConfig cfg = smoke_config();

    std::shared_ptr<std::map<std::string, int>> reads;
    TrainResult res = train_teacher(manifest, cfg, tmp.path + "/teacher", nullptr, &reads);
    CHECK(res.loss_curve.size() == size_t(cfg.teacher_train.epochs));
    CHECK(res.loss_curve.back() < 0.3);

    // only labeled ids were touched
    auto labeled = manifest.ids_of(Split::Labeled);
    std::set<std::string> labeled_set(labeled.begin(), labeled.end());
    for (const auto& [id, n] : *reads) {
        CHECK(labeled_set.count(id) == 1);
        CHECK(n > 0);
    }
    for (const auto& id : manifest.ids_of(Split::Unlabeled)) CHECK(reads->count(id) == 0);

    // checkpoint round trip reproduces the forward pass bitwise
    PHTransModel<float> loaded = load_model(res.best_path.empty() ? res.last_path : res.best_path);
    const CaseRecord& rec = manifest.find(labeled[0]);
    Volume img = read_volume(manifest.resolve(rec.image), VolKind::Image);
    Volume in = zscore(resample(reorient_canonical(img), cfg.teacher_arch.input_shape, Interp::Trilinear));
    NoGrad<float> guard;
    auto o1 = loaded.forward(volume_to_input(in));
    auto o2 = loaded.forward(volume_to_input(in));
    for (int64_t i = 0; i < o1.back().numel(); ++i)
        CHECK(o1.back().values()[size_t(i)] == o2.back().values()[size_t(i)]);

    // --- pseudo labels from this teacher ---
    CaseManifest with_pseudo = manifest;
    int64_t made = pseudo_label(res.best_path.empty() ? res.last_path : res.best_path, with_pseudo,
                                tmp.path + "/pseudo");
    CHECK(made == 4);
    CHECK(with_pseudo.ids_of(Split::Pseudo).size() == 4);
    CHECK(with_pseudo.ids_of(Split::Unlabeled).empty());
    with_pseudo.validate();

    // pseudo labels are valid maps in [0, K) at the original geometry
    for (const auto& id : with_pseudo.ids_of(Split::Pseudo)) {
        const CaseRecord& pr = with_pseudo.find(id);
        Volume lab = read_volume(with_pseudo.resolve(pr.label), VolKind::Label);
        CHECK(lab.shape == Shape{16, 16, 16});
        for (float x : lab.data) {
            CHECK(x >= 0.f);
            CHECK(x < 2.f + 1e-6f);
        }
    }

    // sanity: the teacher reproduces labeled cases about as well as in training
    auto dsc_of = [&](const std::string& id) {
        const CaseRecord& r2 = manifest.find(id);
        Volume image = read_volume(manifest.resolve(r2.image), VolKind::Image);
        Volume gt = read_volume(manifest.resolve(r2.label), VolKind::Label);
        Volume canon = reorient_canonical(image);
        Volume minput = zscore(resample(canon, cfg.teacher_arch.input_shape, Interp::Trilinear));
        auto outs = loaded.forward(volume_to_input(minput));
        Volume pred = resample(argmax_labels(outs.back()), canon.shape, Interp::Nearest);
        Volume full = undo_reorient(pred, image);
        return dsc(binarize_labels(full), binarize_labels(gt));
    };
    double mean_dsc = 0;
    for (int i = 0; i < 3; ++i) mean_dsc += dsc_of(labeled[size_t(i)]) / 3.0;
    CHECK(mean_dsc > 0.6);
}

TEST_CASE("pipeline stage ordering is enforced") {
    TempDir tmp("ordering");
    CaseManifest manifest = smoke_dataset(tmp.path + "/data", 2, 1, 1);

    // pseudo-labeling refuses to run without a teacher checkpoint
    CHECK_THROWS_AS(pseudo_label(tmp.path + "/missing.phtr", manifest, tmp.path + "/pseudo"), Error);

    // student training refuses pseudo cases lacking generated labels
    CaseManifest broken = manifest;
    for (auto& c : broken.cases)
        if (c.split == Split::Unlabeled) c.split = Split::Pseudo;  // no label files generated
    CHECK_THROWS_AS(broken.validate(), Error);

    // teacher training requires labeled cases
    CaseManifest unlabeled_only = manifest;
    for (auto& c : unlabeled_only.cases) c.split = Split::Unlabeled;
    SelfTrainConfig cfg = smoke_config();
    CHECK_THROWS_AS(train_teacher(unlabeled_only, cfg, tmp.path + "/none"), Error);
}

TEST_CASE("pseudo_label: unreadable cases are skipped with a warning") {
    TempDir tmp("skipcase");
    CaseManifest manifest = smoke_dataset(tmp.path + "/data", 2, 2, 1);
    // break one unlabeled case's image path
    for (auto& c : manifest.cases)
        if (c.split == Split::Unlabeled) {
            c.image = "images/definitely_missing.json";
            break;
        }
    SelfTrainConfig cfg = smoke_config();
    cfg.teacher_train.epochs = 1;
    TrainResult teacher = train_teacher(manifest, cfg, tmp.path + "/teacher");
    std::ostringstream console;
    RunLog log(&console);
    int64_t made = pseudo_label(teacher.best_path.empty() ? teacher.last_path : teacher.best_path, manifest,
                                tmp.path + "/pseudo", &log);
    CHECK(made == 1);  // the readable one
    CHECK(console.str().find("skipping unreadable case") != std::string::npos);
    CHECK(manifest.ids_of(Split::Pseudo).size() == 1);
    CHECK(manifest.ids_of(Split::Unlabeled).size() == 1);  // the broken one stays unlabeled
}

TEST_CASE("pseudo_per_epoch = 0 reduces to the labeled-only baseline exactly") {
    TempDir tmp("degenerate");
    CaseManifest manifest = smoke_dataset(tmp.path + "/data", 3, 2, 1);
    SelfTrainConfig cfg = smoke_config();
    cfg.teacher_train.epochs = 2;
    TrainResult teacher = train_teacher(manifest, cfg, tmp.path + "/teacher");
    pseudo_label(teacher.best_path.empty() ? teacher.last_path : teacher.best_path, manifest, tmp.path + "/pseudo");

    cfg.coarse_train.epochs = 2;
    SelfTrainConfig zero = cfg;
    zero.coarse_train.pseudo_per_epoch = 0;
    // with pseudo data available but pseudo_per_epoch=0, training must equal
    // the labeled-only run bitwise
    std::string with_pool = train_student(manifest, zero, "coarse", tmp.path + "/a", true);
    std::string baseline = train_student(manifest, zero, "coarse", tmp.path + "/b", false);
    CheckpointData ca = read_checkpoint(with_pool);
    CheckpointData cb = read_checkpoint(baseline);
    REQUIRE(ca.tensors.size() == cb.tensors.size());
    for (size_t i = 0; i < ca.tensors.size(); ++i) {
        REQUIRE(ca.tensors[i].first == cb.tensors[i].first);
        auto va = ca.tensors[i].second.values();
        auto vb = cb.tensors[i].second.values();
        REQUIRE(va.size() == vb.size());
        for (size_t j = 0; j < va.size(); ++j) REQUIRE(va[j] == vb[j]);
    }
}

TEST_CASE("coarse student training labels are strictly binary") {
    TempDir tmp("binary");
    CaseManifest manifest = smoke_dataset(tmp.path + "/data", 2, 0, 1);
    SelfTrainConfig cfg = smoke_config();
    const CaseRecord& rec = manifest.find(manifest.ids_of(Split::Labeled)[0]);
    Volume img = read_volume(manifest.resolve(rec.image), VolKind::Image);
    Volume lab = read_volume(manifest.resolve(rec.label), VolKind::Label);
    auto [pi, pl] = preprocess_whole(img, lab, cfg.coarse_arch.input_shape, true);
    for (float v : pl.data) CHECK((v == 0.f || v == 1.f));
}
