// Command-line front end: phantom generation, training, pseudo-labeling,
// two-stage inference, the full self-training pipeline, and evaluation.

#include <CLI11.hpp>

#include "phtrans/pipeline.hpp"

using namespace phtrans;

namespace {

struct CommonOpts {
    std::string log_file;
    int64_t threads = 0;
    std::string profile = "desk";
    int64_t classes = 3;
    uint64_t seed = 99;
    int64_t size = 32;
    int64_t epochs = -1;
    int64_t batch = -1;
    int64_t pseudo_per_epoch = -1;
    double margin = 0.10;
    double tau = 2.0;
    bool no_position_bias = false;
};

void add_model_flags(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--profile", o.profile, "model/training profile: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--classes", o.classes, "foreground class count (desk profile)");
    cmd->add_option("--seed", o.seed, "global seed");
    cmd->add_option("--size", o.size, "cubic input size of desk models");
    cmd->add_option("--epochs", o.epochs, "override training epochs");
    cmd->add_option("--batch", o.batch, "override batch size");
    cmd->add_option("--pseudo-per-epoch", o.pseudo_per_epoch, "pseudo cases sampled per epoch");
    cmd->add_option("--margin", o.margin, "ROI margin fraction");
    cmd->add_option("--tau", o.tau, "NSD tolerance in mm");
    cmd->add_flag("--no-position-bias", o.no_position_bias, "disable the learned relative position bias");
}

SelfTrainConfig build_config(const CommonOpts& o) {
    SelfTrainConfig cfg;
    if (o.profile == "paper") {
        cfg.teacher_arch = preset("phtrans_l");
        cfg.coarse_arch = preset("phtrans_s_coarse");
        cfg.fine_arch = preset("phtrans_s_fine");
        cfg.teacher_train = TrainConfig::paper_coarse();
        cfg.coarse_train = TrainConfig::paper_coarse();
        cfg.fine_train = TrainConfig::paper_fine();
        cfg.class_names = flare_organ_names();
        cfg.nsd_tau = 1.0;
    } else {
        cfg = SelfTrainConfig::desk(o.classes, o.seed);
        if (o.size != 32) {
            for (PHTransConfig* a : {&cfg.teacher_arch, &cfg.coarse_arch, &cfg.fine_arch}) {
                a->input_shape = {o.size, o.size, o.size};
                a->validate();
            }
            for (TrainConfig* t : {&cfg.teacher_train, &cfg.coarse_train, &cfg.fine_train})
                t->patch_size = {o.size, o.size, o.size};
        }
    }
    cfg.roi_margin = o.margin;
    cfg.nsd_tau = o.tau;
    for (PHTransConfig* a : {&cfg.teacher_arch, &cfg.coarse_arch, &cfg.fine_arch}) {
        a->seed = o.seed;
        if (o.no_position_bias) a->position_bias = false;
    }
    for (TrainConfig* t : {&cfg.teacher_train, &cfg.coarse_train, &cfg.fine_train}) {
        if (o.epochs > 0) t->epochs = o.epochs;
        if (o.batch > 0) t->batch_size = o.batch;
    }
    if (o.pseudo_per_epoch >= 0) {
        cfg.coarse_train.pseudo_per_epoch = o.pseudo_per_epoch;
        cfg.fine_train.pseudo_per_epoch = o.pseudo_per_epoch;
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PHTrans two-stage semi-supervised segmentation"};
    app.set_config("--config", "", "read options from a key=value config file");
    app.require_subcommand(1);

    CommonOpts opts;
    app.add_option("--log", opts.log_file, "append run log lines to this file");
    app.add_option("--threads", opts.threads, "worker thread count (default: hardware)");

    // phantom-gen
    auto* gen = app.add_subcommand("phantom-gen", "generate a synthetic phantom dataset with a manifest");
    PhantomDatasetSpec genspec;
    int64_t gen_size = 64;
    gen->add_option("--out", genspec.dir, "output dataset directory")->required();
    gen->add_option("--labeled", genspec.labeled, "labeled case count");
    gen->add_option("--unlabeled", genspec.unlabeled, "unlabeled case count");
    gen->add_option("--val", genspec.val, "validation case count");
    gen->add_option("--size", gen_size, "cubic volume size");
    gen->add_option("--classes", genspec.classes, "organ count");
    gen->add_option("--noise", genspec.noise_sigma, "background noise sigma");
    gen->add_option("--seed", genspec.seed, "dataset seed");

    // train
    auto* tr = app.add_subcommand("train", "train the teacher or a student model");
    std::string tr_role, tr_manifest, tr_out, tr_resume;
    bool tr_no_pseudo = false;
    tr->add_option("--role", tr_role, "teacher | coarse | fine")->required()->check(CLI::IsMember({"teacher", "coarse", "fine"}));
    tr->add_option("--manifest", tr_manifest, "dataset manifest path")->required();
    tr->add_option("--out", tr_out, "checkpoint output directory")->required();
    tr->add_option("--resume", tr_resume, "resume from this checkpoint");
    tr->add_flag("--labeled-only", tr_no_pseudo, "ignore pseudo-labeled cases");
    add_model_flags(tr, opts);

    // pseudo-label
    auto* pl = app.add_subcommand("pseudo-label", "generate pseudo labels for unlabeled cases");
    std::string pl_teacher, pl_manifest, pl_out, pl_manifest_out;
    pl->add_option("--teacher", pl_teacher, "teacher checkpoint")->required();
    pl->add_option("--manifest", pl_manifest, "dataset manifest path")->required();
    pl->add_option("--out", pl_out, "directory for generated label volumes")->required();
    pl->add_option("--manifest-out", pl_manifest_out, "where to write the updated manifest (default: in place)");

    // infer
    auto* inf = app.add_subcommand("infer", "two-stage inference on one image");
    std::string inf_coarse, inf_fine, inf_image, inf_out;
    inf->add_option("--coarse", inf_coarse, "coarse checkpoint")->required();
    inf->add_option("--fine", inf_fine, "fine checkpoint")->required();
    inf->add_option("--image", inf_image, "input image (.nii/.nii.gz or internal .json)")->required();
    inf->add_option("--out", inf_out, "output label path")->required();
    inf->add_option("--margin", opts.margin, "ROI margin fraction");

    // selftrain
    auto* st = app.add_subcommand("selftrain", "run the full three-stage self-training pipeline");
    std::string st_manifest, st_out;
    bool st_no_ablation = false;
    st->add_option("--manifest", st_manifest, "dataset manifest path")->required();
    st->add_option("--out", st_out, "run output directory")->required();
    st->add_flag("--no-ablation", st_no_ablation, "skip the labeled-only baseline run");
    add_model_flags(st, opts);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a student pair on the validation split");
    std::string ev_manifest, ev_coarse, ev_fine, ev_report;
    ev->add_option("--manifest", ev_manifest, "dataset manifest path")->required();
    ev->add_option("--coarse", ev_coarse, "coarse checkpoint")->required();
    ev->add_option("--fine", ev_fine, "fine checkpoint")->required();
    ev->add_option("--report", ev_report, "CSV report output path")->required();
    add_model_flags(ev, opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (opts.threads > 0) thread_count() = int(opts.threads);
        RunLog log(&std::cout, opts.log_file);

        if (gen->parsed()) {
            genspec.shape = {gen_size, gen_size, gen_size};
            generate_phantom_dataset(genspec, &log);
            log.line("phantom-gen", "manifest at " + genspec.dir + "/manifest.json");
        } else if (tr->parsed()) {
            CaseManifest manifest = load_manifest(tr_manifest);
            SelfTrainConfig cfg = build_config(opts);
            if (tr_role == "teacher") {
                TrainResult res = train_teacher(manifest, cfg, tr_out, &log);
                log.line("teacher", "checkpoint: " + (res.best_path.empty() ? res.last_path : res.best_path));
            } else {
                bool use_pseudo = !tr_no_pseudo && !manifest.ids_of(Split::Pseudo).empty();
                std::string ckpt = train_student(manifest, cfg, tr_role, tr_out, use_pseudo, &log, tr_resume);
                log.line(tr_role, "checkpoint: " + ckpt);
            }
        } else if (pl->parsed()) {
            CaseManifest manifest = load_manifest(pl_manifest);
            pseudo_label(pl_teacher, manifest, pl_out, &log);
            save_manifest(pl_manifest_out.empty() ? pl_manifest : pl_manifest_out, manifest);
        } else if (inf->parsed()) {
            PHTransModel<float> coarse = load_model(inf_coarse);
            PHTransModel<float> fine = load_model(inf_fine);
            Volume image = read_volume(inf_image, VolKind::Image);
            TwoStageResult res = infer_two_stage(coarse, fine, image, opts.margin, &log);
            res.labels.dtype = VolDType::U8;
            write_volume(inf_out, res.labels);
            log.line("infer", "wrote " + inf_out);
        } else if (st->parsed()) {
            CaseManifest manifest = load_manifest(st_manifest);
            SelfTrainConfig cfg = build_config(opts);
            cfg.run_ablation = !st_no_ablation;
            SelfTrainResult res = run_selftrain(manifest, cfg, st_out, &log);
            std::cout << res.ablation_table();
            std::cout << res.with_pseudo.to_table();
        } else if (ev->parsed()) {
            CaseManifest manifest = load_manifest(ev_manifest);
            SelfTrainConfig cfg = build_config(opts);
            StudentPaths paths{ev_coarse, ev_fine};
            SegmentationReport rep = evaluate_students(manifest, paths, cfg, &log);
            std::ofstream os(ev_report);
            PH_CHECK(bool(os), "cannot open '", ev_report, "' for writing");
            os << rep.to_csv();
            std::cout << rep.to_table();
            log.line("eval", "report at " + ev_report);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
