#pragma once

#include <functional>
#include <iostream>

#include "phtrans/augment.hpp"
#include "phtrans/checkpoint.hpp"
#include "phtrans/loss.hpp"
#include "phtrans/optim.hpp"
#include "phtrans/volume.hpp"

namespace phtrans {

struct TrainConfig {
    int64_t batch_size = 2;
    Shape patch_size = {64, 64, 64};
    int64_t epochs = 50;
    double lr_init = 0.01;
    double lr_min = 0.0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 1e-2;
    std::vector<double> ds_weights;  // empty selects the halving default
    AugmentConfig augment;
    bool augment_enabled = true;
    uint64_t seed = 42;
    int64_t pseudo_per_epoch = 450;

    void validate() const {
        PH_CHECK(epochs >= 1, "train config: epochs must be >= 1");
        PH_CHECK(lr_init > 0, "train config: lr_init must be positive");
        PH_CHECK(batch_size >= 1, "train config: batch_size must be >= 1");
        if (!ds_weights.empty()) {
            double total = 0;
            for (double w : ds_weights) {
                PH_CHECK(w >= 0, "train config: deep-supervision weights must be nonnegative");
                total += w;
            }
            PH_CHECK(std::abs(total - 1.0) < 1e-9, "train config: deep-supervision weights must sum to 1, got ", total);
        }
    }

    // reference protocol values (coarse / fine)
    static TrainConfig paper_coarse() {
        TrainConfig c;
        c.batch_size = 64;
        c.patch_size = {64, 64, 64};
        c.epochs = 300;
        c.lr_init = 0.01;
        return c;
    }
    static TrainConfig paper_fine() {
        TrainConfig c = paper_coarse();
        c.batch_size = 4;
        c.patch_size = {96, 192, 192};
        return c;
    }
    // commodity-CPU profile: small batches, few epochs, small patches
    static TrainConfig desk(Shape patch, int64_t epochs_ = 12) {
        TrainConfig c;
        c.batch_size = 2;
        c.patch_size = std::move(patch);
        c.epochs = epochs_;
        c.lr_init = 0.01;
        return c;
    }
};

// deterministic case selection: every labeled case once, plus a fresh
// without-replacement sample of pseudo-labeled cases each epoch
inline std::vector<std::string> epoch_sampler(const std::vector<std::string>& labeled,
                                              const std::vector<std::string>& pseudo, uint64_t seed, int64_t epoch,
                                              int64_t pseudo_per_epoch) {
    PH_CHECK(!labeled.empty(), "epoch_sampler: labeled case set is empty");
    std::vector<std::string> order = labeled;
    std::vector<std::string> pool = pseudo;
    Rng pick(seed, 0x5A5A0000ull + uint64_t(epoch));
    pick.shuffle(pool);
    int64_t take = std::min<int64_t>(pseudo_per_epoch, int64_t(pool.size()));
    order.insert(order.end(), pool.begin(), pool.begin() + take);
    Rng mix(seed, 0xA5A50000ull + uint64_t(epoch));
    mix.shuffle(order);
    return order;
}

struct TrainResult {
    std::vector<double> loss_curve;  // per-epoch mean loss
    std::vector<double> lr_curve;
    double best_loss = 1e300;
    int64_t best_epoch = -1;
    std::string best_path, last_path;

    std::string loss_csv() const {
        std::ostringstream os;
        os << "epoch,mean_loss,lr\n";
        os << std::setprecision(17);
        for (size_t e = 0; e < loss_curve.size(); ++e) os << e << "," << loss_curve[e] << "," << lr_curve[e] << "\n";
        return os.str();
    }
};

using CaseLoader = std::function<std::pair<Volume, Volume>(const std::string& id)>;

namespace detail {
inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}
}  // namespace detail

// Shared training loop: augment -> forward -> deep-supervision loss ->
// backward -> AdamW with a cosine schedule. Saves best and last checkpoints
// (with optimizer state) when checkpoint_dir is set; supports bitwise resume.
inline TrainResult train(PHTransModel<float>& model, const CaseLoader& loader,
                         const std::vector<std::string>& labeled, const std::vector<std::string>& pseudo,
                         const TrainConfig& cfg, const std::string& checkpoint_dir = "",
                         const std::string& resume_from = "", std::ostream* log = nullptr,
                         int64_t stop_after_epoch = -1) {
    cfg.validate();
    PH_CHECK(cfg.patch_size == model.cfg.input_shape, "train: patch size ", shape_str(cfg.patch_size),
             " must equal the model input shape ", shape_str(model.cfg.input_shape));
    auto params = model.parameters();
    AdamW<float> opt;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps = cfg.adam_eps;
    opt.weight_decay = cfg.weight_decay;
    opt.init(params);

    TrainResult res;
    int64_t start_epoch = 0;
    if (!resume_from.empty()) {
        CheckpointData ckpt = read_checkpoint(resume_from);
        PHTransModel<float> restored = load_model(ckpt);
        auto rp = restored.parameters();
        PH_CHECK(rp.size() == params.size(), "train: resume checkpoint does not match the model architecture");
        for (size_t i = 0; i < params.size(); ++i) {
            PH_CHECK(rp[i].tensor.shape() == params[i].tensor.shape(), "train: resume shape mismatch for ",
                     params[i].name);
            std::copy(rp[i].tensor.values().begin(), rp[i].tensor.values().end(), params[i].tensor.values().begin());
        }
        opt.restore(params, [&](const std::string& n) { return ckpt.find(n); }, ckpt.meta.at("opt_step").get<int64_t>());
        start_epoch = ckpt.meta.at("epoch").get<int64_t>() + 1;
        res.loss_curve = ckpt.meta.at("loss_curve").get<std::vector<double>>();
        res.lr_curve = ckpt.meta.at("lr_curve").get<std::vector<double>>();
        res.best_loss = ckpt.meta.at("best_loss").get<double>();
        res.best_epoch = ckpt.meta.at("best_epoch").get<int64_t>();
    }

    std::vector<double> ds_weights =
        cfg.ds_weights.empty() ? deep_supervision_weights(model.num_outputs()) : cfg.ds_weights;
    PH_CHECK(int64_t(ds_weights.size()) == model.num_outputs(), "train: ", ds_weights.size(),
             " deep-supervision weights for ", model.num_outputs(), " outputs");

    const Shape& ps = cfg.patch_size;
    const int64_t voxels = ps[0] * ps[1] * ps[2];

    // stop_after_epoch pauses a run without changing the lr schedule, so a
    // later resume replays the remaining epochs bitwise
    int64_t end_epoch = stop_after_epoch >= 0 ? std::min(cfg.epochs, stop_after_epoch + 1) : cfg.epochs;
    for (int64_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
        double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min);
        std::vector<std::string> order = epoch_sampler(labeled, pseudo, cfg.seed, epoch, cfg.pseudo_per_epoch);
        double epoch_loss = 0;
        int64_t steps = 0;
        for (size_t pos = 0; pos < order.size(); pos += size_t(cfg.batch_size)) {
            size_t bend = std::min(order.size(), pos + size_t(cfg.batch_size));
            int64_t B = int64_t(bend - pos);
            Tensor<float> batch = Tensor<float>::zeros({B, 1, ps[0], ps[1], ps[2]});
            LabelMap labels;
            labels.shape = {B, ps[0], ps[1], ps[2]};
            labels.v.resize(size_t(B * voxels));
            std::string batch_ids;
            for (int64_t b = 0; b < B; ++b) {
                const std::string& id = order[pos + size_t(b)];
                batch_ids += (b ? "," : "") + id;
                auto [img, lab] = loader(id);
                PH_CHECK(img.shape == ps && lab.shape == ps, "train: case '", id, "' has shape ",
                         shape_str(img.shape), ", expected ", shape_str(ps));
                if (cfg.augment_enabled && cfg.augment.any()) {
                    uint64_t aug_seed = Rng::splitmix(cfg.seed ^ detail::fnv1a(id)) + uint64_t(epoch) * 0x9E37ull;
                    std::tie(img, lab) = augment(img, lab, aug_seed, cfg.augment);
                }
                std::copy(img.data.begin(), img.data.end(), batch.values().begin() + b * voxels);
                for (int64_t i = 0; i < voxels; ++i) labels.v[size_t(b * voxels + i)] = int32_t(lab.data[size_t(i)]);
            }

            Tape<float>::active().clear();
            auto outputs = model.forward(batch);
            Tensor<float> loss = deep_supervision_loss(outputs, labels, ds_weights);
            double lval = double(loss.item());
            if (!std::isfinite(lval)) {
                Tape<float>::active().clear();
                fail("train: non-finite loss at epoch ", epoch, " step ", steps, " (lr=", lr, ", batch=[", batch_ids,
                     "])");
            }
            backward(loss);
            opt.step(params, lr);
            model.zero_grads();
            epoch_loss += lval;
            ++steps;
        }
        epoch_loss /= double(std::max<int64_t>(1, steps));
        res.loss_curve.push_back(epoch_loss);
        res.lr_curve.push_back(lr);
        if (log) (*log) << "epoch " << epoch << " loss " << epoch_loss << " lr " << lr << "\n";

        bool is_best = epoch_loss < res.best_loss;
        if (is_best) {
            res.best_loss = epoch_loss;
            res.best_epoch = epoch;
        }
        if (!checkpoint_dir.empty()) {
            nlohmann::json meta;
            meta["epoch"] = epoch;
            meta["opt_step"] = opt.step_count;
            meta["loss_curve"] = res.loss_curve;
            meta["lr_curve"] = res.lr_curve;
            meta["best_loss"] = res.best_loss;
            meta["best_epoch"] = res.best_epoch;
            res.last_path = checkpoint_dir + "/last.phtr";
            save_model(res.last_path, model, meta, opt.state_tensors(params));
            if (is_best) {
                res.best_path = checkpoint_dir + "/best.phtr";
                save_model(res.best_path, model, meta, opt.state_tensors(params));
            }
        }
    }
    return res;
}

}  // namespace phtrans
