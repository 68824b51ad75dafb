#include "emma/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "emma/nn/graph.hpp"

namespace emma {

// --- enums -------------------------------------------------------------------

PseudoGtRule pseudo_gt_rule_from_string(const std::string& s) {
    if (s == "max") return PseudoGtRule::max;
    if (s == "average") return PseudoGtRule::average;
    if (s == "gradient_weighted") return PseudoGtRule::gradient_weighted;
    throw ConfigError("unknown pseudo_gt_rule: " + s);
}

std::string to_string(PseudoGtRule r) {
    switch (r) {
        case PseudoGtRule::max: return "max";
        case PseudoGtRule::average: return "average";
        case PseudoGtRule::gradient_weighted: return "gradient_weighted";
    }
    return "gradient_weighted";
}

Ablation ablation_from_string(const std::string& s) {
    if (s == "none") return Ablation::none;
    if (s == "no_equivariance") return Ablation::no_equivariance;
    if (s == "no_sensing") return Ablation::no_sensing;
    if (s == "traditional") return Ablation::traditional;
    if (s == "traditional_plus_da") return Ablation::traditional_plus_da;
    if (s == "no_global") return Ablation::no_global;
    if (s == "no_local") return Ablation::no_local;
    throw ConfigError("unknown ablation: " + s);
}

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::no_equivariance: return "no_equivariance";
        case Ablation::no_sensing: return "no_sensing";
        case Ablation::traditional: return "traditional";
        case Ablation::traditional_plus_da: return "traditional_plus_da";
        case Ablation::no_global: return "no_global";
        case Ablation::no_local: return "no_local";
    }
    return "none";
}

// --- config -------------------------------------------------------------------

TrainConfig TrainConfig::full_scale_defaults(int stage) {
    TrainConfig c;
    c.stage = stage;
    c.epochs = 100;
    c.batch_size = 8;
    c.patch_size = 128;
    c.lr_initial = 1e-4;
    c.lr_decay_factor = 0.5;
    c.lr_decay_every_epochs = 20;
    c.weights = LossWeights{1.0, 0.1};
    c.group.enable_shifts = true;
    c.group.max_shift_y = 32;  // patch/4
    c.group.max_shift_x = 32;
    c.group.enable_rotations = true;
    c.group.enable_flips = true;
    c.group.require_nontrivial = true;
    c.fuser_arch = nn::FuserArch{4, 16, nn::BlockVariant::both};
    c.sensor_arch = nn::SensorArch{5, 16};
    return c;
}

TrainConfig TrainConfig::desk_defaults(int stage) {
    TrainConfig c;
    c.stage = stage;
    c.epochs = stage == 1 ? 30 : 40;
    c.batch_size = 4;
    c.patch_size = 64;
    c.lr_initial = 2e-3;
    c.lr_decay_factor = 0.5;
    c.lr_decay_every_epochs = 15;
    c.weights = LossWeights{1.0, 0.1};
    c.group.enable_shifts = true;
    c.group.max_shift_y = 16;  // patch/4
    c.group.max_shift_x = 16;
    c.group.enable_rotations = true;
    c.group.enable_flips = true;
    c.group.require_nontrivial = true;
    c.fuser_arch = nn::FuserArch{2, 8, nn::BlockVariant::both};
    c.sensor_arch = nn::SensorArch{3, 8};
    return c;
}

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("config: stage must be 1 or 2");
    if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
    if (batch_size <= 0) throw ConfigError("config: batch_size must be positive");
    if (patch_size <= 0 || patch_size % 2 != 0) {
        throw ConfigError("config: patch_size must be positive and even");
    }
    if (!(lr_initial > 0.0)) throw ConfigError("config: lr_initial must be > 0");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
        throw ConfigError("config: lr_decay_factor must be in (0,1]");
    }
    if (lr_decay_every_epochs <= 0) {
        throw ConfigError("config: lr_decay_every_epochs must be positive");
    }
    if (weights.alpha1 < 0.0 || weights.alpha2 < 0.0) {
        throw ConfigError("config: loss weights must be nonnegative");
    }
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
        throw ConfigError("config: holdout_fraction must be in [0,1)");
    }
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
    const int k = epoch / config.lr_decay_every_epochs;
    return config.lr_initial * std::pow(config.lr_decay_factor, k);
}

// --- optimizer -----------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::size_t parameter_count)
    : m_(parameter_count, 0.0), v_(parameter_count, 0.0) {}

void AdamOptimizer::step(nn::ParamSet& params, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    std::size_t off = 0;
    for (nn::ParamTensor& t : params.tensors()) {
        for (std::size_t i = 0; i < t.values.numel(); ++i, ++off) {
            const double g = t.grad.v[i];
            m_[off] = b1 * m_[off] + (1.0 - b1) * g;
            v_[off] = b2 * v_[off] + (1.0 - b2) * g * g;
            const double mhat = m_[off] / corr1;
            const double vhat = v_[off] / corr2;
            t.values.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
    if (off != m_.size()) throw ShapeError("AdamOptimizer: parameter count changed");
}

// --- pseudo ground truth ----------------------------------------------------------

Image make_pseudo_gt(const Image& i, const Image& v, PseudoGtRule rule) {
    if (!i.same_shape(v)) throw ShapeError("make_pseudo_gt: shape mismatch");
    Image out(i.height, i.width);
    switch (rule) {
        case PseudoGtRule::max:
            for (std::size_t p = 0; p < out.data.size(); ++p) {
                out.data[p] = std::max(i.data[p], v.data[p]);
            }
            break;
        case PseudoGtRule::average:
            for (std::size_t p = 0; p < out.data.size(); ++p) {
                out.data[p] = 0.5 * (i.data[p] + v.data[p]);
            }
            break;
        case PseudoGtRule::gradient_weighted: {
            // Convex per-pixel combination weighted by smoothed Sobel
            // magnitude, so whichever source carries local structure wins.
            auto magnitude = [](const Image& x) {
                const auto [gx, gy] = sobel(x);
                Image m(x.height, x.width);
                for (std::size_t p = 0; p < m.data.size(); ++p) {
                    m.data[p] = std::sqrt(gx.data[p] * gx.data[p] +
                                          gy.data[p] * gy.data[p]);
                }
                return gaussian_blur(m, 1.5);
            };
            const Image mi = magnitude(i);
            const Image mv = magnitude(v);
            constexpr double kEps = 1e-6;
            for (std::size_t p = 0; p < out.data.size(); ++p) {
                const double wi = (mi.data[p] + 0.5 * kEps) /
                                  (mi.data[p] + mv.data[p] + kEps);
                out.data[p] = wi * i.data[p] + (1.0 - wi) * v.data[p];
            }
            break;
        }
    }
    for (double& x : out.data) x = clamp01(x);
    return out;
}

// --- report --------------------------------------------------------------------

std::string TrainReport::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["wall_seconds"] = wall_seconds;
    nlohmann::json eps = nlohmann::json::array();
    for (const EpochRecord& e : epochs) {
        nlohmann::json je;
        je["epoch"] = e.epoch;
        je["lr"] = e.lr;
        for (const auto& [k, v] : e.terms) je["terms"][k] = v;
        eps.push_back(je);
    }
    j["epochs"] = eps;
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& [ep, err] : equivariance_trace) {
        trace.push_back({{"epoch", ep}, {"error", err}});
    }
    j["equivariance_trace"] = trace;
    for (const auto& [k, v] : checkpoints) j["checkpoints"][k] = v;
    return j.dump(2);
}

// --- shared helpers ---------------------------------------------------------------

namespace {

struct Split {
    std::vector<int> train;
    std::vector<int> holdout;
};

Split split_dataset(const Dataset& ds, double holdout_fraction) {
    if (ds.pairs.empty()) throw InputError("training: empty dataset");
    const int n = static_cast<int>(ds.pairs.size());
    int n_hold = static_cast<int>(std::lround(holdout_fraction * n));
    if (n_hold >= n) n_hold = n - 1;
    Split s;
    for (int k = 0; k < n - n_hold; ++k) s.train.push_back(k);
    for (int k = n - n_hold; k < n; ++k) s.holdout.push_back(k);
    return s;
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
    for (int k = static_cast<int>(idx.size()) - 1; k > 0; --k) {
        std::swap(idx[static_cast<std::size_t>(k)],
                  idx[static_cast<std::size_t>(rng.uniform_int(0, k))]);
    }
}

// L(a, b) = l1 + l1 over Sobel responses, on the tape.
nn::NodePtr tape_composite(nn::Graph& g, nn::NodePtr a, nn::NodePtr b) {
    nn::NodePtr pix = g.mean_abs_diff(a, b);
    nn::NodePtr grad = g.mean_abs_diff(g.sobel_pair(a), g.sobel_pair(b));
    return g.weighted_sum({pix, grad}, {1.0, 1.0});
}

class StepLogger {
public:
    explicit StepLogger(const std::string& path) {
        if (!path.empty()) {
            out_.open(path, std::ios::app);
            if (!out_) throw IoError("training: cannot open log " + path);
        }
    }
    void log(int stage, int epoch, long long step, double lr,
             const std::map<std::string, double>& terms) {
        if (!out_.is_open()) return;
        nlohmann::json j;
        j["stage"] = stage;
        j["epoch"] = epoch;
        j["step"] = step;
        j["lr"] = lr;
        for (const auto& [k, v] : terms) j[k] = v;
        out_ << j.dump() << "\n";
    }

private:
    std::ofstream out_;
};

void require_finite_terms(const std::map<std::string, double>& terms, int stage,
                          long long step) {
    for (const auto& [k, v] : terms) {
        if (!std::isfinite(v)) {
            throw NumericError("stage " + std::to_string(stage) + " step " +
                               std::to_string(step) + ": non-finite " + k);
        }
    }
}

std::vector<const ScenePair*> audit_pool(const Dataset& ds, const Split& split) {
    std::vector<const ScenePair*> pool;
    const auto& idx = split.holdout.empty() ? split.train : split.holdout;
    for (int k : idx) pool.push_back(&ds.pairs[static_cast<std::size_t>(k)]);
    return pool;
}

}  // namespace

// --- stage 1 -----------------------------------------------------------------------

SensingTrainResult train_sensing_stage(const TrainConfig& config,
                                       const Dataset& dataset) {
    config.validate();
    if (config.stage != 1) throw ConfigError("train_sensing_stage: config.stage != 1");
    const auto t0 = std::chrono::steady_clock::now();
    const Split split = split_dataset(dataset, config.holdout_fraction);

    nn::ParamSet a_i = nn::make_sensor_params(config.sensor_arch);
    nn::ParamSet a_v = nn::make_sensor_params(config.sensor_arch);
    nn::init_params(a_i, static_cast<unsigned long long>(config.seed) * 2 + 1);
    nn::init_params(a_v, static_cast<unsigned long long>(config.seed) * 2 + 2);
    AdamOptimizer opt_i(a_i.parameter_count());
    AdamOptimizer opt_v(a_v.parameter_count());

    Rng order_rng(static_cast<std::uint64_t>(config.seed) ^ 0x111);
    Rng crop_rng(static_cast<std::uint64_t>(config.seed) ^ 0x222);
    StepLogger logger(config.log_path);

    TrainReport report;
    report.seed = config.seed;
    long long step = 0;

    auto holdout_mse = [&](const nn::ParamSet& params, bool want_a) {
        const auto& idx = split.holdout.empty() ? split.train : split.holdout;
        double acc = 0.0;
        for (int k : idx) {
            const ScenePair& p = dataset.pairs[static_cast<std::size_t>(k)];
            const Image gt = make_pseudo_gt(p.modality_a, p.modality_b,
                                            config.pseudo_gt_rule);
            const Image out = nn::sensor_infer(params, config.sensor_arch, gt);
            acc += sensing_reconstruction_loss(out,
                                               want_a ? p.modality_a : p.modality_b);
        }
        return acc / static_cast<double>(idx.size());
    };

    std::vector<int> order = split.train;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = lr_at_epoch(config, epoch);
        shuffle_indices(order, order_rng);
        double sum_li = 0.0, sum_lv = 0.0;
        int steps_in_epoch = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            a_i.zero_grads();
            a_v.zero_grads();
            double batch_li = 0.0, batch_lv = 0.0;
            for (std::size_t bi = start; bi < end; ++bi) {
                const ScenePair patch = crop_random_patch(
                    dataset.pairs[static_cast<std::size_t>(order[bi])],
                    config.patch_size, crop_rng);
                const Image pseudo = make_pseudo_gt(patch.modality_a, patch.modality_b,
                                                    config.pseudo_gt_rule);
                {
                    nn::Graph g;
                    nn::BoundParams bound = nn::bind_params(g, a_i, true);
                    nn::NodePtr out = nn::sensor_forward(
                        g, bound, config.sensor_arch, g.input(nn::image_to_tensor(pseudo)));
                    nn::NodePtr loss =
                        g.mean_sq_diff(out, g.input(nn::image_to_tensor(patch.modality_a)));
                    batch_li += loss->val.v[0];
                    g.backward(g.scale(loss, inv_batch));
                    nn::accumulate_grads(bound, a_i);
                }
                {
                    nn::Graph g;
                    nn::BoundParams bound = nn::bind_params(g, a_v, true);
                    nn::NodePtr out = nn::sensor_forward(
                        g, bound, config.sensor_arch, g.input(nn::image_to_tensor(pseudo)));
                    nn::NodePtr loss =
                        g.mean_sq_diff(out, g.input(nn::image_to_tensor(patch.modality_b)));
                    batch_lv += loss->val.v[0];
                    g.backward(g.scale(loss, inv_batch));
                    nn::accumulate_grads(bound, a_v);
                }
            }
            batch_li *= inv_batch;
            batch_lv *= inv_batch;
            std::map<std::string, double> terms = {{"rec_i", batch_li},
                                                   {"rec_v", batch_lv}};
            require_finite_terms(terms, 1, step);
            opt_i.step(a_i, lr);
            opt_v.step(a_v, lr);
            a_i.check_finite("train_sensing_stage");
            a_v.check_finite("train_sensing_stage");
            logger.log(1, epoch, step, lr, terms);
            sum_li += batch_li;
            sum_lv += batch_lv;
            ++steps_in_epoch;
            ++step;
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = lr;
        rec.terms["rec_i"] = sum_li / steps_in_epoch;
        rec.terms["rec_v"] = sum_lv / steps_in_epoch;
        rec.terms["holdout_mse_i"] = holdout_mse(a_i, true);
        rec.terms["holdout_mse_v"] = holdout_mse(a_v, false);
        report.epochs.push_back(rec);
    }

    if (!config.checkpoint_dir.empty()) {
        nn::CheckpointMeta meta;
        meta.kind = "sensor";
        meta.arch_json = config.sensor_arch.to_json();
        meta.seed = config.seed;
        meta.step = step;
        save_checkpoint(a_i, meta, config.checkpoint_dir + "/a_i");
        save_checkpoint(a_v, meta, config.checkpoint_dir + "/a_v");
        report.checkpoints["a_i"] = config.checkpoint_dir + "/a_i";
        report.checkpoints["a_v"] = config.checkpoint_dir + "/a_v";
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return SensingTrainResult{std::move(a_i), std::move(a_v), std::move(report)};
}

// --- stage 2 -----------------------------------------------------------------------

FrozenSensors load_frozen_sensors(const std::string& a_i_dir,
                                  const std::string& a_v_dir) {
    // Read the arch from the first manifest, then load both parameter sets.
    nn::ParamSet probe;  // empty; manifest read only
    FrozenSensors out;
    {
        nn::ParamSet tmp;
        nn::CheckpointMeta meta = nn::load_checkpoint(tmp, a_i_dir);  // arch only
        out.arch = nn::SensorArch::from_json(meta.arch_json);
    }
    out.a_i = nn::make_sensor_params(out.arch);
    out.a_v = nn::make_sensor_params(out.arch);
    const nn::CheckpointMeta mi = nn::load_checkpoint(out.a_i, a_i_dir);
    const nn::CheckpointMeta mv = nn::load_checkpoint(out.a_v, a_v_dir);
    if (mi.kind != "sensor" || mv.kind != "sensor") {
        throw FormatError("load_frozen_sensors: checkpoint kind is not 'sensor'");
    }
    return out;
}

FuserTrainResult train_fuser_stage(const TrainConfig& config,
                                   const Dataset& dataset,
                                   const FrozenSensors& sensors) {
    config.validate();
    if (config.stage != 2) throw ConfigError("train_fuser_stage: config.stage != 2");
    const auto t0 = std::chrono::steady_clock::now();
    const Split split = split_dataset(dataset, config.holdout_fraction);

    nn::FuserArch arch = config.fuser_arch;
    if (config.ablation == Ablation::no_global) arch.variant = nn::BlockVariant::local_only;
    if (config.ablation == Ablation::no_local) arch.variant = nn::BlockVariant::global_only;

    nn::ParamSet fuser = nn::make_fuser_params(arch);
    nn::init_params(fuser, static_cast<unsigned long long>(config.seed) * 2 + 11);
    AdamOptimizer opt(fuser.parameter_count());

    Rng order_rng(static_cast<std::uint64_t>(config.seed) ^ 0x333);
    Rng crop_rng(static_cast<std::uint64_t>(config.seed) ^ 0x444);
    Rng tf_rng(static_cast<std::uint64_t>(config.seed) ^ 0x555);
    StepLogger logger(config.log_path);

    TrainReport report;
    report.seed = config.seed;

    const std::vector<const ScenePair*> audit_pairs = audit_pool(dataset, split);
    const auto run_audit = [&](int epoch_mark) {
        const AuditResult a = equivariance_audit_networks(
            fuser, arch, sensors, audit_pairs, config.group, config.audit_samples,
            static_cast<unsigned long long>(config.seed) ^ 0x777);
        report.equivariance_trace.emplace_back(epoch_mark, a.mean_error);
    };
    run_audit(0);

    const double alpha1 = config.weights.alpha1;
    const double alpha2 =
        config.ablation == Ablation::no_equivariance ? 0.0 : config.weights.alpha2;

    long long step = 0;
    std::vector<int> order = split.train;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = lr_at_epoch(config, epoch);
        shuffle_indices(order, order_rng);
        std::map<std::string, double> epoch_sums;
        int steps_in_epoch = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            fuser.zero_grads();
            std::map<std::string, double> batch_terms;
            for (std::size_t bi = start; bi < end; ++bi) {
                const ScenePair patch = crop_random_patch(
                    dataset.pairs[static_cast<std::size_t>(order[bi])],
                    config.patch_size, crop_rng);
                const TransformSpec tg = sample_transform(tf_rng, config.group);

                nn::Graph g;
                nn::BoundParams fb = nn::bind_params(g, fuser, true);
                nn::NodePtr i_in = g.input(nn::image_to_tensor(patch.modality_a));
                nn::NodePtr v_in = g.input(nn::image_to_tensor(patch.modality_b));
                nn::NodePtr f = nn::ufuser_forward(g, fb, arch, i_in, v_in);

                std::map<std::string, double> terms;
                nn::NodePtr total;

                const bool needs_sensors = config.ablation == Ablation::none ||
                                           config.ablation == Ablation::no_equivariance ||
                                           config.ablation == Ablation::no_sensing ||
                                           config.ablation == Ablation::no_global ||
                                           config.ablation == Ablation::no_local;
                const bool tape_equivariance =
                    config.ablation == Ablation::none ||
                    config.ablation == Ablation::no_sensing ||
                    config.ablation == Ablation::no_global ||
                    config.ablation == Ablation::no_local;

                if (needs_sensors) {
                    nn::BoundParams ai_b = nn::bind_params(g, sensors.a_i, false);
                    nn::BoundParams av_b = nn::bind_params(g, sensors.a_v, false);

                    nn::NodePtr term_i, term_v;
                    if (config.ablation == Ablation::no_sensing) {
                        term_i = g.mean_abs_diff(f, i_in);
                        term_v = g.mean_abs_diff(f, v_in);
                    } else {
                        nn::NodePtr si = nn::sensor_forward(g, ai_b, sensors.arch, f);
                        nn::NodePtr sv = nn::sensor_forward(g, av_b, sensors.arch, f);
                        term_i = tape_composite(g, si, i_in);
                        term_v = tape_composite(g, sv, v_in);
                    }

                    if (tape_equivariance) {
                        auto perm = std::make_shared<const std::vector<int>>(
                            transform_index_map(tg, config.patch_size, config.patch_size));
                        nn::NodePtr f_t =
                            config.detach_transformed
                                ? g.input([&] {
                                      nn::Tensor t = f->val;
                                      nn::Tensor o(t.shape);
                                      for (std::size_t p = 0; p < perm->size(); ++p) {
                                          o.v[(*perm)[p]] = t.v[p];
                                      }
                                      return o;
                                  }())
                                : g.permute_pixels(f, perm);
                        nn::NodePtr i_t = nn::sensor_forward(g, ai_b, sensors.arch, f_t);
                        nn::NodePtr v_t = nn::sensor_forward(g, av_b, sensors.arch, f_t);
                        nn::NodePtr f_hat = nn::ufuser_forward(g, fb, arch, i_t, v_t);
                        nn::NodePtr term_eq = tape_composite(g, f_t, f_hat);
                        total = g.weighted_sum({term_i, term_v, term_eq},
                                               {1.0, alpha1, alpha2});
                        terms["equivariance"] = term_eq->val.v[0];
                    } else {
                        // no_equivariance: the term is logged for the trace but
                        // excluded from the total, so compute it without grads.
                        const Image f_img = nn::tensor_to_image(f->val);
                        const Image ft_img = apply_transform(tg, f_img);
                        const Image it = nn::sensor_infer(sensors.a_i, sensors.arch, ft_img);
                        const Image vt = nn::sensor_infer(sensors.a_v, sensors.arch, ft_img);
                        const Image fhat = nn::ufuser_infer(fuser, arch, it, vt);
                        terms["equivariance"] = composite_distance(ft_img, fhat);
                        total = g.weighted_sum({term_i, term_v}, {1.0, alpha1});
                    }
                    terms["sensing_i"] = term_i->val.v[0];
                    terms["sensing_v"] = term_v->val.v[0];
                } else if (config.ablation == Ablation::traditional) {
                    nn::NodePtr term_i = g.mean_abs_diff(f, i_in);
                    nn::NodePtr term_v = g.mean_abs_diff(f, v_in);
                    total = g.weighted_sum({term_i, term_v}, {1.0, 1.0});
                    terms["sensing_i"] = term_i->val.v[0];
                    terms["sensing_v"] = term_v->val.v[0];
                    terms["equivariance"] = 0.0;
                } else {  // traditional_plus_da
                    auto perm = std::make_shared<const std::vector<int>>(
                        transform_index_map(tg, config.patch_size, config.patch_size));
                    nn::NodePtr term_i = g.mean_abs_diff(f, i_in);
                    nn::NodePtr term_v = g.mean_abs_diff(f, v_in);
                    nn::NodePtr f_t = g.permute_pixels(f, perm);
                    nn::NodePtr i_t =
                        g.input(nn::image_to_tensor(apply_transform(tg, patch.modality_a)));
                    nn::NodePtr v_t =
                        g.input(nn::image_to_tensor(apply_transform(tg, patch.modality_b)));
                    nn::NodePtr da_i = g.mean_abs_diff(f_t, i_t);
                    nn::NodePtr da_v = g.mean_abs_diff(f_t, v_t);
                    total = g.weighted_sum({term_i, term_v, da_i, da_v},
                                           {1.0, 1.0, 1.0, 1.0});
                    terms["sensing_i"] = term_i->val.v[0];
                    terms["sensing_v"] = term_v->val.v[0];
                    terms["da"] = da_i->val.v[0] + da_v->val.v[0];
                    terms["equivariance"] = 0.0;
                }

                terms["total"] = total->val.v[0];
                g.backward(g.scale(total, inv_batch));
                nn::accumulate_grads(fb, fuser);
                for (const auto& [k, v] : terms) batch_terms[k] += v * inv_batch;
            }
            require_finite_terms(batch_terms, 2, step);
            opt.step(fuser, lr);
            fuser.check_finite("train_fuser_stage");
            logger.log(2, epoch, step, lr, batch_terms);
            for (const auto& [k, v] : batch_terms) epoch_sums[k] += v;
            ++steps_in_epoch;
            ++step;
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = lr;
        for (const auto& [k, v] : epoch_sums) rec.terms[k] = v / steps_in_epoch;
        report.epochs.push_back(rec);
        const bool last = epoch + 1 == config.epochs;
        if (last || (config.audit_every_epochs > 0 &&
                     (epoch + 1) % config.audit_every_epochs == 0)) {
            run_audit(epoch + 1);
        }
    }

    if (!config.checkpoint_dir.empty()) {
        nn::CheckpointMeta meta;
        meta.kind = "fuser";
        meta.arch_json = arch.to_json();
        meta.seed = config.seed;
        meta.step = step;
        save_checkpoint(fuser, meta, config.checkpoint_dir + "/fuser");
        report.checkpoints["fuser"] = config.checkpoint_dir + "/fuser";
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return FuserTrainResult{std::move(fuser), std::move(report)};
}

// --- audit --------------------------------------------------------------------------

AuditResult equivariance_audit(const FuseFn& fuse, const SenseFn& sense_i,
                               const SenseFn& sense_v,
                               const std::vector<const ScenePair*>& pairs,
                               const GroupConfig& group, int n_samples,
                               unsigned long long seed) {
    AuditResult r;
    r.n_samples = n_samples;
    if (n_samples <= 0) {
        r.empty_warning = true;  // empty mean defined as 0
        return r;
    }
    if (pairs.empty()) throw InputError("equivariance_audit: no images supplied");
    Rng rng(seed ^ 0xE1AB);
    double acc = 0.0;
    for (int k = 0; k < n_samples; ++k) {
        const ScenePair& p = *pairs[static_cast<std::size_t>(k) % pairs.size()];
        const TransformSpec tg = sample_transform(rng, group);
        const Image f = fuse(p.modality_a, p.modality_b);
        const Image f_t = apply_transform(tg, f);
        const Image lhs = fuse(sense_i(f_t), sense_v(f_t));
        const Image rhs = apply_transform(tg, fuse(sense_i(f), sense_v(f)));
        acc += composite_distance(lhs, rhs);
    }
    r.mean_error = acc / static_cast<double>(n_samples);
    return r;
}

AuditResult equivariance_audit_networks(const nn::ParamSet& fuser,
                                        const nn::FuserArch& fuser_arch,
                                        const FrozenSensors& sensors,
                                        const std::vector<const ScenePair*>& pairs,
                                        const GroupConfig& group, int n_samples,
                                        unsigned long long seed) {
    return equivariance_audit(
        [&](const Image& i, const Image& v) {
            return nn::ufuser_infer(fuser, fuser_arch, i, v);
        },
        [&](const Image& f) { return nn::sensor_infer(sensors.a_i, sensors.arch, f); },
        [&](const Image& f) { return nn::sensor_infer(sensors.a_v, sensors.arch, f); },
        pairs, group, n_samples, seed);
}

}  // namespace emma
