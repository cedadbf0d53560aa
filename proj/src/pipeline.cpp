#include "gradseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace gradseg {

TrainingVolume make_training_volume(Volume image, Volume mask, CenterlineGraph graph) {
    if (image.dims != mask.dims || mask.dims != graph.dims)
        throw std::invalid_argument("training volume dim mismatch");
    TrainingVolume tv;
    tv.image = std::move(image);
    tv.mask = std::move(mask);
    tv.graph = std::move(graph);

    std::vector<std::uint8_t> seeds(tv.mask.size(), 0);
    for (const GraphBranch& b : tv.graph.branches)
        for (const Voxel& v : b.path) {
            const std::size_t i = tv.mask.index(v.x, v.y, v.z);
            if (!seeds[i]) {
                seeds[i] = 1;
                tv.centerline.push_back(v);
            }
        }
    if (tv.centerline.empty()) throw std::invalid_argument("graph has no centerline voxels");

    const auto d2 = squared_distance_field(tv.mask.dims, tv.mask.spacing, seeds);
    double dmax = 0.0;
    for (std::size_t i = 0; i < tv.mask.size(); ++i)
        if (tv.mask.data[i] != 0.0f) dmax = std::max(dmax, d2[i]);
    tv.dist_norm.assign(tv.mask.size(), 0.0f);
    if (dmax > 0.0) {
        const double inv = 1.0 / std::sqrt(dmax);
        for (std::size_t i = 0; i < tv.mask.size(); ++i)
            if (tv.mask.data[i] != 0.0f)
                tv.dist_norm[i] = static_cast<float>(std::sqrt(d2[i]) * inv);
    }
    return tv;
}

PatchProvenance sample_patch(const TrainingVolume& vol, const std::vector<Voxel>& hard_set,
                             const SamplerConfig& cfg, Rng& rng) {
    const Dims d = vol.mask.dims;
    if (cfg.patch.nx > d.nx || cfg.patch.ny > d.ny || cfg.patch.nz > d.nz)
        throw std::invalid_argument("patch larger than volume");
    if (!(cfg.p_hard >= 0.0 && cfg.p_hard <= 1.0))
        throw std::invalid_argument("p_hard must be in [0,1]");
    if (vol.centerline.empty()) throw std::invalid_argument("empty skeleton");

    PatchProvenance prov;
    const bool want_hard = rng.bernoulli(cfg.p_hard);
    if (want_hard && !hard_set.empty()) {
        prov.hard_mode = true;
        prov.target = hard_set[rng.uniform_int(0, static_cast<std::int64_t>(hard_set.size()) - 1)];
        auto place = [&](int t, int patch, int dim) {
            const int lo = std::max(0, t - patch + 1);
            const int hi = std::min(dim - patch, t);
            return static_cast<int>(rng.uniform_int(lo, hi));
        };
        prov.origin = {place(prov.target.x, cfg.patch.nx, d.nx),
                       place(prov.target.y, cfg.patch.ny, d.ny),
                       place(prov.target.z, cfg.patch.nz, d.nz)};
    } else {
        prov.hard_mode = false;
        prov.target =
            vol.centerline[rng.uniform_int(0, static_cast<std::int64_t>(vol.centerline.size()) - 1)];
        auto place = [&](int t, int patch, int dim) {
            return std::clamp(t - patch / 2, 0, dim - patch);
        };
        prov.origin = {place(prov.target.x, cfg.patch.nx, d.nx),
                       place(prov.target.y, cfg.patch.ny, d.ny),
                       place(prov.target.z, cfg.patch.nz, d.nz)};
    }
    return prov;
}

Volume crop_volume(const Volume& v, const Voxel& origin, Dims patch) {
    Volume out(patch, v.spacing, v.kind);
    for (int z = 0; z < patch.nz; ++z)
        for (int y = 0; y < patch.ny; ++y)
            std::memcpy(&out.data[out.index(0, y, z)],
                        &v.data[v.index(origin.x, origin.y + y, origin.z + z)],
                        sizeof(float) * patch.nx);
    return out;
}

std::vector<Voxel> refresh_hard_set(Net& net, const TrainingVolume& vol, Dims patch, Dims stride) {
    const Volume prob = predict(net, vol.image, patch, stride);
    std::vector<Voxel> hard;
    for (const Voxel& v : vol.centerline)
        if (prob.at(v.x, v.y, v.z) < 0.5f) hard.push_back(v);
    return hard;
}

namespace {

// Trilinear sample with zero padding outside the grid.
float sample_trilinear(const Volume& v, double x, double y, double z) {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int z0 = static_cast<int>(std::floor(z));
    const double fx = x - x0, fy = y - y0, fz = z - z0;
    float acc = 0.0f;
    for (int k = 0; k < 8; ++k) {
        const int xi = x0 + (k & 1), yi = y0 + ((k >> 1) & 1), zi = z0 + ((k >> 2) & 1);
        if (!v.in_bounds(xi, yi, zi)) continue;
        const double w = ((k & 1) ? fx : 1.0 - fx) * ((k & 2) ? fy : 1.0 - fy) *
                         ((k & 4) ? fz : 1.0 - fz);
        acc += static_cast<float>(w) * v.at(xi, yi, zi);
    }
    return acc;
}

Volume rotate_trilinear(const Volume& v, double angle_deg) {
    const double th = angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double cx = 0.5 * (v.dims.nx - 1), cy = 0.5 * (v.dims.ny - 1);
    Volume out(v.dims, v.spacing, ElementKind::Intensity);
    for (int z = 0; z < v.dims.nz; ++z)
        for (int y = 0; y < v.dims.ny; ++y)
            for (int x = 0; x < v.dims.nx; ++x) {
                const double xs = cx + c * (x - cx) + s * (y - cy);
                const double ys = cy - s * (x - cx) + c * (y - cy);
                out.at(x, y, z) = sample_trilinear(v, xs, ys, z);
            }
    return out;
}

}  // namespace

Volume rotate_field(const Volume& field, double angle_deg) {
    return rotate_trilinear(field, angle_deg);
}

RotatedPatch augment_rotate(const Volume& image, const Volume& mask, double angle_lo_deg,
                            double angle_hi_deg, double threshold, Rng& rng) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("augment threshold must be in (0,1)");
    if (angle_lo_deg > angle_hi_deg) throw std::invalid_argument("bad angle range");
    RotatedPatch out;
    out.angle_deg = rng.uniform(angle_lo_deg, angle_hi_deg);

    out.image = rotate_trilinear(image, out.angle_deg);
    out.image.kind = image.kind;

    Volume soft = rotate_trilinear(mask, out.angle_deg);
    out.mask = Volume(mask.dims, mask.spacing, ElementKind::Binary);
    for (std::size_t i = 0; i < soft.size(); ++i)
        out.mask.data[i] = soft.data[i] >= static_cast<float>(threshold) ? 1.0f : 0.0f;
    return out;
}

WeightMap weights_from_distance(const Volume& mask, const Volume& dist_norm, double m,
                                double r_d) {
    if (mask.dims != dist_norm.dims) throw std::invalid_argument("weight field dim mismatch");
    WeightMap w(mask.dims, 1.0);
    w.m = m;
    w.distance_root = r_d;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.data[i] == 0.0f) continue;
        const double dn = std::clamp(static_cast<double>(dist_norm.data[i]), 0.0, 1.0);
        w.w[i] = 1.0 - m * std::pow(dn, r_d);
    }
    return w;
}

Tensor4 to_input_tensor(const Volume& intensity_patch) {
    Tensor4 t(1, intensity_patch.dims.nx, intensity_patch.dims.ny, intensity_patch.dims.nz);
    for (std::size_t i = 0; i < intensity_patch.size(); ++i)
        t.v[i] = intensity_patch.data[i] * (1.0f / 255.0f);
    return t;
}

ForwardBackwardResult forward_backward(Net& net, const Tensor4& input, const Volume& gt,
                                       const std::vector<GroupLossSpec>& groups,
                                       const DropoutPlan* dropout) {
    if (static_cast<int>(groups.size()) != net.group_count())
        throw std::invalid_argument("one loss spec per group required");
    net.forward(input, dropout);
    net.zero_grad();

    ForwardBackwardResult res;
    res.group_losses.resize(groups.size(), 0.0);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        Tensor4& prob = net.group_prediction(static_cast<int>(g));
        prob.zero_grad();
        if (groups[g].weight == 0.0) continue;

        Volume pv({prob.nx, prob.ny, prob.nz}, gt.spacing, ElementKind::Probability);
        std::memcpy(pv.data.data(), prob.v.data(), sizeof(float) * prob.spatial());
        const LossResult lr =
            evaluate_loss(groups[g].kind, pv, gt, groups[g].weights, groups[g].cfg);
        if (!std::isfinite(lr.value)) throw std::runtime_error("non-finite loss value");
        res.group_losses[g] = lr.value;
        res.total += groups[g].weight * lr.value;
        for (std::size_t i = 0; i < prob.spatial(); ++i)
            prob.g[i] = static_cast<float>(groups[g].weight * lr.gradient[i]);
    }
    net.backward();
    return res;
}

void Sgd::step(std::vector<Net::Param> params, double lr) {
    if (velocity_.empty()) {
        velocity_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i)
            velocity_[i].assign(params[i].value->size(), 0.0f);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = *params[i].value;
        auto& g = *params[i].grad;
        auto& v = velocity_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const float upd = g[k] + static_cast<float>(weight_decay_) * w[k];
            v[k] = static_cast<float>(momentum_) * v[k] + upd;
            w[k] -= static_cast<float>(lr) * v[k];
        }
    }
}

TrainConfig TrainConfig::desk_default() {
    TrainConfig cfg;
    StageConfig s1;
    s1.epochs = 30;
    s1.lr = 0.01;
    s1.lr_drop_epochs = {18, 27};
    s1.loss = LossKind::GeneralUnion;
    s1.alpha_e = 0.1;
    s1.alpha_d = 0.1;
    s1.root = 0.7;
    s1.distance_root = 0.5;
    s1.epsilon = 1e-4;
    s1.aug_threshold = 0.7;
    StageConfig s2 = s1;
    s2.epochs = 10;
    s2.lr_drop_epochs = {5, 8};
    s2.alpha_e = 0.2;
    s2.alpha_d = 0.2;
    s2.aug_threshold = 0.9;
    cfg.stages = {s1, s2};
    return cfg;
}

namespace {

double stage_lr(const StageConfig& stage, int epoch_in_stage /*1-based*/) {
    double lr = stage.lr;
    for (int drop : stage.lr_drop_epochs)
        if (epoch_in_stage >= drop) lr /= 10.0;
    return lr;
}

LossConfig side_cfg(const StageConfig& stage, double alpha) {
    LossConfig cfg = LossConfig::for_alpha(alpha);
    cfg.root = stage.root;
    cfg.distance_root = stage.distance_root;
    cfg.epsilon = stage.epsilon;
    return cfg;
}

ValidationRow validate(Net& net, const Dataset& data, const TrainConfig& cfg) {
    ValidationRow row;
    int n = 0;
    for (const TrainingVolume& tv : data.test) {
        const Volume prob = predict(net, tv.image, cfg.predict_patch, cfg.predict_stride);
        const Volume mask = finalize_mask(prob);
        const MetricsReport rep =
            stratified_metrics(mask, tv.mask, tv.graph, default_diameter_bins(), cfg.tau_b);
        row.dsc += rep.dsc;
        row.precision += rep.precision.value_or(0.0);
        row.length_detected += rep.length_detected;
        row.branch_detected += rep.branch_detected;
        for (const StratumMetrics& s : rep.per_stratum)
            if (s.populated) {
                row.thin_length_detected += s.length_detected;
                break;  // smallest populated stratum
            }
        ++n;
    }
    if (n > 0) {
        row.dsc /= n;
        row.precision /= n;
        row.length_detected /= n;
        row.branch_detected /= n;
        row.thin_length_detected /= n;
    }
    return row;
}

}  // namespace

TrainResult train(const NetSpec& spec, const SupervisionScheme& scheme, const Dataset& data,
                  const TrainConfig& cfg, const std::filesystem::path& dump_prefix) {
    if (data.train.empty()) throw std::invalid_argument("empty training set");
    NetSpec net_spec = spec;
    apply_scheme(net_spec, scheme);
    Net net(net_spec, cfg.seed);
    Sgd sgd(cfg.momentum, cfg.weight_decay);

    const int n_groups = net.group_count();
    std::vector<std::vector<Voxel>> hard_sets(data.train.size());

    TrainResult result{std::move(net), {}};
    Net& model = result.net;

    auto refresh_all = [&]() {
        for (std::size_t v = 0; v < data.train.size(); ++v)
            hard_sets[v] =
                refresh_hard_set(model, data.train[v], cfg.predict_patch, cfg.predict_stride);
    };

    int global_epoch = 0;
    for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
        const StageConfig& stage = cfg.stages[si];
        refresh_all();

        // Per-group loss templates for this stage; alpha by group side.
        std::vector<GroupLossSpec> group_specs(n_groups);
        for (int g = 0; g < n_groups; ++g) {
            const double alpha =
                model.spec().group_is_decoder_side(g) ? stage.alpha_d : stage.alpha_e;
            group_specs[g].kind = stage.loss;
            group_specs[g].cfg = side_cfg(stage, alpha);
        }

        for (int e = 1; e <= stage.epochs; ++e) {
            ++global_epoch;
            const double lr = stage_lr(stage, e);
            std::vector<double> loss_sums(n_groups, 0.0);
            std::size_t steps = 0;

            for (std::size_t vi = 0; vi < data.train.size(); ++vi) {
                const TrainingVolume& tv = data.train[vi];
                for (int pi = 0; pi < cfg.sampler.patches_per_volume; ++pi) {
                    Rng rng(derive_seed(cfg.seed, si, static_cast<std::uint64_t>(e),
                                        static_cast<std::uint64_t>(vi),
                                        static_cast<std::uint64_t>(pi)));
                    const PatchProvenance prov = sample_patch(tv, hard_sets[vi], cfg.sampler, rng);
                    Volume img = crop_volume(tv.image, prov.origin, cfg.sampler.patch);
                    Volume msk = crop_volume(tv.mask, prov.origin, cfg.sampler.patch);
                    msk.kind = ElementKind::Binary;
                    Volume dist(cfg.sampler.patch, tv.mask.spacing, ElementKind::Intensity);
                    for (int z = 0; z < cfg.sampler.patch.nz; ++z)
                        for (int y = 0; y < cfg.sampler.patch.ny; ++y)
                            for (int x = 0; x < cfg.sampler.patch.nx; ++x)
                                dist.at(x, y, z) = tv.dist_norm[tv.mask.index(
                                    prov.origin.x + x, prov.origin.y + y, prov.origin.z + z)];

                    if (stage.augment) {
                        const RotatedPatch rp = augment_rotate(
                            img, msk, -stage.aug_angle_deg, stage.aug_angle_deg,
                            stage.aug_threshold, rng);
                        bool any_fg = false;
                        for (float v : rp.mask.data) any_fg |= v != 0.0f;
                        if (any_fg) {
                            img = rp.image;
                            msk = rp.mask;
                            dist = rotate_field(dist, rp.angle_deg);
                        }
                    }

                    // Per-group weight maps from the (possibly rotated)
                    // distance field.
                    std::vector<WeightMap> wmaps(n_groups);
                    std::vector<GroupLossSpec> specs = group_specs;
                    for (int g = 0; g < n_groups; ++g) {
                        if (stage.loss == LossKind::GeneralUnion ||
                            stage.loss == LossKind::WeightedDice) {
                            wmaps[g] = weights_from_distance(msk, dist, specs[g].cfg.m,
                                                             specs[g].cfg.distance_root);
                            specs[g].weights = &wmaps[g];
                        }
                    }

                    const Tensor4 input = to_input_tensor(img);
                    const DropoutPlan plan = model.draw_dropout(rng);
                    ForwardBackwardResult fb;
                    try {
                        fb = forward_backward(model, input, msk,
                                              specs, model.spec().dropout_p > 0.0 ? &plan : nullptr);
                    } catch (const std::runtime_error&) {
                        if (!dump_prefix.empty())
                            model.save(dump_prefix.string() + ".diverged.gsnet");
                        throw;
                    }
                    for (int g = 0; g < n_groups; ++g) loss_sums[g] += fb.group_losses[g];
                    ++steps;
                    sgd.step(model.parameters(), lr);
                }
            }

            EpochTrace row;
            row.epoch = global_epoch;
            row.stage = static_cast<int>(si) + 1;
            row.lr = lr;
            for (int g = 0; g < n_groups; ++g)
                row.group_losses.push_back(
                    steps > 0 ? loss_sums[g] / static_cast<double>(steps) : 0.0);
            const bool last_epoch =
                (si + 1 == cfg.stages.size()) && (e == stage.epochs);
            if (!data.test.empty() &&
                (last_epoch || (cfg.validate_every > 0 && e % cfg.validate_every == 0)))
                row.validation = validate(model, data, cfg);
            result.trace.push_back(std::move(row));

            if (cfg.hard_refresh_every > 0 && e % cfg.hard_refresh_every == 0 &&
                e != stage.epochs)
                refresh_all();
        }
    }
    return result;
}

Volume predict(Net& net, const Volume& volume, Dims patch, Dims stride, Aggregate agg) {
    if (stride.nx > patch.nx || stride.ny > patch.ny || stride.nz > patch.nz)
        throw std::invalid_argument("stride must not exceed patch dims");
    if (patch.nx > volume.dims.nx || patch.ny > volume.dims.ny || patch.nz > volume.dims.nz)
        throw std::invalid_argument("patch larger than volume");

    auto origins = [](int dim, int p, int s) {
        std::vector<int> out;
        for (int o = 0;; o += s) {
            if (o + p >= dim) {
                out.push_back(dim - p);
                break;
            }
            out.push_back(o);
        }
        return out;
    };
    const auto ox = origins(volume.dims.nx, patch.nx, stride.nx);
    const auto oy = origins(volume.dims.ny, patch.ny, stride.ny);
    const auto oz = origins(volume.dims.nz, patch.nz, stride.nz);

    std::vector<double> acc(volume.size(), agg == Aggregate::Mean ? 0.0 : -1.0);
    std::vector<std::uint32_t> cnt(volume.size(), 0);

    for (int z : oz)
        for (int y : oy)
            for (int x : ox) {
                const Volume img = crop_volume(volume, {x, y, z}, patch);
                const Tensor4 input = to_input_tensor(img);
                net.forward(input, nullptr, true);
                const Tensor4& p = net.prediction();
                for (int pz = 0; pz < patch.nz; ++pz)
                    for (int py = 0; py < patch.ny; ++py)
                        for (int px = 0; px < patch.nx; ++px) {
                            const std::size_t vi = volume.index(x + px, y + py, z + pz);
                            const float pv =
                                p.v[(static_cast<std::size_t>(pz) * patch.ny + py) * patch.nx + px];
                            if (agg == Aggregate::Mean) {
                                acc[vi] += pv;
                                cnt[vi] += 1;
                            } else {
                                acc[vi] = std::max(acc[vi], static_cast<double>(pv));
                            }
                        }
            }

    Volume out(volume.dims, volume.spacing, ElementKind::Probability);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = agg == Aggregate::Mean
                             ? (cnt[i] > 0 ? acc[i] / cnt[i] : 0.0)
                             : std::max(0.0, acc[i]);
        out.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

Volume finalize_mask(const Volume& prob) {
    Volume mask(prob.dims, prob.spacing, ElementKind::Binary);
    for (std::size_t i = 0; i < prob.size(); ++i)
        mask.data[i] = prob.data[i] >= 0.5f ? 1.0f : 0.0f;
    return largest_component(mask);
}

void write_trace_csv(const std::vector<EpochTrace>& trace, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    std::size_t n_groups = 0;
    for (const EpochTrace& t : trace) n_groups = std::max(n_groups, t.group_losses.size());
    out << "epoch,stage,lr";
    for (std::size_t g = 0; g < n_groups; ++g) out << ",loss_g" << g;
    out << ",val_dsc,val_precision,val_length_detected,val_branch_detected,"
           "val_thin_length_detected\n";
    for (const EpochTrace& t : trace) {
        out << t.epoch << ',' << t.stage << ',' << t.lr;
        for (std::size_t g = 0; g < n_groups; ++g) {
            out << ',';
            if (g < t.group_losses.size()) out << t.group_losses[g];
        }
        if (t.validation) {
            out << ',' << t.validation->dsc << ',' << t.validation->precision << ','
                << t.validation->length_detected << ',' << t.validation->branch_detected << ','
                << t.validation->thin_length_detected;
        } else {
            out << ",,,,,";
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace gradseg
