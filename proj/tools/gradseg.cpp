// gradseg: command-line surface for the segmentation toolkit. Every
// subcommand wraps a library operation; no numeric behavior lives here.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gradseg/labeling.hpp"
#include "gradseg/losses.hpp"
#include "gradseg/metrics.hpp"
#include "gradseg/net.hpp"
#include "gradseg/phantom.hpp"
#include "gradseg/pipeline.hpp"
#include "gradseg/skeleton.hpp"
#include "gradseg/threading.hpp"
#include "gradseg/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gradseg;

namespace {

constexpr const char* kVersion = "gradseg 1.0.0";

/// JSON config files: top-level keys map to global flags, one nested object
/// per subcommand. Command-line flags override file values.
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App* app, bool, bool, std::string) const override {
        json j;
        for (const CLI::Option* opt : app->get_options()) {
            if (!opt->get_configurable() || opt->results().empty()) continue;
            j[opt->get_lnames()[0]] = opt->results().size() == 1
                                          ? json(opt->results()[0])
                                          : json(opt->results());
        }
        return j.dump(2);
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        input >> j;
        std::vector<CLI::ConfigItem> items;
        walk(j, {}, items);
        return items;
    }

private:
    static void walk(const json& j, std::vector<std::string> parents,
                     std::vector<CLI::ConfigItem>& items) {
        for (const auto& [key, value] : j.items()) {
            if (value.is_object()) {
                auto deeper = parents;
                deeper.push_back(key);
                walk(value, deeper, items);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = key;
            if (value.is_array()) {
                for (const auto& v : value) item.inputs.push_back(scalar(v));
            } else {
                item.inputs.push_back(scalar(value));
            }
            items.push_back(std::move(item));
        }
    }
    static std::string scalar(const json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        return v.dump();
    }
};

std::uint64_t fnv1a_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return 0;
    std::uint64_t h = 1469598103934665603ull;
    char buf[65536];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        const std::streamsize n = in.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!in) break;
    }
    return h;
}

/// One manifest per command: echoes the resolved configuration and hashes
/// of every input/output so a run can be reproduced and verified.
class Manifest {
public:
    Manifest(std::string command, std::uint64_t seed) : seed_(seed) {
        j_["command"] = std::move(command);
        j_["version"] = kVersion;
        j_["seed"] = seed;
    }
    void config(const json& cfg) { j_["config"] = cfg; }
    void input(const std::string& name, const fs::path& p) {
        j_["inputs"][name] = {{"path", p.string()}, {"fnv1a64", fnv1a_file(p)}};
    }
    void output(const std::string& name, const fs::path& p) {
        outputs_.push_back({name, p});
    }
    void write(const fs::path& path) {
        for (const auto& [name, p] : outputs_)
            j_["outputs"][name] = {{"path", p.string()}, {"fnv1a64", fnv1a_file(p)}};
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
        out << j_.dump(2) << '\n';
    }
    std::uint64_t seed() const { return seed_; }

private:
    json j_;
    std::uint64_t seed_;
    std::vector<std::pair<std::string, fs::path>> outputs_;
};

std::uint64_t default_seed() {
    if (const char* env = std::getenv("GRADSEG_SEED")) return std::strtoull(env, nullptr, 10);
    return 1;
}

std::string join_args(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s;
}

Volume load_binary(const fs::path& p) {
    Volume v = read_volume(p);
    if (v.kind != ElementKind::Binary)
        throw std::invalid_argument(p.string() + ": expected a binary volume");
    return v;
}

LossConfig make_loss_config(double alpha, double root, double r_d, double eps,
                            std::optional<double> m, bool alt_m, double bce_lambda,
                            double bce_fg_weight) {
    LossConfig cfg = LossConfig::for_alpha(alpha);
    cfg.root = root;
    cfg.distance_root = r_d;
    cfg.epsilon = eps;
    if (alt_m) cfg.m = decay_magnitude_alternate(alpha);
    if (m) cfg.m = *m;
    cfg.bce_lambda = bce_lambda;
    cfg.bce_fg_weight = bce_fg_weight;
    return cfg;
}

WeightMap weights_from_volume(const Volume& v) {
    WeightMap w(v.dims, 1.0);
    for (std::size_t i = 0; i < v.size(); ++i) w.w[i] = v.data[i];
    return w;
}

Volume weights_to_volume(const WeightMap& w, const Spacing& sp) {
    Volume v(w.dims, sp, ElementKind::Intensity);
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = static_cast<float>(w.w[i]);
    return v;
}

// "prior-tversky" is accepted as an alias: general-union with r = 1.
LossKind parse_loss_kind(std::string name, LossConfig& cfg) {
    if (name == "prior-tversky") {
        cfg.root = 1.0;
        return LossKind::GeneralUnion;
    }
    return loss_kind_from_string(name);
}

struct DatasetPaths {
    std::vector<fs::path> volumes, masks, graphs;
};

DatasetPaths scan_dataset(const fs::path& dir) {
    DatasetPaths out;
    for (int i = 0;; ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "vol_%03d.avol", i);
        const fs::path vol = dir / buf;
        if (!fs::exists(vol)) break;
        std::snprintf(buf, sizeof buf, "mask_%03d.avol", i);
        const fs::path mask = dir / buf;
        std::snprintf(buf, sizeof buf, "graph_%03d.txt", i);
        const fs::path graph = dir / buf;
        if (!fs::exists(mask) || !fs::exists(graph))
            throw std::invalid_argument("incomplete sample " + vol.string());
        out.volumes.push_back(vol);
        out.masks.push_back(mask);
        out.graphs.push_back(graph);
    }
    if (out.volumes.empty())
        throw std::invalid_argument("no vol_NNN.avol samples under " + dir.string());
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"Tubular-structure segmentation toolkit"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.fallthrough();  // global flags may follow the subcommand
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    int threads = 0;
    std::uint64_t seed = default_seed();
    app.add_option("--threads", threads, "max worker threads (0 = hardware)");
    app.add_option("--seed", seed, "global random seed (env GRADSEG_SEED)");
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--config", "", "JSON config file; flags override")->configurable(false);

    // ---------------------------------------------------------- phantom gen
    auto* phantom_cmd = app.add_subcommand("phantom", "synthetic phantom datasets");
    auto* gen = phantom_cmd->add_subcommand("gen", "generate a phantom dataset");
    fs::path gen_out = "phantoms";
    int gen_count = 1;
    PhantomSpec pspec;
    int gen_dim = 64;
    gen->add_option("--out-dir", gen_out, "output directory");
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--depth", pspec.depth, "tree generations");
    gen->add_option("--root-radius", pspec.root_radius_mm, "root radius, mm");
    gen->add_option("--radius-decay", pspec.radius_decay, "radius decay per generation");
    gen->add_option("--segment-length", pspec.segment_length_mm, "root segment length, mm");
    gen->add_option("--length-decay", pspec.length_decay, "length decay per generation");
    gen->add_option("--branch-angle", pspec.branch_angle_deg, "branching angle, degrees");
    gen->add_option("--angle-jitter", pspec.angle_jitter_deg, "angle jitter, degrees");
    gen->add_option("--dim", gen_dim, "cubic volume dimension, voxels");
    gen->add_option("--noise-sigma", pspec.intensity.noise_sigma, "background noise sigma");
    gen->add_option("--wall-thickness", pspec.intensity.wall_thickness_mm, "wall thickness, mm");

    // ---------------------------------------------------------- skeletonize
    auto* skel = app.add_subcommand("skeletonize", "3D thinning to a centerline");
    fs::path sk_mask, sk_out, sk_graph;
    bool sk_diameters = false;
    skel->add_option("--mask", sk_mask, "binary mask (AVOL)")->required();
    skel->add_option("--out", sk_out, "skeleton text file")->required();
    skel->add_option("--graph", sk_graph, "also write the branch graph");
    skel->add_flag("--diameters", sk_diameters, "populate branch diameters (needs --graph)");

    // ---------------------------------------------------------- weights
    auto* wcmd = app.add_subcommand("weights", "distance-based loss weights");
    fs::path w_mask, w_skel, w_out;
    double w_m = decay_magnitude(0.1), w_rd = 0.5;
    bool w_per_component = false, w_alt_m = false;
    std::optional<double> w_alpha;
    wcmd->add_option("--mask", w_mask, "binary mask (AVOL)")->required();
    wcmd->add_option("--skeleton", w_skel, "skeleton text file")->required();
    wcmd->add_option("--out", w_out, "weight volume (AVOL, intensity)")->required();
    wcmd->add_option("--m", w_m, "decay magnitude m");
    wcmd->add_option("--alpha", w_alpha, "derive m from alpha via the main-text rule");
    wcmd->add_flag("--alternate-m", w_alt_m, "use the supplementary m rule (1-a)/a");
    wcmd->add_option("--distance-root", w_rd, "decay exponent r_d");
    wcmd->add_flag("--per-component", w_per_component, "d_max per connected component");

    // ---------------------------------------------------------- loss family
    auto add_loss_flags = [](CLI::App* cmd, std::string& kind, fs::path& pred, fs::path& gt,
                             fs::path& weights, double& alpha, double& root, double& rd,
                             double& eps, std::optional<double>& m, bool& alt_m, double& lambda,
                             double& fgw) {
        cmd->add_option("--kind", kind,
                        "dice|weighted-dice|tversky|root-tversky|general-union|dice-wbce|"
                        "prior-tversky")
            ->required();
        cmd->add_option("--pred", pred, "prediction volume (AVOL)")->required();
        cmd->add_option("--gt", gt, "ground-truth binary volume (AVOL)")->required();
        cmd->add_option("--weights", weights, "weight volume (AVOL)");
        cmd->add_option("--alpha", alpha, "Tversky alpha");
        cmd->add_option("--root", root, "focal root r_l")->option_text("R");
        cmd->add_option("--distance-root", rd, "decay exponent r_d");
        cmd->add_option("--epsilon", eps, "focal gradient stabilizer");
        cmd->add_option("--m", m, "decay magnitude override");
        cmd->add_flag("--alternate-m", alt_m, "use the supplementary m rule");
        cmd->add_option("--bce-lambda", lambda, "dice-wbce mixing weight");
        cmd->add_option("--bce-fg-weight", fgw, "dice-wbce foreground weight");
    };

    auto* loss_cmd = app.add_subcommand("loss", "evaluate a loss and its gradient");
    std::string l_kind;
    fs::path l_pred, l_gt, l_weights, l_grad_out;
    double l_alpha = 0.1, l_root = 0.7, l_rd = 0.5, l_eps = 1e-4, l_lambda = 1.0, l_fgw = 5.0;
    std::optional<double> l_m;
    bool l_alt = false;
    add_loss_flags(loss_cmd, l_kind, l_pred, l_gt, l_weights, l_alpha, l_root, l_rd, l_eps, l_m,
                   l_alt, l_lambda, l_fgw);
    loss_cmd->add_option("--grad-out", l_grad_out, "write the gradient volume (AVOL)");

    auto* check_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
    std::string c_kind;
    fs::path c_pred, c_gt, c_weights;
    double c_alpha = 0.1, c_root = 0.7, c_rd = 0.5, c_eps = 1e-4, c_lambda = 1.0, c_fgw = 5.0;
    std::optional<double> c_m;
    bool c_alt = false;
    double c_step = 1e-5;
    add_loss_flags(check_cmd, c_kind, c_pred, c_gt, c_weights, c_alpha, c_root, c_rd, c_eps, c_m,
                   c_alt, c_lambda, c_fgw);
    check_cmd->add_option("--step", c_step, "central-difference step");

    auto* ratio_cmd = app.add_subcommand("ratio", "foreground/background gradient ratio");
    std::string r_kind;
    fs::path r_pred, r_gt, r_weights, r_out;
    double r_alpha = 0.1, r_root = 0.7, r_rd = 0.5, r_eps = 1e-4, r_lambda = 1.0, r_fgw = 5.0;
    std::optional<double> r_m;
    bool r_alt = false;
    add_loss_flags(ratio_cmd, r_kind, r_pred, r_gt, r_weights, r_alpha, r_root, r_rd, r_eps, r_m,
                   r_alt, r_lambda, r_fgw);
    ratio_cmd->add_option("--out", r_out, "append a CSV row to this file");

    // ---------------------------------------------------------- train
    auto* train_cmd = app.add_subcommand("train", "multi-stage training on a dataset");
    fs::path t_data, t_out = "run";
    int t_train_count = 16;
    std::string t_scheme = "groups-2";
    std::string t_loss = "general-union";
    int t_epochs1 = 30, t_epochs2 = 10;
    std::vector<int> t_drops1 = {18, 27}, t_drops2 = {5, 8};
    double t_lr = 0.01, t_alpha_e = 0.1, t_alpha_d = 0.1, t_alpha2_e = 0.2, t_alpha2_d = 0.2;
    double t_root = 0.7, t_rd = 0.5, t_eps = 1e-4;
    double t_aug1 = 0.7, t_aug2 = 0.9, t_ps = 0.5, t_pd = 0.3;
    int t_patch = 32, t_ppv = 8, t_stride = 16;
    int t_validate_every = 5, t_hard_every = 10;
    bool t_no_augment = false;
    train_cmd->add_option("--data-dir", t_data, "dataset directory (phantom gen layout)")
        ->required();
    train_cmd->add_option("--out-dir", t_out, "run output directory");
    train_cmd->add_option("--train-count", t_train_count, "leading samples used for training");
    train_cmd->add_option("--scheme", t_scheme, "final|deep|per-block|groups-K[-cross]");
    train_cmd->add_option("--loss", t_loss, "stage loss kind");
    train_cmd->add_option("--epochs", t_epochs1, "stage-1 epochs");
    train_cmd->add_option("--epochs2", t_epochs2, "stage-2 epochs (0 disables stage 2)");
    train_cmd->add_option("--drops", t_drops1, "stage-1 LR drop epochs")
        ->delimiter(',')
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    train_cmd->add_option("--drops2", t_drops2, "stage-2 LR drop epochs")
        ->delimiter(',')
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    train_cmd->add_option("--lr", t_lr, "initial learning rate");
    train_cmd->add_option("--alpha-e", t_alpha_e, "stage-1 encoder-side alpha");
    train_cmd->add_option("--alpha-d", t_alpha_d, "stage-1 decoder-side alpha");
    train_cmd->add_option("--alpha2-e", t_alpha2_e, "stage-2 encoder-side alpha");
    train_cmd->add_option("--alpha2-d", t_alpha2_d, "stage-2 decoder-side alpha");
    train_cmd->add_option("--root", t_root, "focal root r_l");
    train_cmd->add_option("--distance-root", t_rd, "decay exponent r_d");
    train_cmd->add_option("--epsilon", t_eps, "focal stabilizer");
    train_cmd->add_option("--aug-threshold", t_aug1, "stage-1 interpolation threshold");
    train_cmd->add_option("--aug-threshold2", t_aug2, "stage-2 interpolation threshold");
    train_cmd->add_flag("--no-augment", t_no_augment, "disable rotation augmentation");
    train_cmd->add_option("--p-s", t_ps, "hard skeleton sampling probability");
    train_cmd->add_option("--p-d", t_pd, "SpatialDropout probability");
    train_cmd->add_option("--patch", t_patch, "cubic patch size");
    train_cmd->add_option("--patches-per-volume", t_ppv, "patches per volume per epoch");
    train_cmd->add_option("--stride", t_stride, "inference stride");
    train_cmd->add_option("--validate-every", t_validate_every, "validation cadence, epochs");
    train_cmd->add_option("--hard-refresh-every", t_hard_every, "hard-set refresh cadence");

    // ---------------------------------------------------------- predict
    auto* pred_cmd = app.add_subcommand("predict", "sliding-window inference");
    fs::path p_ckpt, p_vol, p_out, p_mask_out;
    int p_patch = 32, p_stride = 16;
    bool p_max = false;
    pred_cmd->add_option("--checkpoint", p_ckpt, "trained model (.gsnet)")->required();
    pred_cmd->add_option("--volume", p_vol, "intensity volume (AVOL)")->required();
    pred_cmd->add_option("--out", p_out, "probability volume (AVOL)")->required();
    pred_cmd->add_option("--mask-out", p_mask_out,
                         "thresholded + largest-component mask (AVOL)");
    pred_cmd->add_option("--patch", p_patch, "cubic patch size");
    pred_cmd->add_option("--stride", p_stride, "window stride");
    pred_cmd->add_flag("--max-agg", p_max, "aggregate overlaps by max instead of mean");

    // ---------------------------------------------------------- metrics
    auto* met_cmd = app.add_subcommand("metrics", "evaluation metrics");
    fs::path m_pred, m_gt, m_graph, m_csv, m_json;
    double m_tau = 0.8, m_alpha = 0.5, m_tol = 0.0;
    bool m_stratified = false, m_largest = false;
    met_cmd->add_option("--pred", m_pred, "predicted binary mask (AVOL)")->required();
    met_cmd->add_option("--gt", m_gt, "ground-truth binary mask (AVOL)")->required();
    met_cmd->add_option("--graph", m_graph, "ground-truth centerline graph");
    met_cmd->add_flag("--stratified", m_stratified, "per-diameter-stratum breakdown");
    met_cmd->add_option("--tau-b", m_tau, "branch-detected coverage threshold");
    met_cmd->add_option("--alpha", m_alpha, "Tversky index alpha");
    met_cmd->add_option("--tolerance", m_tol, "centerline coverage tolerance, mm");
    met_cmd->add_flag("--largest-component", m_largest, "reduce pred to its largest component");
    met_cmd->add_option("--csv", m_csv, "write CSV report");
    met_cmd->add_option("--json", m_json, "write JSON report");

    // ---------------------------------------------------------- probe
    auto* probe_cmd = app.add_subcommand("probe", "attention and gradient-flow probes");
    bool pr_attention = false, pr_erosion = false;
    fs::path pr_ckpt, pr_vol, pr_gt, pr_out_dir = "probe", pr_template, pr_out_csv;
    std::string pr_loss = "dice";
    double pr_alpha = 0.1, pr_seed_ratio = 1.0;
    int pr_layers = 8;
    probe_cmd->add_flag("--grad-attention", pr_attention,
                        "per-layer output/gradient attention maps");
    probe_cmd->add_flag("--erosion-dilation", pr_erosion,
                        "gradient erosion/dilation trace through averaging kernels");
    probe_cmd->add_option("--checkpoint", pr_ckpt, "model for --grad-attention");
    probe_cmd->add_option("--volume", pr_vol, "intensity volume (AVOL)");
    probe_cmd->add_option("--gt", pr_gt, "ground-truth mask (AVOL)");
    probe_cmd->add_option("--loss", pr_loss, "loss kind for the backward pass");
    probe_cmd->add_option("--alpha", pr_alpha, "loss alpha");
    probe_cmd->add_option("--out-dir", pr_out_dir, "output directory for maps");
    probe_cmd->add_option("--fg-template", pr_template, "binary template for --erosion-dilation");
    probe_cmd->add_option("--seed-ratio", pr_seed_ratio, "foreground/background seed ratio");
    probe_cmd->add_option("--layers", pr_layers, "number of averaging layers");
    probe_cmd->add_option("--out", pr_out_csv, "trace CSV for --erosion-dilation");

    // ---------------------------------------------------------- sample
    auto* sample_cmd = app.add_subcommand("sample", "patch sampler diagnostics");
    fs::path s_vol, s_mask, s_graph, s_prob, s_out;
    int s_n = 100, s_patch = 32;
    double s_ps = 0.5;
    sample_cmd->add_option("--volume", s_vol, "intensity volume (AVOL)")->required();
    sample_cmd->add_option("--mask", s_mask, "binary mask (AVOL)")->required();
    sample_cmd->add_option("--graph", s_graph, "centerline graph")->required();
    sample_cmd->add_option("--hard-from", s_prob,
                           "probability volume; centerline voxels below 0.5 form the hard set");
    sample_cmd->add_option("--n", s_n, "number of draws");
    sample_cmd->add_option("--p-s", s_ps, "hard sampling probability");
    sample_cmd->add_option("--patch", s_patch, "cubic patch size");
    sample_cmd->add_option("--out", s_out, "provenance CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::CallForVersion& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // usage errors are validation failures
    }
    set_max_threads(threads);
    const std::string cmdline = join_args(argc, argv);

    if (gen->parsed()) {
        pspec.dims = {gen_dim, gen_dim, gen_dim};
        fs::create_directories(gen_out);
        Manifest man(cmdline, seed);
        std::ofstream csv(gen_out / "manifest.csv");
        csv << "sample,seed,depth,root_radius_mm,radius_decay,segment_length_mm,length_decay,"
               "branch_angle_deg,dim,foreground_fraction\n";
        for (int i = 0; i < gen_count; ++i) {
            PhantomSpec s = pspec;
            s.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
            const PhantomSample ph = generate(s);
            char name[64];
            std::snprintf(name, sizeof name, "vol_%03d.avol", i);
            write_volume(ph.image, gen_out / name);
            man.output(name, gen_out / name);
            std::snprintf(name, sizeof name, "mask_%03d.avol", i);
            write_volume(ph.mask, gen_out / name);
            man.output(name, gen_out / name);
            std::snprintf(name, sizeof name, "graph_%03d.txt", i);
            write_graph(ph.graph, gen_out / name);
            man.output(name, gen_out / name);
            const ImbalanceProfile prof = imbalance_profile(ph.mask, ph.graph);
            csv << i << ',' << s.seed << ',' << s.depth << ',' << s.root_radius_mm << ','
                << s.radius_decay << ',' << s.segment_length_mm << ',' << s.length_decay << ','
                << s.branch_angle_deg << ',' << gen_dim << ',' << prof.foreground_fraction
                << '\n';
        }
        csv.close();
        json cfg;
        cfg["count"] = gen_count;
        cfg["depth"] = pspec.depth;
        cfg["dim"] = gen_dim;
        man.config(cfg);
        man.write(gen_out / "manifest.json");
        return 0;
    }

    if (skel->parsed()) {
        Manifest man(cmdline, seed);
        man.input("mask", sk_mask);
        const Volume mask = load_binary(sk_mask);
        const Skeleton sk = thin(mask);
        write_skeleton(sk, sk_out);
        man.output("skeleton", sk_out);
        if (!sk_graph.empty()) {
            CenterlineGraph g = parse_tree(sk);
            if (sk_diameters) g = branch_diameters(std::move(g), mask);
            write_graph(g, sk_graph);
            man.output("graph", sk_graph);
            std::cout << "voxels " << sk.voxels.size() << " branches " << g.branches.size()
                      << " length_mm " << g.total_length_mm() << '\n';
        } else {
            std::cout << "voxels " << sk.voxels.size() << '\n';
        }
        man.write(fs::path(sk_out.string() + ".manifest.json"));
        return 0;
    }

    if (wcmd->parsed()) {
        Manifest man(cmdline, seed);
        man.input("mask", w_mask);
        man.input("skeleton", w_skel);
        const Volume mask = load_binary(w_mask);
        const Skeleton sk = read_skeleton(w_skel);
        double m = w_m;
        if (w_alpha) m = w_alt_m ? decay_magnitude_alternate(*w_alpha) : decay_magnitude(*w_alpha);
        const WeightMap w = distance_weights(mask, sk, m, w_rd, w_per_component);
        write_volume(weights_to_volume(w, mask.spacing), w_out);
        man.output("weights", w_out);
        json cfg;
        cfg["m"] = m;
        cfg["distance_root"] = w_rd;
        cfg["d_max_mm"] = w.d_max_mm;
        man.config(cfg);
        man.write(fs::path(w_out.string() + ".manifest.json"));
        std::cout << "d_max_mm " << w.d_max_mm << '\n';
        return 0;
    }

    auto loss_inputs = [&](const fs::path& predp, const fs::path& gtp, const fs::path& wp,
                           Volume& pred, Volume& gt, std::optional<WeightMap>& wm) {
        pred = read_volume(predp);
        gt = load_binary(gtp);
        if (!wp.empty()) wm = weights_from_volume(read_volume(wp));
    };

    if (loss_cmd->parsed()) {
        Manifest man(cmdline, seed);
        man.input("pred", l_pred);
        man.input("gt", l_gt);
        Volume pred, gt;
        std::optional<WeightMap> wm;
        loss_inputs(l_pred, l_gt, l_weights, pred, gt, wm);
        LossConfig cfg =
            make_loss_config(l_alpha, l_root, l_rd, l_eps, l_m, l_alt, l_lambda, l_fgw);
        const LossKind kind = parse_loss_kind(l_kind, cfg);
        cfg.validate(kind);
        const LossResult res = evaluate_loss(kind, pred, gt, wm ? &*wm : nullptr, cfg);
        std::cout << "value " << res.value << '\n';
        if (!l_grad_out.empty()) {
            Volume gv(pred.dims, pred.spacing, ElementKind::Intensity);
            for (std::size_t i = 0; i < gv.size(); ++i)
                gv.data[i] = static_cast<float>(res.gradient[i]);
            write_volume(gv, l_grad_out);
            man.output("gradient", l_grad_out);
            man.write(fs::path(l_grad_out.string() + ".manifest.json"));
        }
        return 0;
    }

    if (check_cmd->parsed()) {
        Volume pred, gt;
        std::optional<WeightMap> wm;
        loss_inputs(c_pred, c_gt, c_weights, pred, gt, wm);
        LossConfig cfg =
            make_loss_config(c_alpha, c_root, c_rd, c_eps, c_m, c_alt, c_lambda, c_fgw);
        const LossKind kind = parse_loss_kind(c_kind, cfg);
        cfg.validate(kind);
        const double err =
            finite_difference_check(kind, pred, gt, wm ? &*wm : nullptr, cfg, c_step);
        std::cout << "max_relative_error " << err << '\n';
        return 0;
    }

    if (ratio_cmd->parsed()) {
        Volume pred, gt;
        std::optional<WeightMap> wm;
        loss_inputs(r_pred, r_gt, r_weights, pred, gt, wm);
        LossConfig cfg =
            make_loss_config(r_alpha, r_root, r_rd, r_eps, r_m, r_alt, r_lambda, r_fgw);
        const LossKind kind = parse_loss_kind(r_kind, cfg);
        cfg.validate(kind);
        if ((kind == LossKind::WeightedDice || kind == LossKind::GeneralUnion) && !wm)
            wm = WeightMap::uniform(gt.dims, 1.0);
        const GradientRatioReport rep = gradient_ratio(kind, pred, gt, wm ? &*wm : nullptr, cfg);
        const std::string row = r_kind + "," + std::to_string(rep.empirical_ratio) + "," +
                                std::to_string(rep.closed_form_ratio) + "," +
                                std::to_string(rep.lower_bound);
        if (!r_out.empty()) {
            const bool fresh = !fs::exists(r_out);
            std::ofstream out(r_out, std::ios::app);
            if (fresh) out << "kind,empirical,closed_form,lower_bound\n";
            out << row << '\n';
        }
        std::cout << "kind,empirical,closed_form,lower_bound\n" << row << '\n';
        return 0;
    }

    if (train_cmd->parsed()) {
        Manifest man(cmdline, seed);
        const DatasetPaths paths = scan_dataset(t_data);
        if (t_train_count < 1 || t_train_count > static_cast<int>(paths.volumes.size()))
            throw std::invalid_argument("--train-count out of range");
        Dataset data;
        for (std::size_t i = 0; i < paths.volumes.size(); ++i) {
            TrainingVolume tv = make_training_volume(
                read_volume(paths.volumes[i]), load_binary(paths.masks[i]),
                read_graph(paths.graphs[i]));
            if (static_cast<int>(i) < t_train_count) data.train.push_back(std::move(tv));
            else data.test.push_back(std::move(tv));
        }

        TrainConfig cfg;
        LossConfig probe_cfg;  // for the prior-tversky alias
        const LossKind kind = parse_loss_kind(t_loss, probe_cfg);
        StageConfig s1;
        s1.epochs = t_epochs1;
        s1.lr = t_lr;
        s1.lr_drop_epochs = t_drops1;
        s1.loss = kind;
        s1.alpha_e = t_alpha_e;
        s1.alpha_d = t_alpha_d;
        s1.root = t_loss == "prior-tversky" ? 1.0 : t_root;
        s1.distance_root = t_rd;
        s1.epsilon = t_eps;
        s1.aug_threshold = t_aug1;
        s1.augment = !t_no_augment;
        cfg.stages = {s1};
        if (t_epochs2 > 0) {
            StageConfig s2 = s1;
            s2.epochs = t_epochs2;
            s2.lr_drop_epochs = t_drops2;
            s2.alpha_e = t_alpha2_e;
            s2.alpha_d = t_alpha2_d;
            s2.aug_threshold = t_aug2;
            cfg.stages.push_back(s2);
        }
        cfg.sampler.patch = {t_patch, t_patch, t_patch};
        cfg.sampler.p_hard = t_ps;
        cfg.sampler.patches_per_volume = t_ppv;
        cfg.seed = seed;
        cfg.validate_every = t_validate_every;
        cfg.hard_refresh_every = t_hard_every;
        cfg.predict_patch = {t_patch, t_patch, t_patch};
        cfg.predict_stride = {t_stride, t_stride, t_stride};

        NetSpec spec = NetSpec::desk_default();
        spec.dropout_p = t_pd;
        const SupervisionScheme scheme =
            SupervisionScheme::parse(t_scheme, t_alpha_e, t_alpha_d);

        fs::create_directories(t_out);
        TrainResult res = train(spec, scheme, data, cfg, t_out / "dump");
        res.net.save(t_out / "checkpoint.gsnet");
        write_trace_csv(res.trace, t_out / "trace.csv");
        man.output("checkpoint", t_out / "checkpoint.gsnet");
        man.output("trace", t_out / "trace.csv");

        json jcfg;
        jcfg["scheme"] = scheme.name();
        jcfg["loss"] = t_loss;
        jcfg["epochs"] = {t_epochs1, t_epochs2};
        jcfg["lr"] = t_lr;
        jcfg["alpha_e"] = t_alpha_e;
        jcfg["alpha_d"] = t_alpha_d;
        jcfg["alpha2_e"] = t_alpha2_e;
        jcfg["alpha2_d"] = t_alpha2_d;
        jcfg["root"] = s1.root;
        jcfg["distance_root"] = t_rd;
        jcfg["epsilon"] = t_eps;
        jcfg["aug_thresholds"] = {t_aug1, t_aug2};
        jcfg["p_s"] = t_ps;
        jcfg["p_d"] = t_pd;
        jcfg["patch"] = t_patch;
        jcfg["patches_per_volume"] = t_ppv;
        jcfg["train_count"] = t_train_count;
        man.config(jcfg);
        man.write(t_out / "manifest.json");
        if (!res.trace.empty() && res.trace.back().validation) {
            const ValidationRow& v = *res.trace.back().validation;
            std::cout << "final dsc " << v.dsc << " precision " << v.precision << " length "
                      << v.length_detected << " branch " << v.branch_detected << " thin_length "
                      << v.thin_length_detected << '\n';
        }
        return 0;
    }

    if (pred_cmd->parsed()) {
        Manifest man(cmdline, seed);
        man.input("checkpoint", p_ckpt);
        man.input("volume", p_vol);
        Net net = Net::load(p_ckpt);
        const Volume vol = read_volume(p_vol);
        const Volume prob =
            predict(net, vol, {p_patch, p_patch, p_patch}, {p_stride, p_stride, p_stride},
                    p_max ? Aggregate::Max : Aggregate::Mean);
        write_volume(prob, p_out);
        man.output("probability", p_out);
        if (!p_mask_out.empty()) {
            write_volume(finalize_mask(prob), p_mask_out);
            man.output("mask", p_mask_out);
        }
        man.write(fs::path(p_out.string() + ".manifest.json"));
        return 0;
    }

    if (met_cmd->parsed()) {
        Manifest man(cmdline, seed);
        man.input("pred", m_pred);
        man.input("gt", m_gt);
        Volume pred = load_binary(m_pred);
        const Volume gt = load_binary(m_gt);
        if (m_largest) pred = largest_component(pred);

        if (m_stratified || !m_graph.empty()) {
            if (m_graph.empty())
                throw std::invalid_argument("--stratified requires --graph");
            man.input("graph", m_graph);
            CenterlineGraph g = read_graph(m_graph);
            bool have_diams = true;
            for (const GraphBranch& b : g.branches) have_diams &= b.diameter_mm > 0.0;
            if (!have_diams) g = branch_diameters(std::move(g), gt);
            const MetricsReport rep =
                stratified_metrics(pred, gt, g, default_diameter_bins(), m_tau, m_alpha, m_tol);
            if (!m_csv.empty()) {
                write_metrics_csv(rep, m_csv);
                man.output("csv", m_csv);
            }
            if (!m_json.empty()) {
                write_metrics_json(rep, m_json);
                man.output("json", m_json);
            }
            std::cout << "dsc " << rep.dsc << " precision "
                      << (rep.precision ? std::to_string(*rep.precision) : "undefined")
                      << " length_detected " << rep.length_detected << " branch_detected "
                      << rep.branch_detected << " tversky " << rep.tversky << '\n';
            if (!m_csv.empty() || !m_json.empty())
                man.write(fs::path((m_csv.empty() ? m_json : m_csv).string() +
                                   ".manifest.json"));
        } else {
            const VoxelMetrics vm = voxel_metrics(pred, gt);
            std::cout << "dsc " << vm.dsc << " precision "
                      << (vm.precision ? std::to_string(*vm.precision) : "undefined") << '\n';
        }
        return 0;
    }

    if (probe_cmd->parsed()) {
        if (pr_attention == pr_erosion)
            throw std::invalid_argument("pick exactly one of --grad-attention, --erosion-dilation");
        if (pr_erosion) {
            if (pr_template.empty() || pr_out_csv.empty())
                throw std::invalid_argument("--erosion-dilation needs --fg-template and --out");
            Manifest man(cmdline, seed);
            man.input("template", pr_template);
            const Volume tmpl = load_binary(pr_template);
            const ProbeTrace tr = erosion_dilation_probe(tmpl, pr_seed_ratio, pr_layers);
            std::ofstream out(pr_out_csv);
            out << "layer,fg_bg_ratio,near_bg_influx\n";
            for (std::size_t k = 0; k < tr.fg_bg_ratio.size(); ++k)
                out << k << ',' << tr.fg_bg_ratio[k] << ',' << tr.near_bg_influx[k] << '\n';
            out.close();
            man.output("trace", pr_out_csv);
            man.write(fs::path(pr_out_csv.string() + ".manifest.json"));
            return 0;
        }
        if (pr_ckpt.empty() || pr_vol.empty() || pr_gt.empty())
            throw std::invalid_argument("--grad-attention needs --checkpoint, --volume, --gt");
        Manifest man(cmdline, seed);
        man.input("checkpoint", pr_ckpt);
        man.input("volume", pr_vol);
        man.input("gt", pr_gt);
        Net net = Net::load(pr_ckpt);
        const Volume vol = read_volume(pr_vol);
        Volume gt = load_binary(pr_gt);

        LossConfig cfg = LossConfig::for_alpha(pr_alpha);
        const LossKind kind = parse_loss_kind(pr_loss, cfg);
        std::vector<GroupLossSpec> specs(net.group_count());
        std::optional<WeightMap> wm;
        if (kind == LossKind::GeneralUnion || kind == LossKind::WeightedDice)
            wm = WeightMap::uniform(gt.dims, 1.0);
        for (auto& s : specs) {
            s.kind = kind;
            s.cfg = cfg;
            if (wm) s.weights = &*wm;
        }
        const Tensor4 input = to_input_tensor(vol);
        forward_backward(net, input, gt, specs, nullptr);
        const AttentionMaps maps = attention_probe(net, vol.spacing);

        fs::create_directories(pr_out_dir);
        std::ofstream csv(pr_out_dir / "attention.csv");
        csv << "layer,scale,fg_output_attention,bg_output_attention,fg_gradient_attention,"
               "bg_gradient_attention\n";
        const auto scales = net.spec().block_scales();
        for (std::size_t i = 0; i < maps.output.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof name, "output_attention_%02zu.avol", i);
            write_volume(maps.output[i], pr_out_dir / name);
            man.output(name, pr_out_dir / name);
            std::snprintf(name, sizeof name, "gradient_attention_%02zu.avol", i);
            write_volume(maps.gradient[i], pr_out_dir / name);
            man.output(name, pr_out_dir / name);

            // class means over the downsampled ground truth
            const int s = scales[i];
            double fo = 0, bo = 0, fgr = 0, bg = 0;
            std::size_t nf = 0, nb = 0;
            const Volume& o = maps.output[i];
            const Volume& g = maps.gradient[i];
            for (int z = 0; z < o.dims.nz; ++z)
                for (int y = 0; y < o.dims.ny; ++y)
                    for (int x = 0; x < o.dims.nx; ++x) {
                        const bool fg_vox = gt.at(x * s, y * s, z * s) != 0.0f;
                        const std::size_t idx = o.index(x, y, z);
                        if (fg_vox) {
                            fo += o.data[idx];
                            fgr += g.data[idx];
                            ++nf;
                        } else {
                            bo += o.data[idx];
                            bg += g.data[idx];
                            ++nb;
                        }
                    }
            csv << i << ',' << s << ',' << (nf ? fo / nf : 0.0) << ',' << (nb ? bo / nb : 0.0)
                << ',' << (nf ? fgr / nf : 0.0) << ',' << (nb ? bg / nb : 0.0) << '\n';
        }
        csv.close();
        man.output("attention.csv", pr_out_dir / "attention.csv");
        man.write(pr_out_dir / "manifest.json");
        return 0;
    }

    if (sample_cmd->parsed()) {
        Manifest man(cmdline, seed);
        man.input("volume", s_vol);
        man.input("mask", s_mask);
        man.input("graph", s_graph);
        TrainingVolume tv = make_training_volume(read_volume(s_vol), load_binary(s_mask),
                                                 read_graph(s_graph));
        std::vector<Voxel> hard;
        if (!s_prob.empty()) {
            const Volume prob = read_volume(s_prob);
            for (const Voxel& v : tv.centerline)
                if (prob.at(v.x, v.y, v.z) < 0.5f) hard.push_back(v);
        }
        SamplerConfig scfg;
        scfg.patch = {s_patch, s_patch, s_patch};
        scfg.p_hard = s_ps;
        Rng rng(derive_seed(seed, 0x5a3));
        std::ofstream out(s_out);
        out << "draw,mode,target_x,target_y,target_z,origin_x,origin_y,origin_z\n";
        for (int i = 0; i < s_n; ++i) {
            const PatchProvenance p = sample_patch(tv, hard, scfg, rng);
            out << i << ',' << (p.hard_mode ? "hard" : "random") << ',' << p.target.x << ','
                << p.target.y << ',' << p.target.z << ',' << p.origin.x << ',' << p.origin.y
                << ',' << p.origin.z << '\n';
        }
        out.close();
        man.output("samples", s_out);
        man.write(fs::path(s_out.string() + ".manifest.json"));
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const CLI::ParseError&) {
        // CLI11_PARSE already printed and returned, but keep a net here for
        // parse errors thrown outside the macro
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
