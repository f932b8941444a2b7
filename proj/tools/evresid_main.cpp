#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "evresid/binio.hpp"
#include "evresid/config.hpp"
#include "evresid/evalkit.hpp"
#include "evresid/events.hpp"
#include "evresid/flowio.hpp"
#include "evresid/model.hpp"
#include "evresid/synth.hpp"
#include "evresid/train.hpp"

namespace fs = std::filesystem;
using namespace evresid;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!path.empty()) cfg.load_file(path);
    for (const std::string& kv : overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

SceneSuite suite_from(const RunConfig& cfg) {
    return make_scene_suite(int(cfg.geti("width")), int(cfg.geti("height")),
                            int(cfg.geti("scenes_train")), int(cfg.geti("scenes_val")),
                            int(cfg.geti("scenes_test")), cfg.getf("contrast"),
                            cfg.geti("t_k_us"), cfg.geti("duration_us"),
                            uint64_t(cfg.geti("synth_seed")), cfg.getf("noise_rate"));
}

Precision precision_from(const RunConfig& cfg) {
    const std::string& p = cfg.gets("precision");
    if (p == "f32") return Precision::kF32;
    if (p == "f64") return Precision::kF64;
    throw ConfigError("precision must be f32 or f64, got '" + p + "'");
}

int cmd_voxelize(const RunConfig& cfg, const std::string& in, int64_t tk, int64_t tk1, int n,
                 int bins, const std::string& out) {
    EventStream events = load_events(in);
    SegmentPlan plan{tk, tk1, n};
    plan.validate();
    SplitResult split = split_segments(events, plan);
    const TimeNormalization norm = cfg.gets("time_norm") == "firstlast"
                                       ? TimeNormalization::kFirstLast
                                       : TimeNormalization::kSpan;
    const int64_t H = events.height, W = events.width;
    const int64_t dt = plan.delta_t();
    Tensor packed(Shape{int64_t(n) + 1, int64_t(bins), H, W});
    auto copy_into = [&](const Tensor& grid, int64_t slot) {
        std::copy(grid.data(), grid.data() + grid.numel(),
                  packed.data() + slot * grid.numel());
    };
    copy_into(voxelize(split.reference, bins, plan.t_k - dt, plan.t_k, norm).data, 0);
    for (int i = 1; i <= n; ++i)
        copy_into(voxelize(split.targets[size_t(i - 1)], bins, plan.target_end(i) - dt,
                           plan.target_end(i), norm)
                      .data,
                  i);
    save_tensor(packed, out);
    std::cout << "wrote " << out << " shape (" << n + 1 << "," << bins << "," << H << "," << W
              << ")\n";
    return 0;
}

int cmd_synth(const RunConfig& cfg, const std::string& out_dir) {
    SceneSuite suite = suite_from(cfg);
    const int n = int(cfg.geti("n_targets"));
    export_dataset(suite.train, n, out_dir + "/train");
    export_dataset(suite.val, n, out_dir + "/val");
    export_dataset(suite.test, n, out_dir + "/test");
    std::cout << "dataset written to " << out_dir << " (" << suite.train.size() << " train, "
              << suite.val.size() << " val, " << suite.test.size() << " test)\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& stage, const std::string& data_dir,
              const std::string& init_ckpt, const std::string& out_ckpt,
              const std::string& log_csv) {
    ModelConfig mc = ModelConfig::from_run(cfg);
    FlowModel model(mc);
    if (!init_ckpt.empty()) load_checkpoint(model.params(), init_ckpt);
    TrainOptions opt = TrainOptions::from_run(cfg);

    SceneDataset train_ds = SceneDataset::load(data_dir + "/train", mc);
    std::optional<SceneDataset> val_ds;
    if (fs::exists(data_dir + "/val/manifest.txt"))
        val_ds = SceneDataset::load(data_dir + "/val", mc);

    TrainResult res;
    if (stage == "global") {
        res = train_global(model, train_ds, val_ds ? &*val_ds : nullptr, opt);
    } else if (stage == "residual") {
        if (init_ckpt.empty())
            throw ConfigError("--stage residual requires --init <global checkpoint>");
        NoiseSpec noise;
        noise.pattern = NoiseSpec::pattern_from(cfg.gets("noise"));
        noise.weight = cfg.getf("noise_weight");
        noise.s = int(cfg.geti("noise_s"));
        noise.p_inject = cfg.getf("noise_prob");
        const bool self_sup = cfg.getb("self_supervised");
        res = train_residual(model, train_ds, val_ds ? &*val_ds : nullptr, noise, opt,
                             self_sup);
        if (self_sup && train_ds.gt_reads() != 0)
            throw NumericalError("self-supervised run touched ground-truth files");
    } else {
        throw ConfigError("--stage must be global or residual");
    }
    save_checkpoint(model.params(), out_ckpt);
    if (!log_csv.empty()) write_train_log(res.log, log_csv);
    std::cout << "checkpoint written to " << out_ckpt;
    if (res.final_val_epe >= 0) std::cout << " (val epe " << res.final_val_epe << ")";
    std::cout << "\n";
    return 0;
}

int cmd_infer(const RunConfig& cfg, const std::string& ckpt, const std::string& events_path,
              int64_t tk, int64_t tk1, int freq, const std::string& out_dir) {
    ModelConfig mc = ModelConfig::from_run(cfg);
    FlowModel model(mc);
    load_checkpoint(model.params(), ckpt);
    EventStream events = load_events(events_path);
    SegmentPlan plan{tk, tk1, mc.n_targets};
    plan.validate();
    auto flows = model.infer_htr(events, plan, freq, precision_from(cfg));
    fs::create_directories(out_dir);
    const std::string stem = fs::path(events_path).stem().string();
    int idx = 0;
    for (auto& [t, f] : flows) {
        ++idx;
        save_flow(f, out_dir + "/" + stem + "_flow_" + std::to_string(idx) + ".evfl");
    }
    std::cout << "wrote " << flows.size() << " flow files to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& flow_paths,
             const std::string& events_path, const std::string& gt_dir,
             const std::string& report_csv, const std::string& iwe_dir) {
    EventStream events = load_events(events_path);
    std::vector<FlowField> flows;
    for (const std::string& p : flow_paths) flows.push_back(load_flow(p));
    if (flows.empty()) throw FormatError("eval: no flow files given");
    std::sort(flows.begin(), flows.end(),
              [](const FlowField& a, const FlowField& b) { return a.t_b < b.t_b; });
    const bool signed_iwe = cfg.getb("iwe_signed");
    const std::string scene = fs::path(events_path).stem().string();

    std::vector<MetricRow> rows;
    // per-flow EPE rows when ground truth is available
    if (!gt_dir.empty()) {
        Tensor mask = load_tensor(gt_dir + "/" + scene + "_mask.evtn");
        for (size_t i = 0; i < flows.size(); ++i) {
            const std::string gt_path =
                gt_dir + "/" + scene + "_flow_" + std::to_string(i + 1) + ".evfl";
            if (!fs::exists(gt_path)) continue;
            FlowField gt = load_flow(gt_path);
            MetricRow r;
            r.scene = scene;
            r.t_a = flows[i].t_a;
            r.t_b = flows[i].t_b;
            r.epe = epe(flows[i], gt, mask);
            r.out3 = out3(flows[i], gt, mask);
            rows.push_back(r);
        }
    }
    MetricRow total;
    total.scene = scene + "_overall";
    total.t_a = flows.front().t_a;
    total.t_b = flows.back().t_b;
    total.fwl_ltr = fwl(events, {flows.back()}, WarpMode::kLtrLinear, signed_iwe);
    total.fwl_htr = fwl(events, flows, WarpMode::kHtrPiecewise, signed_iwe);
    rows.push_back(total);
    write_metric_csv(rows, report_csv);

    if (!iwe_dir.empty()) {
        fs::create_directories(iwe_dir);
        Iwe ltr = render_iwe(events, {flows.back()}, WarpMode::kLtrLinear, signed_iwe);
        Iwe htr = render_iwe(events, flows, WarpMode::kHtrPiecewise, signed_iwe);
        save_png16(ltr.image, iwe_dir + "/" + scene + "_iwe_ltr.png");
        save_png16(htr.image, iwe_dir + "/" + scene + "_iwe_htr.png");
        save_tensor(ltr.image, iwe_dir + "/" + scene + "_iwe_ltr.evtn");
        save_tensor(htr.image, iwe_dir + "/" + scene + "_iwe_htr.evtn");
    }
    std::cout << "report written to " << report_csv << " (fwl ltr " << total.fwl_ltr
              << ", htr " << total.fwl_htr << ")\n";
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& out_csv);

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"residual-refined high-temporal-resolution event optical flow"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "configuration file (key = value lines)");
    app.add_option("--set", overrides, "override a config key: --set key=value");

    // voxelize
    auto* vox = app.add_subcommand("voxelize", "split events and write voxel grids");
    std::string vox_in, vox_out;
    int64_t vox_tk = 0, vox_tk1 = 0;
    int vox_n = 5, vox_bins = 2;
    vox->add_option("--in", vox_in)->required();
    vox->add_option("--tk", vox_tk)->required();
    vox->add_option("--tk1", vox_tk1)->required();
    vox->add_option("--n", vox_n);
    vox->add_option("--bins", vox_bins);
    vox->add_option("--out", vox_out)->required();

    // synth
    auto* syn = app.add_subcommand("synth", "generate the synthetic dataset");
    std::string syn_out;
    syn->add_option("--out", syn_out)->required();

    // train
    auto* trn = app.add_subcommand("train", "train the global or residual stage");
    std::string trn_stage, trn_data, trn_init, trn_out, trn_log;
    std::string trn_noise;
    double trn_noise_weight = -1, trn_noise_prob = -1;
    int64_t trn_noise_s = -1;
    bool trn_self_sup = false;
    trn->add_option("--stage", trn_stage)->required();
    trn->add_option("--data", trn_data)->required();
    trn->add_option("--init", trn_init);
    trn->add_option("--out", trn_out)->required();
    trn->add_option("--log", trn_log);
    trn->add_option("--noise", trn_noise, "regional|white|none");
    trn->add_option("--noise-weight", trn_noise_weight);
    trn->add_option("--noise-s", trn_noise_s);
    trn->add_option("--noise-prob", trn_noise_prob);
    trn->add_flag("--self-supervised", trn_self_sup);

    // infer
    auto* inf = app.add_subcommand("infer", "estimate flows at q x N timestamps");
    std::string inf_ckpt, inf_events, inf_out;
    int64_t inf_tk = 0, inf_tk1 = 0;
    int inf_freq = 1;
    inf->add_option("--ckpt", inf_ckpt)->required();
    inf->add_option("--events", inf_events)->required();
    inf->add_option("--tk", inf_tk)->required();
    inf->add_option("--tk1", inf_tk1)->required();
    inf->add_option("--freq", inf_freq);
    inf->add_option("--out", inf_out)->required();

    // eval
    auto* evl = app.add_subcommand("eval", "metric report and IWE images");
    std::vector<std::string> evl_flows;
    std::string evl_events, evl_gt, evl_report, evl_iwe;
    evl->add_option("--flows", evl_flows)->required();
    evl->add_option("--events", evl_events)->required();
    evl->add_option("--gt", evl_gt);
    evl->add_option("--report", evl_report)->required();
    evl->add_option("--iwe-dir", evl_iwe);

    // ablate
    auto* abl = app.add_subcommand("ablate", "run the noise/transform ablation grid");
    std::string abl_data, abl_out;
    abl->add_option("--data", abl_data)->required();
    abl->add_option("--out", abl_out)->required();

    for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_config(config_path, overrides);
        if (vox->parsed())
            return cmd_voxelize(cfg, vox_in, vox_tk, vox_tk1, vox_n, vox_bins, vox_out);
        if (syn->parsed()) return cmd_synth(cfg, syn_out);
        if (trn->parsed()) {
            if (!trn_noise.empty()) cfg.set("noise", trn_noise);
            if (trn_noise_weight >= 0) cfg.set("noise_weight", std::to_string(trn_noise_weight));
            if (trn_noise_s >= 0) cfg.set("noise_s", std::to_string(trn_noise_s));
            if (trn_noise_prob >= 0) cfg.set("noise_prob", std::to_string(trn_noise_prob));
            if (trn_self_sup) cfg.set("self_supervised", "true");
            return cmd_train(cfg, trn_stage, trn_data, trn_init, trn_out, trn_log);
        }
        if (inf->parsed())
            return cmd_infer(cfg, inf_ckpt, inf_events, inf_tk, inf_tk1, inf_freq, inf_out);
        if (evl->parsed())
            return cmd_eval(cfg, evl_flows, evl_events, evl_gt, evl_report, evl_iwe);
        if (abl->parsed()) return cmd_ablate(cfg, abl_data, abl_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    }
    return 0;
}

namespace {

// Ablation arms: velocity transform and noise pattern/weight combinations,
// plus the self-supervised arm, each trained from the same global
// checkpoint and scored on the test split.
int cmd_ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& out_csv) {
    struct Arm {
        std::string name;
        bool vt;
        std::string pattern;
        double weight;
        bool self_sup;
    };
    const std::vector<Arm> arms = {
        {"vt_off_no_noise", false, "none", 0.0, false},
        {"vt_on_no_noise", true, "none", 0.0, false},
        {"vt_on_regional_0.1", true, "regional", 0.1, false},
        {"vt_on_regional_0.3", true, "regional", 0.3, false},
        {"vt_on_regional_0.5", true, "regional", 0.5, false},
        {"vt_off_regional_0.3", false, "regional", 0.3, false},
        {"vt_on_white_0.3", true, "white", 0.3, false},
        {"self_gt_regional_0.3", true, "regional", 0.3, true},
    };

    ModelConfig mc = ModelConfig::from_run(cfg);
    TrainOptions opt = TrainOptions::from_run(cfg);
    SceneDataset train_ds = SceneDataset::load(data_dir + "/train", mc);
    SceneDataset test_ds = SceneDataset::load(data_dir + "/test", mc);

    // one shared global stage
    FlowModel global_model(mc);
    TrainResult gres = train_global(global_model, train_ds, nullptr, opt);
    const std::string gckpt = out_csv + ".global.evck";
    save_checkpoint(global_model.params(), gckpt);

    std::ofstream os(out_csv);
    if (!os) throw IoError("cannot write " + out_csv);
    os << "arm,config_hash,velocity_transform,noise,weight,self_supervised,epe,fwl\n";
    for (const Arm& arm : arms) {
        ModelConfig amc = mc;
        amc.velocity_transform = arm.vt;
        FlowModel model(amc);
        load_checkpoint(model.params(), gckpt);
        NoiseSpec noise;
        noise.pattern = NoiseSpec::pattern_from(arm.pattern);
        noise.weight = arm.weight;
        noise.s = int(cfg.geti("noise_s"));
        noise.p_inject = cfg.getf("noise_prob");
        train_residual(model, train_ds, nullptr, noise, opt, arm.self_sup);

        double epe_acc = 0, fwl_acc = 0;
        for (size_t i = 0; i < test_ds.size(); ++i) {
            const SegmentPlan& plan = test_ds.plan(i);
            EventStream events =
                load_events(data_dir + "/test/" + test_ds.name(i) + ".evs");
            auto flows = model.infer_htr(events, plan, 1, Precision::kF64);
            const Tensor mask = test_ds.gt_mask(i);
            double scene_epe = 0;
            int counted = 0;
            for (int n = 1; n <= plan.n_targets; ++n) {
                FlowField gt = load_flow(data_dir + "/test/" + test_ds.name(i) + "_flow_" +
                                         std::to_string(n) + ".evfl");
                scene_epe += epe(flows[size_t(n - 1)].second, gt, mask);
                ++counted;
            }
            epe_acc += scene_epe / double(counted);
            std::vector<FlowField> flow_seq;
            for (auto& [t, f] : flows) flow_seq.push_back(f);
            fwl_acc += fwl(events, flow_seq, WarpMode::kHtrPiecewise);
        }
        const size_t hash = std::hash<std::string>{}(
            arm.name + std::to_string(arm.weight) + (arm.vt ? "v1" : "v0") +
            (arm.self_sup ? "s1" : "s0") + arm.pattern);
        os << arm.name << "," << std::hex << hash << std::dec << "," << (arm.vt ? 1 : 0)
           << "," << arm.pattern << "," << arm.weight << "," << (arm.self_sup ? 1 : 0) << ","
           << epe_acc / double(test_ds.size()) << "," << fwl_acc / double(test_ds.size())
           << "\n";
        os.flush();
    }
    std::cout << "ablation table written to " << out_csv << "\n";
    return 0;
}

} // namespace
