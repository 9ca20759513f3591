#include "tfd/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tfd/checkpoint.hpp"
#include "tfd/eval.hpp"
#include "tfd/infer.hpp"
#include "tfd/model.hpp"
#include "tfd/rawsim.hpp"
#include "tfd/toydata.hpp"
#include "tfd/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tfd {
namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    json j;
    in >> j;
    return j;
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << j.dump(2) << "\n";
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- train config (strict keys) ----

StageSpec stage_from_json(const json& j) {
    StageSpec s;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "w_bits") s.w_bits = it.value().get<int>();
        else if (k == "a_bits") s.a_bits = it.value().get<int>();
        else if (k == "ternary") s.ternary = it.value().get<bool>();
        else if (k == "epochs") s.epochs = it.value().get<int>();
        else throw std::invalid_argument("train config: unknown stage key '" + k + "'");
    }
    return s;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c = default_train_config();
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "schedule") {
            c.schedule.clear();
            for (const json& sj : it.value()) c.schedule.push_back(stage_from_json(sj));
        } else if (k == "batch_size") c.batch_size = it.value().get<int>();
        else if (k == "base_lr") c.base_lr = it.value().get<double>();
        else if (k == "min_lr") c.min_lr = it.value().get<double>();
        else if (k == "warmup_frac") c.warmup_frac = it.value().get<double>();
        else if (k == "momentum") c.momentum = it.value().get<double>();
        else if (k == "weight_decay") c.weight_decay = it.value().get<double>();
        else if (k == "sam_rho") c.sam.rho = it.value().get<float>();
        else if (k == "neg_pos_ratio") c.neg_pos_ratio = it.value().get<int>();
        else if (k == "ema_momentum") c.ema_momentum = it.value().get<float>();
        else if (k == "seed") c.seed = it.value().get<uint64_t>();
        else if (k == "match") {
            for (auto mit = it.value().begin(); mit != it.value().end(); ++mit) {
                const std::string& mk = mit.key();
                if (mk == "iou_pos") c.match.iou_pos = mit.value().get<float>();
                else if (mk == "iou_neg") c.match.iou_neg = mit.value().get<float>();
                else if (mk == "variance_center") c.match.variance_center = mit.value().get<float>();
                else if (mk == "variance_size") c.match.variance_size = mit.value().get<float>();
                else throw std::invalid_argument("train config: unknown match key '" + mk + "'");
            }
        } else {
            throw std::invalid_argument("train config: unknown key '" + k + "'");
        }
    }
    c.validate();
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    json stages = json::array();
    for (const StageSpec& s : c.schedule)
        stages.push_back({{"w_bits", s.w_bits},
                          {"a_bits", s.a_bits},
                          {"ternary", s.ternary},
                          {"epochs", s.epochs}});
    return json{{"schedule", stages},
                {"batch_size", c.batch_size},
                {"base_lr", c.base_lr},
                {"min_lr", c.min_lr},
                {"warmup_frac", c.warmup_frac},
                {"momentum", c.momentum},
                {"weight_decay", c.weight_decay},
                {"sam_rho", c.sam.rho},
                {"neg_pos_ratio", c.neg_pos_ratio},
                {"ema_momentum", c.ema_momentum},
                {"seed", c.seed},
                {"match",
                 {{"iou_pos", c.match.iou_pos},
                  {"iou_neg", c.match.iou_neg},
                  {"variance_center", c.match.variance_center},
                  {"variance_size", c.match.variance_size}}}};
}

// "-" separated forms: "8" (W8A8), "4,3" (W4A3), "ternary" (A3), "ternary,4".
StageTag parse_bits(const std::string& s) {
    StageTag t;
    std::string head = s, tail;
    if (auto pos = s.find(','); pos != std::string::npos) {
        head = s.substr(0, pos);
        tail = s.substr(pos + 1);
    }
    auto to_bits = [&](const std::string& v) {
        size_t used = 0;
        int b = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument("bad bit spec '" + s + "'");
        return b;
    };
    if (head == "ternary") {
        t.ternary = true;
        t.w_bits = 2;
        t.a_bits = tail.empty() ? 3 : to_bits(tail);
    } else {
        t.w_bits = to_bits(head);
        t.a_bits = tail.empty() ? t.w_bits : to_bits(tail);
    }
    return t;
}

std::string bits_to_string(const StageTag& t) {
    if (t.w_bits == kQuantDisabled) return "float";
    if (t.ternary) return "ternary," + std::to_string(t.a_bits);
    return std::to_string(t.w_bits) + "," + std::to_string(t.a_bits);
}

std::string precision_label(const StageTag& t) {
    if (t.w_bits == kQuantDisabled) return "fp32";
    if (t.ternary) return "ternary-a" + std::to_string(t.a_bits);
    return "w" + std::to_string(t.w_bits) + "a" + std::to_string(t.a_bits);
}

NoiseParams noise_from_json(const json& j) {
    NoiseParams n;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "gain") n.gain = it.value().get<double>();
        else if (k == "gauss_sigma") n.gauss_sigma = it.value().get<double>();
        else if (k == "literal_formula") n.literal_formula = it.value().get<bool>();
        else throw std::invalid_argument("noise config: unknown key '" + k + "'");
    }
    return n;
}

Tensor calibration_batch(const Dataset& data, int batch_size, int stride) {
    int B = std::min<int>(batch_size, int(data.samples.size()));
    Tensor first = raw_to_input(data.samples[0].raw, stride);
    Tensor batch(Shape{{B, 1, first.shape[2], first.shape[3]}});
    for (int b = 0; b < B; ++b) {
        Tensor one = raw_to_input(data.samples[size_t(b)].raw, stride);
        std::copy(one.data.begin(), one.data.end(), batch.data.begin() + b * one.numel());
    }
    return batch;
}

std::vector<AnnotatedImage> load_sources(const std::string& image_dir,
                                         const std::string& annotations_path) {
    std::vector<AnnotatedImage> out;
    for (const auto& r : load_annotations(annotations_path)) {
        AnnotatedImage a;
        a.image = to_float(load_image((fs::path(image_dir) / r.file).string()));
        a.boxes = r.boxes;
        a.source_id = r.id;
        out.push_back(std::move(a));
    }
    return out;
}

// Base synthesis settings a corpus was generated with, for variant re-runs.
struct CorpusRecipe {
    SynthConfig cfg;
    NoiseParams noise;
    std::string image_dir;
    std::string annotations;
    uint64_t seed = 1;
};

CorpusRecipe recipe_from_manifest(const std::string& data_dir) {
    json m = load_json_file((fs::path(data_dir) / "manifest.json").string());
    std::string kind = m.at("kind").get<std::string>();
    CorpusRecipe r;
    if (kind == "synth_corpus") {
        r.cfg = synth_config_from_json_string(m.at("config").dump());
        r.noise = noise_from_json(m.at("noise"));
        r.image_dir = m.at("image_dir").get<std::string>();
        r.annotations = m.at("source_annotations").get<std::string>();
        r.seed = m.at("master_seed").get<uint64_t>();
    } else if (kind == "toy_corpus") {
        ToyConfig tc = toy_config_from_json_string(m.at("config").dump());
        r.cfg.target_w = tc.width;
        r.cfg.target_h = tc.height;
        r.cfg.ratio_min = tc.ratio_min;
        r.cfg.ratio_max = tc.ratio_max;
        r.cfg.rotate_right = false;
        r.noise = tc.noise;
        r.image_dir = m.at("image_dir").get<std::string>();
        if (r.image_dir.empty())
            throw std::runtime_error("toy corpus was generated without keep_sources; "
                                     "subset evaluation needs the sRGB sources");
        r.annotations = (fs::path(r.image_dir) / "annotations.jsonl").string();
        r.seed = tc.seed;
    } else {
        throw std::runtime_error(data_dir + ": manifest kind '" + kind +
                                 "' is not a corpus manifest");
    }
    return r;
}

// ---- commands ----

struct SynthOpts {
    std::string images, annotations, out;
    SynthConfig cfg;
    NoiseParams noise;
    uint64_t seed = 1;
};

int cmd_synth(const SynthOpts& o) {
    int n = synthesize_corpus(o.images, o.annotations, o.cfg, o.noise, o.seed, o.out);
    if (n == 0) std::cerr << "warning: empty corpus\n";
    std::cout << "synth: " << n << " raw frames -> " << o.out << "\n";
    return 0;
}

struct ToygenOpts {
    std::string out;
    ToyConfig cfg;
};

int cmd_toygen(const ToygenOpts& o) {
    generate_toy_corpus(o.cfg, o.out);
    std::cout << "toygen: " << o.cfg.count << " raw frames -> " << o.out << "\n";
    return 0;
}

struct TrainOpts {
    std::string data, out;
    ArchConfig arch;
    TrainConfig cfg;
};

int cmd_train(const TrainOpts& o) {
    Dataset data = load_raw_dataset(o.data);
    NetworkGraph g = build_network(o.arch);
    fs::create_directories(o.out);

    std::ofstream log(fs::path(o.out) / "log.csv");
    if (!log) throw std::runtime_error(o.out + ": cannot write log.csv");

    struct StageFile {
        std::string tag, file;
    };
    std::vector<StageFile> files;
    StageSpec last_spec;
    bool have_stage = false;
    StageSink sink = [&](int idx, const StageSpec& spec, const NetworkGraph& sg) {
        std::string file = "stage_" + std::to_string(idx) + "_" + spec.tag() + ".ckpt";
        StageTag tag{spec.w_bits, spec.a_bits, spec.ternary};
        save_checkpoint((fs::path(o.out) / file).string(), sg, o.arch, tag, false);
        files.push_back({spec.tag(), file});
        last_spec = spec;
        have_stage = true;
    };

    auto results = train_qat(g, o.arch, data, o.cfg, &log, sink);

    json stages = json::array();
    bool aborted = false;
    for (size_t i = 0; i < results.size(); ++i) {
        const StageResult& r = results[i];
        aborted = aborted || r.aborted;
        stages.push_back({{"tag", r.spec.tag()},
                          {"final_loss", r.final_loss},
                          {"aborted", r.aborted},
                          {"steps", r.steps},
                          {"file", i < files.size() ? files[i].file : ""}});
    }
    std::string final_file;
    if (have_stage && !aborted) {
        final_file = "final.ckpt";
        StageTag tag{last_spec.w_bits, last_spec.a_bits, last_spec.ternary};
        save_checkpoint((fs::path(o.out) / final_file).string(), g, o.arch, tag,
                        last_spec.ternary);
    }
    write_json_file(json{{"kind", "train_run"},
                         {"data", o.data},
                         {"arch", json::parse(arch_config_to_json_string(o.arch))},
                         {"config", train_config_to_json(o.cfg)},
                         {"stages", stages},
                         {"log", "log.csv"},
                         {"final", final_file}},
                    (fs::path(o.out) / "manifest.json").string());

    for (const StageResult& r : results)
        std::cout << "stage " << r.spec.tag() << ": loss " << r.final_loss << " over " << r.steps
                  << " steps" << (r.aborted ? " [aborted]" : "") << "\n";
    if (aborted) throw NumericError("training aborted on non-finite loss");
    return 0;
}

struct QuantizeOpts {
    std::string checkpoint, data, out;
    StageTag bits;
    int batch_size = 16;
};

int cmd_quantize(const QuantizeOpts& o) {
    Checkpoint c = load_checkpoint(o.checkpoint);
    if (c.stage.w_bits != kQuantDisabled)
        throw std::runtime_error("quantize expects a float checkpoint, got " +
                                 precision_label(c.stage));
    Dataset data = load_raw_dataset(o.data);
    set_quantization(c.graph, o.bits.w_bits, o.bits.a_bits, o.bits.ternary);
    calibrate_quantizers(c.graph, calibration_batch(data, o.batch_size, c.arch.stride));
    save_checkpoint(o.out, c.graph, c.arch, o.bits, o.bits.ternary);
    write_json_file(json{{"kind", "quantize_run"},
                         {"checkpoint", o.checkpoint},
                         {"data", o.data},
                         {"bits", bits_to_string(o.bits)},
                         {"batch_size", o.batch_size},
                         {"out", o.out}},
                    o.out + ".manifest.json");
    std::cout << "quantize: " << precision_label(o.bits) << " -> " << o.out << "\n";
    return 0;
}

struct FoldOpts {
    std::string checkpoint, out;
};

int cmd_fold(const FoldOpts& o) {
    Checkpoint c = load_checkpoint(o.checkpoint);
    NetworkGraph folded = fold_bn(c.graph);
    save_checkpoint(o.out, folded, c.arch, c.stage, c.stage.ternary);
    write_json_file(
        json{{"kind", "fold_run"}, {"checkpoint", o.checkpoint}, {"out", o.out}},
        o.out + ".manifest.json");
    std::cout << "fold: " << o.checkpoint << " -> " << o.out << "\n";
    return 0;
}

struct InferOpts {
    std::string checkpoint, input, out;
    DetectParams dp;
};

int cmd_infer(const InferOpts& o) {
    Checkpoint c = load_checkpoint(o.checkpoint);
    IntegerNetwork net;
    const IntegerNetwork* ip = nullptr;
    if (o.dp.engine == Engine::kInteger) {
        net = freeze_integer(c.graph);
        ip = &net;
    }
    std::vector<std::string> inputs;
    if (fs::is_directory(o.input)) {
        for (const auto& e : fs::directory_iterator(o.input))
            if (e.path().extension() == ".pgm") inputs.push_back(e.path().string());
        std::sort(inputs.begin(), inputs.end());
        if (inputs.empty()) throw std::runtime_error(o.input + ": no .pgm files");
    } else {
        inputs.push_back(o.input);
    }
    std::vector<DetectionRecord> recs;
    for (const std::string& path : inputs) {
        Image8 raw = load_pnm(path);
        recs.push_back({fs::path(path).filename().string(), detect(c.graph, ip, c.arch, raw, o.dp)});
    }
    save_detections(recs, o.out);
    write_json_file(json{{"kind", "detections"},
                         {"checkpoint", o.checkpoint},
                         {"input", o.input},
                         {"engine", engine_to_string(o.dp.engine)},
                         {"score_thresh", o.dp.score_thresh},
                         {"iou_thresh", o.dp.iou_thresh},
                         {"max_keep", o.dp.max_keep},
                         {"out", o.out}},
                    o.out + ".manifest.json");
    size_t total = 0;
    for (const auto& r : recs) total += r.dets.size();
    std::cout << "infer[" << engine_to_string(o.dp.engine) << "]: " << total
              << " detections over " << recs.size() << " frames -> " << o.out << "\n";
    return 0;
}

struct EvalOpts {
    std::string checkpoint, data, out, name;
    DetectParams dp;
    double fp_thresh = 0.5;
    bool subsets = false;
    uint64_t seed = 1;
};

int cmd_eval(const EvalOpts& o) {
    Checkpoint c = load_checkpoint(o.checkpoint);
    Dataset data = load_raw_dataset(o.data);
    IntegerNetwork net;
    const IntegerNetwork* ip = nullptr;
    if (o.dp.engine == Engine::kInteger) {
        net = freeze_integer(c.graph);
        ip = &net;
    }

    EvalReport rep;
    std::vector<std::vector<Detection>> dets(data.samples.size());
    std::vector<std::vector<BoxXYWH>> gts(data.samples.size());
    for (size_t i = 0; i < data.samples.size(); ++i) {
        dets[i] = detect(c.graph, ip, c.arch, data.samples[i].raw, o.dp);
        gts[i] = data.samples[i].boxes;
        rep.detections.push_back({data.samples[i].id + ".pgm", dets[i]});
    }
    rep.ap50 = average_precision(dets, gts, 0.50);
    rep.ap75 = average_precision(dets, gts, 0.75);
    rep.ap90 = average_precision(dets, gts, 0.90);

    std::vector<std::vector<Detection>> faceless;
    for (size_t i = 0; i < gts.size(); ++i)
        if (gts[i].empty()) faceless.push_back(dets[i]);
    if (!faceless.empty()) rep.fp_rate = false_positive_rate(faceless, o.fp_thresh);

    if (o.subsets) {
        CorpusRecipe rec = recipe_from_manifest(o.data);
        auto sources = load_sources(rec.image_dir, rec.annotations);
        rep.ap_small = subset_eval(c.graph, c.arch, sources, rec.cfg, rec.noise,
                                   SubsetVariant::kSmall, o.seed, o.dp, ip);
        rep.ap_noisy = subset_eval(c.graph, c.arch, sources, rec.cfg, rec.noise,
                                   SubsetVariant::kNoisy, o.seed, o.dp, ip);
        rep.ap_backlight = subset_eval(c.graph, c.arch, sources, rec.cfg, rec.noise,
                                       SubsetVariant::kBacklight, o.seed, o.dp, ip);
    }

    int wb = c.stage.w_bits == kQuantDisabled ? 32 : c.stage.w_bits;
    int ab = c.stage.a_bits == kQuantDisabled ? 32 : c.stage.a_bits;
    CostReport cost = cost_report(c.graph, c.arch, wb, ab);

    json out{{"report", json::parse(to_json(rep))}, {"cost", json::parse(to_json(cost))}};
    if (!o.out.empty()) write_json_file(out, o.out);

    std::string name = o.name.empty() ? fs::path(o.checkpoint).stem().string() : o.name;
    std::cout << render_table({TableRow{name, precision_label(c.stage), rep, cost}});

    if (!o.out.empty())
        write_json_file(json{{"kind", "eval_run"},
                             {"checkpoint", o.checkpoint},
                             {"data", o.data},
                             {"engine", engine_to_string(o.dp.engine)},
                             {"score_thresh", o.dp.score_thresh},
                             {"iou_thresh", o.dp.iou_thresh},
                             {"max_keep", o.dp.max_keep},
                             {"fp_thresh", o.fp_thresh},
                             {"subsets", o.subsets},
                             {"seed", o.seed},
                             {"name", o.name},
                             {"out", o.out}},
                        o.out + ".manifest.json");
    return 0;
}

struct RenderOpts {
    std::string detections, images, out, gt;
    double score_thresh = 0.5;
};

int cmd_render(const RenderOpts& o) {
    auto recs = load_detections(o.detections);
    std::vector<AnnotationRecord> gt_recs;
    if (!o.gt.empty()) gt_recs = load_annotations(o.gt);
    fs::create_directories(o.out);

    for (const auto& r : recs) {
        Image8 img = load_image((fs::path(o.images) / r.file).string());
        if (img.channels == 1) {
            Image8 rgb;
            rgb.width = img.width;
            rgb.height = img.height;
            rgb.channels = 3;
            rgb.pix.resize(img.pix.size() * 3);
            for (size_t i = 0; i < img.pix.size(); ++i)
                rgb.pix[3 * i] = rgb.pix[3 * i + 1] = rgb.pix[3 * i + 2] = img.pix[i];
            img = std::move(rgb);
        }
        for (const auto& g : gt_recs)
            if (g.file == r.file || g.id + ".pgm" == r.file)
                for (const BoxXYWH& b : g.boxes)
                    draw_box(img, b.x, b.y, b.x2(), b.y2(), {0, 255, 0});
        for (const Detection& d : r.dets)
            if (d.score >= o.score_thresh)
                draw_box(img, d.x1, d.y1, d.x2, d.y2, {255, 0, 0});
        std::string stem = fs::path(r.file).stem().string();
        save_png(img, (fs::path(o.out) / (stem + ".png")).string());
    }
    write_json_file(json{{"kind", "render_run"},
                         {"detections", o.detections},
                         {"images", o.images},
                         {"gt", o.gt},
                         {"score_thresh", o.score_thresh},
                         {"out", o.out}},
                    (fs::path(o.out) / "manifest.json").string());
    std::cout << "render: " << recs.size() << " frames -> " << o.out << "\n";
    return 0;
}

int cmd_replay(const std::string& manifest_path, const std::string& out_override) {
    json m = load_json_file(manifest_path);
    std::string kind = m.at("kind").get<std::string>();
    std::string host_dir = fs::path(manifest_path).parent_path().string();

    if (kind == "synth_corpus") {
        SynthOpts o;
        o.images = m.at("image_dir").get<std::string>();
        o.annotations = m.at("source_annotations").get<std::string>();
        o.out = out_override.empty() ? host_dir : out_override;
        o.cfg = synth_config_from_json_string(m.at("config").dump());
        o.noise = noise_from_json(m.at("noise"));
        o.seed = m.at("master_seed").get<uint64_t>();
        return cmd_synth(o);
    }
    if (kind == "toy_corpus") {
        ToygenOpts o;
        o.cfg = toy_config_from_json_string(m.at("config").dump());
        o.out = out_override.empty() ? host_dir : out_override;
        return cmd_toygen(o);
    }
    if (kind == "train_run") {
        TrainOpts o;
        o.data = m.at("data").get<std::string>();
        o.out = out_override.empty() ? host_dir : out_override;
        o.arch = arch_config_from_json_string(m.at("arch").dump());
        o.cfg = train_config_from_json(m.at("config"));
        return cmd_train(o);
    }
    if (kind == "quantize_run") {
        QuantizeOpts o;
        o.checkpoint = m.at("checkpoint").get<std::string>();
        o.data = m.at("data").get<std::string>();
        o.bits = parse_bits(m.at("bits").get<std::string>());
        o.batch_size = m.at("batch_size").get<int>();
        o.out = out_override.empty() ? m.at("out").get<std::string>() : out_override;
        return cmd_quantize(o);
    }
    if (kind == "fold_run") {
        FoldOpts o;
        o.checkpoint = m.at("checkpoint").get<std::string>();
        o.out = out_override.empty() ? m.at("out").get<std::string>() : out_override;
        return cmd_fold(o);
    }
    if (kind == "detections") {
        InferOpts o;
        o.checkpoint = m.at("checkpoint").get<std::string>();
        o.input = m.at("input").get<std::string>();
        o.dp.engine = engine_from_string(m.at("engine").get<std::string>());
        o.dp.score_thresh = m.at("score_thresh").get<double>();
        o.dp.iou_thresh = m.at("iou_thresh").get<double>();
        o.dp.max_keep = m.at("max_keep").get<int>();
        o.out = out_override.empty() ? m.at("out").get<std::string>() : out_override;
        return cmd_infer(o);
    }
    if (kind == "eval_run") {
        EvalOpts o;
        o.checkpoint = m.at("checkpoint").get<std::string>();
        o.data = m.at("data").get<std::string>();
        o.dp.engine = engine_from_string(m.at("engine").get<std::string>());
        o.dp.score_thresh = m.at("score_thresh").get<double>();
        o.dp.iou_thresh = m.at("iou_thresh").get<double>();
        o.dp.max_keep = m.at("max_keep").get<int>();
        o.fp_thresh = m.at("fp_thresh").get<double>();
        o.subsets = m.at("subsets").get<bool>();
        o.seed = m.at("seed").get<uint64_t>();
        o.name = m.at("name").get<std::string>();
        o.out = out_override.empty() ? m.at("out").get<std::string>() : out_override;
        return cmd_eval(o);
    }
    if (kind == "render_run") {
        RenderOpts o;
        o.detections = m.at("detections").get<std::string>();
        o.images = m.at("images").get<std::string>();
        o.gt = m.at("gt").get<std::string>();
        o.score_thresh = m.at("score_thresh").get<double>();
        o.out = out_override.empty() ? host_dir : out_override;
        return cmd_render(o);
    }
    throw std::runtime_error(manifest_path + ": unknown manifest kind '" + kind + "'");
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"RAW-domain always-on face detector toolkit"};
    app.require_subcommand(1);
    std::function<int()> action;

    // ---- synth ----
    auto* syn = app.add_subcommand("synth", "reverse-ISP a labeled sRGB corpus into RAW frames");
    auto syn_o = std::make_shared<SynthOpts>();
    auto syn_cfg = std::make_shared<std::string>();
    auto syn_gain = std::make_shared<std::optional<double>>();
    auto syn_sigma = std::make_shared<std::optional<double>>();
    auto syn_literal = std::make_shared<bool>(false);
    syn->add_option("--images", syn_o->images, "sRGB source directory")->required();
    syn->add_option("--annotations", syn_o->annotations, "JSONL box annotations")->required();
    syn->add_option("--out", syn_o->out, "output corpus directory")->required();
    syn->add_option("--config", *syn_cfg, "synthesis config JSON");
    syn->add_option("--seed", syn_o->seed, "master seed");
    syn->add_option("--gain", *syn_gain, "Poisson gain override");
    syn->add_option("--gauss-sigma", *syn_sigma, "Gaussian sigma override");
    syn->add_flag("--literal-noise", *syn_literal, "Poisson(gain*y)/gain noise variant");
    syn->callback([=, &action]() {
        action = [=]() {
            SynthOpts o = *syn_o;
            if (!syn_cfg->empty()) o.cfg = synth_config_from_json_file(*syn_cfg);
            if (*syn_gain) o.noise.gain = **syn_gain;
            if (*syn_sigma) o.noise.gauss_sigma = **syn_sigma;
            o.noise.literal_formula = *syn_literal;
            return cmd_synth(o);
        };
    });

    // ---- toygen ----
    auto* toy = app.add_subcommand("toygen", "generate the blob-face RAW fixture corpus");
    auto toy_out = std::make_shared<std::string>();
    auto toy_cfg = std::make_shared<std::string>();
    auto toy_count = std::make_shared<std::optional<int>>();
    auto toy_seed = std::make_shared<std::optional<uint64_t>>();
    auto toy_nosrc = std::make_shared<bool>(false);
    toy->add_option("--out", *toy_out, "output corpus directory")->required();
    toy->add_option("--config", *toy_cfg, "toy corpus config JSON");
    toy->add_option("--count", *toy_count, "number of frames");
    toy->add_option("--seed", *toy_seed, "master seed");
    toy->add_flag("--no-sources", *toy_nosrc, "skip writing the sRGB scenes");
    toy->callback([=, &action]() {
        action = [=]() {
            ToygenOpts o;
            o.out = *toy_out;
            if (!toy_cfg->empty()) o.cfg = toy_config_from_json_string(read_text_file(*toy_cfg));
            if (*toy_count) o.cfg.count = **toy_count;
            if (*toy_seed) o.cfg.seed = **toy_seed;
            if (*toy_nosrc) o.cfg.keep_sources = false;
            return cmd_toygen(o);
        };
    });

    // ---- train ----
    auto* trn = app.add_subcommand("train", "run the progressive quantization schedule");
    auto trn_data = std::make_shared<std::string>();
    auto trn_out = std::make_shared<std::string>();
    auto trn_cfg = std::make_shared<std::string>();
    auto trn_arch = std::make_shared<std::string>();
    auto trn_seed = std::make_shared<std::optional<uint64_t>>();
    auto trn_rho = std::make_shared<std::optional<double>>();
    trn->add_option("--data", *trn_data, "RAW corpus directory")->required();
    trn->add_option("--out", *trn_out, "run output directory")->required();
    trn->add_option("--config", *trn_cfg, "training config JSON");
    trn->add_option("--arch", *trn_arch, "architecture config JSON");
    trn->add_option("--seed", *trn_seed, "run seed override");
    trn->add_option("--rho", *trn_rho, "sharpness perturbation radius override");
    trn->callback([=, &action]() {
        action = [=]() {
            TrainOpts o;
            o.data = *trn_data;
            o.out = *trn_out;
            o.arch = trn_arch->empty() ? default_arch_config() : arch_config_from_file(*trn_arch);
            o.cfg = trn_cfg->empty() ? default_train_config()
                                     : train_config_from_json(load_json_file(*trn_cfg));
            if (*trn_seed) o.cfg.seed = **trn_seed;
            if (*trn_rho) o.cfg.sam.rho = float(**trn_rho);
            return cmd_train(o);
        };
    });

    // ---- quantize ----
    auto* qnt = app.add_subcommand("quantize",
                                   "attach and calibrate quantizers on a float checkpoint");
    auto qnt_o = std::make_shared<QuantizeOpts>();
    auto qnt_bits = std::make_shared<std::string>();
    qnt->add_option("--checkpoint", qnt_o->checkpoint, "input checkpoint")->required();
    qnt->add_option("--data", qnt_o->data, "calibration corpus directory")->required();
    qnt->add_option("--out", qnt_o->out, "output checkpoint")->required();
    qnt->add_option("--bits", *qnt_bits, "W[,A] bit spec: 8 | 4,4 | ternary[,A]")->required();
    qnt->add_option("--batch-size", qnt_o->batch_size, "calibration batch size");
    qnt->callback([=, &action]() {
        action = [=]() {
            QuantizeOpts o = *qnt_o;
            o.bits = parse_bits(*qnt_bits);
            return cmd_quantize(o);
        };
    });

    // ---- fold ----
    auto* fld = app.add_subcommand("fold", "fold batch-norm into conv weights and biases");
    auto fld_o = std::make_shared<FoldOpts>();
    fld->add_option("--checkpoint", fld_o->checkpoint, "input checkpoint")->required();
    fld->add_option("--out", fld_o->out, "output checkpoint")->required();
    fld->callback([=, &action]() {
        action = [=]() { return cmd_fold(*fld_o); };
    });

    // ---- infer ----
    auto* inf = app.add_subcommand("infer", "detect faces in RAW frames, dump JSONL boxes");
    auto inf_o = std::make_shared<InferOpts>();
    auto inf_engine = std::make_shared<std::string>("float");
    inf->add_option("--checkpoint", inf_o->checkpoint, "checkpoint")->required();
    inf->add_option("--input", inf_o->input, "PGM file or directory")->required();
    inf->add_option("--out", inf_o->out, "detection JSONL path")->required();
    inf->add_option("--engine", *inf_engine, "float | fakequant | integer");
    inf->add_option("--score-thresh", inf_o->dp.score_thresh, "detection score threshold");
    inf->add_option("--iou-thresh", inf_o->dp.iou_thresh, "NMS IoU threshold");
    inf->add_option("--max-keep", inf_o->dp.max_keep, "max detections per frame");
    inf->callback([=, &action]() {
        action = [=]() {
            InferOpts o = *inf_o;
            o.dp.engine = engine_from_string(*inf_engine);
            return cmd_infer(o);
        };
    });

    // ---- eval ----
    auto* evl = app.add_subcommand("eval", "score a checkpoint on a labeled RAW corpus");
    auto evl_o = std::make_shared<EvalOpts>();
    auto evl_engine = std::make_shared<std::string>("float");
    evl_o->dp.score_thresh = 0.05; // keep the PR curve's low-score tail
    evl->add_option("--checkpoint", evl_o->checkpoint, "checkpoint")->required();
    evl->add_option("--data", evl_o->data, "labeled RAW corpus directory")->required();
    evl->add_option("--out", evl_o->out, "report JSON path");
    evl->add_option("--engine", *evl_engine, "float | fakequant | integer");
    evl->add_option("--score-thresh", evl_o->dp.score_thresh, "detection score threshold");
    evl->add_option("--fp-thresh", evl_o->fp_thresh, "score threshold for the FP rate");
    evl->add_flag("--subsets", evl_o->subsets, "also score small/noisy/backlight variants");
    evl->add_option("--seed", evl_o->seed, "seed for variant synthesis");
    evl->add_option("--name", evl_o->name, "table row label");
    evl->callback([=, &action]() {
        action = [=]() {
            EvalOpts o = *evl_o;
            o.dp.engine = engine_from_string(*evl_engine);
            return cmd_eval(o);
        };
    });

    // ---- render ----
    auto* rnd = app.add_subcommand("render", "burn detection boxes into PNGs");
    auto rnd_o = std::make_shared<RenderOpts>();
    rnd->add_option("--detections", rnd_o->detections, "detection JSONL")->required();
    rnd->add_option("--images", rnd_o->images, "image directory the detections refer to")
        ->required();
    rnd->add_option("--out", rnd_o->out, "output PNG directory")->required();
    rnd->add_option("--gt", rnd_o->gt, "annotations JSONL to overlay as ground truth");
    rnd->add_option("--score-thresh", rnd_o->score_thresh, "minimum score to draw");
    rnd->callback([=, &action]() {
        action = [=]() { return cmd_render(*rnd_o); };
    });

    // ---- replay ----
    auto* rpl = app.add_subcommand("replay", "reconstruct an artifact from its manifest");
    auto rpl_manifest = std::make_shared<std::string>();
    auto rpl_out = std::make_shared<std::string>();
    rpl->add_option("--manifest", *rpl_manifest, "manifest JSON path")->required();
    rpl->add_option("--out", *rpl_out, "output override");
    rpl->callback([=, &action]() {
        action = [=]() { return cmd_replay(*rpl_manifest, *rpl_out); };
    });

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
        return action ? action() : 0;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace tfd
