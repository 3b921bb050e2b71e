#include "d3/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace d3 {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return Rng::derive(seed, stream).next_u64();
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

AttackSpec resolve_attack(const AttackConfig& attack, const std::vector<std::size_t>& image_shape,
                          std::uint64_t seed, Precision precision) {
    AttackSpec spec;
    spec.target_label = attack.target_label;
    spec.poison_ratio = attack.poison_ratio;
    const TriggerConfig& trig = attack.trigger;
    if (trig.kind == "patch") {
        PatchTrigger patch;
        std::size_t h = trig.size[0], w = trig.size[1];
        if (trig.top_left) {
            patch.row = (*trig.top_left)[0];
            patch.col = (*trig.top_left)[1];
        } else {
            if (h > image_shape[1] || w > image_shape[2]) {
                throw ValidationError("config key 'attack.trigger.size' exceeds the image");
            }
            patch.row = image_shape[1] - h;
            patch.col = image_shape[2] - w;
        }
        patch.pattern = Tensor::from_data({image_shape[0], h, w},
                                          std::vector<double>(image_shape[0] * h * w, trig.value),
                                          precision);
        spec.trigger = std::move(patch);
    } else if (trig.kind == "blended") {
        Rng rng = Rng::derive(seed, rng_streams::blend_pattern);
        BlendedTrigger blend;
        blend.alpha = trig.alpha;
        Tensor pattern({image_shape[0], image_shape[1], image_shape[2]}, precision);
        for (std::size_t i = 0; i < pattern.numel(); ++i) pattern.set(i, rng.next_double());
        blend.pattern = std::move(pattern);
        spec.trigger = std::move(blend);
    } else {
        spec.trigger = SinusoidalTrigger{trig.amplitude, trig.frequency};
    }
    return spec;
}

namespace {

Dataset slice_per_class(const Dataset& ds, std::size_t num_classes, std::size_t block,
                        std::size_t offset, std::size_t count, const std::string& name) {
    std::vector<std::size_t> idx;
    idx.reserve(num_classes * count);
    for (std::size_t k = 0; k < num_classes; ++k) {
        for (std::size_t i = 0; i < count; ++i) {
            idx.push_back(k * block + offset + i);
        }
    }
    auto [images, labels] = make_batch(ds, idx);
    Dataset out;
    out.images = std::move(images);
    out.labels = std::move(labels);
    out.name = name;
    return out;
}

} // namespace

PreparedData prepare_data(const ExperimentConfig& cfg) {
    const DatasetConfig& d = cfg.dataset;
    Dataset train, test;
    if (d.source == "synth") {
        // One generator call covers train and test so both draw around the
        // same class templates.
        Rng rng = Rng::derive(cfg.seed, rng_streams::data);
        std::size_t block = d.per_class + d.test_per_class;
        Dataset all = synth_blobs(d.num_classes, block, d.image_shape, d.separation, rng,
                                  cfg.precision);
        train = slice_per_class(all, d.num_classes, block, 0, d.per_class, "synth-train");
        test = slice_per_class(all, d.num_classes, block, d.per_class, d.test_per_class,
                               "synth-test");
    } else {
        train = load_idx(d.train_images, d.train_labels, cfg.precision);
        test = load_idx(d.test_images, d.test_labels, cfg.precision);
    }

    if (d.train_subsample && *d.train_subsample < train.size()) {
        Rng rng = Rng::derive(cfg.seed, rng_streams::subsample);
        train = subsample(train, *d.train_subsample, rng);
    }

    Rng split_rng = Rng::derive(cfg.seed, rng_streams::reserved_split);
    auto [rest, reserved] = split_reserved(train, d.reserved_fraction, split_rng);

    PreparedData out;
    out.attack = resolve_attack(cfg.attack, rest.image_shape(), cfg.seed, cfg.precision);
    if (cfg.attack.target_label >= rest.num_classes()) {
        throw ValidationError("config key 'attack.target_label' exceeds the dataset classes");
    }
    out.train = std::move(rest);
    out.reserved = std::move(reserved);
    out.test = std::move(test);
    return out;
}

PoisonedDataset build_poisoned_train(const PreparedData& data, const ExperimentConfig& cfg) {
    Rng rng = Rng::derive(cfg.seed, rng_streams::poison_select);
    return poison_train(data.train, data.attack, rng);
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

std::pair<Checkpoint, TrainReport> run_train(const ExperimentConfig& cfg) {
    PreparedData data = prepare_data(cfg);
    PoisonedDataset poisoned = build_poisoned_train(data, cfg);
    TrainerConfig trainer = cfg.trainer;
    trainer.sgd.shuffle_seed = derive_seed(cfg.seed, rng_streams::train_shuffle);
    return train_backdoor(poisoned, cfg.arch, trainer, cfg.seed, cfg.precision);
}

std::pair<Checkpoint, DefenseReport> run_defense(const ExperimentConfig& cfg,
                                                 const Checkpoint& ckpt) {
    PreparedData data = prepare_data(cfg);
    SgdConfig opt = cfg.defense.optimizer;
    opt.shuffle_seed = derive_seed(cfg.seed, rng_streams::defense_shuffle);
    if (cfg.defense.kind == "ft") {
        return finetune_vanilla(ckpt, data.reserved, opt);
    }
    if (cfg.defense.kind == "ft-sam") {
        SamConfig sam{opt, cfg.defense.sam_rho.value_or(0.05)};
        return finetune_sam(ckpt, data.reserved, sam);
    }
    D3Config d3cfg;
    d3cfg.epsilon = cfg.defense.epsilon;
    d3cfg.lambda = cfg.defense.lambda;
    d3cfg.smoothing_delta = cfg.defense.smoothing_delta;
    d3cfg.optimizer = opt;
    if (!cfg.defense.selector.empty()) {
        d3cfg.selector = ParamSelector::from_pattern(cfg.defense.selector);
    }
    return d3_detoxify(ckpt, data.reserved, d3cfg);
}

namespace {

std::string defense_name_for_stage(const std::string& stage) {
    if (stage.rfind("backdoored", 0) == 0) return "none";
    return stage.empty() ? "none" : stage;
}

} // namespace

std::vector<MetricsRecord> run_eval(const ExperimentConfig& cfg,
                                    const std::vector<Checkpoint>& ckpts) {
    if (ckpts.empty()) throw ContractError("eval requires at least one checkpoint");
    PreparedData data = prepare_data(cfg);
    Dataset poisoned_eval = build_eval_poisoned(data.test, data.attack);
    std::string attack_name = trigger_kind(data.attack.trigger);

    std::vector<MetricsRecord> records;
    double acc0 = 0.0, asr0 = 0.0;
    for (std::size_t i = 0; i < ckpts.size(); ++i) {
        Model model = model_from_checkpoint(ckpts[i], data.test.image_shape());
        MetricsRecord rec;
        rec.acc = accuracy(model, data.test);
        rec.asr = asr(model, poisoned_eval);
        rec.stage = ckpts[i].meta.stage;
        rec.attack = attack_name;
        rec.defense = defense_name_for_stage(ckpts[i].meta.stage);
        if (i == 0) {
            acc0 = rec.acc;
            asr0 = rec.asr;
        } else {
            rec.der = der(acc0, asr0, rec.acc, rec.asr);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

TrajectoryReport run_trajectory(const ExperimentConfig& cfg, const Checkpoint& a,
                                const Checkpoint& b) {
    if (a.meta.arch != b.meta.arch) {
        throw ContractError("trajectory endpoints use different architectures: '" + a.meta.arch +
                            "' vs '" + b.meta.arch + "'");
    }
    PreparedData data = prepare_data(cfg);
    Model proto = model_from_checkpoint(a, data.test.image_shape());
    std::vector<double> grid = make_t_grid(cfg.t_start, cfg.t_end, cfg.t_step);
    return trajectory_scan(proto, a.params, b.params, data.test, data.attack, grid);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string metrics_to_csv(const std::vector<MetricsRecord>& records) {
    std::string out = "attack,defense,acc,asr,der\n";
    for (const auto& r : records) {
        out += r.attack + "," + r.defense + "," + format_double(r.acc) + "," +
               format_double(r.asr) + ",";
        if (r.der) out += format_double(*r.der);
        out += "\n";
    }
    return out;
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "attack,defense,acc,asr,der") {
        throw FormatError("metrics CSV: bad header");
    }
    std::vector<MetricsRecord> records;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        if (fields.size() != 5) throw FormatError("metrics CSV: bad row '" + line + "'");
        MetricsRecord rec;
        rec.attack = fields[0];
        rec.defense = fields[1];
        rec.acc = std::stod(fields[2]);
        rec.asr = std::stod(fields[3]);
        if (!fields[4].empty()) rec.der = std::stod(fields[4]);
        records.push_back(std::move(rec));
    }
    return records;
}

std::string trajectory_to_csv(const TrajectoryReport& report) {
    std::string out = "t,clean_loss,backdoor_loss,acc,asr\n";
    for (const auto& p : report.points) {
        out += format_double(p.t) + "," + format_double(p.clean_loss) + "," +
               format_double(p.backdoor_loss) + "," + format_double(p.acc) + "," +
               format_double(p.asr) + "\n";
    }
    return out;
}

std::string train_report_to_json(const TrainReport& report) {
    nlohmann::json doc;
    doc["stage"] = report.stage;
    doc["epochs"] = nlohmann::json::array();
    for (const auto& e : report.epochs) {
        doc["epochs"].push_back({{"loss", e.loss}, {"accuracy", e.accuracy}});
    }
    return doc.dump(2) + "\n";
}

std::string defense_report_to_json(const DefenseReport& report) {
    nlohmann::json doc;
    doc["stage"] = report.stage;
    doc["epochs"] = nlohmann::json::array();
    for (const auto& e : report.epochs) {
        doc["epochs"].push_back({{"clean_loss", e.clean_loss},
                                 {"distance", e.distance},
                                 {"penalty", e.penalty}});
    }
    return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + path.string());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw FormatError("failed writing " + path.string());
}

void ensure_output_dir(const ExperimentConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.output_dir, ec);
    if (ec) throw FormatError("cannot create output directory " + cfg.output_dir.string());
}

} // namespace

void cmd_gen_data(const ExperimentConfig& cfg) {
    if (cfg.dataset.source != "synth") {
        throw ValidationError("gen-data requires config key 'dataset.source' = \"synth\"");
    }
    ensure_output_dir(cfg);
    const DatasetConfig& d = cfg.dataset;
    Rng rng = Rng::derive(cfg.seed, rng_streams::data);
    std::size_t block = d.per_class + d.test_per_class;
    Dataset all = synth_blobs(d.num_classes, block, d.image_shape, d.separation, rng,
                              cfg.precision);
    Dataset train = slice_per_class(all, d.num_classes, block, 0, d.per_class, "synth-train");
    Dataset test =
        slice_per_class(all, d.num_classes, block, d.per_class, d.test_per_class, "synth-test");
    write_idx(train, cfg.output_dir / "synth_train_images.idx",
              cfg.output_dir / "synth_train_labels.idx");
    write_idx(test, cfg.output_dir / "synth_test_images.idx",
              cfg.output_dir / "synth_test_labels.idx");
}

void cmd_poison(const ExperimentConfig& cfg) {
    ensure_output_dir(cfg);
    PreparedData data = prepare_data(cfg);
    PoisonedDataset poisoned = build_poisoned_train(data, cfg);
    write_idx(poisoned.dataset, cfg.output_dir / "poisoned_train_images.idx",
              cfg.output_dir / "poisoned_train_labels.idx");
    {
        std::ofstream os(cfg.output_dir / "poison_mask.bin", std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot write poison mask");
        os.write(reinterpret_cast<const char*>(poisoned.mask.data()),
                 static_cast<std::streamsize>(poisoned.mask.size()));
    }
    Dataset eval = build_eval_poisoned(data.test, data.attack);
    write_idx(eval, cfg.output_dir / "poisoned_eval_images.idx",
              cfg.output_dir / "poisoned_eval_labels.idx");
}

void cmd_train(const ExperimentConfig& cfg) {
    ensure_output_dir(cfg);
    auto [ckpt, report] = run_train(cfg);
    save_checkpoint(ckpt, cfg.output_dir / "backdoored.d3cp");
    write_text(cfg.output_dir / "train_report.json", train_report_to_json(report));
}

void cmd_defend(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint_path) {
    ensure_output_dir(cfg);
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    auto [defended, report] = run_defense(cfg, ckpt);
    save_checkpoint(defended, cfg.output_dir / ("defended_" + cfg.defense.kind + ".d3cp"));
    write_text(cfg.output_dir / ("defense_report_" + cfg.defense.kind + ".json"),
               defense_report_to_json(report));
}

void cmd_eval(const ExperimentConfig& cfg,
              const std::vector<std::filesystem::path>& checkpoint_paths) {
    ensure_output_dir(cfg);
    std::vector<Checkpoint> ckpts;
    for (const auto& p : checkpoint_paths) ckpts.push_back(load_checkpoint(p));
    write_text(cfg.output_dir / "metrics.csv", metrics_to_csv(run_eval(cfg, ckpts)));
}

void cmd_trajectory(const ExperimentConfig& cfg, const std::filesystem::path& ckpt_a,
                    const std::filesystem::path& ckpt_b) {
    ensure_output_dir(cfg);
    Checkpoint a = load_checkpoint(ckpt_a);
    Checkpoint b = load_checkpoint(ckpt_b);
    write_text(cfg.output_dir / "trajectory.csv", trajectory_to_csv(run_trajectory(cfg, a, b)));
}

} // namespace d3
