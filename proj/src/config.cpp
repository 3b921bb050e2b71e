#include "d3/config.hpp"

#include <fstream>

namespace d3 {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::string& path,
                    std::initializer_list<const char*> known) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : known) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw ValidationError("unknown config key '" +
                                  (path.empty() ? it.key() : path + "." + it.key()) + "'");
        }
    }
}

const json* get(const json& obj, const char* key) {
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
}

template <typename T>
T require(const json& obj, const std::string& path, const char* key) {
    const json* v = get(obj, key);
    if (!v) throw ValidationError("missing config key '" + path + "." + key + "'");
    try {
        return v->get<T>();
    } catch (const json::exception&) {
        throw ValidationError("config key '" + path + "." + key + "' has the wrong type");
    }
}

template <typename T>
T value_or(const json& obj, const std::string& path, const char* key, T fallback) {
    const json* v = get(obj, key);
    if (!v) return fallback;
    try {
        return v->get<T>();
    } catch (const json::exception&) {
        throw ValidationError("config key '" + path + "." + key + "' has the wrong type");
    }
}

SgdConfig parse_optimizer(const json& obj, const std::string& path, const SgdConfig& defaults) {
    reject_unknown(obj, path,
                   {"lr", "momentum", "weight_decay", "epochs", "batch_size", "sam_rho"});
    SgdConfig cfg = defaults;
    cfg.learning_rate = value_or(obj, path, "lr", defaults.learning_rate);
    cfg.momentum = value_or(obj, path, "momentum", defaults.momentum);
    cfg.weight_decay = value_or(obj, path, "weight_decay", defaults.weight_decay);
    cfg.epochs = value_or(obj, path, "epochs", defaults.epochs);
    cfg.batch_size = value_or(obj, path, "batch_size", defaults.batch_size);
    cfg.validate();
    return cfg;
}

DatasetConfig parse_dataset(const json& obj) {
    reject_unknown(obj, "dataset",
                   {"source", "train_images", "train_labels", "test_images", "test_labels",
                    "num_classes", "per_class", "test_per_class", "image_shape", "separation",
                    "train_subsample", "reserved_fraction"});
    DatasetConfig cfg;
    cfg.source = value_or<std::string>(obj, "dataset", "source", "synth");
    if (cfg.source == "idx") {
        cfg.train_images = require<std::string>(obj, "dataset", "train_images");
        cfg.train_labels = require<std::string>(obj, "dataset", "train_labels");
        cfg.test_images = require<std::string>(obj, "dataset", "test_images");
        cfg.test_labels = require<std::string>(obj, "dataset", "test_labels");
    } else if (cfg.source == "synth") {
        cfg.num_classes = value_or<std::size_t>(obj, "dataset", "num_classes", 10);
        cfg.per_class = value_or<std::size_t>(obj, "dataset", "per_class", 1000);
        cfg.test_per_class = value_or<std::size_t>(obj, "dataset", "test_per_class", 100);
        cfg.image_shape =
            value_or<std::vector<std::size_t>>(obj, "dataset", "image_shape", {1, 16, 16});
        cfg.separation = value_or(obj, "dataset", "separation", 0.9);
        if (cfg.image_shape.size() != 3) {
            throw ValidationError("config key 'dataset.image_shape' must be [C,H,W]");
        }
        if (cfg.num_classes < 2) {
            throw ValidationError("config key 'dataset.num_classes' must be >= 2");
        }
    } else {
        throw ValidationError("config key 'dataset.source' must be \"synth\" or \"idx\"");
    }
    if (const json* v = get(obj, "train_subsample")) {
        cfg.train_subsample = v->get<std::size_t>();
    }
    cfg.reserved_fraction = value_or(obj, "dataset", "reserved_fraction", 0.05);
    if (!(cfg.reserved_fraction > 0.0 && cfg.reserved_fraction < 1.0)) {
        throw ValidationError("config key 'dataset.reserved_fraction' must be in (0,1)");
    }
    return cfg;
}

TriggerConfig parse_trigger(const json& obj) {
    reject_unknown(obj, "attack.trigger",
                   {"kind", "top_left", "size", "value", "alpha", "amplitude", "frequency"});
    TriggerConfig cfg;
    cfg.kind = require<std::string>(obj, "attack.trigger", "kind");
    if (cfg.kind == "patch") {
        if (const json* v = get(obj, "top_left")) {
            cfg.top_left = v->get<std::vector<std::size_t>>();
            if (cfg.top_left->size() != 2) {
                throw ValidationError("config key 'attack.trigger.top_left' must be [row, col]");
            }
        }
        cfg.size = value_or<std::vector<std::size_t>>(obj, "attack.trigger", "size", {3, 3});
        if (cfg.size.size() != 2) {
            throw ValidationError("config key 'attack.trigger.size' must be [h, w]");
        }
        cfg.value = value_or(obj, "attack.trigger", "value", 1.0);
    } else if (cfg.kind == "blended") {
        cfg.alpha = value_or(obj, "attack.trigger", "alpha", 0.1);
        if (cfg.alpha < 0.0 || cfg.alpha > 1.0) {
            throw ValidationError("config key 'attack.trigger.alpha' must be in [0,1]");
        }
    } else if (cfg.kind == "sinusoidal") {
        cfg.amplitude = value_or(obj, "attack.trigger", "amplitude", 0.08);
        cfg.frequency = value_or(obj, "attack.trigger", "frequency", 6);
        if (cfg.amplitude < 0.0) {
            throw ValidationError("config key 'attack.trigger.amplitude' must be >= 0");
        }
        if (cfg.frequency < 1) {
            throw ValidationError("config key 'attack.trigger.frequency' must be >= 1");
        }
    } else {
        throw ValidationError(
            "config key 'attack.trigger.kind' must be \"patch\", \"blended\" or \"sinusoidal\"");
    }
    return cfg;
}

AttackConfig parse_attack(const json& obj) {
    reject_unknown(obj, "attack", {"trigger", "target_label", "poison_ratio"});
    AttackConfig cfg;
    const json* trig = get(obj, "trigger");
    if (!trig) throw ValidationError("missing config key 'attack.trigger'");
    cfg.trigger = parse_trigger(*trig);
    cfg.target_label = require<int>(obj, "attack", "target_label");
    cfg.poison_ratio = require<double>(obj, "attack", "poison_ratio");
    if (cfg.target_label < 0) {
        throw ValidationError("config key 'attack.target_label' must be >= 0");
    }
    if (cfg.poison_ratio < 0.0 || cfg.poison_ratio > 1.0) {
        throw ValidationError("config key 'attack.poison_ratio' must be in [0,1]");
    }
    return cfg;
}

DefenseConfig parse_defense(const json& obj) {
    reject_unknown(obj, "defense", {"kind", "optimizer", "d3"});
    DefenseConfig cfg;
    cfg.kind = require<std::string>(obj, "defense", "kind");
    if (cfg.kind != "ft" && cfg.kind != "ft-sam" && cfg.kind != "d3") {
        throw ValidationError("config key 'defense.kind' must be \"ft\", \"ft-sam\" or \"d3\"");
    }
    if (const json* opt = get(obj, "optimizer")) {
        cfg.optimizer = parse_optimizer(*opt, "defense.optimizer", cfg.optimizer);
        if (const json* rho = get(*opt, "sam_rho")) cfg.sam_rho = rho->get<double>();
    }
    if (cfg.kind == "ft-sam" && !cfg.sam_rho) cfg.sam_rho = 0.05;
    if (const json* d3obj = get(obj, "d3")) {
        if (cfg.kind != "d3") {
            throw ValidationError("config key 'defense.d3' requires defense.kind \"d3\"");
        }
        reject_unknown(*d3obj, "defense.d3",
                       {"epsilon", "lambda", "selector", "smoothing_delta"});
        cfg.epsilon = value_or(*d3obj, "defense.d3", "epsilon", 0.1);
        cfg.lambda = value_or(*d3obj, "defense.d3", "lambda", 10.0);
        cfg.selector = value_or<std::string>(*d3obj, "defense.d3", "selector", "");
        cfg.smoothing_delta = value_or(*d3obj, "defense.d3", "smoothing_delta", 1e-8);
        if (cfg.epsilon < 0.0) throw ValidationError("config key 'defense.d3.epsilon' must be >= 0");
        if (cfg.lambda < 0.0) throw ValidationError("config key 'defense.d3.lambda' must be >= 0");
        if (cfg.smoothing_delta < 0.0) {
            throw ValidationError("config key 'defense.d3.smoothing_delta' must be >= 0");
        }
    }
    return cfg;
}

} // namespace

ExperimentConfig parse_config(const json& doc) {
    if (!doc.is_object()) throw ValidationError("config root must be a JSON object");
    reject_unknown(doc, "",
                   {"seed", "precision", "dataset", "arch", "attack", "optimizer", "defense",
                    "trajectory", "output_dir"});
    ExperimentConfig cfg;
    cfg.seed = value_or<std::uint64_t>(doc, "", "seed", 0);

    std::string prec = value_or<std::string>(doc, "", "precision", "double");
    if (prec == "double") {
        cfg.precision = Precision::f64;
    } else if (prec == "single") {
        cfg.precision = Precision::f32;
    } else {
        throw ValidationError("config key 'precision' must be \"single\" or \"double\"");
    }

    const json* ds = get(doc, "dataset");
    if (!ds) throw ValidationError("missing config key 'dataset'");
    cfg.dataset = parse_dataset(*ds);

    cfg.arch = value_or<std::string>(doc, "", "arch", "small_cnn");
    {
        bool known = false;
        for (const auto& a : known_architectures()) known = known || a == cfg.arch;
        if (!known) {
            std::string names;
            for (const auto& a : known_architectures()) {
                if (!names.empty()) names += ", ";
                names += a;
            }
            throw ValidationError("config key 'arch' must be one of: " + names);
        }
    }

    const json* attack = get(doc, "attack");
    if (!attack) throw ValidationError("missing config key 'attack'");
    cfg.attack = parse_attack(*attack);

    if (const json* opt = get(doc, "optimizer")) {
        cfg.trainer.sgd = parse_optimizer(*opt, "optimizer", SgdConfig{});
        if (const json* rho = get(*opt, "sam_rho")) {
            cfg.trainer.sam_rho = rho->get<double>();
            if (!(*cfg.trainer.sam_rho > 0.0)) {
                throw ValidationError("config key 'optimizer.sam_rho' must be > 0");
            }
        }
    } else {
        cfg.trainer.sgd = SgdConfig{};
    }

    if (const json* def = get(doc, "defense")) {
        cfg.defense = parse_defense(*def);
    }

    if (const json* traj = get(doc, "trajectory")) {
        reject_unknown(*traj, "trajectory", {"t_start", "t_end", "t_step"});
        cfg.t_start = value_or(*traj, "trajectory", "t_start", 0.0);
        cfg.t_end = value_or(*traj, "trajectory", "t_end", 2.0);
        cfg.t_step = value_or(*traj, "trajectory", "t_step", 0.1);
        if (!(cfg.t_step > 0.0) || !(cfg.t_end > cfg.t_start)) {
            throw ValidationError("config section 'trajectory' requires t_end > t_start and "
                                  "t_step > 0");
        }
    }

    cfg.output_dir = value_or<std::string>(doc, "", "output_dir", "out");
    return cfg;
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config file " + path.string());
    nlohmann::json doc = nlohmann::json::parse(is, nullptr, false);
    if (doc.is_discarded()) {
        throw ValidationError("config file " + path.string() + " is not valid JSON");
    }
    return parse_config(doc);
}

} // namespace d3
